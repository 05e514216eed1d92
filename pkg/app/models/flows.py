"""
Invertible flow models: affine couplings, recursive (hierarchical) coupling
blocks, flow stacks and the block-triangular conditional flow.

All modules act on batches of shape (batch, width). Log-determinants are
returned per example, shape (batch,).
"""
import copy
import logging
import math
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from app.core import diffcore as dc
from app.core.diffcore import Tensor
from app.core.exceptions import DimensionError, UsageError

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[np.ndarray, Tensor]

DEFAULT_CLAMP = 5.0
DEFAULT_NEGATIVE_SLOPE = 0.01
LOG_2PI = math.log(2.0 * math.pi)


def _as_batch(value: ArrayOrTensor, width: int, what: str) -> Tuple[Tensor, bool]:
    """Promote a vector to a batch of one; returns (tensor, was_vector)."""
    tensor = dc.as_tensor(value)
    was_vector = tensor.ndim == 1
    if was_vector:
        tensor = dc.reshape(tensor, (1, tensor.shape[0]))
    if tensor.ndim != 2 or tensor.shape[1] != width:
        raise DimensionError(f"{what} must have width {width}, got shape {tensor.shape}")
    return tensor, was_vector


def _zeros_logdet(batch: int) -> Tensor:
    return Tensor(np.zeros(batch))


def standard_normal_logpdf(z: Tensor) -> Tensor:
    """Row-wise log N(z; 0, I) including the -(d/2) log 2π constant."""
    d = z.shape[-1]
    return dc.scale(dc.sq_norm(z, axis=-1), -0.5) - 0.5 * d * LOG_2PI


class FlowModule:
    """Parameter bookkeeping shared by all flow modules."""

    def _children(self) -> Iterator[Tuple[str, Union[Tensor, "FlowModule"]]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        named = []
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Tensor):
                named.append((full, child))
            else:
                named.extend(child.named_parameters(prefix=f"{full}."))
        return named

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def randomize(self, rng: np.random.Generator, scale: float = 0.3) -> "FlowModule":
        """Overwrite every parameter with N(0, scale²) draws (zero-init layers included)."""
        for p in self.parameters():
            p.values = rng.normal(scale=scale, size=p.shape)
        return self

    def freeze(self) -> "FlowModule":
        """Make every parameter constant and read-only."""
        for p in self.parameters():
            p.requires_grad = False
            p.values.setflags(write=False)
        return self

    def copy(self) -> "FlowModule":
        return copy.deepcopy(self)


class Conditioner(FlowModule):
    """Residual feed-forward net mapping (kept half, condition) to (scale, shift)."""

    def __init__(
        self,
        in_width: int,
        hidden: int,
        out_width: int,
        rng: np.random.Generator,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        self.in_width = in_width
        self.hidden = hidden
        self.out_width = out_width
        self.negative_slope = negative_slope
        self.w_in = Tensor(rng.normal(scale=math.sqrt(2.0 / in_width), size=(in_width, hidden)), True)
        self.b_in = Tensor(np.zeros(hidden), True)
        self.w_hidden = Tensor(rng.normal(scale=math.sqrt(1.0 / hidden), size=(hidden, hidden)), True)
        self.b_hidden = Tensor(np.zeros(hidden), True)
        # zero output layer: every fresh flow is the identity
        self.w_out = Tensor(np.zeros((hidden, out_width)), True)
        self.b_out = Tensor(np.zeros(out_width), True)

    def _children(self):
        yield "w_in", self.w_in
        yield "b_in", self.b_in
        yield "w_hidden", self.w_hidden
        yield "b_hidden", self.b_hidden
        yield "w_out", self.w_out
        yield "b_out", self.b_out

    def __call__(self, inputs: Tensor) -> Tensor:
        h = dc.leaky_relu(inputs @ self.w_in + self.b_in, self.negative_slope)
        h = h + dc.leaky_relu(h @ self.w_hidden + self.b_hidden, self.negative_slope)
        return h @ self.w_out + self.b_out


class AffineCouplingLayer(FlowModule):
    """v1 = u1, v2 = u2 * exp(s(u1, c)) + t(u1, c), log-det = sum(s)."""

    def __init__(
        self,
        n_keep: int,
        n_transform: int,
        rng: np.random.Generator,
        cond_dim: int = 0,
        hidden: int = 64,
        clamp: float = DEFAULT_CLAMP,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        if n_keep < 1 or n_transform < 1:
            raise UsageError(f"coupling halves must be non-empty, got {n_keep}/{n_transform}")
        self.n_keep = n_keep
        self.n_transform = n_transform
        self.cond_dim = cond_dim
        self.clamp = clamp
        self.conditioner = Conditioner(n_keep + cond_dim, hidden, 2 * n_transform, rng, negative_slope)

    @property
    def width(self) -> int:
        return self.n_keep + self.n_transform

    def _children(self):
        yield "conditioner", self.conditioner

    def _scale_shift(self, kept: Tensor, c: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
        if self.cond_dim:
            if c is None or c.shape != (kept.shape[0], self.cond_dim):
                got = None if c is None else c.shape
                raise DimensionError(f"coupling expects a condition of shape ({kept.shape[0]}, {self.cond_dim}), got {got}")
            inputs = dc.concat([kept, c], axis=1)
        else:
            inputs = kept
        raw_scale, shift = dc.split(self.conditioner(inputs), [self.n_transform, self.n_transform], axis=1)
        log_scale = dc.scale(dc.tanh(dc.scale(raw_scale, 1.0 / self.clamp)), self.clamp)
        return log_scale, shift

    def _check(self, u: Tensor) -> None:
        if u.ndim != 2 or u.shape[1] != self.width:
            raise DimensionError(f"coupling expects width {self.width}, got shape {u.shape}")

    def forward(self, u: Tensor, c: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        self._check(u)
        kept, moved = dc.split(u, [self.n_keep, self.n_transform], axis=1)
        log_scale, shift = self._scale_shift(kept, c)
        out = moved * dc.exp(log_scale) + shift
        return dc.concat([kept, out], axis=1), dc.sum(log_scale, axis=1)

    def inverse(self, v: Tensor, c: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        self._check(v)
        kept, moved = dc.split(v, [self.n_keep, self.n_transform], axis=1)
        log_scale, shift = self._scale_shift(kept, c)
        out = (moved - shift) * dc.exp(-log_scale)
        return dc.concat([kept, out], axis=1), -dc.sum(log_scale, axis=1)


class RecursiveCouplingBlock(FlowModule):
    """Hierarchical coupling: couple the two halves, then recurse into each half.

    Halves are ceil(w/2) and floor(w/2); width 2 is a single 1/1 coupling and
    width 1 is the identity. The outermost block reverses coordinates on entry.
    """

    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        cond_dim: int = 0,
        hidden: int = 64,
        clamp: float = DEFAULT_CLAMP,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
        reverse_on_entry: bool = True,
    ):
        self.width = width
        self.cond_dim = cond_dim
        self.perm = np.arange(width)[::-1].copy() if reverse_on_entry else None
        self.coupling = None
        self.left = None
        self.right = None
        if width >= 2:
            n_keep, n_transform = (width + 1) // 2, width // 2
            self.coupling = AffineCouplingLayer(
                n_keep, n_transform, rng, cond_dim=cond_dim, hidden=hidden,
                clamp=clamp, negative_slope=negative_slope,
            )
            if width > 2:
                kwargs = dict(cond_dim=cond_dim, hidden=hidden, clamp=clamp,
                              negative_slope=negative_slope, reverse_on_entry=False)
                self.left = RecursiveCouplingBlock(n_keep, rng, **kwargs)
                self.right = RecursiveCouplingBlock(n_transform, rng, **kwargs)

    def _children(self):
        if self.coupling is not None:
            yield "coupling", self.coupling
        if self.left is not None:
            yield "left", self.left
            yield "right", self.right

    def forward(self, u: Tensor, c: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        if self.perm is not None:
            u = dc.permute(u, self.perm, axis=1)
        if self.coupling is None:
            return u, _zeros_logdet(u.shape[0])
        v, logdet = self.coupling.forward(u, c)
        if self.left is None:
            return v, logdet
        kept, moved = dc.split(v, [self.left.width, self.right.width], axis=1)
        kept, logdet_left = self.left.forward(kept, c)
        moved, logdet_right = self.right.forward(moved, c)
        return dc.concat([kept, moved], axis=1), logdet + logdet_left + logdet_right

    def inverse(self, v: Tensor, c: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        if self.coupling is None:
            u, logdet = v, _zeros_logdet(v.shape[0])
        elif self.left is None:
            u, logdet = self.coupling.inverse(v, c)
        else:
            kept, moved = dc.split(v, [self.left.width, self.right.width], axis=1)
            kept, logdet_left = self.left.inverse(kept, c)
            moved, logdet_right = self.right.inverse(moved, c)
            u, logdet = self.coupling.inverse(dc.concat([kept, moved], axis=1), c)
            logdet = logdet + logdet_left + logdet_right
        if self.perm is not None:
            u = dc.permute(u, np.argsort(self.perm), axis=1)
        return u, logdet


class FlowStack(FlowModule):
    """Composition of ``n_blocks`` recursive coupling blocks sharing one condition."""

    def __init__(
        self,
        dim: int,
        n_blocks: int,
        rng: np.random.Generator,
        cond_dim: int = 0,
        hidden: int = 64,
        clamp: float = DEFAULT_CLAMP,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        if dim < 1 or n_blocks < 1:
            raise UsageError(f"a flow stack needs positive dim and block count, got {dim}, {n_blocks}")
        self.dim = dim
        self.n_blocks = n_blocks
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.clamp = clamp
        self.negative_slope = negative_slope
        self.blocks = [
            RecursiveCouplingBlock(dim, rng, cond_dim=cond_dim, hidden=hidden,
                                   clamp=clamp, negative_slope=negative_slope)
            for _ in range(n_blocks)
        ]

    def _children(self):
        for i, block in enumerate(self.blocks):
            yield f"blocks.{i}", block

    def _condition(self, c: Optional[ArrayOrTensor], batch: int) -> Optional[Tensor]:
        if not self.cond_dim:
            if c is not None:
                raise DimensionError("unconditional stack received a condition")
            return None
        if c is None:
            raise DimensionError(f"stack expects a condition of width {self.cond_dim}")
        c = dc.as_tensor(c)
        if c.ndim == 1:
            # one condition shared by the whole batch
            c = Tensor(np.broadcast_to(c.values, (batch, c.shape[0])))
        if c.shape != (batch, self.cond_dim):
            raise DimensionError(f"condition must have shape ({batch}, {self.cond_dim}), got {c.shape}")
        return c

    def forward(self, u: Tensor, c: Optional[ArrayOrTensor] = None) -> Tuple[Tensor, Tensor]:
        if u.ndim != 2 or u.shape[1] != self.dim:
            raise DimensionError(f"stack expects width {self.dim}, got shape {u.shape}")
        c = self._condition(c, u.shape[0])
        logdet = _zeros_logdet(u.shape[0])
        for block in self.blocks:
            u, block_logdet = block.forward(u, c)
            logdet = logdet + block_logdet
        return u, logdet

    def inverse(self, z: Tensor, c: Optional[ArrayOrTensor] = None) -> Tuple[Tensor, Tensor]:
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f"stack expects width {self.dim}, got shape {z.shape}")
        c = self._condition(c, z.shape[0])
        logdet = _zeros_logdet(z.shape[0])
        for block in reversed(self.blocks):
            z, block_logdet = block.inverse(z, c)
            logdet = logdet + block_logdet
        return z, logdet

    def log_density(self, u: Tensor, c: Optional[ArrayOrTensor] = None) -> Tensor:
        """log π_z(stack(u)) + log|det ∇ stack(u)| per row."""
        z, logdet = self.forward(u, c)
        return standard_normal_logpdf(z) + logdet


class ConditionalFlow(FlowModule):
    """G(y, x) = [G_y(y); G_x(x | G_y(y))], block-triangular by construction.

    The x-lane conditioners receive z_y = G_y(y) rather than raw y.
    """

    def __init__(
        self,
        dx: int,
        dy: int,
        n_blocks: int,
        rng: np.random.Generator,
        hidden: int = 64,
        clamp: float = DEFAULT_CLAMP,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        self.dx = dx
        self.dy = dy
        self.y_lane = FlowStack(dy, n_blocks, rng, hidden=hidden, clamp=clamp, negative_slope=negative_slope)
        self.x_lane = FlowStack(dx, n_blocks, rng, cond_dim=dy, hidden=hidden, clamp=clamp,
                                negative_slope=negative_slope)

    @classmethod
    def from_lanes(cls, y_lane: FlowStack, x_lane: FlowStack) -> "ConditionalFlow":
        if x_lane.cond_dim != y_lane.dim:
            raise DimensionError(f"x-lane condition width {x_lane.cond_dim} != y-lane width {y_lane.dim}")
        flow = cls.__new__(cls)
        flow.dx, flow.dy = x_lane.dim, y_lane.dim
        flow.y_lane, flow.x_lane = y_lane, x_lane
        return flow

    @property
    def n_blocks(self) -> int:
        return self.x_lane.n_blocks

    def _children(self):
        yield "y_lane", self.y_lane
        yield "x_lane", self.x_lane

    def forward(self, y: Tensor, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        if y.shape[0] != x.shape[0]:
            raise DimensionError(f"y and x batch sizes differ: {y.shape[0]} vs {x.shape[0]}")
        z_y, logdet_y = self.y_lane.forward(y)
        z_x, logdet_x = self.x_lane.forward(x, z_y)
        return z_y, z_x, logdet_y + logdet_x

    def condition(self, y: ArrayOrTensor) -> Tensor:
        """z_y = G_y(y) for a batch (or a single vector) of observations."""
        y, _ = _as_batch(y, self.dy, "y")
        return self.y_lane.forward(y)[0]

    def posterior_sample(self, y: ArrayOrTensor, z: Tensor) -> Tuple[Tensor, Tensor]:
        """x = G_x^{-1}(z | G_y(y)); returns x and log|det ∇_z x|."""
        z_y = self.condition(y)
        if z_y.shape[0] == 1 and z.shape[0] != 1:
            z_y = Tensor(z_y.values[0])
        return self.x_lane.inverse(z, z_y)


class FlowSampler(FlowModule):
    """T(z) = stack^{-1}(z | c) with a fixed (possibly absent) context c."""

    def __init__(self, stack: FlowStack, context: Optional[np.ndarray] = None):
        self.stack = stack
        self.context = None if context is None else np.asarray(context, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.stack.dim

    def _children(self):
        yield "stack", self.stack

    def sample_with_logdet(self, z: Tensor, y: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Map latents to model space; ``y`` is ignored (the context is bound)."""
        return self.stack.inverse(z, self.context)

    def log_density(self, x: Tensor) -> Tensor:
        return self.stack.log_density(x, self.context)


class ConditionalSampler(FlowModule):
    """Posterior sampler T(z; y) = G_x^{-1}(z | G_y(y)) with a frozen y-lane.

    Only the x-lane is trainable; ``bind`` fixes an observation and returns a
    ``FlowSampler`` sharing the x-lane parameters.
    """

    def __init__(self, y_lane: FlowStack, x_lane: FlowStack):
        self.y_lane = y_lane
        self.x_lane = x_lane

    @property
    def dim(self) -> int:
        return self.x_lane.dim

    def _children(self):
        yield "y_lane", self.y_lane
        yield "x_lane", self.x_lane

    def condition(self, y: ArrayOrTensor) -> np.ndarray:
        with dc.no_grad():
            y, _ = _as_batch(y, self.y_lane.dim, "y")
            return self.y_lane.forward(y)[0].values[0]

    def bind(self, y: ArrayOrTensor) -> FlowSampler:
        return FlowSampler(self.x_lane, self.condition(y))

    def sample_with_logdet(self, z: Tensor, y: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        if y is None:
            raise UsageError("a conditional sampler needs the observation y")
        return self.x_lane.inverse(z, self.condition(y))

    def log_density(self, x: Tensor, y: np.ndarray) -> Tensor:
        return self.x_lane.log_density(x, self.condition(y))

    def to_conditional_flow(self) -> ConditionalFlow:
        return ConditionalFlow.from_lanes(self.y_lane, self.x_lane)


class FrozenConditionalPrior:
    """Immutable snapshot of a pretrained conditional flow, used only as a prior."""

    def __init__(self, flow: ConditionalFlow):
        self._flow = flow.copy().freeze()

    @property
    def dx(self) -> int:
        return self._flow.dx

    @property
    def dy(self) -> int:
        return self._flow.dy

    def logprob(self, y: ArrayOrTensor, x: ArrayOrTensor) -> Tensor:
        """log π_z(G_x(x | G_y(y))) + log|det ∇_x G_x| per row of x."""
        x, _ = _as_batch(x, self.dx, "x")
        with dc.no_grad():
            z_y = self._flow.condition(y)
        c = z_y.values[0] if z_y.shape[0] == 1 else z_y.values
        return self._flow.x_lane.log_density(x, c)


# ------------------------------------------------------- operation entry points

def _unbatch(t: Tensor, was_vector: bool) -> Tensor:
    return dc.reshape(t, t.shape[1:]) if was_vector else t


def _unbatch_logdet(logdet: Tensor, was_vector: bool) -> Tensor:
    return dc.reshape(logdet, ()) if was_vector else logdet


def coupling_forward(layer: AffineCouplingLayer, u: ArrayOrTensor, c: Optional[ArrayOrTensor] = None):
    u, vec = _as_batch(u, layer.width, "u")
    c = None if c is None else _as_batch(c, layer.cond_dim, "c")[0]
    v, logdet = layer.forward(u, c)
    return _unbatch(v, vec), _unbatch_logdet(logdet, vec)


def coupling_inverse(layer: AffineCouplingLayer, v: ArrayOrTensor, c: Optional[ArrayOrTensor] = None):
    v, vec = _as_batch(v, layer.width, "v")
    c = None if c is None else _as_batch(c, layer.cond_dim, "c")[0]
    u, logdet = layer.inverse(v, c)
    return _unbatch(u, vec), _unbatch_logdet(logdet, vec)


def stack_forward(stack: FlowStack, u: ArrayOrTensor, conditions: Optional[ArrayOrTensor] = None):
    u, vec = _as_batch(u, stack.dim, "u")
    z, logdet = stack.forward(u, conditions)
    return _unbatch(z, vec), _unbatch_logdet(logdet, vec)


def stack_inverse(stack: FlowStack, z: ArrayOrTensor, conditions: Optional[ArrayOrTensor] = None):
    z, vec = _as_batch(z, stack.dim, "z")
    u, logdet = stack.inverse(z, conditions)
    return _unbatch(u, vec), _unbatch_logdet(logdet, vec)


def conditional_forward(flow: ConditionalFlow, y: ArrayOrTensor, x: ArrayOrTensor):
    y, vec = _as_batch(y, flow.dy, "y")
    x, _ = _as_batch(x, flow.dx, "x")
    z_y, z_x, logdet = flow.forward(y, x)
    return _unbatch(z_y, vec), _unbatch(z_x, vec), _unbatch_logdet(logdet, vec)


def posterior_sample(flow: ConditionalFlow, y: ArrayOrTensor, z: ArrayOrTensor) -> np.ndarray:
    """Draw x from the flow's conditional for one observation y (no recording)."""
    with dc.no_grad():
        z, vec = _as_batch(z, flow.dx, "z")
        x, _ = flow.posterior_sample(y, z)
    return x.values[0] if vec else x.values


def init_from_pretrained(flow: ConditionalFlow) -> Tuple[ConditionalSampler, FrozenConditionalPrior]:
    """Warm start: a trainable copy of the x-lane plus a frozen prior snapshot."""
    y_lane = flow.y_lane.copy().freeze()
    x_lane = flow.x_lane.copy()
    for p in x_lane.parameters():
        p.requires_grad = True
    sampler = ConditionalSampler(y_lane, x_lane)
    prior = FrozenConditionalPrior(flow)
    logger.info(f"Initialized sampler from pretrained flow ({len(x_lane.parameters())} trainable tensors)")
    return sampler, prior
