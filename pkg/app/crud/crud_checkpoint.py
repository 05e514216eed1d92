"""
Checkpoint persistence for flows.

File layout::

    mfviflow v1
    arch kind=conditional dx=2 dy=2 blocks=8 hidden=64 clamp=5.0 slope=0.01
    # optional provenance comments
    y_lane.blocks.0.coupling.conditioner.w_in shape<1,64>
    <one value per line, 17 significant digits>
    ...

Parameters appear in ``named_parameters`` order. Lines starting with ``#`` are
ignored by the loader.
"""
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from app.core.exceptions import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointNotFoundError,
    CheckpointShapeError,
    CheckpointVersionError,
)
from app.models.flows import ConditionalFlow, FlowModule, FlowStack

logger = logging.getLogger(__name__)

MAGIC = "mfviflow"
VERSION = "v1"
_RECORD = re.compile(r"^(\S+) shape<([0-9,]*)>$")

Checkpointable = Union[ConditionalFlow, FlowStack]


def _arch_line(flow: Checkpointable) -> str:
    if isinstance(flow, ConditionalFlow):
        lane = flow.x_lane
        fields = [("kind", "conditional"), ("dx", flow.dx), ("dy", flow.dy)]
    elif isinstance(flow, FlowStack):
        lane = flow
        fields = [("kind", "stack"), ("dim", flow.dim), ("cond_dim", flow.cond_dim)]
    else:
        raise CheckpointError(f"cannot checkpoint a {type(flow).__name__}")
    fields += [
        ("blocks", lane.n_blocks),
        ("hidden", lane.hidden),
        ("clamp", repr(float(lane.clamp))),
        ("slope", repr(float(lane.negative_slope))),
    ]
    return "arch " + " ".join(f"{k}={v}" for k, v in fields)


def _build(arch: Dict[str, str]) -> Checkpointable:
    """Rebuild an (arbitrarily initialized) module tree from the arch record."""
    rng = np.random.default_rng(0)
    try:
        common = dict(
            hidden=int(arch["hidden"]),
            clamp=float(arch["clamp"]),
            negative_slope=float(arch["slope"]),
        )
        kind = arch["kind"]
        if kind == "conditional":
            return ConditionalFlow(int(arch["dx"]), int(arch["dy"]), int(arch["blocks"]), rng, **common)
        if kind == "stack":
            return FlowStack(int(arch["dim"]), int(arch["blocks"]), rng, cond_dim=int(arch["cond_dim"]), **common)
    except (KeyError, ValueError) as e:
        raise CheckpointFormatError(f"malformed arch record: {e}")
    raise CheckpointFormatError(f"unknown flow kind '{kind}'")


def _split_records(lines: List[str], path: Path) -> List[Tuple[str, Tuple[int, ...], List[str]]]:
    """Group lines into (name, declared shape, raw value lines)."""
    records = []
    for line in lines:
        match = _RECORD.match(line)
        if match:
            shape = tuple(int(d) for d in match.group(2).split(",") if d)
            records.append((match.group(1), shape, []))
        elif records:
            records[-1][2].append(line)
        else:
            raise CheckpointFormatError(f"{path}: expected a parameter record, got '{line[:60]}'")
    return records


def _parse_values(name: str, shape: Tuple[int, ...], raw: List[str], path: Path) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != count:
        raise CheckpointFormatError(f"{path}: parameter '{name}' has {len(raw)} values, expected {count}")
    try:
        values = np.array([float(v) for v in raw], dtype=np.float64)
    except ValueError:
        raise CheckpointFormatError(f"{path}: parameter '{name}' has a non-numeric value")
    if not np.all(np.isfinite(values)):
        raise CheckpointFormatError(f"{path}: parameter '{name}' has a non-finite value")
    return values.reshape(shape)


class CRUDCheckpoint:
    """Save and load flow parameters as versioned text."""

    def save(self, flow: Checkpointable, path: Union[str, Path], provenance: Optional[List[str]] = None) -> Path:
        path = Path(path)
        lines = [f"{MAGIC} {VERSION}", _arch_line(flow)]
        lines += [f"# {line}" for line in (provenance or [])]
        for name, param in flow.named_parameters():
            lines.append(f"{name} shape<{','.join(str(d) for d in param.shape)}>")
            lines.extend(format(v, ".17g") for v in param.values.ravel())
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(lines) + "\n")
        except OSError as e:
            raise CheckpointError(f"could not write checkpoint {path}: {e}")
        logger.info(f"Saved checkpoint {path} ({len(flow.parameters())} tensors)")
        return path

    def load(self, path: Union[str, Path]) -> Checkpointable:
        path = Path(path)
        if not path.is_file():
            raise CheckpointNotFoundError(f"checkpoint {path} does not exist")
        try:
            text = path.read_text()
        except OSError as e:
            raise CheckpointError(f"could not read checkpoint {path}: {e}")

        lines = [line.strip() for line in text.splitlines()]
        lines = [line for line in lines if line and not line.startswith("#")]
        if not lines or not lines[0].startswith(MAGIC):
            raise CheckpointFormatError(f"{path} is not a {MAGIC} checkpoint")
        if lines[0] != f"{MAGIC} {VERSION}":
            raise CheckpointVersionError(f"{path}: unsupported checkpoint version '{lines[0]}'")
        if len(lines) < 2 or not lines[1].startswith("arch "):
            raise CheckpointFormatError(f"{path}: missing arch record")
        try:
            arch = dict(item.split("=", 1) for item in lines[1].split()[1:])
        except ValueError:
            raise CheckpointFormatError(f"{path}: malformed arch record")

        flow = _build(arch)
        expected = flow.named_parameters()
        records = _split_records(lines[2:], path)
        if [name for name, _, _ in records] != [name for name, _ in expected]:
            raise CheckpointFormatError(f"{path}: parameter names do not match the '{arch.get('kind')}' architecture")
        for (name, shape, _), (_, param) in zip(records, expected):
            if shape != param.shape:
                raise CheckpointShapeError(f"{path}: '{name}' has shape {shape}, expected {param.shape}")
        parsed = [_parse_values(name, shape, raw, path) for name, shape, raw in records]

        # everything validated; only now overwrite the freshly built parameters
        for values, (_, param) in zip(parsed, expected):
            param.values = values
        logger.info(f"Loaded checkpoint {path}")
        return flow


checkpoint = CRUDCheckpoint()


def checkpoint_save(flow: Checkpointable, path: Union[str, Path], provenance: Optional[List[str]] = None) -> Path:
    return checkpoint.save(flow, path, provenance)


def checkpoint_load(path: Union[str, Path]) -> Checkpointable:
    return checkpoint.load(path)
