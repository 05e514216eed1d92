"""
CSV artifacts: datasets, traces, KL tables, samples, chains, density grids and
posterior moment tables.

Every file starts with ``# ``-prefixed provenance lines followed by one
column-name row. Floats are written with 17 significant digits so reruns
with the same configuration produce identical bytes.
"""
import csv
import io
import logging
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from app.core.exceptions import ArtifactError
from app.schemas.report import KlReport, MomentSummary, SweepFailure, TraceRow, TrainingTrace
from app.services.metrics_service import DensityGrid
from app.services.problem_service import Dataset

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
TRACE_COLUMNS = ["phase", "epoch", "step", "objective", "lr", "seconds"]
KL_COLUMNS = ["gamma", "kl_low", "kl_scratch", "kl_precond", "n_eval", "seed"]
GRID_COLUMNS = ["x1", "x2", "logp"]

PathLike = Union[str, Path]


def _g(value: float) -> str:
    return FLOAT_FORMAT % value


def _header(provenance: Iterable[str]) -> str:
    return "".join(f"# {line}\n" for line in provenance)


def _write(path: PathLike, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise ArtifactError(f"could not write {path}: {e}")
    logger.info(f"Wrote {path}")
    return path


def _read_rows(path: PathLike) -> List[str]:
    """Non-comment lines of a CSV artifact, column row first."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ArtifactError(f"could not read {path}: {e}")
    rows = [line for line in lines if line and not line.startswith("#")]
    if not rows:
        raise ArtifactError(f"{path} has no column row")
    return rows


class CRUDArtifact:
    """Writers and readers for the CSV artifacts of a run."""

    def write_matrix(
        self,
        path: PathLike,
        values: np.ndarray,
        columns: Sequence[str],
        provenance: Sequence[str] = (),
    ) -> Path:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.shape[1] != len(columns):
            raise ArtifactError(f"{len(columns)} column names for {values.shape[1]} columns")
        buffer = io.StringIO()
        buffer.write(_header(provenance))
        buffer.write(",".join(columns) + "\n")
        np.savetxt(buffer, values, fmt=FLOAT_FORMAT, delimiter=",")
        return _write(path, buffer.getvalue())

    def read_matrix(self, path: PathLike) -> np.ndarray:
        rows = _read_rows(path)
        n_columns = len(rows[0].split(","))
        if len(rows) == 1:
            return np.empty((0, n_columns))
        try:
            return np.loadtxt(rows[1:], delimiter=",", ndmin=2)
        except ValueError as e:
            raise ArtifactError(f"{path}: malformed numeric row ({e})")

    def read_columns(self, path: PathLike) -> List[str]:
        return _read_rows(path)[0].split(",")

    def write_dataset(self, path: PathLike, dataset: Dataset, provenance: Sequence[str] = ()) -> Path:
        columns = [f"y{i + 1}" for i in range(dataset.y.shape[1])] + [f"x{i + 1}" for i in range(dataset.x.shape[1])]
        header = list(provenance) + [dataset.provenance.header()]
        return self.write_matrix(path, np.hstack([dataset.y, dataset.x]), columns, header)

    def write_samples(self, path: PathLike, samples: np.ndarray, provenance: Sequence[str] = ()) -> Path:
        samples = np.asarray(samples)
        return self.write_matrix(path, samples, [f"x{i + 1}" for i in range(samples.shape[1])], provenance)

    def write_grid(self, path: PathLike, grid: DensityGrid, provenance: Sequence[str] = ()) -> Path:
        points = grid.points()
        return self.write_matrix(path, np.column_stack([points, grid.logp.ravel()]), GRID_COLUMNS, provenance)

    def write_trace(self, path: PathLike, trace: TrainingTrace, provenance: Sequence[str] = ()) -> Path:
        buffer = io.StringIO()
        buffer.write(_header(provenance))
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace.rows:
            writer.writerow([row.phase, row.epoch, row.step, _g(row.objective), _g(row.lr), _g(row.seconds)])
        return _write(path, buffer.getvalue())

    def read_trace(self, path: PathLike) -> TrainingTrace:
        rows = _read_rows(path)
        reader = csv.DictReader(rows)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ArtifactError(f"{path}: unexpected trace columns {reader.fieldnames}")
        try:
            return TrainingTrace(rows=[TraceRow(**record) for record in reader])
        except ValueError as e:
            raise ArtifactError(f"{path}: malformed trace ({e})")

    def write_moments(
        self,
        path: PathLike,
        moments: Mapping[str, MomentSummary],
        provenance: Sequence[str] = (),
    ) -> Path:
        """One row per posterior estimate: mean, upper-triangle covariance, effective size."""
        if not moments:
            raise ArtifactError("no moment summaries to write")
        d = len(next(iter(moments.values())).mean)
        pairs = [(i, j) for i in range(d) for j in range(i, d)]
        buffer = io.StringIO()
        buffer.write(_header(provenance))
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["source", "n", "ess"] + [f"mean_x{i + 1}" for i in range(d)]
                        + [f"cov_x{i + 1}x{j + 1}" for i, j in pairs])
        for source, m in moments.items():
            ess = float("inf") if m.effective_sample_size is None else m.effective_sample_size
            writer.writerow([source, m.n, _g(ess)] + [_g(v) for v in m.mean]
                            + [_g(m.covariance[i][j]) for i, j in pairs])
        return _write(path, buffer.getvalue())

    def write_kl_table(
        self,
        path: PathLike,
        reports: Sequence[KlReport],
        failures: Sequence[SweepFailure] = (),
        provenance: Sequence[str] = (),
    ) -> Path:
        buffer = io.StringIO()
        buffer.write(_header(provenance))
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(KL_COLUMNS)
        for r in reports:
            writer.writerow([
                _g(r.gamma), _g(r.kl_low_fidelity), _g(r.kl_scratch), _g(r.kl_preconditioned),
                r.n_eval_samples, r.seed,
            ])
        for failure in failures:
            buffer.write(f"# failed gamma={_g(failure.gamma)} seed={failure.seed}: {failure.error}\n")
        return _write(path, buffer.getvalue())

    def read_kl_table(self, path: PathLike) -> List[KlReport]:
        reader = csv.DictReader(_read_rows(path))
        if reader.fieldnames != KL_COLUMNS:
            raise ArtifactError(f"{path}: unexpected KL table columns {reader.fieldnames}")
        try:
            return [
                KlReport(
                    gamma=record["gamma"],
                    kl_low_fidelity=record["kl_low"],
                    kl_scratch=record["kl_scratch"],
                    kl_preconditioned=record["kl_precond"],
                    n_eval_samples=record["n_eval"],
                    seed=record["seed"],
                )
                for record in reader
            ]
        except ValueError as e:
            raise ArtifactError(f"{path}: malformed KL table ({e})")


artifact = CRUDArtifact()
