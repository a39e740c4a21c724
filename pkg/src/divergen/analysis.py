"""Distribution-discrepancy numerics.

Energy summarizes a classifier's logit vector as a temperature-scaled
log-sum-exp; histograms of energies are fit with Gaussians whose divergence
has a closed form; train-val gaps subtract per-group AP pairs.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FrequencyGroup

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.9


class AnalysisError(ValueError):
    """Raised on malformed analysis inputs."""


class Task(str, enum.Enum):
    BOX = "box"
    MASK = "mask"


class Split(str, enum.Enum):
    MINITRAIN = "minitrain"
    VAL = "val"


@dataclass(frozen=True)
class LogitRecord:
    instance_id: int
    logits: tuple[float, ...]

    def __post_init__(self) -> None:
        logits = tuple(float(v) for v in self.logits)
        object.__setattr__(self, "logits", logits)
        if not logits:
            raise AnalysisError(f"instance {self.instance_id}: empty logit vector")
        if not all(math.isfinite(v) for v in logits):
            raise AnalysisError(f"instance {self.instance_id}: non-finite logit")


@dataclass(frozen=True)
class EnergyConfig:
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise AnalysisError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma: float
    sample_count: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise AnalysisError("non-finite Gaussian parameters")
        if self.sigma <= 0:
            raise AnalysisError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class ApRecord:
    group: FrequencyGroup
    task: Task
    split: Split
    value: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 100.0:
            raise AnalysisError(f"AP value {self.value} outside [0, 100]")


@dataclass(frozen=True)
class TvgResult:
    group: FrequencyGroup
    task: Task
    value: float


def energy(record: LogitRecord, config: EnergyConfig = EnergyConfig()) -> float:
    """-tau * log sum exp(logit / tau), evaluated with max subtraction.

    Adding a constant c to every logit lowers the energy by exactly c, and the
    value always sits in [-max - tau*ln(n), -max].
    """
    tau = config.tau
    h = np.asarray(record.logits, dtype=np.float64)
    peak = float(h.max())
    return -peak - tau * float(np.log(np.exp((h - peak) / tau).sum()))


def energy_batch(records: list[LogitRecord], config: EnergyConfig = EnergyConfig()) -> list[float]:
    return [energy(record, config) for record in records]


def fit_gaussian(samples) -> GaussianFit:
    """Maximum-likelihood fit: sample mean and population standard deviation."""
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.size < 2:
        raise AnalysisError(f"need at least 2 samples to fit, got {arr.size}")
    if not np.isfinite(arr).all():
        raise AnalysisError("non-finite sample")
    mu = float(arr.mean())
    sigma = float(arr.std(ddof=0))
    if sigma == 0.0:
        raise AnalysisError("zero variance: all samples equal")
    return GaussianFit(mu=mu, sigma=sigma, sample_count=int(arr.size))


def gaussian_kl(p: GaussianFit, q: GaussianFit) -> float:
    """KL(N(mu_p, sigma_p) || N(mu_q, sigma_q)), closed form, >= 0."""
    return (
        math.log(q.sigma / p.sigma)
        + (p.sigma**2 + (p.mu - q.mu) ** 2) / (2 * q.sigma**2)
        - 0.5
    )


def compute_tvg(records: list[ApRecord]) -> list[TvgResult]:
    """minitrain AP minus val AP per (group, task); incomplete pairs are skipped."""
    table: dict[tuple[FrequencyGroup, Task, Split], float] = {}
    for record in records:
        key = (record.group, record.task, record.split)
        if key in table:
            raise AnalysisError(
                f"duplicate AP record for ({record.group.value}, {record.task.value}, "
                f"{record.split.value})"
            )
        table[key] = record.value
    results = []
    pairs = sorted({(g, t) for g, t, _ in table}, key=lambda p: (p[0].value, p[1].value))
    for group, task in pairs:
        mini = table.get((group, task, Split.MINITRAIN))
        val = table.get((group, task, Split.VAL))
        if mini is None or val is None:
            logger.warning("incomplete AP pair for (%s, %s); skipping", group.value, task.value)
            continue
        results.append(TvgResult(group=group, task=task, value=mini - val))
    return results


def sigma_bounds(fits: list[tuple[float, float]], k: float = 3.0) -> list[tuple[float, float]]:
    """(mu + k*sigma, mu - k*sigma) per row, exact arithmetic."""
    if not k > 0:
        raise AnalysisError(f"k must be positive, got {k}")
    return [(mu + k * sigma, mu - k * sigma) for mu, sigma in fits]


# --- file formats -------------------------------------------------------------


def load_logit_records(path: str | Path) -> list[LogitRecord]:
    """JSON lines of {instance_id, logits: [...]}."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            records.append(LogitRecord(instance_id=int(obj["instance_id"]),
                                       logits=tuple(obj["logits"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise AnalysisError(f"{path}:{lineno}: malformed logit record: {exc}") from exc
    return records


def load_ap_records(path: str | Path) -> list[ApRecord]:
    """JSON array of {group, task, split, value} rows."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnalysisError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise AnalysisError(f"{path}: expected a JSON array of AP rows")
    records = []
    for obj in doc:
        try:
            records.append(
                ApRecord(group=FrequencyGroup(obj["group"]), task=Task(obj["task"]),
                         split=Split(obj["split"]), value=float(obj["value"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AnalysisError(f"{path}: malformed AP row {obj!r}: {exc}") from exc
    return records


def energy_tsv(records: list[LogitRecord], config: EnergyConfig = EnergyConfig()) -> str:
    lines = ["instance_id\tenergy"]
    for record in records:
        lines.append(f"{record.instance_id}\t{energy(record, config):.17g}")
    return "\n".join(lines) + "\n"


def tvg_tsv(results: list[TvgResult]) -> str:
    lines = ["group\ttask\ttvg"]
    for result in results:
        lines.append(f"{result.group.value}\t{result.task.value}\t{result.value:.2f}")
    return "\n".join(lines) + "\n"


def sigma_bounds_tsv(rows: list[tuple[float, float]], k: float = 3.0) -> str:
    lines = ["mu\tsigma\tupper\tlower"]
    for (mu, sigma), (upper, lower) in zip(rows, sigma_bounds(rows, k)):
        lines.append(f"{mu:.2f}\t{sigma:.2f}\t{upper:.2f}\t{lower:.2f}")
    return "\n".join(lines) + "\n"
