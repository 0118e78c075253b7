"""Per-sample adversarial deviation and per-subgroup robustness statistics.

Deviation is the raw L2 distance between deterministic reconstructions of
the perturbed and unperturbed input (the attacked model's output-space
damage); recon_loss stays per-pixel MSE, matching conventional loss
reporting. Both units are stated in the report schema.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._util import derive_seed
from .attack import AttackArtifact, AttackConfig, AttackError, run_attack, verify_budget
from .dataio import Dataset, EvaluationSet, SubgroupKey, normalize_image

logger = logging.getLogger(__name__)


class RobustnessError(ValueError):
    pass


@dataclass(frozen=True)
class RobustnessRecord:
    sample_id: str
    subgroup: SubgroupKey
    deviation: float  # raw L2 over the pixel grid
    recon_loss: float  # per-pixel MSE of the unperturbed reconstruction
    beta: float
    achieved_objective: float
    status: str = "ok"  # "ok" | "failed"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class SubgroupStats:
    subgroup: SubgroupKey
    count: int
    failed: int
    mean: float
    variance: float
    median: float
    q1: float
    q3: float
    min: float
    max: float

    def to_dict(self) -> dict:
        return {
            "subgroup": self.subgroup.canonical_name(),
            "count": self.count,
            "failed": self.failed,
            "mean": self.mean,
            "variance": self.variance,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "min": self.min,
            "max": self.max,
        }


@dataclass(frozen=True)
class DisparityMetrics:
    median_ratio: float  # max/min subgroup median; inf when the min is 0
    median_gap: float
    worst_subgroup: SubgroupKey

    def to_dict(self) -> dict:
        ratio = "inf" if np.isinf(self.median_ratio) else self.median_ratio
        return {
            "median_ratio": ratio,
            "median_gap": self.median_gap,
            "worst_subgroup": self.worst_subgroup.canonical_name(),
        }


@dataclass(frozen=True)
class ScatterPoint:
    recon_loss: float
    deviation: float
    subgroup: SubgroupKey
    beta: float


def adversarial_deviation(model, x: np.ndarray, delta: np.ndarray) -> float:
    """L2 distance between reconstructions of normalize(x + delta) and x.

    Reconstructions are deterministic (decode of the posterior mean), so a
    zero delta gives exactly zero deviation.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.shape:
        raise RobustnessError(f"delta shape {delta.shape} != image shape {x.shape}")
    rec_adv = model.reconstruct(normalize_image(x + delta))
    rec = model.reconstruct(normalize_image(x))
    return float(np.sqrt(np.sum((rec_adv - rec) ** 2)))


def evaluate_subgroups(
    model,
    dataset: Dataset,
    evaluation_set: EvaluationSet,
    attack_config: AttackConfig,
    workers: int = 1,
    artifact_sink=None,
    precomputed: Mapping[str, AttackArtifact] | None = None,
) -> list[RobustnessRecord]:
    """Attack every evaluation sample and record its adversarial deviation.

    A failed attack yields a record with status="failed" and NaN metrics;
    the run continues. Records come back sorted by sample id regardless of
    completion order. `artifact_sink(artifact)` is called for each fresh
    artifact; `precomputed` artifacts (keyed by sample id) are reused.
    """
    tasks: list[tuple[str, SubgroupKey]] = []
    for key in sorted(evaluation_set.per_subgroup, key=lambda k: k.canonical_name()):
        for sample_id in evaluation_set.per_subgroup[key]:
            tasks.append((sample_id, key))

    beta = float(model.config.beta)

    def one(task: tuple[str, SubgroupKey]) -> RobustnessRecord:
        sample_id, key = task
        x = dataset.pixels_of(sample_id)
        seed = derive_seed(attack_config.seed, sample_id)
        config = AttackConfig(**{**attack_config.to_dict(), "seed": seed})
        try:
            artifact = precomputed.get(sample_id) if precomputed else None
            if artifact is None:
                artifact = run_attack(model, x, config, sample_id=sample_id)
                if artifact_sink is not None:
                    artifact_sink(artifact)
            if not verify_budget(artifact):
                raise AttackError(f"{sample_id}: artifact violates its L-inf budget")
            deviation = adversarial_deviation(model, x, artifact.delta)
            return RobustnessRecord(
                sample_id=sample_id,
                subgroup=key,
                deviation=deviation,
                recon_loss=model.recon_loss(x),
                beta=beta,
                achieved_objective=artifact.achieved_objective,
            )
        except AttackError as exc:
            logger.warning("attack failed for %s: %s", sample_id, exc)
            return RobustnessRecord(
                sample_id=sample_id,
                subgroup=key,
                deviation=float("nan"),
                recon_loss=float("nan"),
                beta=beta,
                achieved_objective=float("nan"),
                status="failed",
            )

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, tasks))
    else:
        records = [one(t) for t in tasks]
    return sorted(records, key=lambda r: r.sample_id)


def _stats_for(key: SubgroupKey, values: np.ndarray, failed: int) -> SubgroupStats:
    q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75], method="linear")
    return SubgroupStats(
        subgroup=key,
        count=int(values.size),
        failed=failed,
        mean=float(np.mean(values)),
        variance=float(np.var(values)),
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        min=float(np.min(values)),
        max=float(np.max(values)),
    )


def aggregate(records: Sequence[RobustnessRecord]) -> dict[SubgroupKey, SubgroupStats]:
    """Per-subgroup order statistics of deviation (linear-interpolated quartiles).

    Failed records are excluded from the statistics but reported in the
    `failed` column; a subgroup with no successful records is omitted with
    a warning.
    """
    if not records:
        raise RobustnessError("cannot aggregate an empty record list")
    grouped: dict[SubgroupKey, list[RobustnessRecord]] = {}
    for record in records:
        grouped.setdefault(record.subgroup, []).append(record)

    out: dict[SubgroupKey, SubgroupStats] = {}
    for key in sorted(grouped, key=lambda k: k.canonical_name()):
        values = np.array([r.deviation for r in grouped[key] if r.ok], dtype=np.float64)
        failed = sum(1 for r in grouped[key] if not r.ok)
        if values.size == 0:
            logger.warning(
                "subgroup %s has no successful records (%d failed); omitted from stats",
                key.canonical_name(),
                failed,
            )
            continue
        out[key] = _stats_for(key, values, failed)
    return out


def marginal_aggregate(
    records: Sequence[RobustnessRecord], attribute: str
) -> dict[SubgroupKey, SubgroupStats]:
    """Statistics marginalized over one protected attribute (e.g. all women)."""
    if not records:
        raise RobustnessError("cannot aggregate an empty record list")
    known = {name for r in records for name, _ in r.subgroup.assignments}
    if attribute not in known:
        raise RobustnessError(f"unknown protected attribute {attribute!r}; records carry {sorted(known)}")

    grouped: dict[SubgroupKey, list[RobustnessRecord]] = {}
    for record in records:
        label = record.subgroup.label_for(attribute)
        grouped.setdefault(SubgroupKey(((attribute, label),)), []).append(record)

    out: dict[SubgroupKey, SubgroupStats] = {}
    for key in sorted(grouped, key=lambda k: k.canonical_name()):
        values = np.array([r.deviation for r in grouped[key] if r.ok], dtype=np.float64)
        failed = sum(1 for r in grouped[key] if not r.ok)
        if values.size == 0:
            logger.warning("group %s has no successful records; omitted", key.canonical_name())
            continue
        out[key] = _stats_for(key, values, failed)
    return out


def disparity_metrics(stats: Mapping[SubgroupKey, SubgroupStats]) -> DisparityMetrics:
    """Max/min median ratio, max-min median gap, and the worst subgroup."""
    if len(stats) < 2:
        raise RobustnessError(f"need >= 2 subgroups for disparity metrics, got {len(stats)}")
    keys = sorted(stats, key=lambda k: k.canonical_name())
    medians = np.array([stats[k].median for k in keys])
    worst = keys[int(np.argmax(medians))]
    lo, hi = float(np.min(medians)), float(np.max(medians))
    ratio = float("inf") if lo == 0.0 else hi / lo
    return DisparityMetrics(median_ratio=ratio, median_gap=hi - lo, worst_subgroup=worst)


def scatter_data(records: Sequence[RobustnessRecord]) -> list[ScatterPoint]:
    """Plot-ready (recon_loss, deviation, subgroup, beta) tuples, id-sorted."""
    ordered = sorted((r for r in records if r.ok), key=lambda r: r.sample_id)
    return [
        ScatterPoint(recon_loss=r.recon_loss, deviation=r.deviation, subgroup=r.subgroup, beta=r.beta)
        for r in ordered
    ]


# ---------------------------------------------------------------------------
# Persistence


def write_records_csv(records: Sequence[RobustnessRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "subgroup", "beta", "deviation", "recon_loss", "achieved_objective", "status"]
        )
        for r in sorted(records, key=lambda r: r.sample_id):
            writer.writerow(
                [
                    r.sample_id,
                    r.subgroup.canonical_name(),
                    repr(r.beta),
                    repr(r.deviation),
                    repr(r.recon_loss),
                    repr(r.achieved_objective),
                    r.status,
                ]
            )


def read_records_csv(path: str | Path) -> list[RobustnessRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(
                RobustnessRecord(
                    sample_id=row["id"],
                    subgroup=SubgroupKey.from_canonical(row["subgroup"]),
                    deviation=float(row["deviation"]),
                    recon_loss=float(row["recon_loss"]),
                    beta=float(row["beta"]),
                    achieved_objective=float(row["achieved_objective"]),
                    status=row["status"],
                )
            )
    return records


def stats_payload(
    stats: Mapping[SubgroupKey, SubgroupStats],
    disparity: DisparityMetrics | None = None,
) -> dict:
    """JSON-ready stats keyed by canonical subgroup name."""
    payload: dict = {
        "units": {"deviation": "l2_pixel_grid", "recon_loss": "per_pixel_mse"},
        "subgroups": {k.canonical_name(): stats[k].to_dict() for k in stats},
    }
    if disparity is not None:
        payload["disparity"] = disparity.to_dict()
    return payload


def write_scatter_csv(points: Sequence[ScatterPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recon_loss", "deviation", "subgroup", "beta"])
        for p in points:
            writer.writerow([repr(p.recon_loss), repr(p.deviation), p.subgroup.canonical_name(), repr(p.beta)])
