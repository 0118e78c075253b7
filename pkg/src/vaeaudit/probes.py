"""Downstream attribute classifiers probing reconstructions.

Probes are small binary classifiers trained on direct dataset images and
used as external judges: their accuracy is tabulated per subgroup on direct
inputs, deterministic reconstructions, and adversarial reconstructions, and
joint-label disagreement between direct input and adversarial reconstruction
defines subgroup switching.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attack import AttackArtifact
from .dataio import Dataset, EvaluationSet, SubgroupKey, normalize_image

KIND_DIRECT = "direct"
KIND_RECON = "reconstruction"
KIND_ADV = "adversarial_reconstruction"


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    input_dims: tuple[int, int, int]
    arch: str = "conv"
    hidden: tuple[int, ...] = (8, 16)
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.arch not in ("conv", "mlp"):
            raise ProbeError(f"unknown probe arch {self.arch!r}")
        if self.epochs < 0:
            raise ProbeError("epochs must be >= 0")


class _ProbeNet(nn.Module):
    def __init__(self, config: ProbeConfig):
        super().__init__()
        h, w, c = config.input_dims
        if config.arch == "conv":
            layers: list[nn.Module] = []
            prev = c
            for ch in config.hidden:
                layers += [nn.Conv2d(prev, ch, kernel_size=4, stride=2, padding=1), nn.ReLU()]
                prev = ch
            self.body = nn.Sequential(*layers)
            blocks = len(config.hidden)
            flat = prev * (h >> blocks) * (w >> blocks)
        else:
            widths = [h * w * c, *config.hidden]
            layers = [nn.Flatten()]
            for a, b in zip(widths, widths[1:]):
                layers += [nn.Linear(a, b), nn.ReLU()]
            self.body = nn.Sequential(*layers)
            flat = widths[-1]
        self.head = nn.Linear(flat, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x).flatten(1))[:, 0]


@dataclass(frozen=True)
class Prediction:
    label: int  # +1 / -1
    confidence: float  # P(label == +1), in [0, 1]


class ProbeModel:
    """Binary classifier for one protected attribute."""

    def __init__(self, target: str, config: ProbeConfig, seed: int = 0, _net: _ProbeNet | None = None):
        self.target = target
        self.config = config
        if _net is None:
            torch.manual_seed(seed)
            _net = _ProbeNet(config)
        self.net = _net
        self.net.eval()
        self.meta: dict = {"target": target, "seed": seed, "epochs": 0}

    def _to_batch(self, xs: np.ndarray) -> torch.Tensor:
        arr = np.asarray(xs, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.shape[1:] != self.config.input_dims:
            raise ProbeError(f"input shape {arr.shape[1:]} != probe input {self.config.input_dims}")
        return torch.from_numpy(arr.transpose(0, 3, 1, 2))

    def predict(self, image: np.ndarray) -> Prediction:
        """Deterministic label with confidence; +1 iff confidence >= 0.5."""
        with torch.no_grad():
            logit = self.net(self._to_batch(image))[0]
        confidence = float(torch.sigmoid(logit))
        return Prediction(label=1 if confidence >= 0.5 else -1, confidence=confidence)

    def predict_batch(self, xs: np.ndarray) -> list[Prediction]:
        with torch.no_grad():
            logits = self.net(self._to_batch(xs))
        confs = torch.sigmoid(logits).numpy()
        return [Prediction(label=1 if c >= 0.5 else -1, confidence=float(c)) for c in confs]


def train_probe(
    dataset: Dataset,
    target: str,
    seed: int,
    config: ProbeConfig | None = None,
) -> ProbeModel:
    """Train a binary probe for `target` on direct dataset images."""
    if target not in dataset.schema.names:
        raise ProbeError(f"unknown target attribute {target!r}")
    if config is None:
        config = ProbeConfig(input_dims=dataset.image_shape)
    labels = np.array([s.attributes[target] for s in dataset.samples])
    if len(set(labels.tolist())) < 2:
        raise ProbeError(f"training data for {target!r} contains a single class")

    probe = ProbeModel(target, config, seed=seed)
    xs = np.stack([s.pixels for s in dataset.samples]).astype(np.float32)
    data = torch.from_numpy(xs.transpose(0, 3, 1, 2))
    y = torch.from_numpy((labels > 0).astype(np.float32))
    n = data.shape[0]

    gen = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(probe.net.parameters(), lr=config.lr)
    probe.net.train()
    try:
        for _ in range(config.epochs):
            perm = torch.randperm(n, generator=gen)
            for lo in range(0, n, config.batch_size):
                idx = perm[lo : lo + config.batch_size]
                optimizer.zero_grad(set_to_none=True)
                logits = probe.net(data[idx])
                loss = F.binary_cross_entropy_with_logits(logits, y[idx])
                loss.backward()
                optimizer.step()
    finally:
        probe.net.eval()

    with torch.no_grad():
        train_acc = float(((probe.net(data) >= 0) == (y > 0.5)).to(torch.float64).mean())
    probe.meta.update({"epochs": config.epochs, "train_accuracy": train_acc})
    return probe


# ---------------------------------------------------------------------------
# Accuracy tables


@dataclass(frozen=True)
class Cell:
    correct: int
    total: int

    @property
    def accuracy(self) -> float | None:
        return None if self.total == 0 else self.correct / self.total

    def render(self) -> str:
        # Exact rational count rendered to 4 decimals; absent cells stay blank.
        return "" if self.total == 0 else f"{self.correct / self.total:.4f}"


@dataclass(frozen=True)
class PredictionLogEntry:
    sample_id: str
    subgroup: SubgroupKey
    kind: str
    beta: float | None
    label: int
    confidence: float
    truth: int

    @property
    def correct(self) -> bool:
        return self.label == self.truth


@dataclass
class ProbeReport:
    """Accuracy grid: subgroup x input kind x beta, plus the per-sample log."""

    target: str
    betas: tuple[float, ...]
    direct: dict[SubgroupKey, Cell] = field(default_factory=dict)
    reconstruction: dict[SubgroupKey, dict[float, Cell]] = field(default_factory=dict)
    adversarial: dict[SubgroupKey, dict[float, Cell]] = field(default_factory=dict)
    predictions: list[PredictionLogEntry] = field(default_factory=list)

    def subgroups(self) -> list[SubgroupKey]:
        return sorted(self.direct, key=lambda k: k.canonical_name())

    def to_dict(self) -> dict:
        def grid(cells: dict[SubgroupKey, dict[float, Cell]]) -> dict:
            return {
                k.canonical_name(): {
                    f"{b:g}": {"correct": c.correct, "total": c.total} for b, c in cells[k].items()
                }
                for k in sorted(cells, key=lambda k: k.canonical_name())
            }

        return {
            "target": self.target,
            "betas": [f"{b:g}" for b in self.betas],
            "trained_on": "direct_images",
            "direct": {
                k.canonical_name(): {"correct": c.correct, "total": c.total}
                for k, c in sorted(self.direct.items(), key=lambda kv: kv[0].canonical_name())
            },
            "reconstruction": grid(self.reconstruction),
            "adversarial": grid(self.adversarial),
        }


def accuracy_table(
    probe: ProbeModel,
    evaluation_set: EvaluationSet,
    models: Mapping[float, object],
    artifacts: Mapping[float, Mapping[str, AttackArtifact]],
    dataset: Dataset,
) -> ProbeReport:
    """Probe accuracy per subgroup on direct inputs, reconstructions, and
    adversarial reconstructions, for every model in `models`.

    A missing artifact leaves that sample out of the adversarial cell (the
    cell is marked absent when no sample has one), never counted as wrong.
    """
    betas = tuple(sorted(models))
    report = ProbeReport(target=probe.target, betas=betas)

    for key in sorted(evaluation_set.per_subgroup, key=lambda k: k.canonical_name()):
        ids = evaluation_set.per_subgroup[key]
        direct_correct = 0
        recon_cells = {b: [0, 0] for b in betas}
        adv_cells = {b: [0, 0] for b in betas}
        for sample_id in ids:
            x = dataset.pixels_of(sample_id)
            truth = dataset.get(sample_id).attributes[probe.target]
            pred = probe.predict(x)
            direct_correct += int(pred.label == truth)
            report.predictions.append(
                PredictionLogEntry(sample_id, key, KIND_DIRECT, None, pred.label, pred.confidence, truth)
            )
            for b in betas:
                model = models[b]
                recon_pred = probe.predict(model.reconstruct(x))
                recon_cells[b][0] += int(recon_pred.label == truth)
                recon_cells[b][1] += 1
                report.predictions.append(
                    PredictionLogEntry(
                        sample_id, key, KIND_RECON, b, recon_pred.label, recon_pred.confidence, truth
                    )
                )
                artifact = artifacts.get(b, {}).get(sample_id)
                if artifact is None:
                    continue
                adv_image = model.reconstruct(normalize_image(x + artifact.delta))
                adv_pred = probe.predict(adv_image)
                adv_cells[b][0] += int(adv_pred.label == truth)
                adv_cells[b][1] += 1
                report.predictions.append(
                    PredictionLogEntry(
                        sample_id, key, KIND_ADV, b, adv_pred.label, adv_pred.confidence, truth
                    )
                )
        report.direct[key] = Cell(direct_correct, len(ids))
        report.reconstruction[key] = {b: Cell(*recon_cells[b]) for b in betas}
        report.adversarial[key] = {b: Cell(*adv_cells[b]) for b in betas}
    return report


def subgroup_switch_rate(
    probes: Sequence[ProbeModel],
    evaluation_set: EvaluationSet,
    model,
    artifacts: Mapping[str, AttackArtifact],
    dataset: Dataset,
) -> dict[SubgroupKey, float]:
    """Fraction of samples whose joint probe labels flip between the direct
    input and the adversarial reconstruction.

    Samples without an artifact are skipped; subgroups with no evaluable
    samples are omitted.
    """
    if not probes:
        raise ProbeError("need at least one probe")
    rates: dict[SubgroupKey, float] = {}
    for key in sorted(evaluation_set.per_subgroup, key=lambda k: k.canonical_name()):
        switched = 0
        evaluable = 0
        for sample_id in evaluation_set.per_subgroup[key]:
            artifact = artifacts.get(sample_id)
            if artifact is None:
                continue
            x = dataset.pixels_of(sample_id)
            adv_image = model.reconstruct(normalize_image(x + artifact.delta))
            joint_direct = tuple(p.predict(x).label for p in probes)
            joint_adv = tuple(p.predict(adv_image).label for p in probes)
            evaluable += 1
            switched += int(joint_direct != joint_adv)
        if evaluable:
            rates[key] = switched / evaluable
    return rates


# ---------------------------------------------------------------------------
# Persistence: table CSV in the standard report layout + per-sample log.


def write_probe_csv(report: ProbeReport, path: str | Path) -> None:
    """Rows = subgroups; columns = direct | reconstruction per beta |
    adversarial reconstruction per beta."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["subgroup", "direct"]
        header += [f"recon_beta{b:g}" for b in report.betas]
        header += [f"adv_beta{b:g}" for b in report.betas]
        writer.writerow(header)
        for key in report.subgroups():
            row = [key.canonical_name(), report.direct[key].render()]
            row += [report.reconstruction[key][b].render() for b in report.betas]
            row += [report.adversarial[key][b].render() for b in report.betas]
            writer.writerow(row)


def write_prediction_log_csv(entries: Sequence[PredictionLogEntry], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "subgroup", "kind", "beta", "label", "confidence", "truth", "correct"])
        ordered = sorted(entries, key=lambda e: (e.sample_id, e.kind, -1.0 if e.beta is None else e.beta))
        for e in ordered:
            writer.writerow(
                [
                    e.sample_id,
                    e.subgroup.canonical_name(),
                    e.kind,
                    "" if e.beta is None else f"{e.beta:g}",
                    e.label,
                    repr(e.confidence),
                    e.truth,
                    int(e.correct),
                ]
            )


def cells_from_prediction_log(
    entries: Sequence[PredictionLogEntry],
) -> dict[tuple[str, str, float | None], Cell]:
    """Recompute accuracy cells from the per-sample log.

    Keyed by (canonical subgroup, kind, beta); must reproduce the report's
    cells exactly.
    """
    counts: dict[tuple[str, str, float | None], list[int]] = {}
    for e in entries:
        cell = counts.setdefault((e.subgroup.canonical_name(), e.kind, e.beta), [0, 0])
        cell[0] += int(e.correct)
        cell[1] += 1
    return {k: Cell(*v) for k, v in counts.items()}
