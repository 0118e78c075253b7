"""Maximum-damage and output-space perturbation attacks under an L-inf budget.

Sign-gradient projected ascent on a per-sample perturbation delta, with the
perturbed input re-normalized (clipped to [0, 1]) before every encoding so
the attack cannot be nullified by normalization. Best-so-far objective and
delta are tracked, making the recorded trajectory non-decreasing.

Attacks on distinct samples are independent; a shared model checkpoint is
only read. Each attack owns its delta state exclusively.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from ._util import sha256_file
from .vae import LatentCode

BUDGET_TOLERANCE = 1e-6

INITS = ("zero", "uniform")
OBJECTIVES = ("latent", "output")
DISTANCES = ("mean_l2", "gaussian_w2")


class AttackError(RuntimeError):
    """Attack optimization failed (non-finite objective or bad input)."""


@dataclass(frozen=True)
class AttackConfig:
    """Budget, schedule, and objective for one attack run.

    step_size defaults to budget/20; with a zero budget any positive value
    is equivalent (projection pins delta at 0), so a nominal one is used.
    """

    budget: float
    steps: int = 200
    step_size: float | None = None
    init: str = "zero"
    objective: str = "latent"
    distance: str = "mean_l2"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise AttackError(f"budget must be >= 0, got {self.budget}")
        if self.steps < 0:
            raise AttackError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackError(f"step_size must be > 0, got {self.step_size}")
        if self.init not in INITS:
            raise AttackError(f"unknown init {self.init!r}")
        if self.objective not in OBJECTIVES:
            raise AttackError(f"unknown objective {self.objective!r}")
        if self.distance not in DISTANCES:
            raise AttackError(f"unknown distance {self.distance!r}")

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.budget / 20.0 if self.budget > 0 else 1e-3

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "steps": self.steps,
            "step_size": self.step_size,
            "init": self.init,
            "objective": self.objective,
            "distance": self.distance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "AttackConfig":
        return cls(
            budget=float(raw["budget"]),
            steps=int(raw["steps"]),
            step_size=None if raw.get("step_size") is None else float(raw["step_size"]),
            init=raw.get("init", "zero"),
            objective=raw.get("objective", "latent"),
            distance=raw.get("distance", "mean_l2"),
            seed=int(raw.get("seed", 0)),
        )


@dataclass(frozen=True)
class AttackArtifact:
    """Optimized perturbation plus its objective trajectory."""

    sample_id: str
    delta: np.ndarray  # (H, W, C), same layout as the attacked image
    achieved_objective: float
    trajectory: tuple[float, ...]
    config: AttackConfig


def project_linf(delta: np.ndarray, c: float) -> np.ndarray:
    """Clamp every entry of delta to [-c, c]."""
    if c < 0:
        raise AttackError(f"projection radius must be >= 0, got {c}")
    arr = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise AttackError("cannot project non-finite delta")
    return np.clip(arr, -c, c)


def latent_discrepancy(code_a: LatentCode, code_b: LatentCode, kind: str = "mean_l2") -> float:
    """Distance between two diagonal-Gaussian posteriors.

    mean_l2 is the L2 distance between means; gaussian_w2 is the
    2-Wasserstein distance, adding the L2 distance between the std vectors.
    """
    if code_a.mean.shape != code_b.mean.shape:
        raise AttackError(
            f"latent dimension mismatch: {code_a.mean.shape} vs {code_b.mean.shape}"
        )
    mean_sq = float(np.sum((code_a.mean - code_b.mean) ** 2))
    if kind == "mean_l2":
        return float(np.sqrt(mean_sq))
    if kind == "gaussian_w2":
        std_sq = float(np.sum((code_a.std - code_b.std) ** 2))
        return float(np.sqrt(mean_sq + std_sq))
    raise AttackError(f"unknown discrepancy kind {kind!r}")


def verify_budget(artifact: AttackArtifact) -> bool:
    """True iff the artifact's delta satisfies its L-inf budget."""
    if artifact.delta.size == 0:
        return True
    return float(np.max(np.abs(artifact.delta))) <= artifact.config.budget + BUDGET_TOLERANCE


def max_damage_attack(model, x: np.ndarray, config: AttackConfig, sample_id: str = "sample") -> AttackArtifact:
    """Maximize the latent discrepancy between x + delta and x (default audit attack)."""
    if config.objective != "latent":
        raise AttackError(f"max_damage_attack requires objective='latent', got {config.objective!r}")
    return _pgd(model, x, config, sample_id)


def output_space_attack(model, x: np.ndarray, config: AttackConfig, sample_id: str = "sample") -> AttackArtifact:
    """Maximize the L2 gap between deterministic reconstructions of x + delta and x."""
    if config.objective != "output":
        raise AttackError(f"output_space_attack requires objective='output', got {config.objective!r}")
    return _pgd(model, x, config, sample_id)


def run_attack(model, x: np.ndarray, config: AttackConfig, sample_id: str = "sample") -> AttackArtifact:
    """Dispatch on config.objective."""
    if config.objective == "latent":
        return max_damage_attack(model, x, config, sample_id)
    return output_space_attack(model, x, config, sample_id)


def _pgd(model, x: np.ndarray, config: AttackConfig, sample_id: str) -> AttackArtifact:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise AttackError(f"expected an (H, W, C) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise AttackError("input image must be normalized to [0, 1]")

    dtype = model.torch_dtype
    x_t = torch.from_numpy(arr.transpose(2, 0, 1)[None]).to(dtype)
    c = config.budget
    step_size = config.effective_step_size

    with torch.no_grad():
        mu_ref, logvar_ref = model._encode_t(x_t)
        std_ref = torch.exp(0.5 * logvar_ref)
        recon_ref = model._decode_t(mu_ref) if config.objective == "output" else None

    if config.init == "zero":
        delta = torch.zeros_like(x_t)
    else:
        raw = np.random.default_rng(config.seed).uniform(-c, c, size=x_t.shape)
        delta = torch.from_numpy(raw).to(dtype)
    delta = torch.clamp(delta, -c, c)

    def squared_gap(delta_var: torch.Tensor) -> torch.Tensor:
        x_adv = torch.clamp(x_t + delta_var, 0.0, 1.0)
        mu, logvar = model._encode_t(x_adv)
        if config.objective == "output":
            return torch.sum((model._decode_t(mu) - recon_ref) ** 2)
        gap = torch.sum((mu - mu_ref) ** 2)
        if config.distance == "gaussian_w2":
            gap = gap + torch.sum((torch.exp(0.5 * logvar) - std_ref) ** 2)
        return gap

    def escape_direction(delta_var: torch.Tensor) -> torch.Tensor:
        # The L2 gap has an exactly-zero gradient wherever the gap itself is
        # zero (notably the zero-init start); ascend the signed coordinate
        # sum there instead, falling back to all-ones if that also vanishes.
        x_adv = torch.clamp(x_t + delta_var, 0.0, 1.0)
        mu, logvar = model._encode_t(x_adv)
        if config.objective == "output":
            surrogate = torch.sum(model._decode_t(mu) - recon_ref)
        else:
            surrogate = torch.sum(mu - mu_ref)
            if config.distance == "gaussian_w2":
                surrogate = surrogate + torch.sum(torch.exp(0.5 * logvar) - std_ref)
        (grad,) = torch.autograd.grad(surrogate, delta_var)
        if torch.all(grad == 0):
            grad = torch.ones_like(grad)
        return grad

    best_objective = -np.inf
    best_delta = delta.clone()
    trajectory: list[float] = []

    for step in range(config.steps + 1):
        delta_var = delta.clone().requires_grad_(True)
        sq = squared_gap(delta_var)
        value = float(sq.detach())
        if not np.isfinite(value):
            raise AttackError(f"{sample_id}: non-finite objective at step {step}")
        objective = float(np.sqrt(max(value, 0.0)))
        if objective > best_objective:
            best_objective = objective
            best_delta = delta.detach().clone()
        trajectory.append(best_objective)
        if step == config.steps:
            break

        if value > 0.0:
            (grad,) = torch.autograd.grad(torch.sqrt(sq), delta_var)
        else:
            grad = escape_direction(delta_var)
        if not torch.all(torch.isfinite(grad)):
            raise AttackError(f"{sample_id}: non-finite gradient at step {step}")
        with torch.no_grad():
            delta = torch.clamp(delta + step_size * torch.sign(grad), -c, c)

    delta_np = best_delta[0].to(torch.float64).numpy().transpose(1, 2, 0)
    return AttackArtifact(
        sample_id=sample_id,
        delta=np.clip(delta_np, -c, c),
        achieved_objective=trajectory[-1],
        trajectory=tuple(trajectory),
        config=config,
    )


# ---------------------------------------------------------------------------
# Persistence: one JSON record + one .npy delta blob per sample.


def save_artifact(artifact: AttackArtifact, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    delta_file = out / f"{artifact.sample_id}.npy"
    np.save(delta_file, artifact.delta.astype(np.float64))
    record = {
        "id": artifact.sample_id,
        "config": artifact.config.to_dict(),
        "achieved_objective": artifact.achieved_objective,
        "trajectory": list(artifact.trajectory),
        "delta_file": delta_file.name,
        "delta_sha256": sha256_file(delta_file),
    }
    json_path = out / f"{artifact.sample_id}.json"
    json_path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return json_path


def load_artifact(json_path: str | Path) -> AttackArtifact:
    path = Path(json_path)
    record = json.loads(path.read_text(encoding="utf-8"))
    delta_path = path.parent / record["delta_file"]
    if sha256_file(delta_path) != record["delta_sha256"]:
        raise AttackError(f"{delta_path}: delta blob does not match recorded hash")
    delta = np.load(delta_path)
    return AttackArtifact(
        sample_id=record["id"],
        delta=delta,
        achieved_objective=float(record["achieved_objective"]),
        trajectory=tuple(float(v) for v in record["trajectory"]),
        config=AttackConfig.from_dict(record["config"]),
    )


def write_artifact_manifest(out_dir: str | Path, artifact_ids: list[str]) -> Path:
    """List every artifact file with a content hash, for cache verification."""
    out = Path(out_dir)
    entries = []
    for sample_id in sorted(artifact_ids):
        for suffix in (".json", ".npy"):
            f = out / f"{sample_id}{suffix}"
            entries.append({"file": f.name, "sha256": sha256_file(f)})
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps({"artifacts": entries}, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest_path
