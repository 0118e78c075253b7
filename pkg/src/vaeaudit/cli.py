"""Command-line pipeline: synth, train, attack, audit, probe, latent, report.

Every invocation works inside a run directory named by a run id that is
derived from the effective config and seed, so repeating a command with the
same inputs lands in the same directory and reuses cached attack artifacts.
Manifests carry timestamps; reports do not, so report files hash-compare
across reruns.

Exit codes: 0 success, 1 usage/config error, 2 pipeline failure (partial
outputs are kept and flagged in the manifest).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from . import attack as attack_mod
from . import latentlab, probes, robustness, vae
from ._util import canonical_json, derive_seed, read_json, sha256_bytes, sha256_file, write_json
from .dataio import (
    DataError,
    Dataset,
    EvaluationSet,
    build_subgroups,
    generate_synthetic_dataset,
    imbalanced_benchmark_spec,
    load_dataset,
    sample_evaluation_set,
    save_dataset,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2

ENV_PREFIX = "VAEAUDIT_"


class CliError(Exception):
    """Bad flags, bad config, or missing inputs; maps to exit code 1."""


class PipelineError(Exception):
    """Stage failure after setup; maps to exit code 2."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 1,
    "out": "runs",
    "dataset": {
        "path": None,
        "synth": {
            "height": 16,
            "width": 16,
            "majority": 200,
            "minority": 20,
            "protected": ["Male", "Young"],
            "noise": 0.04,
        },
    },
    "model": {
        "betas": [1.0, 5.0, 10.0],
        "latent_dim": 8,
        "arch": "conv",
        "hidden": [16, 32],
        "recon_loss": "bce",
        "dtype": "float32",
        "epochs": 20,
        "learning_rate": vae.DEFAULT_LEARNING_RATE,
        "batch_size": 64,
        "resume_dir": None,
    },
    "attack": {
        "budget": 0.05,
        "steps": 100,
        "step_size": None,
        "init": "zero",
        "objective": "latent",
        "distance": "mean_l2",
    },
    "evaluation": {"samples_per_subgroup": 60},
    "probes": {
        "targets": None,
        "arch": "conv",
        "hidden": [8, 16],
        "epochs": 20,
        "learning_rate": 1e-3,
        "batch_size": 64,
    },
    "latent": {"k": 10, "projection": "pca"},
    "checkpoints": None,
    "checkpoints_dir": None,
}


def _deep_merge(base: dict, override: Mapping) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _check_keys(section: Mapping, allowed: Mapping, context: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise CliError(f"unknown config key(s) in {context}: {', '.join(unknown)}")


def _validate_config(config: Mapping) -> None:
    _check_keys(config, DEFAULT_CONFIG, "config")
    for name in ("dataset", "model", "attack", "evaluation", "probes", "latent"):
        section = config[name]
        if not isinstance(section, Mapping):
            raise CliError(f"config section {name!r} must be an object")
        _check_keys(section, DEFAULT_CONFIG[name], f"config.{name}")
    _check_keys(config["dataset"]["synth"], DEFAULT_CONFIG["dataset"]["synth"], "config.dataset.synth")
    betas = config["model"]["betas"]
    if not betas or any(float(b) < 1.0 for b in betas):
        raise CliError("config.model.betas must be a non-empty list of values >= 1")
    if len({f"{float(b):g}" for b in betas}) != len(betas):
        raise CliError("config.model.betas contains duplicates")
    if float(config["attack"]["budget"]) < 0:
        raise CliError("config.attack.budget must be >= 0")
    if int(config["evaluation"]["samples_per_subgroup"]) < 1:
        raise CliError("config.evaluation.samples_per_subgroup must be >= 1")


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name)


def _env_int(name: str) -> int | None:
    raw = _env(name)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"environment variable {ENV_PREFIX}{name} must be an integer, got {raw!r}") from None


@dataclass
class Settings:
    """Effective configuration after flag > env > file precedence."""

    config: dict
    seed: int
    workers: int
    out: Path
    run_id: str | None = None
    skip_probes: bool = False

    def resolved_config(self) -> dict:
        snapshot = copy.deepcopy(self.config)
        snapshot["seed"] = self.seed
        snapshot["workers"] = self.workers
        snapshot["out"] = str(self.out)
        return snapshot


def resolve_settings(args: argparse.Namespace) -> Settings:
    config_path = args.config or _env("CONFIG")
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        config = _deep_merge(config, loaded)
    _validate_config(config)

    seed = args.seed if args.seed is not None else _env_int("SEED")
    if seed is None:
        seed = int(config["seed"])
    workers = args.workers if args.workers is not None else _env_int("WORKERS")
    if workers is None:
        workers = int(config["workers"])
    if workers < 1:
        raise CliError("workers must be >= 1")
    out = args.out or _env("OUT") or config["out"]
    return Settings(
        config=config,
        seed=seed,
        workers=workers,
        out=Path(out),
        run_id=getattr(args, "run_id", None),
        skip_probes=getattr(args, "skip_probes", False),
    )


def _beta_tag(beta: float) -> str:
    return f"{float(beta):g}"


def _run_id(command: str, settings: Settings) -> str:
    if settings.run_id:
        return settings.run_id
    hashed = {k: v for k, v in settings.config.items() if k not in ("out", "workers", "seed")}
    digest = sha256_bytes(canonical_json(hashed).encode("utf-8"))[:10]
    return f"{command}-{digest}-s{settings.seed}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Provenance record for one run: config snapshot, seeds, hashes, outputs."""

    def __init__(self, run_id: str, command: str, config: Mapping):
        self.data: dict = {
            "run_id": run_id,
            "command": command,
            "config": copy.deepcopy(dict(config)),
            "created_utc": _now(),
            "finished_utc": None,
            "status": "running",
            "seeds": {},
            "input_hashes": {},
            "outputs": {},
            "warnings": [],
        }

    def seed(self, stage: str, value: int) -> None:
        self.data["seeds"][stage] = int(value)

    def input_hash(self, name: str, digest: str) -> None:
        self.data["input_hashes"][name] = digest

    def output(self, name: str, relpath: str) -> None:
        self.data["outputs"][name] = relpath

    def warn(self, message: str) -> None:
        self.data["warnings"].append(message)

    def finish(self, run_dir: Path, status: str = "complete") -> Path:
        missing = [rel for rel in self.data["outputs"].values() if not (run_dir / rel).exists()]
        if missing:
            raise PipelineError(f"manifest lists missing outputs: {missing}")
        self.data["finished_utc"] = _now()
        self.data["status"] = status
        path = run_dir / "manifest.json"
        write_json(path, self.data)
        return path


class AuditReport:
    """Deterministic audit payload; carries no timestamps or absolute paths."""

    def __init__(self, data: dict):
        self.data = data

    def validate(self) -> None:
        for tag, section in self.data.get("betas", {}).items():
            if not section.get("checkpoint_sha256"):
                raise PipelineError(f"report section for beta {tag} lacks a checkpoint hash")

    def save(self, path: Path) -> None:
        self.validate()
        write_json(path, self.data)

    @classmethod
    def load(cls, path: Path) -> "AuditReport":
        return cls(read_json(path))

    def content_hash(self) -> str:
        return sha256_bytes(canonical_json(self.data).encode("utf-8"))


# ---------------------------------------------------------------------------
# Shared resolution helpers


def _require_dataset(settings: Settings) -> tuple[Dataset, Path]:
    raw = settings.config["dataset"]["path"]
    if not raw:
        raise CliError("config.dataset.path is required for this command")
    path = Path(raw)
    if not path.is_dir():
        raise CliError(f"dataset directory not found: {path}")
    try:
        dataset = load_dataset(path)
    except (DataError, OSError, KeyError, ValueError) as exc:
        raise CliError(f"failed to load dataset at {path}: {exc}") from exc
    if not dataset.schema.protected:
        raise CliError(f"dataset at {path} declares no protected attributes")
    return dataset, path


def _checkpoint_paths(settings: Settings) -> dict[float, Path]:
    config = settings.config
    found: dict[float, Path] = {}
    if config.get("checkpoints"):
        for key, value in config["checkpoints"].items():
            try:
                beta = float(key)
            except ValueError:
                raise CliError(f"config.checkpoints key {key!r} is not a beta value") from None
            found[beta] = Path(value)
    elif config.get("checkpoints_dir"):
        root = Path(config["checkpoints_dir"])
        if not root.is_dir():
            raise CliError(f"checkpoints_dir not found: {root}")
        for path in sorted(root.glob("beta*.ckpt")):
            try:
                found[float(path.stem[4:])] = path
            except ValueError:
                raise CliError(f"cannot parse beta value from checkpoint name {path.name!r}") from None
    else:
        raise CliError("config must provide checkpoints or checkpoints_dir for this command")
    if not found:
        raise CliError("no checkpoints found")
    for beta, path in found.items():
        if not path.is_file():
            raise CliError(f"checkpoint for beta {_beta_tag(beta)} not found: {path}")
    return dict(sorted(found.items()))


def _load_models(paths: Mapping[float, Path]) -> tuple[dict[float, vae.VaeModel], dict[float, str]]:
    models: dict[float, vae.VaeModel] = {}
    hashes: dict[float, str] = {}
    for beta, path in paths.items():
        model = vae.VaeModel.load(path)
        if f"{model.config.beta:g}" != _beta_tag(beta):
            raise CliError(
                f"checkpoint {path} holds beta {model.config.beta:g}, expected {_beta_tag(beta)}"
            )
        models[beta] = model
        hashes[beta] = sha256_file(path)
    return models, hashes


def _evaluation(settings: Settings, dataset: Dataset) -> EvaluationSet:
    table = build_subgroups(dataset, dataset.schema.protected)
    n = int(settings.config["evaluation"]["samples_per_subgroup"])
    return sample_evaluation_set(table, n, seed=derive_seed(settings.seed, "evalset"))


def _base_attack_config(settings: Settings) -> attack_mod.AttackConfig:
    section = settings.config["attack"]
    try:
        return attack_mod.AttackConfig(
            budget=float(section["budget"]),
            steps=int(section["steps"]),
            step_size=None if section["step_size"] is None else float(section["step_size"]),
            init=section["init"],
            objective=section["objective"],
            distance=section["distance"],
            seed=derive_seed(settings.seed, "attack"),
        )
    except attack_mod.AttackError as exc:
        raise CliError(f"invalid attack config: {exc}") from exc


def _model_config(settings: Settings, input_dims: tuple[int, int, int], beta: float) -> vae.ModelConfig:
    section = settings.config["model"]
    try:
        return vae.ModelConfig(
            input_dims=input_dims,
            latent_dim=int(section["latent_dim"]),
            beta=float(beta),
            arch=section["arch"],
            hidden=tuple(int(h) for h in section["hidden"]),
            recon_loss=section["recon_loss"],
            dtype=section["dtype"],
        )
    except vae.VaeError as exc:
        raise CliError(f"invalid model config: {exc}") from exc


def _probe_config(settings: Settings, input_dims: tuple[int, int, int]) -> probes.ProbeConfig:
    section = settings.config["probes"]
    try:
        return probes.ProbeConfig(
            input_dims=input_dims,
            arch=section["arch"],
            hidden=tuple(int(h) for h in section["hidden"]),
            epochs=int(section["epochs"]),
            lr=float(section["learning_rate"]),
            batch_size=int(section["batch_size"]),
        )
    except probes.ProbeError as exc:
        raise CliError(f"invalid probe config: {exc}") from exc


def _attack_cache_dir(out: Path, checkpoint_hash: str, base: attack_mod.AttackConfig) -> Path:
    config_hash = sha256_bytes(canonical_json(base.to_dict()).encode("utf-8"))
    return out / "cache" / "attacks" / f"{checkpoint_hash[:16]}-{config_hash[:16]}"


def _per_sample_config(base: attack_mod.AttackConfig, sample_id: str) -> attack_mod.AttackConfig:
    return attack_mod.AttackConfig(**{**base.to_dict(), "seed": derive_seed(base.seed, sample_id)})


def _ensure_artifacts(
    model: vae.VaeModel,
    checkpoint_hash: str,
    dataset: Dataset,
    evaluation_set: EvaluationSet,
    base: attack_mod.AttackConfig,
    out: Path,
    workers: int,
) -> tuple[dict[str, attack_mod.AttackArtifact], list[str], Path]:
    """Load cached artifacts when their config matches; attack the rest.

    Returns (artifacts by sample id, failed sample ids, cache directory).
    Cache entries are hash-verified on load; mismatches are recomputed.
    """
    cache_dir = _attack_cache_dir(out, checkpoint_hash, base)
    cache_dir.mkdir(parents=True, exist_ok=True)
    ids = evaluation_set.all_ids
    artifacts: dict[str, attack_mod.AttackArtifact] = {}
    for sample_id in ids:
        record = cache_dir / f"{sample_id}.json"
        if not record.is_file():
            continue
        try:
            artifact = attack_mod.load_artifact(record)
        except (attack_mod.AttackError, OSError, KeyError, ValueError) as exc:
            logger.warning("discarding unreadable cache entry %s: %s", record, exc)
            continue
        if artifact.sample_id == sample_id and artifact.config == _per_sample_config(base, sample_id):
            artifacts[sample_id] = artifact

    missing = [sid for sid in ids if sid not in artifacts]
    failures: list[str] = []

    def compute(sample_id: str) -> None:
        config = _per_sample_config(base, sample_id)
        try:
            artifact = attack_mod.run_attack(
                model, dataset.pixels_of(sample_id), config, sample_id=sample_id
            )
        except attack_mod.AttackError as exc:
            logger.warning("attack failed for %s: %s", sample_id, exc)
            failures.append(sample_id)
            return
        attack_mod.save_artifact(artifact, cache_dir)
        artifacts[sample_id] = artifact

    if workers > 1 and len(missing) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(compute, missing))
    else:
        for sample_id in missing:
            compute(sample_id)
    return artifacts, sorted(failures), cache_dir


def _prepare_run_dir(settings: Settings, command: str) -> tuple[Path, str]:
    run_id = _run_id(command, settings)
    run_dir = settings.out / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir, run_id


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(settings: Settings) -> int:
    section = settings.config["dataset"]["synth"]
    protected = tuple(section["protected"])
    if len(protected) != 2:
        raise CliError("config.dataset.synth.protected must list exactly two attributes")
    seed = derive_seed(settings.seed, "synth")
    try:
        cards, protos = imbalanced_benchmark_spec(
            height=int(section["height"]),
            width=int(section["width"]),
            majority=int(section["majority"]),
            minority=int(section["minority"]),
            protected=protected,  # type: ignore[arg-type]
        )
        # Generate fully in memory so an invalid spec writes nothing.
        dataset, table = generate_synthetic_dataset(cards, protos, float(section["noise"]), seed)
    except DataError as exc:
        raise CliError(f"invalid synth spec: {exc}") from exc

    run_dir, run_id = _prepare_run_dir(settings, "synth")
    manifest = RunManifest(run_id, "synth", settings.resolved_config())
    manifest.seed("master", settings.seed)
    manifest.seed("synth", seed)
    data_dir = run_dir / "dataset"
    save_dataset(dataset, data_dir, seed=seed, protected=protected)
    manifest.output("dataset", "dataset")
    manifest.output("attributes", "dataset/attributes.txt")
    manifest.output("dataset_manifest", "dataset/manifest.json")
    manifest.input_hash("attributes.txt", sha256_file(data_dir / "attributes.txt"))
    manifest.finish(run_dir)
    cards_str = {k.canonical_name(): v for k, v in table.cardinalities.items()}
    print(f"[synth] {len(dataset)} samples in {len(cards_str)} subgroups -> {data_dir}")
    print(f"[synth] cardinalities: {json.dumps(cards_str, sort_keys=True)}")
    return EXIT_OK


def cmd_train(settings: Settings) -> int:
    dataset, data_path = _require_dataset(settings)
    section = settings.config["model"]
    betas = [float(b) for b in section["betas"]]
    resume_dir = Path(section["resume_dir"]) if section.get("resume_dir") else None

    run_dir, run_id = _prepare_run_dir(settings, "train")
    manifest = RunManifest(run_id, "train", settings.resolved_config())
    manifest.seed("master", settings.seed)
    manifest.input_hash("attributes.txt", sha256_file(data_path / "attributes.txt"))
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    failures: list[str] = []
    for beta in betas:
        tag = _beta_tag(beta)
        config = _model_config(settings, dataset.image_shape, beta)
        seed = derive_seed(settings.seed, "train", f"beta{tag}")
        manifest.seed(f"train_beta{tag}", seed)
        start_model = None
        if resume_dir is not None:
            prior = resume_dir / f"beta{tag}.ckpt"
            if not prior.is_file():
                raise CliError(f"resume checkpoint not found: {prior}")
            start_model = vae.VaeModel.load(prior)
            manifest.input_hash(f"resume_beta{tag}", sha256_file(prior))
        try:
            model, history = vae.train(
                dataset,
                config,
                epochs=int(section["epochs"]),
                seed=seed,
                lr=float(section["learning_rate"]),
                batch_size=int(section["batch_size"]),
                start_model=start_model,
            )
        except vae.TrainingDiverged as exc:
            manifest.warn(f"beta {tag} diverged: {exc}")
            failures.append(tag)
            continue
        ckpt = ckpt_dir / f"beta{tag}.ckpt"
        model.save(ckpt)
        vae.write_loss_history_csv(history, run_dir / f"loss_beta{tag}.csv")
        manifest.output(f"checkpoint_beta{tag}", f"checkpoints/beta{tag}.ckpt")
        manifest.output(f"loss_beta{tag}", f"loss_beta{tag}.csv")
        final = history[-1].total if history else float("nan")
        print(f"[train] beta={tag} epochs={model.meta['epochs']} final_loss={final:.4f} -> {ckpt}")

    status = "partial" if failures else "complete"
    manifest.finish(run_dir, status)
    if failures:
        print(f"[train] diverged for beta(s): {', '.join(failures)}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def cmd_attack(settings: Settings) -> int:
    dataset, data_path = _require_dataset(settings)
    models, hashes = _load_models(_checkpoint_paths(settings))
    evaluation_set = _evaluation(settings, dataset)
    base = _base_attack_config(settings)

    run_dir, run_id = _prepare_run_dir(settings, "attack")
    manifest = RunManifest(run_id, "attack", settings.resolved_config())
    manifest.seed("master", settings.seed)
    manifest.seed("evaluation", evaluation_set.seed)
    manifest.seed("attack", base.seed)
    manifest.input_hash("attributes.txt", sha256_file(data_path / "attributes.txt"))
    for warning in evaluation_set.warnings:
        manifest.warn(warning)

    any_failures = False
    for beta, model in models.items():
        tag = _beta_tag(beta)
        manifest.input_hash(f"checkpoint_beta{tag}", hashes[beta])
        artifacts, failed, cache_dir = _ensure_artifacts(
            model, hashes[beta], dataset, evaluation_set, base, settings.out, settings.workers
        )
        any_failures = any_failures or bool(failed)
        summary = {
            "beta": tag,
            "checkpoint_sha256": hashes[beta],
            "budget": base.budget,
            "cache_dir": str(cache_dir),
            "failed": failed,
            "artifacts": {
                sid: {
                    "achieved_objective": artifacts[sid].achieved_objective,
                    "linf": float(abs(artifacts[sid].delta).max()) if artifacts[sid].delta.size else 0.0,
                }
                for sid in sorted(artifacts)
            },
        }
        write_json(run_dir / f"attacks_beta{tag}.json", summary)
        manifest.output(f"attacks_beta{tag}", f"attacks_beta{tag}.json")
        print(f"[attack] beta={tag}: {len(artifacts)} artifacts ({len(failed)} failed) in {cache_dir}")

    manifest.finish(run_dir, "partial" if any_failures else "complete")
    return EXIT_PIPELINE if any_failures else EXIT_OK


def _latent_outputs(
    settings: Settings,
    run_dir: Path,
    manifest: RunManifest,
    model: vae.VaeModel,
    beta: float,
    dataset: Dataset,
    evaluation_set: EvaluationSet,
    artifacts: Mapping[str, attack_mod.AttackArtifact],
    budget: float,
) -> dict:
    tag = _beta_tag(beta)
    section = settings.config["latent"]
    matrix = latentlab.embed_dataset(model, dataset, ids=evaluation_set.all_ids)
    latentlab.write_embeddings_csv(matrix, run_dir / f"embeddings_beta{tag}.csv")
    manifest.output(f"embeddings_beta{tag}", f"embeddings_beta{tag}.csv")

    method = section["projection"]
    projection = latentlab.project_2d(matrix, method=method, seed=derive_seed(settings.seed, "project", tag))
    latentlab.write_projection_csv(projection, matrix, run_dir / f"projection_beta{tag}.csv")
    manifest.output(f"projection_beta{tag}", f"projection_beta{tag}.csv")

    k = int(section["k"])
    pulls = []
    for sample_id in evaluation_set.all_ids:
        artifact = artifacts.get(sample_id)
        if artifact is None:
            continue
        pulls.append(
            latentlab.pull_effect(
                model,
                matrix,
                dataset.pixels_of(sample_id),
                artifact.delta,
                k=k,
                sample_id=sample_id,
                budget=budget,
            )
        )
    latentlab.write_pull_records_json(pulls, run_dir / f"pull_beta{tag}.json")
    manifest.output(f"pull_beta{tag}", f"pull_beta{tag}.json")
    switched = sum(1 for p in pulls if p.switched)
    return {
        "files": {
            "embeddings_csv": f"embeddings_beta{tag}.csv",
            "projection_csv": f"projection_beta{tag}.csv",
            "pull_json": f"pull_beta{tag}.json",
        },
        "projection_method": method,
        "pull_summary": {"switched_centroid": switched, "total": len(pulls), "k": k},
    }


def cmd_audit(settings: Settings) -> int:
    dataset, data_path = _require_dataset(settings)
    models, hashes = _load_models(_checkpoint_paths(settings))
    for beta, model in models.items():
        if tuple(model.config.input_dims) != dataset.image_shape:
            raise CliError(
                f"checkpoint beta {_beta_tag(beta)} expects input {model.config.input_dims}, "
                f"dataset provides {dataset.image_shape}"
            )
    evaluation_set = _evaluation(settings, dataset)
    base = _base_attack_config(settings)
    table = build_subgroups(dataset, dataset.schema.protected)

    run_dir, run_id = _prepare_run_dir(settings, "audit")
    manifest = RunManifest(run_id, "audit", settings.resolved_config())
    manifest.seed("master", settings.seed)
    manifest.seed("evaluation", evaluation_set.seed)
    manifest.seed("attack", base.seed)
    attributes_hash = sha256_file(data_path / "attributes.txt")
    manifest.input_hash("attributes.txt", attributes_hash)
    for warning in evaluation_set.warnings:
        manifest.warn(warning)

    report_data: dict = {
        "schema_version": 1,
        "dataset": {
            "attributes_sha256": attributes_hash,
            "n_samples": len(dataset),
            "protected": list(dataset.schema.protected),
            "subgroup_cardinalities": {
                k.canonical_name(): v for k, v in table.cardinalities.items()
            },
        },
        "evaluation": {
            "seed": evaluation_set.seed,
            "samples_per_subgroup": evaluation_set.n,
            "counts": {
                k.canonical_name(): len(ids) for k, ids in evaluation_set.per_subgroup.items()
            },
            "warnings": list(evaluation_set.warnings),
        },
        "attack": base.to_dict(),
        "betas": {},
        "probes": None,
    }

    artifacts_by_beta: dict[float, dict[str, attack_mod.AttackArtifact]] = {}
    for beta, model in models.items():
        tag = _beta_tag(beta)
        manifest.input_hash(f"checkpoint_beta{tag}", hashes[beta])
        artifacts, failed, _ = _ensure_artifacts(
            model, hashes[beta], dataset, evaluation_set, base, settings.out, settings.workers
        )
        artifacts_by_beta[beta] = artifacts
        records = robustness.evaluate_subgroups(
            model, dataset, evaluation_set, base, workers=settings.workers, precomputed=artifacts
        )
        ok_records = [r for r in records if r.ok]
        robustness.write_records_csv(records, run_dir / f"records_beta{tag}.csv")
        manifest.output(f"records_beta{tag}", f"records_beta{tag}.csv")
        robustness.write_scatter_csv(
            robustness.scatter_data(records), run_dir / f"scatter_beta{tag}.csv"
        )
        manifest.output(f"scatter_beta{tag}", f"scatter_beta{tag}.csv")

        if ok_records:
            stats = robustness.aggregate(records)
            disparity = robustness.disparity_metrics(stats) if len(stats) >= 2 else None
            marginals = {
                attr: robustness.stats_payload(robustness.marginal_aggregate(records, attr))
                for attr in dataset.schema.protected
            }
        else:
            stats, disparity, marginals = {}, None, {}
            manifest.warn(f"beta {tag}: no successful records")

        section = {
            "checkpoint_sha256": hashes[beta],
            "model": models[beta].config.to_dict(),
            "empty": not ok_records,
            "counts": {"records": len(records), "failed": len(records) - len(ok_records)},
            "attack_failures": failed,
            "stats": robustness.stats_payload(stats, disparity),
            "marginals": marginals,
            "switch_rates": None,
            "files": {
                "records_csv": f"records_beta{tag}.csv",
                "scatter_csv": f"scatter_beta{tag}.csv",
            },
        }
        latent_section = _latent_outputs(
            settings, run_dir, manifest, model, beta, dataset, evaluation_set, artifacts, base.budget
        )
        section["files"].update(latent_section.pop("files"))
        section.update(latent_section)
        report_data["betas"][tag] = section
        median_note = {
            k.canonical_name(): round(s.median, 6) for k, s in stats.items()
        }
        print(f"[audit] beta={tag}: {len(ok_records)}/{len(records)} records, medians {median_note}")

    if not settings.skip_probes:
        report_data["probes"] = {}
        targets = settings.config["probes"]["targets"] or list(dataset.schema.protected)
        probe_config = _probe_config(settings, dataset.image_shape)
        trained: list[probes.ProbeModel] = []
        for target in targets:
            seed = derive_seed(settings.seed, "probe", target)
            manifest.seed(f"probe_{target}", seed)
            probe = probes.train_probe(dataset, target, seed=seed, config=probe_config)
            trained.append(probe)
            table_report = probes.accuracy_table(probe, evaluation_set, models, artifacts_by_beta, dataset)
            probes.write_probe_csv(table_report, run_dir / f"probe_{target}.csv")
            probes.write_prediction_log_csv(
                table_report.predictions, run_dir / f"probe_{target}_log.csv"
            )
            manifest.output(f"probe_{target}", f"probe_{target}.csv")
            manifest.output(f"probe_{target}_log", f"probe_{target}_log.csv")
            report_data["probes"][target] = {
                "report": table_report.to_dict(),
                "train_accuracy": probe.meta.get("train_accuracy"),
                "files": {"table_csv": f"probe_{target}.csv", "log_csv": f"probe_{target}_log.csv"},
            }
            print(f"[audit] probe {target}: train_accuracy={probe.meta.get('train_accuracy'):.4f}")
        for beta, model in models.items():
            rates = probes.subgroup_switch_rate(
                trained, evaluation_set, model, artifacts_by_beta[beta], dataset
            )
            report_data["betas"][_beta_tag(beta)]["switch_rates"] = {
                k.canonical_name(): v for k, v in rates.items()
            }

    report = AuditReport(report_data)
    report.save(run_dir / "report.json")
    manifest.output("report", "report.json")
    manifest.finish(run_dir)
    print(f"[audit] report -> {run_dir / 'report.json'} (sha256 {report.content_hash()[:16]})")
    return EXIT_OK


def cmd_probe(settings: Settings) -> int:
    dataset, data_path = _require_dataset(settings)
    models, hashes = _load_models(_checkpoint_paths(settings))
    evaluation_set = _evaluation(settings, dataset)
    base = _base_attack_config(settings)

    run_dir, run_id = _prepare_run_dir(settings, "probe")
    manifest = RunManifest(run_id, "probe", settings.resolved_config())
    manifest.seed("master", settings.seed)
    manifest.seed("evaluation", evaluation_set.seed)
    manifest.seed("attack", base.seed)
    manifest.input_hash("attributes.txt", sha256_file(data_path / "attributes.txt"))

    artifacts_by_beta = {}
    for beta, model in models.items():
        manifest.input_hash(f"checkpoint_beta{_beta_tag(beta)}", hashes[beta])
        artifacts, failed, _ = _ensure_artifacts(
            model, hashes[beta], dataset, evaluation_set, base, settings.out, settings.workers
        )
        if failed:
            manifest.warn(f"beta {_beta_tag(beta)}: attacks failed for {failed}")
        artifacts_by_beta[beta] = artifacts

    targets = settings.config["probes"]["targets"] or list(dataset.schema.protected)
    probe_config = _probe_config(settings, dataset.image_shape)
    payload: dict = {"targets": {}, "switch_rates": {}}
    trained: list[probes.ProbeModel] = []
    for target in targets:
        seed = derive_seed(settings.seed, "probe", target)
        manifest.seed(f"probe_{target}", seed)
        probe = probes.train_probe(dataset, target, seed=seed, config=probe_config)
        trained.append(probe)
        table_report = probes.accuracy_table(probe, evaluation_set, models, artifacts_by_beta, dataset)
        probes.write_probe_csv(table_report, run_dir / f"probe_{target}.csv")
        probes.write_prediction_log_csv(table_report.predictions, run_dir / f"probe_{target}_log.csv")
        manifest.output(f"probe_{target}", f"probe_{target}.csv")
        manifest.output(f"probe_{target}_log", f"probe_{target}_log.csv")
        payload["targets"][target] = {
            "report": table_report.to_dict(),
            "train_accuracy": probe.meta.get("train_accuracy"),
        }
        print(f"[probe] {target}: train_accuracy={probe.meta.get('train_accuracy'):.4f}")
    for beta, model in models.items():
        rates = probes.subgroup_switch_rate(
            trained, evaluation_set, model, artifacts_by_beta[beta], dataset
        )
        payload["switch_rates"][_beta_tag(beta)] = {k.canonical_name(): v for k, v in rates.items()}

    write_json(run_dir / "probes_report.json", payload)
    manifest.output("probes_report", "probes_report.json")
    manifest.finish(run_dir)
    return EXIT_OK


def cmd_latent(settings: Settings) -> int:
    dataset, data_path = _require_dataset(settings)
    models, hashes = _load_models(_checkpoint_paths(settings))
    evaluation_set = _evaluation(settings, dataset)
    base = _base_attack_config(settings)

    run_dir, run_id = _prepare_run_dir(settings, "latent")
    manifest = RunManifest(run_id, "latent", settings.resolved_config())
    manifest.seed("master", settings.seed)
    manifest.seed("evaluation", evaluation_set.seed)
    manifest.seed("attack", base.seed)
    manifest.input_hash("attributes.txt", sha256_file(data_path / "attributes.txt"))

    payload: dict = {"betas": {}}
    for beta, model in models.items():
        tag = _beta_tag(beta)
        manifest.input_hash(f"checkpoint_beta{tag}", hashes[beta])
        artifacts, failed, _ = _ensure_artifacts(
            model, hashes[beta], dataset, evaluation_set, base, settings.out, settings.workers
        )
        if failed:
            manifest.warn(f"beta {tag}: attacks failed for {failed}")
        section = _latent_outputs(
            settings, run_dir, manifest, model, beta, dataset, evaluation_set, artifacts, base.budget
        )
        section["checkpoint_sha256"] = hashes[beta]
        payload["betas"][tag] = section
        print(f"[latent] beta={tag}: pull {section['pull_summary']}")

    write_json(run_dir / "latent_report.json", payload)
    manifest.output("latent_report", "latent_report.json")
    manifest.finish(run_dir)
    return EXIT_OK


def cmd_report(settings: Settings, run: str, fmt: str) -> int:
    run_dir = settings.out / run
    report_path = run_dir / "report.json"
    if not run_dir.is_dir() or not report_path.is_file():
        # Validate before creating anything so a bad run id leaves no files.
        raise CliError(f"unknown run id {run!r}: no audit report under {run_dir}")
    report = AuditReport.load(report_path)
    data = report.data

    out_dir = run_dir / "report"
    out_dir.mkdir(exist_ok=True)

    box_stats: dict = {"empty": not data.get("betas"), "betas": {}}
    scatter_rendered: dict = {}
    for tag, section in sorted(data.get("betas", {}).items()):
        subgroup_stats = section.get("stats", {}).get("subgroups", {})
        box_stats["betas"][tag] = {
            "empty": section.get("empty", not subgroup_stats),
            "subgroups": {
                name: {
                    "median": s["median"],
                    "q1": s["q1"],
                    "q3": s["q3"],
                    "min": s["min"],
                    "max": s["max"],
                    "count": s["count"],
                }
                for name, s in subgroup_stats.items()
            },
            "disparity": section.get("stats", {}).get("disparity"),
        }
        records_name = section.get("files", {}).get("records_csv")
        if records_name and (run_dir / records_name).is_file():
            records = robustness.read_records_csv(run_dir / records_name)
            points = robustness.scatter_data(records)
            if fmt == "csv":
                robustness.write_scatter_csv(points, out_dir / f"scatter_beta{tag}.csv")
            else:
                scatter_rendered[tag] = [
                    {
                        "recon_loss": p.recon_loss,
                        "deviation": p.deviation,
                        "subgroup": p.subgroup.canonical_name(),
                        "beta": p.beta,
                    }
                    for p in points
                ]
    write_json(out_dir / "box_stats.json", box_stats)

    probe_tables: dict = {}
    for target, entry in sorted((data.get("probes") or {}).items()):
        grid = entry["report"]
        betas = list(grid["betas"])
        rows = []
        for name in sorted(grid["direct"]):
            def cell(raw: Mapping | None) -> str:
                if not raw or raw["total"] == 0:
                    return ""
                return f"{raw['correct'] / raw['total']:.4f}"

            row = [name, cell(grid["direct"][name])]
            row += [cell(grid["reconstruction"].get(name, {}).get(b)) for b in betas]
            row += [cell(grid["adversarial"].get(name, {}).get(b)) for b in betas]
            rows.append(row)
        header = ["subgroup", "direct"]
        header += [f"recon_beta{b}" for b in betas]
        header += [f"adv_beta{b}" for b in betas]
        probe_tables[target] = {"header": header, "rows": rows}
        if fmt == "csv":
            import csv as _csv

            with open(out_dir / f"probe_{target}.csv", "w", newline="", encoding="utf-8") as fh:
                writer = _csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)

    if fmt == "json":
        write_json(
            out_dir / "report_rendered.json",
            {"box_stats": box_stats, "probe_tables": probe_tables, "scatter": scatter_rendered},
        )
    print(f"[report] rendered {run!r} ({fmt}) -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections per pipeline stage)")
    common.add_argument("--seed", type=int, help="master seed (overrides env and config)")
    common.add_argument("--workers", type=int, help="worker threads for per-sample attacks")
    common.add_argument("--out", help="base output directory for run folders")
    common.add_argument("--run-id", dest="run_id", help="explicit run id (default: derived from config)")

    parser = argparse.ArgumentParser(
        prog="vaeaudit",
        description="Audit adversarial robustness of beta-VAEs across demographic subgroups.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark dataset")
    sub.add_parser("train", parents=[common], help="train one checkpoint per configured beta")
    sub.add_parser("attack", parents=[common], help="generate attack artifacts for the evaluation set")
    audit = sub.add_parser("audit", parents=[common], help="full audit pipeline incl. report")
    audit.add_argument("--skip-probes", action="store_true", help="omit probe tables from the report")
    sub.add_parser("probe", parents=[common], help="train probes and tabulate accuracy")
    sub.add_parser("latent", parents=[common], help="embeddings, projections, pull records")
    report = sub.add_parser("report", parents=[common], help="render tables from an audit run")
    report.add_argument("run", help="run id of a completed audit")
    report.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        settings = resolve_settings(args)
        if args.command == "synth":
            return cmd_synth(settings)
        if args.command == "train":
            return cmd_train(settings)
        if args.command == "attack":
            return cmd_attack(settings)
        if args.command == "audit":
            return cmd_audit(settings)
        if args.command == "probe":
            return cmd_probe(settings)
        if args.command == "latent":
            return cmd_latent(settings)
        if args.command == "report":
            return cmd_report(settings, args.run, args.format)
        raise CliError(f"unknown command {args.command!r}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        PipelineError,
        DataError,
        vae.VaeError,
        vae.TrainingDiverged,
        attack_mod.AttackError,
        robustness.RobustnessError,
        probes.ProbeError,
        latentlab.LatentLabError,
        OSError,
    ) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
