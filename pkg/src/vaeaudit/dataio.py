"""Dataset ingestion, intersectional subgroups, and synthetic data generation.

Parses CelebA-style attribute annotations, partitions samples into
intersectional subgroups by intersecting binary protected attributes, draws
seeded per-subgroup evaluation samples, and synthesizes imbalanced toy
datasets for desk-scale experiments. All structures are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from ._util import read_json, write_json


POS = "+"
NEG = "-"

# Attribute names must stay parseable out of canonical subgroup names, which
# join "<name><+|->" tokens with "-".
_NAME_RE = re.compile(r"^[A-Za-z0-9_]+$")
_TOKEN_RE = re.compile(r"([A-Za-z0-9_]+)([+\-])")


class DataError(ValueError):
    """Malformed dataset input or contract violation in data plumbing."""


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute names plus the subset designated protected."""

    names: tuple[str, ...]
    protected: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise DataError("attribute names must be unique")
        for name in self.names:
            if not _NAME_RE.match(name):
                raise DataError(f"invalid attribute name {name!r}: must match [A-Za-z0-9_]+")
        unknown = [p for p in self.protected if p not in self.names]
        if unknown:
            raise DataError(f"protected attributes not in schema: {unknown}")
        if len(set(self.protected)) != len(self.protected):
            raise DataError("protected attributes must be unique")

    def with_protected(self, protected: Sequence[str]) -> "AttributeSchema":
        """Return a copy with `protected` set, ordered by schema order."""
        ordered = tuple(n for n in self.names if n in set(protected))
        if len(ordered) != len(set(protected)):
            unknown = sorted(set(protected) - set(self.names))
            raise DataError(f"unknown protected attributes: {unknown}")
        return AttributeSchema(self.names, ordered)


@dataclass(frozen=True)
class ImageSample:
    """One image with its attribute values (each in {-1, +1})."""

    id: str
    pixels: np.ndarray  # (H, W, C) floats in [0, 1]
    attributes: Mapping[str, int]

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3:
            raise DataError(f"sample {self.id}: pixels must be (H, W, C), got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise DataError(f"sample {self.id}: pixel values must be finite and in [0, 1]")
        for name, value in self.attributes.items():
            if value not in (-1, 1):
                raise DataError(f"sample {self.id}: attribute {name}={value!r} not in {{-1, +1}}")


@dataclass(frozen=True)
class SubgroupKey:
    """One (attribute, group label) assignment per protected attribute.

    Assignments follow schema order; labels are "+" / "-" mirroring the
    stored attribute values.
    """

    assignments: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        for name, label in self.assignments:
            if label not in (POS, NEG):
                raise DataError(f"subgroup label for {name} must be '+' or '-', got {label!r}")

    @classmethod
    def from_attributes(cls, protected: Sequence[str], attributes: Mapping[str, int]) -> "SubgroupKey":
        pairs = []
        for name in protected:
            if name not in attributes:
                raise DataError(f"missing attribute value for {name!r}")
            pairs.append((name, POS if attributes[name] > 0 else NEG))
        return cls(tuple(pairs))

    @classmethod
    def from_canonical(cls, name: str) -> "SubgroupKey":
        if name == "all":
            return cls(())
        tokens = _TOKEN_RE.findall(name)
        rebuilt = "-".join(f"{n}{l}" for n, l in tokens)
        if not tokens or rebuilt != name:
            raise DataError(f"unparseable subgroup name {name!r}")
        return cls(tuple(tokens))

    def canonical_name(self) -> str:
        if not self.assignments:
            return "all"
        return "-".join(f"{name}{label}" for name, label in self.assignments)

    def label_for(self, attribute: str) -> str:
        for name, label in self.assignments:
            if name == attribute:
                return label
        raise DataError(f"attribute {attribute!r} not part of subgroup key")

    def __str__(self) -> str:  # pragma: no cover - repr convenience
        return self.canonical_name()


@dataclass(frozen=True)
class SubgroupTable:
    """Partition of a dataset into intersectional subgroups."""

    groups: Mapping[SubgroupKey, tuple[str, ...]]

    @property
    def cardinalities(self) -> dict[SubgroupKey, int]:
        return {key: len(ids) for key, ids in self.groups.items()}

    @property
    def total(self) -> int:
        return sum(len(ids) for ids in self.groups.values())

    def subgroup_of(self, sample_id: str) -> SubgroupKey:
        for key, ids in self.groups.items():
            if sample_id in ids:
                return key
        raise DataError(f"sample {sample_id!r} not present in subgroup table")

    def keys_in_order(self) -> list[SubgroupKey]:
        return sorted(self.groups, key=lambda k: k.canonical_name())


@dataclass(frozen=True)
class EvaluationSet:
    """Seeded per-subgroup draw of evaluation sample ids."""

    per_subgroup: Mapping[SubgroupKey, tuple[str, ...]]
    n: int
    seed: int
    warnings: tuple[str, ...] = ()

    @property
    def all_ids(self) -> list[str]:
        out: list[str] = []
        for key in sorted(self.per_subgroup, key=lambda k: k.canonical_name()):
            out.extend(self.per_subgroup[key])
        return out

    def subgroup_of(self, sample_id: str) -> SubgroupKey:
        for key, ids in self.per_subgroup.items():
            if sample_id in ids:
                return key
        raise DataError(f"sample {sample_id!r} not in evaluation set")


class Dataset:
    """Immutable collection of samples sharing one attribute schema."""

    def __init__(self, schema: AttributeSchema, samples: Sequence[ImageSample]):
        self.schema = schema
        self.samples = tuple(samples)
        by_id: dict[str, ImageSample] = {}
        for sample in self.samples:
            if sample.id in by_id:
                raise DataError(f"duplicate sample id {sample.id!r}")
            missing = [n for n in schema.names if n not in sample.attributes]
            if missing:
                raise DataError(f"sample {sample.id!r} missing attributes {missing}")
            by_id[sample.id] = sample
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def get(self, sample_id: str) -> ImageSample:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise DataError(f"unknown sample id {sample_id!r}") from None

    def pixels_of(self, sample_id: str) -> np.ndarray:
        return self.get(sample_id).pixels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        if not self.samples:
            raise DataError("empty dataset has no image shape")
        return tuple(self.samples[0].pixels.shape)  # type: ignore[return-value]


def parse_attribute_file(text: str) -> tuple[AttributeSchema, dict[str, dict[str, int]]]:
    """Parse a CelebA list-attribute file.

    Layout: line 1 is the image count, line 2 the attribute names, and each
    following line a filename plus one value in {-1, +1} per attribute.
    Rejects with a line number on count mismatch, bad values, duplicate
    filenames, or missing columns.
    """
    lines = text.splitlines()
    if len(lines) < 2:
        raise DataError("line 1: expected count line and attribute-name line")
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise DataError(f"line 1: expected integer image count, got {lines[0].strip()!r}") from None
    names = tuple(lines[1].split())
    if not names:
        raise DataError("line 2: no attribute names found")
    schema = AttributeSchema(names)

    values: dict[str, dict[str, int]] = {}
    for lineno, raw in enumerate(lines[2:], start=3):
        if not raw.strip():
            continue
        fields = raw.split()
        filename = fields[0]
        if filename in values:
            raise DataError(f"line {lineno}: duplicate filename {filename!r}")
        if len(fields) - 1 != len(names):
            raise DataError(
                f"line {lineno}: expected {len(names)} attribute values, got {len(fields) - 1}"
            )
        row: dict[str, int] = {}
        for name, token in zip(names, fields[1:]):
            if token == "1":
                row[name] = 1
            elif token == "-1":
                row[name] = -1
            else:
                raise DataError(f"line {lineno}: value {token!r} for {name} not in {{-1, 1}}")
        values[filename] = row

    if len(values) != declared:
        raise DataError(
            f"line 1: declared {declared} rows but file contains {len(values)}"
        )
    return schema, values


def build_subgroups(dataset: Dataset, protected: Sequence[str]) -> SubgroupTable:
    """Partition `dataset` by intersecting its protected attribute values."""
    for name in protected:
        if name not in dataset.schema.names:
            raise DataError(f"unknown protected attribute {name!r}")
    ordered = tuple(n for n in dataset.schema.names if n in set(protected))
    groups: dict[SubgroupKey, list[str]] = {}
    for sample in dataset:
        key = SubgroupKey.from_attributes(ordered, sample.attributes)
        groups.setdefault(key, []).append(sample.id)
    frozen = {
        key: tuple(sorted(ids))
        for key, ids in sorted(groups.items(), key=lambda kv: kv[0].canonical_name())
    }
    return SubgroupTable(frozen)


def sample_evaluation_set(table: SubgroupTable, n: int, seed: int) -> EvaluationSet:
    """Draw up to `n` ids per subgroup, uniformly without replacement.

    Subgroups smaller than `n` contribute all members; empty subgroups yield
    an empty list plus a warning record rather than a failure.
    """
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    picked: dict[SubgroupKey, tuple[str, ...]] = {}
    warnings: list[str] = []
    for key in table.keys_in_order():
        ids = sorted(table.groups[key])
        if not ids:
            warnings.append(f"subgroup {key.canonical_name()} is empty; no samples drawn")
            picked[key] = ()
            continue
        take = min(n, len(ids))
        if take < n:
            warnings.append(
                f"subgroup {key.canonical_name()} has only {len(ids)} samples (requested {n})"
            )
        idx = rng.choice(len(ids), size=take, replace=False)
        picked[key] = tuple(ids[i] for i in sorted(idx))
    return EvaluationSet(picked, n=n, seed=seed, warnings=tuple(warnings))


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Clip pixel values to [0, 1]. Idempotent; rejects non-finite input."""
    arr = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("cannot normalize non-finite pixel values")
    return np.clip(arr, 0.0, 1.0)


def generate_synthetic_dataset(
    cardinalities: Mapping[SubgroupKey, int],
    prototypes: Mapping[SubgroupKey, np.ndarray],
    noise_scale: float,
    seed: int,
) -> tuple[Dataset, SubgroupTable]:
    """Build a dataset of noisy prototype copies, one prototype per subgroup.

    Each sample is clip(prototype + N(0, noise_scale^2), 0, 1) with attributes
    read off its subgroup key. Deterministic under `seed`.
    """
    if noise_scale < 0:
        raise DataError(f"noise scale must be >= 0, got {noise_scale}")
    keys = sorted(cardinalities, key=lambda k: k.canonical_name())
    if set(prototypes) != set(keys):
        raise DataError("need exactly one prototype per subgroup in the cardinality spec")
    if not keys:
        raise DataError("cardinality spec is empty")

    shape = np.asarray(prototypes[keys[0]]).shape
    protected = tuple(name for name, _ in keys[0].assignments)
    for key in keys:
        if cardinalities[key] < 0:
            raise DataError(f"subgroup {key.canonical_name()} has negative count")
        if tuple(name for name, _ in key.assignments) != protected:
            raise DataError("all subgroup keys must share the same protected attributes")
        proto = np.asarray(prototypes[key], dtype=np.float64)
        if proto.shape != shape:
            raise DataError(
                f"prototype shape mismatch for {key.canonical_name()}: "
                f"{proto.shape} != {shape}"
            )
        if proto.ndim != 3 or not np.all(np.isfinite(proto)) or proto.min() < 0 or proto.max() > 1:
            raise DataError(f"prototype for {key.canonical_name()} must be (H, W, C) in [0, 1]")

    schema = AttributeSchema(protected, protected)
    rng = np.random.default_rng(seed)
    samples: list[ImageSample] = []
    for key in keys:
        proto = np.asarray(prototypes[key], dtype=np.float64)
        attrs = {name: (1 if label == POS else -1) for name, label in key.assignments}
        for i in range(cardinalities[key]):
            noise = rng.standard_normal(shape) * noise_scale
            pixels = np.clip(proto + noise, 0.0, 1.0)
            samples.append(
                ImageSample(id=f"{key.canonical_name()}_{i:06d}", pixels=pixels, attributes=attrs)
            )
    dataset = Dataset(schema, samples)
    return dataset, build_subgroups(dataset, protected)


def imbalanced_benchmark_spec(
    height: int = 16,
    width: int = 16,
    majority: int = 200,
    minority: int = 20,
    protected: tuple[str, str] = ("Male", "Young"),
) -> tuple[dict[SubgroupKey, int], dict[SubgroupKey, np.ndarray]]:
    """Cardinalities and prototypes for the 4-subgroup imbalanced benchmark.

    Three majority subgroups with smooth, well-separated prototypes and one
    minority subgroup (both attributes negative) at `minority` cardinality
    whose prototype blends the majority patterns, so it sits between their
    pixel-space clusters.
    """
    a, b = protected
    yy = np.linspace(0.0, 1.0, height, dtype=np.float64)[:, None]
    xx = np.linspace(0.0, 1.0, width, dtype=np.float64)[None, :]

    horizontal = np.broadcast_to(0.15 + 0.7 * xx, (height, width)).copy()
    vertical = np.broadcast_to(0.15 + 0.7 * yy, (height, width)).copy()
    radial = 0.9 - 0.7 * np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2) / np.sqrt(0.5)
    blend = 0.5 * horizontal + 0.5 * vertical
    stripes = 0.12 * np.sin(2.0 * np.pi * 3.0 * (xx + yy))
    minority_proto = np.clip(blend + stripes, 0.0, 1.0)

    def key(la: str, lb: str) -> SubgroupKey:
        return SubgroupKey(((a, la), (b, lb)))

    def grid(img: np.ndarray) -> np.ndarray:
        return np.clip(img, 0.0, 1.0)[:, :, None]

    cards = {
        key(POS, POS): majority,
        key(NEG, POS): majority,
        key(POS, NEG): majority,
        key(NEG, NEG): minority,
    }
    protos = {
        key(POS, POS): grid(horizontal),
        key(NEG, POS): grid(vertical),
        key(POS, NEG): grid(radial),
        key(NEG, NEG): grid(minority_proto),
    }
    return cards, protos


# ---------------------------------------------------------------------------
# On-disk dataset format: PNG images + CelebA attribute file + JSON manifest.


@dataclass(frozen=True)
class DatasetManifest:
    schema_names: tuple[str, ...]
    protected: tuple[str, ...]
    cardinalities: dict[str, int]
    seed: int | None
    source_paths: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "schema": list(self.schema_names),
            "protected": list(self.protected),
            "subgroup_cardinalities": dict(sorted(self.cardinalities.items())),
            "seed": self.seed,
            "source_paths": list(self.source_paths),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "DatasetManifest":
        return cls(
            schema_names=tuple(raw["schema"]),
            protected=tuple(raw["protected"]),
            cardinalities=dict(raw["subgroup_cardinalities"]),
            seed=raw.get("seed"),
            source_paths=tuple(raw.get("source_paths", ())),
        )


def save_dataset(
    dataset: Dataset,
    out_dir: str | Path,
    seed: int | None = None,
    protected: Sequence[str] | None = None,
) -> DatasetManifest:
    """Persist a dataset as PNGs plus attribute file and manifest JSON."""
    out = Path(out_dir)
    protected = tuple(protected if protected is not None else dataset.schema.protected)
    table = build_subgroups(dataset, protected) if protected else None

    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    lines = [str(len(dataset)), " ".join(dataset.schema.names)]
    for sample in dataset:
        values = " ".join(str(sample.attributes[n]) for n in dataset.schema.names)
        filename = f"{sample.id}.png"
        lines.append(f"{filename} {values}")
        _save_png(sample.pixels, images_dir / filename)
    (out / "attributes.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    cards = (
        {k.canonical_name(): v for k, v in table.cardinalities.items()}
        if table is not None
        else {"all": len(dataset)}
    )
    manifest = DatasetManifest(
        schema_names=dataset.schema.names,
        protected=protected,
        cardinalities=cards,
        seed=seed,
        source_paths=("images", "attributes.txt"),
    )
    write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def load_dataset(data_dir: str | Path, resolution: tuple[int, int] | None = None) -> Dataset:
    """Load a dataset directory written by :func:`save_dataset`.

    `resolution` (H, W), when given, resizes images that do not match.
    """
    root = Path(data_dir)
    manifest = DatasetManifest.from_dict(read_json(root / "manifest.json"))
    schema, values = parse_attribute_file((root / "attributes.txt").read_text(encoding="utf-8"))
    if schema.names != manifest.schema_names:
        raise DataError("attribute file names disagree with manifest schema")
    schema = schema.with_protected(manifest.protected)

    samples = []
    for filename in values:
        pixels = _load_png(root / "images" / filename, resolution)
        samples.append(
            ImageSample(id=Path(filename).stem, pixels=pixels, attributes=values[filename])
        )
    return Dataset(schema, samples)


def _save_png(pixels: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    elif arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise DataError(f"unsupported channel count {arr.shape[2]} for PNG export")
    img.save(path, format="PNG")


def _load_png(path: Path, resolution: tuple[int, int] | None) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    if resolution is not None and (img.height, img.width) != tuple(resolution):
        img = img.resize((resolution[1], resolution[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr
