"""Synthetic multi-domain images with a planted invariant and a spurious cue.

Channel 0 carries a class-specific oriented grating (the invariant shape
signal, identical in every domain). Channels 1-2 carry a constant colour
offset that names a class; in domain ``d`` it names the true class with a
probability set by the domain's correlation ``rho_d``. Flipping the sign of
``rho`` on the held-out domain is the domain-shift knob.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, FormatError, TruncationError, VersionError


@dataclass(frozen=True)
class SyntheticSpec:
    rhos: tuple[float, ...] = (0.8, 0.9, 0.95, -0.9)
    n_classes: int = 4
    image_size: tuple[int, int] = (16, 16)
    shape_contrast: float = 1.0
    color_strength: float = 1.0
    noise_sigma: float = 0.1
    samples_per_domain: int = 300
    grating_period: float = 4.0
    prototypes_per_class: int = 1
    period_ratio: float = 1.6
    seed: int = 0
    domain_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "rhos", tuple(float(r) for r in self.rhos))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.domain_names is not None:
            object.__setattr__(self, "domain_names", tuple(self.domain_names))
        self.validate()

    @property
    def n_domains(self) -> int:
        return len(self.rhos)

    @property
    def names(self) -> tuple[str, ...]:
        return self.domain_names or tuple(f"domain{d}" for d in range(self.n_domains))

    def validate(self) -> None:
        if self.n_domains < 3:
            raise ConfigError(f"need at least 3 domains, got {self.n_domains}")
        if any(not (-1.0 <= r <= 1.0) for r in self.rhos):
            raise ConfigError(f"every rho must lie in [-1, 1], got {self.rhos}")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if min(self.image_size) < 1:
            raise ConfigError(f"bad image size {self.image_size}")
        if self.noise_sigma < 0 or self.samples_per_domain < 1 or self.grating_period <= 0:
            raise ConfigError("noise_sigma >= 0, samples_per_domain >= 1, grating_period > 0 required")
        if self.prototypes_per_class < 1 or self.period_ratio <= 0:
            raise ConfigError("prototypes_per_class must be >= 1 and period_ratio > 0")
        if self.domain_names is not None and len(self.domain_names) != self.n_domains:
            raise ConfigError("domain_names must name every domain")

    def with_held_out(self, held_out: int, train_rhos: Sequence[float], held_out_rho: float) -> "SyntheticSpec":
        """Same spec with ``held_out`` given ``held_out_rho`` and the rest ``train_rhos`` in order."""
        if not 0 <= held_out < self.n_domains:
            raise ConfigError(f"held-out domain {held_out} does not exist")
        train = iter(train_rhos)
        rhos = tuple(held_out_rho if d == held_out else next(train) for d in range(self.n_domains))
        return _replace(self, rhos=rhos)


def _replace(spec: SyntheticSpec, **changes) -> SyntheticSpec:
    data = asdict(spec)
    data.update(changes)
    return SyntheticSpec(**data)


def agreement_probability(rho: float, n_classes: int) -> float:
    """P(colour names the true class). Equals (1+rho)/2 for two classes, 1/K at rho=0."""
    base = 1.0 / n_classes
    return base + rho * (1.0 - base) if rho >= 0 else base * (1.0 + rho)


def shape_templates(n_classes: int, image_size: tuple[int, int], period: float = 4.0,
                    prototypes_per_class: int = 1, period_ratio: float = 1.6) -> np.ndarray:
    """+-1 gratings, shape ``[prototypes_per_class * n_classes, H, W]``.

    Template ``j = q * n_classes + c`` is prototype ``q`` of class ``c``: a
    grating with period ``period * period_ratio**q`` and orientation index
    ``(c - q) mod n_classes``. With more than one prototype neither
    orientation nor period alone names the class; only their conjunction does.
    """
    h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty((n_classes * prototypes_per_class, h, w))
    for q in range(prototypes_per_class):
        lam = period * period_ratio ** q
        for c in range(n_classes):
            theta = math.pi * ((c - q) % n_classes) / n_classes
            phase = 2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / lam
            out[q * n_classes + c] = np.where(np.sin(phase + 0.25) >= 0, 1.0, -1.0)
    return out


def template_classes(n_templates: int, n_classes: int) -> np.ndarray:
    return np.arange(n_templates) % n_classes


def color_codes(n_classes: int) -> np.ndarray:
    """Unit 2-vectors, one per class, for the colour channels."""
    phi = 2 * math.pi * np.arange(n_classes) / n_classes + math.pi / 4
    return np.stack([np.cos(phi), np.sin(phi)], axis=1)


@dataclass
class Dataset:
    images: np.ndarray      # [N, 3, H, W] float64
    labels: np.ndarray      # [N] int64
    domains: np.ndarray     # [N] int64
    color_ids: np.ndarray   # [N] int64, class named by the colour cue
    n_classes: int
    domain_names: tuple[str, ...]
    spec: SyntheticSpec | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_domains(self) -> int:
        return len(self.domain_names)

    def domain_indices(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.domains == d)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.domains[idx], self.color_ids[idx],
                       self.n_classes, self.domain_names, self.spec)


def _generate_domain(spec: SyntheticSpec, d: int, rng: np.random.Generator,
                     templates: np.ndarray, codes: np.ndarray):
    n, K = spec.samples_per_domain, spec.n_classes
    h, w = spec.image_size
    labels = rng.integers(0, K, size=n)
    proto = rng.integers(0, spec.prototypes_per_class, size=n)
    agree = rng.random(n) < agreement_probability(spec.rhos[d], K)
    others = (labels + rng.integers(1, K, size=n)) % K
    color_ids = np.where(agree, labels, others)
    images = np.empty((n, 3, h, w))
    images[:, 0] = spec.shape_contrast * templates[proto * K + labels]
    images[:, 1:] = spec.color_strength * codes[color_ids][:, :, None, None]
    images += spec.noise_sigma * rng.standard_normal(images.shape)
    return images, labels, color_ids


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic in ``spec.seed``; each domain draws from its own spawned stream."""
    spec.validate()
    templates = shape_templates(spec.n_classes, spec.image_size, spec.grating_period,
                                spec.prototypes_per_class, spec.period_ratio)
    codes = color_codes(spec.n_classes)
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_domains)
    parts = [_generate_domain(spec, d, np.random.default_rng(s), templates, codes)
             for d, s in enumerate(streams)]
    n = spec.samples_per_domain
    return Dataset(
        images=np.concatenate([p[0] for p in parts]),
        labels=np.concatenate([p[1] for p in parts]).astype(np.int64),
        domains=np.repeat(np.arange(spec.n_domains), n).astype(np.int64),
        color_ids=np.concatenate([p[2] for p in parts]).astype(np.int64),
        n_classes=spec.n_classes,
        domain_names=spec.names,
        spec=spec,
    )


def nearest_template_predict(images: np.ndarray, templates: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Shape-only classifier: class of the best-correlating template on channel 0."""
    flat = images[:, 0].reshape(len(images), -1)
    best = (flat @ templates.reshape(len(templates), -1).T).argmax(axis=1)
    return best if n_classes is None else template_classes(len(templates), n_classes)[best]


def color_threshold_predict(images: np.ndarray, n_classes: int) -> np.ndarray:
    """Colour-only classifier: class whose code best matches the mean colour."""
    color = images[:, 1:].mean(axis=(2, 3))
    return (color @ color_codes(n_classes).T).argmax(axis=1)


# ---------------------------------------------------------------- splitting

@dataclass
class SplitPlan:
    train: dict[int, np.ndarray]
    validation: dict[int, np.ndarray]
    held_out_domain: int | None
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def source_domains(self) -> list[int]:
        return sorted(self.train)

    def train_indices(self) -> np.ndarray:
        return np.concatenate([self.train[d] for d in self.source_domains])

    def validation_indices(self) -> np.ndarray:
        return np.concatenate([self.validation[d] for d in self.source_domains])


def split(dataset: Dataset, held_out_domain: int | None, seed: int = 0,
          validation_fraction: float = 0.1) -> SplitPlan:
    """Per source domain: seeded shuffle, then a 9:1 train/validation cut.

    ``held_out_domain=None`` makes every domain a source and leaves the test set empty.
    """
    if not 0.0 <= validation_fraction < 1.0:
        raise ConfigError(f"validation_fraction must lie in [0, 1), got {validation_fraction}")
    if held_out_domain is not None and not 0 <= held_out_domain < dataset.n_domains:
        raise ConfigError(f"held-out domain {held_out_domain} not in 0..{dataset.n_domains - 1}")
    rng = np.random.default_rng(seed)
    train, val = {}, {}
    for d in range(dataset.n_domains):
        if d == held_out_domain:
            continue
        idx = dataset.domain_indices(d)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * validation_fraction))
        val[d] = np.sort(idx[:n_val])
        train[d] = np.sort(idx[n_val:])
    test = (np.zeros(0, dtype=np.int64) if held_out_domain is None
            else dataset.domain_indices(held_out_domain))
    return SplitPlan(train, val, held_out_domain, test)


# ---------------------------------------------------------------- batching

@dataclass
class DomainBatch:
    images: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def domain_slices(self) -> list[tuple[int, slice]]:
        """(domain id, slice) per contiguous sub-batch, in order of appearance."""
        out, start = [], 0
        ids = self.domain_ids
        for i in range(1, len(ids) + 1):
            if i == len(ids) or ids[i] != ids[start]:
                out.append((int(ids[start]), slice(start, i)))
                start = i
        return out

    def is_balanced(self) -> bool:
        sizes = [s.stop - s.start for _, s in self.domain_slices()]
        doms = [d for d, _ in self.domain_slices()]
        return len(set(sizes)) == 1 and len(set(doms)) == len(doms)


def check_batch_size(batch_size: int, n_sources: int) -> int:
    if batch_size < n_sources or batch_size % n_sources:
        raise ConfigError(
            f"batch size {batch_size} must be a positive multiple of the {n_sources} source domains")
    return batch_size // n_sources


def iter_epoch(dataset: Dataset, plan: SplitPlan, batch_size: int,
               rng: np.random.Generator) -> Iterator[DomainBatch]:
    """One epoch of domain-balanced batches; the ragged tail is dropped."""
    per = check_batch_size(batch_size, len(plan.source_domains))
    orders = {d: plan.train[d][rng.permutation(len(plan.train[d]))] for d in plan.source_domains}
    n_batches = min(len(o) for o in orders.values()) // per
    for b in range(n_batches):
        idx = np.concatenate([orders[d][b * per:(b + 1) * per] for d in plan.source_domains])
        yield DomainBatch(dataset.images[idx], dataset.labels[idx], dataset.domains[idx])


def batch_iterator(dataset: Dataset, plan: SplitPlan, batch_size: int, seed: int,
                   epochs: int | None = 1) -> Iterator[DomainBatch]:
    check_batch_size(batch_size, len(plan.source_domains))
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from iter_epoch(dataset, plan, batch_size, rng)
        epoch += 1


# ---------------------------------------------------------------- DGPD container

MAGIC = b"DGPD"
VERSION = 1
_F64 = 1
_HEADER = "<IIIIIIIB"  # version, n, C, H, W, n_domains, n_classes, dtype tag


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Binary payload at ``path`` plus a JSON manifest at ``path + '.json'``."""
    path = Path(path)
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(_HEADER, VERSION, n, c, h, w, dataset.n_domains, dataset.n_classes, _F64))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
        for arr in (dataset.labels, dataset.domains, dataset.color_ids):
            fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    manifest = {
        "format": "DGPD",
        "version": VERSION,
        "domain_names": list(dataset.domain_names),
        "spec": None if dataset.spec is None else asdict(dataset.spec),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return path


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise TruncationError(f"{path}: file too short for a header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    hsize = struct.calcsize(_HEADER)
    if len(raw) < 4 + hsize:
        raise TruncationError(f"{path}: truncated header")
    version, n, c, h, w, n_domains, n_classes, tag = struct.unpack_from(_HEADER, raw, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported DGPD version {version}")
    if tag != _F64:
        raise FormatError(f"{path}: unsupported dtype tag {tag}")
    need = 4 + hsize + 8 * n * c * h * w + 3 * 8 * n
    if len(raw) < need:
        raise TruncationError(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes")
    off = 4 + hsize
    images = np.frombuffer(raw, dtype="<f8", count=n * c * h * w, offset=off).reshape(n, c, h, w)
    off += 8 * images.size
    ints = []
    for _ in range(3):
        ints.append(np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64))
        off += 8 * n
    names = tuple(f"domain{d}" for d in range(n_domains))
    spec = None
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        names = tuple(manifest.get("domain_names") or names)
        if manifest.get("spec"):
            spec = SyntheticSpec(**manifest["spec"])
    return Dataset(images.astype(np.float64), ints[0], ints[1], ints[2], n_classes, names, spec)
