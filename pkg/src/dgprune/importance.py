"""Filter importance: exact leave-one-out, Taylor, risk variance and IoR.

All first-order scores are read off the per-channel gates: the gradient of a
risk with respect to gate ``m`` times the gate value is the linear estimate
of what zeroing that filter would change.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .domains import DomainBatch
from .exceptions import ConfigError, GradientError, PruneError, ShapeError
from .nn import FilterId, GatedModel, forward
from .tensor import Tensor

Scores = dict[FilterId, float]


@dataclass
class DomainRisks:
    """Per-source-domain empirical risks recorded on one graph."""

    risks: list[Tensor]
    domain_ids: list[int]

    @property
    def n(self) -> int:
        return len(self.risks)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.item() for r in self.risks])

    def mean(self) -> Tensor:
        return T.mean_of_scalars(self.risks)

    def variance(self, sample: bool = False) -> Tensor:
        return ood_risk_variance(self, sample=sample)


@dataclass(frozen=True)
class IoRConfig:
    alpha: float = 1.0
    variance_kind: str = "population"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.variance_kind not in ("population", "sample"):
            raise ConfigError(f"variance_kind must be 'population' or 'sample', got {self.variance_kind!r}")


def per_domain_risks(model: GatedModel, batch: DomainBatch, require_balanced: bool = True) -> DomainRisks:
    """One forward pass; risk_i is the cross-entropy over domain i's sub-batch."""
    if require_balanced and not batch.is_balanced():
        raise ShapeError("per-domain risks need equal-sized, contiguous sub-batches per domain")
    logits = forward(model, batch.images)
    risks, ids = [], []
    for d, s in batch.domain_slices():
        risks.append(T.softmax_cross_entropy(T.take(logits, s), batch.labels[s]))
        ids.append(d)
    return DomainRisks(risks, ids)


def ood_risk_variance(risks: DomainRisks, sample: bool = False) -> Tensor:
    """Variance of the source-domain risks, the out-of-distribution risk proxy."""
    if risks.n < 2:
        raise ShapeError(f"risk variance needs at least 2 domains, got {risks.n}")
    return T.variance_of_scalars(risks.risks, sample=sample)


def gate_gradients(root: Tensor, model: GatedModel) -> list[np.ndarray]:
    return T.grad(root, model.gate_tensors())


def first_order_terms(model: GatedModel, grads: Sequence[np.ndarray] | None) -> Scores:
    """``gate_m * dRoot/dgate_m`` for every unpruned filter (unsquared)."""
    if grads is None or len(grads) != len(model.blocks):
        raise GradientError("gate gradients missing for one or more layers")
    out: Scores = {}
    for li, (block, g) in enumerate(zip(model.blocks, grads)):
        if g is None or np.shape(g) != (len(block.gates),):
            raise GradientError(f"gate gradient for layer {li} missing or mis-shaped")
        terms = block.gates.values * g
        for ci in np.flatnonzero(~block.gates.pruned_mask):
            out[FilterId(li, int(ci))] = float(terms[ci])
    return out


def taylor_term(gate_value: float, gradient: float) -> float:
    return (gate_value * gradient) ** 2


def taylor_importance(risks: DomainRisks, model: GatedModel,
                      mean_grads: Sequence[np.ndarray] | None = None) -> Scores:
    """Squared first-order change of the mean source risk per filter."""
    if mean_grads is None:
        mean_grads = gate_gradients(risks.mean(), model)
    return {fid: t * t for fid, t in first_order_terms(model, mean_grads).items()}


def ior_importance(risks: DomainRisks, model: GatedModel, cfg: IoRConfig = IoRConfig(),
                   mean_grads: Sequence[np.ndarray] | None = None,
                   var_grads: Sequence[np.ndarray] | None = None) -> Scores:
    """Taylor score plus ``alpha`` times the squared first-order change of the risk variance."""
    taylor = taylor_importance(risks, model, mean_grads)
    if var_grads is None:
        var_grads = gate_gradients(ood_risk_variance(risks, cfg.variance_kind == "sample"), model)
    var_terms = first_order_terms(model, var_grads)
    return {fid: taylor[fid] + cfg.alpha * var_terms[fid] ** 2 for fid in taylor}


def mean_source_risk(model: GatedModel, batch: DomainBatch) -> float:
    """Mean over domains of each domain's mean cross-entropy (domains may differ in size)."""
    return per_domain_risks(model, batch, require_balanced=False).mean().item()


def exact_importance(model: GatedModel, batch: DomainBatch, fid: FilterId,
                     baseline: float | None = None) -> float:
    """Squared change of mean source risk when the filter's gate is forced to 0."""
    if model.is_pruned(fid):
        raise PruneError(f"filter {tuple(fid)} is pruned; its importance is undefined")
    if baseline is None:
        baseline = mean_source_risk(model, batch)
    gates = model.blocks[fid.layer_index].gates.values
    saved = gates[fid.channel_index]
    gates[fid.channel_index] = 0.0
    try:
        ablated = mean_source_risk(model, batch)
    finally:
        gates[fid.channel_index] = saved
    return (baseline - ablated) ** 2


def exact_importances(model: GatedModel, batch: DomainBatch) -> Scores:
    baseline = mean_source_risk(model, batch)
    return {fid: exact_importance(model, batch, fid, baseline) for fid in model.filter_ids()}


# ---------------------------------------------------------------- EMA table

@dataclass
class ImportanceTable:
    layer_sizes: tuple[int, ...]
    ema_coefficient: float = 0.9
    raw: list[np.ndarray] = field(default_factory=list)
    ema: list[np.ndarray] = field(default_factory=list)
    pruned: list[np.ndarray] = field(default_factory=list)
    updates_seen: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_coefficient < 1.0:
            raise ConfigError(f"ema_coefficient must lie in (0, 1), got {self.ema_coefficient}")
        if not self.raw:
            self.raw = [np.zeros(n) for n in self.layer_sizes]
            self.ema = [np.zeros(n) for n in self.layer_sizes]
            self.pruned = [np.zeros(n, dtype=bool) for n in self.layer_sizes]

    @classmethod
    def for_model(cls, model: GatedModel, ema_coefficient: float = 0.9) -> "ImportanceTable":
        table = cls(model.layer_sizes, ema_coefficient)
        for li, block in enumerate(model.blocks):
            table.pruned[li] = block.gates.pruned_mask.copy()
        return table

    def ema_update(self, raw: Mapping[FilterId, float]) -> None:
        """``ema <- c * ema + (1 - c) * raw`` for every unpruned filter."""
        expected = {fid for fid in self.filter_ids()}
        extra = [fid for fid in raw if fid not in expected]
        if extra:
            raise PruneError(f"scores given for pruned or unknown filters: {[tuple(f) for f in extra[:5]]}")
        missing = expected.difference(raw)
        if missing:
            raise PruneError(f"no score for {len(missing)} unpruned filters, e.g. {tuple(min(missing))}")
        c = self.ema_coefficient
        for (li, ci), s in raw.items():
            if not s >= 0:
                raise PruneError(f"importance must be finite and >= 0, got {s} for {(li, ci)}")
            self.raw[li][ci] = s
            self.ema[li][ci] = c * self.ema[li][ci] + (1.0 - c) * s
        self.updates_seen += 1

    def mark_pruned(self, fid: FilterId) -> None:
        self.pruned[fid.layer_index][fid.channel_index] = True

    def reset_ema(self) -> None:
        for arr in self.ema:
            arr[:] = 0.0

    def filter_ids(self, include_pruned: bool = False) -> Iterable[FilterId]:
        for li, mask in enumerate(self.pruned):
            for ci in range(mask.size):
                if include_pruned or not mask[ci]:
                    yield FilterId(li, ci)

    def ema_score(self, fid: FilterId) -> float:
        return float(self.ema[fid.layer_index][fid.channel_index])

    def rows(self) -> list[dict]:
        return [
            {"layer_index": li, "channel_index": ci, "raw_score": float(self.raw[li][ci]),
             "ema_score": float(self.ema[li][ci]), "pruned": bool(self.pruned[li][ci])}
            for li, ci in self.filter_ids(include_pruned=True)
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["layer_index", "channel_index", "raw_score",
                                                    "ema_score", "pruned"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({**row, "raw_score": repr(row["raw_score"]),
                                 "ema_score": repr(row["ema_score"]), "pruned": int(row["pruned"])})

    @classmethod
    def from_csv(cls, path: str | Path, ema_coefficient: float = 0.9) -> "ImportanceTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        sizes: dict[int, int] = {}
        for r in rows:
            li, ci = int(r["layer_index"]), int(r["channel_index"])
            sizes[li] = max(sizes.get(li, 0), ci + 1)
        table = cls(tuple(sizes[li] for li in sorted(sizes)), ema_coefficient)
        for r in rows:
            li, ci = int(r["layer_index"]), int(r["channel_index"])
            table.raw[li][ci] = float(r["raw_score"])
            table.ema[li][ci] = float(r["ema_score"])
            table.pruned[li][ci] = bool(int(r["pruned"]))
        return table
