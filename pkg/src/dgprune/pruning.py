"""Prune-while-finetuning: score, smooth, mask the lowest filters, keep training."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .domains import Dataset, DomainBatch, SplitPlan, check_batch_size, iter_epoch
from .exceptions import ConfigError, DivergenceError
from .importance import (
    ImportanceTable,
    IoRConfig,
    first_order_terms,
    gate_gradients,
    ood_risk_variance,
    per_domain_risks,
)
from .losses import LOSSES, coral_loss, erm_loss, mixup_loss, mixup_pairs
from .nn import FilterId, GatedModel, mask_filter, predict, trainable_parameters

CRITERIA = ("taylor", "ior")


@dataclass(frozen=True)
class PruneSchedule:
    interval_minibatches: int = 30
    max_filters_per_event: int = 4
    target_remaining_ratio: float = 0.5
    per_layer_floor: int = 1
    reset_ema_on_prune: bool = False

    def __post_init__(self):
        if self.interval_minibatches < 1 or self.max_filters_per_event < 1 or self.per_layer_floor < 1:
            raise ConfigError("interval, max filters per event and per-layer floor must be positive")
        if not 0.0 < self.target_remaining_ratio <= 1.0:
            raise ConfigError(f"target_remaining_ratio must lie in (0, 1], got {self.target_remaining_ratio}")

    def target_count(self, total_filters: int) -> int:
        # the epsilon keeps 0.3 * 80 = 24.000000000000004 from rounding up to 25
        return math.ceil(self.target_remaining_ratio * total_filters - 1e-9)

    def check_achievable(self, model: GatedModel) -> None:
        floor_total = self.per_layer_floor * len(model.blocks)
        if self.target_count(model.total_filters) < floor_total:
            raise ConfigError(
                f"target of {self.target_count(model.total_filters)} filters is below the per-layer floors "
                f"({floor_total})")
        if any(n < self.per_layer_floor for n in model.layer_sizes):
            raise ConfigError(f"per_layer_floor {self.per_layer_floor} exceeds a layer size {model.layer_sizes}")


@dataclass
class TrainState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    rng_seed: int = 0
    minibatch_counter: int = 0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    coral_lambda: float = 1.0
    mixup_alpha: float = 0.2

    def __post_init__(self):
        self.rng = np.random.default_rng(self.rng_seed)


def sgd_update(model: GatedModel, state: TrainState, grads: list[np.ndarray]) -> None:
    """Momentum SGD (``v = mu v + g; p -= lr v``) that never moves a pruned gate."""
    for i, (param, g) in enumerate(zip(trainable_parameters(model), grads)):
        v = state.velocity.get(i)
        v = g.copy() if v is None else state.momentum * v + g
        if param.mask is not None:
            v = np.where(param.mask, v, 0.0)
        state.velocity[i] = v
        param.tensor.data = param.tensor.data - state.learning_rate * v
        if param.mask is not None:
            param.tensor.data[~param.mask] = 0.0


def _check_finite(loss: float, state: TrainState) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss}", step=state.minibatch_counter)


def build_loss(model: GatedModel, state: TrainState, batch: DomainBatch, pretrain_loss: str = "erm"):
    if pretrain_loss == "erm":
        return erm_loss(model, batch)
    if pretrain_loss == "coral":
        return coral_loss(model, batch, state.coral_lambda)
    if pretrain_loss == "mixup":
        lam = float(state.rng.beta(state.mixup_alpha, state.mixup_alpha))
        return mixup_loss(model, batch, lam, mixup_pairs(batch, state.rng))
    raise ConfigError(f"unknown loss {pretrain_loss!r}; expected one of {LOSSES}")


def train_step(model: GatedModel, state: TrainState, batch: DomainBatch, pretrain_loss: str = "erm") -> float:
    """One momentum-SGD step on the selected loss; returns the loss before the step."""
    if not batch.is_balanced():
        raise ConfigError("train_step needs a domain-balanced batch")
    loss = build_loss(model, state, batch, pretrain_loss)
    value = loss.item()
    _check_finite(value, state)
    params = [p.tensor for p in trainable_parameters(model)]
    sgd_update(model, state, T.grad(loss, params))
    state.minibatch_counter += 1
    return value


# ---------------------------------------------------------------- ranking and pruning

def rank_filters(table: ImportanceTable, model: GatedModel, floor: int = 1) -> list[FilterId]:
    """Unpruned filters by ascending EMA score, skipping layers already at the floor."""
    candidates = [fid for fid in model.filter_ids()
                  if model.blocks[fid.layer_index].gates.remaining > floor]
    return sorted(candidates, key=lambda f: (table.ema_score(f), f.layer_index, f.channel_index))


def prune_event(model: GatedModel, table: ImportanceTable, schedule: PruneSchedule) -> list[FilterId]:
    """Mask up to K lowest-ranked filters without undershooting the target count."""
    above = model.remaining_filters - schedule.target_count(model.total_filters)
    if above <= 0:
        return []
    budget = min(schedule.max_filters_per_event, above)
    pruned: list[FilterId] = []
    for fid in rank_filters(table, model, schedule.per_layer_floor):
        if len(pruned) == budget:
            break
        # ranking was computed before this event; re-check floors as the layer shrinks
        if model.blocks[fid.layer_index].gates.remaining <= schedule.per_layer_floor:
            continue
        mask_filter(model, fid)
        table.mark_pruned(fid)
        pruned.append(fid)
    if pruned and schedule.reset_ema_on_prune:
        table.reset_ema()
    return pruned


def accuracy(model: GatedModel, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    if len(labels) == 0:
        return float("nan")
    return 100.0 * float(np.mean(predict(model, images) == labels))


def validation_accuracy(model: GatedModel, dataset: Dataset, plan: SplitPlan) -> float:
    idx = plan.validation_indices()
    return accuracy(model, dataset.images[idx], dataset.labels[idx])


# ---------------------------------------------------------------- loop

@dataclass
class PrunedModelRecord:
    model: GatedModel
    best_model: GatedModel
    best_validation_accuracy: float
    best_epoch: int
    events: list[dict]
    table: ImportanceTable
    steps: int


def _score_step(model: GatedModel, batch: DomainBatch, criterion: str, ior: IoRConfig):
    """Forward once; return (mean risk, gradients of all params, raw importance scores)."""
    risks = per_domain_risks(model, batch)
    rbar = risks.mean()
    params = [p.tensor for p in trainable_parameters(model)]
    grads = T.grad(rbar, params)
    gate_grads = [grads[3 * i + 2] for i in range(len(model.blocks))]
    terms = first_order_terms(model, gate_grads)
    scores = {fid: t * t for fid, t in terms.items()}
    if criterion == "ior":
        var = ood_risk_variance(risks, sample=ior.variance_kind == "sample")
        var_terms = first_order_terms(model, gate_gradients(var, model))
        scores = {fid: s + ior.alpha * var_terms[fid] ** 2 for fid, s in scores.items()}
    return rbar.item(), grads, scores


def _jsonable_scores(table: ImportanceTable, fids: list[FilterId]) -> list[dict]:
    return [{"layer": f.layer_index, "channel": f.channel_index, "ema": table.ema_score(f)} for f in fids]


def prune_finetune_loop(model: GatedModel, dataset: Dataset, plan: SplitPlan, schedule: PruneSchedule,
                        criterion: str = "taylor", ior: IoRConfig = IoRConfig(), epochs: int = 30,
                        seed: int = 0, batch_size: int = 63, learning_rate: float = 0.001,
                        momentum: float = 0.9, log_path: str | Path | None = None,
                        progress: Callable[[dict], None] | None = None) -> PrunedModelRecord:
    """Prune ``model`` in place down to the schedule's target while finetuning with ERM.

    Runs ``epochs`` epochs, extended if needed until the target count is reached.
    Among epoch ends at the target count, the checkpoint with the best validation
    accuracy is kept alongside the final model.
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    schedule.check_achievable(model)
    check_batch_size(batch_size, len(plan.source_domains))
    target = schedule.target_count(model.total_filters)
    table = ImportanceTable.for_model(model)
    state = TrainState(learning_rate, momentum, rng_seed=seed)
    batch_rng = np.random.default_rng(seed)
    events: list[dict] = []
    log = open(log_path, "w") if log_path is not None else None

    def emit(event: str, payload: dict) -> None:
        rec = {"step": state.minibatch_counter, "event": event, "payload": payload}
        events.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
        if progress is not None:
            progress(rec)

    best_acc, best_epoch, best_model = -1.0, -1, None
    epoch = 0
    try:
        while epoch < epochs or model.remaining_filters > target:
            losses = []
            for batch in iter_epoch(dataset, plan, batch_size, batch_rng):
                if model.remaining_filters > target:
                    loss, grads, scores = _score_step(model, batch, criterion, ior)
                    table.ema_update(scores)
                else:
                    loss_t = erm_loss(model, batch)
                    loss = loss_t.item()
                    grads = T.grad(loss_t, [p.tensor for p in trainable_parameters(model)])
                _check_finite(loss, state)
                sgd_update(model, state, grads)
                state.minibatch_counter += 1
                losses.append(loss)
                if state.minibatch_counter % schedule.interval_minibatches == 0:
                    pruned = prune_event(model, table, schedule)
                    if pruned:
                        emit("prune", {"filters": [list(f) for f in pruned],
                                       "scores": _jsonable_scores(table, pruned),
                                       "remaining": model.remaining_filters})
            epoch += 1
            val = validation_accuracy(model, dataset, plan)
            emit("epoch", {"epoch": epoch, "loss": float(np.mean(losses)) if losses else None,
                           "validation_accuracy": val, "remaining": model.remaining_filters})
            if model.remaining_filters <= target:
                if val > best_acc:
                    best_acc, best_epoch, best_model = val, epoch, model.copy()
                    emit("best", {"epoch": epoch, "validation_accuracy": val})
    finally:
        if log is not None:
            log.close()
    return PrunedModelRecord(model, best_model, best_acc, best_epoch, events, table,
                             state.minibatch_counter)


def read_event_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def schedule_dict(schedule: PruneSchedule) -> dict:
    return asdict(schedule)
