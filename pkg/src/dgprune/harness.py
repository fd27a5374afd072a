"""Leave-one-domain-out experiments: pretrain, prune, evaluate, aggregate, report."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import platform
import statistics
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy
import sklearn

from . import __version__
from .config import ExperimentConfig, PretrainConfig, dump_config
from .domains import Dataset, SplitPlan, check_batch_size, generate, iter_epoch, load_dataset, split
from .exceptions import DGPruneError, SchemaError
from .losses import LOSSES
from .nn import GatedModel, build_model, checkpoint_bytes, checkpoint_from_bytes, predict, save_checkpoint
from .pruning import (
    PrunedModelRecord,
    TrainState,
    accuracy,
    prune_finetune_loop,
    train_step,
    validation_accuracy,
)

log = logging.getLogger(__name__)

_PURPOSES = {"data": 0, "split": 1, "init": 2, "pretrain": 3, "prune": 4}


def derive_seed(seed: int, purpose: str) -> int:
    """Independent 32-bit stream seed for one purpose of one run seed."""
    return int(np.random.SeedSequence([int(seed), _PURPOSES[purpose]]).generate_state(1)[0])


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainRecord:
    model: GatedModel
    best_validation_accuracy: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def pretrain(model: GatedModel, dataset: Dataset, plan: SplitPlan, method: str = "erm", epochs: int = 30,
             seed: int = 0, learning_rate: float = 0.01, momentum: float = 0.9, batch_size: int = 63,
             coral_lambda: float = 1.0, mixup_alpha: float = 0.2,
             log_path: str | Path | None = None) -> PretrainRecord:
    """Train ``model`` in place with ``method`` and return the best-validation checkpoint.

    The initial model is epoch 0 and counts as a candidate, so ``epochs=0``
    returns an untouched copy. A later epoch replaces the best only when its
    validation accuracy is strictly higher.
    """
    if method not in LOSSES:
        raise DGPruneError(f"unknown pretraining method {method!r}; expected one of {LOSSES}")
    if plan.held_out_domain is not None and plan.held_out_domain in plan.source_domains:
        raise DGPruneError("split plan trains on its own held-out domain")
    check_batch_size(batch_size, len(plan.source_domains))
    state = TrainState(learning_rate, momentum, rng_seed=seed, coral_lambda=coral_lambda,
                       mixup_alpha=mixup_alpha)
    batch_rng = np.random.default_rng(seed)
    best_acc = validation_accuracy(model, dataset, plan)
    best_epoch, best = 0, model.copy()
    history = [{"epoch": 0, "loss": None, "validation_accuracy": best_acc}]
    for epoch in range(1, epochs + 1):
        losses = [train_step(model, state, b, method) for b in iter_epoch(dataset, plan, batch_size, batch_rng)]
        val = validation_accuracy(model, dataset, plan)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "validation_accuracy": val})
        if val > best_acc or math.isnan(val):  # no validation data: keep the latest
            best_acc, best_epoch, best = val, epoch, model.copy()
    if log_path is not None:
        with open(log_path, "w") as fh:
            for row in history:
                fh.write(json.dumps({"step": row["epoch"], "event": "epoch", "payload": row}) + "\n")
    return PretrainRecord(best, best_acc, best_epoch, history)


def pretrain_erm(model, dataset, plan, epochs=30, seed=0, **kw) -> PretrainRecord:
    return pretrain(model, dataset, plan, "erm", epochs, seed, **kw)


def pretrain_coral(model, dataset, plan, epochs=30, lam=1.0, seed=0, **kw) -> PretrainRecord:
    return pretrain(model, dataset, plan, "coral", epochs, seed, coral_lambda=lam, **kw)


def pretrain_mixup(model, dataset, plan, epochs=30, beta_param=0.2, seed=0, **kw) -> PretrainRecord:
    return pretrain(model, dataset, plan, "mixup", epochs, seed, mixup_alpha=beta_param, **kw)


def evaluate(model: GatedModel, dataset: Dataset, plan: SplitPlan) -> tuple[float, float]:
    """(intra, cross): pooled source-validation accuracy and held-out-domain accuracy, in percent."""
    intra = validation_accuracy(model, dataset, plan)
    cross = accuracy(model, dataset.images[plan.test], dataset.labels[plan.test])
    return intra, cross


# ---------------------------------------------------------------- one seed

def dataset_for(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.dataset_path is not None:
        return load_dataset(cfg.dataset_path)
    return generate(dataclasses.replace(cfg.data, seed=derive_seed(cfg.data.seed + seed, "data")))


def prepare(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, SplitPlan]:
    dataset = dataset_for(cfg, seed)
    return dataset, split(dataset, cfg.held_out_domain, seed=derive_seed(seed, "split"))


def _pretrain_key(cfg: ExperimentConfig, seed: int) -> str:
    blob = json.dumps({"data": dataclasses.asdict(cfg.data), "dataset_path": cfg.dataset_path,
                       "held_out": cfg.held_out_domain, "arch": dataclasses.asdict(cfg.arch),
                       "pretrain": dataclasses.asdict(cfg.pretrain), "seed": seed, "version": __version__},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def pretrained_model(cfg: ExperimentConfig, seed: int, dataset: Dataset, plan: SplitPlan,
                     cache_dir: str | Path | None = None, log_path: str | Path | None = None) -> GatedModel:
    """Best-validation pretrained model, reused from ``cache_dir`` when an identical run exists."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"pretrain-{_pretrain_key(cfg, seed)}.pldg"
        if path.exists():
            return checkpoint_from_bytes(path.read_bytes())
    p: PretrainConfig = cfg.pretrain
    model = build_model(cfg.arch, seed=derive_seed(seed, "init"))
    rec = pretrain(model, dataset, plan, p.method, p.epochs, derive_seed(seed, "pretrain"), p.learning_rate,
                   p.momentum, p.batch_size, p.coral_lambda, p.mixup_alpha, log_path=log_path)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(checkpoint_bytes(rec.model))
        tmp.replace(path)
    return rec.model


def _phase(intra: float, cross: float) -> dict:
    return {"intra": intra, "cross": cross}


def run_seed(cfg: ExperimentConfig, seed: int, criteria: Sequence[str] | None = None,
             run_dirs: dict[str, Path] | None = None, cache_dir: str | Path | None = None,
             progress: Callable[[dict], None] | None = None) -> dict[str, dict]:
    """Pretrain once, then prune a copy per criterion from identical bytes and batch streams."""
    criteria = list(criteria or [cfg.pruning.criterion])
    dataset, plan = prepare(cfg, seed)
    first_dir = run_dirs[criteria[0]] / f"seed{seed}" if run_dirs else None
    if first_dir is not None:
        first_dir.mkdir(parents=True, exist_ok=True)
    model = pretrained_model(cfg, seed, dataset, plan, cache_dir,
                             log_path=first_dir / "pretrain.jsonl" if first_dir else None)
    pretrained = checkpoint_bytes(model)
    before = _phase(*evaluate(model, dataset, plan))
    out = {}
    pr = cfg.pruning
    for criterion in criteria:
        seed_dir = run_dirs[criterion] / f"seed{seed}" if run_dirs else None
        if seed_dir is not None:
            seed_dir.mkdir(parents=True, exist_ok=True)
            (seed_dir / "pretrained.pldg").write_bytes(pretrained)
        rec: PrunedModelRecord = prune_finetune_loop(
            checkpoint_from_bytes(pretrained), dataset, plan, pr.schedule, criterion, pr.ior,
            epochs=pr.finetune_epochs, seed=derive_seed(seed, "prune"), batch_size=pr.batch_size,
            learning_rate=pr.learning_rate, momentum=pr.momentum,
            log_path=seed_dir / "prune.jsonl" if seed_dir else None, progress=progress)
        after = _phase(*evaluate(rec.best_model, dataset, plan))
        if seed_dir is not None:
            save_checkpoint(rec.best_model, seed_dir / "pruned_best.pldg")
            rec.table.to_csv(seed_dir / "importance.csv")
        out[criterion] = {"seed": seed, "before": before, "after": after,
                          "remaining_ratio": rec.best_model.remaining_ratio,
                          "pretrained_sha256": hashlib.sha256(pretrained).hexdigest(),
                          "best_epoch": rec.best_epoch}
        log.info("seed %d %s: before %s after %s", seed, criterion, before, after)
    return out


# ---------------------------------------------------------------- experiments

CELLS = (("before", "intra"), ("before", "cross"), ("after", "intra"), ("after", "cross"))


def aggregate(per_seed: Sequence[dict]) -> dict:
    """Mean and sample standard deviation (0 for a single seed) of every cell."""
    means: dict = {"before": {}, "after": {}}
    stds: dict = {"before": {}, "after": {}}
    for phase, metric in CELLS:
        vals = [row[phase][metric] for row in per_seed]
        means[phase][metric] = math.fsum(vals) / len(vals)
        stds[phase][metric] = statistics.stdev(vals) if len(vals) > 1 else 0.0
    ratios = [row["remaining_ratio"] for row in per_seed]
    means["remaining_ratio"] = math.fsum(ratios) / len(ratios)
    stds["remaining_ratio"] = statistics.stdev(ratios) if len(ratios) > 1 else 0.0
    return {"means": means, "stddevs": stds}


def versions() -> dict:
    return {"dgprune": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def held_out_name(cfg: ExperimentConfig) -> str:
    if cfg.dataset_path is None:
        return cfg.data.names[cfg.held_out_domain]
    return f"domain{cfg.held_out_domain}"


def _results_doc(cfg: ExperimentConfig, criterion: str, rows: list[dict], failures: list[dict]) -> dict:
    echo = dataclasses.replace(cfg, pruning=dataclasses.replace(cfg.pruning, criterion=criterion))
    doc = {"config_echo": echo.to_dict(), "held_out_name": held_out_name(cfg), "versions": versions(),
           "per_seed": rows, "failures": failures}
    doc["aggregate"] = aggregate(rows) if rows else None
    return doc


def leave_one_out(cfg: ExperimentConfig, train_rhos: Sequence[float] = (0.8, 0.9, 0.95),
                  held_out_rho: float = -0.9) -> list[ExperimentConfig]:
    """One config per held-out domain: it gets ``held_out_rho``, the others ``train_rhos`` in order."""
    out = []
    for h in range(cfg.data.n_domains):
        data = cfg.data.with_held_out(h, train_rhos, held_out_rho)
        out.append(cfg.replace(data=data, held_out_domain=h, output_dir=f"{cfg.output_dir}/heldout{h}"))
    return out


def run_paired(cfg: ExperimentConfig, criteria: Sequence[str] = ("taylor", "ior"),
               cache_dir: str | Path | None = None, write: bool = True,
               progress: Callable[[dict], None] | None = None) -> dict[str, dict]:
    """Run every criterion against the same pretrained checkpoint per seed.

    Returns one results document per criterion. With ``write``, each criterion
    gets ``<output_dir>/<criterion>/`` holding the config echo, versions,
    per-seed checkpoints, event logs, importance CSVs and ``results.json``.
    A failing seed is recorded and skipped; only all seeds failing raises.
    """
    criteria = list(criteria)
    run_dirs = None
    if write:
        root = Path(cfg.output_dir)
        run_dirs = {c: root / c if len(criteria) > 1 else root for c in criteria}
        for c, d in run_dirs.items():
            d.mkdir(parents=True, exist_ok=True)
            echo = dataclasses.replace(cfg, pruning=dataclasses.replace(cfg.pruning, criterion=c))
            dump_config(echo, d / "config.yaml")
            (d / "versions.json").write_text(json.dumps(versions(), indent=2))
    rows: dict[str, list] = {c: [] for c in criteria}
    failures: list[dict] = []
    for seed in cfg.seeds:
        try:
            res = run_seed(cfg, seed, criteria, run_dirs, cache_dir, progress)
        except DGPruneError as err:
            log.warning("seed %d failed: %s", seed, err)
            failures.append({"seed": seed, "error": type(err).__name__, "message": str(err),
                             "traceback": traceback.format_exc()})
            continue
        for c in criteria:
            rows[c].append(res[c])
    if not any(rows.values()):
        raise DGPruneError(f"all {len(cfg.seeds)} seeds failed; first error: {failures[0]['message']}")
    docs = {c: _results_doc(cfg, c, rows[c], failures) for c in criteria}
    if write:
        for c, d in run_dirs.items():
            (d / "results.json").write_text(json.dumps(docs[c], indent=2))
    return docs


def run_experiment(cfg: ExperimentConfig, cache_dir: str | Path | None = None, write: bool = True,
                   progress: Callable[[dict], None] | None = None) -> dict:
    """Single-criterion experiment over all seeds; returns the results document."""
    return run_paired(cfg, [cfg.pruning.criterion], cache_dir, write, progress)[cfg.pruning.criterion]


# ---------------------------------------------------------------- results files and reports

def _require(obj, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def _number(value, where: str, lo: float | None = None, hi: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {value!r}")
    if lo is not None and not (lo <= value <= hi):
        raise SchemaError(f"{where}: {value} outside [{lo}, {hi}]")
    return float(value)


def validate_results(doc: dict, where: str = "results") -> dict:
    """Check a results document against the schema, naming the first bad field."""
    echo = _require(doc, "config_echo", where)
    for key in ("pretrain", "pruning", "arch"):
        _require(echo, key, f"{where}.config_echo")
    _require(echo["pruning"], "criterion", f"{where}.config_echo.pruning")
    _require(_require(echo["pruning"], "schedule", f"{where}.config_echo.pruning"), "target_remaining_ratio",
             f"{where}.config_echo.pruning.schedule")
    rows = _require(doc, "per_seed", where)
    if not isinstance(rows, list) or not rows:
        raise SchemaError(f"{where}.per_seed: expected a nonempty list")
    for i, row in enumerate(rows):
        w = f"{where}.per_seed[{i}]"
        _require(row, "seed", w)
        for phase in ("before", "after"):
            cell = _require(row, phase, w)
            for metric in ("intra", "cross"):
                _number(_require(cell, metric, f"{w}.{phase}"), f"{w}.{phase}.{metric}", 0.0, 100.0)
        _number(_require(row, "remaining_ratio", w), f"{w}.remaining_ratio", 0.0, 1.0)
    agg = _require(doc, "aggregate", where)
    _require(agg, "means", f"{where}.aggregate")
    _require(agg, "stddevs", f"{where}.aggregate")
    return doc


def load_results(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path}: not valid JSON: {err}") from None
    return validate_results(doc, str(path))


def model_label(arch: dict) -> str:
    return "cnn" + "-".join(str(c) for c in arch["channels"])


@dataclass
class Report:
    columns: list[str]
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in self.columns])
        return buf.getvalue()

    def to_markdown(self, digits: int = 2) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:+.{digits}f}" if v < 0 or v == 0 and math.copysign(1, v) < 0 else f"{v:.{digits}f}"
            return str(v)
        lines = ["| " + " | ".join(self.columns) + " |", "|" + "---|" * len(self.columns)]
        lines += ["| " + " | ".join(fmt(r.get(c)) for c in self.columns) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"


KEY_COLUMNS = ["model", "pretrain", "criterion", "ratio", "phase"]


def report(paths: Iterable[str | Path]) -> Report:
    """Seed-mean table: one before/after/delta row triple per (model, pretrain, criterion, ratio).

    Columns hold Intra/Cross pairs per held-out domain. A delta cell is
    after minus before.
    """
    docs = [load_results(p) for p in paths]
    if not docs:
        raise SchemaError("report needs at least one results file")
    domains: list[str] = []
    cells: dict[tuple, dict] = {}
    for doc in docs:
        echo = doc["config_echo"]
        key = (model_label(echo["arch"]), echo["pretrain"]["method"], echo["pruning"]["criterion"],
               echo["pruning"]["schedule"]["target_remaining_ratio"])
        dom = doc.get("held_out_name") or f"domain{echo.get('held_out_domain')}"
        if dom not in domains:
            domains.append(dom)
        means = aggregate(doc["per_seed"])["means"]
        cells.setdefault(key, {})[dom] = means
    columns = KEY_COLUMNS + [f"{d} {m}" for d in domains for m in ("Intra", "Cross")]
    rows = []
    for key in sorted(cells, key=lambda k: (k[0], LOSSES.index(k[1]) if k[1] in LOSSES else 99, k[2], -k[3])):
        for phase in ("before", "after", "delta"):
            row = dict(zip(KEY_COLUMNS, (*key, phase)))
            for d, means in cells[key].items():
                for metric, label in (("intra", "Intra"), ("cross", "Cross")):
                    if phase == "delta":
                        v = means["after"][metric] - means["before"][metric]
                    else:
                        v = means[phase][metric]
                    row[f"{d} {label}"] = v
            rows.append(row)
    return Report(columns, rows)


def read_report_csv(text: str) -> list[dict]:
    """Parse report CSV back; numeric cells come back as the exact floats written."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for k, v in row.items():
            if k in ("model", "pretrain", "criterion", "phase"):
                parsed[k] = v
            else:
                parsed[k] = float(v) if v != "" else None
        out.append(parsed)
    return out
