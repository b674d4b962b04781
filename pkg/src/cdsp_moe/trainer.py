"""Training loop, evaluation in ID and blind modes, and per-epoch logging."""
from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import StandardMoE, load_balance_loss
from .conflict import LaggedGradStore, conflict_matrix, topology_penalty
from .data import (DataConfig, MixedBatch, SyntheticConflictSpec, build_mixed_stream, load_task_sets,
                   make_synthetic_conflict)
from .dynamics import system_entropy
from .linalg import Rng
from .metrics import clustering_separation, export_csv, pairwise_pearson
from .model import CDSPMoE, ModelConfig, cross_entropy, squared_error, top1_histogram
from .optim import AdamW, two_speed_groups

VARIANTS = ("cdsp", "standard", "pure_blind")
NATIVE_MODE = {"cdsp": "blind", "standard": "id", "pure_blind": "blind"}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lambda_task: float = 1.0
    lambda_conf: float = 10.0
    lambda_reg: float = 1e-4
    p_drop: float = 0.1
    p_drop_end: float | None = None   # linear schedule from p_drop to this value over the run
    variant: str = "cdsp"
    aux_coeff: float = 0.01           # load-balance weight for the baselines
    base_lr: float = 5e-3
    base_wd: float = 1e-2
    topo_lr: float = 5e-2
    topo_wd: float = 0.0
    loss: str = "ce"                  # "ce" or "mse"
    frozen: tuple = ()                # parameter names excluded from the optimizer
    eval_batch: int = 512
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"train.variant must be one of {VARIANTS}, got {self.variant!r}")
        for k in ("lambda_task", "lambda_conf", "lambda_reg", "aux_coeff"):
            if getattr(self, k) < 0:
                raise ValueError(f"train.{k} must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.loss not in ("ce", "mse"):
            raise ValueError(f"train.loss must be 'ce' or 'mse', got {self.loss!r}")
        for p in (self.p_drop, self.p_drop if self.p_drop_end is None else self.p_drop_end):
            if not 0.0 <= p <= 1.0:
                raise ValueError("train.p_drop values must lie in [0, 1]")
        return self

    def p_drop_at(self, step: int, total: int) -> float:
        if self.p_drop_end is None:
            return self.p_drop
        frac = step / max(total - 1, 1)
        return self.p_drop + (self.p_drop_end - self.p_drop) * frac


def build_model(variant: str, model_cfg: ModelConfig):
    if variant == "cdsp":
        return CDSPMoE(model_cfg)
    if variant in ("standard", "pure_blind"):
        return StandardMoE(model_cfg, blind=variant == "pure_blind")
    raise ValueError(f"unknown variant {variant!r}")


def build_optimizer(model, cfg: TrainConfig) -> AdamW:
    groups = two_speed_groups(cfg.base_lr, cfg.base_wd, cfg.topo_lr, cfg.topo_wd)
    trainable = {k: v for k, v in model.params.items() if k not in cfg.frozen}
    return AdamW(trainable, model.groups, groups)


def _loss(out, batch: MixedBatch, kind: str):
    if kind == "mse":
        return squared_error(out, batch.targets)
    return cross_entropy(out, batch.unified_labels)


def train_step(model, batch: MixedBatch, store: LaggedGradStore, optimizer: AdamW, cfg: TrainConfig,
               rng: Rng, step: int = 0, p_drop: float | None = None):
    """One optimisation step. Returns ``(losses, store for the next step)``.

    The conflict penalty uses ``store`` (gradients captured one step earlier);
    the backbone gradients of this step are frozen into the returned store.
    """
    is_cdsp = isinstance(model, CDSPMoE)
    if is_cdsp and p_drop is not None:
        model.config.p_drop = p_drop
    out, trace = model.forward(batch.inputs, batch.task_ids, rng=rng, training=True)
    task_loss, d_out = _loss(out, batch, cfg.loss)
    d_out = cfg.lambda_task * d_out
    d_gate_extra = None
    if is_cdsp:
        bundle = model.backward(trace, d_out)
        C = conflict_matrix(store, model.config.n_experts)
        aux, d_topo = topology_penalty(model.params["A"], C, cfg.lambda_conf, cfg.lambda_reg)
        bundle.grads["A"] += d_topo
        new_store = LaggedGradStore.capture(step, bundle.expert_grads)
    else:
        top1 = np.argmax(trace.route.gate, axis=1)
        balance, d_bal = load_balance_loss(trace.route.gate, top1)
        aux = cfg.aux_coeff * balance
        d_gate_extra = cfg.aux_coeff * d_bal
        bundle = model.backward(trace, d_out, d_gate_extra)
        C = None
        new_store = store
    for name in cfg.frozen:
        bundle.grads[name][...] = 0.0
    optimizer.step(model.params, bundle.grads)
    losses = {"task": task_loss, "aux": aux, "total": cfg.lambda_task * task_loss + aux}
    if C is not None:
        losses["conflict_max"] = float(C.max())
    return losses, new_store


def evaluate(model, inputs, task_ids, labels, mode: str = "id", batch_size: int = 512,
             n_tasks: int = 3) -> tuple[float, np.ndarray]:
    """Accuracy on the unified head and the top-1 routing histogram (tasks x experts)."""
    if mode not in ("id", "blind"):
        raise ValueError(f"mode must be 'id' or 'blind', got {mode!r}")
    task_ids = np.asarray(task_ids)
    correct = 0
    gates = []
    for s in range(0, len(inputs), batch_size):
        shown = None if mode == "blind" else task_ids[s:s + batch_size]
        if isinstance(model, StandardMoE):
            out, trace = model.forward(inputs[s:s + batch_size], shown, blind=model.blind or mode == "blind")
        else:
            out, trace = model.forward(inputs[s:s + batch_size], shown)
        correct += int(np.sum(np.argmax(out, axis=1) == labels[s:s + batch_size]))
        gates.append(trace.route.gate)
    gate = np.concatenate(gates) if gates else np.zeros((0, model.config.n_experts))
    acc = correct / len(inputs) if len(inputs) else float("nan")
    return acc, top1_histogram(gate, task_ids, n_tasks)


@dataclass
class MetricLog:
    records: list = field(default_factory=list)
    topology: list = field(default_factory=list)      # sigma(A) per epoch (cdsp only)
    routing_id: list = field(default_factory=list)
    routing_blind: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])


METRIC_FIELDS = ["epoch", "task_loss", "aux_loss", "total_loss", "acc_id", "acc_blind", "mean_p", "entropy",
                 "pearson_blind_min", "js_01", "js_02", "js_12"]


def _epoch_record(epoch, losses, acc_id, acc_blind, hist_blind, model) -> dict:
    sep = clustering_separation(hist_blind)
    rho = pairwise_pearson(hist_blind)
    if isinstance(model, CDSPMoE):
        p = model.probabilities()
        mean_p, entropy = float(p.mean()), system_entropy(p)
    else:
        mean_p = entropy = float("nan")
    return {"epoch": epoch, "task_loss": float(np.mean([x["task"] for x in losses])),
            "aux_loss": float(np.mean([x["aux"] for x in losses])),
            "total_loss": float(np.mean([x["total"] for x in losses])),
            "acc_id": acc_id, "acc_blind": acc_blind, "mean_p": mean_p, "entropy": entropy,
            "pearson_blind_min": min(rho.values()), "js_01": sep["d01"], "js_02": sep["d02"], "js_12": sep["d12"]}


def write_epoch_snapshots(out: Path, log: MetricLog, epoch: int) -> None:
    snap = out / "snapshots"
    experts = [f"e{i}" for i in range(log.routing_id[-1].shape[1])]
    tasks = [f"t{t}" for t in range(log.routing_id[-1].shape[0])]
    if log.topology:
        export_csv(log.topology[-1], snap / f"topology_epoch_{epoch:02d}.csv", experts, experts)
    export_csv(log.routing_id[-1], snap / f"routing_id_epoch_{epoch:02d}.csv", experts, tasks)
    export_csv(log.routing_blind[-1], snap / f"routing_blind_epoch_{epoch:02d}.csv", experts, tasks)


def run_training(cfg: TrainConfig, model_cfg: ModelConfig | None = None, data_cfg: DataConfig | None = None,
                 sets=None, out_dir=None, verbose: bool = False):
    """Train one variant end to end. Returns ``(model, MetricLog)``.

    ``sets`` (three LabeledImageSet) overrides ``data_cfg``. When an output
    directory is given, metrics.csv, summary.json, per-epoch snapshots and a
    checkpoint are written there.
    """
    from .checkpoint import save_checkpoint
    cfg.validate()
    model_cfg = model_cfg or ModelConfig()
    data_cfg = data_cfg or DataConfig()
    if cfg.variant != "cdsp":
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "p_drop": 0.0})
    if sets is None:
        sets = load_task_sets(data_cfg)
    elif data_cfg.subsample is not None:
        sets = [s.head(data_cfg.subsample) for s in sets]
    pairs = [s.split(data_cfg.holdout_frac) for s in sets]
    train = build_mixed_stream([p[0] for p in pairs], cfg.batch_size, seed=cfg.seed)
    held = build_mixed_stream([p[1] for p in pairs], cfg.eval_batch, seed=cfg.seed)

    model = build_model(cfg.variant, model_cfg)
    optimizer = build_optimizer(model, cfg)
    rng = Rng(cfg.seed).spawn(7919)
    store = LaggedGradStore()
    log = MetricLog()
    if isinstance(model, CDSPMoE):
        log.summary["mean_p_init"] = float(model.probabilities().mean())
        log.summary["entropy_init"] = system_entropy(model.probabilities())
    out = Path(out_dir) if out_dir is not None else None
    total_steps = cfg.epochs * train.n_batches()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for batch in train.batches(epoch):
            p_drop = cfg.p_drop_at(step, total_steps) if cfg.variant == "cdsp" else None
            l, store = train_step(model, batch, store, optimizer, cfg, rng, step, p_drop)
            losses.append(l)
            step += 1
        acc_id, hist_id = evaluate(model, held.inputs, held.task_ids, held.unified_labels, "id", cfg.eval_batch)
        acc_bl, hist_bl = evaluate(model, held.inputs, held.task_ids, held.unified_labels, "blind", cfg.eval_batch)
        log.records.append(_epoch_record(epoch, losses, acc_id, acc_bl, hist_bl, model))
        log.routing_id.append(hist_id)
        log.routing_blind.append(hist_bl)
        if isinstance(model, CDSPMoE):
            log.topology.append(model.probabilities())
        if out is not None:
            write_epoch_snapshots(out, log, epoch)
        if verbose:
            r = log.records[-1]
            print(f"[{cfg.variant}] epoch {epoch}: loss {r['task_loss']:.4f} aux {r['aux_loss']:.3g} "
                  f"acc id {acc_id:.4f} blind {acc_bl:.4f} ({time.perf_counter() - t0:.1f}s)", file=sys.stderr)
    log.summary.update(_summary(cfg, model, log))
    if out is not None:
        export_csv(log.records, out / "metrics.csv", METRIC_FIELDS)
        _write_json(out / "summary.json", log.summary)
        save_checkpoint(out / "checkpoint.json", model, optimizer)
    return model, log


def _summary(cfg: TrainConfig, model, log: MetricLog) -> dict:
    s = {"variant": cfg.variant, "native_mode": NATIVE_MODE[cfg.variant], "epochs": cfg.epochs}
    if log.records:
        last = log.records[-1]
        s.update({"acc_id": last["acc_id"], "acc_blind": last["acc_blind"],
                  "acc_native": last["acc_id" if NATIVE_MODE[cfg.variant] == "id" else "acc_blind"],
                  "clustering": clustering_separation(log.routing_blind[-1]),
                  "pearson_blind": {f"{i}-{j}": v for (i, j), v in pairwise_pearson(log.routing_blind[-1]).items()}})
        if isinstance(model, CDSPMoE):
            s["mean_p_final"] = last["mean_p"]
            s["entropy_final"] = last["entropy"]
    return s


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ------------------------------------------------------------------ synthetic fixture

def synthetic_pruning_model(disjoint: bool = False, gain: float = 8.0, seed: int = 0) -> CDSPMoE:
    """Two experts pinned to one task each, sharing part of a 16-column backbone.

    With the square-root rank law each expert takes its own 8 columns plus the
    first 3 of its partner's block; ``disjoint`` uses rank 8 so nothing is shared.
    """
    cfg = ModelConfig(n_experts=2, d_base=16, d_model=8, rank_mode="fixed" if disjoint else "sqrt_law", rank=8,
                      top_k=1, n_tasks=2, n_outputs=1, input_dim=8, task_embed_dim=2, p_drop=0.0, seed=seed)
    model = CDSPMoE(cfg)
    w_g = np.zeros((cfg.d_model + cfg.task_embed_dim, 2))
    w_g[cfg.d_model:] = gain * np.eye(2)
    model.params["W_g"] = w_g
    model.params["task_embed"] = np.eye(2)
    return model


def run_synthetic_pruning(steps: int = 2000, seed: int = 0, disjoint: bool = False, lambda_conf: float = 10.0,
                          lambda_reg: float = 1e-4, topo_lr: float = 5e-2,
                          spec: SyntheticConflictSpec | None = None) -> dict:
    """Train the pinned two-expert model on the opposing-regression fixture.

    Each step sees one batch of each task. Returns the cross-connection
    probabilities per step and the conflict scores that drove them.
    """
    model = synthetic_pruning_model(disjoint, seed=seed)
    cfg = TrainConfig(lambda_conf=lambda_conf, lambda_reg=lambda_reg, topo_lr=topo_lr, p_drop=0.0, loss="mse",
                      frozen=("W_g", "task_embed"), seed=seed)
    optimizer = build_optimizer(model, cfg)
    b0, b1 = make_synthetic_conflict(spec or SyntheticConflictSpec(), seed)
    rng = Rng(seed)
    store = LaggedGradStore()
    cross = np.empty((steps + 1, 2))
    conflict = np.zeros(steps)
    p = model.probabilities()
    cross[0] = p[0, 1], p[1, 0]
    for t in range(steps):
        k = t % len(b0)
        batch = MixedBatch(np.concatenate([b0[k].inputs, b1[k].inputs]),
                           np.concatenate([b0[k].task_ids, b1[k].task_ids]),
                           np.concatenate([b0[k].unified_labels, b1[k].unified_labels]),
                           np.concatenate([b0[k].targets, b1[k].targets]))
        losses, store = train_step(model, batch, store, optimizer, cfg, rng, t)
        conflict[t] = losses["conflict_max"]
        p = model.probabilities()
        cross[t + 1] = p[0, 1], p[1, 0]
    below = np.flatnonzero(cross.max(axis=1) < 0.05)
    return {"cross": cross, "conflict": conflict, "final_probabilities": model.probabilities(),
            "first_step_below": int(below[0]) if below.size else None, "model": model}
