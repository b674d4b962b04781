"""Shared-backbone mixture of experts with a learnable expert-to-partition topology.

Every logical expert is a slice of one physical backbone ``(U, V)``. Which
columns it uses is decided by its control force ``I_i = sigmoid(A[i]) @ Pi``;
the mean force over the chosen columns (the strength modulation ``m_i``) scales
the expert output and is the only path by which the task loss reaches ``A``.

Forward and backward are written out by hand in float64 so that the gradient
of every parameter, and the part of the backbone gradient owed to each
expert, can be checked against finite differences.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import (Rng, argtop_r, argtop_rows, layer_norm, layer_norm_backward, sigmoid,
                     sigmoid_prime, silu, silu_prime, softmax)


class ConsistencyError(ValueError):
    """A trace, gradient or parameter set does not match the model it is used with."""


@dataclass
class ModelConfig:
    n_experts: int = 8
    d_base: int = 256
    d_model: int = 64
    rank_mode: str = "fixed"   # "fixed" or "sqrt_law"
    rank: int = 32
    top_k: int = 2
    n_tasks: int = 3
    n_outputs: int = 30
    input_dim: int = 784
    task_embed_dim: int = 16
    p_drop: float = 0.1
    orthogonal_init: bool = False
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.d_base % self.n_experts:
            raise ValueError(f"d_base={self.d_base} not divisible by n_experts={self.n_experts}")
        if self.rank_mode not in ("fixed", "sqrt_law"):
            raise ValueError(f"unknown rank_mode {self.rank_mode!r}")
        if not 1 <= self.rank <= self.d_base:
            raise ValueError(f"rank {self.rank} outside [1, d_base]")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} outside [1, n_experts]")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def init_partition(n_experts: int, d_base: int) -> np.ndarray:
    if d_base % n_experts:
        raise ValueError(f"d_base={d_base} not divisible by n_experts={n_experts}")
    block = d_base // n_experts
    owner = np.arange(d_base) // block
    return (owner[None, :] == np.arange(n_experts)[:, None]).astype(np.float64)


def init_topology(n_experts: int, rng: Rng, self_logit: float = 4.0, std: float = 0.02) -> np.ndarray:
    a = rng.normal(0.0, std, size=(n_experts, n_experts))
    np.fill_diagonal(a, self_logit)
    return a


def control_force(topology: np.ndarray, partition: np.ndarray, i: int) -> np.ndarray:
    if not 0 <= i < topology.shape[0]:
        raise IndexError(f"expert {i} out of range")
    return sigmoid(topology[i]) @ partition


def rank_quota(config: ModelConfig) -> int:
    if config.rank_mode == "sqrt_law":
        return int(math.floor(config.d_base / math.sqrt(config.n_experts)))
    return config.rank


def select_subspace(force: np.ndarray, r: int) -> np.ndarray:
    return argtop_r(force, r)


def strength_modulation(force: np.ndarray, subspace: np.ndarray) -> float:
    return float(np.mean(force[subspace]))


def expert_forward(x: np.ndarray, U: np.ndarray, V: np.ndarray, subspace: np.ndarray) -> np.ndarray:
    """Low-rank expert restricted to backbone columns ``subspace`` (rows of ``V``)."""
    return silu(np.atleast_2d(x) @ U[:, subspace]) @ V[subspace, :]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label outside 0..{logits.shape[1] - 1}")
    p = softmax(logits, axis=1)
    n = len(labels)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


task_loss = cross_entropy


def squared_error(out: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    diff = out - targets
    return float(0.5 * np.mean(np.sum(diff ** 2, axis=1))), diff / len(out)


# ---------------------------------------------------------------- routing

@dataclass
class RouteTrace:
    normed: np.ndarray        # LayerNorm(stem)
    h_in: np.ndarray          # [normed | v_task]
    task_ids: np.ndarray      # -1 where the task is absent
    mask: np.ndarray          # 1.0 where the embedding was shown
    gate: np.ndarray          # softmax probabilities, B x N
    selected: np.ndarray      # B x top_k expert indices, ascending


def _task_array(task_ids, n: int, n_tasks: int) -> np.ndarray:
    if task_ids is None:
        return np.full(n, -1, dtype=np.int64)
    t = np.asarray(task_ids, dtype=np.int64).reshape(-1)
    if len(t) != n:
        raise ConsistencyError(f"{len(t)} task ids for {n} examples")
    if t.size and t.max() >= n_tasks:
        raise ValueError(f"task id {t.max()} >= n_tasks={n_tasks}")
    return t


def route(stem, task_ids, params: dict, top_k: int, n_tasks: int, p_drop: float = 0.0,
          rng: Rng | None = None, training: bool = False, mask=None) -> RouteTrace:
    """Gate probabilities and top-k experts for a batch of stem activations.

    During training the task embedding survives with probability ``1 - p_drop``
    per example; at evaluation the embedding is shown iff a task id is given.
    An explicit ``mask`` replays a previous draw.
    """
    n = len(stem)
    tasks = _task_array(task_ids, n, n_tasks)
    present = tasks >= 0
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64) * present
    elif training and p_drop > 0.0:
        if rng is None:
            raise ValueError("training-time masking needs an rng")
        m = (rng.bernoulli(1.0 - p_drop, size=n) & present).astype(np.float64)
    else:
        m = present.astype(np.float64)
    embed = params["task_embed"]
    v_task = np.zeros((n, embed.shape[1]))
    v_task[present] = embed[tasks[present]]
    v_task *= m[:, None]
    normed = layer_norm(stem)
    h_in = np.concatenate([normed, v_task], axis=1)
    gate = softmax(h_in @ params["W_g"], axis=1)
    return RouteTrace(normed, h_in, tasks, m, gate, argtop_rows(gate, top_k))


def route_backward(stem, rt: RouteTrace, d_gate, params: dict, grads: dict) -> np.ndarray:
    """Accumulate router gradients into ``grads``; return d(loss)/d(stem) from the router."""
    d_logit = rt.gate * (d_gate - np.sum(d_gate * rt.gate, axis=1, keepdims=True))
    grads["W_g"] += rt.h_in.T @ d_logit
    d_h = d_logit @ params["W_g"].T
    d_model = stem.shape[1]
    shown = rt.mask > 0
    np.add.at(grads["task_embed"], rt.task_ids[shown], d_h[shown, d_model:] * rt.mask[shown, None])
    return layer_norm_backward(stem, d_h[:, :d_model])


def top1_histogram(gate: np.ndarray, task_ids: np.ndarray, n_tasks: int) -> np.ndarray:
    """Row t: distribution of the top-1 expert over examples of task t."""
    top1 = argtop_rows(gate, 1)[:, 0]
    hist = np.zeros((n_tasks, gate.shape[1]))
    np.add.at(hist, (np.asarray(task_ids), top1), 1.0)
    sums = hist.sum(axis=1, keepdims=True)
    return np.divide(hist, sums, out=np.zeros_like(hist), where=sums > 0)


def init_shared_params(config: ModelConfig, rng: Rng) -> dict:
    """Stem, head and router parameters common to every variant."""
    d, e = config.d_model, config.task_embed_dim
    return {
        "W_in": rng.normal(0.0, 1.0 / math.sqrt(config.input_dim), (config.input_dim, d)),
        "b_in": np.zeros(d),
        "W_out": rng.normal(0.0, 1.0 / math.sqrt(d), (d, config.n_outputs)),
        "b_out": np.zeros(config.n_outputs),
        "W_g": rng.normal(0.0, 1.0 / math.sqrt(d + e), (d + e, config.n_experts)),
        "task_embed": rng.normal(0.0, 1.0, (config.n_tasks, e)),
    }


@dataclass
class ExpertTrace:
    rows: np.ndarray
    subspace: np.ndarray | None
    force: np.ndarray | None
    modulation: float
    pre: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray


@dataclass
class ForwardTrace:
    x: np.ndarray
    stem: np.ndarray
    route: RouteTrace
    experts: dict
    mixed: np.ndarray
    out: np.ndarray


@dataclass
class ExpertGrad:
    subspace: np.ndarray
    dU: np.ndarray            # d_model x |S|
    dV: np.ndarray            # |S| x d_model

    def flat(self, positions=None) -> np.ndarray:
        """U columns (each column contiguous) then V rows, optionally restricted."""
        if positions is None:
            positions = np.arange(len(self.subspace))
        return np.concatenate([self.dU[:, positions].T.ravel(), self.dV[positions, :].ravel()])


@dataclass
class GradientBundle:
    grads: dict
    expert_grads: dict = field(default_factory=dict)


def _stem_head_backward(trace: ForwardTrace, d_out, params, grads) -> np.ndarray:
    grads["W_out"] += trace.mixed.T @ d_out
    grads["b_out"] += d_out.sum(axis=0)
    return d_out @ params["W_out"].T


class CDSPMoE:
    """Conflict-driven subspace-pruning MoE layer between an affine stem and head."""

    variant = "cdsp"
    groups = {"W_in": "base", "b_in": "base", "W_out": "base", "b_out": "base", "W_g": "base",
              "task_embed": "base", "U": "base", "V": "base", "A": "topo"}

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config.validate()
        self.partition = init_partition(config.n_experts, config.d_base)
        self.owner = np.argmax(self.partition, axis=0)
        self.rank = rank_quota(config)
        self.params = params if params is not None else self._init_params()
        self._check_params()

    def _init_params(self) -> dict:
        cfg = self.config
        rng = Rng(cfg.seed)
        params = init_shared_params(cfg, rng)
        if cfg.orthogonal_init:
            q, _ = np.linalg.qr(rng.normal(size=(cfg.d_base, cfg.d_model)))
            params["U"] = q.T.copy() if cfg.d_base >= cfg.d_model else rng.normal(size=(cfg.d_model, cfg.d_base))
            params["V"] = np.linalg.qr(rng.normal(size=(cfg.d_base, cfg.d_model)))[0]
        else:
            params["U"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), (cfg.d_model, cfg.d_base))
            params["V"] = rng.normal(0.0, 1.0 / math.sqrt(self.rank), (cfg.d_base, cfg.d_model))
        params["A"] = init_topology(cfg.n_experts, rng)
        return params

    def _check_params(self):
        cfg = self.config
        want = {"U": (cfg.d_model, cfg.d_base), "V": (cfg.d_base, cfg.d_model),
                "A": (cfg.n_experts, cfg.n_experts), "W_g": (cfg.d_model + cfg.task_embed_dim, cfg.n_experts)}
        for k, shape in want.items():
            if self.params[k].shape != shape:
                raise ConsistencyError(f"param {k} has shape {self.params[k].shape}, expected {shape}")

    # ------------------------------------------------------------ topology views
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.params["A"])

    def force(self, i: int) -> np.ndarray:
        return control_force(self.params["A"], self.partition, i)

    def subspace(self, i: int) -> tuple[np.ndarray, np.ndarray, float]:
        f = self.force(i)
        s = select_subspace(f, self.rank)
        return s, f, strength_modulation(f, s)

    # ------------------------------------------------------------ forward
    def forward(self, x, task_ids=None, rng: Rng | None = None, training: bool = False,
                mask=None) -> tuple[np.ndarray, ForwardTrace]:
        p, cfg = self.params, self.config
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        stem = x @ p["W_in"] + p["b_in"]
        rt = route(stem, task_ids, p, cfg.top_k, cfg.n_tasks, cfg.p_drop, rng, training, mask)
        mixed = np.zeros_like(stem)
        experts = {}
        for i in np.unique(rt.selected):
            rows = np.flatnonzero((rt.selected == i).any(axis=1))
            sub, force, m = self.subspace(int(i))
            pre = stem[rows] @ p["U"][:, sub]
            hidden = silu(pre)
            raw = hidden @ p["V"][sub, :]
            mixed[rows] += (rt.gate[rows, i] * m)[:, None] * raw
            experts[int(i)] = ExpertTrace(rows, sub, force, m, pre, hidden, raw)
        out = mixed @ p["W_out"] + p["b_out"]
        return out, ForwardTrace(x, stem, rt, experts, mixed, out)

    # ------------------------------------------------------------ backward
    def backward(self, trace: ForwardTrace, d_out, d_gate_extra=None) -> GradientBundle:
        p = self.params
        if trace.out.shape != np.shape(d_out):
            raise ConsistencyError(f"d_out shape {np.shape(d_out)} != output {trace.out.shape}")
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        d_mixed = _stem_head_backward(trace, d_out, p, grads)
        d_gate = np.zeros_like(trace.route.gate) if d_gate_extra is None else np.array(d_gate_extra, dtype=float)
        d_stem = np.zeros_like(trace.stem)
        expert_grads = {}
        sig_prime = sigmoid_prime(p["A"])
        for i, et in trace.experts.items():
            if et.subspace is None or len(et.subspace) != self.rank:
                raise ConsistencyError(f"trace for expert {i} does not match this model")
            g = trace.route.gate[et.rows, i]
            dy = d_mixed[et.rows]
            proj = np.sum(dy * et.raw, axis=1)
            d_gate[et.rows, i] += et.modulation * proj
            d_mod = float(np.sum(g * proj))
            d_raw = (g * et.modulation)[:, None] * dy
            dV = et.hidden.T @ d_raw
            d_pre = (d_raw @ p["V"][et.subspace, :].T) * silu_prime(et.pre)
            dU = trace.stem[et.rows].T @ d_pre
            d_stem[et.rows] += d_pre @ p["U"][:, et.subspace].T
            grads["U"][:, et.subspace] += dU
            grads["V"][et.subspace, :] += dV
            expert_grads[i] = ExpertGrad(et.subspace.copy(), dU, dV)
            # bridge: m_i is the mean of sigmoid(A[i, owner(k)]) over k in S_i
            share = np.bincount(self.owner[et.subspace], minlength=self.config.n_experts) / self.rank
            grads["A"][i] += d_mod * share * sig_prime[i]
        d_stem += route_backward(trace.stem, trace.route, d_gate, p, grads)
        grads["W_in"] += trace.x.T @ d_stem
        grads["b_in"] += d_stem.sum(axis=0)
        return GradientBundle(grads, expert_grads)

    def capture_expert_grads(self, trace: ForwardTrace, d_out) -> dict:
        return self.backward(trace, d_out).expert_grads

    def n_backbone_params(self) -> int:
        return self.params["U"].size + self.params["V"].size
