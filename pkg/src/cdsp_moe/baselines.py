"""Iso-parameter baselines: isolated dense experts with top-k gating.

``StandardMoE`` sees task ids during training; the pure-blind variant is the
same network trained with the task embedding always zeroed.
"""
from __future__ import annotations

import math

import numpy as np

from .linalg import Rng, silu, silu_prime
from .model import (ConsistencyError, ExpertTrace, ForwardTrace, GradientBundle, ModelConfig,
                    _stem_head_backward, init_shared_params, route, route_backward)

EXPERT_DIM = 32


def load_balance_loss(gate: np.ndarray, top1: np.ndarray) -> tuple[float, np.ndarray]:
    """Switch-style balance loss ``N * sum_e f_e p_e`` and its gradient w.r.t. ``gate``.

    ``f_e`` (fraction of examples whose top-1 expert is e) is treated as a constant.
    """
    gate = np.asarray(gate, dtype=np.float64)
    b, n = gate.shape
    frac = np.bincount(np.asarray(top1), minlength=n) / b
    prob = gate.mean(axis=0)
    loss = n * float(frac @ prob)
    return loss, np.broadcast_to(n * frac / b, gate.shape).copy()


class StandardMoE:
    variant = "standard"
    groups = {"W_in": "base", "b_in": "base", "W_out": "base", "b_out": "base", "W_g": "base",
              "task_embed": "base", "U": "base", "V": "base"}

    def __init__(self, config: ModelConfig, params: dict | None = None, blind: bool = False,
                 expert_dim: int = EXPERT_DIM):
        self.config = config.validate()
        self.blind = blind
        self.expert_dim = expert_dim
        self.params = params if params is not None else self._init_params()
        want = (config.n_experts, config.d_model, expert_dim)
        if self.params["U"].shape != want:
            raise ConsistencyError(f"expert U has shape {self.params['U'].shape}, expected {want}")

    @property
    def name(self) -> str:
        return "pure_blind" if self.blind else "standard"

    def _init_params(self) -> dict:
        cfg = self.config
        rng = Rng(cfg.seed)
        params = init_shared_params(cfg, rng)
        n, d, r = cfg.n_experts, cfg.d_model, self.expert_dim
        params["U"] = rng.normal(0.0, 1.0 / math.sqrt(d), (n, d, r))
        params["V"] = rng.normal(0.0, 1.0 / math.sqrt(r), (n, r, d))
        return params

    def forward(self, x, task_ids=None, rng: Rng | None = None, training: bool = False,
                mask=None, blind: bool | None = None) -> tuple[np.ndarray, ForwardTrace]:
        p, cfg = self.params, self.config
        if self.blind if blind is None else blind:
            task_ids = None
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        stem = x @ p["W_in"] + p["b_in"]
        rt = route(stem, task_ids, p, cfg.top_k, cfg.n_tasks, 0.0, rng, training, mask)
        mixed = np.zeros_like(stem)
        experts = {}
        for i in np.unique(rt.selected):
            rows = np.flatnonzero((rt.selected == i).any(axis=1))
            pre = stem[rows] @ p["U"][i]
            hidden = silu(pre)
            raw = hidden @ p["V"][i]
            mixed[rows] += rt.gate[rows, i][:, None] * raw
            experts[int(i)] = ExpertTrace(rows, None, None, 1.0, pre, hidden, raw)
        out = mixed @ p["W_out"] + p["b_out"]
        return out, ForwardTrace(x, stem, rt, experts, mixed, out)

    def backward(self, trace: ForwardTrace, d_out, d_gate_extra=None) -> GradientBundle:
        p = self.params
        if trace.out.shape != np.shape(d_out):
            raise ConsistencyError(f"d_out shape {np.shape(d_out)} != output {trace.out.shape}")
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        d_mixed = _stem_head_backward(trace, d_out, p, grads)
        d_gate = np.zeros_like(trace.route.gate) if d_gate_extra is None else np.array(d_gate_extra, dtype=float)
        d_stem = np.zeros_like(trace.stem)
        for i, et in trace.experts.items():
            g = trace.route.gate[et.rows, i]
            dy = d_mixed[et.rows]
            d_gate[et.rows, i] += np.sum(dy * et.raw, axis=1)
            d_raw = g[:, None] * dy
            grads["V"][i] += et.hidden.T @ d_raw
            d_pre = (d_raw @ p["V"][i].T) * silu_prime(et.pre)
            grads["U"][i] += trace.stem[et.rows].T @ d_pre
            d_stem[et.rows] += d_pre @ p["U"][i].T
        d_stem += route_backward(trace.stem, trace.route, d_gate, p, grads)
        grads["W_in"] += trace.x.T @ d_stem
        grads["b_in"] += d_stem.sum(axis=0)
        return GradientBundle(grads)

    def n_backbone_params(self) -> int:
        return self.params["U"].size + self.params["V"].size


def standard_moe_forward(model: StandardMoE, x, task_ids=None, blind: bool = False):
    return model.forward(x, task_ids, blind=blind)


def pure_blind(config: ModelConfig) -> StandardMoE:
    return StandardMoE(config, blind=True)
