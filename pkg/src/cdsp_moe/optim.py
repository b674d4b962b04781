"""AdamW with per-group learning rate and weight decay (two-speed schedule)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import ConsistencyError


@dataclass
class GroupConfig:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def two_speed_groups(base_lr: float = 5e-3, base_wd: float = 1e-2,
                     topo_lr: float = 5e-2, topo_wd: float = 0.0) -> dict:
    return {"base": GroupConfig(base_lr, base_wd), "topo": GroupConfig(topo_lr, topo_wd)}


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named numpy parameters.

    ``assignment`` maps parameter name to group name. Parameters are updated
    in place; only the names present at construction are ever touched.
    """

    def __init__(self, params: dict, assignment: dict, groups: dict):
        missing = set(params) - set(assignment)
        if missing:
            raise ConsistencyError(f"no optimizer group for {sorted(missing)}")
        self.assignment = dict(assignment)
        self.groups = groups
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for name in self.m:
            p, g = params[name], grads[name]
            if g.shape != p.shape:
                raise ConsistencyError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
            cfg = self.groups[self.assignment[name]]
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** self.t)
            v_hat = v / (1.0 - cfg.beta2 ** self.t)
            if cfg.weight_decay:
                p *= 1.0 - cfg.lr * cfg.weight_decay
            p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v,
                "groups": {k: asdict(g) for k, g in self.groups.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.m:
            self.m[name] = np.array(state["m"][name], dtype=np.float64).reshape(self.m[name].shape)
            self.v[name] = np.array(state["v"][name], dtype=np.float64).reshape(self.v[name].shape)
        self.groups = {k: GroupConfig(**g) for k, g in state["groups"].items()}


def adamw_step(params: dict, grads: dict, optimizer: AdamW) -> dict:
    optimizer.step(params, grads)
    return params
