"""Lagged gradient game: pairwise conflict on shared backbone columns.

Per-expert backbone gradients captured at step ``t`` are frozen in a
:class:`LaggedGradStore`; at step ``t + 1`` they give the conflict matrix
that pushes the topology logits of interfering expert pairs down.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import COS_EPS, cosine_similarity
from .model import ConsistencyError, ExpertGrad


@dataclass(frozen=True)
class LaggedGradStore:
    step: int = -1
    records: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, step: int, expert_grads: dict) -> "LaggedGradStore":
        """Deep-copy ``expert_grads`` so later parameter updates cannot leak in."""
        frozen = {}
        for i, eg in expert_grads.items():
            rec = ExpertGrad(np.array(eg.subspace, copy=True), np.array(eg.dU, copy=True),
                             np.array(eg.dV, copy=True))
            for a in (rec.subspace, rec.dU, rec.dV):
                a.setflags(write=False)
            frozen[int(i)] = rec
        return cls(step, frozen)

    def __len__(self):
        return len(self.records)

    def __contains__(self, i):
        return i in self.records


def intersect(s_i, s_j) -> np.ndarray:
    return np.intersect1d(np.asarray(s_i), np.asarray(s_j))


def conflict_score(store: LaggedGradStore, i: int, j: int, eps: float = COS_EPS) -> float:
    if i not in store or j not in store:
        return 0.0
    gi, gj = store.records[i], store.records[j]
    shared, pos_i, pos_j = np.intersect1d(gi.subspace, gj.subspace, return_indices=True)
    if shared.size == 0:
        return 0.0
    sim = cosine_similarity(gi.flat(pos_i), gj.flat(pos_j), eps)
    return max(0.0, -sim)


def conflict_matrix(store: LaggedGradStore, n_experts: int, eps: float = COS_EPS) -> np.ndarray:
    c = np.zeros((n_experts, n_experts))
    present = sorted(store.records)
    for a, i in enumerate(present):
        for j in present[a + 1:]:
            c[i, j] = c[j, i] = conflict_score(store, i, j, eps)
    return c


def topology_penalty(A, C, lambda_conf: float, lambda_reg: float) -> tuple[float, np.ndarray]:
    """Conflict plus L1 penalty on the logits and its (sub)gradient.

    ``lambda_conf * sum_{i != j} A_ij C_ij + lambda_reg * ||A||_1``; the
    off-diagonal gradient is ``lambda_conf * C_ij`` whatever the value of A.
    """
    A, C = np.asarray(A, dtype=np.float64), np.asarray(C, dtype=np.float64)
    if A.shape != C.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConsistencyError(f"topology {A.shape} and conflict {C.shape} must be equal square matrices")
    off = ~np.eye(len(A), dtype=bool)
    loss = lambda_conf * float(np.sum(A[off] * C[off])) + lambda_reg * float(np.abs(A).sum())
    grad = lambda_conf * C * off + lambda_reg * np.sign(A)
    return loss, grad


topology_penalty_grad = topology_penalty
