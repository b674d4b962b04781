"""Shared finite-difference and fixture helpers for the test suite."""
import numpy as np

from cdsp_moe.linalg import Rng
from cdsp_moe.model import CDSPMoE, ModelConfig, cross_entropy

TINY = dict(n_experts=4, d_base=16, d_model=8, rank=4, top_k=2, input_dim=6, n_outputs=6, task_embed_dim=3)


def tiny_case(seed: int, logit_std: float = 2.0):
    """Tiny model with spread-out topology logits and a 3-example batch (one blind row)."""
    model = CDSPMoE(ModelConfig(**TINY, seed=seed))
    r = Rng(100 + seed)
    model.params["A"] = r.normal(0.0, logit_std, (4, 4))
    x = r.normal(size=(3, TINY["input_dim"]))
    tasks = np.array([0, 2, -1])
    labels = r.integers(0, TINY["n_outputs"], size=3)
    return model, x, tasks, labels


def relative_error(a, b, floor: float = 1e-7) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grads(model, loss_fn, h: float = 1e-5) -> dict:
    out = {}
    for name, p in model.params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = loss_fn()
            p[idx] = keep - h
            down = loss_fn()
            p[idx] = keep
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def gradcheck_worst(model, x, tasks, labels, h: float = 1e-5) -> dict:
    """Worst relative error per parameter group, analytic vs central differences."""
    def loss():
        out, _ = model.forward(x, tasks)
        return cross_entropy(out, labels)[0]

    out, trace = model.forward(x, tasks)
    _, d = cross_entropy(out, labels)
    analytic = model.backward(trace, d).grads
    numeric = numeric_grads(model, loss, h)
    return {k: float(relative_error(analytic[k], numeric[k]).max()) for k in analytic}
