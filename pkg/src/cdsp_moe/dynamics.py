"""Ensembles of scalar connection-logit chains under drift plus minibatch noise.

Each chain follows ``A <- A + eta * (D(A) + xi)`` with
``D(A) = G - lambda_c * P_v * C * sigmoid'(A) - lambda_r * sign(A)`` and
``xi ~ N(0, noise_std^2)``. The helpers here measure what the pruning theory
predicts: a non-increasing connection probability under persistent conflict,
absorption near P = 0, falling structural entropy with a non-zero floor when
noise is present, and the 50% conflict rate of random high-dimensional pairs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .linalg import Rng, binary_entropy, sigmoid, sigmoid_prime

LOGIT_CLAMP = 50.0


@dataclass
class ChainConfig:
    eta: float = 0.05
    lambda_c: float = 10.0
    lambda_r: float = 1e-4
    task_gain: float | list = 0.0      # constant, or [start, end] linear over the run
    conflict: float = 0.5
    partner_prob: float = 0.5
    noise_std: float = 0.1
    init_mode: str = "zero"            # "zero": N(0, init_std^2); "eq3": diagonal 4.0 blocks
    init_std: float = 0.02
    n_experts: int = 8                 # only used by init_mode="eq3"
    steps: int = 5000
    n_chains: int = 10000
    record_every: int = 10
    seed: int = 0

    def validate(self) -> "ChainConfig":
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.partner_prob <= 1.0:
            raise ValueError("partner_prob must lie in [0, 1]")
        if self.conflict < 0 or self.noise_std < 0:
            raise ValueError("conflict and noise_std must be non-negative")
        if self.init_mode not in ("zero", "eq3"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.init_mode == "eq3" and self.n_chains % self.n_experts ** 2:
            raise ValueError("eq3 init needs n_chains to be a multiple of n_experts^2")
        return self

    def gain(self, t: int) -> float:
        if isinstance(self.task_gain, (list, tuple)):
            start, end = self.task_gain
            frac = t / max(self.steps - 1, 1)
            return float(start + (end - start) * frac)
        return float(self.task_gain)


PRESETS = {
    "conflict": ChainConfig(),
    "no-force": ChainConfig(conflict=0.0, lambda_r=0.0),
    "quiet": ChainConfig(noise_std=0.0),
}

CONFLICT_RATE_PRESET = {"d_out": 128, "n_pairs": 100_000, "seed": 0}


def drift(a, cfg: ChainConfig, t: int = 0):
    a = np.asarray(a, dtype=np.float64)
    return (cfg.gain(t) - cfg.lambda_c * cfg.partner_prob * cfg.conflict * sigmoid_prime(a)
            - cfg.lambda_r * np.sign(a))


def init_chains(cfg: ChainConfig, rng: Rng) -> np.ndarray:
    a = rng.normal(0.0, cfg.init_std, size=cfg.n_chains)
    if cfg.init_mode == "eq3":
        n = cfg.n_experts
        diag = np.tile(np.eye(n, dtype=bool).ravel(), cfg.n_chains // (n * n))
        a[diag] = 4.0
    return a


def step_ensemble(a: np.ndarray, cfg: ChainConfig, rng: Rng, t: int = 0) -> np.ndarray:
    noise = rng.normal(0.0, cfg.noise_std, size=a.shape) if cfg.noise_std > 0 else 0.0
    return np.clip(a + cfg.eta * (drift(a, cfg, t) + noise), -LOGIT_CLAMP, LOGIT_CLAMP)


class SupermartingaleAccumulator:
    """Running per-decile statistics of one-step probability changes."""

    def __init__(self, n_bins: int = 10, min_count: int = 30):
        self.n_bins = n_bins
        self.min_count = min_count
        self.count = np.zeros(n_bins)
        self.total = np.zeros(n_bins)
        self.total_sq = np.zeros(n_bins)

    def update(self, p_prev, p_next) -> None:
        p_prev = np.asarray(p_prev, dtype=np.float64).ravel()
        delta = np.asarray(p_next, dtype=np.float64).ravel() - p_prev
        bins = np.minimum((p_prev * self.n_bins).astype(int), self.n_bins - 1)
        self.count += np.bincount(bins, minlength=self.n_bins)
        self.total += np.bincount(bins, weights=delta, minlength=self.n_bins)
        self.total_sq += np.bincount(bins, weights=delta * delta, minlength=self.n_bins)

    def report(self) -> dict:
        bins = []
        for b in range(self.n_bins):
            n = self.count[b]
            mean = self.total[b] / n if n else float("nan")
            var = max(self.total_sq[b] / n - mean * mean, 0.0) if n else float("nan")
            stderr = float(np.sqrt(var / n)) if n else float("nan")
            bins.append({"bin": b, "lo": b / self.n_bins, "hi": (b + 1) / self.n_bins, "count": int(n),
                         "mean_delta": float(mean), "stderr": stderr, "flagged": bool(n < self.min_count)})
        ok = [b for b in bins if not b["flagged"]]
        frac = sum(b["mean_delta"] <= 0 for b in ok) / len(ok) if ok else float("nan")
        return {"bins": bins, "fraction_nonpositive": frac}


def empirical_supermartingale_check(trajectories, n_bins: int = 10, min_count: int = 30) -> dict:
    """Conditional mean of ``P_{t+1} - P_t`` per decile of ``P_t``.

    ``trajectories`` holds probabilities at consecutive steps, shape (steps, chains).
    """
    traj = np.asarray(trajectories, dtype=np.float64)
    acc = SupermartingaleAccumulator(n_bins, min_count)
    for t in range(len(traj) - 1):
        acc.update(traj[t], traj[t + 1])
    return acc.report()


def system_entropy(p) -> float:
    return float(np.sum(binary_entropy(np.asarray(p, dtype=np.float64))))


def residual_entropy_estimate(trajectories, tail_fraction: float = 0.2) -> float:
    """Mean per-connection binary entropy over the trailing part of a run."""
    traj = np.asarray(trajectories, dtype=np.float64)
    n_tail = int(len(traj) * tail_fraction)
    if not 0 < tail_fraction <= 1 or n_tail < 1:
        raise ValueError(f"tail of {n_tail} rows is too short")
    return float(np.mean(binary_entropy(traj[-n_tail:])))


@dataclass
class SimulationResult:
    config: ChainConfig
    record_steps: np.ndarray
    logits: np.ndarray                # (records, chains)
    supermartingale: dict
    entropy_curve: np.ndarray         # system entropy at each record step
    mean_p_curve: np.ndarray          # ensemble-mean P at every step (steps + 1)
    final_logits: np.ndarray = field(repr=False, default=None)

    @property
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits)

    def absorption_fraction(self, threshold: float = 0.01) -> float:
        return float(np.mean(sigmoid(self.final_logits) < threshold))

    def residual_entropy(self, tail_fraction: float = 0.2) -> float:
        return residual_entropy_estimate(self.probabilities, tail_fraction)

    def summary(self) -> dict:
        return {
            "config": asdict(self.config),
            "absorption_fraction": self.absorption_fraction(),
            "initial_entropy": float(self.entropy_curve[0]),
            "final_entropy": float(self.entropy_curve[-1]),
            "max_entropy": self.config.n_chains * float(np.log(2.0)),
            "residual_entropy": self.residual_entropy(max(0.2, 1.0 / len(self.record_steps))),
            "entropy_curve": {"step": self.record_steps.tolist(), "entropy": self.entropy_curve.tolist()},
            "supermartingale": self.supermartingale,
        }


def simulate(cfg: ChainConfig) -> SimulationResult:
    cfg.validate()
    rng = Rng(cfg.seed)
    a = init_chains(cfg, rng)
    acc = SupermartingaleAccumulator()
    steps, records = [0], [a.copy()]
    mean_p = np.empty(cfg.steps + 1)
    p = sigmoid(a)
    mean_p[0] = p.mean()
    for t in range(cfg.steps):
        a = step_ensemble(a, cfg, rng, t)
        p_next = sigmoid(a)
        acc.update(p, p_next)
        p = p_next
        mean_p[t + 1] = p.mean()
        if (t + 1) % cfg.record_every == 0 or t + 1 == cfg.steps:
            steps.append(t + 1)
            records.append(a.copy())
    logits = np.array(records)
    entropy = np.array([system_entropy(sigmoid(r)) for r in logits])
    return SimulationResult(cfg, np.array(steps), logits, acc.report(), entropy, mean_p, a)


def deterministic_path(a0: float, cfg: ChainConfig, steps: int) -> np.ndarray:
    """Noise-free recursion for one chain in pure Python floats (reference path)."""
    import math
    a = float(a0)
    out = [a]
    for t in range(steps):
        s = 1.0 / (1.0 + math.exp(-a))
        sgn = (a > 0) - (a < 0)
        d = cfg.gain(t) - cfg.lambda_c * cfg.partner_prob * cfg.conflict * s * (1 - s) - cfg.lambda_r * sgn
        a = min(max(a + cfg.eta * d, -LOGIT_CLAMP), LOGIT_CLAMP)
        out.append(a)
    return np.array(out)


def conflict_probability_experiment(d_out: int, n_pairs: int, rng: Rng, chunk: int = 20_000) -> dict:
    """Fraction of independent isotropic Gaussian pairs with negative cosine."""
    neg, total, s_sum, s_sq = 0, 0, 0.0, 0.0
    remaining = n_pairs
    while remaining > 0:
        n = min(chunk, remaining)
        u = rng.normal(size=(n, d_out))
        v = rng.normal(size=(n, d_out))
        s = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        neg += int(np.sum(s < 0))
        s_sum += float(s.sum())
        s_sq += float(s @ s)
        total += n
        remaining -= n
    mean = s_sum / total
    std = float(np.sqrt(max(s_sq / total - mean * mean, 0.0) * total / max(total - 1, 1)))
    return {"d_out": d_out, "n_pairs": n_pairs, "fraction_negative": neg / total,
            "std": std, "predicted_std": float(1.0 / np.sqrt(d_out))}


def preset(name: str, **overrides) -> ChainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def export_trajectories(result: SimulationResult, path, max_chains: int | None = 100):
    """Long-format CSV (step, chain_id, logit, probability) for the first ``max_chains`` chains."""
    from .metrics import export_csv
    n = result.logits.shape[1] if max_chains is None else min(max_chains, result.logits.shape[1])
    rows = [{"step": int(s), "chain_id": c, "logit": float(result.logits[k, c]),
             "probability": float(sigmoid(result.logits[k, c]))}
            for k, s in enumerate(result.record_steps) for c in range(n)]
    return export_csv(rows, path, fieldnames=["step", "chain_id", "logit", "probability"])
