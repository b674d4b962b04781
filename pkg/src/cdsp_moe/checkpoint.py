"""JSON checkpoints: variant, model config, parameters and optimizer moments."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .baselines import StandardMoE
from .model import CDSPMoE, ConsistencyError, ModelConfig

FORMAT = "cdsp-moe-checkpoint/1"


def _pack(arrays: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in arrays.items()}


def _unpack(blob: dict) -> dict:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}


def save_checkpoint(path, model, optimizer=None) -> Path:
    doc = {"format": FORMAT, "variant": model.name if isinstance(model, StandardMoE) else model.variant,
           "config": model.config.to_dict(), "params": _pack(model.params)}
    if isinstance(model, StandardMoE):
        doc["expert_dim"] = model.expert_dim
    if optimizer is not None:
        st = optimizer.state_dict()
        doc["optimizer"] = {"t": st["t"], "groups": st["groups"], "m": _pack(st["m"]), "v": _pack(st["v"])}
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally the raw optimizer state) from ``path``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConsistencyError(f"{path} is not a JSON checkpoint: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise ConsistencyError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    cfg = ModelConfig(**doc["config"])
    params = _unpack(doc["params"])
    variant = doc["variant"]
    if variant == "cdsp":
        model = CDSPMoE(cfg, params)
    elif variant in ("standard", "pure_blind"):
        model = StandardMoE(cfg, params, blind=variant == "pure_blind", expert_dim=doc.get("expert_dim", 32))
    else:
        raise ConsistencyError(f"{path}: unknown variant {variant!r}")
    if not with_optimizer:
        return model
    opt = doc.get("optimizer")
    if opt is not None:
        opt = {"t": opt["t"], "groups": opt["groups"], "m": _unpack(opt["m"]), "v": _unpack(opt["v"])}
    return model, opt
