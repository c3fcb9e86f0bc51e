"""Tensor-level training of the desk models.

The scalar tape is the semantic model used for analysis; it is far too slow
to train on. Training runs on torch mirrors of the same architectures (same
parameter names, layouts and formulas), and the trained parameters are
exported back as a numpy dict. ``tests/test_training.py`` checks that the
mirrors agree with the tape builders in both logits and sum-product
gradients.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import MLPConfig, ModelConfig, config_from_dict, init_mlp, init_transformer
from .ops import LAYER_NORM_EPS

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


def _key(name: str) -> str:
    return name.replace(".", "__")


class _Mirror(nn.Module):
    def __init__(self, params: dict[str, np.ndarray], dtype=torch.float32):
        super().__init__()
        self.p = nn.ParameterDict(
            {_key(k): nn.Parameter(torch.tensor(np.asarray(v), dtype=dtype)) for k, v in params.items()})

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.p[_key(name)]

    def export(self) -> dict[str, np.ndarray]:
        return {k.replace("__", "."): v.detach().cpu().double().numpy().copy() for k, v in self.p.items()}


class TorchTransformer(_Mirror):
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], dtype=torch.float32):
        super().__init__(params, dtype)
        self.cfg = cfg

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        B, S = tokens.shape
        H, dh = cfg.heads, cfg.head_dim
        x = self["tok_emb"][tokens] + self["pos_emb"][:S]
        for l in range(cfg.layers):
            pre = f"layer{l}."
            q = (x @ self[pre + "wq"] + self[pre + "bq"]).view(B, S, H, dh).transpose(1, 2)
            k = (x @ self[pre + "wk"] + self[pre + "bk"]).view(B, S, H, dh).transpose(1, 2)
            v = (x @ self[pre + "wv"] + self[pre + "bv"]).view(B, S, H, dh).transpose(1, 2)
            attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
            mixed = (attn @ v).transpose(1, 2).reshape(B, S, cfg.hidden)
            a = mixed @ self[pre + "wo"] + self[pre + "bo"]
            x = F.layer_norm(x + a, (cfg.hidden,), self[pre + "ln1.g"], self[pre + "ln1.b"], LAYER_NORM_EPS)
            h = torch.relu(x @ self[pre + "ff.w1"] + self[pre + "ff.b1"])
            f = h @ self[pre + "ff.w2"] + self[pre + "ff.b2"]
            x = F.layer_norm(x + f, (cfg.hidden,), self[pre + "ln2.g"], self[pre + "ln2.b"], LAYER_NORM_EPS)
        pooled = x.mean(dim=1) if cfg.pooling == "mean" else x[:, 0]
        return pooled @ self["head.w"] + self["head.b"]


class TorchMLP(_Mirror):
    def __init__(self, cfg: MLPConfig, params: dict[str, np.ndarray], dtype=torch.float32):
        super().__init__(params, dtype)
        self.cfg = cfg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(x @ self["w1"] + self["b1"]) @ self["w2"] + self["b2"]


def mirror(cfg, params, dtype=torch.float32) -> _Mirror:
    if isinstance(cfg, MLPConfig):
        return TorchMLP(cfg, params, dtype)
    return TorchTransformer(cfg, params, dtype)


def init_params(cfg) -> dict[str, np.ndarray]:
    return init_mlp(cfg) if isinstance(cfg, MLPConfig) else init_transformer(cfg)


# -- training -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    target_val_acc: float | None = None  # stop once validation accuracy reaches this
    keep_best_val_loss: bool = False  # return the parameters with lowest validation loss
    patience: int | None = None  # stop after this many epochs without a new best validation loss
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    trace: list[dict] = field(default_factory=list)
    val_acc: float = math.nan
    val_loss: float = math.nan
    epochs_run: int = 0


def _tensor(X, cfg, dtype):
    if isinstance(cfg, MLPConfig):
        return torch.as_tensor(np.asarray(X, dtype=float), dtype=dtype)
    return torch.as_tensor(np.asarray(X, dtype=np.int64))


@torch.no_grad()
def evaluate(model: nn.Module, X: torch.Tensor, y: torch.Tensor, batch: int = 1024) -> tuple[float, float]:
    """Mean cross-entropy (nats) and accuracy."""
    if len(y) == 0:
        return math.nan, math.nan
    loss, correct = 0.0, 0
    for i in range(0, len(y), batch):
        logits = model(X[i : i + batch])
        loss += F.cross_entropy(logits, y[i : i + batch], reduction="sum").item()
        correct += (logits.argmax(1) == y[i : i + batch]).sum().item()
    return loss / len(y), correct / len(y)


@torch.no_grad()
def summed_loss(cfg, params, X, y, dtype=torch.float64) -> float:
    """Total cross-entropy (nats) of ``params`` on ``(X, y)``."""
    model = mirror(cfg, params, dtype)
    loss, _ = evaluate(model, _tensor(X, cfg, dtype), torch.as_tensor(np.asarray(y, dtype=np.int64)))
    return 0.0 if len(y) == 0 else loss * len(y)


@torch.no_grad()
def predict_logits(cfg, params, X, dtype=torch.float64) -> np.ndarray:
    model = mirror(cfg, params, dtype)
    return model(_tensor(X, cfg, dtype)).numpy()


def train(cfg, params, train_data, val_data, tcfg: TrainConfig = TrainConfig(),
          dtype=torch.float32) -> TrainResult:
    """Minimize cross-entropy with Adam (or SGD); deterministic given ``tcfg.seed``."""
    torch.set_num_threads(tcfg.threads)
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    model = mirror(cfg, params, dtype)
    Xtr, ytr = _tensor(train_data[0], cfg, dtype), torch.as_tensor(np.asarray(train_data[1], dtype=np.int64))
    Xva, yva = _tensor(val_data[0], cfg, dtype), torch.as_tensor(np.asarray(val_data[1], dtype=np.int64))
    if tcfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)

    trace: list[dict] = []
    val_loss, val_acc = evaluate(model, Xva, yva)
    best = (val_loss, model.export(), val_acc, 0) if tcfg.keep_best_val_loss else None
    lowest, since_lowest = val_loss, 0
    epoch = 0
    n = len(ytr)
    for epoch in range(1, tcfg.epochs + 1):
        if n == 0:
            break
        model.train()
        order = torch.as_tensor(rng.permutation(n))
        total = 0.0
        for i in range(0, n, tcfg.batch_size):
            idx = order[i : i + tcfg.batch_size]
            loss = F.cross_entropy(model(Xtr[idx]), ytr[idx])
            if not torch.isfinite(loss):
                trace.append({"epoch": epoch, "train_loss": float(loss.item())})
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        val_loss, val_acc = evaluate(model, Xva, yva)
        trace.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss, "val_acc": val_acc})
        log.debug("epoch %d train %.4f val %.4f acc %.4f", epoch, total / n, val_loss, val_acc)
        if best is not None and val_loss < best[0]:
            best = (val_loss, model.export(), val_acc, epoch)
        if tcfg.target_val_acc is not None and val_acc >= tcfg.target_val_acc:
            break
        if val_loss < lowest:
            lowest, since_lowest = val_loss, 0
        else:
            since_lowest += 1
            if tcfg.patience is not None and since_lowest >= tcfg.patience:
                break
    if best is not None:
        return TrainResult(best[1], trace, best[2], best[0], epoch)
    return TrainResult(model.export(), trace, val_acc, val_loss, epoch)


# -- snapshots ----------------------------------------------------------------------


def save_snapshot(path: str | Path, cfg, params: dict[str, np.ndarray], **meta) -> Path:
    """Write ``params.npz`` plus a ``manifest.json`` (shapes, config, seed) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / "params.npz", **{_key(k): np.asarray(v, dtype=np.float64) for k, v in params.items()})
    manifest = {
        "version": SNAPSHOT_VERSION,
        "config": cfg.to_dict(),
        "shapes": {k: list(np.shape(v)) for k, v in params.items()},
        "dtype": "float64",
        **meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_snapshot(path: str | Path):
    """Returns ``(config, params, manifest)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {manifest.get('version')}")
    with np.load(path / "params.npz") as blob:
        params = {k.replace("__", "."): blob[k].copy() for k in blob.files}
    for name, shape in manifest["shapes"].items():
        if list(params[name].shape) != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, manifest says {shape}")
    return config_from_dict(manifest["config"]), params, manifest
