"""Multi-task objective and the training loop.

total = alpha * reconstruction + beta * sum_i a_i CE_i + gamma * sum_i b_i MSE_i

Cross-entropy is the usual negative log-likelihood; reconstruction is the MSE
over all days and bands.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import BAND_NAMES, ESDNet, ModelConfig
from .synthdata import SyntheticDataset, monthly_means
from .tensor_core import ShapeError, Tensor, mse, sigmoid_cross_entropy, softmax_cross_entropy

log = logging.getLogger(__name__)

INDEX_NAMES = ("ndvi", "ndwi", "ndsi")
_B = {name: i for i, name in enumerate(BAND_NAMES)}
DENOM_EPS = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    task_weights: dict[str, float] = field(default_factory=dict)  # a_i, default 1
    index_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # b_i for ndvi, ndwi, ndsi
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # step-size multiplier for the single-layer heads
    head_lr_scale: float = 1.0
    lr_schedule: str = "constant"  # constant | cosine (anneals to 0 over all steps)
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0

    @property
    def supervised(self) -> bool:
        return self.beta != 0.0 or self.gamma != 0.0

    def to_dict(self):
        d = asdict(self)
        d["index_weights"] = list(self.index_weights)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("index_weights", "adam_betas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# Desk-scale schedule for the 900-sample synthetic corpus. alpha carries the
# 365 * 6 entries of one series so the mean-MSE term weighs what the printed
# squared norm would; heads take larger steps because their inputs are a
# 4-value pooled summary. Cosine annealing lets the last epochs settle instead
# of stopping at an arbitrary point of the batch-32 oscillation.
DESK_PRESET = TrainConfig(alpha=float(365 * 6), beta=10.0, gamma=10.0, head_lr_scale=30.0, lr_schedule="cosine",
                          batch_size=32, epochs=80)


def scheduled_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Step size for update ``step`` (0-based) out of ``total_steps``."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
    raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}; use constant or cosine")


@dataclass
class LossBreakdown:
    total: float
    reconstruction: float
    classification: dict[str, float]
    regression: float

    @property
    def classification_total(self) -> float:
        return float(sum(self.classification.values()))


# -- index targets --------------------------------------------------------
def normalized_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a - b) / (np.abs(a + b) + DENOM_EPS)


def daily_indices(x: np.ndarray) -> np.ndarray:
    """``[..., 365, 6]`` -> ``[..., 365, 3]`` NDVI, NDWI, NDSI."""
    x = np.asarray(x, dtype=np.float64)
    g, r, n, s1 = (x[..., _B[k]] for k in ("green", "red", "nir", "swir1"))
    return np.stack([normalized_difference(n, r), normalized_difference(g, n), normalized_difference(g, s1)], axis=-1)


def compute_index_targets(x: np.ndarray) -> np.ndarray:
    """Monthly mean indices ``[..., 12, 3]`` (ndvi, ndwi, ndsi)."""
    d = daily_indices(x)
    return np.moveaxis(monthly_means(np.moveaxis(d, -1, -2)), -2, -1)


# -- loss pieces ----------------------------------------------------------
def reconstruction_loss(x, x_hat: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    return mse(x_hat, x)


def classification_loss(outputs: dict[str, Tensor], labels: dict[str, np.ndarray], model: ESDNet,
                        weights: dict[str, float] | None = None) -> tuple[Tensor | None, dict[str, Tensor]]:
    weights = weights or {}
    parts: dict[str, Tensor] = {}
    for name, spec in model.head_specs.items():
        if spec.loss == "regression" or name not in outputs:
            continue
        if name not in labels:
            raise ValueError(f"no labels supplied for head {name!r}")
        y = np.asarray(labels[name])
        if spec.loss == "softmax":
            if y.min() < 0 or y.max() >= spec.n_out:
                raise ValueError(f"head {name!r}: labels must lie in [0, {spec.n_out})")
            parts[name] = softmax_cross_entropy(outputs[name], y)
        else:
            if np.any((y != 0) & (y != 1)):
                raise ValueError(f"head {name!r}: binary labels must be 0/1")
            parts[name] = sigmoid_cross_entropy(outputs[name], y.reshape(outputs[name].shape))
    total = None
    for name, ce in parts.items():
        term = ce * float(weights.get(name, 1.0))
        total = term if total is None else total + term
    return total, parts


def regression_loss(v: np.ndarray, v_hat: Tensor, b=(1.0, 1.0, 1.0)) -> Tensor:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != v_hat.shape:
        raise ShapeError(f"index target shape {v.shape} vs prediction {v_hat.shape}")
    total = None
    for i, w in enumerate(b):
        term = mse(v_hat[..., i], v[..., i]) * float(w)
        total = term if total is None else total + term
    return total


def multitask_loss(model: ESDNet, batch: dict[str, np.ndarray], cfg: TrainConfig, fsq_offset=None):
    """Forward pass and the weighted objective; returns (total tensor, breakdown, outputs)."""
    heads: bool | list[str] = []
    if cfg.beta:
        heads = [h.name for h in model.config.heads if h.loss != "regression"]
    if cfg.gamma:
        heads = list(heads) + [h.name for h in model.config.heads if h.loss == "regression"]
    out = model.forward(batch["reflectance"], batch["static"], heads=heads or False, fsq_offset=fsq_offset)
    rec = reconstruction_loss(batch["reflectance"], out["reconstruction"])
    total = rec * cfg.alpha
    cls_parts: dict[str, Tensor] = {}
    reg_val = 0.0
    if cfg.beta:
        cls, cls_parts = classification_loss(out, batch, model, cfg.task_weights)
        if cls is not None:
            total = total + cls * cfg.beta
    if cfg.gamma:
        reg_heads = [h.name for h in model.config.heads if h.loss == "regression"]
        if reg_heads:
            reg = regression_loss(batch["indices"], out[reg_heads[0]], cfg.index_weights)
            total = total + reg * cfg.gamma
            reg_val = reg.item()
    breakdown = LossBreakdown(
        total=total.item(),
        reconstruction=rec.item(),
        classification={k: v.item() for k, v in cls_parts.items()},
        regression=reg_val,
    )
    return total, breakdown, out


def recombine(b: LossBreakdown, cfg: TrainConfig) -> float:
    cls = sum(float(cfg.task_weights.get(k, 1.0)) * v for k, v in b.classification.items())
    return cfg.alpha * b.reconstruction + cfg.beta * cls + cfg.gamma * b.regression


# -- optimizer ------------------------------------------------------------
class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 lr_scale: dict[str, float] | None = None):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.lr_scale = lr_scale or {}
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * self.lr_scale.get(k, 1.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- loop -----------------------------------------------------------------
def batch_arrays(ds: SyntheticDataset, idx=None) -> dict[str, np.ndarray]:
    if idx is not None:
        ds = ds.subset(idx)
    out = {"reflectance": ds.reflectance, "static": ds.static, **ds.labels}
    out["indices"] = compute_index_targets(ds.reflectance)
    return out


def validation_mae(model: ESDNet, ds: SyntheticDataset, batch: int = 256) -> float:
    errs = []
    for i in range(0, len(ds), batch):
        xh = model.reconstruct(ds.reflectance[i : i + batch], ds.static[i : i + batch])
        errs.append(np.abs(xh - ds.clean[i : i + batch]).reshape(-1))
    return float(np.concatenate(errs).mean())


@dataclass
class EpochLog:
    epoch: int
    total: float
    recon: float
    cls: float
    regr: float
    val_mae: float | None


METRICS_HEADER = ("epoch", "total", "recon", "class", "regr", "val_MAE")


def metrics_csv(rows: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.epoch, repr(r.total), repr(r.recon), repr(r.cls), repr(r.regr),
                    "" if r.val_mae is None else repr(r.val_mae)])
    return buf.getvalue()


def train(dataset: SyntheticDataset, config: TrainConfig, model_config: ModelConfig | None = None,
          val: SyntheticDataset | None = None, model: ESDNet | None = None,
          on_step=None) -> tuple[ESDNet, list[EpochLog]]:
    """Adam over shuffled mini-batches. Deterministic for fixed seeds.

    ``on_step(step, breakdown, model)`` is called after every update.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if config.batch_size < 1 or config.epochs < 0:
        raise ValueError("batch_size must be >= 1 and epochs >= 0")
    scheduled_lr(config, 0, 1)
    model = model or ESDNet(model_config or ModelConfig())
    params = model.parameters()
    scale = {k: config.head_lr_scale for k in model.head_parameter_names()}
    opt = Adam(params, config.lr, config.adam_betas, config.adam_eps, scale)
    rng = np.random.default_rng(config.seed)
    full = batch_arrays(dataset)
    history: list[EpochLog] = []
    step = 0
    total_steps = config.epochs * math.ceil(len(dataset) / config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        sums = np.zeros(4)
        seen = 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch = {k: v[idx] for k, v in full.items()}
            model.zero_grad()
            total, br, _ = multitask_loss(model, batch, config)
            if not np.isfinite(br.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            total.backward()
            opt.lr = scheduled_lr(config, step, total_steps)
            opt.step()
            step += 1
            if on_step is not None:
                on_step(step, br, model)
            sums += len(idx) * np.array([br.total, br.reconstruction, br.classification_total, br.regression])
            seen += len(idx)
        vm = validation_mae(model, val) if val is not None else None
        m = sums / seen
        history.append(EpochLog(epoch, *m.tolist(), vm))
        log.info("epoch %d total %.5f recon %.5f class %.4f regr %.4f val_mae %s", epoch, *m, vm)
    model.zero_grad()
    return model, history


def save_training_config(cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    return json.dumps({"train": cfg.to_dict(), "model": model_cfg.to_dict()}, indent=2, sort_keys=True)
