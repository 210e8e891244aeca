"""Feature extraction, few-shot curves, ablation sweeps and the denoising score."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np

from ..fsq import LEVELS_BY_CODEBOOK
from ..model import ESDNet, ModelConfig
from ..synthdata import SyntheticDataset, inject_cloud_spikes, monthly_means
from ..training import TrainConfig, train
from .metrics import recon_metrics
from .probes import fit_predict_probe

log = logging.getLogger(__name__)

FEATURE_MODES = ("codes", "pooled", "raw", "composite")
# DJF, MAM, JJA, SON
SEASONS = ((11, 0, 1), (2, 3, 4), (5, 6, 7), (8, 9, 10))


def extract_features(ds: SyntheticDataset, model: ESDNet | None, mode: str, batch: int = 512) -> np.ndarray:
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")
    if mode == "raw":
        return ds.reflectance.reshape(len(ds), -1).copy()
    if mode == "composite":
        months = monthly_means(np.moveaxis(ds.reflectance, 1, 2))  # [N, 6, 12]
        seas = np.stack([months[:, :, list(s)].mean(axis=2) for s in SEASONS], axis=1)  # [N, 4, 6]
        return seas.reshape(len(ds), -1)
    if model is None:
        raise ValueError(f"feature mode {mode!r} needs a model")
    qs = []
    for i in range(0, len(ds), batch):
        codes = model.encode(ds.reflectance[i : i + batch], ds.static[i : i + batch])
        qs.append(model.codes_to_quantized(codes))  # [B, d, T]
    q = np.concatenate(qs)
    if mode == "pooled":
        return q.mean(axis=2)
    return q.transpose(0, 2, 1).reshape(len(ds), -1)


def stratified_subsample(y: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` indices with class proportions preserved and >= 1 per class."""
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if size < len(classes):
        raise ValueError(f"size {size} smaller than the number of classes {len(classes)}")
    if size > len(y):
        raise ValueError(f"size {size} exceeds the pool of {len(y)}")
    if size == len(y):
        return np.arange(len(y))
    quota = np.maximum(1, np.floor(size * counts / len(y)).astype(int))
    # hand out the remainder by largest fractional part, then trim any excess
    frac = size * counts / len(y) - np.floor(size * counts / len(y))
    for i in np.argsort(-frac, kind="stable"):
        if quota.sum() >= size:
            break
        if quota[i] < counts[i]:
            quota[i] += 1
    while quota.sum() > size:
        i = int(np.argmax(quota))
        quota[i] -= 1
    idx = [rng.choice(np.flatnonzero(y == c), size=q, replace=False) for c, q in zip(classes, quota)]
    return np.sort(np.concatenate(idx))


def few_shot_curve(features: dict[str, tuple[np.ndarray, np.ndarray]], ytr, yte, sizes, repeats: int = 5,
                   seed: int = 0, algorithm: str = "linear", n_classes: int | None = None,
                   **hyper) -> dict[str, list[float]]:
    """Mean OA per training size for each feature source ``{name: (Xtr, Xte)}``.

    All sources share the same subsample draws so they are compared on
    identical label sets.
    """
    ytr = np.asarray(ytr)
    k = n_classes if n_classes is not None else int(max(ytr.max(), np.max(yte)) + 1)
    rng = np.random.default_rng(seed)
    draws = {n: [stratified_subsample(ytr, n, rng) for _ in range(repeats)] for n in sizes}
    out: dict[str, list[float]] = {}
    for name, (Xtr, Xte) in features.items():
        curve = []
        for n in sizes:
            oas = [fit_predict_probe(Xtr[i], ytr[i], Xte, yte, algorithm, k, name, **hyper).oa for i in draws[n]]
            curve.append(float(np.mean(oas)))
        out[name] = curve
    return out


def denoising_score(clean, corrupted, reconstructed, corrupted_days) -> float:
    """Mean |recon - clean| over corrupted days divided by mean |corrupted - clean| there.

    Arrays are ``[365, 6]`` or stacked ``[N, 365, 6]`` with a list of day-index
    arrays, one per sample.
    """
    clean = np.asarray(clean, dtype=np.float64)
    corrupted = np.asarray(corrupted, dtype=np.float64)
    rec = np.asarray(reconstructed, dtype=np.float64)
    if clean.ndim == 2:
        clean, corrupted, rec = clean[None], corrupted[None], rec[None]
        corrupted_days = [corrupted_days]
    num = den = 0.0
    n = 0
    for i, days in enumerate(corrupted_days):
        days = np.asarray(days, dtype=np.int64)
        if days.size == 0:
            continue
        num += np.abs(rec[i, days] - clean[i, days]).sum()
        den += np.abs(corrupted[i, days] - clean[i, days]).sum()
        n += days.size
    if n == 0:
        raise ValueError("no corrupted days to score")
    if den == 0:
        raise ValueError("corruption left the series unchanged; score undefined")
    return float(num / den)


def reconstruct_all(model: ESDNet, refl, static, batch: int = 512) -> np.ndarray:
    return np.concatenate([model.reconstruct(refl[i : i + batch], static[i : i + batch])
                           for i in range(0, len(refl), batch)])


def spike_suite_score(model: ESDNet, ds: SyntheticDataset, rate: float = 0.05, seed: int = 0) -> tuple[float, int]:
    """Inject spikes into each clean val series, reconstruct, score.

    Sample ``i`` draws its corruption from ``SeedSequence([seed, i])``, so the
    suite does not depend on evaluation order. Returns (ratio, corrupted days).
    """
    corrupted, days = [], []
    for i in range(len(ds)):
        c = inject_cloud_spikes(ds.clean[i], rate, np.random.SeedSequence([seed, i]))
        corrupted.append(c.reflectance)
        days.append(c.corrupted_days)
    corrupted = np.stack(corrupted)
    rec = reconstruct_all(model, corrupted, ds.static)
    return denoising_score(ds.clean, corrupted, rec, days), int(sum(len(d) for d in days))


# -- ablation -------------------------------------------------------------
KNOBS = ("temporal_dim", "codebook", "residual_layers", "supervision")


def configs_for(knob: str, value, model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    try:
        if knob == "temporal_dim":
            return replace(model_cfg, t_lat=int(value), strides=None), train_cfg
        if knob == "codebook":
            return replace(model_cfg, levels=LEVELS_BY_CODEBOOK[int(value)]), train_cfg
        if knob == "residual_layers":
            return replace(model_cfg, n_res=int(value)), train_cfg
        if knob == "supervision":
            on = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "with", "on", "yes")
            if on:
                return model_cfg, train_cfg
            return model_cfg, replace(train_cfg, beta=0.0, gamma=0.0)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"invalid value {value!r} for knob {knob}: {exc}") from None
    raise ValueError(f"unknown ablation knob {knob!r}; choose from {KNOBS}")


@dataclass
class AblationRow:
    value: object
    mae: float
    rmse: float
    cc: float
    oa: float


def evaluate_model(model: ESDNet, train_ds: SyntheticDataset, val_ds: SyntheticDataset,
                   task: str = "static_class", algorithm: str = "linear") -> tuple[float, float, float, float]:
    """(MAE, RMSE, CC) of reconstructions against clean val signals plus probe OA."""
    rec = reconstruct_all(model, val_ds.reflectance, val_ds.static)
    m = recon_metrics(val_ds.clean, rec)
    ytr, yte = train_ds.labels[task], val_ds.labels[task]
    Xtr = extract_features(train_ds, model, "codes")
    Xte = extract_features(val_ds, model, "codes")
    oa = fit_predict_probe(Xtr, ytr, Xte, yte, algorithm, int(max(ytr.max(), yte.max()) + 1), "codes").oa
    return m.mean_mae, m.mean_rmse, m.mean_cc, oa


def ablation_run(knob: str, values, model_cfg: ModelConfig, train_cfg: TrainConfig, train_ds: SyntheticDataset,
                 val_ds: SyntheticDataset, task: str = "static_class", trainer=None) -> list[AblationRow]:
    """Train once per value on the same data and seed; report Table-style columns.

    ``trainer(model_cfg, train_cfg) -> ESDNet`` can replace the default
    (e.g. to cache runs).
    """
    pairs = [configs_for(knob, v, model_cfg, train_cfg) for v in values]
    rows = []
    for v, (mc, tc) in zip(values, pairs):
        log.info("ablation %s=%s", knob, v)
        model = trainer(mc, tc) if trainer is not None else train(train_ds, tc, mc)[0]
        rows.append(AblationRow(v, *evaluate_model(model, train_ds, val_ds, task)))
    return rows


def ablation_csv(knob: str, rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([knob, "MAE", "RMSE", "CC", "OA"])
    for r in rows:
        w.writerow([r.value, f"{r.mae:.6f}", f"{r.rmse:.6f}", f"{r.cc:.6f}", f"{100 * r.oa:.2f}%"])
    return buf.getvalue()
