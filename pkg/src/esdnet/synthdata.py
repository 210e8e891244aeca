"""Seeded synthetic pixel-year series with class-conditional phenology.

Every class has a per-band seasonal bump ``base + amp * g(day)`` with
``g = ((1 + cos(2*pi*(day - peak)/365)) / 2) ** sharpness``. Crop adds a second
bump to mimic a double-cropping rotation. Each sample jitters base, amplitude
(shared plus per-band) and peak day, then multiplies by a smooth intra-annual
anomaly made of a few low harmonics, so a pixel-year carries a few dozen free
parameters rather than three. Gaussian noise and a clamp to [0, 1] come last.
Reflectance is rounded through float32, so a file round trip reproduces it
exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import MONTH_LENGTHS, N_BANDS, N_DAYS

CLASS_NAMES = ("crop", "forest", "grass", "shrub", "water", "tundra", "impervious", "bareland", "snow_ice")
# WorldCover-like static legend: tundra folds into grass-like herbaceous cover
STATIC_CLASS_OF = (0, 1, 2, 3, 4, 2, 5, 6, 7)
N_STATIC_CLASSES = 8
N_STATIC = 2

_DAYS = np.arange(N_DAYS, dtype=np.float64)
_MONTH_OF_DAY = np.repeat(np.arange(12), MONTH_LENGTHS)


@dataclass(frozen=True)
class ClassProfile:
    class_id: int
    name: str
    base: tuple[float, ...]
    amp: tuple[float, ...]
    peak_day: float
    sharpness: float
    second_peak: float | None = None
    second_frac: float = 0.0
    noise_sigma: float = 0.02
    water_prob: tuple[float, ...] = (0.01,) * 12
    elevation: tuple[float, float] = (0.2, 0.1)
    slope: tuple[float, float] = (0.1, 0.05)
    # per-sample variability
    base_jitter: float = 0.35
    amp_jitter: float = 0.4
    peak_jitter: float = 40.0
    band_jitter: float = 0.05
    # relative size of the multiplicative anomaly and how many harmonics it uses
    anomaly_sigma: float = 0.05
    anomaly_harmonics: int = 6


_TUNDRA_WATER = (0, 0, 0, 0, 0.1, 0.3, 0.3, 0.3, 0.1, 0, 0, 0)

DEFAULT_PROFILES = (
    ClassProfile(0, "crop", (0.05, 0.08, 0.09, 0.20, 0.22, 0.16), (-0.02, 0.0, -0.05, 0.25, -0.04, -0.06),
                 130, 6.0, second_peak=260, second_frac=0.8, water_prob=(0.05,) * 12),
    ClassProfile(1, "forest", (0.03, 0.05, 0.03, 0.22, 0.12, 0.06), (0.0, 0.02, 0.0, 0.12, 0.03, 0.0),
                 190, 2.0, elevation=(0.35, 0.15), slope=(0.3, 0.1)),
    ClassProfile(2, "grass", (0.05, 0.08, 0.08, 0.18, 0.24, 0.16), (-0.01, 0.01, -0.03, 0.14, -0.03, -0.04),
                 180, 3.0),
    ClassProfile(3, "shrub", (0.07, 0.10, 0.12, 0.20, 0.28, 0.20), (-0.01, 0.0, -0.02, 0.07, -0.02, -0.02),
                 200, 3.0, elevation=(0.3, 0.1)),
    ClassProfile(4, "water", (0.07, 0.07, 0.05, 0.03, 0.02, 0.01), (0.01, 0.015, 0.01, 0.01, 0.003, 0.002),
                 200, 2.0, water_prob=(0.95,) * 12, elevation=(0.1, 0.05), slope=(0.02, 0.01)),
    ClassProfile(5, "tundra", (0.55, 0.55, 0.55, 0.50, 0.12, 0.10), (-0.5, -0.48, -0.5, -0.25, 0.12, 0.08),
                 200, 4.0, water_prob=_TUNDRA_WATER, elevation=(0.6, 0.1)),
    ClassProfile(6, "impervious", (0.11, 0.12, 0.13, 0.17, 0.19, 0.17), (0.0,) * 6,
                 180, 1.0, amp_jitter=0.0, peak_jitter=0.0),
    ClassProfile(7, "bareland", (0.16, 0.21, 0.26, 0.31, 0.38, 0.32), (0.01,) * 6,
                 200, 2.0, elevation=(0.3, 0.15)),
    ClassProfile(8, "snow_ice", (0.80, 0.78, 0.75, 0.65, 0.10, 0.08), (-0.1, -0.1, -0.1, -0.08, 0.0, 0.0),
                 200, 4.0, elevation=(0.8, 0.1), slope=(0.3, 0.1)),
)


@dataclass
class TimeSeriesSample:
    reflectance: np.ndarray  # [365, 6]
    static: np.ndarray  # [S]
    annual_class: int
    static_class: int
    impervious: int
    crop: int
    water: np.ndarray  # [12] of {0, 1}
    clean: np.ndarray | None = None


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def seasonal_shape(peak: float, sharpness: float) -> np.ndarray:
    return ((1.0 + np.cos(2.0 * np.pi * (_DAYS - peak) / N_DAYS)) / 2.0) ** sharpness


def smooth_anomaly(n_harmonics: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """[365, 6] zero-mean periodic perturbation; harmonic k has variance ~ 1/k."""
    k = np.arange(1, n_harmonics + 1)
    phase = 2.0 * np.pi * np.outer(_DAYS, k) / N_DAYS
    scale = sigma / np.sqrt(k) / np.sqrt(np.sum(1.0 / k))
    coef = rng.standard_normal((2, n_harmonics, N_BANDS)) * scale[:, None]
    return np.cos(phase) @ coef[0] + np.sin(phase) @ coef[1]


def clean_signal(profile: ClassProfile, rng: np.random.Generator) -> np.ndarray:
    bj = profile.band_jitter
    base = np.asarray(profile.base) * (1.0 + profile.base_jitter * rng.standard_normal() + bj * rng.standard_normal(N_BANDS))
    amp = np.asarray(profile.amp) * (1.0 + profile.amp_jitter * rng.standard_normal() + bj * rng.standard_normal(N_BANDS))
    shift = profile.peak_jitter * rng.standard_normal()
    g = seasonal_shape(profile.peak_day + shift, profile.sharpness)
    x = base[None, :] + g[:, None] * amp[None, :]
    if profile.second_peak is not None:
        g2 = seasonal_shape(profile.second_peak + shift, profile.sharpness)
        x = x + profile.second_frac * g2[:, None] * amp[None, :]
    if profile.anomaly_sigma > 0 and profile.anomaly_harmonics > 0:
        x = x * (1.0 + smooth_anomaly(profile.anomaly_harmonics, profile.anomaly_sigma, rng))
    return np.clip(x, 0.0, 1.0)


def generate_sample(profile: ClassProfile, seed) -> TimeSeriesSample:
    """One pixel-year for ``profile``; ``seed`` is anything ``default_rng`` accepts."""
    rng = np.random.default_rng(seed)
    clean = clean_signal(profile, rng)
    noisy = np.clip(clean + profile.noise_sigma * rng.standard_normal(clean.shape), 0.0, 1.0)
    water = (rng.random(12) < np.asarray(profile.water_prob)).astype(np.int64)
    elev = np.clip(rng.normal(*profile.elevation), 0.0, 1.0)
    slope = np.clip(rng.normal(*profile.slope), 0.0, 1.0)
    return TimeSeriesSample(
        reflectance=_f32(noisy),
        static=_f32([elev, slope]),
        annual_class=profile.class_id,
        static_class=STATIC_CLASS_OF[profile.class_id],
        impervious=int(profile.name == "impervious"),
        crop=int(profile.name == "crop"),
        water=water,
        clean=_f32(clean),
    )


@dataclass
class CorruptedSample:
    reflectance: np.ndarray
    cloud_days: np.ndarray
    shadow_days: np.ndarray

    @property
    def corrupted_days(self) -> np.ndarray:
        return np.union1d(self.cloud_days, self.shadow_days)


def inject_cloud_spikes(reflectance: np.ndarray, rate: float, seed) -> CorruptedSample:
    """Bright visible-band cloud residuals plus one dark shadow day per cloud."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    x = np.array(reflectance, dtype=np.float64, copy=True)
    rng = np.random.default_rng(seed)
    cloud = np.flatnonzero(rng.random(N_DAYS) < rate)
    free = np.setdiff1d(np.arange(N_DAYS), cloud)
    n_shadow = min(len(cloud), len(free))
    shadow = np.sort(rng.choice(free, size=n_shadow, replace=False)) if n_shadow else np.zeros(0, dtype=np.int64)
    if len(cloud):
        k = rng.uniform(0.6, 0.9, size=(len(cloud), 1))
        x[cloud, :3] += (0.9 - x[cloud, :3]) * k
    if len(shadow):
        k = rng.uniform(0.6, 0.9, size=(len(shadow), 1))
        x[shadow] += (0.05 - x[shadow]) * k
    return CorruptedSample(_f32(np.clip(x, 0.0, 1.0)), cloud, shadow)


@dataclass
class DatasetConfig:
    classes: tuple[str, ...] = CLASS_NAMES
    n_train_per_class: int = 100
    n_val_per_class: int = 100
    seed: int = 0
    noise_sigma: float = 0.02

    def to_dict(self):
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


@dataclass
class SyntheticDataset:
    reflectance: np.ndarray  # [N, 365, 6]
    clean: np.ndarray  # [N, 365, 6]
    static: np.ndarray  # [N, S]
    annual_class: np.ndarray
    static_class: np.ndarray
    impervious: np.ndarray
    crop: np.ndarray
    water: np.ndarray  # [N, 12]
    class_names: tuple[str, ...] = CLASS_NAMES
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.reflectance.shape[0]

    @property
    def labels(self) -> dict[str, np.ndarray]:
        return {
            "annual_class": self.annual_class,
            "static_class": self.static_class,
            "impervious": self.impervious,
            "crop": self.crop,
            "water": self.water,
        }

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(
            self.reflectance[idx], self.clean[idx], self.static[idx], self.annual_class[idx],
            self.static_class[idx], self.impervious[idx], self.crop[idx], self.water[idx],
            self.class_names, self.seed, dict(self.meta),
        )

    def sample(self, i: int) -> TimeSeriesSample:
        return TimeSeriesSample(
            self.reflectance[i], self.static[i], int(self.annual_class[i]), int(self.static_class[i]),
            int(self.impervious[i]), int(self.crop[i]), self.water[i], self.clean[i],
        )

    @classmethod
    def from_samples(cls, samples: list[TimeSeriesSample], class_names=CLASS_NAMES, seed: int = 0) -> "SyntheticDataset":
        if not samples:
            raise ValueError("dataset needs at least one sample")
        return cls(
            reflectance=np.stack([s.reflectance for s in samples]),
            clean=np.stack([s.reflectance if s.clean is None else s.clean for s in samples]),
            static=np.stack([s.static for s in samples]),
            annual_class=np.array([s.annual_class for s in samples], dtype=np.int64),
            static_class=np.array([s.static_class for s in samples], dtype=np.int64),
            impervious=np.array([s.impervious for s in samples], dtype=np.int64),
            crop=np.array([s.crop for s in samples], dtype=np.int64),
            water=np.stack([np.asarray(s.water, dtype=np.int64) for s in samples]),
            class_names=tuple(class_names),
            seed=seed,
        )


def profiles_for(names, noise_sigma: float = 0.02) -> list[ClassProfile]:
    by_name = {p.name: p for p in DEFAULT_PROFILES}
    out = []
    for n in names:
        if n not in by_name:
            raise ValueError(f"unknown class {n!r}; known: {sorted(by_name)}")
        p = by_name[n]
        out.append(ClassProfile(**{**asdict(p), "noise_sigma": noise_sigma}))
    return out


def _split(profiles, n_per_class: int, seed: int, split: int) -> list[TimeSeriesSample]:
    samples = []
    for p in profiles:
        for j in range(n_per_class):
            samples.append(generate_sample(p, np.random.SeedSequence([seed, split, p.class_id, j])))
    return samples


def generate_dataset(config: DatasetConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Class-stratified (train, val) pair; the splits draw from disjoint seed streams."""
    if not config.classes:
        raise ValueError("class list is empty")
    if config.n_train_per_class < 1 or config.n_val_per_class < 1:
        raise ValueError("need at least one sample per class in each split")
    profiles = profiles_for(config.classes, config.noise_sigma)
    names = CLASS_NAMES
    train = SyntheticDataset.from_samples(_split(profiles, config.n_train_per_class, config.seed, 0), names, config.seed)
    val = SyntheticDataset.from_samples(_split(profiles, config.n_val_per_class, config.seed, 1), names, config.seed)
    train.meta = val.meta = {"generator": config.to_dict()}
    return train, val


# -- binary format --------------------------------------------------------
DATASET_MAGIC = b"ESDS"
DATASET_VERSION = 1
_FLAG_CLEAN = 1


def dump_dataset(ds: SyntheticDataset) -> bytes:
    n, S = len(ds), ds.static.shape[1]
    head = [DATASET_MAGIC, struct.pack("<IIIIHB", DATASET_VERSION, n, S, _FLAG_CLEAN, N_DAYS, N_BANDS)]
    head.append(struct.pack("<B", len(ds.class_names)))
    for i, name in enumerate(ds.class_names):
        raw = name.encode("utf-8")
        head.append(struct.pack("<BB", i, len(raw)) + raw)
    rec = np.dtype([
        ("refl", "<f4", (N_DAYS, N_BANDS)),
        ("clean", "<f4", (N_DAYS, N_BANDS)),
        ("static", "<f4", (S,)),
        ("labels", "u1", (4,)),
        ("water", "u1", (12,)),
    ])
    arr = np.zeros(n, dtype=rec)
    arr["refl"] = ds.reflectance
    arr["clean"] = ds.clean
    arr["static"] = ds.static
    arr["labels"] = np.stack([ds.annual_class, ds.static_class, ds.impervious, ds.crop], axis=1)
    arr["water"] = ds.water
    return b"".join(head) + arr.tobytes()


def load_dataset(buf: bytes) -> SyntheticDataset:
    if buf[:4] != DATASET_MAGIC:
        raise ValueError("bad magic: not an ESDS dataset")
    try:
        version, n, S, flags, days, bands = struct.unpack_from("<IIIIHB", buf, 4)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        if days != N_DAYS or bands != N_BANDS:
            raise ValueError(f"dataset holds [{days}, {bands}] series; expected [{N_DAYS}, {N_BANDS}]")
        pos = 4 + struct.calcsize("<IIIIHB")
        (k,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        names = []
        for _ in range(k):
            _, ln = struct.unpack_from("<BB", buf, pos)
            pos += 2
            names.append(buf[pos : pos + ln].decode("utf-8"))
            pos += ln
    except struct.error as exc:
        raise ValueError("truncated dataset header") from exc
    fields = [("refl", "<f4", (N_DAYS, N_BANDS))]
    if flags & _FLAG_CLEAN:
        fields.append(("clean", "<f4", (N_DAYS, N_BANDS)))
    fields += [("static", "<f4", (S,)), ("labels", "u1", (4,)), ("water", "u1", (12,))]
    rec = np.dtype(fields)
    if len(buf) - pos != n * rec.itemsize:
        raise ValueError("truncated dataset payload")
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=pos)
    lab = arr["labels"].astype(np.int64)
    refl = arr["refl"].astype(np.float64)
    return SyntheticDataset(
        reflectance=refl,
        clean=arr["clean"].astype(np.float64) if flags & _FLAG_CLEAN else refl.copy(),
        static=arr["static"].astype(np.float64),
        annual_class=lab[:, 0], static_class=lab[:, 1], impervious=lab[:, 2], crop=lab[:, 3],
        water=arr["water"].astype(np.int64),
        class_names=tuple(names),
    )


def save_dataset_files(ds: SyntheticDataset, path, config: DatasetConfig | None = None) -> None:
    from pathlib import Path

    path = Path(path)
    path.write_bytes(dump_dataset(ds))
    if config is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def monthly_means(series: np.ndarray) -> np.ndarray:
    """``[..., 365]`` daily values -> ``[..., 12]`` calendar-month means."""
    series = np.asarray(series, dtype=np.float64)
    out = np.zeros(series.shape[:-1] + (12,))
    start = 0
    for m, ln in enumerate(MONTH_LENGTHS):
        out[..., m] = series[..., start : start + ln].mean(axis=-1)
        start += ln
    return out
