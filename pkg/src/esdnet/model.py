"""ESDNet: strided Conv1D encoder, FSQ bottleneck, mirror decoder, task heads.

Data layout inside the network is ``[B, C, T]``. Samples enter as
``[B, 365, 6]`` reflectance plus ``[B, S]`` static covariates; the statics are
broadcast along time and stacked under the bands, then the series is
replicate-padded to ``padded_len`` so that the stride product divides it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import fsq as fsqmod
from .fsq import FsqSpec
from .tensor_core import (
    Conv1dLayer,
    ConvTranspose1dLayer,
    ResidualBlock,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    load_checkpoint,
    matmul,
    no_grad,
    pad_replicate,
    relu,
    save_checkpoint,
    temporal_average_pool,
    transpose,
)

N_DAYS = 365
N_BANDS = 6
BAND_NAMES = ("blue", "green", "red", "nir", "swir1", "swir2")
MONTH_LENGTHS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)

STRIDES_FOR_TLAT = {
    4: (2, 4, 4, 3),
    6: (2, 4, 4, 2),
    8: (2, 2, 4, 3),
    12: (2, 2, 2, 4),
    24: (2, 2, 2, 2),
}


@dataclass(frozen=True)
class HeadSpec:
    name: str
    n_out: int
    # "pooled": one prediction from the time-averaged latent
    # "monthly": shared layer applied per latent step, mapped onto 12 months
    kind: str = "pooled"
    loss: str = "softmax"  # softmax | sigmoid | regression

    def __post_init__(self):
        if self.kind not in ("pooled", "monthly"):
            raise ValueError(f"head {self.name}: unknown kind {self.kind!r}")
        if self.loss not in ("softmax", "sigmoid", "regression"):
            raise ValueError(f"head {self.name}: unknown loss {self.loss!r}")
        if self.n_out < 1:
            raise ValueError(f"head {self.name}: n_out must be >= 1")


DEFAULT_HEADS = (
    HeadSpec("annual_class", 9),
    HeadSpec("static_class", 8),
    HeadSpec("impervious", 2),
    HeadSpec("crop", 2),
    HeadSpec("water", 1, kind="monthly", loss="sigmoid"),
    HeadSpec("indices", 3, kind="monthly", loss="regression"),
)


@dataclass
class ModelConfig:
    n_static: int = 2
    hidden: int = 64
    t_lat: int = 12
    strides: tuple[int, ...] | None = None
    n_res: int = 10
    levels: tuple[int, ...] = (16, 16, 16, 16)
    kernel_size: int = 5
    res_kernel: int = 3
    padded_len: int = 384
    heads: tuple[HeadSpec, ...] = DEFAULT_HEADS
    seed: int = 0

    def __post_init__(self):
        self.levels = tuple(int(l) for l in self.levels)
        if self.strides is None:
            if self.t_lat not in STRIDES_FOR_TLAT:
                raise ValueError(f"no default stride schedule for t_lat={self.t_lat}; pass strides")
            self.strides = STRIDES_FOR_TLAT[self.t_lat]
        self.strides = tuple(int(s) for s in self.strides)
        self.heads = tuple(h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads)
        self.validate()

    @property
    def in_channels(self) -> int:
        return N_BANDS + self.n_static

    @property
    def fsq(self) -> FsqSpec:
        return FsqSpec(self.levels)

    def validate(self) -> None:
        if self.padded_len < N_DAYS:
            raise ValueError("padded_len must be >= 365")
        prod = int(np.prod(self.strides))
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be >= 1")
        if self.padded_len % prod or self.padded_len // prod != self.t_lat:
            raise ValueError(f"padded_len {self.padded_len} / prod(strides {self.strides}) must equal t_lat {self.t_lat}")
        if self.n_res < 0 or self.hidden < 1:
            raise ValueError("n_res must be >= 0 and hidden >= 1")
        FsqSpec(self.levels)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["heads"] = [asdict(h) for h in self.heads]
        d["strides"] = list(self.strides)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        if "heads" in d:
            d["heads"] = tuple(HeadSpec(**h) for h in d["heads"])
        return cls(**d)


def month_matrix(t_lat: int) -> np.ndarray:
    """[12, t_lat] weights mapping latent steps onto calendar months.

    Weight = overlap of the month's and the step's fraction of the year,
    normalised per month. Identity when ``t_lat == 12``.
    """
    edges_m = np.concatenate([[0.0], np.cumsum(MONTH_LENGTHS)]) / N_DAYS
    if t_lat == 12:
        return np.eye(12)
    edges_t = np.linspace(0.0, 1.0, t_lat + 1)
    W = np.zeros((12, t_lat))
    for m in range(12):
        for t in range(t_lat):
            W[m, t] = max(0.0, min(edges_m[m + 1], edges_t[t + 1]) - max(edges_m[m], edges_t[t]))
    return W / W.sum(axis=1, keepdims=True)


@dataclass
class Linear:
    in_features: int
    out_features: int
    weight: Tensor = field(default=None, repr=False)
    bias: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight is None:
            self.weight = Tensor(np.zeros((self.in_features, self.out_features)), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_features), requires_grad=True)

    def init(self, rng: np.random.Generator) -> "Linear":
        b = np.sqrt(1.0 / self.in_features)
        self.weight.data[...] = rng.uniform(-b, b, self.weight.shape)
        self.bias.data[...] = rng.uniform(-b, b, self.bias.shape)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def prepare_input(reflectance: np.ndarray, static: np.ndarray | None, n_static: int) -> np.ndarray:
    """Stack bands and time-constant statics into ``[B, 6+S, 365]``."""
    x = np.asarray(reflectance, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != N_BANDS:
        raise ShapeError(f"reflectance must be [B, days, 6], got {np.shape(reflectance)}")
    if x.shape[1] == N_DAYS + 1:  # leap year: drop day 366
        x = x[:, :N_DAYS]
    if x.shape[1] != N_DAYS:
        raise ShapeError(f"reflectance must span 365 days, got {x.shape[1]}")
    B = x.shape[0]
    s = np.zeros((B, 0)) if static is None else np.asarray(static, dtype=np.float64).reshape(B, -1)
    if s.shape[1] != n_static:
        raise ShapeError(f"expected {n_static} static covariates, got {s.shape[1]}")
    chans = np.concatenate([x.transpose(0, 2, 1), np.repeat(s[:, :, None], N_DAYS, axis=2)], axis=1)
    return chans


class ESDNet:
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        k, p = cfg.kernel_size, cfg.kernel_size // 2
        self.spec = cfg.fsq
        self.down: list[Conv1dLayer] = []
        c_in = cfg.in_channels
        for s in cfg.strides:
            self.down.append(Conv1dLayer(c_in, cfg.hidden, k, s, p).init(rng))
            c_in = cfg.hidden
        self.enc_res = [ResidualBlock(cfg.hidden, cfg.res_kernel).init(rng) for _ in range(cfg.n_res)]
        self.to_latent = Conv1dLayer(cfg.hidden, self.spec.dim, 1).init(rng)

        self.from_latent = Conv1dLayer(self.spec.dim, cfg.hidden, 1).init(rng)
        self.dec_res = [ResidualBlock(cfg.hidden, cfg.res_kernel).init(rng) for _ in range(cfg.n_res)]
        self.up: list[ConvTranspose1dLayer] = []
        rev = list(reversed(cfg.strides))
        for i, s in enumerate(rev):
            c_out = N_BANDS if i == len(rev) - 1 else cfg.hidden
            self.up.append(ConvTranspose1dLayer(cfg.hidden, c_out, k, s, p, output_padding=self._output_padding(s)).init(rng))

        self.heads = {h.name: Linear(self.spec.dim, h.n_out).init(rng) for h in cfg.heads}
        self.head_specs = {h.name: h for h in cfg.heads}
        self._months = month_matrix(cfg.t_lat)
        self._check_lengths()

    def _output_padding(self, s: int) -> int:
        # conv (k, pad=k//2, stride s) maps T -> T/s; transpose maps T/s -> T - s + 1 + op
        k = self.config.kernel_size
        return s - 1 if k % 2 else s

    def _check_lengths(self) -> None:
        T = self.config.padded_len
        for layer in self.down:
            T = layer.out_length(T)
        if T != self.config.t_lat:
            raise ValueError(f"encoder produces {T} steps, expected {self.config.t_lat}")
        for layer in self.up:
            T = layer.out_length(T)
        if T != self.config.padded_len:
            raise ValueError(f"decoder restores {T} steps, expected {self.config.padded_len}")

    # -- parameters -------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, mod):
            for k, v in mod.parameters().items():
                out[f"{prefix}.{k}"] = v

        for i, l in enumerate(self.down):
            put(f"enc.down{i}", l)
        for i, b in enumerate(self.enc_res):
            put(f"enc.res{i}", b)
        put("enc.proj", self.to_latent)
        put("dec.proj", self.from_latent)
        for i, b in enumerate(self.dec_res):
            put(f"dec.res{i}", b)
        for i, l in enumerate(self.up):
            put(f"dec.up{i}", l)
        for name, h in self.heads.items():
            put(f"head.{name}", h)
        return out

    def head_parameter_names(self) -> list[str]:
        return [k for k in self.parameters() if k.startswith("head.")]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data[...] = arr

    def to_checkpoint(self) -> bytes:
        return save_checkpoint(self.parameters())

    def manifest(self) -> str:
        return json.dumps({"format": "ESDC", "model_config": self.config.to_dict()}, indent=2, sort_keys=True)

    @classmethod
    def from_files(cls, checkpoint: bytes, manifest: str) -> "ESDNet":
        cfg = ModelConfig.from_dict(json.loads(manifest)["model_config"])
        model = cls(cfg)
        model.load_state_dict(load_checkpoint(checkpoint))
        return model

    # -- graph pieces -----------------------------------------------------
    def encode_latent(self, x: Tensor) -> Tensor:
        """``[B, 6+S, 365]`` -> pre-quantization latent ``[B, d, T_lat]``."""
        h = pad_replicate(x, self.config.padded_len - N_DAYS)
        for layer in self.down:
            h = relu(layer(h))
        for blk in self.enc_res:
            h = blk(h)
        return self.to_latent(h)

    def decode_latent(self, q: Tensor) -> Tensor:
        """Normalised quantized latent ``[B, d, T_lat]`` -> reflectance ``[B, 365, 6]`` (unclamped)."""
        h = relu(self.from_latent(q))
        for blk in self.dec_res:
            h = blk(h)
        for i, layer in enumerate(self.up):
            h = layer(h)
            if i < len(self.up) - 1:
                h = relu(h)
        return transpose(h[:, :, :N_DAYS], (0, 2, 1))

    def apply_heads(self, q: Tensor, which: list[str] | None = None) -> dict[str, Tensor]:
        pooled = temporal_average_pool(q)  # [B, d]
        steps = transpose(q, (0, 2, 1))  # [B, T, d]
        out: dict[str, Tensor] = {}
        for name, head in self.heads.items():
            if which is not None and name not in which:
                continue
            spec = self.head_specs[name]
            if spec.kind == "pooled":
                out[name] = head(pooled)
            else:
                per_step = head(steps)  # [B, T, n]
                monthly = matmul(as_tensor(self._months), per_step)  # [B, 12, n]
                out[name] = monthly[:, :, 0] if spec.n_out == 1 else monthly
        return out

    def forward(self, reflectance, static=None, heads: bool | list[str] = True, fsq_offset: np.ndarray | None = None):
        """Full multitask pass. Returns a dict with ``reconstruction``, ``latent``,
        ``quantized``, ``pooled`` and one entry per head (``heads`` selects)."""
        x = Tensor(prepare_input(reflectance, static, self.config.n_static))
        z = self.encode_latent(x)
        q = fsqmod.quantize_ste(z, self.spec, axis=1, offset=fsq_offset)
        out = {"latent": z, "quantized": q, "reconstruction": self.decode_latent(q)}
        out["pooled"] = temporal_average_pool(q)
        if heads:
            out.update(self.apply_heads(q, None if heads is True else list(heads)))
        return out

    # -- inference --------------------------------------------------------
    def latent(self, reflectance, static=None) -> np.ndarray:
        with no_grad():
            x = Tensor(prepare_input(reflectance, static, self.config.n_static))
            return self.encode_latent(x).data

    def encode(self, reflectance, static=None) -> np.ndarray:
        """``[B, 365, 6]`` -> ``[B, T_lat]`` uint16 codes."""
        z = self.latent(reflectance, static)
        digits = fsqmod.quantize(z, self.spec, axis=1)
        return fsqmod.pack_code(digits, self.spec, axis=1)

    def codes_to_quantized(self, codes) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.ndim == 1:
            codes = codes[None]
        if codes.shape[1] != self.config.t_lat:
            raise ShapeError(f"expected {self.config.t_lat} codes per pixel, got {codes.shape[1]}")
        digits = fsqmod.unpack_code(codes, self.spec, axis=1)  # [B, d, T]
        return fsqmod.dequantize(digits, self.spec, axis=1)

    def decode(self, codes) -> np.ndarray:
        """``[B, T_lat]`` codes -> ``[B, 365, 6]`` reflectance clamped to [0, 1]."""
        q = self.codes_to_quantized(codes)
        with no_grad():
            x = self.decode_latent(Tensor(q)).data
        return np.clip(x, 0.0, 1.0)

    def reconstruct(self, reflectance, static=None) -> np.ndarray:
        return self.decode(self.encode(reflectance, static))
