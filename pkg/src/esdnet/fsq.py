"""Finite scalar quantization with an implicit mixed-radix codebook.

Each latent dimension ``i`` is squashed by a shifted, scaled ``tanh`` so that
rounding lands on exactly ``L_i`` integers. Digits ``0..L_i-1`` pack into one
unsigned 16-bit code::

    code = sum_i digit_i * prod_{j<i} L_j

There is no learned codebook and no commitment term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Tensor, add, mul, round_ste, tanh

MAX_CODEBOOK = 1 << 16
# widens the tanh range slightly so the outermost digits stay reachable for every L >= 2
_EPS = 1e-3

LEVELS_BY_CODEBOOK = {
    256: (4, 4, 4, 4),
    1024: (4, 4, 8, 8),
    4096: (8, 8, 8, 8),
    16384: (8, 8, 16, 16),
    65536: (16, 16, 16, 16),
}


@dataclass(frozen=True)
class FsqSpec:
    levels: tuple[int, ...] = (16, 16, 16, 16)
    _radix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        levels = tuple(int(l) for l in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValueError("FsqSpec needs at least one dimension")
        if any(l < 2 for l in levels):
            raise ValueError(f"every level count must be >= 2, got {levels}")
        if self.codebook_size > MAX_CODEBOOK:
            raise ValueError(f"codebook size {self.codebook_size} exceeds uint16 range ({MAX_CODEBOOK})")
        object.__setattr__(self, "_radix", np.cumprod((1,) + levels[:-1]).astype(np.int64))

    @classmethod
    def for_codebook(cls, size: int) -> "FsqSpec":
        try:
            return cls(LEVELS_BY_CODEBOOK[size])
        except KeyError:
            raise ValueError(f"no level decomposition registered for codebook size {size}") from None

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels, dtype=np.int64))

    @property
    def radix(self) -> np.ndarray:
        return self._radix

    def _arr(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)

    @property
    def half_width(self) -> np.ndarray:
        """(L-1)/2 per dimension: the centred-value half range."""
        return (self._arr() - 1.0) / 2.0

    @property
    def offset(self) -> np.ndarray:
        """0.5 for even levels, 0 for odd ones."""
        return np.where(np.asarray(self.levels) % 2 == 0, 0.5, 0.0)

    @property
    def shift(self) -> np.ndarray:
        return np.arctanh(self.offset / self._tanh_scale)

    @property
    def _tanh_scale(self) -> np.ndarray:
        return self.half_width * (1.0 + _EPS)


def _axis_shape(spec: FsqSpec, z_shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    axis = axis % len(z_shape)
    if z_shape[axis] != spec.dim:
        raise ValueError(f"latent dimension {z_shape[axis]} does not match FSQ dim {spec.dim} (shape {z_shape})")
    shape = [1] * len(z_shape)
    shape[axis] = spec.dim
    return tuple(shape)


# -- numpy value path -----------------------------------------------------
def bound(z, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    """Squash ``z`` so that ``round`` yields ``L_i`` distinct integers along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    shp = _axis_shape(spec, z.shape, axis)
    scale = spec._tanh_scale.reshape(shp)
    return np.tanh(z + spec.shift.reshape(shp)) * scale - spec.offset.reshape(shp)


def bound_jacobian(z, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    """Diagonal of d bound / d z (closed form)."""
    z = np.asarray(z, dtype=np.float64)
    shp = _axis_shape(spec, z.shape, axis)
    t = np.tanh(z + spec.shift.reshape(shp))
    return spec._tanh_scale.reshape(shp) * (1.0 - t * t)


def quantize(z, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    """Digits in ``[0, L_i - 1]`` for raw latents ``z``."""
    z = np.asarray(z, dtype=np.float64)
    shp = _axis_shape(spec, z.shape, axis)
    halves = (np.asarray(spec.levels) // 2).reshape(shp)
    return (np.round(bound(z, spec, axis)) + halves).astype(np.int64)


def dequantize(digits, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    """Digits -> centred values normalised into [-1, 1]."""
    d = np.asarray(digits, dtype=np.float64)
    shp = _axis_shape(spec, d.shape, axis)
    hw = spec.half_width.reshape(shp)
    return (d - hw) / hw


def quantize_normalized(values, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`dequantize`: snap normalised values back onto digits."""
    v = np.asarray(values, dtype=np.float64)
    shp = _axis_shape(spec, v.shape, axis)
    hw = spec.half_width.reshape(shp)
    lv = np.asarray(spec.levels).reshape(shp)
    return np.clip(np.round(v * hw + hw), 0, lv - 1).astype(np.int64)


def centered(digits, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    d = np.asarray(digits, dtype=np.float64)
    return d - spec.half_width.reshape(_axis_shape(spec, d.shape, axis))


def pack_code(digits, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    """Mixed-radix packing of digits along ``axis`` into uint16 codes."""
    d = np.moveaxis(np.asarray(digits, dtype=np.int64), axis, -1)
    if d.shape[-1] != spec.dim:
        raise ValueError(f"digit vector length {d.shape[-1]} does not match FSQ dim {spec.dim}")
    lv = np.asarray(spec.levels)
    if np.any(d < 0) or np.any(d >= lv):
        raise ValueError("digit outside [0, L_i) for this FSQ spec")
    return (d @ spec.radix).astype(np.uint16)


def unpack_code(codes, spec: FsqSpec, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`pack_code`; the digit axis is inserted at ``axis``."""
    c = np.asarray(codes, dtype=np.int64)
    if np.any(c < 0) or np.any(c >= spec.codebook_size):
        raise ValueError(f"code outside [0, {spec.codebook_size}) for levels {spec.levels}")
    lv = np.asarray(spec.levels)
    digits = (c[..., None] // spec.radix) % lv
    if axis in (-1, c.ndim):
        return digits
    return np.moveaxis(digits, -1, axis)


# -- tape path ------------------------------------------------------------
def quantize_ste(z: Tensor, spec: FsqSpec, axis: int = 1, offset: np.ndarray | None = None) -> Tensor:
    """Bound, round with a straight-through gradient, and normalise to [-1, 1].

    The returned tensor equals ``dequantize(quantize(z))``; its gradient is the
    Jacobian of :func:`bound` scaled by ``1 / half_width``. ``offset`` freezes the
    rounding residual (see :func:`tensor_core.round_ste`).
    """
    shp = _axis_shape(spec, z.shape, axis)
    b = add(mul(tanh(add(z, spec.shift.reshape(shp))), spec._tanh_scale.reshape(shp)), -spec.offset.reshape(shp))
    r = round_ste(b, offset)
    hw = spec.half_width.reshape(shp)
    # rounded bound lives on [-L//2, ...]; shift to centred digits then scale
    halves = (np.asarray(spec.levels) // 2).reshape(shp)
    return mul(add(r, halves - hw), 1.0 / hw)


def rounding_residual(z: np.ndarray, spec: FsqSpec, axis: int = 1) -> np.ndarray:
    b = bound(z, spec, axis)
    return np.round(b) - b
