"""Procedural texture bank.

48 deterministic textures (ids 0..47), six families with eight variants
each: checkerboards, stripe waves, value noise, triangle-wave gradients,
concentric rings, and polka dots.  Every texture maps (u, v) in [0, 1] to
an intensity in [0, 1], has positive variance, a unit-square mean inside
[0.2, 0.8], and tiles with period 1 in both axes (pattern edges excepted)
so planar surfaces can repeat it seamlessly.
"""

from __future__ import annotations

import numpy as np

from .errors import ParamError

TEXTURE_COUNT = 48
_FAMILIES = 6

CHECKER_IDS = tuple(range(0, TEXTURE_COUNT, _FAMILIES))


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        + iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        + np.uint64(salt * 0x165667B19E3779F9 & 0xFFFFFFFFFFFFFFFF)
    )
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smooth(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _checker(u, v, k):
    n = 2 + k
    a = 0.2 + 0.03 * k
    parity = (np.floor(u * n) + np.floor(v * n)) % 2.0
    return a + 0.45 * parity


def _stripes(u, v, k):
    kx = 1 + k
    ky = k % 3
    s = np.sin(2.0 * np.pi * (kx * u + ky * v))
    return 0.5 + 0.28 * s


def _value_noise(u, v, k, tex_id):
    n = 4 + k
    x = u * n
    y = v * n
    ix = np.floor(x)
    iy = np.floor(y)
    fx = _smooth(x - ix)
    fy = _smooth(y - iy)
    ix = ix.astype(np.int64) % n
    iy = iy.astype(np.int64) % n
    jx = (ix + 1) % n
    jy = (iy + 1) % n
    v00 = _hash01(ix, iy, tex_id)
    v10 = _hash01(jx, iy, tex_id)
    v01 = _hash01(ix, jy, tex_id)
    v11 = _hash01(jx, jy, tex_id)
    top = v00 + (v10 - v00) * fx
    bot = v01 + (v11 - v01) * fx
    return 0.25 + 0.5 * (top + (bot - top) * fy)


def _gradient(u, v, k):
    a = 1 + (k % 3)
    b = k // 3
    g = np.mod(u * a + v * b, 1.0)
    return 0.2 + 0.6 * (1.0 - np.abs(2.0 * g - 1.0))


def _rings(u, v, k):
    r = np.hypot(u - 0.5, v - 0.5)
    return 0.5 + 0.28 * np.cos(2.0 * np.pi * (3 + k) * r)


def _dots(u, v, k):
    n = 3 + (k % 4)
    r = 0.22 + 0.02 * (k % 4)
    cu = np.mod(u * n, 1.0) - 0.5
    cv = np.mod(v * n, 1.0) - 0.5
    inside = (cu * cu + cv * cv) < r * r
    hi = 0.62 + 0.02 * k
    lo = 0.25
    return np.where(inside, lo, hi)


def procedural_texture(tex_id: int, u, v) -> np.ndarray:
    """Sample texture tex_id at coordinates u, v (arrays or scalars)."""
    if not isinstance(tex_id, (int, np.integer)) or not (0 <= tex_id < TEXTURE_COUNT):
        raise ParamError(f"unknown texture id {tex_id!r}")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    family = tex_id % _FAMILIES
    k = tex_id // _FAMILIES
    if family == 0:
        out = _checker(u, v, k)
    elif family == 1:
        out = _stripes(u, v, k)
    elif family == 2:
        out = _value_noise(u, v, k, tex_id)
    elif family == 3:
        out = _gradient(u, v, k)
    elif family == 4:
        out = _rings(u, v, k)
    else:
        out = _dots(u, v, k)
    return np.clip(out, 0.0, 1.0)


def checker_period(tex_id: int) -> float:
    """Repeat period of a checker-family texture (two tiles per period)."""
    if tex_id % _FAMILIES != 0:
        raise ParamError(f"texture {tex_id} is not a checkerboard")
    return 2.0 / (2 + tex_id // _FAMILIES)
