"""Daubechies-4-tap (db2) wavelet transform on 2D images.

Separable single- and two-level DWT/IDWT with symmetric boundary extension.
Subbands are slightly longer than half the input (the usual price of
symmetric extension with an orthogonal filter); original lengths ride along
so reconstruction crops back exactly.
"""

from __future__ import annotations

import numpy as np

_SQRT3 = np.sqrt(3.0)
_NORM = 4.0 * np.sqrt(2.0)

# reconstruction lowpass; the other three follow by reversal / QMF
REC_LO = np.array([(1 + _SQRT3), (3 + _SQRT3), (3 - _SQRT3), (1 - _SQRT3)]) / _NORM
DEC_LO = REC_LO[::-1].copy()
DEC_HI = np.array([-REC_LO[3], REC_LO[2], -REC_LO[1], REC_LO[0]])[::-1].copy()
REC_HI = DEC_HI[::-1].copy()
_F = 4  # filter length


def _dwt1d(x: np.ndarray, axis: int):
    """One analysis level along `axis` with symmetric (half-sample) extension."""
    n = x.shape[axis]
    if n < _F:
        raise ValueError(f"signal of length {n} is shorter than the filter")
    head = np.flip(np.take(x, np.arange(_F - 1), axis=axis), axis=axis)
    tail = np.flip(np.take(x, np.arange(n - _F + 1, n), axis=axis), axis=axis)
    ext = np.concatenate([head, x, tail], axis=axis)
    lo = np.apply_along_axis(np.convolve, axis, ext, DEC_LO, "valid")
    hi = np.apply_along_axis(np.convolve, axis, ext, DEC_HI, "valid")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(1, None, 2)
    return lo[tuple(sl)], hi[tuple(sl)]


def _idwt1d(lo: np.ndarray, hi: np.ndarray, n: int, axis: int):
    """Inverse of :func:`_dwt1d`, cropped to the original length `n`."""
    shape = list(lo.shape)
    shape[axis] = 2 * shape[axis] - 1
    up_lo = np.zeros(shape)
    up_hi = np.zeros(shape)
    sl = [slice(None)] * lo.ndim
    sl[axis] = slice(0, None, 2)
    up_lo[tuple(sl)] = lo
    up_hi[tuple(sl)] = hi
    full = np.apply_along_axis(np.convolve, axis, up_lo, REC_LO, "full") \
        + np.apply_along_axis(np.convolve, axis, up_hi, REC_HI, "full")
    crop = [slice(None)] * lo.ndim
    crop[axis] = slice(_F - 2, _F - 2 + n)
    return full[tuple(crop)]


def dwt2(image: np.ndarray):
    """One 2D level: returns (LL, (LH, HL, HH), original_shape)."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = _dwt1d(a, axis=0)
    ll, lh = _dwt1d(lo, axis=1)
    hl, hh = _dwt1d(hi, axis=1)
    return ll, (lh, hl, hh), a.shape


def idwt2(ll, details, shape):
    lh, hl, hh = details
    lo = _idwt1d(ll, lh, shape[1], axis=1)
    hi = _idwt1d(hl, hh, shape[1], axis=1)
    return _idwt1d(lo, hi, shape[0], axis=0)


def wavedec2(image: np.ndarray, levels: int = 2):
    """Multilevel decomposition: (LL_deep, [details_deep..details_fine],
    [shapes deep..fine])."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    ll = np.asarray(image, dtype=np.float64)
    detail_stack, shapes = [], []
    for _ in range(levels):
        ll, details, shape = dwt2(ll)
        detail_stack.append(details)
        shapes.append(shape)
    return ll, detail_stack[::-1], shapes[::-1]


def waverec2(ll, detail_stack, shapes):
    for details, shape in zip(detail_stack, shapes):
        ll = idwt2(ll, details, shape)
    return ll
