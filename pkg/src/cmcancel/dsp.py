"""Deterministic signal primitives shared by every other module.

Conventions used throughout the package:

* Forward DFT is unnormalised with kernel ``exp(-2j*pi*n*q/P)``; the inverse
  carries the ``1/P``.
* Time-domain blocks carry an absolute ``start_index`` measured from the DM
  DFT window origin ``n = 0``.  Negative indices are normal (the CM window
  leads the DM window by ``T`` samples).
* Spectra are plain complex ``numpy`` arrays of length ``P``; impulse
  responses are plain real 1-D arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

HERMITIAN_RTOL = 1e-9

# np.convolve is exact for trivial kernels; switch to overlap-add past this size
_DIRECT_CONV_LIMIT = 2**24


@dataclass(frozen=True)
class TimeBlock:
    """Real samples ``samples[i]`` located at absolute index ``start_index + i``."""

    samples: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("TimeBlock needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(s)):
            raise ValueError("TimeBlock samples must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "start_index", int(self.start_index))

    def __len__(self):
        return self.samples.size

    @property
    def stop_index(self) -> int:
        """One past the last absolute index."""
        return self.start_index + self.samples.size

    def at(self, start: int, length: int) -> np.ndarray:
        """Samples for absolute indices ``start .. start+length-1`` (a view)."""
        lo = start - self.start_index
        if lo < 0 or lo + length > self.samples.size:
            raise ValueError(
                f"window [{start}, {start + length - 1}] outside signal range "
                f"[{self.start_index}, {self.stop_index - 1}]"
            )
        return self.samples[lo:lo + length]


@dataclass(frozen=True)
class WindowGeometry:
    """DFT size ``P`` and CM lead ``T`` (CM window spans ``[-T, P-T-1]``)."""

    P: int
    T: int = 0

    def __post_init__(self):
        if int(self.P) != self.P or self.P < 2:
            raise ValueError(f"DFT size P must be an integer >= 2, got {self.P}")
        if int(self.T) != self.T or not 0 <= self.T < self.P:
            raise ValueError(f"misalignment T must satisfy 0 <= T < P, got T={self.T}, P={self.P}")
        object.__setattr__(self, "P", int(self.P))
        object.__setattr__(self, "T", int(self.T))

    def with_T(self, T: int) -> "WindowGeometry":
        return WindowGeometry(self.P, T)

    def require_lemma_regime(self, L: int) -> None:
        if not 0 <= self.T < L <= self.P:
            raise ValueError(
                "per-tone layout regime requires 0 <= T < L <= P "
                f"(got T={self.T}, L={L}, P={self.P})"
            )


def as_taps(h) -> np.ndarray:
    """Validate an impulse response and return it as a float array."""
    taps = np.asarray(h, dtype=float)
    if taps.ndim != 1 or taps.size < 1:
        raise ValueError("impulse response needs at least one tap")
    if not np.all(np.isfinite(taps)):
        raise ValueError("impulse response taps must be finite")
    return taps


def _as_block(x) -> TimeBlock:
    return x if isinstance(x, TimeBlock) else TimeBlock(x)


def dft_real(block, geom: WindowGeometry | int | None = None) -> np.ndarray:
    """Length-P DFT of a real block, Hermitian-symmetric by construction.

    ``geom`` (or an integer P) pins the expected size; a mismatch is an error.
    Also accepts a 2-D array of shape ``(K, P)`` and transforms each row.
    """
    x = block.samples if isinstance(block, TimeBlock) else np.asarray(block, dtype=float)
    P = x.shape[-1]
    if geom is not None:
        want = geom.P if isinstance(geom, WindowGeometry) else int(geom)
        if P != want:
            raise ValueError(f"dft_real expects exactly P={want} samples, got {P}")
    half = np.fft.rfft(x, axis=-1)
    # mirror the upper half so that X(P-q) == conj(X(q)) holds bit-exactly
    upper = np.conj(half[..., 1:(P + 1) // 2][..., ::-1])
    return np.concatenate([half, upper], axis=-1)


def is_hermitian(bins, rtol: float = HERMITIAN_RTOL) -> bool:
    X = np.asarray(bins)
    P = X.shape[-1]
    mirror = np.conj(X[..., (-np.arange(P)) % P])
    scale = max(float(np.max(np.abs(X), initial=0.0)), np.finfo(float).tiny)
    return bool(np.max(np.abs(X - mirror), initial=0.0) <= rtol * scale)


def idft_real(bins, rtol: float = HERMITIAN_RTOL) -> TimeBlock:
    """Inverse of :func:`dft_real`; rejects spectra that are not Hermitian."""
    X = np.asarray(bins, dtype=complex)
    if X.ndim != 1 or X.size < 2:
        raise ValueError("idft_real expects a 1-D spectrum with P >= 2 bins")
    if not is_hermitian(X, rtol):
        raise ValueError("spectrum is not Hermitian-symmetric; real inverse undefined")
    P = X.size
    return TimeBlock(np.fft.irfft(X[:P // 2 + 1], n=P), 0)


def extract_window(signal: TimeBlock, start: int, P: int) -> TimeBlock:
    """The P samples at absolute indices ``start .. start+P-1``."""
    return TimeBlock(signal.at(start, P), start)


def _linear(h: np.ndarray, x: np.ndarray, mode: str) -> np.ndarray:
    if h.size == 1:
        return h[0] * x
    if h.size * x.size <= _DIRECT_CONV_LIMIT:
        return np.convolve(x, h, mode=mode)
    return sps.oaconvolve(x, h, mode=mode)


def convolve_linear(h, x, mode: str = "valid") -> TimeBlock:
    """``y(n) = sum_k h(k) x(n-k)``.

    ``mode="valid"`` keeps only outputs whose full history lies inside ``x``
    (output starts at ``x.start_index + L - 1``); ``mode="full"`` treats ``x``
    as zero outside its range.
    """
    h = as_taps(h)
    x = _as_block(x)
    if mode == "valid":
        if h.size > len(x):
            raise ValueError("input shorter than the impulse response; no valid outputs")
        return TimeBlock(_linear(h, x.samples, "valid"), x.start_index + h.size - 1)
    if mode == "full":
        return TimeBlock(_linear(h, x.samples, "full"), x.start_index)
    raise ValueError(f"unknown convolution mode {mode!r}")


def convolve_cyclic(h, x, P: int | None = None) -> TimeBlock:
    """Circular convolution of a length-P block with ``h`` (``len(h) <= P``)."""
    h = as_taps(h)
    x = _as_block(x)
    P = len(x) if P is None else int(P)
    if len(x) != P:
        raise ValueError(f"cyclic convolution needs exactly P={P} input samples, got {len(x)}")
    if h.size > P:
        raise ValueError(f"cyclic convolution needs L <= P (L={h.size}, P={P})")
    xs = x.samples
    if h.size * P <= 1 << 20:
        y = np.zeros(P)
        for k in np.flatnonzero(h):
            y += h[k] * np.roll(xs, k)
    else:
        y = np.fft.irfft(np.fft.rfft(h, P) * np.fft.rfft(xs), n=P)
    return TimeBlock(y, x.start_index)
