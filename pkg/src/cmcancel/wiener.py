"""Time-domain MMSE FIR canceller driven by the raw CM stream.

This is the reference the per-tone canceller is compared against.  The filter
taps ``w`` estimate the DM error from CM samples with ``delay`` samples of
lookahead::

    residual(n) = dm(n) - sum_k w(k) cm(n + delay - k)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .dsp import TimeBlock, as_taps, convolve_linear, dft_real
from .pertone import _lag_weighted_dft
from .scene import AutocorrSequence


@dataclass(frozen=True)
class WienerDesign:
    taps: np.ndarray
    delay: int
    regularization: float
    rows: tuple[int, int] = (0, -1)

    @property
    def n_taps(self) -> int:
        return self.taps.size


def default_layout(L: int) -> tuple[int, int]:
    """``(n_taps, delay)``: next power of two >= L, support centred on the coupling."""
    n_taps = 1 << max(int(L) - 1, 0).bit_length()
    return n_taps, (n_taps - L) // 2


def _valid_rows(cm: TimeBlock, dm: TimeBlock, n_taps: int, delay: int) -> tuple[int, int]:
    n0 = max(cm.start_index - delay + n_taps - 1, dm.start_index)
    n1 = min(cm.stop_index - 1 - delay, dm.stop_index - 1)
    return n0, n1


def _normal_equations(c: np.ndarray, e: np.ndarray, a: int, b: int, n_taps: int):
    """Exact ``X^T X`` and ``X^T e`` for regressor columns ``c[a-k .. b-k]``.

    Only the first row needs full dot products; the rest follows from the
    shift recursion ``R[j+1,k+1] = R[j,k] + c(a-1-j)c(a-1-k) - c(b-j)c(b-k)``.
    """
    u = c[a:b + 1]
    r0 = np.array([np.dot(u, c[a - d:b + 1 - d]) for d in range(n_taps)])
    p = np.array([np.dot(e, c[a - k:b + 1 - k]) for k in range(n_taps)])
    head = c[a - 1::-1][:2 * n_taps] if a >= 1 else np.zeros(0)
    head = np.concatenate([head, np.zeros(2 * n_taps - head.size)])
    tail = c[b::-1][:2 * n_taps]
    R = np.empty((n_taps, n_taps))
    for d in range(n_taps):
        m = n_taps - d
        step = head[:m - 1] * head[d:d + m - 1] - tail[:m - 1] * tail[d:d + m - 1]
        diag = r0[d] + np.concatenate([[0.0], np.cumsum(step)])
        idx = np.arange(m)
        R[idx, idx + d] = diag
        R[idx + d, idx] = diag
    return R, p


def design_wiener(cm: TimeBlock, dm_error: TimeBlock, n_taps: int, delay: int = 0,
                  reg: float | None = None, rows: tuple[int, int] | None = None) -> WienerDesign:
    """Regularised least-squares Wiener filter over the training record.

    ``reg`` is the diagonal loading on the row-normalised correlation matrix
    (default ``1e-8 * trace / n_taps``; pass 0 for none).  ``rows`` pins the
    absolute DM indices used for training; otherwise every index with full CM
    history and lookahead is used.
    """
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    if delay < 0:
        raise ValueError("delay must be >= 0")
    lo, hi = _valid_rows(cm, dm_error, n_taps, delay)
    if rows is not None:
        if rows[0] < lo or rows[1] > hi:
            raise ValueError(f"training rows {rows} exceed the available range [{lo}, {hi}]")
        lo, hi = rows
    n_rows = hi - lo + 1
    if n_rows < 4 * n_taps:
        raise ValueError(f"{n_rows} training samples are too few for {n_taps} taps (need >= {4 * n_taps})")
    c = cm.samples
    a = lo + delay - cm.start_index
    b = hi + delay - cm.start_index
    e = dm_error.samples[lo - dm_error.start_index:hi + 1 - dm_error.start_index]
    R, p = _normal_equations(c, e, a, b, n_taps)
    R /= n_rows
    p /= n_rows
    lam = 1e-8 * np.trace(R) / n_taps if reg is None else float(reg)
    if lam < 0:
        raise ValueError("regularization must be >= 0")
    A = R + lam * np.eye(n_taps)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            w = sla.solve(A, p, assume_a="pos")
    except (sla.LinAlgError, sla.LinAlgWarning) as exc:
        raise ValueError(
            f"CM correlation matrix is singular or ill-conditioned (reg={lam:.3g}); "
            f"add regularization or shorten the filter: {exc}"
        ) from exc
    resid = np.linalg.norm(A @ w - p)
    pn = np.linalg.norm(p)
    if pn > 0 and resid >= 1e-8 * pn:
        raise ValueError(f"normal equations not satisfied (relative residual {resid / pn:.3g})")
    return WienerDesign(w, int(delay), lam, (lo, hi))


def apply_wiener(design: WienerDesign, cm: TimeBlock, dm: TimeBlock) -> TimeBlock:
    """Residual over every DM index with full CM history and lookahead."""
    y = convolve_linear(design.taps, cm)
    lo = max(y.start_index - design.delay, dm.start_index)
    hi = min(y.stop_index - 1 - design.delay, dm.stop_index - 1)
    if hi < lo:
        raise ValueError("CM stream does not cover the filter history and lookahead for any DM sample")
    est = y.at(lo + design.delay, hi - lo + 1)
    return TimeBlock(dm.at(lo, hi - lo + 1) - est, lo)


def block_psd(residual: TimeBlock, P: int, cp_length: int, T: int = 0) -> tuple[np.ndarray, int]:
    """Average ``|DFT|^2`` over every complete symbol window inside ``residual``.

    Windows start at ``s * (P + cp_length) - T``; returns the per-tone PSD and
    the number of windows used.
    """
    step = P + cp_length
    s_lo = -((-(residual.start_index + T)) // step)
    s_hi = (residual.stop_index - P + T) // step
    if s_hi < s_lo:
        raise ValueError("no complete symbol window inside the residual")
    starts = np.arange(s_lo, s_hi + 1) * step - T - residual.start_index
    blocks = residual.samples[starts[:, None] + np.arange(P)]
    return np.mean(np.abs(dft_real(blocks)) ** 2, axis=0), starts.size


def expected_residual_psd(design: WienerDesign, h_cd, acf: AutocorrSequence, P: int,
                          sigma2_vc: float = 0.0, sigma2_vd: float = 0.0) -> np.ndarray:
    """Exact per-tone PSD of the framed residual for WSS CM noise."""
    h = as_taps(h_cd)
    w = design.taps
    D = design.delay
    # net filter acting on z_c, lags j = -D .. jmax
    jmax = max(h.size - 1, w.size - 1 - D)
    f = np.zeros(jmax + D + 1)
    f[D:D + h.size] += h
    f[:w.size] -= w
    R = min(acf.maxlag, P - 1)
    r_full = acf.lag(np.arange(-R, R + 1))
    ff = np.correlate(f, f, mode="full")
    psd = _lag_weighted_dft(np.convolve(ff, r_full), -(f.size - 1) - R, P).real
    if sigma2_vc:
        ww = np.correlate(w, w, mode="full")
        psd += sigma2_vc * _lag_weighted_dft(ww, -(w.size - 1), P).real
    return psd + P * sigma2_vd
