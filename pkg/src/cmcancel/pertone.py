"""Per-tone CM canceller: coefficient estimation, cancellation, the analytic
per-tone coupling for white CM noise, and the per-tone lower bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import WindowGeometry, as_taps, dft_real
from .scene import AutocorrSequence, Scene, SymbolStream, frame_simulation, simulate_batches

DEAD_TONE = 1e-30


@dataclass(frozen=True)
class ToneStats:
    """Per-tone second-order statistics, all arrays of length P.

    Powers are frequency-domain (``E|.|^2`` of DFT bins), so time-domain AWGN
    of variance ``s`` shows up here as ``P * s``.
    """

    I_cm: np.ndarray
    I_dm: np.ndarray
    I_U: np.ndarray
    delta: np.ndarray
    sigma2_vc: np.ndarray
    sigma2_vd: np.ndarray
    H_pertone: np.ndarray

    def __post_init__(self):
        for name in ("I_cm", "I_dm", "I_U", "delta", "sigma2_vc", "sigma2_vd"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"ToneStats.{name} must be non-negative")
        if np.any(self.I_U > self.I_dm * (1 + 1e-9) + 1e-300):
            raise ValueError("ToneStats requires I_U <= I_dm")

    @property
    def P(self) -> int:
        return self.I_cm.size

    def with_I_U(self, I_U) -> "ToneStats":
        return ToneStats(self.I_cm, self.I_dm, np.broadcast_to(np.asarray(I_U, float), self.I_cm.shape).copy(),
                         self.delta, self.sigma2_vc, self.sigma2_vd, self.H_pertone)


def _ratio(num, den):
    den = np.asarray(den)
    safe = np.where(den < DEAD_TONE, 1.0, den)
    return np.where(den < DEAD_TONE, 0.0, num / safe)


class ToneAccumulator:
    """Running per-tone sums over any number of symbol streams.

    Lets training span more symbols than fit in memory at once; a single
    :meth:`add` reproduces :func:`estimate_beta` and :func:`measure_tone_stats`.
    """

    _KEYS = ("ee", "ec", "cc", "zz_c", "zz_d", "z_dc", "vv_c", "vv_d")

    def __init__(self, P: int):
        self.P = int(P)
        self.K = 0
        self.K_comp = 0
        self.sums = {k: np.zeros(self.P, dtype=complex if k in ("ec", "z_dc") else float) for k in self._KEYS}

    def add(self, stream: SymbolStream, H_d) -> "ToneAccumulator":
        if stream.P != self.P:
            raise ValueError(f"stream has P={stream.P}, accumulator expects {self.P}")
        s = self.sums
        E = stream.error(H_d)
        s["ee"] += np.sum(np.abs(E) ** 2, axis=0)
        s["ec"] += np.sum(E * np.conj(stream.Y_c), axis=0)
        s["cc"] += np.sum(np.abs(stream.Y_c) ** 2, axis=0)
        self.K += stream.K
        c = stream.components
        if c is not None:
            s["zz_c"] += np.sum(np.abs(c["Z_c"]) ** 2, axis=0)
            s["zz_d"] += np.sum(np.abs(c["Z_d"]) ** 2, axis=0)
            s["z_dc"] += np.sum(c["Z_d"] * np.conj(c["Z_c"]), axis=0)
            s["vv_c"] += np.sum(np.abs(c["V_c"]) ** 2, axis=0)
            s["vv_d"] += np.sum(np.abs(c["V_d"]) ** 2, axis=0)
            self.K_comp += stream.K
        return self

    def beta(self) -> np.ndarray:
        """Least-squares coefficients; tones with no CM energy get zero."""
        if self.K < 1:
            raise ValueError("cannot estimate coefficients from an empty stream")
        return _ratio(self.sums["ec"], self.sums["cc"])

    def residual_power(self, beta) -> np.ndarray:
        """Mean ``|E - beta Y_c|^2`` per tone over everything added so far."""
        if self.K < 1:
            raise ValueError("no symbols accumulated")
        s = self.sums
        beta = np.asarray(beta)
        val = s["ee"] - 2 * np.real(np.conj(beta) * s["ec"]) + np.abs(beta) ** 2 * s["cc"]
        return np.maximum(val, 0.0) / self.K

    def stats(self) -> ToneStats:
        if self.K_comp == 0:
            raise ValueError("stats require simulation-mode streams with separated components")
        if self.K_comp < 2:
            raise ValueError("tone statistics need at least 2 symbols")
        m = {k: v / self.K_comp for k, v in self.sums.items()}
        I_cm, I_dm, C = m["zz_c"], m["zz_d"], m["z_dc"]
        H = _ratio(C, I_cm)
        # sample mean of |Z_d - H Z_c|^2 for the projection coefficient H
        I_U = np.clip(I_dm - np.real(np.conj(H) * C), 0.0, I_dm)
        dead = I_cm < DEAD_TONE
        s_vc, s_vd = m["vv_c"], m["vv_d"]
        delta = np.where(dead, np.where(s_vc > 0, np.inf, 0.0), s_vc / np.where(dead, 1.0, I_cm))
        return ToneStats(I_cm, I_dm, I_U, delta, s_vc, s_vd, H)


def accumulate_scene(scene: Scene, n_symbols: int, seed=None, geom: WindowGeometry | None = None,
                     batch_symbols: int = 1000, keep_components: bool = True) -> ToneAccumulator:
    """Simulate ``scene`` in batches and accumulate its tone sums at ``geom``."""
    geom = scene.geom if geom is None else geom
    acc = ToneAccumulator(geom.P)
    for sim in simulate_batches(scene, n_symbols, seed, batch_symbols, keep_components):
        acc.add(frame_simulation(sim, geom, scene.cp_length), scene.H_d)
    return acc


def estimate_beta(stream: SymbolStream, H_d) -> np.ndarray:
    """Least-squares per-tone coefficients from a training stream.

    Trains on the data-stripped error ``Y_d - H_d X``; tones with no CM energy
    get a zero coefficient.
    """
    if stream.K < 1:
        raise ValueError("cannot estimate coefficients from an empty stream")
    return ToneAccumulator(stream.P).add(stream, H_d).beta()


def apply_canceller(Y_d, Y_c, beta) -> np.ndarray:
    """``Y_d - beta * Y_c`` tone by tone (broadcasts over leading symbol axes)."""
    Y_d, Y_c, beta = np.asarray(Y_d), np.asarray(Y_c), np.asarray(beta)
    if Y_d.shape != Y_c.shape or Y_d.shape[-1] != beta.shape[-1]:
        raise ValueError(f"length mismatch: Y_d {Y_d.shape}, Y_c {Y_c.shape}, beta {beta.shape}")
    return Y_d - beta * Y_c


def lemma_weights(L: int, geom: WindowGeometry) -> np.ndarray:
    """Weight ``1 - |k - T| / P`` applied to coupling tap ``k``."""
    k = np.arange(L)
    return 1.0 - np.abs(k - geom.T) / geom.P


def _layout_positions(L: int, geom: WindowGeometry) -> np.ndarray:
    return (np.arange(L) - geom.T) % geom.P


def cyclic_layout(h, geom: WindowGeometry) -> np.ndarray:
    """Length-P buffer holding tap ``k`` at position ``(k - T) mod P``.

    This is the time-domain per-tone response when the CM noise is cyclic.
    """
    h = as_taps(h)
    geom.require_lemma_regime(h.size)
    buf = np.zeros(geom.P)
    buf[_layout_positions(h.size, geom)] = h
    return buf


def lemma_forward(h, geom: WindowGeometry) -> np.ndarray:
    """Time-domain per-tone response for white WSS CM noise (length P)."""
    h = as_taps(h)
    geom.require_lemma_regime(h.size)
    buf = np.zeros(geom.P)
    buf[_layout_positions(h.size, geom)] = h * lemma_weights(h.size, geom)
    return buf


def lemma_inverse(h_pertone, geom: WindowGeometry, L: int) -> np.ndarray:
    """Recover the L coupling taps from a length-P per-tone response."""
    h_pertone = as_taps(h_pertone)
    if h_pertone.size != geom.P:
        raise ValueError(f"per-tone response must have P={geom.P} taps, got {h_pertone.size}")
    geom.require_lemma_regime(L)
    return h_pertone[_layout_positions(L, geom)] / lemma_weights(L, geom)


def analytic_H_pertone(h, geom: WindowGeometry) -> np.ndarray:
    """Per-tone coupling coefficients for white WSS CM noise, summed directly.

    ``H(q) = sum_k h(k) (1 - |k-T|/P) W_P^((k-T) q)`` over the L taps.
    """
    h = as_taps(h)
    geom.require_lemma_regime(h.size)
    P = geom.P
    w = h * lemma_weights(h.size, geom)
    kernel = np.exp(-2j * np.pi * np.arange(P) / P)
    q = np.arange(P)
    H = np.zeros(P, dtype=complex)
    for k in np.flatnonzero(w):
        H += w[k] * kernel[((k - geom.T) * q) % P]
    return H


def coupling_from_coeffs(beta, delta) -> np.ndarray:
    """Undo the CM-background shrinkage: ``beta * (1 + delta)``."""
    beta, delta = np.asarray(beta), np.asarray(delta)
    if delta.ndim and delta.shape != beta.shape:
        raise ValueError(f"length mismatch: beta {beta.shape}, delta {delta.shape}")
    return beta * (1.0 + delta)


def _shrink(delta):
    """``(delta/(1+delta), 1/(1+delta))`` with infinite delta handled."""
    delta = np.asarray(delta, dtype=float)
    inf = np.isinf(delta)
    d = np.where(inf, 0.0, delta)
    return np.where(inf, 1.0, d / (1 + d)), np.where(inf, 0.0, 1 / (1 + d))


def ptlb(stats: ToneStats) -> np.ndarray:
    """Per-tone lower bound on the post-cancellation residual power.

    ``I_dm (d/(1+d))^2 + I_U + s_vd + |H|^2 s_vc / (1+d)^2``.
    """
    frac, inv = _shrink(stats.delta)
    return (stats.I_dm * frac**2 + stats.I_U + stats.sigma2_vd
            + np.abs(stats.H_pertone) ** 2 * inv**2 * stats.sigma2_vc)


def pertone_residual_power(beta, stats: ToneStats) -> np.ndarray:
    """Expected residual power of coefficients ``beta`` under ``stats``.

    Exact for the true (expected) statistics; the minimum over ``beta`` is
    ``|H|^2 I_cm d/(1+d) + I_U + s_vd``, reached at ``H/(1+d)``.
    """
    beta = np.asarray(beta)
    frac, inv = _shrink(stats.delta)
    floor = np.abs(stats.H_pertone) ** 2 * stats.I_cm * frac + stats.I_U + stats.sigma2_vd
    excess = np.abs(beta - stats.H_pertone * inv) ** 2 * (stats.I_cm + stats.sigma2_vc)
    return floor + excess


def measure_tone_stats(stream: SymbolStream) -> ToneStats:
    """Sample-average tone statistics from a component-separated stream."""
    if stream.components is None:
        raise ValueError("stats require simulation-mode streams with separated components")
    if stream.K < 2:
        raise ValueError("tone statistics need at least 2 symbols")
    return ToneAccumulator(stream.P).add(stream, np.zeros(stream.P)).stats()


def _lag_weighted_dft(values: np.ndarray, first_lag: int, P: int) -> np.ndarray:
    """``sum_m (P - |m|) c(m) W_P^(m q)`` for a sequence starting at lag ``first_lag``.

    That is ``E{A(q) B*(q)}`` for two length-P windows of jointly stationary
    signals with cross-correlation ``c(m) = E{a(n) b(n-m)}``.
    """
    m = first_lag + np.arange(values.size)
    weight = np.clip(P - np.abs(m), 0, None)
    acc = np.bincount(m % P, weights=weight * values.real, minlength=P).astype(complex)
    if np.iscomplexobj(values):
        acc += 1j * np.bincount(m % P, weights=weight * values.imag, minlength=P)
    return np.fft.fft(acc)


def expected_tone_stats(h, geom: WindowGeometry, acf: AutocorrSequence,
                        sigma2_vc: float = 0.0, sigma2_vd: float = 0.0) -> ToneStats:
    """Exact tone statistics for WSS CM noise with autocorrelation ``acf``.

    Computed from stationarity alone, so it is an independent route
    to the per-tone coupling; for white noise ``H_pertone`` must agree with
    :func:`analytic_H_pertone`.  ``sigma2_vc``/``sigma2_vd`` are time-domain
    variances.
    """
    h = as_taps(h)
    P, T = geom.P, geom.T
    R = min(acf.maxlag, P - 1)
    r_full = acf.lag(np.arange(-R, R + 1))
    I_cm = _lag_weighted_dft(r_full, -R, P).real
    # E{z_d(n) z_c(n - m - T)} = sum_k h(k) r(m - k + T); conv index j = m + T
    cross = np.convolve(h, r_full)
    C = _lag_weighted_dft(cross, -R - T, P)
    hh = np.correlate(h, h, mode="full")
    I_dm = _lag_weighted_dft(np.convolve(hh, r_full), -(h.size - 1) - R, P).real
    H = _ratio(C, I_cm)
    I_U = np.clip(I_dm - np.abs(C) ** 2 / np.where(I_cm < DEAD_TONE, 1.0, I_cm), 0.0, None)
    I_U = np.minimum(I_U, I_dm)
    s_vc = np.full(P, P * float(sigma2_vc))
    s_vd = np.full(P, P * float(sigma2_vd))
    return ToneStats(I_cm, I_dm, I_U, s_vc / I_cm, s_vc, s_vd, H)


def pertone_coeffs(h, geom: WindowGeometry, delta=0.0) -> np.ndarray:
    """Coefficients implied by a known coupling: weighted layout shrunk by ``1+delta``."""
    _, inv = _shrink(delta)
    return dft_real(lemma_forward(h, geom)) * inv
