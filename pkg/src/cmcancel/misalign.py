"""Uncancellable energy of the per-tone model and its minimisation over the
CM/DM window misalignment."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz
from scipy.signal import fftconvolve

from .dsp import TimeBlock, WindowGeometry, as_taps, convolve_cyclic, dft_real, extract_window, idft_real
from .pertone import (_shrink, analytic_H_pertone, coupling_from_coeffs, cyclic_layout, estimate_beta,
                      expected_tone_stats, lemma_forward, lemma_inverse)
from .scene import AutocorrSequence, NoiseModel, SymbolStream, _seed_sequence, generate_noise

MC_BATCH = 128


class PipelineError(RuntimeError):
    """A post-training adjustment stage could not proceed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _check_history(z_c: TimeBlock, L: int, P: int):
    if z_c.start_index > -(L - 1) or z_c.stop_index < P:
        raise ValueError(
            f"z_c must cover indices [{-(L - 1)}, {P - 1}], got "
            f"[{z_c.start_index}, {z_c.stop_index - 1}]"
        )


def uncancellable_signal(z_c: TimeBlock, h, geom: WindowGeometry) -> TimeBlock:
    """Part of the DM alien noise in the DM window that the cyclic model misses.

    Nonzero only on ``n <= L-T-2`` (noise entering before the CM window) and
    ``n >= P-T`` (noise after it).
    """
    h = as_taps(h)
    L, P, T = h.size, geom.P, geom.T
    if not 0 <= T < L:
        raise ValueError(f"uncancellable signal needs 0 <= T < L (T={T}, L={L})")
    _check_history(z_c, L, P)
    d = np.zeros(P)
    for n in range(0, L - T - 1):
        k = np.arange(T + 1, L - n)
        d[n] = np.dot(z_c_vals(z_c, -k) - z_c_vals(z_c, P - k), h[k + n])
    for n in range(max(P - T, 0), P):
        k = np.arange(0, n - (P - T) + 1)
        d[n] = np.dot(z_c_vals(z_c, n - k) - z_c_vals(z_c, n - k - P), h[k])
    return TimeBlock(d, 0)


def z_c_vals(z_c: TimeBlock, idx) -> np.ndarray:
    """Samples at absolute indices ``idx``."""
    return z_c.samples[np.asarray(idx) - z_c.start_index]


def residual_signal(z_c: TimeBlock, h, h_pertone_time, geom: WindowGeometry) -> TimeBlock:
    """Time-domain residual left by per-tone coefficients ``h_pertone_time``.

    ``d(n)`` plus the cyclic convolution of the CM window with the gap between
    the cyclic layout of ``h`` and ``h_pertone_time``.
    """
    h = as_taps(h)
    h_pt = as_taps(h_pertone_time)
    if h_pt.size != geom.P:
        raise ValueError(f"per-tone response must have P={geom.P} taps, got {h_pt.size}")
    d = uncancellable_signal(z_c, h, geom)
    block = extract_window(z_c, -geom.T, geom.P)
    gap = convolve_cyclic(cyclic_layout(h, geom) - h_pt, block, geom.P).samples
    return TimeBlock(d.samples + gap, 0)


@dataclass(frozen=True)
class XiBreakdown:
    """Uncancellable energy per symbol and its per-window contributions.

    ``start_terms[m-1]`` is the quadratic form of the tail ``h(T+m..L-1)``
    (m = 1..L-T-1); ``end_terms[t]`` that of the head ``h(0..t)`` (t = 0..T-1).
    ``xi_total == 2 * (start_terms.sum() + end_terms.sum())``.
    """

    xi_total: float
    start_terms: np.ndarray
    end_terms: np.ndarray
    T: int


def _edge_kernel(acf: AutocorrSequence, P: int, L: int) -> np.ndarray:
    """``r(D) - (r(P-D) + r(P+D)) / 2`` for D = 0..L-1."""
    D = np.arange(L)
    return acf.lag(D) - 0.5 * (acf.lag(P - D) + acf.lag(P + D))


def _window_quadratics(h: np.ndarray, kappa: np.ndarray):
    """Quadratic forms of every suffix ``h[a:]`` and prefix ``h[:t+1]``."""
    L = h.size
    diag = kappa[0] * h**2
    if np.any(kappa[1:]):
        k1 = kappa.copy()
        k1[0] = 0.0
        c_suf = np.convolve(h, k1[::-1])[L - 1:2 * L - 1]
        c_pre = np.convolve(h, k1)[:L]
        suf_terms = diag + 2 * h * c_suf
        pre_terms = diag + 2 * h * c_pre
    else:
        suf_terms = pre_terms = diag
    q_suf = np.cumsum(suf_terms[::-1])[::-1]
    q_pre = np.cumsum(pre_terms)
    return q_suf, q_pre


def xi_curve(h, acf: AutocorrSequence, P: int) -> np.ndarray:
    """Analytic uncancellable energy for every misalignment T = 0..L-1."""
    h = as_taps(h)
    L = h.size
    if L > P:
        raise ValueError(f"coupling longer than the DFT (L={L}, P={P})")
    q_suf, q_pre = _window_quadratics(h, _edge_kernel(acf, P, L))
    tail = np.concatenate([np.cumsum(q_suf[::-1])[::-1][1:], [0.0]])  # sum over a > T
    head = np.concatenate([[0.0], np.cumsum(q_pre)[:-1]])  # sum over t < T
    return 2.0 * (tail + head)


def xi_analytic(h, geom: WindowGeometry, acf: AutocorrSequence, method: str = "fast") -> XiBreakdown:
    """Uncancellable energy per DMT symbol at misalignment ``geom.T``.

    ``method="matrix"`` builds the explicit Toeplitz autocorrelation matrices
    and their near-P counterparts for every window; ``"fast"`` uses running
    suffix/prefix quadratic forms (O(L) for white noise).  Autocorrelation lags
    beyond ``acf.maxlag`` count as zero, so the near-P terms vanish whenever
    ``maxlag < P - L``.
    """
    h = as_taps(h)
    L, P, T = h.size, geom.P, geom.T
    if not 0 <= T < L:
        raise ValueError(f"uncancellable energy needs 0 <= T < L (T={T}, L={L})")
    if method == "fast":
        q_suf, q_pre = _window_quadratics(h, _edge_kernel(acf, P, L))
        start = q_suf[T + 1:].copy()
        end = q_pre[:T].copy()
    elif method == "matrix":
        start = np.empty(L - T - 1)
        for m in range(1, L - T):
            v = h[T + m:]
            start[m - 1] = v @ (_R(acf, v.size) - _P(acf, P, v.size)) @ v
        end = np.empty(T)
        for t in range(T):
            v = h[:t + 1]
            end[t] = v @ (_R(acf, v.size) - _P(acf, P, v.size)) @ v
    else:
        raise ValueError(f"unknown method {method!r}")
    return XiBreakdown(2.0 * (start.sum() + end.sum()), start, end, T)


def _R(acf: AutocorrSequence, n: int) -> np.ndarray:
    return toeplitz(acf.lag(np.arange(n)))


def _P(acf: AutocorrSequence, P: int, n: int) -> np.ndarray:
    i = np.arange(n)
    return acf.lag(P + i[None, :] - i[:, None])


def xi_exact(h, geom: WindowGeometry, acf: AutocorrSequence, coeffs=None) -> float:
    """Expected residual energy per symbol left by per-tone ``coeffs``.

    Exact second-order evaluation from stationarity; ``coeffs`` defaults to the
    white-noise per-tone response, i.e. what a Monte-Carlo run of
    :func:`residual_signal` with :func:`lemma_forward` converges to.  The gap
    to :func:`xi_analytic` is the weighting-mismatch energy, O(L/P) relative.
    """
    h = as_taps(h)
    stats = expected_tone_stats(h, geom, acf)
    H = analytic_H_pertone(h, geom) if coeffs is None else np.asarray(coeffs)
    C = stats.H_pertone * stats.I_cm
    per_tone = stats.I_dm - 2 * np.real(np.conj(H) * C) + np.abs(H) ** 2 * stats.I_cm
    return float(np.sum(per_tone) / geom.P)


@dataclass
class RunningMoments:
    """Mergeable count/mean/M2 accumulator."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "RunningMoments":
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        return cls(x.size, mu, float(np.sum((x - mu) ** 2)))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        return RunningMoments(n, self.mean + delta * other.n / n,
                              self.m2 + other.m2 + delta**2 * self.n * other.n / n)

    @property
    def std_error(self) -> float:
        if self.n < 2:
            return float("nan")
        return float(np.sqrt(self.m2 / (self.n - 1) / self.n))


def _mc_batch(h, h_pt_f, geom, model, count, seed, cyclic):
    L, P, T = h.size, geom.P, geom.T
    B = P + L - 1
    rng = np.random.default_rng(seed)
    if cyclic:
        base = generate_noise(model, count * P, rng).samples.reshape(count, P)
        z = base[:, (np.arange(B) - (L - 1)) % P]
    else:
        z = generate_noise(model, count * B, rng, start_index=-(L - 1)).samples.reshape(count, B)
    zd = fftconvolve(z, h[None, :], mode="valid", axes=1)
    block = z[:, L - 1 - T:L - 1 - T + P]
    cyc = np.fft.irfft(np.fft.rfft(block, axis=1) * h_pt_f, n=P, axis=1)
    return RunningMoments.of(np.sum((zd - cyc) ** 2, axis=1))


def xi_monte_carlo(h, geom: WindowGeometry, model: NoiseModel, n_symbols: int, seed=None,
                   cyclic: bool = False, threads: int = 1) -> tuple[float, float]:
    """Mean and standard error of ``sum_n r(n)^2`` over independent symbols.

    Per-tone coefficients are the ones the estimator converges to for the
    chosen noise: the white-noise weighted layout, or the plain cyclic layout of
    ``h`` when ``cyclic`` makes the noise P-periodic.  Batches use fixed
    sub-seeds, so the result does not depend on ``threads``.
    """
    h = as_taps(h)
    if n_symbols < 100:
        raise ValueError("Monte-Carlo needs at least 100 symbols")
    geom.require_lemma_regime(h.size)
    h_pt = cyclic_layout(h, geom) if cyclic else lemma_forward(h, geom)
    h_pt_f = np.fft.rfft(h_pt)
    counts = [MC_BATCH] * (n_symbols // MC_BATCH)
    if n_symbols % MC_BATCH:
        counts.append(n_symbols % MC_BATCH)
    seeds = _seed_sequence(seed).spawn(len(counts))
    jobs = [(h, h_pt_f, geom, model, c, s, cyclic) for c, s in zip(counts, seeds)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda a: _mc_batch(*a), jobs))
    else:
        parts = [_mc_batch(*a) for a in jobs]
    acc = RunningMoments()
    for p in parts:
        acc = acc.merge(p)
    return acc.mean, acc.std_error


def find_t_opt(h, acf: AutocorrSequence, P: int, candidates=None) -> tuple[int, dict[int, float]]:
    """Exhaustive argmin of the analytic uncancellable energy over ``candidates``.

    Defaults to every T in ``[0, L-1]``; ties go to the smaller T.
    """
    h = as_taps(h)
    L = h.size
    cand = list(range(L)) if candidates is None else [int(t) for t in candidates]
    if not cand:
        raise ValueError("empty candidate range for the misalignment search")
    bad = [t for t in cand if not 0 <= t < L]
    if bad:
        raise ValueError(f"candidate misalignments must lie in [0, {L - 1}], got {bad[:5]}")
    curve = xi_curve(h, acf, P)
    xi_at = {t: float(curve[t]) for t in cand}
    best = min(sorted(xi_at), key=lambda t: xi_at[t])
    return best, xi_at


def energy_window(h_buf, energy_fraction: float) -> tuple[int, int]:
    """Shortest cyclic window holding ``energy_fraction`` of the energy.

    Returns ``(start, length)``; ties prefer more captured energy, then the
    smaller start.
    """
    h_buf = np.asarray(h_buf, dtype=float)
    if not 0 < energy_fraction < 1:
        raise ValueError("energy_fraction must lie strictly between 0 and 1")
    P = h_buf.size
    e = np.tile(h_buf**2, 2)
    cum = np.concatenate([[0.0], np.cumsum(e)])
    total = cum[P]
    if total <= 0:
        raise ValueError("response has no energy")
    need = energy_fraction * total * (1 - 1e-12)
    ends = np.searchsorted(cum, cum[:P] + need, side="left")
    lengths = ends - np.arange(P)
    captured = cum[ends] - cum[:P]
    order = np.lexsort((np.arange(P), -captured, lengths))
    s = int(order[0])
    return s, int(lengths[s])


@dataclass
class AdjustmentReport:
    """Outcome of the post-training window adjustment.

    ``L_hat`` is the length of the energy window; ``h_hat`` covers that window
    widened to include the training alignment, and ``T_trg``/``T_opt`` index
    into ``h_hat``.
    """

    T_trg: int
    L_hat: int
    h_hat: np.ndarray
    T_opt: int
    xi_at: dict[int, float]
    new_coeffs: np.ndarray
    old_coeffs: np.ndarray = field(repr=False)
    window_start: int = 0

    @property
    def shift(self) -> int:
        """Samples to move the CM window: ``T_opt - T_trg``."""
        return self.T_opt - self.T_trg

    @property
    def xi_before(self) -> float:
        return self.xi_at[self.T_trg]

    @property
    def xi_after(self) -> float:
        return self.xi_at[self.T_opt]

    @property
    def update_norm(self) -> float:
        """Relative size of the coefficient update."""
        ref = np.linalg.norm(self.old_coeffs)
        return float(np.linalg.norm(self.new_coeffs - self.old_coeffs) / (ref if ref > 0 else 1.0))


def adjust_from_coeffs(beta, delta, acf: AutocorrSequence, energy_fraction: float = 0.995) -> AdjustmentReport:
    """Adjustment pipeline starting from already trained per-tone coefficients."""
    beta = np.asarray(beta, dtype=complex)
    P = beta.size
    try:
        H_cd = coupling_from_coeffs(beta, delta)
    except ValueError as exc:
        raise PipelineError("coupling", str(exc)) from exc
    try:
        h_buf = idft_real(H_cd, rtol=1e-6).samples
    except ValueError as exc:
        raise PipelineError("idft", str(exc)) from exc
    try:
        start, L_hat = energy_window(h_buf, energy_fraction)
    except ValueError as exc:
        raise PipelineError("localize", str(exc)) from exc
    if L_hat >= P / 2:
        raise PipelineError(
            "localize",
            f"energy too diffuse: {energy_fraction:.4g} of the energy needs {L_hat} taps (>= P/2 = {P / 2:g})",
        )
    # Signed offsets k - T of the window; the recovered span is widened to
    # include offset 0 so the training alignment is a valid tap index.
    s0 = start - P if start >= P // 2 else start
    lo, hi = min(s0, 0), max(s0 + L_hat - 1, 0)
    T_trg = -lo
    try:
        h_hat = lemma_inverse(h_buf, WindowGeometry(P, T_trg), hi - lo + 1)
    except ValueError as exc:
        raise PipelineError("invert", str(exc)) from exc
    try:
        T_opt, xi_at = find_t_opt(h_hat, acf, P, range(h_hat.size))
    except ValueError as exc:
        raise PipelineError("optimize", str(exc)) from exc
    _, inv = _shrink(delta)
    new = dft_real(lemma_forward(h_hat, WindowGeometry(P, T_opt))) * inv
    return AdjustmentReport(T_trg, L_hat, h_hat, T_opt, xi_at, new, beta, start)


def post_training_adjust(stream: SymbolStream, H_d, delta, acf: AutocorrSequence,
                         energy_fraction: float = 0.995) -> AdjustmentReport:
    """Train at the current window, recover the coupling, and re-place the CM window."""
    try:
        beta = estimate_beta(stream, H_d)
    except ValueError as exc:
        raise PipelineError("estimate", str(exc)) from exc
    return adjust_from_coeffs(beta, delta, acf, energy_fraction)
