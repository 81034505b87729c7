"""CM/DM link simulation: data through the direct channel, alien noise through
the CM-DM coupling, background AWGN on both sensors, and symbol framing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import toeplitz

from .dsp import TimeBlock, WindowGeometry, as_taps, convolve_linear, dft_real

NOISE_KINDS = ("white", "coloured", "rein-burst")


@dataclass(frozen=True)
class NoiseModel:
    """Statistics of the CM alien noise ``z_c(n)``.

    ``burst`` is ``(period, length, offset)`` in samples; a REIN sample at
    absolute index ``n`` is active when ``(n - offset) % period < length``.
    """

    kind: str = "white"
    sigma2: float = 1.0
    shaping: np.ndarray | None = None
    burst: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise ValueError(f"noise sigma2 must be finite and >= 0, got {self.sigma2}")
        if self.kind == "coloured":
            if self.shaping is None:
                raise ValueError("coloured noise needs a shaping response")
            object.__setattr__(self, "shaping", as_taps(self.shaping))
        elif self.shaping is not None:
            object.__setattr__(self, "shaping", as_taps(self.shaping))
        if self.kind == "rein-burst":
            if self.burst is None:
                raise ValueError("rein-burst noise needs burst=(period, length, offset)")
            period, length, offset = (int(v) for v in self.burst)
            if period < 1 or not 0 <= length <= period:
                raise ValueError(f"REIN burst needs period >= 1 and 0 <= length <= period, got {self.burst}")
            object.__setattr__(self, "burst", (period, length, offset))

    @property
    def is_wss(self) -> bool:
        return self.kind != "rein-burst"


@dataclass(frozen=True)
class AutocorrSequence:
    """``values[tau] = E{z(i) z(i+tau)}`` for ``tau = 0..maxlag``; zero beyond."""

    values: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.values, dtype=float)
        if r.ndim != 1 or r.size < 1 or not np.all(np.isfinite(r)):
            raise ValueError("autocorrelation must be a non-empty finite 1-D sequence")
        if r[0] <= 0:
            raise ValueError(f"autocorrelation needs r(0) > 0, got {r[0]}")
        if np.any(np.abs(r) > r[0] * (1 + 1e-12)):
            raise ValueError("autocorrelation violates |r(tau)| <= r(0)")
        n = min(r.size, 64)
        if np.linalg.eigvalsh(toeplitz(r[:n]))[0] < -1e-9 * r[0] * n:
            raise ValueError("autocorrelation Toeplitz matrix is not positive semidefinite")
        r.setflags(write=False)
        object.__setattr__(self, "values", r)

    @property
    def maxlag(self) -> int:
        return self.values.size - 1

    @property
    def is_white(self) -> bool:
        return not np.any(self.values[1:])

    def lag(self, tau) -> np.ndarray:
        """r at arbitrary integer lags (symmetric, zero past ``maxlag``)."""
        t = np.abs(np.asarray(tau, dtype=int))
        out = np.zeros(t.shape)
        ok = t <= self.maxlag
        out[ok] = self.values[t[ok]]
        return out

    @classmethod
    def white(cls, sigma2: float = 1.0) -> "AutocorrSequence":
        return cls(np.array([float(sigma2)]))


def generate_noise(model: NoiseModel, n_samples: int, seed=None, start_index: int = 0) -> TimeBlock:
    """Draw ``n_samples`` of ``z_c``; ``seed`` is anything ``default_rng`` accepts.

    ``start_index`` fixes the absolute position of the block, which sets the
    REIN burst phase.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    sd = np.sqrt(model.sigma2)
    if model.kind == "coloured":
        g = model.shaping
        w = sd * rng.standard_normal(n_samples + g.size - 1)
        z = np.convolve(w, g, mode="valid")
    else:
        z = sd * rng.standard_normal(n_samples)
        if model.kind == "rein-burst":
            period, length, offset = model.burst
            n = start_index + np.arange(n_samples)
            z[(n - offset) % period >= length] = 0.0
    return TimeBlock(z, start_index)


def autocorr_of(model: NoiseModel, maxlag: int) -> AutocorrSequence:
    """Exact autocorrelation of a WSS noise model up to ``maxlag``."""
    if not model.is_wss:
        raise ValueError("rein-burst noise is cyclostationary, not WSS; no autocorrelation")
    if maxlag < 0:
        raise ValueError("maxlag must be >= 0")
    r = np.zeros(maxlag + 1)
    if model.kind == "white":
        r[0] = model.sigma2
    else:
        g = model.shaping
        full = model.sigma2 * np.correlate(g, g, mode="full")[g.size - 1:]
        n = min(full.size, maxlag + 1)
        r[:n] = full[:n]
    return AutocorrSequence(r)


@dataclass(frozen=True)
class Scene:
    """Everything needed to simulate one link.

    Variances are time-domain per-sample powers; ``sigma2_x`` is the per-tone
    power of the transmitted constellation.  ``cyclic_noise`` replaces the
    alien noise by a P-periodic stream, which makes the per-tone model exact.
    """

    h_cd: np.ndarray
    geom: WindowGeometry
    cp_length: int
    noise: NoiseModel = field(default_factory=NoiseModel)
    h_d: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    sigma2_x: float = 0.0
    sigma2_vc: float = 0.0
    sigma2_vd: float = 0.0
    cyclic_noise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "h_cd", as_taps(self.h_cd))
        object.__setattr__(self, "h_d", as_taps(self.h_d))
        for name in ("sigma2_x", "sigma2_vc", "sigma2_vd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.cp_length < 0:
            raise ValueError("cp_length must be >= 0")
        if self.h_d.size > max(self.cp_length, 1):
            raise ValueError(
                f"direct channel (M={self.h_d.size}) must fit the cyclic prefix ({self.cp_length})"
            )
        if self.h_cd.size >= self.geom.P:
            raise ValueError(f"coupling length L={self.h_cd.size} must be < P={self.geom.P}")

    @property
    def L(self) -> int:
        return self.h_cd.size

    @property
    def H_d(self) -> np.ndarray:
        """Per-tone direct-channel coefficients."""
        return dft_real(np.pad(self.h_d, (0, self.geom.P - self.h_d.size)))

    @property
    def preroll(self) -> int:
        """Samples before the first DM window: ``max(L, T) + cp_length``."""
        return max(self.L, self.geom.T) + self.cp_length

    @property
    def symbol_length(self) -> int:
        return self.geom.P + self.cp_length


@dataclass
class Simulation:
    """Output of :func:`simulate`; unpacks as ``cm, dm, tx``.

    ``components`` (when kept) maps ``z_c, z_d, v_c, v_d`` to TimeBlocks aligned
    with ``cm``/``dm``; ``x`` is the transmitted time-domain stream.
    """

    cm: TimeBlock
    dm: TimeBlock
    tx: np.ndarray
    x: TimeBlock
    components: dict[str, TimeBlock] | None = None

    def __iter__(self):
        return iter((self.cm, self.dm, self.tx))


def random_symbols(P: int, n_symbols: int, sigma2_x: float, rng) -> np.ndarray:
    """Hermitian 4-phase spectra with per-tone power ``sigma2_x``.

    DC and Nyquist bins must stay real, so they carry +-1 instead.
    """
    X = np.zeros((n_symbols, P), dtype=complex)
    if sigma2_x == 0:
        return X
    half = (P + 1) // 2
    k = rng.integers(0, 4, size=(n_symbols, half - 1))
    X[:, 1:half] = np.exp(1j * (np.pi / 4 + np.pi / 2 * k))
    X[:, P - half + 1:] = np.conj(X[:, 1:half][:, ::-1])
    X[:, 0] = rng.choice([-1.0, 1.0], size=n_symbols)
    if P % 2 == 0:
        X[:, P // 2] = rng.choice([-1.0, 1.0], size=n_symbols)
    return np.sqrt(sigma2_x) * X


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def simulate(scene: Scene, n_symbols: int, seed=None, keep_components: bool = False) -> Simulation:
    """Generate CM and DM sample streams for ``n_symbols`` DMT symbols.

    Absolute index 0 is the first DM DFT window; symbol ``s`` has its window at
    ``s * (P + cp_length)`` with the prefix right before it.
    """
    if n_symbols < 1:
        raise ValueError("n_symbols must be >= 1")
    P, cp, L = scene.geom.P, scene.cp_length, scene.L
    s0 = -scene.preroll
    N = scene.preroll + n_symbols * scene.symbol_length - cp
    rng_x, rng_z, rng_vc, rng_vd = (np.random.default_rng(s) for s in _seed_sequence(seed).spawn(4))

    tx = random_symbols(P, n_symbols, scene.sigma2_x, rng_x)
    x = np.zeros(N)
    sym = np.fft.irfft(tx[:, :P // 2 + 1], n=P, axis=1)
    with_cp = np.concatenate([sym[:, P - cp:], sym], axis=1) if cp else sym
    body = with_cp.reshape(-1)
    x[scene.preroll - cp:scene.preroll - cp + body.size] = body

    zs = s0 - (L - 1)
    if scene.cyclic_noise:
        base = generate_noise(scene.noise, P, rng_z, start_index=0).samples
        z_c = TimeBlock(base[np.arange(zs, s0 + N) % P], zs)
    else:
        z_c = generate_noise(scene.noise, N + L - 1, rng_z, start_index=zs)
    z_d = convolve_linear(scene.h_cd, z_c)
    z_c = TimeBlock(z_c.samples[L - 1:], s0)
    v_c = np.sqrt(scene.sigma2_vc) * rng_vc.standard_normal(N)
    v_d = np.sqrt(scene.sigma2_vd) * rng_vd.standard_normal(N)

    data = convolve_linear(scene.h_d, x, mode="full").samples[:N]
    dm = TimeBlock(data + z_d.samples + v_d, s0)
    cm = TimeBlock(z_c.samples + v_c, s0)
    components = None
    if keep_components:
        components = {
            "z_c": z_c,
            "z_d": z_d,
            "v_c": TimeBlock(v_c, s0),
            "v_d": TimeBlock(v_d, s0),
        }
    return Simulation(cm, dm, tx, TimeBlock(x, s0), components)


def simulate_batches(scene: Scene, n_symbols: int, seed=None, batch_symbols: int = 1000,
                     keep_components: bool = False):
    """Independent simulations of ``<= batch_symbols`` symbols each, ``n_symbols`` in total.

    Each batch has its own pre-roll and a fixed sub-seed, so the sequence is
    reproducible for a given ``(seed, batch_symbols)``.
    """
    if n_symbols < 1 or batch_symbols < 1:
        raise ValueError("n_symbols and batch_symbols must be >= 1")
    counts = [batch_symbols] * (n_symbols // batch_symbols)
    if n_symbols % batch_symbols:
        counts.append(n_symbols % batch_symbols)
    for count, sub in zip(counts, _seed_sequence(seed).spawn(len(counts))):
        yield simulate(scene, count, sub, keep_components)


@dataclass
class SymbolStream:
    """Per-symbol spectra, each array shaped ``(K, P)``.

    ``components`` holds ``Z_c, Z_d, V_c, V_d`` when framed from a simulation
    that kept them; tone statistics need that separation.
    """

    Y_c: np.ndarray
    Y_d: np.ndarray
    X: np.ndarray
    components: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        shapes = {a.shape for a in (self.Y_c, self.Y_d, self.X)}
        if self.components:
            shapes |= {a.shape for a in self.components.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f"all spectra must share one (K, P) shape, got {shapes}")

    @property
    def K(self) -> int:
        return self.Y_c.shape[0]

    @property
    def P(self) -> int:
        return self.Y_c.shape[1]

    def __len__(self):
        return self.K

    def __iter__(self):
        return zip(self.Y_c, self.Y_d, self.X)

    def error(self, H_d) -> np.ndarray:
        """Data-stripped DM spectra ``Y_d - H_d X``."""
        return self.Y_d - np.asarray(H_d) * self.X


def _windows(block: TimeBlock, starts: np.ndarray, P: int, label: str) -> np.ndarray:
    off = starts - block.start_index
    have = block.samples.size - P
    if off.min() < 0 or off.max() > have:
        fit = int(np.sum((off >= 0) & (off <= have)))
        raise ValueError(
            f"{label} stream too short: only {fit} of {starts.size} symbol windows fit "
            f"inside [{block.start_index}, {block.stop_index - 1}]"
        )
    return sliding_window_view(block.samples, P)[off]


def frame(cm: TimeBlock, dm: TimeBlock, tx, geom: WindowGeometry, cp_length: int,
          n_symbols: int | None = None, components: dict[str, TimeBlock] | None = None) -> SymbolStream:
    """Cut symbol windows and transform them.

    DM window ``s`` starts at ``n_s = s * (P + cp_length)``; the CM window at
    ``n_s - T``.  ``tx`` may be ``None`` for noise-only streams.
    """
    P, T = geom.P, geom.T
    if tx is not None:
        tx = np.asarray(tx, dtype=complex)
        if tx.ndim != 2 or tx.shape[1] != P:
            raise ValueError(f"tx must have shape (K, {P})")
    if n_symbols is None:
        if tx is None:
            raise ValueError("n_symbols is required when tx is None")
        n_symbols = tx.shape[0]
    if n_symbols < 1:
        raise ValueError("n_symbols must be >= 1")
    if tx is not None and tx.shape[0] < n_symbols:
        raise ValueError(f"requested {n_symbols} symbols but only {tx.shape[0]} transmitted")
    starts = np.arange(n_symbols) * (P + cp_length)
    Y_c = dft_real(_windows(cm, starts - T, P, "CM"))
    Y_d = dft_real(_windows(dm, starts, P, "DM"))
    X = np.zeros_like(Y_d) if tx is None else tx[:n_symbols].copy()
    comps = None
    if components is not None:
        comps = {
            "Z_c": dft_real(_windows(components["z_c"], starts - T, P, "z_c")),
            "V_c": dft_real(_windows(components["v_c"], starts - T, P, "v_c")),
            "Z_d": dft_real(_windows(components["z_d"], starts, P, "z_d")),
            "V_d": dft_real(_windows(components["v_d"], starts, P, "v_d")),
        }
    return SymbolStream(Y_c, Y_d, X, comps)


def frame_simulation(sim: Simulation, geom: WindowGeometry, cp_length: int,
                     n_symbols: int | None = None) -> SymbolStream:
    """:func:`frame` with the simulation's components carried along."""
    return frame(sim.cm, sim.dm, sim.tx, geom, cp_length, n_symbols, sim.components)
