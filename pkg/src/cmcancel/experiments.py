"""Config-driven experiment runs: xi sweep, residual PSD comparison,
post-training adjustment, and coupling-file ingestion.

Default scene values are invented stand-ins; the default coupling is
synthetic and labelled as such in every output.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .dsp import TimeBlock, WindowGeometry, convolve_linear
from .misalign import (PipelineError, adjust_from_coeffs, energy_window, find_t_opt, xi_analytic, xi_exact,
                       xi_monte_carlo)
from .pertone import (apply_canceller, estimate_beta, expected_tone_stats, measure_tone_stats, pertone_coeffs,
                      pertone_residual_power, ptlb)
from .scene import AutocorrSequence, NoiseModel, Scene, autocorr_of, frame_simulation, simulate
from .wiener import apply_wiener, block_psd, default_layout, design_wiener, expected_residual_psd


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


DEFAULTS = {
    "scene": {
        "P": 8192,
        "cp_length": 640,
        "T": 0,
        "coupling": {"synthetic": {"length": 700, "centers": [590, 630], "decays": [25, 60],
                                   "amplitudes": [1.0, 0.6], "seed": 7}},
        "direct_channel": [1.0],
        "noise": {"kind": "white", "sigma2": 1.0, "shaping": None, "burst": None},
        "sigma2_x": 0.0,
        "sigma2_vc": 0.0,
        "sigma2_vd": 0.01,
        "cyclic_noise": False,
    },
    "run": {
        "n_symbols": 200,
        "seed": 1,
        "T_sweep": {"start": 0, "stop": None, "step": 25},
        "compare_T": [0],
        "energy_fraction": 0.995,
        "mc_symbols": 200,
        "wiener_taps": None,
        "wiener_delay": None,
        "estimation": "stream",
    },
    "output": "results",
}

_REPLACE = {("scene", "coupling"), ("scene", "noise", "shaping"), ("scene", "noise", "burst"),
            ("run", "T_sweep")}


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        p = path + (k,)
        if k not in base:
            raise ConfigError(f"{'.'.join(p)}: unknown field")
        if isinstance(base[k], dict) and p not in _REPLACE:
            if not isinstance(v, dict):
                raise ConfigError(f"{'.'.join(p)}: expected an object")
            out[k] = _merge(base[k], v, p)
        else:
            out[k] = copy.deepcopy(v)
    return out


def synthetic_coupling(length: int, centers, decays, amplitudes, seed: int = 0) -> np.ndarray:
    """Unit-energy random-sign taps under a sum of two-sided exponential envelopes."""
    n = np.arange(length)
    env = np.zeros(length)
    for c, d, a in zip(centers, decays, amplitudes):
        env += a * np.exp(-np.abs(n - c) / d)
    h = env * np.random.default_rng(seed).choice([-1.0, 1.0], size=length)
    norm = np.linalg.norm(h)
    return h / norm if norm > 0 else h


def _num(d, key, path, kind=float, lo=None, lo_open=False, optional=False):
    v = d.get(key)
    full = f"{path}.{key}"
    if v is None:
        if optional:
            return None
        raise ConfigError(f"{full}: required")
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{full}: expected an integer, got {v!r}")
    elif isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{full}: expected a number, got {v!r}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{full}: must be {'>' if lo_open else '>='} {lo}, got {v!r}")
    return kind(v)


def _taps(v, path) -> np.ndarray:
    if not isinstance(v, list) or not v or not all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in v):
        raise ConfigError(f"{path}: expected a non-empty list of numbers")
    return np.array(v, dtype=float)


@dataclass
class ExperimentConfig:
    raw: dict
    scene: Scene
    coupling_label: str
    n_symbols: int
    seed: int
    T_sweep: list[int]
    compare_T: list[int]
    energy_fraction: float
    mc_symbols: int
    wiener_taps: int
    wiener_delay: int
    estimation: str
    output: Path

    @property
    def h(self) -> np.ndarray:
        return self.scene.h_cd

    @property
    def digest(self) -> str:
        body = {k: v for k, v in self.raw.items() if k != "output"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def acf(self) -> AutocorrSequence | None:
        """Autocorrelation of the CM noise, or None when it is not WSS."""
        noise = self.scene.noise
        if not noise.is_wss or noise.sigma2 == 0:
            return None
        maxlag = 0 if noise.kind == "white" else noise.shaping.size - 1
        return autocorr_of(noise, maxlag)

    def meta(self, command: str) -> dict:
        return {"cmcancel": command, "config_sha256": self.digest, "seed": self.seed,
                "coupling": self.coupling_label}


def build_config(user: dict, base_dir=".", seed: int | None = None, output=None) -> ExperimentConfig:
    if not isinstance(user, dict):
        raise ConfigError("config: top level must be an object")
    raw = _merge(DEFAULTS, user)
    if seed is not None:
        raw["run"]["seed"] = int(seed)
    if output is not None:
        raw["output"] = str(output)
    sc, run = raw["scene"], raw["run"]

    P = _num(sc, "P", "scene", int, lo=2)
    cp = _num(sc, "cp_length", "scene", int, lo=0)
    T = _num(sc, "T", "scene", int, lo=0)
    cpl = sc["coupling"]
    if not isinstance(cpl, dict) or len(cpl) != 1 or next(iter(cpl)) not in ("file", "synthetic", "taps"):
        raise ConfigError("scene.coupling: expected exactly one of {file, synthetic, taps}")
    kind, spec = next(iter(cpl.items()))
    if kind == "file":
        if not isinstance(spec, str):
            raise ConfigError("scene.coupling.file: expected a path string")
        path = Path(base_dir) / spec
        h = io.read_coupling(path)
        label = f"measured-file:{spec}"
    elif kind == "taps":
        h = _taps(spec, "scene.coupling.taps")
        label = "inline-taps"
    else:
        if not isinstance(spec, dict):
            raise ConfigError("scene.coupling.synthetic: expected an object")
        unknown = set(spec) - {"length", "centers", "decays", "amplitudes", "seed"}
        if unknown:
            raise ConfigError(f"scene.coupling.synthetic.{sorted(unknown)[0]}: unknown field")
        length = _num(spec, "length", "scene.coupling.synthetic", int, lo=1)
        parts = [spec.get(k) for k in ("centers", "decays", "amplitudes")]
        for name, v in zip(("centers", "decays", "amplitudes"), parts):
            _taps(v, f"scene.coupling.synthetic.{name}")
        if len({len(v) for v in parts}) != 1:
            raise ConfigError("scene.coupling.synthetic: centers, decays and amplitudes must have equal lengths")
        if any(d <= 0 for d in parts[1]):
            raise ConfigError("scene.coupling.synthetic.decays: must be > 0")
        h = synthetic_coupling(length, *parts, seed=int(spec.get("seed", 0)))
        label = "synthetic"

    nz = sc["noise"]
    if not isinstance(nz, dict):
        raise ConfigError("scene.noise: expected an object")
    try:
        noise = NoiseModel(
            kind=nz.get("kind", "white"),
            sigma2=_num(nz, "sigma2", "scene.noise", lo=0),
            shaping=None if nz.get("shaping") is None else _taps(nz["shaping"], "scene.noise.shaping"),
            burst=None if nz.get("burst") is None else tuple(nz["burst"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scene.noise: {exc}") from None

    try:
        geom = WindowGeometry(P, T)
    except ValueError as exc:
        raise ConfigError(f"scene.T: {exc}") from None
    if not T < h.size:
        raise ConfigError(f"scene.T: misalignment must be < coupling length L={h.size}, got {T}")
    try:
        scene = Scene(
            h_cd=h, geom=geom, cp_length=cp, noise=noise,
            h_d=_taps(sc["direct_channel"], "scene.direct_channel"),
            sigma2_x=_num(sc, "sigma2_x", "scene", lo=0),
            sigma2_vc=_num(sc, "sigma2_vc", "scene", lo=0),
            sigma2_vd=_num(sc, "sigma2_vd", "scene", lo=0),
            cyclic_noise=bool(sc["cyclic_noise"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scene: {exc}") from None

    L = h.size
    sweep = run["T_sweep"]
    if isinstance(sweep, list):
        T_sweep = [int(t) for t in sweep]
    elif isinstance(sweep, dict):
        start = _num(sweep, "start", "run.T_sweep", int, lo=0)
        stop = _num(sweep, "stop", "run.T_sweep", int, lo=1, optional=True)
        step = _num(sweep, "step", "run.T_sweep", int, lo=1)
        T_sweep = list(range(start, L if stop is None else stop, step))
    else:
        raise ConfigError("run.T_sweep: expected a list of integers or {start, stop, step}")
    if not T_sweep:
        raise ConfigError("run.T_sweep: empty sweep")
    bad = [t for t in T_sweep if not 0 <= t < L]
    if bad:
        raise ConfigError(f"run.T_sweep: misalignments must lie in [0, {L - 1}], got {bad[0]}")
    compare_T = run["compare_T"]
    if not isinstance(compare_T, list) or not all(isinstance(t, int) and 0 <= t < L for t in compare_T):
        raise ConfigError(f"run.compare_T: expected a list of integers in [0, {L - 1}]")
    ef = _num(run, "energy_fraction", "run", lo=0, lo_open=True)
    if ef >= 1:
        raise ConfigError(f"run.energy_fraction: must be < 1, got {ef}")
    nf_default, delay_default = default_layout(L)
    taps = _num(run, "wiener_taps", "run", int, lo=1, optional=True) or nf_default
    delay = _num(run, "wiener_delay", "run", int, lo=0, optional=True)
    if delay is None:
        delay = max((taps - L) // 2, 0) if taps != nf_default else delay_default
    estimation = run["estimation"]
    if estimation not in ("stream", "exact"):
        raise ConfigError(f"run.estimation: expected 'stream' or 'exact', got {estimation!r}")
    mc = _num(run, "mc_symbols", "run", int, lo=100)
    out = raw["output"]
    if not isinstance(out, str):
        raise ConfigError("output: expected a directory path string")
    return ExperimentConfig(
        raw=raw, scene=scene, coupling_label=label,
        n_symbols=_num(run, "n_symbols", "run", int, lo=2), seed=_num(run, "seed", "run", int, lo=0),
        T_sweep=T_sweep, compare_T=list(compare_T), energy_fraction=ef, mc_symbols=mc,
        wiener_taps=taps, wiener_delay=delay, estimation=estimation, output=Path(out),
    )


def load_config(path, seed: int | None = None, output=None) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return build_config(user, base_dir=path.parent, seed=seed, output=output)


def _white_equivalent(cfg: ExperimentConfig) -> AutocorrSequence:
    acf = cfg.acf()
    return acf if acf is not None else AutocorrSequence.white(max(cfg.scene.noise.sigma2, 1.0))


def cmd_sweep_xi(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """Write ``xi_vs_T.csv``: analytic, exact and Monte-Carlo energy per T."""
    scene = cfg.scene
    h, P = scene.h_cd, scene.geom.P
    acf = cfg.acf() if not scene.cyclic_noise else None
    rows = []
    for T in cfg.T_sweep:
        geom = WindowGeometry(P, T)
        ana = ex = None
        if acf is not None:
            ana = xi_analytic(h, geom, acf).xi_total
            ex = xi_exact(h, geom, acf)
        mean, se = xi_monte_carlo(h, geom, scene.noise, cfg.mc_symbols, seed=[cfg.seed, T],
                                  cyclic=scene.cyclic_noise, threads=threads)
        rows.append((T, ana, ex, mean, se))
    if acf is not None:
        T_opt, xi_at = find_t_opt(h, acf, P)
        summary = {"T_opt": T_opt, "xi_min": xi_at[T_opt], "source": "analytic"}
    else:
        best = min(rows, key=lambda r: (r[3], r[0]))
        summary = {"T_opt": best[0], "xi_min": best[3], "source": "monte-carlo sweep minimum"}
    footer = [f"T_opt={summary['T_opt']} xi_min={summary['xi_min']!r} source={summary['source']}"]
    io.write_csv(out / "xi_vs_T.csv", ["T", "xi_analytic", "xi_exact", "xi_mc_mean", "xi_mc_stderr"],
                 rows, cfg.meta("sweep-xi"), footer)
    summary["rows"] = rows
    return summary


def _dm_error(sim, scene: Scene) -> TimeBlock:
    data = convolve_linear(scene.h_d, sim.x, mode="full").samples[:len(sim.dm)]
    return TimeBlock(sim.dm.samples - data, sim.dm.start_index)


def _db(x):
    return 10 * np.log10(np.maximum(x, 1e-300))


def cmd_compare(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """Write ``residual_psd.csv`` and ``compare_report.txt``.

    Empirical columns come from one simulated stream re-framed at every
    requested misalignment.  For WSS noise, ``*_exp`` columns give the exact
    expected PSDs for the same trained coefficients and filter.
    """
    scene = cfg.scene
    h, P, cp = scene.h_cd, scene.geom.P, scene.cp_length
    acf = None if scene.cyclic_noise else cfg.acf()
    T_opt, _ = find_t_opt(h, _white_equivalent(cfg) if acf is None else acf, P)
    Ts = sorted(set(cfg.compare_T) | {T_opt})

    sim = simulate(scene, cfg.n_symbols, cfg.seed, keep_components=True)
    H_d = scene.H_d
    n_q = P // 2 + 1
    cols = {"q": np.arange(n_q)}
    base = frame_simulation(sim, scene.geom.with_T(Ts[0]), cp)
    E = base.error(H_d)
    cols["psd_uncancelled"] = np.mean(np.abs(E) ** 2, axis=0)
    betas, stats_opt = {}, None
    for T in Ts:
        stream = frame_simulation(sim, scene.geom.with_T(T), cp)
        beta = estimate_beta(stream, H_d)
        betas[T] = beta
        resid = apply_canceller(stream.error(H_d), stream.Y_c, beta)
        cols[f"psd_pertone_T{T}"] = np.mean(np.abs(resid) ** 2, axis=0)
        if T == T_opt:
            stats_opt = measure_tone_stats(stream)
    cols["psd_ptlb"] = ptlb(stats_opt)

    design = design_wiener(sim.cm, _dm_error(sim, scene), cfg.wiener_taps, cfg.wiener_delay)
    td = apply_wiener(design, sim.cm, _dm_error(sim, scene))
    cols["psd_timedomain"], n_td = block_psd(td, P, cp)
    cols["psd_floor"] = np.mean(np.abs(base.components["V_d"]) ** 2, axis=0)

    if acf is not None:
        for T in Ts:
            st = expected_tone_stats(h, scene.geom.with_T(T), acf, scene.sigma2_vc, scene.sigma2_vd)
            cols[f"psd_pertone_T{T}_exp"] = pertone_residual_power(betas[T], st)
            if T == T_opt:
                cols["psd_ptlb_exp"] = ptlb(st)
                cols["psd_uncancelled_exp"] = st.I_dm + st.sigma2_vd
        cols["psd_timedomain_exp"] = expected_residual_psd(design, h, acf, P, scene.sigma2_vc, scene.sigma2_vd)
        cols["psd_floor_exp"] = np.full(P, P * scene.sigma2_vd)

    names = list(cols)
    table = {k: (v if k == "q" else _db(np.asarray(v)[:n_q])) for k, v in cols.items()}
    rows = zip(*(table[k] for k in names))
    io.write_csv(out / "residual_psd.csv", names, rows, {**cfg.meta("compare"), "units": "dB re 1.0 per tone"})

    gap = table[f"psd_pertone_T{T_opt}"] - table["psd_timedomain"]
    summary = {"T_opt": T_opt, "Ts": Ts, "median_gap_db": float(np.median(gap)),
               "td_taps": design.n_taps, "td_delay": design.delay, "td_windows": n_td, "table": table}
    lines = [
        f"coupling={cfg.coupling_label}",
        f"config_sha256={cfg.digest}",
        f"seed={cfg.seed}",
        f"T_opt={T_opt}",
        f"compared_T={','.join(map(str, Ts))}",
        f"timedomain_taps={design.n_taps} delay={design.delay} regularization={float(design.regularization)!r}",
        f"median_gap_pertone_vs_timedomain_db={summary['median_gap_db']:.4f}",
    ]
    if acf is not None:
        pt, lb, fl = (table[k] for k in (f"psd_pertone_T{T_opt}_exp", "psd_ptlb_exp", "psd_floor_exp"))
        order = float(np.mean((pt >= lb) & (lb >= fl)))
        exp_gap = float(np.median(pt - table["psd_timedomain_exp"]))
        summary.update(ordering_fraction=order, median_gap_exp_db=exp_gap)
        lines += [f"median_gap_expected_db={exp_gap:.4f}",
                  f"tones_with_pertone>=ptlb>=floor={order:.4f}"]
    (out / "compare_report.txt").write_text("\n".join(lines) + "\n")
    return summary


def cmd_adjust(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """Run the post-training adjustment and write ``adjustment.txt`` and ``h_hat.csv``."""
    scene = cfg.scene
    acf = cfg.acf()
    if acf is None:
        raise ConfigError("scene.noise: adjust needs WSS alien noise with sigma2 > 0")
    geom = scene.geom
    if cfg.estimation == "exact":
        st = expected_tone_stats(scene.h_cd, geom, acf, scene.sigma2_vc, scene.sigma2_vd)
        delta = st.delta
        beta = pertone_coeffs(scene.h_cd, geom, delta)
    else:
        sim = simulate(scene, cfg.n_symbols, cfg.seed, keep_components=True)
        stream = frame_simulation(sim, geom, scene.cp_length)
        delta = measure_tone_stats(stream).delta
        try:
            beta = estimate_beta(stream, scene.H_d)
        except ValueError as exc:
            raise PipelineError("estimate", str(exc)) from exc
    rep = adjust_from_coeffs(beta, delta, acf, cfg.energy_fraction)
    lines = [
        f"coupling={cfg.coupling_label}",
        f"config_sha256={cfg.digest}",
        f"seed={cfg.seed}",
        f"estimation={cfg.estimation}",
        f"T_trg={rep.T_trg}",
        f"L_hat={rep.L_hat}",
        f"h_hat_length={rep.h_hat.size}",
        f"window_start={rep.window_start}",
        f"T_opt={rep.T_opt}",
        f"shift={rep.shift}",
        f"xi_before={float(rep.xi_before)!r}",
        f"xi_after={float(rep.xi_after)!r}",
        f"coefficient_update_norm={float(rep.update_norm)!r}",
    ]
    (out / "adjustment.txt").write_text("\n".join(lines) + "\n")
    io.write_csv(out / "h_hat.csv", ["k", "h_hat"], enumerate(rep.h_hat), cfg.meta("adjust"))
    return {"report": rep}


def coupling_summary(h, fraction: float = 0.995) -> dict:
    """Length, energy and shortest contiguous span holding ``fraction`` of it."""
    h = np.asarray(h, dtype=float)
    energy = float(np.sum(h**2))
    if energy == 0:
        return {"length": h.size, "energy": 0.0, "span": 0, "span_start": 0}
    start, span = energy_window(np.concatenate([h, np.zeros(h.size)]), fraction)
    return {"length": h.size, "energy": energy, "span": span, "span_start": start}


def cmd_ingest(path, out: Path) -> dict:
    """Parse a coupling file, summarise its delay spread and write a unit-energy copy."""
    h = io.read_coupling(path)
    s = coupling_summary(h)
    norm = h / np.sqrt(s["energy"]) if s["energy"] > 0 else h
    io.write_coupling(out / "coupling_normalized.txt", norm,
                      [f"normalized to unit energy from {Path(path).name}", f"length={s['length']}"])
    lines = [f"source={Path(path).name}", f"length={s['length']}", f"energy={s['energy']!r}",
             f"span_99.5%={s['span']}", f"span_start={s['span_start']}"]
    (out / "ingest_summary.txt").write_text("\n".join(lines) + "\n")
    return s
