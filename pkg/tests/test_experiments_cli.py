import json
import subprocess
import sys

import numpy as np
import pytest

from cmcancel import io
from cmcancel.cli import main
from cmcancel.experiments import ConfigError, DEFAULTS, build_config, coupling_summary, load_config, synthetic_coupling

FAST = {"P": 256, "cp_length": 16}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def run(tmp_path, command, cfg, *extra):
    p = write_cfg(tmp_path, cfg)
    out = tmp_path / f"out_{command}"
    code = main([command, "--config", str(p), "--out", str(out), *extra])
    return code, out


class TestConfig:
    def test_defaults_build(self):
        cfg = build_config({})
        assert cfg.scene.geom.P == 8192 and cfg.h.size == 700
        assert cfg.coupling_label == "synthetic"
        assert np.isclose(np.sum(cfg.h**2), 1.0)
        assert cfg.wiener_taps == 1024 and cfg.wiener_delay == 162

    @pytest.mark.parametrize("cfg,msg", [
        ({"scene": {"Q": 1}}, "scene.Q: unknown field"),
        ({"scene": {"P": "x"}}, "scene.P: expected an integer"),
        ({"scene": {"P": 1}}, "scene.P: must be >= 2"),
        ({"scene": {"T": 700}}, "scene.T: misalignment must be < coupling length L=700"),
        ({"scene": {"sigma2_vd": -1}}, "scene.sigma2_vd: must be >= 0"),
        ({"scene": {"coupling": {"file": "a", "taps": [1]}}}, "scene.coupling: expected exactly one of"),
        ({"scene": {"coupling": {"taps": []}}}, "scene.coupling.taps: expected a non-empty list"),
        ({"scene": {"coupling": {"synthetic": {"length": 10, "centers": [1], "decays": [1, 2],
                                               "amplitudes": [1]}}}}, "equal lengths"),
        ({"scene": {"coupling": {"synthetic": {"length": 10, "centers": [1], "decays": [0],
                                               "amplitudes": [1]}}}}, "decays: must be > 0"),
        ({"scene": {"noise": {"kind": "pink"}}}, "scene.noise: noise kind must be one of"),
        ({"scene": {"P": 64, "coupling": {"taps": [1.0] * 64}}}, "scene: coupling length L=64 must be < P=64"),
        ({"run": {"T_sweep": [0, 800]}}, "run.T_sweep: misalignments must lie in [0, 699], got 800"),
        ({"run": {"T_sweep": {"start": 0, "step": 0}}}, "run.T_sweep.step: must be >= 1"),
        ({"run": {"energy_fraction": 1.0}}, "run.energy_fraction: must be < 1"),
        ({"run": {"mc_symbols": 10}}, "run.mc_symbols: must be >= 100"),
        ({"run": {"estimation": "magic"}}, "run.estimation"),
        ({"run": {"compare_T": [-1]}}, "run.compare_T"),
        ({"output": 3}, "output: expected a directory path"),
        ([], "top level must be an object"),
    ])
    def test_field_precise_errors(self, cfg, msg):
        with pytest.raises(ConfigError) as exc:
            build_config(cfg)
        assert msg in str(exc.value)

    def test_json_syntax_error_location(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "scene": {"P": 64,}\n}')
        with pytest.raises(ConfigError, match=r"bad.json:2:\d+"):
            load_config(p)

    def test_file_coupling_relative_to_config(self, tmp_path):
        (tmp_path / "h.txt").write_text("# measured\n0.5\n1.0\n-0.25\n")
        cfg = load_config(write_cfg(tmp_path, {"scene": {"P": 64, "cp_length": 8, "coupling": {"file": "h.txt"}}}))
        np.testing.assert_array_equal(cfg.h, [0.5, 1.0, -0.25])
        assert cfg.coupling_label == "measured-file:h.txt"

    def test_digest_ignores_output_only(self):
        a, b = build_config({}, output="x"), build_config({}, output="y")
        assert a.digest == b.digest
        assert build_config({}, seed=5).digest != a.digest

    def test_synthetic_coupling(self):
        h = synthetic_coupling(700, [590, 630], [25, 60], [1.0, 0.6], seed=7)
        assert np.isclose(np.sum(h**2), 1.0)
        assert 560 < np.argmax(np.abs(h)) < 660
        assert np.array_equal(h, synthetic_coupling(700, [590, 630], [25, 60], [1.0, 0.6], seed=7))

    def test_defaults_not_mutated(self):
        before = json.dumps(DEFAULTS, sort_keys=True)
        build_config({"scene": {"noise": {"sigma2": 3.0}}})
        assert json.dumps(DEFAULTS, sort_keys=True) == before


class TestSweep:
    def test_single_tap(self, tmp_path):
        taps = [0.0] * 12
        taps[7] = 1.0
        cfg = {"scene": {**FAST, "coupling": {"taps": taps}}, "run": {"T_sweep": {"start": 0, "step": 1}}}
        code, out = run(tmp_path, "sweep-xi", cfg)
        assert code == 0
        header, data, comments = io.read_csv(out / "xi_vs_T.csv")
        assert header == ["T", "xi_analytic", "xi_exact", "xi_mc_mean", "xi_mc_stderr"]
        i = int(np.argmin(data[:, 1]))
        assert data[i, 0] == 7 and data[i, 1] == 0.0
        assert any(c.startswith("# config_sha256=") for c in comments)
        assert any(c.startswith("# seed=") for c in comments)
        assert comments[-1].startswith("# T_opt=7 ")

    def test_default_u_shape_and_cross_columns(self, tmp_path):
        cfg = {"run": {"T_sweep": [0, 200, 400, 550, 600, 650, 699], "mc_symbols": 400}}
        code, out = run(tmp_path, "sweep-xi", cfg)
        assert code == 0
        _, d, comments = io.read_csv(out / "xi_vs_T.csv")
        ana, ex, mc, se = d[:, 1], d[:, 2], d[:, 3], d[:, 4]
        i = int(np.argmin(ana))
        assert 0 < i < len(ana) - 1 and ana[0] > ana[i] < ana[-1]
        assert np.all(np.abs(ex - mc) < 3 * se)
        assert np.all(np.abs(ana - mc) < 3 * se + np.abs(ana - ex))
        assert "# coupling=synthetic" in comments

    def test_non_wss_monte_carlo_only(self, tmp_path):
        cfg = {"scene": {**FAST, "coupling": {"taps": [1.0, 0.5, 0.25]},
                         "noise": {"kind": "rein-burst", "sigma2": 1.0, "burst": [100, 20, 0]}},
               "run": {"T_sweep": [0, 1, 2]}}
        code, out = run(tmp_path, "sweep-xi", cfg)
        assert code == 0
        _, d, comments = io.read_csv(out / "xi_vs_T.csv")
        assert np.all(np.isnan(d[:, 1:3])) and np.all(np.isfinite(d[:, 3:]))
        assert "monte-carlo" in comments[-1]


class TestCompare:
    def test_zero_coupling(self, tmp_path):
        cfg = {"scene": {**FAST, "coupling": {"taps": [0.0]}, "sigma2_vd": 0.5},
               "run": {"n_symbols": 400, "compare_T": [0]}}
        code, out = run(tmp_path, "compare", cfg)
        assert code == 0
        header, d, _ = io.read_csv(out / "residual_psd.csv")
        col = {h: d[:, i] for i, h in enumerate(header)}
        for name in ("psd_pertone_T0", "psd_timedomain"):
            assert np.max(np.abs(col[name] - col["psd_uncancelled"])) < 0.2
        assert abs(np.mean(col["psd_uncancelled"]) - 10 * np.log10(256 * 0.5)) < 0.1

    def test_cyclic_override_reaches_ptlb(self, tmp_path):
        cfg = {"scene": {**FAST, "coupling": {"taps": list(np.linspace(1, 0.1, 40))}, "T": 10,
                         "cyclic_noise": True, "sigma2_vc": 0.01, "sigma2_vd": 0.01},
               "run": {"n_symbols": 2000, "compare_T": [10]}}
        code, out = run(tmp_path, "compare", cfg)
        assert code == 0
        header, d, _ = io.read_csv(out / "residual_psd.csv")
        col = {h: d[:, i] for i, h in enumerate(header)}
        t_cols = [h for h in header if h.startswith("psd_pertone_T") and not h.endswith("_exp")]
        assert len(t_cols) >= 1
        for name in t_cols:
            assert np.mean(np.abs(col[name] - col["psd_ptlb"])) < 0.2

    def test_report(self, tmp_path):
        cfg = {"scene": {**FAST, "coupling": {"taps": [0.2, 1.0, 0.5, -0.3]}},
               "run": {"n_symbols": 200, "compare_T": [0, 3]}}
        code, out = run(tmp_path, "compare", cfg)
        assert code == 0
        text = (out / "compare_report.txt").read_text()
        assert "median_gap_pertone_vs_timedomain_db=" in text and "T_opt=1" in text
        header, _, _ = io.read_csv(out / "residual_psd.csv")
        assert {"q", "psd_uncancelled", "psd_pertone_T0", "psd_pertone_T3", "psd_pertone_T1", "psd_ptlb",
                "psd_timedomain", "psd_floor"} <= set(header)


class TestAdjust:
    def planted(self):
        rng = np.random.default_rng(0)
        return list(rng.uniform(0.5, 1.0, 48) * rng.choice([-1.0, 1.0], 48))

    def test_exact_mode_recovers_planted(self, tmp_path):
        h = self.planted()
        cfg = {"scene": {"P": 1024, "cp_length": 16, "T": 3, "coupling": {"taps": h}},
               "run": {"estimation": "exact"}}
        code, out = run(tmp_path, "adjust", cfg)
        assert code == 0
        _, d, _ = io.read_csv(out / "h_hat.csv")
        assert d.shape[0] == 48 and np.max(np.abs(d[:, 1] - h)) < 1e-6
        rep = dict(line.split("=", 1) for line in (out / "adjustment.txt").read_text().split())
        assert int(rep["T_trg"]) == 3
        assert float(rep["xi_after"]) <= float(rep["xi_before"])

    def test_stream_mode(self, tmp_path):
        cfg = {"scene": {"P": 1024, "cp_length": 16, "T": 0, "coupling": {"taps": self.planted()}},
               "run": {"n_symbols": 300}}
        code, out = run(tmp_path, "adjust", cfg)
        assert code == 0
        rep = dict(line.split("=", 1) for line in (out / "adjustment.txt").read_text().split())
        assert int(rep["T_opt"]) != 0 and float(rep["xi_after"]) < float(rep["xi_before"])

    def test_diffuse_exit_code(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        taps = list(rng.uniform(0.9, 1.0, 60) * rng.choice([-1.0, 1.0], 60))
        cfg = {"scene": {"P": 64, "cp_length": 4, "coupling": {"taps": taps}},
               "run": {"estimation": "exact", "energy_fraction": 0.999}}
        code, _ = run(tmp_path, "adjust", cfg)
        assert code == 2
        assert "[localize]" in capsys.readouterr().err

    def test_needs_wss(self, tmp_path):
        cfg = {"scene": {**FAST, "coupling": {"taps": [1.0, 0.5]},
                         "noise": {"kind": "rein-burst", "sigma2": 1.0, "burst": [10, 2, 0]}}}
        assert run(tmp_path, "adjust", cfg)[0] == 1


class TestIngest:
    def test_single_tap(self, tmp_path):
        (tmp_path / "one.txt").write_text("1.0\n")
        assert main(["ingest", str(tmp_path / "one.txt"), "--out", str(tmp_path / "o")]) == 0
        text = (tmp_path / "o" / "ingest_summary.txt").read_text()
        assert "length=1\n" in text and "span_99.5%=1\n" in text

    def test_flat_700_span(self, tmp_path):
        rng = np.random.default_rng(2)
        h = rng.choice([-1.0, 1.0], 700)
        io.write_coupling(tmp_path / "h.txt", h, ["constructed"])
        s = coupling_summary(io.read_coupling(tmp_path / "h.txt"))
        assert s["length"] == 700 and 690 <= s["span"] <= 700
        assert main(["ingest", str(tmp_path / "h.txt"), "--out", str(tmp_path / "o")]) == 0
        norm = io.read_coupling(tmp_path / "o" / "coupling_normalized.txt")
        assert np.isclose(np.sum(norm**2), 1.0) and np.allclose(norm, h / np.sqrt(700))

    def test_bad_line(self, tmp_path, capsys):
        (tmp_path / "bad.txt").write_text("# c\n1.0\nabc\n")
        assert main(["ingest", str(tmp_path / "bad.txt"), "--out", str(tmp_path)]) == 1
        assert "bad.txt:3:" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["ingest", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 3


class TestIO:
    def test_parse_rules(self):
        np.testing.assert_array_equal(io.parse_coupling("# x\n\n 1.5 \n-2e-3\n"), [1.5, -0.002])
        with pytest.raises(io.CouplingFormatError, match="no taps"):
            io.parse_coupling("# only\n")
        with pytest.raises(io.CouplingFormatError, match=":2: tap value must be finite"):
            io.parse_coupling("1\ninf\n")

    def test_round_trip(self, tmp_path, rng):
        h = rng.standard_normal(20)
        io.write_coupling(tmp_path / "h.txt", h)
        assert np.array_equal(io.read_coupling(tmp_path / "h.txt"), h)

    def test_csv(self, tmp_path):
        io.write_csv(tmp_path / "t.csv", ["a", "b"], [(1, 0.5), (2, None)], {"seed": 3}, ["end"])
        header, data, comments = io.read_csv(tmp_path / "t.csv")
        assert header == ["a", "b"] and comments == ["# seed=3", "# end"]
        assert data[0, 1] == 0.5 and np.isnan(data[1, 1])


class TestCLI:
    def test_config_error_exit(self, tmp_path, capsys):
        code, _ = run(tmp_path, "compare", {"scene": {"P": "x"}})
        assert code == 1 and "scene.P" in capsys.readouterr().err

    def test_missing_config_exit(self, tmp_path):
        assert main(["sweep-xi", "--config", str(tmp_path / "none.json")]) == 3

    def test_bad_threads(self, tmp_path):
        assert run(tmp_path, "sweep-xi", {}, "--threads", "0")[0] == 1

    def test_seed_override_recorded(self, tmp_path):
        cfg = {"scene": {**FAST, "coupling": {"taps": [1.0, 0.5]}}, "run": {"T_sweep": [0, 1]}}
        code, out = run(tmp_path, "sweep-xi", cfg, "--seed", "42")
        assert code == 0
        _, _, comments = io.read_csv(out / "xi_vs_T.csv")
        assert "# seed=42" in comments

    def test_threads_byte_identical(self, tmp_path):
        cfg = {"scene": {**FAST, "coupling": {"taps": [1.0, 0.5, 0.2]}}, "run": {"T_sweep": [0, 1, 2]}}
        p = write_cfg(tmp_path, cfg)
        main(["sweep-xi", "--config", str(p), "--out", str(tmp_path / "a")])
        main(["sweep-xi", "--config", str(p), "--out", str(tmp_path / "b"), "--threads", "3"])
        assert (tmp_path / "a" / "xi_vs_T.csv").read_bytes() == (tmp_path / "b" / "xi_vs_T.csv").read_bytes()

    def test_console_script(self, tmp_path):
        (tmp_path / "one.txt").write_text("2.0\n")
        r = subprocess.run([sys.executable, "-m", "cmcancel.cli", "ingest", str(tmp_path / "one.txt"),
                            "--out", str(tmp_path)], capture_output=True, text=True)
        assert r.returncode == 0 and "length=1" in r.stdout
