import numpy as np
import pytest

from cmcancel.dsp import TimeBlock, WindowGeometry, convolve_linear, dft_real
from cmcancel.pertone import expected_tone_stats, pertone_coeffs, pertone_residual_power
from cmcancel.scene import AutocorrSequence, NoiseModel, Scene, autocorr_of, simulate
from cmcancel.wiener import (WienerDesign, _normal_equations, apply_wiener, block_psd, default_layout, design_wiener,
                             expected_residual_psd)
from cmcancel.misalign import find_t_opt


def planted_dm(g, cm, delay, noise=None):
    y = convolve_linear(g, cm)
    s = y.samples if noise is None else y.samples + noise[:len(y)]
    return TimeBlock(s, y.start_index - delay)


@pytest.fixture
def cm(rng):
    return TimeBlock(rng.standard_normal(20000), -300)


class TestDesign:
    def test_planted_filter(self, rng, cm):
        g = rng.standard_normal(24)
        # dm(n) = sum_j g(j) cm(n - j), so with 4 samples of lookahead w(k) = g(k - 4)
        d = design_wiener(cm, planted_dm(g, cm, 0), 32, delay=4)
        w = np.zeros(32)
        w[4:28] = g
        assert np.max(np.abs(d.taps - w)) < 1e-6

    def test_independent_error_shrinks(self, rng):
        norms = []
        for n in (4000, 64000):
            c = TimeBlock(rng.standard_normal(n))
            e = TimeBlock(rng.standard_normal(n))
            norms.append(np.linalg.norm(design_wiener(c, e, 16).taps))
        assert 2.5 < norms[0] / norms[1] < 6.5

    def test_large_regularization(self, rng, cm):
        g = rng.standard_normal(8)
        d = design_wiener(cm, planted_dm(g, cm, 0), 8, reg=1e9)
        assert np.linalg.norm(d.taps) < 1e-8 * np.linalg.norm(g) * 10

    def test_normal_equations_exact(self, rng):
        c = rng.standard_normal(300)
        e = rng.standard_normal(300)
        n, a, b = 7, 20, 250
        X = np.stack([c[a - k:b + 1 - k] for k in range(n)], axis=1)
        R, p = _normal_equations(c, e[:b - a + 1], a, b, n)
        np.testing.assert_allclose(R, X.T @ X, rtol=1e-12, atol=1e-10)
        np.testing.assert_allclose(p, X.T @ e[:b - a + 1], rtol=1e-12, atol=1e-10)

    def test_orthogonality(self, rng, cm):
        g = rng.standard_normal(10)
        dm = planted_dm(g, cm, 2, noise=0.5 * rng.standard_normal(len(cm)))
        d = design_wiener(cm, dm, 16, delay=2, reg=0.0)
        res = apply_wiener(d, cm, dm)
        lo, hi = d.rows
        r = res.at(lo, hi - lo + 1)
        power = np.mean(cm.samples**2)
        for k in range(16):
            reg = cm.at(lo + 2 - k, hi - lo + 1)
            assert abs(np.mean(r * reg)) < 1e-8 * power

    def test_regularized_correlation_is_loading(self, rng, cm):
        dm = planted_dm(rng.standard_normal(10), cm, 2, noise=0.5 * rng.standard_normal(len(cm)))
        d = design_wiener(cm, dm, 16, delay=2)
        lo, hi = d.rows
        r = apply_wiener(d, cm, dm).at(lo, hi - lo + 1)
        corr = np.array([np.mean(r * cm.at(lo + 2 - k, hi - lo + 1)) for k in range(16)])
        np.testing.assert_allclose(corr, d.regularization * d.taps, rtol=1e-4, atol=1e-14)

    def test_nesting(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            c = TimeBlock(rng.standard_normal(12000))
            e = planted_dm(rng.standard_normal(40), c, 0, noise=rng.standard_normal(12000))
            rows = (400, 11000)
            powers = []
            for n in (16, 64, 256):
                d = design_wiener(c, e, n, delay=0, reg=0.0, rows=rows)
                powers.append(np.mean(apply_wiener(d, c, e).at(rows[0], rows[1] - rows[0] + 1) ** 2))
            assert powers[0] >= powers[1] >= powers[2]

    def test_validation(self, cm):
        dm = TimeBlock(np.zeros(100))
        with pytest.raises(ValueError, match="too few"):
            design_wiener(cm, dm, 64)
        with pytest.raises(ValueError, match="exceed"):
            design_wiener(cm, cm, 4, rows=(-1000, 10))
        with pytest.raises(ValueError, match="n_taps"):
            design_wiener(cm, cm, 0)
        with pytest.raises(ValueError, match="ill-conditioned"):
            z = TimeBlock(np.zeros(1000))
            design_wiener(z, z, 8, reg=0.0)

    def test_default_layout(self):
        assert default_layout(700) == (1024, 162)
        assert default_layout(64) == (64, 0)
        assert default_layout(1) == (1, 0)


class TestApply:
    def test_zero_filter(self, rng, cm):
        dm = TimeBlock(rng.standard_normal(5000), 0)
        res = apply_wiener(WienerDesign(np.zeros(8), 3, 0.0), cm, dm)
        np.testing.assert_array_equal(res.samples, dm.at(res.start_index, len(res)))

    def test_planted_residual_is_background(self, rng, cm):
        g = rng.standard_normal(12)
        s2 = 0.04
        dm = planted_dm(g, cm, 3, noise=np.sqrt(s2) * rng.standard_normal(len(cm)))
        res = apply_wiener(design_wiener(cm, dm, 16, delay=3), cm, dm)
        assert abs(np.mean(res.samples**2) / s2 - 1) < 0.05

    def test_uncovered_range(self):
        with pytest.raises(ValueError, match="does not cover"):
            apply_wiener(WienerDesign(np.ones(4), 0, 0.0), TimeBlock(np.ones(10)), TimeBlock(np.ones(10), 100))


class TestPSD:
    def test_block_psd_windows(self, rng):
        P, cp = 16, 4
        x = TimeBlock(rng.standard_normal(200), -7)
        psd, n = block_psd(x, P, cp, T=2)
        starts = [s * 20 - 2 for s in range(0, 10) if s * 20 - 2 >= -7 and s * 20 - 2 + P <= 193]
        ref = np.mean([np.abs(dft_real(x.at(s, P))) ** 2 for s in starts], axis=0)
        assert n == len(starts)
        np.testing.assert_allclose(psd, ref, rtol=1e-12)

    def test_block_psd_too_short(self):
        with pytest.raises(ValueError):
            block_psd(TimeBlock(np.ones(10)), 16, 4)

    def test_expected_psd_matches_empirical(self, rng):
        P, cp = 128, 0
        h = rng.standard_normal(20)
        model = NoiseModel("coloured", 1.0, shaping=[1.0, 0.4])
        sc = Scene(h_cd=h, geom=WindowGeometry(P, 0), cp_length=cp, noise=model, sigma2_vc=0.05, sigma2_vd=0.02)
        sim = simulate(sc, 3000, seed=1)
        d = WienerDesign(np.r_[np.zeros(2), h, np.zeros(2)] * 0.9, 2, 0.0)
        psd, n = block_psd(apply_wiener(d, sim.cm, sim.dm), P, cp)
        exp = expected_residual_psd(d, h, autocorr_of(model, 1), P, 0.05, 0.02)
        assert abs(np.mean(psd) / np.mean(exp) - 1) < 0.03
        assert np.median(np.abs(psd / exp - 1)) < 0.1


def test_pertone_not_better_than_time_domain(rng):
    h = rng.standard_normal(48) * np.exp(-np.arange(48) / 12)
    P = 512
    acf = AutocorrSequence.white(1.0)
    T_opt = find_t_opt(h, acf, P)[0]
    sc = Scene(h_cd=h, geom=WindowGeometry(P, T_opt), cp_length=32, noise=NoiseModel("white", 1.0),
               sigma2_vd=1e-3)
    sim = simulate(sc, 400, seed=2)
    dm_err = sim.dm
    n_taps, delay = default_layout(48)
    d = design_wiener(sim.cm, dm_err, n_taps, delay)
    td = expected_residual_psd(d, h, acf, P, 0.0, 1e-3)
    stats = expected_tone_stats(h, sc.geom, acf, 0.0, 1e-3)
    pt = pertone_residual_power(pertone_coeffs(h, sc.geom), stats)
    assert 10 * np.log10(np.mean(pt)) >= 10 * np.log10(np.mean(td)) - 0.1
