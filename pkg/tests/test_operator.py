"""Block semantics, parameter accounting, padding, and network assembly."""

import numpy as np
import pytest

from dinozaur import autodiff as ad
from dinozaur import spectral
from dinozaur.autodiff import NonFiniteError, Tensor
from dinozaur.nn import ParamStore, gelu, stream_rng
from dinozaur.operator import (DiffusionTimes, DinozaurBlock, FnoBlock,
                               Network, NetworkSpec, count_params,
                               crop_values, diagonal_heat_multiplier,
                               dinozaur_block_forward, fno_block_forward,
                               gradient_features, network_forward,
                               pad_and_crop, pad_values, split_total_padding)
from dinozaur.spectral import ConfigError, Field, Grid, ModeSet


def smooth_field(grid, modes, channels, seed):
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((modes.count, channels)) \
        + 1j * rng.standard_normal((modes.count, channels))
    return spectral.inverse_fft(spectral.SpectralField(modes, coeffs), grid)


class TestDiffusionTimes:
    def test_log_parametrization_is_positive(self):
        times = DiffusionTimes(ln_tau=np.array([[-3.0, 0.0], [2.0, -40.0]]))
        assert np.all(times.tau > 0)
        with pytest.raises(ValueError):
            DiffusionTimes(ln_tau=np.array([[np.inf, 0.0]]))


class TestGradientFeatures:
    def test_constant_field_gives_zero(self):
        g = Grid((16, 16))
        f = Field(g, np.full((16, 16, 3), 2.5))
        out = gradient_features(f, np.ones((3, 3)))
        np.testing.assert_allclose(out.values, 0.0, atol=1e-12)

    def test_single_channel_sine(self):
        g = Grid((64,))
        x = g.coords()[0]
        f = Field(g, np.sin(2 * np.pi * x)[:, None])
        out = gradient_features(f, np.ones((1, 1)))
        expected = np.tanh(4 * np.pi ** 2 * np.cos(2 * np.pi * x) ** 2)
        np.testing.assert_allclose(out.values[:, 0], expected, atol=1e-10)
        assert abs(out.values[0, 0] - 1.0) < 1e-12      # tanh(39.478...) saturates
        assert abs(out.values[16, 0]) < 1e-12           # x = 0.25: zero slope

    def test_zero_weights_blank_output(self):
        g = Grid((16,))
        f = smooth_field(g, ModeSet((4,)), 2, seed=0)
        out = gradient_features(f, np.zeros((2, 2)))
        np.testing.assert_array_equal(out.values, np.zeros((16, 2)))

    def test_outputs_bounded_by_unit_interval(self):
        # tanh rounds to exactly +-1.0 in double precision once saturated,
        # so the open-interval bound is testable only at moderate arguments
        g = Grid((16, 16))
        f = smooth_field(g, ModeSet((6, 6)), 4, seed=1)
        hot = gradient_features(f, 10.0 * np.ones((4, 4)))
        assert np.all(np.abs(hot.values) <= 1.0)
        mild = gradient_features(f, 1e-7 * np.ones((4, 4)))
        assert np.all(np.abs(mild.values) < 1.0)

    def test_matches_block_internal_path(self):
        # the fused network kernel and the reference composition agree
        g, m = Grid((16, 16)), ModeSet((5, 5))
        f = smooth_field(g, m, 3, seed=2)
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3, 3))
        ref = gradient_features(f, w, modes=m)

        from dinozaur.operator import _gradient_feature_graph
        coeffs = ad.dft_forward(Tensor(f.values[None]), (16, 16), (5, 5))
        fused = _gradient_feature_graph(coeffs, Tensor(w), (16, 16), (5, 5))
        np.testing.assert_allclose(fused.data[0], ref.values, atol=1e-12)


class TestDinozaurBlock:
    def test_disabled_branch_reduces_to_pointwise_gelu(self):
        g = Grid((16,))
        f = smooth_field(g, ModeSet((4,)), 3, seed=4)
        block = DinozaurBlock(
            w_skip=np.eye(3), bias=np.zeros(3), w_mix=np.zeros((3, 6)),
            times=np.full(3, 0.02), w_grad=np.zeros((3, 3)),
        )
        out = dinozaur_block_forward(f, block)
        np.testing.assert_allclose(out.values, gelu(f.values), atol=1e-12)

    def test_identity_wiring_reproduces_diffusion(self):
        g = Grid((64,))
        x = g.coords()[0]
        f = Field(g, np.cos(2 * np.pi * x)[:, None])
        block = DinozaurBlock(
            w_skip=np.zeros((1, 1)), bias=np.zeros(1),
            w_mix=np.array([[1.0, 0.0]]), times=np.array([0.01]),
            w_grad=np.zeros((1, 1)), activation="identity",
        )
        out = dinozaur_block_forward(f, block)
        factor = np.exp(-4 * np.pi ** 2 * 0.01)
        np.testing.assert_allclose(out.values[:, 0], factor * np.cos(2 * np.pi * x),
                                   rtol=1e-10, atol=1e-12)

    def test_huge_time_averages(self):
        g = Grid((32,))
        f = smooth_field(g, ModeSet((8,)), 2, seed=5)
        block = DinozaurBlock(
            w_skip=np.zeros((2, 2)), bias=np.zeros(2),
            w_mix=np.hstack([np.eye(2), np.zeros((2, 2))]),
            times=np.full(2, 1e6), w_grad=np.zeros((2, 2)),
            activation="identity",
        )
        out = dinozaur_block_forward(f, block)
        means = f.channel_means()
        np.testing.assert_allclose(out.values, np.broadcast_to(means, (32, 2)),
                                   atol=1e-10)


class TestFnoBlock:
    def test_zero_multiplier_reduces_to_skip(self):
        g, m = Grid((16,)), ModeSet((4,))
        f = smooth_field(g, m, 2, seed=6)
        rng = np.random.default_rng(7)
        w = rng.standard_normal((2, 2))
        b = rng.standard_normal(2)
        block = FnoBlock(w_skip=w, bias=b,
                         multiplier=np.zeros((m.count, 2, 2), complex))
        out = fno_block_forward(f, block, modes=m)
        np.testing.assert_allclose(out.values, gelu(f.values @ w.T + b), atol=1e-12)

    def test_embedding_of_diffusion_block(self):
        # dense multiplier with the heat damping on its diagonal reproduces
        # the no-gradient diffusion block exactly
        g, m = Grid((16, 16)), ModeSet((5, 5))
        f = smooth_field(g, m, 3, seed=8)
        rng = np.random.default_rng(9)
        w_skip = rng.standard_normal((3, 3))
        bias = rng.standard_normal(3)
        tau = np.array([0.003, 0.02, 0.1])

        diff_block = DinozaurBlock(w_skip=w_skip, bias=bias, w_mix=np.eye(3),
                                   times=tau, w_grad=None)
        fno_block = FnoBlock(w_skip=w_skip, bias=bias,
                             multiplier=diagonal_heat_multiplier(m, tau, 3))
        out_diff = dinozaur_block_forward(f, diff_block, modes=m)
        out_fno = fno_block_forward(f, fno_block, modes=m)
        scale = np.abs(out_diff.values).max()
        assert np.abs(out_diff.values - out_fno.values).max() / scale < 1e-10

    def test_single_mode_contraction_brute_force(self):
        # keep one mode set and compare against a hand contraction
        g, m = Grid((16,)), ModeSet((1,))  # only k = 0
        f = Field(g, np.random.default_rng(10).standard_normal((16, 2)))
        r = np.random.default_rng(11).standard_normal((1, 2, 2)) \
            + 1j * np.random.default_rng(12).standard_normal((1, 2, 2))
        block = FnoBlock(w_skip=np.zeros((2, 2)), bias=np.zeros(2),
                         multiplier=r, activation="identity")
        out = fno_block_forward(f, block, modes=m)
        mean = f.values.mean(axis=0)           # k=0 coefficient per channel
        expect = np.real(r[0] @ mean)           # constant field after inverse
        np.testing.assert_allclose(out.values, np.broadcast_to(expect, (16, 2)),
                                   atol=1e-12)


class TestPadding:
    def test_split_total(self):
        assert split_total_padding(30) == (15, 15)
        assert split_total_padding(31) == (15, 16)
        assert split_total_padding(0) == (0, 0)

    def test_pad_shapes_match_published_workflow(self):
        values = np.zeros((241, 241, 1))
        assert pad_values(values, (15, 15)).shape == (271, 271, 1)

    def test_zero_pad_is_identity(self):
        g = Grid((16, 16))
        f = smooth_field(g, ModeSet((4, 4)), 2, seed=13)
        out = pad_and_crop(f, (0, 0))
        np.testing.assert_array_equal(out.values, f.values)

    def test_crop_of_pad_recovers_original(self):
        rng = np.random.default_rng(14)
        values = rng.standard_normal((12, 8, 3))
        for p in [(0, 0), (2, 5), (7, 1)]:
            np.testing.assert_array_equal(crop_values(pad_values(values, p), p),
                                          values)

    def test_pad_region_is_zero(self):
        values = np.ones((4, 4, 1))
        padded = pad_values(values, (2, 2))
        assert padded[0, 0, 0] == 0.0 and padded[-1, -1, 0] == 0.0
        assert padded[2:6, 2:6, 0].min() == 1.0

    def test_transform_runs_on_padded_grid(self):
        g = Grid((8,))
        f = Field(g, np.ones((8, 1)))
        seen = {}

        def probe(values):
            seen["shape"] = values.shape
            return values

        pad_and_crop(f, (3,), transform=probe)
        assert seen["shape"] == (14, 1)


class TestNetwork:
    def test_identity_smoke_depth_zero(self):
        # M = 0 with lifting/projection wired to the near-linear gelu regime
        spec = NetworkSpec(n=(16,), kmax=(4,), d_c=2, blocks=0, d_a=2, d_u=2,
                           lift_hidden=2, proj_hidden=2)
        net = Network(spec)
        store = ParamStore()
        shift = 20.0
        store.add("lift.0.w", np.eye(2))
        store.add("lift.0.b", np.full(2, shift))
        store.add("lift.1.w", np.eye(2))
        store.add("lift.1.b", np.full(2, -shift))
        store.add("proj.0.w", np.eye(2))
        store.add("proj.0.b", np.full(2, shift))
        store.add("proj.1.w", np.eye(2))
        store.add("proj.1.b", np.full(2, -shift))
        rng = np.random.default_rng(15)
        a = rng.uniform(-1, 1, size=(3, 16, 2))
        out = net.forward(Tensor(a), store.leaves())
        np.testing.assert_allclose(out.data, a, atol=1e-10)

    def test_forward_shape_and_padding(self):
        spec = NetworkSpec(n=(16, 12), kmax=(4, 3), d_c=6, blocks=2,
                           d_a=2, d_u=3, padding=(4, 2))
        net = Network(spec)
        store = net.init_params(0)
        a = np.random.default_rng(16).standard_normal((2, 16, 12, 2))
        out = net.forward(Tensor(a), store.leaves())
        assert out.data.shape == (2, 16, 12, 3)

    def test_single_field_wrapper(self):
        spec = NetworkSpec(n=(16,), kmax=(4,), d_c=4, blocks=1)
        store = Network(spec).init_params(3)
        g = Grid((16,))
        f = smooth_field(g, ModeSet((4,)), 1, seed=17)
        out = network_forward(f, spec, store)
        assert out.grid == g and out.channels == 1

    def test_input_shape_mismatch_raises(self):
        spec = NetworkSpec(n=(16,), kmax=(4,), d_c=4, blocks=1)
        net = Network(spec)
        store = net.init_params(0)
        with pytest.raises(ConfigError):
            net.forward(Tensor(np.zeros((1, 8, 1))), store.leaves())

    def test_nonfinite_intermediate_names_block(self):
        spec = NetworkSpec(n=(16,), kmax=(4,), d_c=2, blocks=2)
        net = Network(spec)
        store = net.init_params(0)
        store["block.1.w_skip"].value[...] = np.nan
        a = np.zeros((1, 16, 1))
        with pytest.raises(NonFiniteError, match="block 1"):
            net.forward(Tensor(a), store.leaves())

    def test_discretization_invariance_band_limited(self):
        # identical parameters, band-limited input sampled at n and 2n:
        # all operations are spectral or pointwise, so outputs agree at
        # shared points (pad = 0)
        m = ModeSet((3,))
        coarse = NetworkSpec(n=(64,), kmax=(6,), d_c=4, blocks=2)
        fine = NetworkSpec(n=(128,), kmax=(6,), d_c=4, blocks=2)
        store = Network(coarse).init_params(7)
        rng = np.random.default_rng(18)
        coeffs = 0.1 * (rng.standard_normal((m.count, 1))
                        + 1j * rng.standard_normal((m.count, 1)))
        f_c = spectral.inverse_modes(coeffs, (64,), (3,))
        f_f = spectral.inverse_modes(coeffs, (128,), (3,))
        out_c = Network(coarse).forward_values(f_c[None], store)[0]
        out_f = Network(fine).forward_values(f_f[None], store)[0]
        assert np.abs(out_f[::2] - out_c).max() < 1e-8


class TestCountParams:
    def test_block_formula(self):
        for d_c in (16, 32, 64):
            spec = NetworkSpec(n=(32, 32), kmax=(8, 8), d_c=d_c, blocks=1)
            table = count_params(spec)
            assert table["blocks"]["diffusion"]["per_block"] == 4 * d_c ** 2 + 2 * d_c
        spec = NetworkSpec(n=(32, 32), kmax=(8, 8), d_c=64, blocks=1)
        assert count_params(spec)["blocks"]["diffusion"]["per_block"] == 16512

    def test_counts_match_registered_parameters(self):
        # table arithmetic agrees with the tensors actually created
        for kind in ("diffusion", "diffusion-no-grad", "fno-dense"):
            spec = NetworkSpec(n=(16, 16), kmax=(3, 4), d_c=5, blocks=2,
                               d_a=2, d_u=3, block_kind=kind)
            store = Network(spec).init_params(0)
            assert store.num_values() == count_params(spec)["total"], kind

    def test_spec_example_block_stack(self):
        spec = NetworkSpec(n=(64, 64), kmax=(12, 12), d_c=32, blocks=4)
        table = count_params(spec)
        assert table["block_totals"]["diffusion"] == 16640
        assert table["blocks"]["fno-dense"]["multiplier"] == 2 * 32 ** 2 * 276

    def test_dimension_and_mode_independence(self):
        totals = set()
        for n, kmax in [((64, 64), (8, 8)), ((64, 64), (16, 16)),
                        ((64, 64, 64), (24, 24, 24))]:
            spec = NetworkSpec(n=n, kmax=kmax, d_c=32, blocks=4)
            totals.add(count_params(spec)["block_totals"]["diffusion"])
        assert totals == {16640}

    def test_fno_counts_track_mode_count(self):
        base = {}
        for kmax in [(8, 8), (16, 16), (24, 24)]:
            spec = NetworkSpec(n=(64, 64), kmax=kmax, d_c=8, blocks=1,
                               block_kind="fno-dense")
            base[kmax] = (count_params(spec)["blocks"]["fno-dense"]["multiplier"],
                          spec.modes.count)
        for kmax, (mult, k_count) in base.items():
            assert mult == 2 * 64 * k_count


class TestGradcheckDriver:
    def test_all_kinds_pass(self):
        from dinozaur.training import gradcheck_run
        for kind in ("diffusion", "diffusion-no-grad", "fno-dense"):
            spec = NetworkSpec(n=(16,), kmax=(4,), d_c=3, blocks=1,
                               block_kind=kind)
            report = gradcheck_run(spec, seed=0)
            assert report.passed(1e-5), (kind, report.summary())

    def test_corrupted_adjoint_detected(self, monkeypatch):
        # negative control: a 1% error in the forward-transform adjoint must
        # fail the check and name a parameter
        from dinozaur import spectral as sp
        from dinozaur.training import gradcheck_run
        true_adjoint = sp.forward_modes_adjoint
        monkeypatch.setattr(sp, "forward_modes_adjoint",
                            lambda g, n, kmax: 1.01 * true_adjoint(g, n, kmax))
        spec = NetworkSpec(n=(16,), kmax=(4,), d_c=3, blocks=1)
        report = gradcheck_run(spec, seed=0)
        assert not report.passed(1e-5)
        assert report.worst.param
