import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deconflow import autodiff as ad
from deconflow.flow import (
    FlowBlock,
    FlowModel,
    block_forward_graph,
    block_inverse_graph,
    extract_linear_slope,
    forward_graph,
    init_flow_block,
    init_linear_flow,
    init_model,
    inverse_graph,
    model_forward,
    model_inverse,
    model_log_likelihood,
    reparameterize_effect_latent,
)
from deconflow.gmm import make_gmm

from fd import numerical_jacobian
from modelgen import random_block, random_model
from test_gmm import direct_mixture_log_density


def identity_block(n, const_shift=None, perm=None):
    """Block with B = I, zero bias; optional constant coupling and permutation."""
    split = -(-n // 2)
    coupling = None
    if n >= 2:
        width = n - split
        c = np.zeros(width) if const_shift is None else np.full(width, const_shift)
        coupling = ad.MlpParams(
            [ad.leaf(np.zeros((split, 4))), ad.leaf(np.zeros((4, width)))],
            [ad.leaf(np.zeros(4)), ad.leaf(c)],
        )
    return FlowBlock(
        n=n, split=split,
        perm=np.arange(n) if perm is None else np.asarray(perm),
        coupling=coupling,
        log_diag=ad.leaf(np.zeros(n)), diag_sign=np.ones(n),
        b_row=ad.leaf(np.zeros(n)), log_bdd=ad.leaf(np.asarray(0.0)), bdd_sign=1.0,
        bias=ad.leaf(np.zeros(n + 1)),
    )


def run_block_forward(block, z):
    out, ld = block_forward_graph(block, ad.leaf(np.atleast_2d(z)))
    return out.value[0], float(ld.value)


def run_block_inverse(block, w):
    out, ld = block_inverse_graph(block, ad.leaf(np.atleast_2d(w)))
    return out.value[0], float(ld.value)


class TestBlock:
    def test_identity_block_is_identity(self):
        z = np.array([0.3, -1.2, 2.0])
        out, ld = run_block_forward(identity_block(2), z)
        np.testing.assert_array_equal(out, z)
        assert ld == 0.0

    def test_constant_coupling_with_swap_hand_case(self):
        # n=2, f_t = c, B = I, P swaps the two z_X coordinates. Coupling acts
        # first (z_b <- z2 + c), then the swap: (z2 + c, z1, z3), logdet 0.
        c = 0.7
        block = identity_block(2, const_shift=c, perm=[1, 0])
        z = np.array([0.4, -0.9, 1.5])
        out, ld = run_block_forward(block, z)
        np.testing.assert_allclose(out, [z[1] + c, z[0], z[2]], atol=1e-15)
        assert ld == 0.0

    def test_logdet_matches_numerical_jacobian(self):
        rng = np.random.default_rng(42)
        for trial in range(10):
            block = random_block(rng, 2)
            z0 = rng.standard_normal(3)

            def fwd(v):
                return run_block_forward(block, v)[0]

            jac = numerical_jacobian(fwd, z0, h=1e-6)
            jac_half = numerical_jacobian(fwd, z0, h=5e-7)
            if abs(np.linalg.det(jac) - np.linalg.det(jac_half)) > 1e-9:
                continue  # kink inside the stencil; the map is affine elsewhere
            _, analytic = run_block_forward(block, z0)
            assert abs(np.log(abs(np.linalg.det(jac))) - analytic) < 1e-6

    def test_round_trip_thousand_random_pairs(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(10):
            n = int(rng.choice([1, 2, 3, 5]))
            block = random_block(rng, n)
            z = rng.standard_normal((100, n + 1))
            w, ld_f = block_forward_graph(block, ad.leaf(z))
            back, ld_i = block_inverse_graph(block, w)
            worst = max(worst, np.max(np.abs(back.value - z)))
            assert float(ld_f.value) == -float(ld_i.value)
        assert worst < 1e-10

    def test_hand_built_block_inverse(self):
        # diag = (2, -3), b = (0.5, -1), b_dd = 2, bias = (0.1, -0.2, 0.3),
        # f_t = 0.7, P = swap. Inverse solved by hand below.
        block = identity_block(2, const_shift=0.7, perm=[1, 0])
        block.log_diag = ad.leaf(np.log([2.0, 3.0]))
        block.diag_sign = np.array([1.0, -1.0])
        block.b_row = ad.leaf(np.array([0.5, -1.0]))
        block.log_bdd = ad.leaf(np.asarray(np.log(2.0)))
        block.bias = ad.leaf(np.array([0.1, -0.2, 0.3]))
        w = np.array([1.1, -0.3, 0.9])
        v = np.array([w[1], w[0], w[2]]) - block.bias.value
        z1 = v[0] / 2.0
        z2c = v[1] / -3.0
        zy = (v[2] - (0.5 * z1 - 1.0 * z2c)) / 2.0
        expected = np.array([z1, z2c - 0.7, zy])
        got, ld = run_block_inverse(block, w)
        np.testing.assert_allclose(got, expected, atol=1e-14)
        assert ld == pytest.approx(-(np.log(2.0) + np.log(3.0) + np.log(2.0)))
        # and the round trip closes
        back, _ = run_block_forward(block, got)
        np.testing.assert_allclose(back, w, atol=1e-14)

    def test_degenerate_split_skips_coupling(self):
        block = init_flow_block(1, (8,), np.random.default_rng(0))
        assert block.coupling is None
        z = np.array([[1.5, -2.0]])
        out, _ = block_forward_graph(block, ad.leaf(z))
        np.testing.assert_array_equal(out.value, z)


def standard_identity_model(n=1, k=1):
    model = init_model(n, k, layout="linear", rng=np.random.default_rng(0))
    model.base = make_gmm(np.full(k, 1.0 / k), np.zeros((k, n + 1)), np.ones((k, n + 1)))
    return model


class TestLikelihood:
    def test_identity_flow_standard_normal_origin(self):
        model = standard_identity_model()
        assert model_log_likelihood(model, np.zeros(2)) == pytest.approx(
            -np.log(2 * np.pi), abs=1e-12)

    def test_diagonal_linear_flow_change_of_variables(self):
        model = standard_identity_model()
        lin = model.layout
        lin.log_diag.value[:] = np.log(2.0)
        lin.log_a22.value[...] = np.log(3.0)
        assert model_log_likelihood(model, np.zeros(2)) == pytest.approx(
            -np.log(2 * np.pi) - np.log(2.0) - np.log(3.0), abs=1e-12)

    def test_matches_change_of_variables_oracle(self):
        # log p(w) == log p_z(T^-1(w)) + log|det J_{T^-1}(w)| with the density
        # from direct summation and the Jacobian from central differences
        rng = np.random.default_rng(77)
        checked = 0
        for _ in range(6):
            model = random_model(rng, n=2, depth=2)
            pts = rng.standard_normal((12, 3))
            for w0 in pts:
                jac = numerical_jacobian(lambda v: model_inverse(model, v), w0, h=1e-6)
                jac_half = numerical_jacobian(lambda v: model_inverse(model, v), w0, h=5e-7)
                if abs(np.linalg.det(jac) - np.linalg.det(jac_half)) > 1e-9:
                    continue
                z0 = model_inverse(model, w0)
                base = model.base
                ref = direct_mixture_log_density(
                    base.weights(), base.means.value, np.exp(base.log_vars.value), z0
                ) + np.log(abs(np.linalg.det(jac)))
                assert model_log_likelihood(model, w0) == pytest.approx(ref, abs=1e-5)
                checked += 1
        assert checked >= 50

    def test_volume_bookkeeping_composition(self):
        rng = np.random.default_rng(5)
        model = random_model(rng, n=2, depth=3)
        z = ad.leaf(rng.standard_normal((4, 3)))
        w, total = forward_graph(model, z)
        per_block = 0.0
        cur = z
        for block in model.layout:
            cur, ld = block_forward_graph(block, cur)
            per_block += float(ld.value)
        assert float(total.value) == pytest.approx(per_block, abs=1e-12)
        np.testing.assert_allclose(cur.value, w.value, atol=1e-12)


class TestModelMaps:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(10):
            model = random_model(rng)
            z = rng.standard_normal((100, model.dim))
            w = model_forward(model, z)
            back = model_inverse(model, w)
            worst = max(worst, np.max(np.abs(back - z)))
            w2 = model_inverse(model, z)
            fwd = model_forward(model, w2)
            worst = max(worst, np.max(np.abs(fwd - z)))
        assert worst < 1e-9

    def test_identity_model_maps_are_identity(self):
        model = standard_identity_model(n=2)
        z = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(model_forward(model, z), z, atol=1e-15)
        np.testing.assert_allclose(model_inverse(model, z), z, atol=1e-15)

    def test_linear_flow_is_matrix_multiply(self):
        rng = np.random.default_rng(11)
        model = random_model(rng, n=3, layout="linear")
        lin = model.layout
        a11 = lin.a11()
        a22 = lin.a22()
        full = np.zeros((4, 4))
        full[:3, :3] = a11
        full[3, :3] = lin.a21.value
        full[3, 3] = a22
        z = rng.standard_normal((20, 4))
        expected = z @ full.T + lin.bias.value
        np.testing.assert_allclose(model_forward(model, z), expected, atol=1e-12)
        np.testing.assert_allclose(model_inverse(model, expected), z, atol=1e-9)

    def test_causal_order_numerical_jacobian(self):
        # dx/dz_Y must vanish identically: the x-path never reads z_Y
        rng = np.random.default_rng(13)
        for _ in range(5):
            model = random_model(rng)
            pts = rng.standard_normal((20, model.dim))
            eps = 1e-4
            up = pts.copy()
            up[:, -1] += eps
            dn = pts.copy()
            dn[:, -1] -= eps
            dx = model_forward(model, up)[:, :-1] - model_forward(model, dn)[:, :-1]
            assert np.max(np.abs(dx)) == 0.0

    def test_standardization_units(self):
        rng = np.random.default_rng(17)
        model = random_model(rng, n=1, layout="linear")
        model.col_shift = np.array([2.0, -1.0])
        model.col_scale = np.array([3.0, 0.5])
        w = rng.standard_normal((50, 2)) * [3.0, 0.5] + [2.0, -1.0]
        z = model_inverse(model, w)
        np.testing.assert_allclose(model_forward(model, z), w, atol=1e-9)
        # density change of variables for the fixed affine standardization
        bare = FlowModel(n=1, base=model.base, layout=model.layout)
        np.testing.assert_allclose(
            model_log_likelihood(model, w),
            model_log_likelihood(bare, (w - model.col_shift) / model.col_scale)
            - np.log(model.col_scale).sum(),
            atol=1e-12)


class TestSlopeReadout:
    def test_unit_diagonal(self):
        model = standard_identity_model()
        lin = model.layout
        lin.a21.value[:] = 1.7
        assert extract_linear_slope(model) == pytest.approx(1.7)

    def test_readout_divides_by_diagonal(self):
        model = standard_identity_model()
        lin = model.layout
        lin.log_diag.value[:] = np.log(2.0)
        lin.a21.value[:] = 4.0
        assert extract_linear_slope(model) == pytest.approx(2.0)

    def test_standardization_rescales_slope(self):
        model = standard_identity_model()
        lin = model.layout
        lin.a21.value[:] = 1.0
        model.col_scale = np.array([2.0, 6.0])
        assert extract_linear_slope(model) == pytest.approx(3.0)

    def test_block_layout_rejected(self):
        model = init_model(1, 1, layout="blocks", n_blocks=2)
        with pytest.raises(TypeError):
            extract_linear_slope(model)


class TestReparameterization:
    @pytest.mark.parametrize("layout", ["linear", "blocks"])
    @pytest.mark.parametrize("scale,shift", [(2.5, -1.0), (-0.7, 0.3)])
    def test_observation_distribution_unchanged(self, layout, scale, shift):
        rng = np.random.default_rng(29)
        model = random_model(rng, n=2, layout=layout, depth=2)
        other = reparameterize_effect_latent(model, scale, shift)
        w = rng.standard_normal((200, 3))
        np.testing.assert_allclose(model_log_likelihood(other, w),
                                   model_log_likelihood(model, w), atol=1e-9)
        # latent relation: z'_Y = scale * z_Y + shift, z_X unchanged
        z = model_inverse(model, w)
        z2 = model_inverse(other, w)
        np.testing.assert_allclose(z2[:, :-1], z[:, :-1], atol=1e-9)
        np.testing.assert_allclose(z2[:, -1], scale * z[:, -1] + shift, atol=1e-9)

    def test_zero_scale_rejected(self):
        model = random_model(np.random.default_rng(1), n=1)
        with pytest.raises(ValueError):
            reparameterize_effect_latent(model, 0.0, 1.0)


class TestPiecewiseAffine:
    def test_affine_along_kink_free_segments(self):
        rng = np.random.default_rng(31)
        model = random_model(rng, n=5, depth=2)
        hits = 0
        for _ in range(30):
            z = rng.standard_normal(6)
            delta = 1e-5 * rng.standard_normal(6)
            a = model_forward(model, z - delta)
            b = model_forward(model, z + delta)
            mid = model_forward(model, z)
            if np.allclose(mid, 0.5 * (a + b), atol=1e-11):
                hits += 1
        assert hits >= 25  # all but kink-crossing segments


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.sampled_from([1, 2, 4]))
def test_round_trip_property(seed, n):
    rng = np.random.default_rng(seed)
    model = random_model(rng, n=n)
    z = rng.standard_normal((8, n + 1))
    np.testing.assert_allclose(model_inverse(model, model_forward(model, z)), z, atol=1e-9)
