import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcchrl.layers import (
    ACTIVATIONS,
    DimensionError,
    FMLayer,
    GRUCell,
    LayerSpec,
    Linear,
    MLP,
    attention_weights,
    mlp_spec,
    pairwise_inner_products,
    softmax,
    target_attention,
)
from mcchrl.params import ParamStore


def make_linear(in_dim, out_dim, seed=0):
    store = ParamStore()
    lin = Linear(store, "lin", in_dim, out_dim, np.random.default_rng(seed))
    return store, lin


class TestLinear:
    def test_zero_weights(self):
        store, lin = make_linear(2, 2)
        lin.w.value[...] = 0.0
        y, _ = lin.forward(np.array([1.0, 2.0]))
        assert np.array_equal(y, np.zeros(2))

    def test_identity(self):
        store, lin = make_linear(2, 2)
        lin.w.value[...] = np.eye(2)
        lin.b.value[...] = 0.0
        y, _ = lin.forward(np.array([3.0, 4.0]))
        assert np.array_equal(y, np.array([3.0, 4.0]))

    def test_hand_matrix_multiply(self):
        # W=[[1,1],[1,-1]], b=[0.5,0], x=[1,2] -> [3.5,-1]
        store, lin = make_linear(2, 2)
        lin.w.value[...] = np.array([[1.0, 1.0], [1.0, -1.0]])
        lin.b.value[...] = np.array([0.5, 0.0])
        y, _ = lin.forward(np.array([1.0, 2.0]))
        assert np.allclose(y, [3.5, -1.0])

    def test_shape_mismatch(self):
        store, lin = make_linear(3, 2)
        with pytest.raises(DimensionError):
            lin.forward(np.zeros(4))


def scalar_gru_oracle(wz, wr, wh, h, x):
    """Independent hand evaluation of the four cell equations (python floats)."""
    import math

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    H = len(h)
    hx = list(h) + list(x)
    z = [sig(sum(wz[i][j] * hx[j] for j in range(len(hx)))) for i in range(H)]
    r = [sig(sum(wr[i][j] * hx[j] for j in range(len(hx)))) for i in range(H)]
    rhx = [r[i] * h[i] for i in range(H)] + list(x)
    hc = [math.tanh(sum(wh[i][j] * rhx[j] for j in range(len(rhx)))) for i in range(H)]
    return [(1.0 - z[i]) * h[i] + z[i] * hc[i] for i in range(H)]


class TestGRUCell:
    def make(self, input_dim=1, hidden_dim=1, seed=0):
        store = ParamStore()
        cell = GRUCell(store, "gru", input_dim, hidden_dim, np.random.default_rng(seed))
        return store, cell

    def test_zero_weights_half_gate(self):
        # all weights 0, h=[0.8] -> z=0.5, hc=0, h'=[0.4]
        store, cell = self.make()
        for p in (cell.wz, cell.wr, cell.wh):
            p.value[...] = 0.0
        h_new, cache = cell.forward(np.array([0.8]), np.array([0.3]))
        _, _, _, z, r, _, hc = cache
        assert np.allclose(z, 0.5) and np.allclose(hc, 0.0)
        assert np.allclose(h_new, [0.4])

    def test_zero_fixed_point(self):
        store, cell = self.make()
        for p in (cell.wz, cell.wr, cell.wh):
            p.value[...] = 0.0
        h_new, _ = cell.forward(np.array([0.0]), np.array([0.0]))
        assert np.allclose(h_new, [0.0])

    def test_matches_scalar_oracle(self):
        store, cell = self.make(seed=0)
        h = np.array([0.1])
        x = np.array([0.2])
        h_new, _ = cell.forward(h, x)
        expect = scalar_gru_oracle(cell.wz.value.tolist(), cell.wr.value.tolist(),
                                   cell.wh.value.tolist(), h.tolist(), x.tolist())
        assert np.allclose(h_new, expect)

    def test_matches_scalar_oracle_multidim(self):
        store = ParamStore()
        cell = GRUCell(store, "gru", 3, 2, np.random.default_rng(7))
        h = np.array([0.1, -0.4])
        x = np.array([0.2, 0.5, -0.3])
        h_new, _ = cell.forward(h, x)
        expect = scalar_gru_oracle(cell.wz.value.tolist(), cell.wr.value.tolist(),
                                   cell.wh.value.tolist(), h.tolist(), x.tolist())
        assert np.allclose(h_new, expect)

    def test_gates_in_unit_interval_and_bounded_latent(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        cell = GRUCell(store, "gru", 4, 4, rng)
        for _ in range(20):
            h = rng.normal(size=4)
            x = rng.normal(size=4)
            h_new, cache = cell.forward(h, x)
            _, _, _, z, r, _, _ = cache
            assert np.all(z > 0) and np.all(z < 1)
            assert np.all(r > 0) and np.all(r < 1)
            bound = np.maximum(np.abs(h), 1.0)
            assert np.all(np.abs(h_new) <= bound + 1e-12)

    def test_shape_mismatch(self):
        store, cell = self.make(input_dim=2, hidden_dim=3)
        with pytest.raises(DimensionError):
            cell.forward(np.zeros(2), np.zeros(2))


class TestMLP:
    def test_zero_weights_zero_output(self):
        store = ParamStore()
        mlp = MLP(store, "mlp", mlp_spec(3, [4], 2, final_act="none"),
                  np.random.default_rng(0))
        for layer in mlp.layers:
            layer.w.value[...] = 0.0
        y, _ = mlp.forward(np.array([1.0, -2.0, 3.0]))
        assert np.array_equal(y, np.zeros(2))

    def test_tanh_codomain(self):
        store = ParamStore()
        mlp = MLP(store, "mlp", mlp_spec(3, [8, 4], 1, final_act="tanh"),
                  np.random.default_rng(1))
        rng = np.random.default_rng(2)
        for _ in range(50):
            y, _ = mlp.forward(rng.normal(scale=10.0, size=3))
            assert -1.0 <= y[0] <= 1.0

    def test_two_layer_hand_computed(self):
        store = ParamStore()
        mlp = MLP(store, "mlp", mlp_spec(2, [2], 1, hidden_act="relu", final_act="none"),
                  np.random.default_rng(0))
        mlp.layers[0].w.value[...] = np.array([[1.0, 0.0], [0.0, -1.0]])
        mlp.layers[0].b.value[...] = np.array([0.0, 0.5])
        mlp.layers[1].w.value[...] = np.array([[2.0, 3.0]])
        mlp.layers[1].b.value[...] = np.array([-1.0])
        # x=[1,2]: layer1 pre=[1, -1.5] -> relu [1, 0]; out = 2*1 + 3*0 - 1 = 1
        y, _ = mlp.forward(np.array([1.0, 2.0]))
        assert np.allclose(y, [1.0])


class TestLayerSpec:
    def test_rejects_bad_kind(self):
        with pytest.raises(ValueError):
            LayerSpec("conv", 1, 1)

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            LayerSpec("linear", 0, 1)

    def test_rejects_bad_activation(self):
        with pytest.raises(ValueError):
            mlp_spec(2, [2], 1, hidden_act="swish")

    def test_activation_set_closed(self):
        assert set(ACTIVATIONS) == {"relu", "tanh", "sigmoid", "none"}


class TestTargetAttention:
    def test_single_history_returns_it(self):
        v = np.array([1.0, 2.0, 3.0])
        out, _ = target_attention([v], np.array([9.0, 1.0, -4.0]))
        assert np.allclose(out, v)

    def test_opposed_pair_softmax_arithmetic(self):
        # history=[t, -t], target=t -> weights softmax(1, -1), output ~0.762*t
        t = np.array([2.0, -1.0])
        out, cache = target_attention([t, -t], t)
        w = cache[5]
        expect_w = softmax(np.array([1.0, -1.0]))
        assert np.allclose(w, expect_w)
        assert np.allclose(w, [0.8807970779778823, 0.11920292202211755])
        assert np.allclose(out, (expect_w[0] - expect_w[1]) * t)
        assert np.allclose(out, 0.7615941559557649 * t)

    def test_zero_target_uniform_weights(self):
        hist = [np.array([1.0, 0.0]), np.array([0.0, 2.0]), np.array([3.0, 3.0])]
        out, cache = target_attention(hist, np.zeros(2))
        assert np.allclose(cache[5], 1.0 / 3.0)
        assert np.allclose(out, np.mean(hist, axis=0))

    def test_empty_history_errors(self):
        with pytest.raises(DimensionError):
            target_attention([], np.zeros(2))

    def test_heads_do_not_change_value(self):
        rng = np.random.default_rng(0)
        hist = [rng.normal(size=4) for _ in range(3)]
        t = rng.normal(size=4)
        out1, _ = target_attention(hist, t, heads=1)
        out2, _ = target_attention(hist, t, heads=2)
        assert np.allclose(out1, out2)

    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=30, deadline=None)
    def test_weights_simplex(self, n, seed):
        rng = np.random.default_rng(seed)
        hist = [rng.normal(size=3) for _ in range(n)]
        w = attention_weights(hist, rng.normal(size=3))
        assert np.all(w >= 0)
        assert np.isclose(w.sum(), 1.0)


class TestFMLayer:
    def make(self, n_fields, dim=2, linear_out=2, seed=0):
        store = ParamStore()
        fm = FMLayer(store, "fm", n_fields, dim, linear_out, np.random.default_rng(seed))
        return store, fm

    def test_orthogonal_fields_zero_cross(self):
        store, fm = self.make(2)
        y, _ = fm.forward([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert np.allclose(y[-1:], [0.0])

    def test_equal_fields_cross_two(self):
        store, fm = self.make(2)
        y, _ = fm.forward([np.array([1.0, 1.0]), np.array([1.0, 1.0])])
        assert np.allclose(y[-1:], [2.0])

    def test_three_fields_hand_computed(self):
        store, fm = self.make(3)
        a, b, c = np.array([1.0, 2.0]), np.array([-1.0, 0.5]), np.array([3.0, 3.0])
        y, _ = fm.forward([a, b, c])
        # brute-force pairs in (i, j) order: a.b, a.c, b.c
        assert np.allclose(y[-3:], [a @ b, a @ c, b @ c])

    def test_inconsistent_field_lengths(self):
        store, fm = self.make(2)
        with pytest.raises(DimensionError):
            fm.forward([np.zeros(2), np.zeros(3)])

    @given(st.integers(min_value=2, max_value=5), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=30, deadline=None)
    def test_permutation_symmetry_of_second_order(self, n, seed):
        rng = np.random.default_rng(seed)
        fields = [rng.normal(size=3) for _ in range(n)]
        base = pairwise_inner_products(fields)
        perm = rng.permutation(n)
        permuted = pairwise_inner_products([fields[i] for i in perm])
        assert np.allclose(sorted(base), sorted(permuted))

    def test_deterministic_forward(self):
        store, fm = self.make(3)
        fields = [np.array([0.1, 0.2]), np.array([0.3, -0.4]), np.array([1.0, 1.0])]
        y1, _ = fm.forward(fields)
        y2, _ = fm.forward(fields)
        assert np.array_equal(y1, y2)
