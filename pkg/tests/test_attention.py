import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensa import diffcore as dc
from ensa import reference as ref
from ensa.attention import (
    HeadsConfig,
    Selection,
    compress_balls,
    compressed_attention,
    gate_combine,
    init_attention_params,
    local_attention,
    nsa_attention,
    project_qkv,
    relative_offsets,
    score_eval_count,
    select_topk,
    selected_attention,
)
from ensa.balltree import build_ball_tree
from ensa.selftest import attention_oracle_error, local_oracle_error, random_attention_instance

C = dc.constant


def attention_store(rng, hidden=8, heads=2, prefix="a"):
    store = dc.ParamStore()
    init_attention_params(store, prefix, hidden, heads, rng)
    return store


def zero_bias(store, prefix="a"):
    for name in ("w2", "b2"):
        key = f"{prefix}.loc.bias.{name}"
        store.set(key, np.zeros_like(store.values[key]))


class TestProjection:
    def test_identity_weights(self, rng):
        store = attention_store(rng)
        for w in ("wq", "wk", "wv"):
            store.set(f"a.sel.{w}", np.eye(8))
        x = rng.normal(size=(4, 8))
        for t in project_qkv(C(x), store, "a", "sel"):
            np.testing.assert_array_equal(t.value, x)

    def test_zero_input(self, rng):
        store = attention_store(rng)
        for t in project_qkv(C(np.zeros((4, 8))), store, "a", "loc"):
            assert not t.value.any()

    def test_matches_loop(self, rng):
        store = attention_store(rng)
        x = rng.normal(size=(3, 8))
        q, _, _ = project_qkv(C(x), store, "a", "cmp")
        np.testing.assert_allclose(q.value, ref.matmul(x, store.values["a.cmp.wq"]), atol=1e-13)

    def test_unknown_branch(self, rng):
        with pytest.raises(ValueError):
            project_qkv(C(np.zeros((4, 8))), attention_store(rng), "a", "window")


class TestCompression:
    def test_toy_has_four_tokens(self, toy, rng):
        tree = build_ball_tree(toy, 8, 4)
        store = attention_store(rng)
        x = C(rng.normal(size=(16, 8)))
        comp = compress_balls(x, x, tree.positions, tree, store, "a")
        assert comp.k.shape == (4, 8) and comp.centroids.shape == (4, 3)
        np.testing.assert_allclose(comp.centroids[:, 0], [1.5, 5.5, 9.5, 13.5])

    def test_constant_rows_identity_map(self, toy, rng):
        tree = build_ball_tree(toy, 8, 4)
        store = attention_store(rng)
        store.set("a.cmp.wck", np.eye(8))
        row = rng.normal(size=(1, 8))
        comp = compress_balls(C(np.repeat(row, 16, axis=0)), C(np.zeros((16, 8))), tree.positions, tree, store, "a")
        np.testing.assert_allclose(comp.k.value, np.repeat(row, 4, axis=0), atol=1e-15)

    def test_padding_excluded_from_mean(self, rng):
        tree = build_ball_tree(rng.normal(size=(13, 3)), 4, 4)
        store = attention_store(rng)
        store.set("a.cmp.wck", np.eye(8))
        k = rng.normal(size=(16, 8))
        comp = compress_balls(C(k), C(k), tree.positions, tree, store, "a")
        np.testing.assert_allclose(comp.k.value, ref.masked_ball_mean(k, tree.mask, 4), atol=1e-14)
        assert comp.ball_mask.all()


class TestCompressedAttention:
    def test_single_ball(self, rng):
        q = rng.normal(size=(3, 4))
        v = rng.normal(size=(1, 4))
        out = compressed_attention(C(q), C(rng.normal(size=(1, 4))), C(v), np.array([True]), HeadsConfig(2, 2))
        np.testing.assert_allclose(out.values.value, np.repeat(v, 3, axis=0), atol=1e-15)
        np.testing.assert_array_equal(out.probs, 1.0)

    def test_equal_logits_average_values(self, rng):
        v = rng.normal(size=(5, 4))
        out = compressed_attention(C(np.zeros((2, 4))), C(rng.normal(size=(5, 4))), C(v), np.ones(5, bool), HeadsConfig(2, 2))
        np.testing.assert_allclose(out.values.value, np.repeat(v.mean(0, keepdims=True), 2, axis=0), atol=1e-15)

    def test_closed_form_probabilities(self):
        # one head of width 1: logit_j = q * k_j
        k = np.array([[0.0], [math.log(2)], [math.log(4)]])
        out = compressed_attention(C(np.ones((1, 1))), C(k), C(np.zeros((3, 1))), np.ones(3, bool), HeadsConfig(1, 1))
        np.testing.assert_allclose(out.probs[0, 0], [1 / 7, 2 / 7, 4 / 7], atol=1e-15)

    def test_all_masked_is_an_error(self, rng):
        with pytest.raises(ValueError):
            compressed_attention(C(np.zeros((2, 2))), C(np.zeros((2, 2))), C(np.zeros((2, 2))), np.zeros(2, bool), HeadsConfig(1, 2))


class TestSelection:
    def test_tie_goes_to_lower_index(self):
        sel = select_topk(np.array([[0.1, 0.5, 0.2, 0.2]]), 2, np.array([1]))
        assert sel.indices.tolist() == [[1, 2]]

    def test_own_ball_forced_in(self):
        sel = select_topk(np.array([[0.1, 0.5, 0.2, 0.2]]), 2, np.array([0]))
        assert sel.indices.tolist() == [[0, 1]]

    def test_all_balls(self, rng):
        sel = select_topk(rng.random((5, 6)), 6, rng.integers(0, 6, 5))
        assert (sel.indices == np.arange(6)).all()

    def test_sums_over_heads(self):
        probs = np.array([[[0.9, 0.1, 0.0], [0.0, 0.5, 0.5]]])  # sums: .9 .6 .5
        assert select_topk(probs, 1, np.array([0])).indices.tolist() == [[0]]
        assert select_topk(probs, 2, np.array([2])).indices.tolist() == [[0, 2]]

    def test_random_matches_reference(self, rng):
        scores = rng.random((20, 8))
        own = rng.integers(0, 8, 20)
        got = select_topk(scores, 3, own).indices
        for i in range(20):
            assert got[i].tolist() == ref.topk_with_own(list(scores[i]), 3, int(own[i]))

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_selection_validity(self, data):
        nb = data.draw(st.integers(1, 10))
        n = data.draw(st.integers(1, 6))
        k = data.draw(st.integers(1, nb))
        scores = np.array(data.draw(st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=nb, max_size=nb), min_size=n, max_size=n)))
        own = np.array(data.draw(st.lists(st.integers(0, nb - 1), min_size=n, max_size=n)))
        sel = select_topk(scores, k, own).indices
        assert sel.shape == (n, k)
        assert (np.diff(sel, axis=1) > 0).all()
        assert all(own[i] in sel[i] for i in range(n))
        for i in range(n):
            assert sel[i].tolist() == ref.topk_with_own(list(scores[i]), k, int(own[i]))

    def test_bad_k(self):
        with pytest.raises(ValueError):
            select_topk(np.ones((1, 3)), 4, np.array([0]))


class TestSelectedAttention:
    @pytest.mark.parametrize("n", [16, 32, 64, 23])
    def test_all_balls_equals_dense(self, n, rng):
        assert attention_oracle_error(n, rng) <= 1e-10

    def test_own_ball_equals_local_with_zero_bias(self, rng):
        tree, q, k, v, heads = random_attention_instance(24, rng, c=4)
        assert tree.m == tree.c == 4
        own = (np.arange(tree.n_padded) // 4)[:, None]
        sel = selected_attention(C(q), C(k), C(v), Selection(own), tree, tree.mask, heads)
        store = attention_store(rng)
        zero_bias(store)
        loc = local_attention(C(q), C(k), C(v), tree.positions, tree, tree.mask, store, "a", heads)
        np.testing.assert_allclose(sel.values.value, loc.values.value, atol=1e-10)

    def test_single_point_returns_own_value(self, rng):
        tree = build_ball_tree(np.zeros((1, 3)), 4, 4)
        q, k, v = (rng.normal(size=(4, 4)) for _ in range(3))
        sel = Selection(np.zeros((4, 1), dtype=int))
        out = selected_attention(C(q), C(k), C(v), sel, tree, tree.mask, HeadsConfig(2, 2))
        np.testing.assert_allclose(out.values.value[0], v[0], atol=1e-15)

    def test_masked_slots_get_no_probability(self, rng):
        tree, q, k, v, heads = random_attention_instance(13, rng)
        nb = tree.n_padded // 4
        out = selected_attention(C(q), C(k), C(v), Selection(np.tile(np.arange(nb), (16, 1))), tree, tree.mask, heads)
        masked = ~tree.mask[out.keys]
        assert (out.probs.transpose(0, 2, 1)[masked] < 1e-12).all()
        np.testing.assert_allclose(out.probs.sum(axis=2), 1.0, atol=1e-9)


class TestLocalAttention:
    @pytest.mark.parametrize("n", [16, 32, 64])
    def test_spanning_ball_equals_dense(self, n, rng):
        assert local_oracle_error(n, rng) <= 1e-10

    def test_unit_ball_returns_own_value(self, rng):
        tree = build_ball_tree(rng.normal(size=(6, 3)), 1, 1)
        q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
        store = attention_store(rng, hidden=4)
        out = local_attention(C(q), C(k), C(v), tree.positions, tree, tree.mask, store, "a", HeadsConfig(2, 2))
        np.testing.assert_allclose(out.values.value, v, atol=1e-15)

    def test_diagonal_bias_is_constant(self, rng):
        tree = build_ball_tree(rng.normal(size=(16, 3)), 4, 4)
        off = relative_offsets(tree.positions, 4).reshape(16, 4, 3)
        own = off[np.arange(16), np.arange(16) % 4]
        assert not own.any()

    def test_bias_shifts_logits(self, rng):
        tree = build_ball_tree(rng.normal(size=(8, 3)), 8, 8)
        store = attention_store(rng, hidden=4)
        zero_bias(store)
        store.set("a.loc.bias.b2", np.array([[3.0, -1.0]]))  # constant per head: softmax-invariant
        q, k, v = (rng.normal(size=(8, 4)) for _ in range(3))
        out = local_attention(C(q), C(k), C(v), tree.positions, tree, tree.mask, store, "a", HeadsConfig(2, 2))
        np.testing.assert_allclose(out.values.value, ref.dense_attention(q, k, v, 2), atol=1e-12)


class TestGate:
    def test_saturated_gate_picks_compressed(self, rng):
        store = attention_store(rng)
        store.set("a.gate.w", np.zeros((8, 3)))
        store.set("a.gate.b", np.array([[30.0, -30.0, -30.0]]))
        outs = {b: C(rng.normal(size=(4, 8))) for b in ("cmp", "sel", "loc")}
        y, gates = gate_combine(C(rng.normal(size=(4, 8))), outs, store, "a")
        np.testing.assert_allclose(y.value, outs["cmp"].value @ store.values["a.wo"], atol=1e-11)
        assert ((gates > 0) & (gates < 1)).all()

    def test_half_gates(self, rng):
        store = attention_store(rng)
        store.set("a.gate.w", np.zeros((8, 3)))
        y_in = rng.normal(size=(4, 8))
        outs = {b: C(y_in) for b in ("cmp", "sel", "loc")}
        y, _ = gate_combine(C(rng.normal(size=(4, 8))), outs, store, "a")
        np.testing.assert_allclose(y.value, 1.5 * y_in @ store.values["a.wo"], atol=1e-13)

    def test_matches_loop(self, rng):
        store = attention_store(rng)
        x = rng.normal(size=(3, 8))
        outs = {b: rng.normal(size=(3, 8)) for b in ("cmp", "loc")}
        y, _ = gate_combine(C(x), {b: C(o) for b, o in outs.items()}, store, "a")
        expect = ref.gate_combine(x, outs, store.values["a.gate.w"], store.values["a.gate.b"], store.values["a.wo"])
        np.testing.assert_allclose(y.value, expect, atol=1e-12)


class TestNsaLayer:
    def run_toy(self, toy, rng, **kw):
        tree = build_ball_tree(toy, 8, 4)
        store = attention_store(rng, hidden=8, heads=2)
        x = C(rng.normal(size=(16, 8)))
        return nsa_attention(x, tree, store, "a", HeadsConfig(2, 4), k=1, **kw), tree

    def test_toy_access_pattern(self, toy, rng):
        out, _ = self.run_toy(toy, rng)
        assert out.branches["cmp"].keys.shape == (16, 4)
        assert out.branches["sel"].keys.shape == (16, 4)
        assert out.branches["loc"].keys.shape == (16, 8)
        # k=1 selects the query's own block of four
        np.testing.assert_array_equal(out.branches["sel"].keys // 4, np.repeat(np.arange(4), 4)[:, None] * np.ones((1, 4), int))
        np.testing.assert_array_equal(out.branches["loc"].keys // 8, (np.arange(16) // 8)[:, None] * np.ones((1, 8), int))

    def test_score_count(self, toy, rng):
        out, tree = self.run_toy(toy, rng)
        assert out.score_evals == score_eval_count(16, 8, 4, 1) == ref.score_evals(16, 8, 4, 1)

    def test_degenerate_sizes_share_token_set(self, rng):
        tree = build_ball_tree(rng.normal(size=(8, 3)), 8, 8)
        store = attention_store(rng)
        out = nsa_attention(C(rng.normal(size=(8, 8))), tree, store, "a", HeadsConfig(2, 4), k=1)
        assert out.branches["cmp"].keys.shape == (8, 1)
        np.testing.assert_array_equal(out.branches["sel"].keys, out.branches["loc"].keys)

    def test_probabilities_normalised(self, rng):
        tree = build_ball_tree(rng.normal(size=(27, 3)), 8, 4)
        store = attention_store(rng)
        out = nsa_attention(C(rng.normal(size=(32, 8))), tree, store, "a", HeadsConfig(2, 4), k=2)
        for br in out.branches.values():
            np.testing.assert_allclose(br.probs.sum(axis=2), 1.0, atol=1e-9)
        assert ((out.gates > 0) & (out.gates < 1)).all()

    def test_compressed_can_leave_the_sum(self, toy, rng):
        a, _ = self.run_toy(toy, np.random.default_rng(5))
        b, _ = self.run_toy(toy, np.random.default_rng(5), use_compressed_in_sum=False)
        assert not np.allclose(a.value.value, b.value.value)

    def test_gradients(self, toy, rng):
        tree = build_ball_tree(toy, 8, 4)
        store = attention_store(rng, hidden=8, heads=2)
        x = rng.normal(size=(16, 8))
        y = rng.normal(size=(16, 8))
        f = lambda s: dc.sum_all(dc.mul(nsa_attention(C(x), tree, s, "a", HeadsConfig(2, 4), k=2).value, C(y)))  # noqa: E731
        rep = dc.grad_check(f, store)
        assert rep.passed, rep.summary()


@pytest.mark.parametrize("n,m,c,k", [(64, 8, 4, 2), (1024, 32, 32, 4), (96, 32, 8, 3)])
def test_count_formula(n, m, c, k):
    assert score_eval_count(n, m, c, k) == ref.score_evals(n, m, c, k)
