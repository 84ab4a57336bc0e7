"""Autodiff substrate: primitive values, backward passes, tape semantics."""

import math

import numpy as np
import pytest

import clearwater.gradcore as gc
from clearwater.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def _fd_check(fn, store, tol=1e-6, step=1e-4):
    err = gc.grad_check(fn, store, step=step)
    assert err < tol, f"max relative gradient error {err:.3e}"


def _weighted_scalar(y, w):
    return gc.reduce_sum(gc.mul(y, w))


class TestPrimitiveValues:
    def test_softplus_at_zero(self):
        v, (d,) = gc.primitive_forward_backward("softplus", np.array(0.0))
        assert v == pytest.approx(math.log(2.0), abs=1e-12)
        assert d == pytest.approx(0.5, abs=1e-12)

    def test_softplus_stable_tails(self):
        big = gc.softplus(np.array([40.0]))
        assert big[0] == pytest.approx(40.0, abs=1e-12)
        small = gc.softplus(np.array([-40.0]))
        assert 0.0 < small[0] < 1e-15

    def test_sigmoid_at_zero(self):
        v, (d,) = gc.primitive_forward_backward("sigmoid", np.array(0.0))
        assert v == pytest.approx(0.5, abs=1e-12)
        assert d == pytest.approx(0.25, abs=1e-12)

    def test_sigmoid_saturates_without_overflow(self):
        v = gc.sigmoid(np.array([-800.0, 800.0]))
        assert v[0] == 0.0 and v[1] == 1.0

    def test_exp_matches_reference(self):
        v, (d,) = gc.primitive_forward_backward("exp", np.array(-1.0))
        assert v == pytest.approx(0.36787944117144233, abs=1e-15)
        assert d == pytest.approx(v, abs=1e-15)

    def test_leaky_rectifier_two_sides(self):
        v, (d,) = gc.primitive_forward_backward("leaky_relu", np.array([2.0, -2.0]))
        np.testing.assert_allclose(v, [2.0, -0.02])
        np.testing.assert_allclose(d, [1.0, 0.01])

    def test_reciprocal(self):
        v, (d,) = gc.primitive_forward_backward("reciprocal", np.array(2.0))
        assert v == pytest.approx(0.5)
        assert d == pytest.approx(-0.25)

    def test_affine_small_case(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        b = np.array([0.5, -0.5, 0.0])
        v, (dx, dw, db) = gc.primitive_forward_backward("affine", x, w, b)
        np.testing.assert_allclose(v, [[1.5, 1.5, 3.0]])
        np.testing.assert_allclose(dx, [[2.0, 2.0]])  # row sums of w
        np.testing.assert_allclose(dw, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        np.testing.assert_allclose(db, [1.0, 1.0, 1.0])

    def test_normalize_returns_unit_rows(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((7, 3))
        y = gc.normalize(x)
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)

    def test_cos_angle_reference_pairs(self):
        u = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
        v = np.array([[0.0, 3.0, 0.0], [5.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        c = gc.cos_angle(u, v)
        np.testing.assert_allclose(c, [0.0, 1.0, math.cos(math.pi / 4)], atol=1e-12)

    def test_trilerp_vertex_hits_single_entry(self):
        table = np.arange(12, dtype=np.float64).reshape(6, 2)
        idx = np.array([[3, 0, 0, 0, 0, 0, 0, 0]])
        w = np.array([[1.0, 0, 0, 0, 0, 0, 0, 0]])
        out = gc.trilerp(table, idx, w)
        np.testing.assert_allclose(out, [table[3]])

    def test_trilerp_cell_center_averages_corners(self):
        rng = np.random.default_rng(5)
        table = rng.standard_normal((16, 2))
        idx = np.arange(8)[None, :]
        w = np.full((1, 8), 1.0 / 8.0)
        out = gc.trilerp(table, idx, w)
        np.testing.assert_allclose(out, table[:8].mean(axis=0, keepdims=True), atol=1e-12)

    def test_unknown_primitive_rejected(self):
        with pytest.raises(KeyError, match="unknown primitive"):
            gc.primitive_forward_backward("conv2d", np.zeros(3))


class TestPrimitiveGradients:
    """Backward of every primitive against central differences in float64."""

    def _elementwise_store(self, seed, n=100, lo=-3.0, hi=3.0):
        rng = np.random.default_rng(seed)
        store = gc.ParamStore()
        store.add("x", rng.uniform(lo, hi, size=n), dtype=np.float64)
        return store, rng.standard_normal(n)

    @pytest.mark.parametrize(
        "name,op,seed",
        [
            ("softplus", gc.softplus, 10),
            ("sigmoid", gc.sigmoid, 11),
            ("exp", gc.exp, 12),
            ("leaky_relu", gc.leaky_relu, 13),
            ("relu", gc.relu, 14),
            ("neg", gc.neg, 15),
        ],
    )
    def test_elementwise_ops(self, name, op, seed):
        store, w = self._elementwise_store(seed)
        _fd_check(lambda ctx: _weighted_scalar(op(ctx.param("x")), w), store)

    def test_reciprocal_away_from_pole(self):
        store, w = self._elementwise_store(16, lo=0.5, hi=4.0)
        _fd_check(lambda ctx: _weighted_scalar(gc.reciprocal(ctx.param("x")), w), store)

    def test_clamp_max(self):
        store, w = self._elementwise_store(17)
        _fd_check(lambda ctx: _weighted_scalar(gc.clamp_max(ctx.param("x"), 1.0), w), store)

    def test_mul_broadcast(self):
        rng = np.random.default_rng(18)
        store = gc.ParamStore()
        store.add("a", rng.standard_normal((6, 4, 3)), dtype=np.float64)
        store.add("b", rng.standard_normal(3), dtype=np.float64)
        w = rng.standard_normal((6, 4, 3))
        _fd_check(
            lambda ctx: _weighted_scalar(gc.mul(ctx.param("a"), ctx.param("b")), w),
            store,
        )

    def test_add_sub_broadcast(self):
        rng = np.random.default_rng(19)
        store = gc.ParamStore()
        store.add("a", rng.standard_normal((5, 3)), dtype=np.float64)
        store.add("b", rng.standard_normal((1, 3)), dtype=np.float64)
        w = rng.standard_normal((5, 3))

        def fn(ctx):
            s = gc.add(ctx.param("a"), ctx.param("b"))
            d = gc.sub(s, gc.mul(ctx.param("b"), 0.25))
            return _weighted_scalar(d, w)

        _fd_check(fn, store)

    def test_sum_axis_and_full(self):
        rng = np.random.default_rng(20)
        store = gc.ParamStore()
        store.add("x", rng.standard_normal((4, 5, 3)), dtype=np.float64)
        w = rng.standard_normal((4, 3))

        def fn(ctx):
            partial = gc.reduce_sum(ctx.param("x"), axis=1)
            return gc.reduce_sum(gc.mul(partial, w))

        _fd_check(fn, store)

    def test_cumsum(self):
        rng = np.random.default_rng(21)
        store = gc.ParamStore()
        store.add("x", rng.standard_normal((3, 16)), dtype=np.float64)
        w = rng.standard_normal((3, 16))
        _fd_check(lambda ctx: _weighted_scalar(gc.cumsum(ctx.param("x"), axis=1), w), store)

    def test_affine(self):
        rng = np.random.default_rng(22)
        store = gc.ParamStore()
        store.add("x", rng.standard_normal((7, 4)), dtype=np.float64)
        store.add("w", rng.standard_normal((4, 5)), dtype=np.float64)
        store.add("b", rng.standard_normal(5), dtype=np.float64)
        w = rng.standard_normal((7, 5))
        _fd_check(
            lambda ctx: _weighted_scalar(
                gc.affine(ctx.param("x"), ctx.param("w"), ctx.param("b")), w
            ),
            store,
        )

    def test_normalize(self):
        rng = np.random.default_rng(23)
        store = gc.ParamStore()
        store.add("x", rng.standard_normal((20, 3)) * 2.0, dtype=np.float64)
        w = rng.standard_normal((20, 3))
        _fd_check(lambda ctx: _weighted_scalar(gc.normalize(ctx.param("x")), w), store)

    def test_cos_angle(self):
        rng = np.random.default_rng(24)
        store = gc.ParamStore()
        store.add("u", rng.standard_normal((20, 3)), dtype=np.float64)
        store.add("v", rng.standard_normal((20, 3)), dtype=np.float64)
        w = rng.standard_normal(20)
        _fd_check(
            lambda ctx: _weighted_scalar(gc.cos_angle(ctx.param("u"), ctx.param("v")), w),
            store,
        )

    def test_trilerp(self):
        rng = np.random.default_rng(25)
        store = gc.ParamStore()
        store.add("table", rng.standard_normal((24, 2)), dtype=np.float64)
        idx = rng.integers(0, 24, size=(30, 8))
        wts = rng.random((30, 8))
        w = rng.standard_normal((30, 2))
        _fd_check(
            lambda ctx: _weighted_scalar(gc.trilerp(ctx.param("table"), idx, wts), w),
            store,
        )

    def test_concat_and_reshape(self):
        rng = np.random.default_rng(26)
        store = gc.ParamStore()
        store.add("a", rng.standard_normal((4, 2)), dtype=np.float64)
        store.add("b", rng.standard_normal((4, 3)), dtype=np.float64)
        w = rng.standard_normal(20)

        def fn(ctx):
            joined = gc.concat([ctx.param("a"), ctx.param("b")], axis=1)
            return _weighted_scalar(gc.reshape(joined, (20,)), w)

        _fd_check(fn, store)


class TestTapeSemantics:
    def test_gradient_accumulates_across_calls(self):
        store = gc.ParamStore()
        store.add("p", np.array([2.0, -1.0]))
        for _ in range(2):
            tape = gc.Tape()
            ctx = gc.EvalContext(store, tape)
            loss = gc.reduce_sum(gc.mul(ctx.param("p"), ctx.param("p")))
            gc.gradient_of(loss, store)
        np.testing.assert_allclose(store.grads("p"), [8.0, -4.0], rtol=1e-6)

    def test_accumulation_is_linear(self):
        rng = np.random.default_rng(31)
        x = rng.standard_normal(6)
        w1, w2 = rng.standard_normal(6), rng.standard_normal(6)

        store = gc.ParamStore()
        store.add("x", x, dtype=np.float64)
        tape = gc.Tape()
        ctx = gc.EvalContext(store, tape)
        gc.gradient_of(_weighted_scalar(gc.exp(ctx.param("x")), w1), store)
        gc.gradient_of(_weighted_scalar(gc.sigmoid(ctx.param("x")), w2), store)
        separate = store.grads("x").copy()

        store.zero_grads()
        tape2 = gc.Tape()
        ctx2 = gc.EvalContext(store, tape2)
        total = gc.add(
            _weighted_scalar(gc.exp(ctx2.param("x")), w1),
            _weighted_scalar(gc.sigmoid(ctx2.param("x")), w2),
        )
        gc.gradient_of(total, store)
        np.testing.assert_allclose(separate, store.grads("x"), atol=1e-12)

    def test_untouched_parameter_keeps_exact_zero(self):
        store = gc.ParamStore()
        store.add("used", np.array([1.0]))
        store.add("unused", np.array([5.0, 5.0]))
        tape = gc.Tape()
        ctx = gc.EvalContext(store, tape)
        gc.gradient_of(gc.reduce_sum(gc.exp(ctx.param("used"))), store)
        assert np.all(store.grads("unused") == 0.0)

    def test_cleared_tape_contributes_nothing(self):
        store = gc.ParamStore()
        store.add("p", np.array([1.0]))
        tape = gc.Tape()
        ctx = gc.EvalContext(store, tape)
        loss = gc.reduce_sum(gc.mul(ctx.param("p"), 3.0))
        tape.clear()
        gc.gradient_of(loss, store)
        assert np.all(store.grads("p") == 0.0)

    def test_mixed_tapes_rejected(self):
        store = gc.ParamStore()
        store.add("p", np.array([1.0]))
        a = gc.Tape().param(store, "p")
        b = gc.Tape().param(store, "p")
        with pytest.raises(gc.TapeError, match="different tapes"):
            gc.mul(a, b)

    def test_nonscalar_loss_rejected(self):
        store = gc.ParamStore()
        store.add("p", np.array([1.0, 2.0]))
        tape = gc.Tape()
        node = gc.exp(gc.EvalContext(store, tape).param("p"))
        with pytest.raises(gc.TapeError, match="scalar"):
            gc.gradient_of(node, store)

    def test_plain_array_loss_rejected(self):
        store = gc.ParamStore()
        with pytest.raises(gc.TapeError, match="not a recorded Node"):
            gc.gradient_of(np.array(1.0), store)

    def test_shared_leaf_sums_both_uses(self):
        store = gc.ParamStore()
        store.add("p", np.array([3.0]))
        tape = gc.Tape()
        ctx = gc.EvalContext(store, tape)
        loss = gc.reduce_sum(gc.add(ctx.param("p"), ctx.param("p")))
        gc.gradient_of(loss, store)
        np.testing.assert_allclose(store.grads("p"), [2.0])

    def test_untaped_ops_return_plain_arrays(self):
        out = gc.mul(gc.exp(np.array([0.0, 1.0])), 2.0)
        assert isinstance(out, np.ndarray)
        np.testing.assert_allclose(out, [2.0, 2.0 * math.e])

    def test_operator_sugar_matches_functions(self):
        store = gc.ParamStore()
        store.add("p", np.array([2.0]))
        tape = gc.Tape()
        p = gc.EvalContext(store, tape).param("p")
        expr = (p * 3.0 + 1.0 - p) / 2.0
        np.testing.assert_allclose(expr.value, [2.5])

    def test_nonfinite_input_names_primitive(self):
        with pytest.raises(gc.NonFiniteError, match="exp"):
            gc.exp(np.array([np.nan]))
        with pytest.raises(gc.NonFiniteError, match="mul"):
            gc.mul(np.array([np.inf]), np.array([1.0]))

    def test_normalize_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="norm"):
            gc.normalize(np.zeros((1, 3)))

    def test_trilerp_bad_index_rejected(self):
        table = np.zeros((4, 2))
        with pytest.raises(IndexError, match="out of range"):
            gc.trilerp(table, np.array([[4]]), np.array([[1.0]]))


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = gc.ParamStore()
        store.add("p", np.zeros(2))
        with pytest.raises(ValueError, match="already registered"):
            store.add("p", np.zeros(2))

    def test_names_are_lexicographic(self):
        store = gc.ParamStore()
        for name in ["w/b", "a/z", "a/a"]:
            store.add(name, np.zeros(1))
        assert store.names() == ["a/a", "a/z", "w/b"]

    def test_set_values_shape_guard(self):
        store = gc.ParamStore()
        store.add("p", np.zeros((2, 2)))
        with pytest.raises(ValueError, match="shape"):
            store.set_values("p", np.zeros(3))

    def test_default_dtype_is_float32(self):
        store = gc.ParamStore()
        store.add("p", [1.0, 2.0])
        assert store.values("p").dtype == np.float32
        assert store.grads("p").dtype == np.float32

    def test_clone_to_float64(self):
        store = gc.ParamStore()
        store.add("p", np.array([0.1], dtype=np.float32))
        dbl = store.clone(dtype=np.float64)
        assert dbl.values("p").dtype == np.float64
        assert dbl.values("p")[0] == pytest.approx(np.float32(0.1), abs=0)


class TestGradCheck:
    def test_step_bounds_enforced(self):
        store = gc.ParamStore()
        store.add("p", np.array([1.0]))
        with pytest.raises(ValueError, match="step"):
            gc.grad_check(lambda ctx: gc.reduce_sum(ctx.param("p")), store, step=0.5)

    def test_detects_nondeterministic_fn(self):
        store = gc.ParamStore()
        store.add("p", np.array([1.0]))
        rng = np.random.default_rng()

        def fn(ctx):
            return gc.reduce_sum(gc.mul(ctx.param("p"), rng.random()))

        with pytest.raises(gc.GradCheckError, match="deterministic"):
            gc.grad_check(fn, store)

    def test_flags_wrong_backward(self):
        store = gc.ParamStore()
        store.add("p", np.array([0.3, -0.7]))

        def fn(ctx):
            p = ctx.param("p")
            if isinstance(p, gc.Node):
                broken = gc.record("broken", np.exp(p.value), (p,), lambda g: (0.5 * g,))
                return gc.reduce_sum(broken)
            return np.exp(p).sum()

        assert gc.grad_check(fn, store) > 0.1

    def test_composite_chain_passes(self):
        rng = np.random.default_rng(40)
        store = gc.ParamStore()
        store.add("w", rng.standard_normal((3, 3)), dtype=np.float64)
        store.add("b", rng.standard_normal(3), dtype=np.float64)
        x = rng.standard_normal((5, 3))

        def fn(ctx):
            h = gc.leaky_relu(gc.affine(x, ctx.param("w"), ctx.param("b")))
            return gc.reduce_sum(gc.sigmoid(h))

        assert gc.grad_check(fn, store) < 1e-7


class TestCheckpoint:
    def _store(self, seed=50):
        rng = np.random.default_rng(seed)
        store = gc.ParamStore()
        store.add("field/grid/l0", rng.standard_normal((16, 2)).astype(np.float32))
        store.add("water/beta_raw", rng.standard_normal(3).astype(np.float32))
        store.add("field/sigma/w0", rng.standard_normal((4, 8)).astype(np.float32))
        return store

    def test_round_trip_is_bit_exact(self, tmp_path):
        store = self._store()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, meta={"a": 3.0, "step": 7})
        loaded, meta = load_checkpoint(path)
        assert meta == {"a": 3.0, "step": 7}
        assert loaded.names() == store.names()
        for name in store.names():
            got, want = loaded.values(name), store.values(name)
            assert got.dtype == np.float32 and got.shape == want.shape
            assert np.array_equal(got.view(np.uint32), want.view(np.uint32))

    def test_manifest_is_utf8_json_with_offsets(self, tmp_path):
        import json

        store = self._store()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store)
        manifest = json.loads(path.read_text(encoding="utf-8"))
        names = [p["name"] for p in manifest["params"]]
        assert names == sorted(names)
        offsets = [p["offset"] for p in manifest["params"]]
        sizes = [4 * int(np.prod(p["shape"])) for p in manifest["params"]]
        assert offsets == [0] + list(np.cumsum(sizes[:-1]))
        assert manifest["total_bytes"] == sum(sizes)

    def test_corrupt_manifest_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, self._store())
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(CheckpointError, match="unreadable"):
            load_checkpoint(path)

    def test_truncated_sidecar_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, self._store())
        blob = (tmp_path / "model.ckpt.bin").read_bytes()
        (tmp_path / "model.ckpt.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError, match="sidecar"):
            load_checkpoint(path)

    def test_non_float32_store_rejected(self, tmp_path):
        store = gc.ParamStore()
        store.add("p", np.zeros(2), dtype=np.float64)
        with pytest.raises(CheckpointError, match="float32"):
            save_checkpoint(tmp_path / "m.ckpt", store)
