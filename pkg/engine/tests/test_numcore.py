import pytest
import numpy as np

from dama.core.exceptions import ConfigurationError, NonFiniteError, ShapeMismatchError
from dama.numcore import (
    GradientContext,
    ParameterStore,
    Rng,
    add,
    clip_grad_norm,
    global_norm,
    matmul,
    scale,
    svd,
    transpose,
)


def numeric_gradient(loss_fn, store: ParameterStore, name: str, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn() with respect to store[name]."""
    value = store[name].value
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = loss_fn()
        flat[i] = original - eps
        minus = loss_fn()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(analytic) + np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / denom


def check_gradients(build_loss, store: ParameterStore, tol: float = 1e-4):
    """Compare ctx.backward against finite differences for every trainable parameter."""
    ctx = GradientContext(store)
    grads = ctx.backward(build_loss(ctx))

    def loss_value():
        return float(build_loss(GradientContext(store, grad_enabled=False)).value)

    for name in store.trainable_names():
        numeric = numeric_gradient(loss_value, store, name)
        assert relative_error(grads[name], numeric) <= tol, name
    return grads


class TestMatrix:
    """Test dense matrix helpers."""

    def test_identity_product(self, rng):
        """Test I_3 times M returns M."""
        m = rng.normal(size=(3, 4))
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_hand_computed_product(self):
        """Test a 2x2 by 2x1 product."""
        result = matmul([[1, 2], [3, 4]], [[0], [1]])
        assert result.tolist() == [[2.0], [4.0]]

    def test_matches_triple_loop(self, rng):
        """Test matmul against a naive triple loop."""
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        expected = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(matmul(a, b) - expected)) <= 1e-12

    def test_associativity(self, rng):
        """Test (AB)C equals A(BC) within 1e-9 relative error."""
        a, b, c = rng.normal(size=(6, 5)), rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) / np.linalg.norm(left) <= 1e-9

    def test_dimension_mismatch_names_both_shapes(self):
        """Test mismatched inner dimensions are rejected with both shapes."""
        with pytest.raises(ShapeMismatchError) as exc:
            matmul(np.ones((2, 3)), np.ones((4, 2)))
        assert "2x3" in exc.value.message and "4x2" in exc.value.message

    def test_non_finite_input_rejected(self):
        """Test NaN input is rejected."""
        with pytest.raises(NonFiniteError):
            matmul(np.array([[np.nan]]), np.ones((1, 1)))

    def test_add_transpose_scale(self, rng):
        """Test the elementwise helpers."""
        a = rng.normal(size=(3, 2))
        assert np.array_equal(transpose(a), a.T)
        assert np.array_equal(add(a, a), 2 * a)
        assert np.array_equal(scale(a, 3.0), 3.0 * a)
        with pytest.raises(ShapeMismatchError):
            add(a, a.T)


class TestSvd:
    """Test one-sided Jacobi SVD."""

    def test_diagonal_matrix(self):
        """Test diag(3, 2, 1) gives sigma [3, 2, 1] and unit right vectors."""
        result = svd(np.diag([3.0, 2.0, 1.0]))
        assert np.allclose(result.sigma, [3.0, 2.0, 1.0], atol=1e-14)
        assert np.allclose(np.abs(result.vt), np.eye(3), atol=1e-14)

    def test_zero_matrix(self):
        """Test a zero matrix has zero singular values."""
        result = svd(np.zeros((4, 2)))
        assert result.sigma.tolist() == [0.0, 0.0]
        assert np.allclose(result.u.T @ result.u, np.eye(2), atol=1e-12)

    def test_random_matrix_against_gram_eigenvalues(self, rng):
        """Test reconstruction and sigma against a symmetric eigensolver."""
        w = rng.normal(size=(64, 48))
        result = svd(w)
        assert np.max(np.abs(result.reconstruct() - w)) <= 1e-10
        oracle = np.sqrt(np.clip(np.linalg.eigvalsh(w.T @ w)[::-1], 0.0, None))
        assert np.max(np.abs(result.sigma - oracle)) <= 1e-8

    def test_invariants(self, rng):
        """Test orthonormal factors, sorted sigma and the sign convention."""
        result = svd(rng.normal(size=(12, 9)))
        k = result.rank_bound
        assert k == 9
        assert np.allclose(result.u.T @ result.u, np.eye(k), atol=1e-10)
        assert np.allclose(result.vt @ result.vt.T, np.eye(k), atol=1e-10)
        assert np.all(np.diff(result.sigma) <= 0)
        for j in range(k):
            lead = np.argmax(np.abs(result.u[:, j]))
            assert result.u[lead, j] > 0

    def test_wide_matrix(self, rng):
        """Test a matrix with more columns than rows."""
        w = rng.normal(size=(5, 11))
        result = svd(w)
        assert result.u.shape == (5, 5) and result.vt.shape == (5, 11)
        assert np.max(np.abs(result.reconstruct() - w)) <= 1e-10

    def test_transpose_has_same_sigma(self, rng):
        """Test svd(W^T) and svd(W) share singular values."""
        w = rng.normal(size=(10, 7))
        assert np.max(np.abs(svd(w).sigma - svd(w.T).sigma)) <= 1e-10

    def test_rank_deficient_reconstructs(self, rng):
        """Test a rank-one matrix."""
        w = np.outer(rng.normal(size=6), rng.normal(size=4))
        result = svd(w)
        assert np.max(np.abs(result.reconstruct() - w)) <= 1e-10
        assert np.all(result.sigma[1:] <= 1e-10 * result.sigma[0])

    def test_deterministic(self, rng):
        """Test two runs are bit-identical."""
        w = rng.normal(size=(9, 6))
        first, second = svd(w), svd(w)
        assert np.array_equal(first.vt, second.vt)
        assert np.array_equal(first.sigma, second.sigma)

    def test_non_finite_rejected(self):
        """Test Inf input is rejected."""
        with pytest.raises(NonFiniteError):
            svd(np.array([[1.0, np.inf]]))

    @pytest.mark.slow
    def test_many_random_shapes(self):
        """Test reconstruction on 200 random matrices up to 128x96."""
        gen = np.random.default_rng(7)
        for _ in range(200):
            m, n = int(gen.integers(1, 129)), int(gen.integers(1, 97))
            w = gen.normal(size=(m, n))
            result = svd(w)
            assert np.max(np.abs(result.reconstruct() - w)) <= 1e-10
            k = result.rank_bound
            assert np.allclose(result.vt @ result.vt.T, np.eye(k), atol=1e-8)


class TestRng:
    """Test the seeded generator."""

    def test_same_seed_same_stream(self):
        """Test identical seeds draw identical values."""
        assert np.array_equal(Rng(5).uniform(100), Rng(5).uniform(100))

    def test_bulk_equals_sequential(self):
        """Test one bulk draw equals two consecutive draws."""
        bulk = Rng(3).next_u64(10)
        rng = Rng(3)
        parts = np.concatenate([rng.next_u64(4), rng.next_u64(6)])
        assert np.array_equal(bulk, parts)

    def test_spawn_streams_differ(self):
        """Test child streams differ from each other and from the parent."""
        root = Rng(11)
        a, b = root.spawn(0).uniform(16), root.spawn(1).uniform(16)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, Rng(11).spawn(0).uniform(16))

    def test_uniform_range_and_moments(self):
        """Test uniforms lie in [0, 1) with mean near one half."""
        draws = Rng(0).uniform(100_000)
        assert draws.min() >= 0.0 and draws.max() < 1.0
        assert abs(draws.mean() - 0.5) < 5 * np.sqrt(1 / 12 / draws.size)

    def test_normal_moments(self):
        """Test Gaussian draws have the requested mean and scale."""
        draws = Rng(2).normal(100_000, std=2.0, mean=1.0)
        assert abs(draws.mean() - 1.0) < 5 * 2.0 / np.sqrt(draws.size)
        assert abs(draws.std() - 2.0) < 0.05

    def test_permutation(self):
        """Test permutation covers every index once."""
        perm = Rng(4).permutation(50)
        assert sorted(perm.tolist()) == list(range(50))

    def test_integers_in_range(self):
        """Test integer draws stay within [low, high)."""
        draws = Rng(9).integers(3, 7, 1000)
        assert draws.min() >= 3 and draws.max() <= 6


class TestParameterStore:
    """Test parameter registration."""

    def test_duplicate_rejected(self):
        """Test registering a name twice is rejected."""
        store = ParameterStore()
        store.register("w", np.zeros((2, 2)))
        with pytest.raises(ConfigurationError):
            store.register("w", np.zeros((2, 2)))

    def test_count_respects_trainable(self):
        """Test trainable-only counting."""
        store = ParameterStore()
        store.register("a", np.zeros((2, 3)))
        store.register("b", np.zeros(4), trainable=False)
        assert store.count() == 10
        assert store.count(trainable_only=True) == 6


class TestAutograd:
    """Test reverse-mode gradients against finite differences."""

    def test_linear_case(self, rng):
        """Test grad of sum(W x) is 1 x^T broadcast over rows."""
        store = ParameterStore()
        store.register("w", rng.normal(size=(3, 4)))
        x = rng.normal(size=(4, 1))
        ctx = GradientContext(store)
        grads = ctx.backward(ctx.sum(ctx.matmul(ctx.param("w"), x)))
        assert np.allclose(grads["w"], np.ones((3, 1)) @ x.T, atol=1e-14)

    def test_frozen_parameter_absent(self, rng):
        """Test frozen parameters get no gradient entry."""
        store = ParameterStore()
        store.register("w", rng.normal(size=(2, 2)))
        store.register("frozen", rng.normal(size=(2, 2)), trainable=False)
        ctx = GradientContext(store)
        loss = ctx.sum(ctx.matmul(ctx.param("w"), ctx.param("frozen")))
        grads = ctx.backward(loss)
        assert "frozen" not in grads and "w" in grads

    def test_non_scalar_loss_rejected(self, rng):
        """Test backward on a non-scalar node is rejected."""
        store = ParameterStore()
        store.register("w", rng.normal(size=(2, 2)))
        ctx = GradientContext(store)
        with pytest.raises(ShapeMismatchError):
            ctx.backward(ctx.param("w"))

    def test_elementwise_and_shape_ops(self, rng):
        """Test add, sub, mul, scale, transpose, reshape and permute."""
        store = ParameterStore()
        store.register("a", rng.normal(size=(2, 3, 4)))
        store.register("b", rng.normal(size=(3, 4)))
        readout = rng.normal(size=(4, 3, 2))

        def build(ctx):
            a, b = ctx.param("a"), ctx.param("b")
            mixed = ctx.sub(ctx.mul(ctx.add(a, b), b), ctx.scale(a, 0.5))
            moved = ctx.permute(ctx.reshape(mixed, (2, 3, 4)), (2, 1, 0))
            return ctx.sum(ctx.mul(moved, readout))

        check_gradients(build, store)

    def test_batched_matmul_with_broadcast(self, rng):
        """Test matmul gradients with a broadcast right operand."""
        store = ParameterStore()
        store.register("x", rng.normal(size=(2, 3, 4)))
        store.register("w", rng.normal(size=(5, 4)))
        readout = rng.normal(size=(2, 3, 5))

        def build(ctx):
            out = ctx.matmul(ctx.param("x"), ctx.transpose(ctx.param("w")))
            return ctx.sum(ctx.mul(out, readout))

        check_gradients(build, store)

    def test_softmax_with_mask(self, rng):
        """Test masked softmax rows sum to one and gradients match."""
        store = ParameterStore()
        store.register("z", rng.normal(size=(3, 5)))
        mask = np.where(np.arange(5) < 3, 0.0, -1e30)[None, :].repeat(3, axis=0)
        readout = rng.normal(size=(3, 5))
        ctx = GradientContext(store, grad_enabled=False)
        probs = ctx.softmax(ctx.param("z"), mask).value
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(probs[:, 3:] == 0.0)

        check_gradients(
            lambda ctx: ctx.sum(ctx.mul(ctx.softmax(ctx.param("z"), mask), readout)), store
        )

    def test_layer_norm_and_gelu(self, rng):
        """Test layer norm and GELU gradients."""
        store = ParameterStore()
        store.register("x", rng.normal(size=(4, 6)))
        store.register("gamma", 1.0 + 0.1 * rng.normal(size=6))
        store.register("beta", 0.1 * rng.normal(size=6))
        readout = rng.normal(size=(4, 6))

        def build(ctx):
            normed = ctx.layer_norm(ctx.param("x"), ctx.param("gamma"), ctx.param("beta"))
            return ctx.sum(ctx.mul(ctx.gelu(normed), readout))

        check_gradients(build, store)

    def test_embedding_with_repeated_ids(self, rng):
        """Test embedding gradients accumulate over repeated rows."""
        store = ParameterStore()
        store.register("table", rng.normal(size=(6, 3)))
        ids = np.array([[0, 2, 2], [5, 0, 1]])
        readout = rng.normal(size=(2, 3, 3))
        check_gradients(
            lambda ctx: ctx.sum(ctx.mul(ctx.embedding(ctx.param("table"), ids), readout)), store
        )

    def test_embedding_out_of_range(self, rng):
        """Test an out-of-range id is rejected."""
        store = ParameterStore()
        store.register("table", rng.normal(size=(3, 2)))
        ctx = GradientContext(store)
        with pytest.raises(ShapeMismatchError):
            ctx.embedding(ctx.param("table"), np.array([3]))

    def test_cross_entropy_with_ignore(self, rng):
        """Test cross-entropy value and gradient with ignored positions."""
        store = ParameterStore()
        store.register("logits", rng.normal(size=(2, 3, 4)))
        targets = np.array([[1, -100, 3], [0, 2, -100]])
        ctx = GradientContext(store, grad_enabled=False)
        value = float(ctx.cross_entropy(ctx.param("logits"), targets).value)
        logits = store["logits"].value
        log_probs = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        expected = -np.mean([log_probs[0, 0, 1], log_probs[0, 2, 3], log_probs[1, 0, 0], log_probs[1, 1, 2]])
        assert abs(value - expected) <= 1e-12

        grads = check_gradients(lambda ctx: ctx.cross_entropy(ctx.param("logits"), targets), store)
        assert np.all(grads["logits"][0, 1] == 0.0)

    def test_all_ignored_rejected(self, rng):
        """Test a batch with no scored targets is rejected."""
        store = ParameterStore()
        store.register("logits", rng.normal(size=(1, 2, 3)))
        ctx = GradientContext(store)
        with pytest.raises(ShapeMismatchError):
            ctx.cross_entropy(ctx.param("logits"), np.full((1, 2), -100))


class TestGradientClipping:
    """Test global-norm clipping at 5.0."""

    def test_clips_large_gradients(self, rng):
        """Test the clipped norm is at most the threshold."""
        grads = {"a": 10 * rng.normal(size=(4, 4)), "b": 10 * rng.normal(size=3)}
        clipped, norm = clip_grad_norm(grads, 5.0)
        assert norm > 5.0
        assert global_norm(clipped) <= 5.0 + 1e-9

    def test_small_gradients_untouched(self):
        """Test gradients under the threshold pass through unchanged."""
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_grad_norm(grads, 5.0)
        assert norm == pytest.approx(0.5)
        assert clipped["a"] is grads["a"]

    def test_non_finite_norm_rejected(self):
        """Test a NaN gradient is rejected."""
        with pytest.raises(NonFiniteError):
            clip_grad_norm({"a": np.array([np.nan])})
