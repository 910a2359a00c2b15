import numpy as np
import pytest

from gcnmod import gcn, graph
from gcnmod.gcn import (
    AdamState, EarlyStopper, GcnError, GcnModel, ShapeError, StaleCacheError,
    TrainConfig, adam_step, backward, forward, glorot_init, loss, predict, train,
)


def random_problem(rng, n=8, c=5, h=3, k=3):
    """Small random graph + features + one-hot labels."""
    x = rng.normal(size=(n, c))
    g = graph.build_graph(x, k=k)
    ahat = graph.normalize(g)
    y = np.zeros((n, 2))
    y[np.arange(n), rng.integers(0, 2, size=n)] = 1.0
    return x, ahat, y


def dense_forward_oracle(x, ahat_dense, w0, w1):
    """Straight-line dense reimplementation of the two-layer forward pass."""
    hidden = ahat_dense @ x @ w0
    hidden = np.where(hidden > 0.0, hidden, 0.0)
    logits = ahat_dense @ hidden @ w1
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_oracle(z, y, train_idx, model, weight_decay):
    """Scalar double loop over labelled nodes and classes."""
    total = 0.0
    for i in train_idx:
        for j in range(y.shape[1]):
            total -= y[i, j] * np.log(max(z[i, j], 1e-12))
    total += 0.5 * weight_decay * (np.sum(model.w0 ** 2) + np.sum(model.w1 ** 2))
    return total


def fd_gradients(x, ahat, model, y, train_idx, weight_decay, eps=1e-5):
    """Central finite differences over every weight."""
    grads = []
    for w in (model.w0, model.w1):
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            orig = w[idx]
            w[idx] = orig + eps
            cache = forward(x, ahat, model)
            up = loss(cache.z, y, train_idx, model, weight_decay)
            w[idx] = orig - eps
            cache = forward(x, ahat, model)
            down = loss(cache.z, y, train_idx, model, weight_decay)
            w[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return tuple(grads)


def max_relative_error(analytic, numeric):
    err = 0.0
    for a, b in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
        err = max(err, float(np.max(np.abs(a - b) / denom)))
    return err


class TestForward:
    def test_rows_sum_to_one(self, rng):
        x, ahat, _ = random_problem(rng)
        model = glorot_init(5, 3, seed=0)
        z = forward(x, ahat, model).z
        assert z.sum(axis=1) == pytest.approx(np.ones(len(x)), abs=1e-9)
        assert np.all(z >= 0.0) and np.all(z <= 1.0)

    def test_zero_output_weights_give_uniform(self, rng):
        x, ahat, _ = random_problem(rng)
        model = glorot_init(5, 3, seed=0)
        model.w1[:] = 0.0
        z = forward(x, ahat, model).z
        assert z == pytest.approx(np.full((len(x), 2), 0.5))

    def test_matches_dense_oracle(self, rng):
        x, ahat, _ = random_problem(rng, n=4, c=3, h=2, k=2)
        model = glorot_init(3, 2, seed=1)
        z = forward(x, ahat, model).z
        expected = dense_forward_oracle(x, ahat.matrix.toarray(), model.w0, model.w1)
        assert np.max(np.abs(z - expected)) < 1e-10

    def test_shape_mismatch(self, rng):
        x, ahat, _ = random_problem(rng)
        model = glorot_init(7, 3, seed=0)  # wrong input dim
        with pytest.raises(ShapeError):
            forward(x, ahat, model)

    def test_dropout_needs_rng(self, rng):
        x, ahat, _ = random_problem(rng)
        model = glorot_init(5, 3, seed=0)
        with pytest.raises(GcnError):
            forward(x, ahat, model, dropout=0.5)

    def test_dropout_is_seeded(self, rng):
        x, ahat, _ = random_problem(rng)
        model = glorot_init(5, 3, seed=0)
        za = forward(x, ahat, model, dropout=0.5, rng=np.random.default_rng(4)).z
        zb = forward(x, ahat, model, dropout=0.5, rng=np.random.default_rng(4)).z
        assert np.array_equal(za, zb)


class TestLoss:
    def test_uniform_prediction_is_ln_two(self, rng):
        z = np.array([[0.5, 0.5]])
        y = np.array([[1.0, 0.0]])
        model = glorot_init(3, 2, seed=0)
        assert loss(z, y, [0], model, 0.0) == pytest.approx(np.log(2.0))

    def test_perfect_prediction_is_zero(self, rng):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = z.copy()
        model = glorot_init(3, 2, seed=0)
        assert loss(z, y, [0, 1], model, 0.0) <= 2 * 1e-12

    def test_matches_double_loop_oracle(self, rng):
        x, ahat, y = random_problem(rng)
        model = glorot_init(5, 3, seed=2)
        z = forward(x, ahat, model).z
        idx = [0, 2, 5]
        got = loss(z, y, idx, model, 5e-4)
        assert got == pytest.approx(loss_oracle(z, y, idx, model, 5e-4), rel=1e-12)

    def test_empty_set_rejected(self, rng):
        model = glorot_init(3, 2, seed=0)
        with pytest.raises(GcnError):
            loss(np.ones((2, 2)) * 0.5, np.eye(2), [], model, 0.0)


class TestBackward:
    def test_matches_finite_differences(self, rng):
        x, ahat, y = random_problem(rng, n=6, c=4, h=3)
        model = glorot_init(4, 3, seed=3)
        idx = [0, 1, 4]
        cache = forward(x, ahat, model)
        analytic = backward(model, cache, y, idx, 5e-4)
        numeric = fd_gradients(x, ahat, model, y, idx, 5e-4)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_zero_learning_signal(self, rng):
        # Force Z == Y on the labelled rows: send logits far apart.
        x, ahat, y = random_problem(rng, n=5, c=3, h=2)
        model = glorot_init(3, 2, seed=0)
        cache = forward(x, ahat, model)
        cache.z[:] = y  # exact hit
        grads = backward(model, cache, y, [0, 1], 0.0)
        assert np.max(np.abs(grads[0])) == 0.0
        assert np.max(np.abs(grads[1])) == 0.0

    def test_decay_component_scales_linearly(self, rng):
        # With Z == Y the data gradient vanishes and only the decay term
        # remains, where doubling the coefficient is exact.
        x, ahat, y = random_problem(rng)
        model = glorot_init(5, 3, seed=5)
        cache = forward(x, ahat, model)
        cache.z[:] = y
        g1 = backward(model, cache, y, [0, 1], 1e-3)
        g2 = backward(model, cache, y, [0, 1], 2e-3)
        assert np.array_equal(g2[0], 2.0 * g1[0])
        assert np.array_equal(g2[1], 2.0 * g1[1])
        assert np.array_equal(g1[0], 1e-3 * model.w0)

    def test_stale_cache_detected(self, rng):
        x, ahat, y = random_problem(rng)
        model = glorot_init(5, 3, seed=0)
        cache = forward(x, ahat, model)
        state = AdamState.zeros_like(model)
        grads = backward(model, cache, y, [0], 0.0)
        model2, _ = adam_step(model, grads, state, TrainConfig())
        with pytest.raises(StaleCacheError):
            backward(model2, cache, y, [0], 0.0)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        model = GcnModel(w0=np.zeros((2, 2)), w1=np.zeros((2, 2)))
        grads = (np.full((2, 2), 0.3), np.full((2, 2), -1.7))
        config = TrainConfig(learning_rate=0.01)
        updated, state = adam_step(model, grads, AdamState.zeros_like(model), config)
        # Bias-corrected ratio m/sqrt(v) is sign(g) on step one (up to eps).
        assert np.abs(updated.w0 + 0.01) .max() < 1e-6
        assert np.abs(updated.w1 - 0.01).max() < 1e-6
        assert state.step == 1

    def test_zero_gradient_is_fixed_point(self):
        model = GcnModel(w0=np.ones((2, 3)), w1=np.ones((3, 2)))
        grads = (np.zeros((2, 3)), np.zeros((3, 2)))
        updated, _ = adam_step(model, grads, AdamState.zeros_like(model), TrainConfig())
        assert np.array_equal(updated.w0, model.w0)
        assert np.array_equal(updated.w1, model.w1)

    def test_three_step_trace_matches_hand_formulas(self):
        config = TrainConfig(learning_rate=0.1)
        model = GcnModel(w0=np.array([[1.0]]), w1=np.array([[2.0]]))
        state = AdamState.zeros_like(model)
        gradient_values = [0.5, -0.2, 0.9]

        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(gradient_values, start=1):
            model, state = adam_step(model, (np.array([[g]]), np.zeros((1, 1))),
                                     state, config)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            w = w - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
            assert model.w0[0, 0] == pytest.approx(w, abs=1e-12)


class TestEarlyStopping:
    def test_strictly_increasing_stops_after_window(self):
        stopper = EarlyStopper(window=10)
        stopped_at = None
        for epoch in range(1, 100):
            if stopper.update(epoch, float(epoch)):  # loss rises from epoch 1
                stopped_at = epoch
                break
        assert stopped_at == 11
        assert stopper.best_epoch == 1

    def test_plateau_counts_as_no_improvement(self):
        stopper = EarlyStopper(window=2)
        assert not stopper.update(1, 1.0)
        assert not stopper.update(2, 1.0)
        assert stopper.update(3, 1.0)
        assert stopper.best_epoch == 1


def two_blob_problem(seed, n=100, c=6, k=6, separation=5.0):
    rng = np.random.default_rng(seed)
    half = n // 2
    x = rng.normal(size=(n, c))
    x[half:, 0] += separation
    y = np.zeros((n, 2))
    y[:half, 0] = 1.0
    y[half:, 1] = 1.0
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    ahat = graph.normalize(graph.build_graph(x, k=k))
    labelled = rng.permutation(n)[:12]
    return x, ahat, y, labelled[:8], labelled[8:]


class TestTrain:
    def test_max_epochs_one(self):
        x, ahat, y, s, t = two_blob_problem(0)
        _, history = train(x, ahat, y, s, t, TrainConfig(max_epochs=1, seed=1))
        assert history.num_epochs == 1
        assert history.stop_reason == "max_epochs"
        assert history.best_epoch == 1

    def test_loss_decreases_in_early_epochs(self):
        x, ahat, y, s, t = two_blob_problem(1)
        _, history = train(x, ahat, y, s, t, TrainConfig(max_epochs=15, seed=2))
        assert min(history.train_loss[1:]) < history.train_loss[0]

    def test_learns_two_clusters(self):
        x, ahat, y, s, t = two_blob_problem(2)
        model, history = train(x, ahat, y, s, t, TrainConfig(seed=3))
        classes, _ = predict(model, x, ahat)
        test_nodes = np.setdiff1d(np.arange(len(x)), np.concatenate([s, t]))
        accuracy = np.mean(classes[test_nodes] == np.argmax(y[test_nodes], axis=1))
        assert accuracy >= 0.95

    def test_overlapping_sets_rejected(self):
        x, ahat, y, s, t = two_blob_problem(3)
        with pytest.raises(GcnError):
            train(x, ahat, y, s, np.concatenate([t, s[:1]]), TrainConfig())

    def test_deterministic_given_seed(self):
        x, ahat, y, s, t = two_blob_problem(4)
        config = TrainConfig(max_epochs=25, seed=11)
        model_a, hist_a = train(x, ahat, y, s, t, config)
        model_b, hist_b = train(x, ahat, y, s, t, config)
        assert hist_a.train_loss == hist_b.train_loss
        assert hist_a.val_loss == hist_b.val_loss
        assert np.array_equal(model_a.w0, model_b.w0)
        assert np.array_equal(model_a.w1, model_b.w1)

    def test_permutation_equivariance(self, rng):
        x, ahat, y, s, t = two_blob_problem(5, n=30, k=4)
        model = glorot_init(x.shape[1], 4, seed=6)
        z = forward(x, ahat, model).z
        base_loss = loss(z, y, s, model, 5e-4)

        perm = rng.permutation(len(x))
        dense = ahat.matrix.toarray()[np.ix_(perm, perm)]
        from scipy import sparse

        z_perm = forward(x[perm], sparse.csr_array(dense), model).z
        assert np.max(np.abs(z_perm - z[perm])) < 1e-10
        s_perm = np.array([int(np.flatnonzero(perm == i)[0]) for i in s])
        assert loss(z_perm, y[perm], s_perm, model, 5e-4) == \
            pytest.approx(base_loss, abs=1e-10)


class TestPredict:
    def test_argmax_and_tie_break(self):
        # Zero weights force [0.5, 0.5] rows: ties resolve to background.
        x = np.eye(3)
        g = graph.build_graph(x, k=1)
        ahat = graph.normalize(g)
        model = GcnModel(w0=np.zeros((3, 2)), w1=np.zeros((2, 2)))
        classes, probs = predict(model, x, ahat)
        assert np.array_equal(classes, np.zeros(3, dtype=np.int64))
        assert probs == pytest.approx(np.full((3, 2), 0.5))

    def test_batch_equals_per_row(self, rng):
        x, ahat, _ = random_problem(rng)
        model = glorot_init(5, 3, seed=7)
        classes, probs = predict(model, x, ahat)
        assert np.array_equal(classes, np.argmax(probs, axis=1))


class TestPersistence:
    def test_model_round_trip(self, tmp_path):
        model = glorot_init(6, 3, seed=9)
        gcn.save_model(model, tmp_path / "m.bin")
        loaded = gcn.load_model(tmp_path / "m.bin")
        assert np.array_equal(loaded.w0, model.w0)
        assert np.array_equal(loaded.w1, model.w1)

    def test_history_csv(self, tmp_path):
        x, ahat, y, s, t = two_blob_problem(6)
        _, history = train(x, ahat, y, s, t, TrainConfig(max_epochs=3, seed=1))
        history.write_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_acc"
        assert len(lines) == 4
        first = lines[1].split(",")
        assert first[0] == "1"
        assert float(first[1]) == history.train_loss[0]
