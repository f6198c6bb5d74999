import numpy as np
import pytest

from sparsezo import values_provider
from sparsezo import models, oracle


def test_quadratic_identity():
    task = models.quadratic_task(2, 1.0)
    p = task.template()
    p.layers[0].values[:] = [3.0, 4.0]
    assert task.loss_at(p) == pytest.approx(0.5 * 25.0)
    assert np.allclose(task.analytic_grad(p), [3.0, 4.0])
    assert task.lipschitz == 1.0


def test_quadratic_zero_is_optimum():
    task = models.quadratic_task(5, 3.0)
    p = task.template()
    p.layers[0].values[:] = 0.0
    assert task.loss_at(p) == 0.0
    assert np.allclose(task.analytic_grad(p), 0.0)


def test_quadratic_condition_number_exact():
    task = models.quadratic_task(16, 10.0)
    assert task.eigs.max() / task.eigs.min() == pytest.approx(10.0)
    assert task.lipschitz == 10.0


def test_quadratic_validation():
    with pytest.raises(ValueError):
        models.quadratic_task(0)
    with pytest.raises(ValueError):
        models.quadratic_task(4, 0.5)


def test_logistic_zero_weights_ln2():
    task = models.logistic_task(128, 8, seed=1)
    p = task.template()
    p.layers[0].values[:] = 0.0
    assert task.loss_at(p) == pytest.approx(np.log(2.0))


def test_logistic_label_flip_symmetry():
    task = models.logistic_task(64, 6, seed=2)
    p = task.template()
    p.layers[0].values[:] = np.linspace(-1, 1, 6)
    loss = task.loss_at(p)
    flipped = models.LogisticTask(task.X, -task.y, task.X_eval, -task.y_eval,
                                  np.float64)
    p.layers[0].values[:] = -p.layers[0].values
    assert flipped.loss_at(p) == pytest.approx(loss, rel=1e-12)


def test_logistic_trains_to_accuracy():
    task = models.logistic_task(512, 32, seed=3)
    p = task.template()
    trained, losses = oracle.first_order_baseline(
        task, p, 0.9 / task.lipschitz, 5000
    )
    assert losses[-1] < losses[0]
    assert task.accuracy(trained) >= 0.95


def test_logistic_gradient_matches_fd():
    task = models.logistic_task(64, 8, seed=4)
    p = task.template()
    p.layers[0].values[:] = np.linspace(-0.5, 0.5, 8)
    analytic = task.analytic_grad(p)
    fd = oracle.fd_gradient(lambda prov: task.loss_from(prov, None), p)
    assert np.abs(fd - analytic).max() / np.abs(analytic).max() < 1e-6


def test_linear_gradient_matches_fd():
    task = models.linear_task(64, 6, seed=5, label_noise=0.1)
    p = task.template()
    p.layers[0].values[:] = np.linspace(-1, 1, 6)
    analytic = task.analytic_grad(p)
    fd = oracle.fd_gradient(lambda prov: task.loss_from(prov, None), p)
    assert np.abs(fd - analytic).max() / np.abs(analytic).max() < 1e-6


def test_minibatch_deterministic():
    task = models.logistic_task(100, 4, seed=0)
    a = task.minibatch(7, 3)
    b = task.minibatch(7, 3)
    c = task.minibatch(7, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (models.DEFAULT_BATCH,)
    assert a.min() >= 0 and a.max() < 100


def test_mlp_zero_input_zero_bias_gives_zero_output():
    task = models.mlp_task([4, 4, 2], seed=0)
    p = task.template()
    out = task.forward(values_provider(p), np.zeros((3, 4)))
    assert np.allclose(out, 0.0)  # tanh(0) = 0 propagates, biases start at 0


def test_mlp_hidden_unit_permutation_invariance():
    task = models.mlp_task([4, 5, 2], seed=1)
    p = task.template()
    X = np.random.default_rng(0).standard_normal((6, 4))
    base = task.forward(values_provider(p), X)
    # swap hidden units 0 and 3: rows of fc0.weight/bias, columns of fc1.weight
    q = p.copy()
    w0, b0, w1 = q.layers[0].values, q.layers[1].values, q.layers[2].values
    w0[[0, 3], :] = w0[[3, 0], :]
    b0[[0, 3]] = b0[[3, 0]]
    w1[:, [0, 3]] = w1[:, [3, 0]]
    permuted = task.forward(values_provider(q), X)
    assert np.allclose(permuted, base, rtol=0, atol=1e-12)


def test_mlp_gradient_matches_fd():
    task = models.mlp_task([5, 6, 2], seed=2)
    p = task.template()
    batch = task.minibatch(0, 0, 8)
    analytic = task.analytic_grad(p, batch)
    fd = oracle.fd_gradient(lambda prov: task.loss_from(prov, batch), p)
    assert np.abs(fd - analytic).max() < 1e-7 * max(1.0, np.abs(analytic).max())


def test_equal_width_stack_ratio():
    task = models.equal_width_mlp_task(width=24, n_layers=8)
    p = task.template()
    largest = max(t.size for t in p.layers)
    assert p.total_params / largest >= 5


def test_transformer_uniform_head_gives_log_vocab():
    task = models.tiny_transformer_task(vocab=32, seed=0)
    p = task.template()
    assert task.loss_at(p, task.minibatch(0, 0)) == pytest.approx(np.log(32.0))


def test_transformer_seq_len_one():
    task = models.tiny_transformer_task(d_model=16, n_heads=2, seq_len=1,
                                        vocab=8, seed=0)
    p = task.template()
    loss = task.loss_at(p, task.minibatch(0, 0))
    assert np.isfinite(loss)
    assert loss == pytest.approx(np.log(8.0))


def test_transformer_param_budget_guard():
    with pytest.raises(Exception):
        models.tiny_transformer_task(d_model=512, n_heads=8, seq_len=8,
                                     vocab=512)


def test_transformer_config_validation():
    with pytest.raises(Exception):
        models.tiny_transformer_task(d_model=30, n_heads=4)
    with pytest.raises(Exception):
        models.tiny_transformer_task(seq_len=0)


def test_transformer_deterministic_loss():
    task = models.tiny_transformer_task(seed=5)
    p = task.template()
    batch = task.minibatch(1, 1)
    a = task.loss_at(p, batch)
    b = task.loss_at(p, batch)
    assert a == b


def test_transformer_smezo_reduces_loss():
    # Direction-only claim over three seeds: 2000 masked steps at sparsity
    # 0.75 end below the uniform-logits starting loss.
    from sparsezo import MaskPolicy, Masker, ZoConfig, step

    task = models.tiny_transformer_task()
    policy = MaskPolicy("magnitude-dynamic", 0.75)
    initials, finals = [], []
    for seed in (1, 2, 3):
        p = task.template()
        masker = Masker.for_params(p, policy)
        cfg = ZoConfig(epsilon=1e-3, lr=3e-2, policy=policy, base_seed=seed,
                       steps=2000)
        initials.append(task.full_train_loss(p))
        for t in range(2000):
            batch = task.minibatch(seed, t, 16)
            step(task.bound_loss(batch), p, cfg, t, masker)
        finals.append(task.full_train_loss(p))
    assert np.median(finals) < np.median(initials)


def test_shifted_pair_construction():
    pair = models.shifted_pair(d=16, seed=0)
    theta = pair.pretrained()
    w = theta.layers[0].flat
    mags = np.abs(w)
    k = len(w) // 4
    top_share = np.sort(mags)[-k:] ** 2
    assert top_share.sum() / (mags**2).sum() >= 0.70
    # task A's optimum is not task B's optimum
    loss_at_a = pair.task_b.loss_at(theta)
    fo, _ = oracle.first_order_baseline(
        pair.task_b, pair.task_b.template(), 0.9 / pair.task_b.lipschitz, 1500
    )
    assert loss_at_a > pair.task_b.loss_at(fo)


def test_shifted_pair_shares_dimension():
    pair = models.shifted_pair(d=16, seed=1)
    assert pair.task_a.d == pair.task_b.d
    assert set(pair.tiers) == {"large", "medium", "small"}
    assert np.array_equal(
        pair.teacher_b[pair.tiers["small"]], -pair.teacher_a[pair.tiers["small"]]
    )


def test_task_loss_deterministic_under_batch_seed():
    task = models.mlp_task([6, 6, 2], seed=0)
    p = task.template()
    batch = task.minibatch(9, 17)
    assert task.loss_at(p, batch) == task.loss_at(p, batch)
