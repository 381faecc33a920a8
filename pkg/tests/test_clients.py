import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ledgerfl import clients as cl
from ledgerfl import he
from ledgerfl.harness import evaluate_model


@pytest.fixture(scope="module")
def task():
    return cl.make_toy_task(3000, 1000, seed=3)


@pytest.fixture(scope="module")
def pretrained(task):
    train, _ = task
    return cl.train_local(train.subset(np.arange(1000)), cl.init_weights(), epochs=20,
                          lr=0.05, seed=1).weights


def test_toy_task_shape(task):
    train, test = task
    assert train.features.shape == (3000, 64)
    assert set(np.unique(train.labels)) == set(range(10))
    assert np.all((train.features >= 0) & (train.features <= 1))
    assert np.all(train.features[:, train.trigger_mask] == 0)
    assert cl.param_count() == 650


def test_partition_rate(task):
    train, _ = task
    parts = cl.partition_non_iid(train, 10, 0.7, np.random.default_rng(0), per_client=100)
    for i, p in enumerate(parts):
        assert len(p) == 100
        assert np.sum(p.labels == i % 10) == 70


def test_partition_extremes(task):
    train, _ = task
    single = cl.partition_non_iid(train, 5, 1.0, np.random.default_rng(0), per_client=50)
    assert all(len(set(p.labels.tolist())) == 1 for p in single)
    mixed = cl.partition_non_iid(train, 2, 0.0, np.random.default_rng(0), per_client=900)
    assert np.sum(mixed[0].labels == 0) == 0
    assert len(set(mixed[0].labels.tolist())) == 9


def test_partition_downscales_starved_class(task):
    train, _ = task
    parts = cl.partition_non_iid(train, 1, 1.0, np.random.default_rng(0), per_client=10_000)
    assert len(parts[0]) == np.sum(train.labels == 0)


def test_partition_rejects_bad_rate(task):
    with pytest.raises(cl.ClientError):
        cl.partition_non_iid(task[0], 3, 1.5, np.random.default_rng(0))


def test_zero_epochs_returns_global(task, pretrained):
    out = cl.train_local(task[0], pretrained, epochs=0)
    assert np.array_equal(out.weights, pretrained)


def test_dimension_mismatch(task):
    with pytest.raises(cl.ClientError):
        cl.train_local(task[0], np.zeros(100), epochs=1)


def test_benign_loss_decreases(task):
    train, _ = task
    data = train.subset(np.arange(500))
    w = cl.init_weights()
    losses = []
    for epoch in range(5):
        w = cl.train_local(data, w, epochs=1, lr=0.05, seed=epoch).weights
        losses.append(cl.cross_entropy(w, data.features, data.labels)[0])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_cross_entropy_gradient_matches_differences(rng):
    x = rng.uniform(size=(20, 64))
    y = rng.integers(0, 10, 20)
    w = rng.normal(size=650) * 0.1
    _, g = cl.cross_entropy(w, x, y)
    eps = 1e-6
    for i in rng.choice(650, 15, replace=False):
        e = np.zeros(650)
        e[i] = eps
        fd = (cl.cross_entropy(w + e, x, y)[0] - cl.cross_entropy(w - e, x, y)[0]) / (2 * eps)
        assert fd == pytest.approx(g[i], rel=1e-4, abs=1e-9)


def test_cosine_gradient_matches_differences(rng):
    w = rng.normal(size=50)
    g = rng.normal(size=50)
    grad = cl.cosine_distance_grad(w, g)
    eps = 1e-6
    fd = np.array([(cl.cosine_distance(w + eps * e, g) - cl.cosine_distance(w - eps * e, g)) / (2 * eps)
                   for e in np.eye(50)])
    assert np.max(np.abs(fd - grad) / np.maximum(np.abs(grad), 1e-12)) <= 1e-4


def test_constrain_and_scale_with_alpha_one_is_backdoor(task, pretrained):
    data = task[0].subset(np.arange(300))
    a = cl.train_local(data, pretrained, cl.AttackConfig("backdoor", pdr=0.5), epochs=2, seed=4)
    b = cl.train_local(data, pretrained, cl.AttackConfig("constrain_and_scale", pdr=0.5, alpha=1.0),
                       epochs=2, seed=4)
    assert np.array_equal(a.weights, b.weights)


def test_scale_gamma_scales_update(task, pretrained):
    data = task[0].subset(np.arange(300))
    a = cl.train_local(data, pretrained, cl.AttackConfig("backdoor", pdr=0.5), epochs=1, seed=4)
    b = cl.train_local(data, pretrained, cl.AttackConfig("backdoor", pdr=0.5, scale_gamma=3.0),
                       epochs=1, seed=4)
    assert np.allclose(b.weights - pretrained, 3.0 * (a.weights - pretrained))


def test_backdoor_plants_trigger(task, pretrained):
    train, test = task
    model = cl.train_local(train.subset(np.arange(1000, 1500)), pretrained,
                           cl.AttackConfig("backdoor", pdr=1.0), epochs=5, lr=0.05, seed=2)
    _, ba_clean = evaluate_model(pretrained, test)
    _, ba = evaluate_model(model.weights, test)
    assert ba_clean < 0.05
    assert ba > 0.8


def test_untargeted_relabels(task, rng):
    data = task[0].subset(np.arange(200))
    out = cl.poison_dataset(data, cl.AttackConfig("untargeted", pdr=1.0), rng)
    assert np.mean(out.labels != data.labels) > 0.7
    assert np.array_equal(out.features, data.features)


def test_dba_shards():
    mask = list(range(60, 64))
    shards = cl.dba_shards(mask, 3)
    assert sorted(i for s in shards for i in s) == mask
    assert all(not set(a) & set(b) for i, a in enumerate(shards) for b in shards[i + 1:])
    data = cl.ToyDataset(np.zeros((4, 64)), np.array([1, 2, 3, 4]))
    out = cl.poison_dataset(data, cl.AttackConfig("dba", pdr=1.0, trigger_shard=shards[0]),
                            np.random.default_rng(0))
    assert np.all(out.features[:, list(shards[0])] == 1.0)
    assert np.all(out.features[:, [i for i in mask if i not in shards[0]]] == 0.0)


def test_attack_config_validation():
    with pytest.raises(cl.ClientError):
        cl.AttackConfig("sneaky")
    with pytest.raises(cl.ClientError):
        cl.AttackConfig("backdoor", alpha=0.0)
    with pytest.raises(cl.ClientError):
        cl.AttackConfig("backdoor", pdr=1.5)


def test_offset_rules():
    flat = cl.LocalModel(np.full(10, 0.3))
    off = cl.generate_offset(flat, 1)
    assert off.delta == 0.0 and off.flagged
    m = cl.LocalModel(np.arange(10.0))
    assert cl.generate_offset(m, 5) == cl.generate_offset(m, 5)
    off = cl.generate_offset(m, 5)
    assert off.delta == pytest.approx(np.std(m.weights) * off.f_s)
    with pytest.raises(cl.ClientError):
        cl.generate_offset(cl.LocalModel(np.ones(1)), 0)


def test_offset_scale_factor_range():
    m = cl.LocalModel(np.arange(10.0))
    f = np.array([cl.generate_offset(m, s).f_s for s in range(10_000)])
    assert np.all((np.abs(f) >= 0.01) & (np.abs(f) <= 100))
    assert np.mean(f > 0) == pytest.approx(0.5, abs=0.03)


@given(st.floats(0.001, 1.0), st.floats(1.5, 10.0), st.integers(0, 10_000))
@settings(max_examples=50)
def test_offset_respects_custom_range(lo, ratio, seed):
    hi = lo * ratio
    off = cl.generate_offset(cl.LocalModel(np.arange(5.0)), seed, (lo, hi))
    assert lo <= abs(off.f_s) <= hi


def test_encrypt_update_chunks(proto, rng):
    params, km = proto
    w = rng.normal(size=23000)
    off = cl.Offset(0.37, 1.0, 0.37)
    enc = cl.encrypt_update(cl.LocalModel(w), off, km.public_key, params, rng)
    assert len(enc.chunks) == 12
    shifted = w + 0.37
    for j in (0, 5, 11):
        got = he.decrypt(enc.chunks[j], km.secret_key)
        want = shifted[j * 2048:(j + 1) * 2048]
        assert np.max(np.abs(got[:len(want)] - want)) <= 1e-3
        assert np.all(np.abs(got[len(want):]) <= 1e-3)
    assert np.allclose(he.decrypt(enc.offset_cipher, km.secret_key), 0.37, atol=1e-6)


def test_zero_offset_keeps_weights_exact(rng):
    w = rng.normal(size=30)
    assert cl.shifted_weights(cl.LocalModel(w), cl.Offset(0.0, 0.0, 0.0)) is w


def test_encrypt_update_checks_context(small, rng):
    params, km = small
    with pytest.raises(cl.ClientError):
        cl.encrypt_update(cl.LocalModel(np.ones(10)), cl.Offset(0.0, 0.0, 0.0), km.public_key,
                          params, rng, expected_params=650)
