import numpy as np
import pytest

import fedcog


def test_model_roundtrip_and_forward():
    m = fedcog.Model.mlp([4, 3, 2], seed=1)
    assert m.input_dim == 4 and m.output_dim == 2
    assert m.parameter_count == 4 * 3 + 3 + 3 * 2 + 2
    rebuilt = fedcog.Model.from_layers(m.layers)
    assert rebuilt == m
    x = np.random.default_rng(0).normal(size=(5, 4))
    w1, b1 = m.layers[0]
    w2, b2 = m.layers[1]
    expected = np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2
    np.testing.assert_allclose(m.forward(x), expected, rtol=1e-12, atol=1e-12)


def test_losses_match_numpy():
    rng = np.random.default_rng(2)
    p = fedcog.softmax(rng.normal(size=(6, 4)))
    q = fedcog.softmax(rng.normal(size=(6, 4)))
    y = rng.integers(0, 4, size=6)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert fedcog.cross_entropy(p, y) == pytest.approx(-np.log(p[np.arange(6), y]).mean(), rel=1e-12)
    assert fedcog.kl_divergence(p, q) == pytest.approx((p * np.log(p / q)).sum(axis=1).mean(), rel=1e-12)
    mid = 0.5 * (p + q)
    js = 1 - 0.5 * ((p * np.log(p / mid)).sum(1) + (q * np.log(q / mid)).sum(1))
    assert fedcog.js_disagreement(p, q) == pytest.approx(js.mean(), rel=1e-12)


def test_backward_matches_finite_difference():
    m = fedcog.Model.mlp([3, 4, 2], seed=3)
    x = np.random.default_rng(4).normal(size=(5, 3))
    y = np.array([0, 1, 1, 0, 1])
    loss, _, gx = fedcog.backward(m, x, labels=y, other=fedcog.Model.mlp([3, 4, 2], seed=5), js_weight=0.1, wrt="inputs")
    h = 1e-6
    for i, j in [(0, 0), (2, 1), (4, 2)]:
        xp, xm = x.copy(), x.copy()
        xp[i, j] += h
        xm[i, j] -= h
        lp = fedcog.backward(m, xp, labels=y, other=fedcog.Model.mlp([3, 4, 2], seed=5), js_weight=0.1, wrt="inputs")[0]
        lm = fedcog.backward(m, xm, labels=y, other=fedcog.Model.mlp([3, 4, 2], seed=5), js_weight=0.1, wrt="inputs")[0]
        assert gx[i, j] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)
    assert np.isfinite(loss)


def test_gradcheck_suite_passes():
    lines = fedcog.gradcheck(models=2, seed=1)
    assert {"cross_entropy", "kl_to_teacher", "js_disagreement", "l2_to_reference"} <= {l["composition"] for l in lines}
    assert all(l["passed"] for l in lines)


def test_partition_niid2_label_counts():
    _, y = fedcog.synth_blobs(10, 50, 4, seed=0)
    parts = fedcog.partition(y, 10, kind="niid2", labels_per_client=2, seed=1)
    assert sorted(np.concatenate(parts).tolist()) == list(range(len(y)))
    assert all(len(set(y[p].tolist())) == 2 for p in parts)
    with pytest.raises(fedcog.ConfigError):
        fedcog.partition(y, 10, kind="niid2", labels_per_client=11)


def test_complementary_distribution():
    assert fedcog.complementary_distribution([500, 0, 400, 200, 400]) == [0, 500, 100, 300, 100]


def test_generation_clamped_and_improves():
    g = fedcog.Model.mlp([16, 12, 4], seed=1)
    l = fedcog.Model.mlp([16, 12, 4], seed=2)
    before = fedcog.generate(g, l, [1, 1, 1, 1], num_samples=32, steps=0, seed=3)
    after = fedcog.generate(g, l, [1, 1, 1, 1], num_samples=32, steps=50, seed=3)
    for out in (before, after):
        assert out["inputs"].min() >= 0.0 and out["inputs"].max() <= 1.0
        np.testing.assert_allclose(out["teacher_probs"].sum(axis=1), 1.0)
    assert after["mean_target_probability"] > before["mean_target_probability"]
    assert after["final_loss"] < after["initial_loss"]


def test_secure_aggregate_equals_plain():
    models = [fedcog.Model.mlp([5, 3, 2], seed=s) for s in range(4)]
    sizes = [10, 20, 30, 40]
    plain = fedcog.aggregate(models, sizes)
    masked = fedcog.secure_aggregate(models, sizes, ids=[3, 9, 1, 4], round_seed=7)
    assert fedcog.model_difference(plain, masked) < 1e-9


def test_theorem_noiseless_case():
    t = fedcog.theorem_bound(phi0_minus_inf=1.0, L=1.0, sigma=0.0, kappa=0.0, tau=2, eta=0.01, T=100)
    assert t["total"] == 2.0


def test_run_experiment_deterministic(tmp_path):
    cfg = """
[dataset]
source = synth
synth_classes = 4
synth_train_per_class = 20
synth_test_per_class = 5
synth_dim = 16
image_side = 4
[partition]
kind = niid2
[method]
name = fedcog
[federation]
rounds = 2
clients = 2
[local]
tau = 3
lr = 0.1
batch_size = 8
[generation]
num_samples = 4
steps = 3
[model]
hidden = 8
[run]
threads = 1
"""
    a = fedcog.run_experiment(cfg, str(tmp_path / "a"))
    b = fedcog.run_experiment(cfg)
    assert a["runs"][0]["rounds_csv"] == b["runs"][0]["rounds_csv"]
    assert (tmp_path / "a" / "seed_0" / "rounds.csv").read_text() == a["runs"][0]["rounds_csv"]
    assert "±" in a["summary"]
    with pytest.raises(fedcog.ConfigError, match="local.tau"):
        fedcog.run_experiment("[local]\ntau = x\n")
