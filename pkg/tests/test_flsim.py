import numpy as np
import pytest

from wflsim import flsim
from wflsim.flsim import Dataset, FLConfig
from wflsim.nn import finite_diff_grad, max_rel_error


def make_blobs(n=400, d=2, classes=4, seed=0, spread=0.5):
    return flsim.synthetic_blobs(n, d, classes, seed=seed, spread=spread)


# ---------------------------------------------------------------------------
# partitioning


def test_partition_near_iid_at_huge_alpha():
    ds = make_blobs(n=10_000, classes=4, seed=1)
    parts = flsim.partition_dirichlet(ds, 4, alpha=1e6, seed=0)
    for part in parts:
        hist = np.bincount(part.labels, minlength=4) / len(part)
        assert np.all(np.abs(hist - 0.25) < 0.05)


def test_partition_skewed_at_small_alpha():
    ds = make_blobs(n=4000, classes=4, seed=2)
    parts = flsim.partition_dirichlet(ds, 20, alpha=0.2, seed=0)
    max_share = max(np.bincount(p.labels, minlength=4).max() / len(p) for p in parts)
    assert max_share > 0.6  # some device is visibly label-skewed


def test_partition_deterministic_and_exact_cover():
    ds = make_blobs(n=997, seed=3)
    a = flsim.partition_dirichlet(ds, 7, alpha=0.2, seed=42)
    b = flsim.partition_dirichlet(ds, 7, alpha=0.2, seed=42)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.features, pb.features)
        assert np.array_equal(pa.labels, pb.labels)
    assert sum(len(p) for p in a) == len(ds)
    assert all(len(p) > 0 for p in a)
    merged = np.sort(np.concatenate([p.features[:, 0] for p in a]))
    assert np.allclose(merged, np.sort(ds.features[:, 0]))


def test_partition_rejects_fewer_samples_than_devices():
    ds = make_blobs(n=5)
    with pytest.raises(ValueError):
        flsim.partition_dirichlet(ds, 10, alpha=1.0, seed=0)


# ---------------------------------------------------------------------------
# local training


def test_zero_learning_rate_is_identity():
    ds = make_blobs()
    cfg = FLConfig(learning_rate=1e-300, local_iters=1, num_classes=4)
    start = np.linspace(-1, 1, (ds.dim + 1) * 4)
    params, _, _ = flsim.local_train(start, ds, cfg)
    assert np.allclose(params, start, atol=1e-12)


def test_full_batch_descent_is_monotone():
    ds = flsim.synthetic_blobs(200, 2, 2, seed=5, spread=0.4)
    cfg = FLConfig(learning_rate=0.2, local_iters=1, num_classes=2)
    params = flsim.init_model(2, 2)
    losses = []
    for _ in range(50):
        params, loss, _ = flsim.local_train(params, ds, cfg)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_returned_gradient_matches_finite_differences():
    ds = make_blobs(n=60, seed=6)
    cfg = FLConfig(learning_rate=1e-300, local_iters=1, num_classes=4)
    rng = np.random.default_rng(0)
    start = rng.normal(0, 0.5, (ds.dim + 1) * 4)
    _, _, grad = flsim.local_train(start, ds, cfg)
    fd = finite_diff_grad(lambda p: flsim.loss_and_grad(p, ds, 4)[0], start)
    assert np.max(np.abs(grad - fd)) < 1e-6


def test_training_rejects_empty_data():
    cfg = FLConfig(num_classes=4)
    with pytest.raises(ValueError):
        flsim.local_train(flsim.init_model(2, 4),
                          Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int)), cfg)


# ---------------------------------------------------------------------------
# aggregation and evaluation


def test_aggregate_identity_when_all_equal():
    w = np.array([1.0, -2.0, 3.0])
    out = flsim.aggregate([(w, 3), (w, 5)], flsim.AGG_PARTICIPATING)
    assert np.allclose(out, w)


def test_aggregate_hand_values():
    zero = np.array([0.0])
    four = np.array([4.0])
    part = flsim.aggregate([(zero, 1), (four, 3)], flsim.AGG_PARTICIPATING)
    assert np.allclose(part, [3.0])
    literal = flsim.aggregate([(zero, 1), (four, 3)], flsim.AGG_LITERAL, total_mass=8)
    assert np.allclose(literal, [1.5])


def test_aggregate_permutation_invariant_and_singleton():
    rng = np.random.default_rng(7)
    models = [(rng.normal(size=4), int(s)) for s in (2, 5, 9)]
    a = flsim.aggregate(models, flsim.AGG_PARTICIPATING)
    b = flsim.aggregate(models[::-1], flsim.AGG_PARTICIPATING)
    assert np.allclose(a, b)
    single = flsim.aggregate(models[:1], flsim.AGG_PARTICIPATING)
    assert np.allclose(single, models[0][0])


def test_aggregate_rejects_zero_weight():
    with pytest.raises(ValueError):
        flsim.aggregate([(np.ones(2), 0)], flsim.AGG_PARTICIPATING)


def test_evaluate_zero_model_ties_to_class_zero():
    feats = np.array([[1.0], [2.0], [3.0], [4.0]])
    labels = np.array([0, 0, 1, 1])
    ds = Dataset(feats, labels)
    acc = flsim.evaluate(flsim.init_model(1, 2), ds, 2)
    assert acc == 0.5  # all predicted class 0 on a balanced set


def test_evaluate_perfect_classifier():
    ds = flsim.synthetic_blobs(300, 2, 2, seed=8, spread=0.3)
    cfg = FLConfig(learning_rate=0.5, local_iters=300, num_classes=2)
    params, _, _ = flsim.local_train(flsim.init_model(2, 2), ds, cfg)
    assert flsim.evaluate(params, ds, 2) == 1.0


# ---------------------------------------------------------------------------
# statistical features


def test_sign_agreement_cases():
    assert flsim.sign_agreement(np.array([1.0, -1, 1]), np.array([1.0, 1, 1])) == pytest.approx(2 / 3)
    v = np.array([0.5, -0.5, 0.0])
    assert flsim.sign_agreement(v, v) == 1.0
    # symmetric in its arguments
    a, b = np.array([1.0, -2, 3]), np.array([-1.0, -2, 0.1])
    assert flsim.sign_agreement(a, b) == flsim.sign_agreement(b, a)


def test_stat_features_contents():
    datasets = [make_blobs(50, seed=i) for i in range(3)]
    global_params = flsim.init_model(2, 4)
    ggrad = np.ones_like(global_params)
    local = {1: (np.ones_like(global_params), 0.7, -ggrad)}
    st = flsim.stat_features(global_params, ggrad, local, datasets, 4,
                             prev_accuracy=0.5)
    assert st.grad_inner[1] == pytest.approx(-np.dot(ggrad, ggrad))
    assert st.local_loss[1] == 0.7
    assert st.local_loss[0] == 0.0 and not st.selected_mask[0]
    assert st.selected_mask[1]
    assert np.all(st.global_loss > 0)
    assert np.array_equal(st.data_size, [50, 50, 50])
    # grad_inner scales linearly in the local gradient
    local2 = {1: (np.ones_like(global_params), 0.7, -3.0 * ggrad)}
    st2 = flsim.stat_features(global_params, ggrad, local2, datasets, 4, 0.5)
    assert st2.grad_inner[1] == pytest.approx(3.0 * st.grad_inner[1])


def test_stat_vector_round_trip_and_permutation():
    datasets = [make_blobs(30, seed=i) for i in range(4)]
    g = flsim.init_model(2, 4)
    st = flsim.stat_features(g, np.ones_like(g), {}, datasets, 4, 0.25)
    vec = st.to_vector()
    assert len(vec) == 4 * flsim.StatState.FEATURES_PER_DEVICE
    back = flsim.StatState.from_vector(vec, st.prev_accuracy)
    assert np.allclose(back.to_vector(), vec)


# ---------------------------------------------------------------------------
# update perturbations


def test_quantize_high_precision_is_near_identity():
    rng = np.random.default_rng(9)
    v = rng.normal(size=50)
    assert np.max(np.abs(flsim.quantize_update(v, 32) - v)) < 1e-6


def test_quantize_constant_unchanged():
    v = np.full(10, 0.37)
    assert np.array_equal(flsim.quantize_update(v, 1), v)


def test_quantize_one_bit_snaps_to_levels():
    v = np.array([-1.0, -0.2, 0.3, 1.0])
    q = flsim.quantize_update(v, 1)
    assert set(np.round(q, 12)) == {-1.0, 1.0}


def test_quantize_idempotent():
    rng = np.random.default_rng(10)
    v = rng.normal(size=64)
    for bits in (1, 2, 4, 8):
        q = flsim.quantize_update(v, bits)
        assert np.array_equal(flsim.quantize_update(q, bits), q)


def test_dp_noise_limits_and_clipping():
    rng = np.random.default_rng(11)
    v = rng.normal(size=16)
    out = flsim.dp_noise(v, clip_norm=1e6, epsilon=1e15, delta=1e-5, rounds=1,
                         rng=np.random.default_rng(0))
    assert np.allclose(out, v, atol=1e-6)
    big = 10.0 * v / np.linalg.norm(v)
    clipped = flsim.dp_noise(big, clip_norm=1.0, epsilon=1e9, delta=1e-5,
                             rounds=1, rng=np.random.default_rng(0))
    assert np.linalg.norm(clipped) == pytest.approx(1.0, rel=1e-6)


def test_dp_noise_std_matches_analytic():
    clip, eps, delta, rounds = 0.5, 2.0, 1e-5, 10
    sigma = clip * np.sqrt(2 * rounds * np.log(1.25 / delta)) / eps
    rng = np.random.default_rng(12)
    draws = np.concatenate([
        flsim.dp_noise(np.zeros(100), clip, eps, delta, rounds, rng)
        for _ in range(100)
    ])
    assert abs(draws.std() - sigma) / sigma < 0.05


# ---------------------------------------------------------------------------
# dataset file format


def test_dataset_file_round_trip(tmp_path):
    ds = make_blobs(n=37, seed=13)
    path = tmp_path / "data.txt"
    flsim.save_dataset(ds, path, num_classes=4)
    back = flsim.load_dataset(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)


def test_dataset_file_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 2 1\n0.0 1.0\n")  # missing label
    with pytest.raises(ValueError):
        flsim.load_dataset(path)
