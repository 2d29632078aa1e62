import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from mbcdlab import synthdata as D


def small_config(**overrides):
    base = dict(num_modalities=2, num_domains=2, num_classes=4, latent_dim=6,
                input_dims=(8, 7), snr=(2.0, 1.0), train_per_domain=60,
                val_per_domain=20, test_per_domain=30, noise_std=1.0,
                mean_shift_scale=0.5, rotation_strength=0.4, seed=5)
    base.update(overrides)
    return D.DataGenConfig(**base)


def dataset_bytes(ds):
    return b"".join(
        x.tobytes() for dom in ds.data for split in D.SPLITS
        for x in (*dom[split][0], dom[split][1]))


def test_generation_is_deterministic():
    cfg = small_config()
    assert dataset_bytes(D.generate(cfg)) == dataset_bytes(D.generate(cfg))


def test_shapes_and_label_range():
    ds = D.generate(small_config())
    for dom in ds.data:
        for split, n in (("train", 60), ("val", 20), ("test", 30)):
            xs, y = dom[split]
            assert [x.shape for x in xs] == [(n, 8), (n, 7)]
            assert y.min() >= 0 and y.max() < 4


def test_centroid_geometry():
    mu = D.class_centroids(4, 6)
    dists = np.linalg.norm(mu[:, None] - mu[None, :], axis=2)
    off = dists[~np.eye(4, dtype=bool)]
    assert np.allclose(off, 2.0, atol=1e-12)
    # minimal latent dim: regular simplex in C-1 dimensions
    mu3 = D.class_centroids(4, 3)
    d3 = np.linalg.norm(mu3[:, None] - mu3[None, :], axis=2)
    assert np.allclose(d3[~np.eye(4, dtype=bool)], 2.0, atol=1e-9)
    # separation scales the whole simplex
    mu_s = D.class_centroids(5, 8, separation=3.5)
    ds = np.linalg.norm(mu_s[:, None] - mu_s[None, :], axis=2)
    assert np.allclose(ds[~np.eye(5, dtype=bool)], 3.5, atol=1e-12)


def test_class_sep_below_two_rejected():
    with pytest.raises(D.DataConfigError, match="class_sep"):
        small_config(class_sep=1.0)


def test_latent_dim_too_small_rejected():
    with pytest.raises(D.DataConfigError, match="simplex"):
        small_config(latent_dim=2)


def test_mixing_matrices_orthogonal():
    specs = D.domain_specs(small_config(rotation_strength=0.7))
    for spec in specs:
        for mix in spec.mixing:
            err = np.abs(mix.T @ mix - np.eye(mix.shape[0])).max()
            assert err < 1e-8


def test_zero_rotation_strength_is_identity():
    specs = D.domain_specs(small_config(rotation_strength=0.0))
    for spec in specs:
        for mix in spec.mixing:
            assert np.allclose(mix, np.eye(mix.shape[0]), atol=1e-12)


def _probe_accuracy(xs_train, y_train, xs_test, y_test):
    probe = LogisticRegression(max_iter=2000)
    probe.fit(xs_train, y_train)
    return probe.score(xs_test, y_test)


def test_high_snr_modalities_are_each_learnable():
    cfg = small_config(num_domains=1, snr=(4.0, 4.0), mean_shift_scale=0.0,
                       rotation_strength=0.0, class_sep=5.0, train_per_domain=500,
                       test_per_domain=500, seed=11)
    ds = D.generate(cfg)
    xs, y = ds.data[0]["train"]
    xs_t, y_t = ds.data[0]["test"]
    for k in range(2):
        assert _probe_accuracy(xs[k], y, xs_t[k], y_t) > 0.9


def test_zero_snr_modality_is_chance_level():
    cfg = small_config(num_domains=1, snr=(4.0, 0.0), mean_shift_scale=0.0,
                       rotation_strength=0.0, train_per_domain=500,
                       test_per_domain=500, seed=12)
    ds = D.generate(cfg)
    xs, y = ds.data[0]["train"]
    xs_t, y_t = ds.data[0]["test"]
    acc = _probe_accuracy(xs[1], y, xs_t[1], y_t)
    assert abs(acc - 0.25) < 0.05


def test_perturb_zero_variance_is_bitwise_copy():
    ds = D.generate(small_config())
    copy = D.perturb_modality(ds, 0, 0.0, seed=3)
    assert dataset_bytes(copy) == dataset_bytes(ds)
    copy.data[0]["train"][0][0][0, 0] += 1.0
    assert dataset_bytes(copy) != dataset_bytes(ds)  # true copy, not a view


def test_perturb_isolates_other_modalities():
    ds = D.generate(small_config())
    noisy = D.perturb_modality(ds, 1, 2.0, seed=3)
    for d in range(2):
        for split in D.SPLITS:
            assert np.array_equal(noisy.data[d][split][0][0], ds.data[d][split][0][0])
            assert not np.array_equal(noisy.data[d][split][0][1], ds.data[d][split][0][1])
            assert np.array_equal(noisy.data[d][split][1], ds.data[d][split][1])


def test_perturbation_degrades_probe_accuracy_monotonically():
    # the mean accuracy over seeds must fall as test-time noise grows
    variances = (0.0, 0.5, 1.0, 2.0)
    acc_by_variance = {v: [] for v in variances}
    for seed in range(5):
        cfg = small_config(num_domains=1, snr=(1.5, 1.0), mean_shift_scale=0.0,
                           rotation_strength=0.0, train_per_domain=400,
                           test_per_domain=400, seed=100 + seed)
        ds = D.generate(cfg)
        xs, y = ds.data[0]["train"]
        probe = LogisticRegression(max_iter=2000).fit(xs[0], y)
        for v in variances:
            noisy = D.perturb_modality(ds, 0, v, seed=7)
            xs_t, y_t = noisy.data[0]["test"]
            acc_by_variance[v].append(probe.score(xs_t[0], y_t))
    means = [np.mean(acc_by_variance[v]) for v in variances]
    assert all(a > b for a, b in zip(means, means[1:]))


def test_protocol_splits_exclude_target():
    ds = D.generate(small_config(num_domains=3))
    splits = D.protocol_splits(ds, 0)
    assert splits.train[1].shape[0] == 2 * 60
    assert splits.val[1].shape[0] == 2 * 20
    (name, (xs_t, y_t)), = splits.test.items()
    assert name == "d0"
    assert y_t.shape[0] == 60 + 20 + 30  # the target's full data
    D.assert_no_leakage(splits)


def test_single_source_splits():
    ds = D.generate(small_config(num_domains=3))
    splits = D.single_source_splits(ds, 1)
    assert splits.train[1].shape[0] == 60
    assert sorted(splits.test) == ["d0", "d2"]
    D.assert_no_leakage(splits)


def test_in_domain_splits():
    ds = D.generate(small_config())
    splits = D.in_domain_splits(ds, 1)
    assert splits.train[1].shape[0] == 60
    assert list(splits.test) == ["d1"]
    assert splits.test["d1"][1].shape[0] == 30
    D.assert_no_leakage(splits)


def test_unknown_domain_rejected():
    ds = D.generate(small_config())
    with pytest.raises(ValueError, match="unknown domain"):
        D.protocol_splits(ds, 9)


def test_leakage_detector_fires_on_duplicates():
    ds = D.generate(small_config())
    splits = D.protocol_splits(ds, 0)
    leaky = D.ProtocolSplits(
        train=splits.test["d0"], val=splits.val, test=splits.test)
    with pytest.raises(AssertionError, match="leakage"):
        D.assert_no_leakage(leaky)


def test_export_import_roundtrip_bitwise(tmp_path):
    ds = D.generate(small_config())
    D.export_dataset(ds, tmp_path / "data")
    back = D.import_dataset(tmp_path / "data")
    assert back.config == ds.config
    assert dataset_bytes(back) == dataset_bytes(ds)


def test_dominant_modality_trains_faster():
    # higher snr -> lower early uni-modal loss, on average over seeds
    from mbcdlab import mbcd as A
    from mbcdlab import model as M
    gaps = []
    for seed in range(5):
        cfg = small_config(num_domains=1, snr=(3.0, 0.8), train_per_domain=200,
                           mean_shift_scale=0.0, rotation_strength=0.0,
                           seed=40 + seed)
        ds = D.generate(cfg)
        xs, y = ds.data[0]["train"]
        mcfg = M.ModelConfig(input_dims=cfg.input_dims, hidden_dims=(16, 16),
                             feature_dims=(8, 8), num_classes=4, init_seed=seed)
        state = A.init_trainer(mcfg, A.erm_config(A.MbcdConfig(learning_rate=1e-3)),
                               train_seed=seed)
        rng = np.random.default_rng(seed)
        losses = np.zeros(2)
        for _ in range(2):
            order = rng.permutation(200)
            for lo in range(0, 200, 16):
                idx = order[lo:lo + 16]
                sm = A.train_step(state, ([x[idx] for x in xs], y[idx]))
                losses += np.array(sm.loss_uni)
        gaps.append(losses[0] - losses[1])
    assert np.mean(gaps) < 0
