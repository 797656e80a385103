import numpy as np
import pytest

from celltree.synth import generate_synthetic, truth_from_json, truth_to_json


def test_same_seed_bit_identical():
    a_cm, a_truth = generate_synthetic(120, 40, 3, 2, seed=7)
    b_cm, b_truth = generate_synthetic(120, 40, 3, 2, seed=7)
    np.testing.assert_array_equal(a_cm.counts, b_cm.counts)
    np.testing.assert_array_equal(a_truth.true_type, b_truth.true_type)
    np.testing.assert_array_equal(a_truth.type_log_means, b_truth.type_log_means)


def test_different_seed_differs():
    a, _ = generate_synthetic(60, 20, 2, 2, seed=0)
    b, _ = generate_synthetic(60, 20, 2, 2, seed=1)
    assert not np.array_equal(a.counts, b.counts)


def test_invalid_proportions_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(10, 5, 3, 1, proportions=[0.5, 0.4], seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(10, 5, 2, 1, proportions=[0.9, 0.2], seed=0)


def test_proportions_within_multinomial_noise():
    props = np.array([0.7, 0.2, 0.05, 0.05])
    n = 4000
    _, truth = generate_synthetic(n, 30, 4, 2, proportions=props, seed=3)
    observed = np.bincount(truth.true_type, minlength=4)
    expected = n * props
    sigma = np.sqrt(n * props * (1 - props))
    assert np.all(np.abs(observed - expected) <= 3 * sigma)


def test_zero_batch_strength_means_no_batch_shift():
    cm, truth = generate_synthetic(3000, 25, 1, 2, batch_strength=0.0, seed=5)
    np.testing.assert_array_equal(truth.batch_log_offsets, 0.0)
    b0 = cm.counts[cm.batch == "batch0"]
    b1 = cm.counts[cm.batch == "batch1"]
    # per-gene mean fractions differ only by sampling noise
    f0 = b0.mean(axis=0) / b0.mean(axis=0).sum()
    f1 = b1.mean(axis=0) / b1.mean(axis=0).sum()
    assert np.max(np.abs(f0 - f1)) < 0.02


def test_mean_count_scales_linearly_with_library_parameter():
    small, _ = generate_synthetic(800, 20, 2, 1, seed=9, log_library=np.log(500.0))
    large, _ = generate_synthetic(800, 20, 2, 1, seed=9, log_library=np.log(5000.0))
    ratio = large.counts.mean() / small.counts.mean()
    assert ratio == pytest.approx(10.0, rel=0.1)


def test_dispersion_positive_and_types_are_tree_leaves():
    _, truth = generate_synthetic(50, 15, 5, 2, seed=11)
    assert np.all(truth.dispersion > 0)
    leaf_types = sorted(leaf.type_id for leaf in truth.true_tree.leaves())
    assert leaf_types == list(range(5))


def test_truth_json_roundtrip():
    _, truth = generate_synthetic(30, 10, 3, 2, seed=13)
    again = truth_from_json(truth_to_json(truth))
    np.testing.assert_array_equal(again.true_type, truth.true_type)
    np.testing.assert_allclose(again.batch_log_offsets, truth.batch_log_offsets)
    np.testing.assert_allclose(again.type_log_means, truth.type_log_means)
    assert sorted(l.type_id for l in again.true_tree.leaves()) == sorted(
        l.type_id for l in truth.true_tree.leaves()
    )


def test_counts_are_overdispersed_relative_to_poisson():
    cm, truth = generate_synthetic(4000, 10, 1, 1, seed=17, library_sigma=0.0)
    mean = cm.counts.mean(axis=0)
    var = cm.counts.var(axis=0)
    # NB variance mu + mu^2/theta strictly exceeds Poisson for busy genes
    busy = mean > 20
    assert np.all(var[busy] > mean[busy])
