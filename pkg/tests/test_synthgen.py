import numpy as np
import pytest

from stratum import synthgen


def test_attribute_table_order():
    t = synthgen.attribute_table(2)
    assert t.tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]


def test_example1_tables():
    spec = synthgen.example1_spec(0.02)
    np.testing.assert_allclose(spec.subclass_probs, [0.49, 0.01, 0.01, 0.49])
    np.testing.assert_array_equal(spec.subclass_means, [[-4, -4], [-4, 2], [4, -2], [4, 4]])
    np.testing.assert_array_equal(spec.superclass_of, [0, 1, 0, 1])
    np.testing.assert_allclose(spec.subclass_covs[2], 0.0004 * np.eye(2))
    assert spec.subclass_of_attribute((-1, 1)) == 1
    np.testing.assert_allclose(spec.superclass_probs, [0.5, 0.5])


@pytest.mark.parametrize("alpha", [0.0, 0.5, -0.1])
def test_example1_rejects_bad_alpha(alpha):
    with pytest.raises(ValueError):
        synthgen.example1_spec(alpha)


def test_spec_validation():
    table = synthgen.attribute_table(1)
    means = np.zeros((2, 1))
    covs = np.ones((2, 1, 1))
    with pytest.raises(ValueError, match="sum to 1"):
        synthgen.GenerativeSpec([0.5, 0.6], means, covs, [0, 1])
    with pytest.raises(ValueError, match="positive semidefinite"):
        synthgen.GenerativeSpec([0.5, 0.5], means, -covs, [0, 1])
    with pytest.raises(ValueError, match="two superclasses"):
        synthgen.GenerativeSpec([0.5, 0.5], means, covs, [0, 0])
    with pytest.raises(ValueError, match="2\\^k"):
        synthgen.GenerativeSpec([0.2, 0.3, 0.5], np.zeros((3, 1)), np.ones((3, 1, 1)), [0, 1, 1])
    assert len(table) == 2


def test_spec_round_trip():
    spec = synthgen.lemma1_spec(3, seed=4)
    back = synthgen.GenerativeSpec.loads(spec.dumps())
    for name in ("attribute_probs", "means", "covs", "labels"):
        np.testing.assert_array_equal(getattr(back, name), getattr(spec, name))
    assert back.k == spec.k == 4


def test_zero_probability_attribute_is_not_a_subclass():
    spec = synthgen.lemma1_spec(2, seed=0)
    assert spec.n_subclasses == 12
    np.testing.assert_allclose(spec.subclass_probs, 1 / 12)
    with pytest.raises(KeyError):
        spec.subclass_of_attribute((-1, 1, 1, 1))


def test_sampling_is_deterministic_and_prefix_stable():
    spec = synthgen.example1_spec(0.1)
    a = synthgen.sample_dataset(spec, 5000, seed=3)
    b = synthgen.sample_dataset(spec, 5000, seed=3)
    np.testing.assert_array_equal(a.features, b.features)
    v, z = synthgen.sample_rows(spec, 4000, 4200, seed=3)
    np.testing.assert_array_equal(v, a.features[4000:4200])
    short = synthgen.sample_dataset(spec, 100, seed=3)
    np.testing.assert_array_equal(short.features, a.features[:100])


def test_sample_frequencies_and_moments():
    spec = synthgen.example1_spec(0.1)
    data = synthgen.sample_dataset(spec, 40000, seed=1)
    z = data.z
    freq = np.bincount(z, minlength=4) / data.n
    se = np.sqrt(spec.subclass_probs * (1 - spec.subclass_probs) / data.n)
    assert np.all(np.abs(freq - spec.subclass_probs) < 5 * se)
    for c in range(4):
        pts = data.features[z == c]
        np.testing.assert_allclose(pts.mean(axis=0), spec.subclass_means[c], atol=0.02)
        np.testing.assert_allclose(pts.std(axis=0), 0.1, rtol=0.1)
    np.testing.assert_array_equal(data.y, spec.superclass_of[z])


def test_override_subclass_probs():
    spec = synthgen.example1_spec(0.02)
    data = synthgen.sample_dataset(spec, 4000, seed=0, subclass_probs=[1, 1, 1, 1])
    freq = np.bincount(data.z, minlength=4) / data.n
    assert np.all(np.abs(freq - 0.25) < 0.04)


def test_feature_map_applies():
    base = synthgen.example1_spec(0.1)
    spec = synthgen.GenerativeSpec(base.attribute_probs, base.means, base.covs, base.labels,
                                   feature_map=lambda v: 2.0 * v)
    plain = synthgen.sample_dataset(base, 50, seed=2)
    mapped = synthgen.sample_dataset(spec, 50, seed=2)
    np.testing.assert_allclose(mapped.features, 2.0 * plain.features)
    with pytest.raises(ValueError):
        spec.dumps()


def test_degenerate_covariance_samples_exact_means():
    spec = synthgen.GenerativeSpec([0.5, 0.5], [[1.0, 2.0], [3.0, 4.0]], np.zeros((2, 2, 2)), [0, 1])
    data = synthgen.sample_dataset(spec, 20, seed=0)
    np.testing.assert_array_equal(data.features, spec.means[data.y])


def test_z_reads_are_audited():
    data = synthgen.sample_dataset(synthgen.example1_spec(0.1), 10, seed=0)
    with data.audit("cluster"):
        data.z
    data.z
    assert data.z_reads == ["cluster", "unstaged"]
    assert data.subset([0, 1]).z_reads == []


def test_dataset_validation():
    with pytest.raises(ValueError, match="spans several"):
        synthgen.Dataset(np.zeros((2, 1)), [0, 1], z=[0, 0])
    with pytest.raises(ValueError, match="out of range"):
        synthgen.Dataset(np.zeros((2, 1)), [0, 3], n_classes=2)
    with pytest.raises(ValueError, match="all zero"):
        synthgen.Dataset(np.zeros((2, 1)), [0, 1], eval_weights=[0, 0])
    with pytest.raises(AttributeError):
        synthgen.Dataset(np.zeros((2, 1)), [0, 1]).z
