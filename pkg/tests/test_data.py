import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfl.data import (
    ClientPartition,
    DataError,
    Dataset,
    ParseError,
    PartitionError,
    SchemaError,
    generate_synthetic,
    load_csv,
    partition_power_law,
    power_law_sizes,
    save_csv,
)


def _labelled(n, num_classes, seed=0, dim=3):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    return Dataset(rng.normal(size=(n, dim)), rng.permutation(labels), num_classes)


class TestDataset:
    def test_basic_properties(self):
        ds = Dataset(np.zeros((4, 2)), np.array([0, 1, 2, 1]), 3)
        assert ds.num_samples == 4
        assert ds.dim == 2

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 2)), np.array([0, 3]), 3)

    def test_non_finite_features(self):
        with pytest.raises(DataError):
            Dataset(np.array([[0.0, np.nan]]), np.array([0]), 2)

    def test_label_shape_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)

    def test_float_labels_rejected(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 2)), np.array([0.0, 1.0]), 2)

    def test_subset(self):
        ds = _labelled(10, 2)
        sub = ds.subset([1, 3])
        np.testing.assert_array_equal(sub.features, ds.features[[1, 3]])
        assert sub.num_classes == 2


class TestClientPartition:
    def test_weights(self):
        part = ClientPartition((np.array([0, 1, 2]), np.array([3])))
        np.testing.assert_allclose(part.p, [0.75, 0.25])
        np.testing.assert_array_equal(part.n, [3, 1])

    def test_overlap_rejected(self):
        with pytest.raises(PartitionError):
            ClientPartition((np.array([0, 1]), np.array([1, 2])))

    def test_empty_client_rejected(self):
        with pytest.raises(PartitionError):
            ClientPartition((np.array([0, 1]), np.array([], dtype=int)))


class TestPowerLawSizes:
    def test_sum_and_minimum(self):
        sizes = power_law_sizes(20509, 100, 1.5, np.random.default_rng(0))
        assert sizes.sum() == 20509
        assert sizes.min() >= 1

    def test_shape_follows_rank_law(self):
        sizes = np.sort(power_law_sizes(100000, 10, 1.0, np.random.default_rng(1)))[::-1]
        expected = 100000 / np.arange(1, 11) / np.sum(1 / np.arange(1, 11))
        np.testing.assert_allclose(sizes, expected, atol=1.0)

    def test_exponent_zero_is_balanced(self):
        sizes = power_law_sizes(1003, 10, 0.0, np.random.default_rng(2))
        assert sizes.max() - sizes.min() <= 1

    def test_deficit_redistributed(self):
        # a steep law would round the tail to zero
        sizes = power_law_sizes(30, 20, 3.0, np.random.default_rng(3))
        assert sizes.sum() == 30
        assert sizes.min() == 1

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            power_law_sizes(5, 6, 1.0, np.random.default_rng(0))

    @settings(max_examples=60, deadline=None)
    @given(
        total=st.integers(1, 5000),
        n=st.integers(1, 200),
        exponent=st.floats(0.0, 3.0),
        seed=st.integers(0, 2**31),
    )
    def test_sum_property(self, total, n, exponent, seed):
        if total < n:
            return
        sizes = power_law_sizes(total, n, exponent, np.random.default_rng(seed))
        assert sizes.sum() == total
        assert sizes.min() >= 1


class TestPartitionPowerLaw:
    def test_full_class_range(self):
        ds = _labelled(2000, 10)
        part = partition_power_law(ds, 100, 1.0, (1, 10), seed=0)
        assert part.n_clients == 100
        assert abs(part.p.sum() - 1.0) <= 1e-12
        covered = np.concatenate(part.assignments)
        assert np.unique(covered).size == covered.size == 2000

    def test_saturation(self):
        ds = _labelled(30, 3)
        part = partition_power_law(ds, 30, 1.5, seed=4)
        np.testing.assert_array_equal(part.n, np.ones(30))

    def test_single_class_clients(self):
        ds = _labelled(3000, 10)
        part = partition_power_law(ds, 30, 0.0, (1, 1), seed=5)
        for i in range(part.n_clients):
            assert np.unique(part.client_data(ds, i).labels).size == 1

    def test_class_count_respected(self):
        ds = _labelled(3000, 10)
        part = partition_power_law(ds, 30, 0.5, (2, 4), seed=6)
        counts = [np.unique(part.client_data(ds, i).labels).size for i in range(30)]
        assert max(counts) <= 4

    def test_deterministic(self):
        ds = _labelled(500, 5)
        a = partition_power_law(ds, 10, 1.2, (1, 5), seed=9)
        b = partition_power_law(ds, 10, 1.2, (1, 5), seed=9)
        assert a.equals(b)

    def test_infeasible_names_constraint(self):
        # one client must hold 90% of a 10-class balanced set from a single class
        ds = _labelled(1000, 10)
        with pytest.raises(PartitionError, match="classes"):
            partition_power_law(ds, 2, 6.0, (1, 1), seed=0)

    def test_too_many_clients(self):
        with pytest.raises(PartitionError):
            partition_power_law(_labelled(5, 2), 6, 1.0)

    def test_bad_range(self):
        with pytest.raises(PartitionError):
            partition_power_law(_labelled(50, 5), 5, 1.0, (0, 3))

    def test_exponent_zero_has_lower_size_variance(self):
        ds = _labelled(2000, 10)
        flat, skewed = [], []
        for seed in range(100):
            flat.append(np.var(partition_power_law(ds, 20, 0.0, (10, 10), seed=seed).n))
            skewed.append(np.var(partition_power_law(ds, 20, 1.5, (10, 10), seed=seed).n))
        assert np.mean(flat) < np.mean(skewed)
        assert max(flat) < min(skewed)


class TestSynthetic:
    def test_full_scale_shape(self):
        ds, part = generate_synthetic(1, 1, 100, 60, 10, seed=0)
        assert ds.num_samples == 20509
        assert ds.dim == 60
        assert part.n_clients == 100
        assert part.n.max() > 10 * part.n.min()
        assert abs(part.p.sum() - 1.0) <= 1e-12

    def test_single_client(self):
        ds, part = generate_synthetic(1, 1, 1, 60, 10, seed=3, total_samples=500)
        assert part.n_clients == 1
        assert part.p[0] == 1.0
        assert part.n[0] == ds.num_samples

    def test_deterministic(self):
        a = generate_synthetic(1, 1, 20, 10, 5, seed=7, total_samples=1000)
        b = generate_synthetic(1, 1, 20, 10, 5, seed=7, total_samples=1000)
        assert a[0].equals(b[0])
        assert a[1].equals(b[1])

    def test_seed_changes_data(self):
        a, _ = generate_synthetic(1, 1, 20, 10, 5, seed=7, total_samples=1000)
        b, _ = generate_synthetic(1, 1, 20, 10, 5, seed=8, total_samples=1000)
        assert not a.equals(b)

    def test_heterogeneity_grows_with_beta(self):
        # client feature means spread out as beta grows
        def spread(beta):
            ds, part = generate_synthetic(0, beta, 50, 10, 5, seed=1, total_samples=5000, power_exponent=0.0)
            means = np.array([part.client_data(ds, i).features.mean() for i in range(50)])
            return means.std()

        assert spread(4.0) > 2 * spread(0.0)

    def test_invalid_arguments(self):
        with pytest.raises(DataError):
            generate_synthetic(1, 1, 0, 60, 10)
        with pytest.raises(DataError):
            generate_synthetic(1, 1, 10, 60, 1)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds, _ = generate_synthetic(1, 1, 5, 6, 4, seed=2, total_samples=200)
        path = tmp_path / "d.csv"
        save_csv(ds, path)
        back = load_csv(path)
        np.testing.assert_allclose(back.features, ds.features, atol=1e-9, rtol=0)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_small_file(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("f0,f1,label\n0.5,1,0\n2,3,1\n-1,0.25,2\n")
        ds = load_csv(path)
        assert (ds.num_samples, ds.dim, ds.num_classes) == (3, 2, 3)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("")
        with pytest.raises(SchemaError):
            load_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("a,b,label\n1,2,0\n")
        with pytest.raises(SchemaError):
            load_csv(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("f0,f1,label\n1,2,0\n1,2\n")
        with pytest.raises(ParseError) as info:
            load_csv(path)
        assert info.value.line == 3

    def test_bad_float_reports_line(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("f0,f1,label\n1,2,0\n3,x,1\n4,5,1\n")
        with pytest.raises(ParseError) as info:
            load_csv(path)
        assert info.value.line == 3

    def test_non_integer_label(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text("f0,label\n1,0.5\n")
        with pytest.raises(SchemaError):
            load_csv(path)
