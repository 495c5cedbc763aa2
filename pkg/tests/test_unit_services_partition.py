import numpy as np
import pytest

from src.repository.datasets import synth_blobs
from src.services.errors import PartitionError
from src.services.partition import (
    largest_remainder,
    partition_dirichlet,
    partition_iid,
    sample_proportions,
    select_malicious,
)


@pytest.fixture()
def dataset():
    return synth_blobs(num_classes=5, per_class=37, dim=2, spread=1.0, seed=0)


def assert_disjoint_cover(partition, n):
    merged = np.concatenate(partition.shards)
    assert merged.size == n
    assert np.array_equal(np.sort(merged), np.arange(n))


@pytest.mark.parametrize("seed", range(100))
def test_iid_invariants(dataset, seed):
    partition = partition_iid(dataset, 7, seed)
    assert_disjoint_cover(partition, len(dataset))
    sizes = partition.sizes()
    assert max(sizes) - min(sizes) <= 1
    for c in range(dataset.num_classes):
        counts = [int(np.sum(dataset.targets[shard] == c)) for shard in partition.shards]
        assert max(counts) - min(counts) <= 1


@pytest.mark.parametrize("seed", range(100))
def test_dirichlet_invariants(dataset, seed):
    partition = partition_dirichlet(dataset, 6, 0.5, seed)
    assert_disjoint_cover(partition, len(dataset))
    assert partition.scheme == "dirichlet"
    assert partition.beta == 0.5


def test_dirichlet_large_beta_is_nearly_uniform():
    ds = synth_blobs(num_classes=3, per_class=1000, dim=2, spread=1.0, seed=0)
    partition = partition_dirichlet(ds, 5, 1e6, seed=4)
    for shard in partition.shards:
        for c in range(3):
            share = np.sum(ds.targets[shard] == c) / 1000
            assert abs(share - 0.2) < 0.02


@pytest.mark.parametrize("beta", [0.5, 1.0])
def test_dirichlet_sampler_moments(beta):
    k, draws = 4, 1000
    rng = np.random.default_rng(17)
    x = np.array([sample_proportions(k, beta, rng)[0] for _ in range(draws)])
    mean, var = 1 / k, (1 / k) * (1 - 1 / k) / (k * beta + 1)
    assert abs(x.mean() - mean) < 3 * np.sqrt(var / draws)
    fourth = np.mean((x - x.mean()) ** 4)
    assert abs(x.var() - var) < 3 * np.sqrt((fourth - x.var() ** 2) / draws)


def test_largest_remainder_sums_to_total():
    counts = largest_remainder(np.array([0.335, 0.333, 0.332]), 10)
    assert counts.sum() == 10
    assert counts.tolist() == [4, 3, 3]


def test_bad_arguments(dataset):
    with pytest.raises(PartitionError):
        partition_iid(dataset, 0, 0)
    with pytest.raises(PartitionError):
        partition_iid(dataset, len(dataset) + 1, 0)
    with pytest.raises(PartitionError):
        partition_dirichlet(dataset, 3, 0.0, 0)


def test_select_malicious():
    assert select_malicious(10, 3) == [0, 1, 2]
    assert select_malicious(10, 3, explicit=[7, 2]) == [2, 7]
    drawn = select_malicious(10, 3, seed=1)
    assert drawn == select_malicious(10, 3, seed=1)
    assert len(set(drawn)) == 3
    with pytest.raises(PartitionError):
        select_malicious(2, 3)
