import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from approxfl.partition import (PartitionError, PartitionSpec, assign_groups, class_blocks, group_class_counts,
                                manifest, partition)

labels_1000 = np.arange(1000) % 10


def _is_partition(shards, n):
    allidx = np.concatenate(shards)
    return len(allidx) == n and len(np.unique(allidx)) == n


@pytest.mark.parametrize("kind", ["iid", "dirichlet", "rc"])
def test_shards_partition_the_data(kind):
    shards = partition(labels_1000, PartitionSpec(kind, 16, seed=3))
    assert len(shards) == 16
    assert _is_partition(shards, 1000)
    assert all(np.all(np.diff(s) > 0) for s in shards)


def test_iid_sizes_equal():
    sizes = [len(s) for s in partition(labels_1000, PartitionSpec("iid", 16))]
    assert max(sizes) - min(sizes) <= 1


def test_dirichlet_rebalanced_and_skewed():
    shards = partition(labels_1000, PartitionSpec("dirichlet", 16, seed=0, alpha=0.1))
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1
    # low alpha: most devices are dominated by few classes
    top = [np.bincount(labels_1000[s], minlength=10).max() / len(s) for s in shards]
    assert np.median(top) > 0.3


def test_rc_classes_follow_groups():
    # [TRIVIAL] 10 classes over 3 groups: blocks of 4, 3, 3; 16 devices split 5, 5, 6
    assert class_blocks(10, 3) == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]
    groups = assign_groups(16, [("g1", 1 / 3), ("g2", 1 / 3), ("g3", 1 / 3)])
    assert [len(groups.devices(g)) for g in range(3)] == [5, 5, 6]
    shards = partition(labels_1000, PartitionSpec("rc", 16, seed=1), groups)
    for d, s in enumerate(shards):
        cls = set(labels_1000[s].tolist())
        assert cls <= set(class_blocks(10, 3)[groups.device_group[d]])
    counts = group_class_counts(labels_1000, shards, groups, 10)
    assert counts[0].tolist() == [100] * 4 + [0] * 6
    assert counts[2].tolist() == [0] * 7 + [100] * 3
    # equal shard sizes within each group
    for g in range(3):
        sizes = [len(shards[d]) for d in groups.devices(g)]
        assert max(sizes) - min(sizes) <= 1


def test_assign_groups_fractions():
    g = assign_groups(16, [("a", 0.2), ("b", 0.2), ("c", 0.6)])
    assert [len(g.devices(i)) for i in range(3)] == [3, 3, 10]
    assert g.label_of(15) == "c"
    with pytest.raises(PartitionError):
        assign_groups(16, [("a", 0.5), ("b", 0.4)])
    with pytest.raises(PartitionError):
        assign_groups(16, [])


def test_errors():
    with pytest.raises(PartitionError):
        PartitionSpec("zipf", 4)
    with pytest.raises(PartitionError):
        PartitionSpec("dirichlet", 4, alpha=0)
    with pytest.raises(PartitionError):
        partition(np.arange(3), PartitionSpec("iid", 4))
    with pytest.raises(PartitionError):
        partition(np.arange(10) % 2, PartitionSpec("rc", 4))


def test_deterministic_and_manifest():
    a = partition(labels_1000, PartitionSpec("dirichlet", 8, seed=7))
    b = partition(labels_1000, PartitionSpec("dirichlet", 8, seed=7))
    assert manifest(a) == manifest(b)
    assert json.loads(manifest(a))["0"] == a[0].tolist()
    c = partition(labels_1000, PartitionSpec("dirichlet", 8, seed=8))
    assert manifest(a) != manifest(c)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["iid", "dirichlet", "rc"]), st.integers(3, 20), st.integers(60, 300),
       st.integers(0, 1000), st.floats(0.05, 5.0))
def test_partition_property(kind, devices, n, seed, alpha):
    labels = np.random.default_rng(seed).integers(0, 10, n)
    labels[:10] = np.arange(10)  # every class present
    shards = partition(labels, PartitionSpec(kind, devices, seed=seed, alpha=alpha))
    assert _is_partition(shards, n)
