"""Per-device data shards (IID, Dirichlet, resource-correlated) and device groups."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    kind: str  # "iid" | "dirichlet" | "rc"
    device_count: int
    seed: int = 0
    alpha: float = 0.1
    group_count: int = 3

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "rc"):
            raise PartitionError(f"unknown partition kind {self.kind!r}")
        if self.device_count < 1:
            raise PartitionError("device_count must be positive")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise PartitionError("Dirichlet alpha must be positive")
        if self.kind == "rc" and self.group_count < 1:
            raise PartitionError("group_count must be positive")


@dataclass(frozen=True)
class GroupAssignment:
    """Device -> group index, and group -> configuration label."""

    device_group: tuple
    labels: tuple

    @property
    def group_count(self) -> int:
        return len(self.labels)

    def devices(self, g: int) -> list[int]:
        return [d for d, gg in enumerate(self.device_group) if gg == g]

    def label_of(self, device: int) -> str:
        return self.labels[self.device_group[device]]


def assign_groups(device_count: int, mixture) -> GroupAssignment:
    """Contiguous device blocks, one per (label, fraction) entry.

    Each group gets floor(fraction * device_count) devices; devices left over
    by the rounding go to the last group.
    """
    mixture = list(mixture)
    if not mixture:
        raise PartitionError("mixture is empty")
    fracs = np.array([f for _, f in mixture], dtype=float)
    if np.any(fracs < 0) or abs(fracs.sum() - 1.0) > 1e-6:
        raise PartitionError(f"mixture fractions must be non-negative and sum to 1, got {fracs.sum()}")
    sizes = [int(np.floor(f * device_count + 1e-9)) for f in fracs]
    sizes[-1] += device_count - sum(sizes)
    groups = []
    for g, n in enumerate(sizes):
        groups += [g] * n
    return GroupAssignment(tuple(groups), tuple(label for label, _ in mixture))


def class_blocks(num_classes: int, group_count: int) -> list[list[int]]:
    """Contiguous class-index blocks with sizes as equal as possible (larger first)."""
    if num_classes < group_count:
        raise PartitionError(f"{num_classes} classes cannot be split across {group_count} groups")
    return [list(map(int, b)) for b in np.array_split(np.arange(num_classes), group_count)]


def _equal_split(idx: np.ndarray, parts: int) -> list[np.ndarray]:
    return [np.sort(p) for p in np.array_split(idx, parts)]


def _dirichlet(labels: np.ndarray, spec: PartitionSpec, rng: np.random.Generator) -> list[np.ndarray]:
    d = spec.device_count
    shards: list[list[int]] = [[] for _ in range(d)]
    for j in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == j))
        p = rng.dirichlet(np.full(d, spec.alpha))
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
        for dev, part in enumerate(np.split(idx, cuts)):
            shards[dev].extend(part.tolist())
    # greedy rebalance to equal sizes: surplus samples go, in class order,
    # to the devices furthest below their target
    n = len(labels)
    target = [n // d + (1 if i < n % d else 0) for i in range(d)]
    pool = []
    for dev in range(d):
        s = shards[dev]
        if len(s) > target[dev]:
            s.sort(key=lambda i: (labels[i], i))
            # give away samples of the device's least represented classes
            counts = {}
            for i in s:
                counts[labels[i]] = counts.get(labels[i], 0) + 1
            s.sort(key=lambda i: (-counts[labels[i]], labels[i], i))
            pool.extend(s[target[dev]:])
            del s[target[dev]:]
    pool.sort(key=lambda i: (labels[i], i))
    for dev in sorted(range(d), key=lambda k: len(shards[k]) - target[k]):
        need = target[dev] - len(shards[dev])
        if need > 0:
            shards[dev].extend(pool[:need])
            del pool[:need]
    return [np.sort(np.array(s, dtype=np.int64)) for s in shards]


def partition(labels, spec: PartitionSpec, groups: GroupAssignment | None = None) -> list[np.ndarray]:
    """Sample indices for every device.

    For ``rc`` each group owns a contiguous block of classes and its devices
    split the group's samples IID. ``groups`` defaults to equal contiguous
    device blocks.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if spec.device_count > n:
        raise PartitionError(f"{spec.device_count} devices but only {n} samples")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "iid":
        return _equal_split(rng.permutation(n), spec.device_count)
    if spec.kind == "dirichlet":
        return _dirichlet(labels, spec, rng)
    num_classes = int(labels.max()) + 1 if n else 0
    blocks = class_blocks(num_classes, spec.group_count)
    if groups is None:
        groups = assign_groups(spec.device_count, [(f"g{i + 1}", 1 / spec.group_count) for i in range(spec.group_count)])
    if groups.group_count != spec.group_count or len(groups.device_group) != spec.device_count:
        raise PartitionError("group assignment does not match the partition spec")
    shards: list[np.ndarray] = [np.zeros(0, np.int64)] * spec.device_count
    for g, cls in enumerate(blocks):
        devs = groups.devices(g)
        idx = rng.permutation(np.flatnonzero(np.isin(labels, cls)))
        if not devs:
            raise PartitionError(f"group {g + 1} has no devices")
        for dev, part in zip(devs, _equal_split(idx, len(devs))):
            shards[dev] = part.astype(np.int64)
    return shards


def group_class_counts(labels, shards, groups: GroupAssignment, num_classes: int) -> list[np.ndarray]:
    """Per-group class histogram of the group's training data (D_g)."""
    labels = np.asarray(labels)
    out = []
    for g in range(groups.group_count):
        idx = np.concatenate([shards[d] for d in groups.devices(g)] or [np.zeros(0, np.int64)])
        out.append(np.bincount(labels[idx], minlength=num_classes))
    return out


def manifest(shards) -> str:
    return json.dumps({str(d): s.tolist() for d, s in enumerate(shards)})
