"""Client-side strategies: approximate accelerators, subset training, small
models, dropping devices and FedProx, plus the masked-submodel plumbing."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .accel import AcceleratorConfig, accelerator
from .nn import Model


class StrategyKind(str, enum.Enum):
    OURS = "ours"
    HETEROFL = "heterofl"
    FEDROLEX = "fedrolex"
    SMALL_MODEL = "small"
    DROP = "drop"
    FEDPROX = "fedprox"


SCALES = {"S1": 1.0, "S2": 0.5, "S3": 0.25, "S4": 0.125}
FRACTIONS = {"F1": 1.0, "F2": 0.5, "F3": 0.25}
FEDPROX_MU = 0.01


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind = StrategyKind.OURS
    accelerator: str = "C1"
    scale: float = 1.0
    mu: float = 0.0
    batch_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if not 0 < self.scale <= 1:
            raise ValueError("scale must be in (0, 1]")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must be in (0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        accelerator(self.accelerator)
        if self.kind in (StrategyKind.HETEROFL, StrategyKind.FEDROLEX, StrategyKind.SMALL_MODEL) and self.accelerator != "C1":
            raise ValueError(f"{self.kind.value} runs on the full-precision accelerator C1")

    @property
    def label(self) -> str:
        k = self.kind
        if k is StrategyKind.OURS:
            return f"ours:{self.accelerator}"
        if k in (StrategyKind.HETEROFL, StrategyKind.FEDROLEX, StrategyKind.SMALL_MODEL):
            return f"{k.value}:s={self.scale:g}"
        if k is StrategyKind.FEDPROX:
            return f"fedprox:f={self.batch_fraction:g}:mu={self.mu:g}:{self.accelerator}"
        return "drop"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "accelerator": self.accelerator, "scale": self.scale,
                "mu": self.mu, "batch_fraction": self.batch_fraction}


# ---------------------------------------------------------------------------
# masks

SubsetMask = dict  # channel space -> sorted index array


def _count(q: int, s: float) -> int:
    if not 0 < s <= 1:
        raise ValueError("scale must be in (0, 1]")
    n = int(np.floor(s * q + 1e-9))
    if n == 0:
        raise ValueError(f"scale {s} keeps no channels of a {q}-channel layer")
    return n


def heterofl_indices(q: int, s: float) -> np.ndarray:
    return np.arange(_count(q, s))


def fedrolex_indices(q: int, s: float, r: int) -> np.ndarray:
    """Rolling window of floor(s*q) channels starting at r mod q, wrapping at q."""
    n = _count(q, s)
    start = r % q
    return (start + np.arange(n)) % q


def heterofl_mask(sizes: dict, s: float) -> SubsetMask:
    return {sp: heterofl_indices(q, s) for sp, q in sizes.items()}


def fedrolex_mask(sizes: dict, s: float, r: int) -> SubsetMask:
    return {sp: fedrolex_indices(q, s, r) for sp, q in sizes.items()}


def _index(shape, axes, mask):
    idx = []
    for dim, sp in zip(shape, axes):
        if sp is None:
            idx.append(np.arange(dim))
        else:
            sel = np.asarray(mask[sp])
            if sel.size and sel.max() >= dim:
                raise RuntimeError(f"mask for {sp} exceeds dimension {dim}")
            idx.append(sel)
    return np.ix_(*idx)


def extract_submodel(server: Model, mask: SubsetMask) -> Model:
    """Dense sub-model holding the masked slices of the server parameters."""
    sizes = {sp: len(ix) for sp, ix in mask.items()}
    sub = server.resized(sizes)
    spaces = server.spaces()
    full = server.state()
    sub_state = {}
    for name, arr in full.items():
        sub_state[name] = arr[_index(arr.shape, spaces[name], mask)]
    sub.load_state(sub_state)
    return sub


class Aggregator:
    """Weighted per-parameter average over the clients holding each element.

    Contributions are scaled by their weight in float64 (exact for binary32
    values and integer weights), sorted per element and summed in that order,
    so the result does not depend on client order. Elements no client holds
    keep the server value.
    """

    def __init__(self, server_state: dict):
        self.server = server_state
        self.terms = {k: [] for k in server_state}
        self.weights = {k: np.zeros(v.shape, np.float64) for k, v in server_state.items()}
        self.clients = 0

    def add(self, state: dict, weight: float, mask: SubsetMask | None = None, spaces: dict | None = None):
        if weight <= 0:
            raise ValueError("aggregation weight must be positive")
        for name, full in self.server.items():
            v = np.asarray(state[name], dtype=np.float64)
            if mask is None:
                if v.shape != full.shape:
                    raise ValueError(f"{name}: client shape {v.shape} != server {full.shape}")
                term = v * weight
                self.weights[name] += weight
            else:
                ix = _index(full.shape, spaces[name], mask)
                term = np.zeros(full.shape, np.float64)
                term[ix] = v * weight
                self.weights[name][ix] += weight
            self.terms[name].append(term)
        self.clients += 1

    def result(self) -> dict:
        out = {}
        for name, full in self.server.items():
            terms = self.terms[name]
            if not terms:
                out[name] = full.copy()
                continue
            stacked = np.sort(np.stack(terms), axis=0)
            total = np.zeros(full.shape, np.float64)
            for t in stacked:
                total += t
            w = self.weights[name]
            held = w > 0
            avg = np.where(held, total / np.where(held, w, 1.0), 0.0)
            out[name] = np.where(held, avg.astype(full.dtype), full)
        return out


def merge_submodel(server_state: dict, sub_state: dict, mask: SubsetMask, spaces: dict,
                   buffers: Aggregator, weight: float) -> Aggregator:
    buffers.add(sub_state, weight, mask, spaces)
    return buffers


# ---------------------------------------------------------------------------
# dispatch

@dataclass
class LocalPlan:
    participate: bool
    accelerator: AcceleratorConfig | None = None
    mask: SubsetMask | None = None
    mu: float = 0.0
    batch_fraction: float = 1.0


def apply_strategy(device: int, strategy: Strategy, server: Model, round_index: int) -> LocalPlan:
    """What a device trains this round and on which hardware."""
    k = strategy.kind
    if k is StrategyKind.DROP:
        return LocalPlan(False)
    acc = accelerator(strategy.accelerator)
    if k is StrategyKind.HETEROFL:
        return LocalPlan(True, acc, heterofl_mask(server.space_sizes(), strategy.scale))
    if k is StrategyKind.FEDROLEX:
        return LocalPlan(True, acc, fedrolex_mask(server.space_sizes(), strategy.scale, round_index))
    if k is StrategyKind.FEDPROX:
        return LocalPlan(True, acc, None, strategy.mu, strategy.batch_fraction)
    # OURS and SMALL_MODEL train the full (server-sized) model
    return LocalPlan(True, acc)
