"""Operation records passed from the tensor engine to the accelerator model."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

PHASES = ("forward", "grad", "update")
GEMM_KINDS = ("conv", "dense")


@dataclass(frozen=True)
class LayerOp:
    """One layer's work in one training phase for one mini-batch.

    For GEMM kinds the geometry fields describe the convolution (dense layers
    are 1x1 convolutions on a 1x1 map). ``elements`` is the element count the
    SIMD array touches, ``saved`` the number of elements kept for the backward
    pass and ``params`` the parameter count of the layer.
    """

    layer: str
    kind: str
    phase: str
    batch: int
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    in_hw: tuple[int, int] = (1, 1)
    out_hw: tuple[int, int] = (1, 1)
    elements: int = 0
    saved: int = 0
    params: int = 0

    @property
    def is_gemm(self) -> bool:
        return self.kind in GEMM_KINDS

    @property
    def vectors(self) -> int:
        """Input vectors streamed through the array: one per output pixel."""
        return self.batch * self.out_hw[0] * self.out_hw[1]

    @property
    def macs(self) -> int:
        if not self.is_gemm:
            return 0
        return self.vectors * self.in_ch * self.out_ch * self.kernel ** 2


@dataclass
class TrainStepTrace:
    """Multiset of layer ops, kept in first-seen order for deterministic sums."""

    ops: Counter = field(default_factory=Counter)
    batches: int = 0

    def add(self, op: LayerOp, count: int = 1) -> None:
        self.ops[op] += count

    def extend(self, other: "TrainStepTrace") -> None:
        for op, n in other.ops.items():
            self.ops[op] += n
        self.batches += other.batches

    def __add__(self, other: "TrainStepTrace") -> "TrainStepTrace":
        out = TrainStepTrace()
        out.extend(self)
        out.extend(other)
        return out

    def items(self):
        return self.ops.items()

    def macs(self, phase: str | None = None) -> int:
        return sum(op.macs * n for op, n in self.ops.items() if phase is None or op.phase == phase)

    def count(self, kind: str | None = None, phase: str | None = None) -> int:
        return sum(n for op, n in self.ops.items()
                   if (kind is None or op.kind == kind) and (phase is None or op.phase == phase))

    def is_empty(self) -> bool:
        return not any(self.ops.values())
