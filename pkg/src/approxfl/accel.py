"""Analytical energy model of the training accelerator.

A 16x16 weight-stationary systolic array (SA) runs every convolution and
dense GEMM; a 16-lane FP32 SIMD array runs everything else. The counting rules
are documented in docs/energy_model.md and summarised here:

* SA tiling is per kernel tap: reduction channels go down the rows, output
  channels across the columns, so a phase needs
  ceil(rows/16) * ceil(cols/16) * k^2 passes, each streaming one vector per
  output pixel. Every PE is charged on every pass, padded slots included.
* SRAM words are counted at the storage width: IBuf 16 reads per vector per
  pass, WBuf 256 reads per vector per pass, OBuf one partial-sum write per
  pass and one read per accumulated pass. Each SIMD op touches VMem once and
  InMem once.
* DRAM carries only state that crosses phases: inputs saved for backward
  (written in forward, read in the weight-update phase), weights (read in
  forward and in the input-gradient phase), weight gradients (written), and
  the FP32 master copy during the optimizer step. Each DRAM word also costs
  one access on the SRAM buffer it lands in.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .arith import BFLOAT10, BFLOAT12, BFLOAT16, FP32, FloatFormat, MultiplierSpec
from .trace import LayerOp, TrainStepTrace

BUFFERS = ("ibuf", "wbuf", "obuf", "inmem", "vmem")
KIB = 1024
GIB = 1024 ** 3


class CapacityError(RuntimeError):
    pass


def cdiv(a: int, b: int) -> int:
    return -(-a // b)


# ---------------------------------------------------------------------------
# configuration

def mac_key(fmt: FloatFormat, mult: MultiplierSpec) -> str:
    return f"{fmt.name}/{mult.label}"


@dataclass(frozen=True)
class EnergyTable:
    """Per-operation (pJ/op) and per-bit (pJ/bit) costs."""

    mac_pj: dict = field(default_factory=lambda: {
        "fp32/exact": 26.8,
        "bfloat16/exact": 5.35,
        "bfloat16/mbm-7": 3.11,
        "bfloat12/mbm-3": 2.78,
        "bfloat10/mbm-1": 2.65,
    })
    alu_pj: float = 31.4
    sram_pj_per_bit: dict = field(default_factory=lambda: {64: 0.401, 60: 0.412})
    dram_pj_per_bit: float = 41.0

    def __post_init__(self):
        vals = list(self.mac_pj.values()) + list(self.sram_pj_per_bit.values()) + [self.alu_pj, self.dram_pj_per_bit]
        if any(not v > 0 for v in vals):
            raise ValueError("all energy costs must be positive")

    def mac_cost(self, key: str) -> float:
        try:
            return self.mac_pj[key]
        except KeyError:
            raise KeyError(f"energy table has no MAC cost for {key!r}; add it to mac_pj") from None

    def sram_cost(self, bus_bits: int) -> float:
        try:
            return self.sram_pj_per_bit[int(bus_bits)]
        except KeyError:
            raise KeyError(f"energy table has no SRAM cost for a {bus_bits}-bit bus") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sram_pj_per_bit"] = {str(k): v for k, v in self.sram_pj_per_bit.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyTable":
        base = cls()
        unknown = set(d) - {"mac_pj", "alu_pj", "sram_pj_per_bit", "dram_pj_per_bit"}
        if unknown:
            raise ValueError(f"unknown energy table keys: {sorted(unknown)}")
        return cls(
            mac_pj={**base.mac_pj, **d.get("mac_pj", {})},
            alu_pj=float(d.get("alu_pj", base.alu_pj)),
            sram_pj_per_bit={**base.sram_pj_per_bit, **{int(k): float(v) for k, v in d.get("sram_pj_per_bit", {}).items()}},
            dram_pj_per_bit=float(d.get("dram_pj_per_bit", base.dram_pj_per_bit)),
        )

    @classmethod
    def load(cls, path) -> "EnergyTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SimdCosts:
    """ALU ops per element for each non-GEMM op kind and phase."""

    bn_forward: int = 4
    bn_grad: int = 6
    relu: int = 1
    add: int = 1
    pool: int = 1
    softmax_forward: int = 4
    softmax_grad: int = 1
    sgd: int = 2

    def ops(self, op: LayerOp) -> int:
        k, ph = op.kind, op.phase
        if k == "bn":
            per = self.bn_forward if ph == "forward" else self.bn_grad
        elif k == "softmax":
            per = self.softmax_forward if ph == "forward" else self.softmax_grad
        elif k in ("relu", "add", "pool", "sgd"):
            per = getattr(self, k)
        else:
            per = 0
        return per * op.elements


@dataclass(frozen=True)
class AcceleratorConfig:
    name: str
    storage_format: FloatFormat
    multiplier: MultiplierSpec
    sa_rows: int = 16
    sa_cols: int = 16
    simd_lanes: int = 16
    buffer_bytes: tuple = tuple((b, 64 * KIB) for b in BUFFERS)
    sram_bus_bits: int | None = None
    dram_bytes: int = 2 * GIB
    simd: SimdCosts = SimdCosts()

    def __post_init__(self):
        if self.multiplier.mantissa_bits != self.storage_format.mantissa_bits:
            raise ValueError("multiplier width must match the storage format mantissa")
        expected = 64 if self.storage_format.width in (16, 32) else 60
        if self.sram_bus_bits is None:
            object.__setattr__(self, "sram_bus_bits", expected)
        elif self.storage_format.width in (16, 32, 12, 10) and self.sram_bus_bits != expected:
            raise ValueError(f"{self.storage_format.name} pairs with a {expected}-bit SRAM bus")
        if min(self.sa_rows, self.sa_cols, self.simd_lanes) < 1:
            raise ValueError("array dimensions must be positive")

    @property
    def word_bits(self) -> int:
        return self.storage_format.width

    @property
    def mac_key(self) -> str:
        return mac_key(self.storage_format, self.multiplier)

    def to_dict(self) -> dict:
        return {"name": self.name, "storage_format": self.storage_format.name,
                "multiplier": self.multiplier.to_dict(), "sa": [self.sa_rows, self.sa_cols],
                "simd_lanes": self.simd_lanes, "sram_bus_bits": self.sram_bus_bits,
                "buffer_bytes": dict(self.buffer_bytes), "dram_bytes": self.dram_bytes}


def _c(name, fmt, mult):
    return AcceleratorConfig(name, fmt, mult)


ACCELERATORS = {
    "C1": _c("C1", FP32, MultiplierSpec.exact(23)),
    "C2": _c("C2", BFLOAT16, MultiplierSpec.exact(7)),
    "C3": _c("C3", BFLOAT16, MultiplierSpec.mbm(7)),
    "C4": _c("C4", BFLOAT12, MultiplierSpec.mbm(3)),
    "C5": _c("C5", BFLOAT10, MultiplierSpec.mbm(1)),
    # Mitchell variants of C3-C5; their MAC costs are not in the default table
    "MIT-7": _c("MIT-7", BFLOAT16, MultiplierSpec.mitchell(7)),
    "MIT-3": _c("MIT-3", BFLOAT12, MultiplierSpec.mitchell(3)),
    "MIT-1": _c("MIT-1", BFLOAT10, MultiplierSpec.mitchell(1)),
}


def accelerator(name: str) -> AcceleratorConfig:
    try:
        return ACCELERATORS[name]
    except KeyError:
        raise KeyError(f"unknown accelerator preset {name!r}") from None


# ---------------------------------------------------------------------------
# counting

@dataclass(frozen=True)
class TileResult:
    sa_passes: int
    utilized_macs: int
    padded_macs: int

    @property
    def charged_macs(self) -> int:
        return self.utilized_macs + self.padded_macs


def tile_conv(rows: int, cols: int, kernel: int = 1, vectors: int = 1, sa_dims=(16, 16)) -> TileResult:
    """Weight-stationary tiling of one GEMM phase.

    ``rows`` is the reduction channel count (mapped down the array), ``cols``
    the output channel count (mapped across), ``kernel`` the kernel side (one
    pass per tap) and ``vectors`` the number of streamed input vectors.
    """
    if min(rows, cols, kernel, vectors) < 1:
        raise ValueError("tile_conv needs positive dimensions")
    r, c = sa_dims
    passes = cdiv(rows, r) * cdiv(cols, c) * kernel * kernel
    utilized = rows * cols * kernel * kernel * vectors
    return TileResult(passes, utilized, passes * r * c * vectors - utilized)


@dataclass
class PhaseCounts:
    sa_macs: int = 0
    utilized_macs: int = 0
    padded_macs: int = 0
    simd_ops: int = 0
    sram_bits: dict = field(default_factory=lambda: dict.fromkeys(BUFFERS, 0))
    dram_bits: int = 0

    def add(self, other: "PhaseCounts", n: int = 1) -> None:
        self.sa_macs += n * other.sa_macs
        self.utilized_macs += n * other.utilized_macs
        self.padded_macs += n * other.padded_macs
        self.simd_ops += n * other.simd_ops
        for b in BUFFERS:
            self.sram_bits[b] += n * other.sram_bits[b]
        self.dram_bits += n * other.dram_bits


@dataclass
class AccessCounts:
    phases: dict
    mac_key: str
    sram_bus_bits: int

    def total(self) -> PhaseCounts:
        out = PhaseCounts()
        for p in self.phases.values():
            out.add(p)
        return out


def _gemm_counts(op: LayerOp, cfg: AcceleratorConfig) -> PhaseCounts:
    w = cfg.word_bits
    rows, cols = (op.out_ch, op.in_ch) if op.phase == "grad" else (op.in_ch, op.out_ch)
    n = op.vectors
    k2 = op.kernel ** 2
    t = tile_conv(rows, cols, op.kernel, n, (cfg.sa_rows, cfg.sa_cols))
    rt, ct = cdiv(rows, cfg.sa_rows), cdiv(cols, cfg.sa_cols)
    pc = PhaseCounts(sa_macs=t.charged_macs, utilized_macs=t.utilized_macs, padded_macs=t.padded_macs)
    pc.sram_bits["ibuf"] += t.sa_passes * n * cfg.sa_rows * w
    pc.sram_bits["wbuf"] += t.sa_passes * n * cfg.sa_rows * cfg.sa_cols * w
    pc.sram_bits["obuf"] += n * cfg.sa_cols * ct * (2 * rt * k2 - 1) * w
    # cross-phase DRAM state; one SRAM access per DRAM word
    if op.phase == "forward":
        moves = {"wbuf": op.params, "ibuf": op.saved}
    elif op.phase == "grad":
        moves = {"wbuf": op.params}
    else:
        moves = {"ibuf": op.batch * op.in_ch * op.in_hw[0] * op.in_hw[1], "obuf": op.params}
    for buf, words in moves.items():
        pc.dram_bits += words * w
        pc.sram_bits[buf] += words * w
    return pc


def _simd_counts(op: LayerOp, cfg: AcceleratorConfig) -> PhaseCounts:
    w = cfg.word_bits
    ops = cfg.simd.ops(op)
    pc = PhaseCounts(simd_ops=ops)
    pc.sram_bits["vmem"] += ops * w
    pc.sram_bits["inmem"] += ops * w
    words = 0
    if op.kind == "bn":
        words = op.saved + op.params
        if op.phase == "grad":
            words = op.elements + op.params
    if words:
        pc.dram_bits += words * w
        pc.sram_bits["vmem"] += words * w
    if op.kind == "sgd":
        # read and write the FP32 master copy, read the stored gradient
        pc.dram_bits += op.params * (2 * 32 + w)
    return pc


def op_counts(op: LayerOp, cfg: AcceleratorConfig) -> PhaseCounts:
    return _gemm_counts(op, cfg) if op.is_gemm else _simd_counts(op, cfg)


def footprint_bytes(trace: TrainStepTrace, cfg: AcceleratorConfig) -> int:
    """DRAM bytes needed for one step: master + stored weights and saved activations."""
    params = max((op.params for op, _ in trace.items() if op.kind == "sgd"), default=0)
    saved = {}
    for op, _ in trace.items():
        if op.phase == "forward" and op.saved:
            saved[op.batch] = saved.get(op.batch, 0) + op.saved
    per_step = max(saved.values(), default=0)
    return params * (4 + cfg.word_bits // 8) + per_step * cfg.word_bits // 8


def count_accesses(trace: TrainStepTrace, cfg: AcceleratorConfig) -> AccessCounts:
    need = footprint_bytes(trace, cfg)
    if need > cfg.dram_bytes:
        raise CapacityError(f"model needs {need} bytes of DRAM, {cfg.name} has {cfg.dram_bytes}")
    phases = {p: PhaseCounts() for p in ("forward", "grad", "update")}
    for op, n in trace.items():
        phases[op.phase].add(op_counts(op, cfg), n)
    return AccessCounts(phases, cfg.mac_key, cfg.sram_bus_bits)


# ---------------------------------------------------------------------------
# pricing

PJ = 1e-12


@dataclass
class EnergyLedger:
    """Joules per component plus the counts they were priced from."""

    e_sa: float = 0.0
    e_simd: float = 0.0
    e_sram: dict = field(default_factory=lambda: dict.fromkeys(BUFFERS, 0.0))
    e_dram: float = 0.0
    sa_ops: int = 0
    utilized_macs: int = 0
    padded_macs: int = 0
    simd_ops: int = 0
    sram_bits: dict = field(default_factory=lambda: dict.fromkeys(BUFFERS, 0))
    dram_bits: int = 0

    @property
    def e_sram_total(self) -> float:
        return sum(self.e_sram[b] for b in BUFFERS)

    @property
    def e_mem(self) -> float:
        return self.e_dram + self.e_sram_total

    @property
    def e_comp(self) -> float:
        return self.e_sa + self.e_simd

    @property
    def total(self) -> float:
        return self.e_mem + self.e_comp

    def shares(self) -> dict:
        t = self.total
        if t == 0:
            return {"sa": 0.0, "simd": 0.0, "sram": 0.0, "dram": 0.0}
        return {"sa": self.e_sa / t, "simd": self.e_simd / t, "sram": self.e_sram_total / t, "dram": self.e_dram / t}

    def __add__(self, other: "EnergyLedger") -> "EnergyLedger":
        return EnergyLedger(
            self.e_sa + other.e_sa, self.e_simd + other.e_simd,
            {b: self.e_sram[b] + other.e_sram[b] for b in BUFFERS}, self.e_dram + other.e_dram,
            self.sa_ops + other.sa_ops, self.utilized_macs + other.utilized_macs,
            self.padded_macs + other.padded_macs, self.simd_ops + other.simd_ops,
            {b: self.sram_bits[b] + other.sram_bits[b] for b in BUFFERS}, self.dram_bits + other.dram_bits)

    def row(self) -> dict:
        """Flat mapping used for CSV rows and JSON output."""
        out = {"e_sa": self.e_sa, "e_simd": self.e_simd}
        out.update({f"e_sram_{b}": self.e_sram[b] for b in BUFFERS})
        out.update({"e_dram": self.e_dram, "e_total": self.total, "sa_ops": self.sa_ops,
                    "padded_macs": self.padded_macs, "simd_ops": self.simd_ops})
        out.update({f"sram_bits_{b}": self.sram_bits[b] for b in BUFFERS})
        out["dram_bits"] = self.dram_bits
        return out

    def to_json(self) -> str:
        return json.dumps(self.row(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.row()))
        w.writeheader()
        w.writerow(self.row())
        return buf.getvalue()


def price(counts: AccessCounts, table: EnergyTable | None = None) -> EnergyLedger:
    table = table or EnergyTable()
    c = counts.total()
    if c.sa_macs == 0 and c.simd_ops == 0 and c.dram_bits == 0 and not any(c.sram_bits.values()):
        return EnergyLedger()
    sram_pj = table.sram_cost(counts.sram_bus_bits)
    mac_pj = table.mac_cost(counts.mac_key) if c.sa_macs else 0.0
    return EnergyLedger(
        e_sa=c.sa_macs * mac_pj * PJ,
        e_simd=c.simd_ops * table.alu_pj * PJ,
        e_sram={b: c.sram_bits[b] * sram_pj * PJ for b in BUFFERS},
        e_dram=c.dram_bits * table.dram_pj_per_bit * PJ,
        sa_ops=c.sa_macs, utilized_macs=c.utilized_macs, padded_macs=c.padded_macs,
        simd_ops=c.simd_ops, sram_bits=dict(c.sram_bits), dram_bits=c.dram_bits)


def trace_energy(trace: TrainStepTrace, cfg: AcceleratorConfig, table: EnergyTable | None = None) -> EnergyLedger:
    return price(count_accesses(trace, cfg), table)


def minibatch_energy(model, cfg: AcceleratorConfig, batch_size: int = 32,
                     table: EnergyTable | None = None) -> EnergyLedger:
    """Energy of one full training step (forward, backward, update) of ``model``."""
    return trace_energy(model.trace_step(batch_size), cfg, table)
