"""Bit-level emulation of compressed float formats and approximate multipliers.

Every emulated format uses IEEE binary32 as its carrier: 1 sign bit, 8 exponent
bits and the top ``m`` mantissa bits, with the remaining low bits held at zero.
All functions here are vectorised over numpy arrays and are pure.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

import numpy as np

_SIGN = np.uint32(0x80000000)
_EXP = np.uint32(0x7F800000)
_MANT = np.uint32(0x007FFFFF)

# Fixed-point guard bits used inside the logarithmic multiplier datapath.
GUARD_BITS = 8
# The correction constant is a multiple of 2^-CORRECTION_FRAC_BITS.
CORRECTION_FRAC_BITS = 8


@dataclass(frozen=True)
class FloatFormat:
    """Sign/exponent/mantissa layout; only the mantissa width varies."""

    mantissa_bits: int
    exponent_bits: int = 8
    sign_bits: int = 1

    def __post_init__(self):
        if not 0 <= self.mantissa_bits <= 23:
            raise ValueError(f"mantissa_bits must be in [0, 23], got {self.mantissa_bits}")
        if self.exponent_bits != 8 or self.sign_bits != 1:
            raise ValueError("only 1 sign bit and 8 exponent bits are supported")

    @property
    def width(self) -> int:
        return self.sign_bits + self.exponent_bits + self.mantissa_bits

    @property
    def name(self) -> str:
        return "fp32" if self.mantissa_bits == 23 else f"bfloat{self.width}"

    @property
    def mask(self) -> np.uint32:
        return np.uint32((0xFFFFFFFF << (23 - self.mantissa_bits)) & 0xFFFFFFFF)

    @property
    def max_value(self) -> np.float32:
        bits = np.uint32(0x7F7FFFFF) & self.mask
        return np.array(bits, dtype=np.uint32).view(np.float32)[()]

    @classmethod
    def from_name(cls, name: str) -> "FloatFormat":
        key = name.lower().replace("_", "")
        if key in ("fp32", "float32"):
            return FP32
        if key.startswith("bfloat"):
            width = int(key[len("bfloat"):])
            return cls(width - 9)
        raise ValueError(f"unknown float format {name!r}")


FP32 = FloatFormat(23)
BFLOAT16 = FloatFormat(7)
BFLOAT12 = FloatFormat(3)
BFLOAT10 = FloatFormat(1)


class MulKind(str, enum.Enum):
    EXACT = "exact"
    MBM = "mbm"
    MITCHELL = "mitchell"


# Correction constants for MBM, one per retained mantissa width. Each was
# obtained by calibrate_correction() (grid step 2^-8, mean relative error over
# the exhaustive operand sweep) and is frozen here; a test recomputes them.
MBM_CORRECTION = {
    1: 0.00390625,
    3: 0.0625,
    7: 0.06640625,
}


@dataclass(frozen=True)
class MultiplierSpec:
    kind: MulKind
    mantissa_bits: int = 23
    correction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", MulKind(self.kind))
        if not 0 <= self.mantissa_bits <= 23:
            raise ValueError("mantissa_bits must be in [0, 23]")
        if self.kind is MulKind.MBM:
            if not 0.0 < self.correction < 1.0:
                raise ValueError("MBM needs a correction constant in (0, 1)")
            scaled = self.correction * (1 << CORRECTION_FRAC_BITS)
            if scaled != int(scaled):
                raise ValueError(f"MBM correction must be a multiple of 2^-{CORRECTION_FRAC_BITS}")
        elif self.correction != 0.0:
            raise ValueError(f"{self.kind.value} multiplier takes no correction constant")

    @classmethod
    def exact(cls, mantissa_bits: int = 23) -> "MultiplierSpec":
        return cls(MulKind.EXACT, mantissa_bits)

    @classmethod
    def mitchell(cls, mantissa_bits: int = 23) -> "MultiplierSpec":
        return cls(MulKind.MITCHELL, mantissa_bits)

    @classmethod
    def mbm(cls, mantissa_bits: int, correction: float | None = None) -> "MultiplierSpec":
        if correction is None:
            if mantissa_bits not in MBM_CORRECTION:
                raise ValueError(f"no calibrated MBM correction for m={mantissa_bits}")
            correction = MBM_CORRECTION[mantissa_bits]
        return cls(MulKind.MBM, mantissa_bits, correction)

    @property
    def format(self) -> FloatFormat:
        return FloatFormat(self.mantissa_bits)

    @property
    def label(self) -> str:
        if self.kind is MulKind.EXACT:
            return "exact"
        return f"{self.kind.value}-{self.mantissa_bits}"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "mantissa_bits": self.mantissa_bits,
                "correction": self.correction}


def _bits(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).view(np.uint32)


def _from_bits(u: np.ndarray) -> np.ndarray:
    return np.asarray(u, dtype=np.uint32).view(np.float32)


def _scalar_out(out: np.ndarray, *inputs):
    if all(np.ndim(i) == 0 for i in inputs):
        return out.reshape(()).astype(np.float32)[()]
    return out


def round_to_format(x, fmt: FloatFormat):
    """Truncate the mantissa of ``x`` to ``fmt`` and flush subnormals to zero.

    NaN stays NaN and infinities are preserved.
    """
    arr = np.asarray(x, dtype=np.float32)
    u = _bits(arr)
    exp = u & _EXP
    out = u & fmt.mask
    out = np.where(exp == 0, u & _SIGN, out)
    out = np.where(np.isnan(arr), np.uint32(0x7FC00000), out)
    return _scalar_out(_from_bits(out.astype(np.uint32)), x)


def _saturate_flush(p: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Clamp an IEEE float32 product into the normal range of ``fmt``."""
    mx = fmt.max_value
    p = np.where(np.isinf(p), np.copysign(mx, p), p)
    p = np.where(np.abs(p) < np.float32(2.0 ** -126), np.copysign(np.float32(0), p), p)
    return p.astype(np.float32)


def _log_multiply(ua: np.ndarray, ub: np.ndarray, spec: MultiplierSpec) -> np.ndarray:
    """Integer datapath of the logarithmic product on normal operand bit patterns."""
    m = spec.mantissa_bits
    shift = 23 - m
    s = m + GUARD_BITS
    one = np.int64(1) << s
    ea = ((ua & _EXP) >> 23).astype(np.int64)
    eb = ((ub & _EXP) >> 23).astype(np.int64)
    x1 = ((ua & _MANT) >> shift).astype(np.int64) << GUARD_BITS
    x2 = ((ub & _MANT) >> shift).astype(np.int64) << GUARD_BITS
    cq = np.int64(round(spec.correction * (1 << s)))
    lsum = x1 + x2
    # Below 1: 2^(k1+k2) (1 + x1 + x2 + c); otherwise 2^(k1+k2+1) (x1 + x2 + c/2).
    v = np.where(lsum < one, one + lsum + cq, 2 * lsum + cq)
    t = (v >= 2 * one).astype(np.int64) + (v >= 4 * one).astype(np.int64)
    frac = ((v >> t) - one) >> GUARD_BITS
    e = ea + eb - 127 + t
    sign = (ua ^ ub) & _SIGN
    mx = _bits(spec.format.max_value).astype(np.int64)
    out = (e.clip(1, 254) << 23) | (frac << shift)
    out = np.where(e >= 255, mx, out)
    out = np.where(e <= 0, 0, out)
    out = np.where((ea == 0) | (eb == 0), 0, out)
    return out.astype(np.uint32) | sign


def approx_multiply(a, b, spec: MultiplierSpec):
    """Product of ``a`` and ``b`` as computed by the multiplier ``spec``.

    Operands are (re)rounded to the multiplier's format first. Overflow
    saturates to the largest finite magnitude, underflow flushes to zero, and
    non-finite operands yield NaN.
    """
    fmt = spec.format
    a32 = np.asarray(round_to_format(a, fmt), dtype=np.float32)
    b32 = np.asarray(round_to_format(b, fmt), dtype=np.float32)
    a32, b32 = np.broadcast_arrays(a32, b32)
    bad = ~(np.isfinite(a32) & np.isfinite(b32))
    if spec.kind is MulKind.EXACT:
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            p = _saturate_flush(a32 * b32, fmt)
        out = np.asarray(round_to_format(p, fmt), dtype=np.float32)
    else:
        out = _from_bits(_log_multiply(_bits(a32), _bits(b32), spec))
    out = np.where(bad, np.float32(np.nan), out).astype(np.float32)
    return _scalar_out(out, a, b)


def exact_multiply_accumulate(acc, a, b, spec: MultiplierSpec):
    """``acc`` plus the approximate product, added in full binary32."""
    with np.errstate(over="ignore"):
        out = np.asarray(acc, dtype=np.float32) + np.asarray(approx_multiply(a, b, spec), dtype=np.float32)
    return _scalar_out(out.astype(np.float32), acc, a, b)


@dataclass(frozen=True)
class ErrorStats:
    mean_rel: float
    max_rel: float
    pairs: int
    bias: float = 0.0  # mean signed relative error

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def mantissa_grid(mantissa_bits: int) -> np.ndarray:
    """All values 1.f representable with ``mantissa_bits`` fraction bits."""
    n = 1 << mantissa_bits
    return (1.0 + np.arange(n, dtype=np.float64) / n).astype(np.float32)


def _datapath_product(a: np.ndarray, b: np.ndarray, spec: MultiplierSpec) -> np.ndarray:
    """Multiplier output on [1, 2) mantissas before it is truncated for storage."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if spec.kind is MulKind.EXACT:
        return a * b
    x = (a - 1.0) + (b - 1.0)
    c = spec.correction
    return np.where(x < 1.0, 1.0 + x + c, 2.0 * (x + c / 2.0))


def characterize_error(spec: MultiplierSpec, mantissa_bits: int | None = None,
                       stage: str = "datapath") -> ErrorStats:
    """Exhaustive mean/max relative error over all mantissa pairs.

    ``stage="datapath"`` compares the multiplier's own output against the true
    product, which isolates the approximation itself. ``stage="output"``
    compares the stored (format-truncated) result against the exact product
    truncated to the same format.
    """
    m = spec.mantissa_bits if mantissa_bits is None else mantissa_bits
    if m > 8:
        raise ValueError("exhaustive sweep limited to mantissa_bits <= 8")
    if m != spec.mantissa_bits:
        spec = MultiplierSpec(spec.kind, m, spec.correction)
    grid = mantissa_grid(m)
    a, b = np.meshgrid(grid, grid, indexing="ij")
    if stage == "datapath":
        approx = _datapath_product(a, b, spec)
        ref = a.astype(np.float64) * b
    elif stage == "output":
        approx = np.asarray(approx_multiply(a, b, spec), dtype=np.float64)
        ref = np.asarray(approx_multiply(a, b, MultiplierSpec.exact(m)), dtype=np.float64)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    signed = (approx - ref) / ref
    rel = np.abs(signed)
    return ErrorStats(float(rel.mean()), float(rel.max()), int(rel.size), float(signed.mean()))


def calibrate_correction(mantissa_bits: int, c_max: float = 0.25) -> tuple[float, ErrorStats]:
    """Grid-search the MBM correction minimising mean relative error."""
    step = 1 << CORRECTION_FRAC_BITS
    best = None
    for j in range(1, int(c_max * step) + 1):
        c = j / step
        stats = characterize_error(MultiplierSpec(MulKind.MBM, mantissa_bits, c))
        if best is None or stats.mean_rel < best[1].mean_rel:
            best = (c, stats)
    return best


# ---------------------------------------------------------------------------
# Matrix multiply through the MAC array

_LUT_MAX_BITS = 10
_CHUNK_ELEMS = 1 << 22
_lut_cache: dict[MultiplierSpec, np.ndarray] = {}


def _product_lut(spec: MultiplierSpec) -> np.ndarray:
    """Products of all mantissa pairs with zero exponent: values in [1, 4)."""
    lut = _lut_cache.get(spec)
    if lut is None:
        g = mantissa_grid(spec.mantissa_bits)
        a, b = np.meshgrid(g, g, indexing="ij")
        lut = np.asarray(approx_multiply(a, b, spec), dtype=np.float32).ravel()
        _lut_cache[spec] = lut
    return lut


def _split(x: np.ndarray, m: int):
    """Return (scale, fraction index, biased exponent) of format-rounded values."""
    u = _bits(x)
    e = ((u & _EXP) >> 23).astype(np.int32)
    f = ((u & _MANT) >> (23 - m)).astype(np.int32)
    scale_bits = (u & (_SIGN | _EXP))
    scale = _from_bits(scale_bits).copy()
    scale[e == 0] = 0.0
    return scale, f, e


def mac_matmul(a: np.ndarray, b: np.ndarray, spec: MultiplierSpec) -> np.ndarray:
    """``a @ b`` where each product goes through ``spec`` and sums are binary32.

    Operands are rounded to the multiplier format. Products along the
    reduction axis are accumulated in order, as the array's column chain
    does. Exact FP32 uses the BLAS kernel, whose summation order differs from
    the sequential chain by at most the usual float32 rounding.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible GEMM shapes {a.shape} and {b.shape}")
    fmt = spec.format
    a = np.asarray(round_to_format(a, fmt))
    b = np.asarray(round_to_format(b, fmt))
    if spec.kind is MulKind.EXACT and spec.mantissa_bits == 23:
        return np.matmul(a, b)
    mdim, kdim = a.shape
    ndim = b.shape[1]
    out = np.empty((mdim, ndim), dtype=np.float32)
    if kdim == 0:
        out[:] = 0
        return out
    rows = max(1, _CHUNK_ELEMS // max(1, kdim * ndim))
    if spec.mantissa_bits <= _LUT_MAX_BITS:
        m = spec.mantissa_bits
        lut = _product_lut(spec)
        sa, fa, ea = _split(a, m)
        sb, fb, eb = _split(b, m)
        nz_a = ea[ea > 0]
        nz_b = eb[eb > 0]
        safe = True
        if nz_a.size and nz_b.size:
            lo = int(nz_a.min()) + int(nz_b.min()) - 127
            hi = int(nz_a.max()) + int(nz_b.max()) - 127 + 2
            safe = lo >= 1 and hi <= 254
        fa_row = fa * (1 << m)
        for i0 in range(0, mdim, rows):
            i1 = min(mdim, i0 + rows)
            idx = np.add(fa_row[i0:i1, :, None], fb[None, :, :])
            if safe:
                prod = np.take(lut, idx)
                prod *= sa[i0:i1, :, None]
                prod *= sb[None, :, :]
            else:
                prod64 = (sa[i0:i1, :, None].astype(np.float64) * sb[None, :, :]) * lut[idx]
                mx = float(fmt.max_value)
                prod64 = np.where(np.abs(prod64) > mx, np.copysign(mx, prod64), prod64)
                prod64 = np.where(np.abs(prod64) < 2.0 ** -126, 0.0, prod64)
                prod = prod64.astype(np.float32)
            np.sum(prod, axis=1, out=out[i0:i1])
        return out
    rows = max(1, rows // 8)
    for i0 in range(0, mdim, rows):
        i1 = min(mdim, i0 + rows)
        prod = np.asarray(approx_multiply(a[i0:i1, :, None], b[None, :, :], spec), dtype=np.float32)
        np.sum(prod, axis=1, out=out[i0:i1])
    return out
