"""Software emulation of reduced-precision floating-point arithmetic.

Values are stored in float64 throughout; "being in bf16" means the float64
value is exactly representable in the bfloat16 format. Rounding is
round-to-nearest, ties-to-even, with subnormals and signed-infinity overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericMode",
    "MixedPrecisionPolicy",
    "FULL",
    "BF16",
    "FP16",
    "mode_from_name",
    "quantize",
    "qadd",
    "qmul",
    "qfma",
    "conformance_table",
]


@dataclass(frozen=True)
class NumericMode:
    """A floating-point format given by its fraction and exponent widths."""

    kind: str
    fraction_bits: int
    exponent_bits: int

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def max_finite(self) -> float:
        # (2 - 2^-f) * 2^emax
        return (2.0 - 2.0 ** -self.fraction_bits) * 2.0 ** self.bias

    @property
    def min_normal_exp(self) -> int:
        return 1 - self.bias

    @property
    def is_full(self) -> bool:
        return self.kind == "full"


FULL = NumericMode("full", 52, 11)
BF16 = NumericMode("bf16", 7, 8)
FP16 = NumericMode("fp16", 10, 5)

_MODES = {"full": FULL, "bf16": BF16, "fp16": FP16}


def mode_from_name(name: str) -> NumericMode:
    try:
        return _MODES[name]
    except KeyError:
        raise ValueError(f"unknown numeric mode {name!r}; expected one of {sorted(_MODES)}") from None


@dataclass(frozen=True)
class MixedPrecisionPolicy:
    """How a training computation maps onto a low-precision format.

    compute_mode quantizes every primitive-op output of the forward pass;
    quantize_gradients extends that to the backward pass. With
    master_weights_full the optimizer state and the stored weights stay in
    full precision and only the compute copies are quantized.
    """

    compute_mode: NumericMode = FULL
    master_weights_full: bool = True
    quantize_gradients: bool = False

    @property
    def is_identity(self) -> bool:
        return self.compute_mode.is_full

    @staticmethod
    def from_dict(d: dict) -> "MixedPrecisionPolicy":
        allowed = {"compute_mode", "master_weights_full", "quantize_gradients"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown precision policy keys: {sorted(unknown)}")
        return MixedPrecisionPolicy(
            compute_mode=mode_from_name(d.get("compute_mode", "full")),
            master_weights_full=bool(d.get("master_weights_full", True)),
            quantize_gradients=bool(d.get("quantize_gradients", False)),
        )

    def to_dict(self) -> dict:
        return {
            "compute_mode": self.compute_mode.kind,
            "master_weights_full": self.master_weights_full,
            "quantize_gradients": self.quantize_gradients,
        }


def quantize(x, mode: NumericMode):
    """Round to the nearest value representable in `mode`.

    Works on scalars and arrays; the result is returned in float64 storage.
    Rounding is done directly from float64 (never through an intermediate
    format, which would double-round near tie midpoints). Magnitudes beyond
    the format's finite range become signed infinity; NaN passes through.
    """
    scalar = np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)
    arr = np.asarray(x, dtype=np.float64)
    if mode.is_full:
        return float(arr) if scalar else arr.copy()

    out = np.array(arr, dtype=np.float64, copy=True)
    finite = np.isfinite(arr)
    if np.any(finite):
        vals = arr[finite]
        # |v| = m * 2^(e-1) with m in [0.5, 1); the representable quantum at
        # that magnitude is 2^(e-1-fraction_bits), floored at the subnormal
        # quantum. Dividing by a power of two is exact, so np.rint performs
        # a single round-to-nearest-even in the target format.
        _, e = np.frexp(vals)
        exp = np.maximum(e - 1, mode.min_normal_exp)
        quantum = np.ldexp(1.0, exp - mode.fraction_bits)
        with np.errstate(invalid="ignore", over="ignore"):
            rounded = np.rint(vals / quantum) * quantum
        rounded = np.where(
            np.abs(rounded) > mode.max_finite, np.copysign(np.inf, vals), rounded
        )
        # keep signed zero
        rounded = np.where(rounded == 0.0, np.copysign(0.0, vals), rounded)
        out[finite] = rounded
    return float(out) if scalar else out


def _binary_op(a: float, b: float, mode: NumericMode, op) -> float:
    # operands are required to be representable already; the exact float64
    # result of +,* on such operands rounds identically to a direct
    # single rounding (53 bits >= 2*fraction_bits + 2 for both formats)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = op(float(a), float(b))
    return quantize(raw, mode)


def qadd(a: float, b: float, mode: NumericMode) -> float:
    """a + b computed in full precision, then rounded once into `mode`."""
    return _binary_op(a, b, mode, lambda x, y: x + y)


def qmul(a: float, b: float, mode: NumericMode) -> float:
    """a * b with a single final rounding into `mode`."""
    return _binary_op(a, b, mode, lambda x, y: x * y)


def qfma(a: float, b: float, c: float, mode: NumericMode) -> float:
    """a * b + c with a single final rounding into `mode`.

    The float64 intermediate holds a*b exactly for 16-bit operand formats,
    so only the final rounding is observable.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        raw = float(a) * float(b) + float(c)
    return quantize(raw, mode)


def bf16_pattern_values() -> np.ndarray:
    """Decode all 2^16 bfloat16 bit patterns to float64 via their float32 view."""
    patterns = np.arange(1 << 16, dtype=np.uint32)
    with np.errstate(invalid="ignore"):
        return (patterns << 16).view(np.float32).astype(np.float64)


def conformance_table() -> dict:
    """Run the reduced-precision conformance checks and report each case.

    Covers the absorbed-addend bf16 addition, the fp16 overflow-to-infinity
    boundary, the halfway tie, and an exhaustive bf16 round-trip over all
    bit patterns.
    """
    cases = []

    def case(name, got, expected):
        ok = (got == expected) or (np.isnan(got) and np.isnan(expected))
        cases.append({"name": name, "got": repr(got), "expected": repr(expected), "ok": bool(ok)})

    case("qadd(256, 1, bf16)", qadd(256.0, 1.0, BF16), 256.0)
    case("qadd(256, 1, full)", qadd(256.0, 1.0, FULL), 257.0)
    case("qadd(256, 4, bf16)", qadd(256.0, 4.0, BF16), 260.0)
    case("quantize(1 + 2^-8, bf16)", quantize(1.0 + 2.0**-8, BF16), 1.0)
    case("quantize(70000, fp16)", quantize(70000.0, FP16), float("inf"))
    case("quantize(-70000, fp16)", quantize(-70000.0, FP16), float("-inf"))
    case("quantize(65519, fp16)", quantize(65519.0, FP16), 65504.0)
    case("quantize(65520, fp16)", quantize(65520.0, FP16), float("inf"))

    values = bf16_pattern_values()
    finite = np.isfinite(values)
    round_tripped = quantize(values[finite], BF16)
    n_exact = int(np.sum(round_tripped == values[finite]))
    nonfinite = values[~finite]
    q_nonfinite = quantize(nonfinite, BF16)
    n_exact += int(np.sum((q_nonfinite == nonfinite) | (np.isnan(q_nonfinite) & np.isnan(nonfinite))))

    table = {
        "cases": cases,
        "bf16_patterns_total": int(values.size),
        "bf16_patterns_exact": n_exact,
        "all_ok": all(c["ok"] for c in cases) and n_exact == values.size,
    }
    return table
