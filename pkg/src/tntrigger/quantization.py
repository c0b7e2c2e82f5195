"""Bit-accurate signed fixed-point emulation of the inference path.

Values live as scaled integers: a number ``v`` in a format with ``F``
fractional bits is the integer ``v * 2**F``.  A product of two such values
carries ``2F`` fractional bits and is brought back to the destination
format by :func:`requantize`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contraction import ContractionPlan, ContractionStep, apply_step, bind_inputs, plan_model
from .errors import ConfigError
from .model import TnModel

TRN = "TRN"
RND = "RND"
WRAP = "WRAP"
SAT = "SAT"
_ROUNDING = {"TRN": TRN, "AP_TRN": TRN, "TRUNCATE": TRN, "RND": RND, "AP_RND": RND, "ROUND": RND}
_OVERFLOW = {"WRAP": WRAP, "AP_WRAP": WRAP, "SAT": SAT, "AP_SAT": SAT}


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    int_bits: int
    rounding: str = TRN
    overflow: str = WRAP

    def __post_init__(self):
        if not 1 <= self.int_bits <= self.total_bits <= 64:
            raise ConfigError(f"need 1 <= int_bits <= total_bits <= 64, got {self}")
        object.__setattr__(self, "rounding", _ROUNDING.get(str(self.rounding).upper(), None)
                           or _bad("rounding", self.rounding))
        object.__setattr__(self, "overflow", _OVERFLOW.get(str(self.overflow).upper(), None)
                           or _bad("overflow", self.overflow))

    @classmethod
    def parse(cls, text: str) -> FixedPointFormat:
        """``"16,6"`` or ``"16,8,TRN,SAT"``; ``ap_fixed<...>`` spelling also accepted."""
        body = text.strip()
        if body.startswith("ap_fixed<") and body.endswith(">"):
            body = body[len("ap_fixed<"):-1]
        parts = [p.strip() for p in body.split(",")]
        if len(parts) not in (2, 3, 4):
            raise ConfigError(f"cannot parse fixed-point format {text!r}")
        try:
            w, i = int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"cannot parse fixed-point format {text!r}") from None
        return cls(w, i, *(parts[2:]))

    def __str__(self) -> str:
        return f"{self.total_bits},{self.int_bits},{self.rounding},{self.overflow}"

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.int_bits

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def int_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def int_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_value(self) -> float:
        return self.int_min * self.resolution

    @property
    def max_value(self) -> float:
        return self.int_max * self.resolution

    @property
    def dtype(self):
        # products of two words plus a short accumulation must fit in int64
        return np.int64 if self.total_bits <= 28 else object


def _bad(what, value):
    raise ConfigError(f"unknown {what} mode {value!r}")


def overflow(v, fmt: FixedPointFormat):
    """Apply the overflow mode to integers on the ``fmt`` grid."""
    if fmt.overflow == SAT:
        if isinstance(v, np.ndarray):
            return np.clip(v, fmt.int_min, fmt.int_max)
        return min(max(v, fmt.int_min), fmt.int_max)
    span = 1 << fmt.total_bits
    return (v - fmt.int_min) % span + fmt.int_min


def rescale(v, src_frac: int, fmt: FixedPointFormat):
    """Round integers with ``src_frac`` fractional bits to ``fmt``'s resolution, no overflow."""
    shift = src_frac - fmt.frac_bits
    if shift > 0:
        if fmt.rounding == RND:
            v = v + (1 << (shift - 1))
        v = v >> shift           # arithmetic shift: floor toward -inf
    elif shift < 0:
        v = v << (-shift)
    return v


def requantize(v, src_frac: int, fmt: FixedPointFormat):
    """Move integers with ``src_frac`` fractional bits onto the ``fmt`` grid."""
    return overflow(rescale(v, src_frac, fmt), fmt)


def to_fixed(x, fmt: FixedPointFormat):
    """Real values to integers on the grid (rounding, then overflow)."""
    scaled = np.asarray(x, dtype=np.float64) * 2.0**fmt.frac_bits
    if fmt.rounding == RND:
        scaled = scaled + 0.5
    if fmt.dtype is object:
        ints = np.vectorize(lambda v: int(np.floor(v)), otypes=[object])(scaled)
    else:
        ints = np.floor(scaled).astype(np.int64)
    out = overflow(ints, fmt)
    return out if np.ndim(x) else int(out)


def from_fixed(v, fmt: FixedPointFormat):
    if isinstance(v, np.ndarray) and v.dtype == object:
        return np.array([float(i) for i in v.reshape(-1)]).reshape(v.shape) * fmt.resolution
    return np.asarray(v, dtype=np.float64) * fmt.resolution


def quantize(x, fmt: FixedPointFormat):
    """Nearest representable value per the format's rounding and overflow modes."""
    q = from_fixed(to_fixed(x, fmt), fmt)
    return float(q) if np.ndim(x) == 0 else q


DEFAULT_COMPUTE = FixedPointFormat(16, 6, TRN, WRAP)
DEFAULT_NORM = FixedPointFormat(16, 8, TRN, SAT)


@dataclass(frozen=True)
class QuantConfig:
    compute_format: FixedPointFormat = DEFAULT_COMPUTE
    norm_format: FixedPointFormat = DEFAULT_NORM
    requant: str = "per_step"

    def __post_init__(self):
        if self.requant not in ("per_step", "per_mac"):
            raise ConfigError(f"requant must be per_step or per_mac, got {self.requant!r}")

    @classmethod
    def for_compute(cls, fmt: FixedPointFormat, requant: str = "per_step") -> QuantConfig:
        """Norm accumulator two integer bits wider than ``fmt``, truncating and saturating."""
        norm = FixedPointFormat(fmt.total_bits, min(fmt.int_bits + 2, fmt.total_bits), TRN, SAT)
        return cls(fmt, norm, requant)


@dataclass
class FixedResult:
    """``overflows`` counts compute-format wraps; ``saturated`` counts norm clips."""

    norm_sq: np.ndarray
    ints: np.ndarray
    overflows: int = 0
    saturated: int = 0


def _per_mac(step: ContractionStep, a, b, ba, bb, src_frac, fmt, dtype, acc_frac):
    """Accumulate one product at a time, requantizing after every add."""
    sa, sb, so = step.split()
    summed = "".join(dict.fromkeys(c for c in sa + sb if c not in so))
    expanded = ContractionStep(step.kind, step.sites, step.macs, step.phase,
                               f"{sa},{sb}->{so}{summed}", step.a, step.b, step.out,
                               pad_a=step.pad_a, pad_b=step.pad_b)
    prods = apply_step(expanded, a, b, ba, bb)
    batched = ba or bb
    lead = prods.shape[:batched + len(so)]
    prods = prods.reshape(lead + (-1,))
    acc = np.zeros(lead, dtype=dtype)
    up = src_frac - acc_frac
    if up < 0:
        raise ConfigError(f"accumulator format {fmt} is finer than the product grid")
    for k in range(prods.shape[-1]):
        acc = requantize((acc << up) + prods[..., k], src_frac, fmt)
    out = acc
    out_b = batched
    if step.crop is not None:
        out = out[(slice(None),) * out_b + tuple(slice(0, n) for n in step.crop)]
    if step.reshape is not None:
        out = out.reshape(out.shape[:out_b] + step.reshape)
    return out


def execute_plan_fixed(plan: ContractionPlan, model: TnModel, sites,
                       qc: QuantConfig = QuantConfig()) -> FixedResult:
    """Run ``plan`` in fixed point over one event ``(n, p)`` or a batch ``(N, n, p)``.

    Inputs and weights are quantized to the compute format.  Each step's
    accumulation is exact and the result is requantized once per output
    element (``per_step``) or after every multiply-accumulate
    (``per_mac``).  The final norm accumulates into the norm format.
    """
    sites = np.asarray(getattr(sites, "sites", sites), dtype=np.float64)
    single = sites.ndim == 2
    if single:
        sites = sites[None]
    cf, nf = qc.compute_format, qc.norm_format
    dtype = object if object in (cf.dtype, nf.dtype) else np.int64
    regs = {k: np.asarray(to_fixed(v, cf)).astype(dtype)
            for k, v in bind_inputs(plan, model, sites).items()}
    batched = {k: k.startswith("x") for k in regs}
    overflows = saturated = 0
    for step in plan.steps:
        a, b = regs[step.a], regs[step.b]
        ba, bb = batched[step.a], batched[step.b]
        fmt = nf if step.kind == "NormSquare" else cf
        src = 2 * cf.frac_bits
        if qc.requant == "per_mac":
            out = _per_mac(step, a, b, ba, bb, src, fmt, dtype, fmt.frac_bits)
        else:
            unbounded = rescale(apply_step(step, a, b, ba, bb), src, fmt)
            out = overflow(unbounded, fmt)
            clipped = int(np.count_nonzero(out != unbounded))
            if step.kind == "NormSquare":
                saturated += clipped
            else:
                overflows += clipped
        regs[step.out] = out
        batched[step.out] = ba or bb
    ints = regs[plan.result]
    norms = from_fixed(np.asarray(ints), nf)
    ints = np.asarray(ints)
    if single:
        return FixedResult(norms[0], ints[0], overflows, saturated)
    return FixedResult(norms, ints, overflows, saturated)


def fixed_norms(model: TnModel, sites, qc: QuantConfig = QuantConfig(),
                plan: ContractionPlan | None = None, chunk: int = 8192) -> np.ndarray:
    plan = plan or plan_model(model)
    sites = np.asarray(sites, dtype=np.float64)
    out = [execute_plan_fixed(plan, model, sites[i:i + chunk], qc).norm_sq
           for i in range(0, len(sites), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


# -- quantization scan ----------------------------------------------------------------

DEFAULT_LADDER = ("float", "24,6", "22,6", "20,6", "18,6", "16,6", "14,6", "12,6")


@dataclass
class ScanRow:
    format: str
    median: float
    auc: float
    tpr: float
    d_auc_pct: float = 0.0
    d_tpr_pct: float = 0.0
    per_signal: dict = field(default_factory=dict)


def _pct(new: float, ref: float) -> float:
    return 0.0 if ref == 0 else 100.0 * (new - ref) / ref


def quantization_scan(model: TnModel, sites: np.ndarray, labels, formats=DEFAULT_LADDER,
                      target_fpr: float = 1e-5, background: str = "background",
                      requant: str = "per_step") -> list[ScanRow]:
    """Recalibrate, score and evaluate the model at each format.

    ``formats`` holds :class:`FixedPointFormat` objects or strings; the
    string ``"float"`` is the floating reference and is always evaluated.
    Metrics pool every non-background label against background; the
    per-signal breakdown is kept in ``ScanRow.per_signal``.
    """
    from .evaluation import metrics_from_norms

    labels = np.asarray(labels)
    if len(sites) == 0:
        raise ConfigError("quantization scan needs a non-empty dataset")
    if not np.any(labels == background) or np.all(labels == background):
        raise ConfigError("quantization scan needs background and signal events")
    from .contraction import execute_batch
    plan = plan_model(model)
    rows: list[ScanRow] = []

    def evaluate(name, norms):
        rep = metrics_from_norms(norms, labels, target_fpr=target_fpr, background=background)
        return ScanRow(name, rep.median, rep.pooled.auc, rep.pooled.tpr,
                       per_signal={k: {"auc": v.auc, "tpr": v.tpr} for k, v in rep.signals.items()})

    ref = evaluate("float", execute_batch(plan, model, sites))
    rows.append(ref)
    for f in formats:
        if isinstance(f, str) and f.strip().lower() == "float":
            continue
        fmt = f if isinstance(f, FixedPointFormat) else FixedPointFormat.parse(f)
        qc = QuantConfig.for_compute(fmt, requant)
        row = evaluate(str(fmt), fixed_norms(model, sites, qc, plan))
        row.d_auc_pct = _pct(row.auc, ref.auc)
        row.d_tpr_pct = _pct(row.tpr, ref.tpr)
        rows.append(row)
    return rows


SCAN_COLUMNS = ("format", "median", "auc", "tpr", "d_auc_pct", "d_tpr_pct")


def write_scan(rows: list[ScanRow], csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCAN_COLUMNS)
        for r in rows:
            w.writerow([r.format] + [repr(float(getattr(r, c))) for c in SCAN_COLUMNS[1:]])
    if json_path is not None:
        payload = [{c: getattr(r, c) for c in SCAN_COLUMNS} | {"per_signal": r.per_signal}
                   for r in rows]
        Path(json_path).write_text(json.dumps(payload, indent=2))
