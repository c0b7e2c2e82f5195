"""Hardware-style contraction schedules and their MAC accounting.

A plan is a flat list of pairwise contractions on named registers.  Inputs
are the embedded sites ``x{s}`` and the weights ``w{layer}.{site}``.  The
same plan drives the floating executor (with an optional tape for reverse
mode), the fixed-point executor in :mod:`tntrigger.quantization`, and the
scalar instrumented executor that counts every ``acc += a * b``.

Phases follow the cost tables: ``vertical``/``horizontal``/``norm`` for a
single SMPO, ``l1_vertical``/``l1_horizontal``/``l2_vertical``/
``l2_horizontal``/``norm`` for a cascade.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from math import prod
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, PlanIntegrityError
from .model import SmpoLayer, TnModel
from .tensor_core import DenseTensor, contract, norm_sq

STEP_KINDS = (
    "VerticalContract", "SweepLeft", "SweepRight", "GroupChain", "GroupAbsorb",
    "MergePass1", "MergePass2", "ThreeSiteMerge", "TwoSiteMerge", "NormSquare",
)
SMPO_PHASES = ("vertical", "horizontal", "norm")
CSMPO_PHASES = ("l1_vertical", "l1_horizontal", "l2_vertical", "l2_horizontal", "norm")


@dataclass(frozen=True)
class ContractionStep:
    """``out = einsum(subscripts, a, b)`` followed by an optional crop and reshape.

    ``pad_a``/``pad_b`` zero-extend an operand to a larger shape before the
    product; the padded extents are what the cost counts.
    """

    kind: str
    sites: tuple[int, ...]
    macs: int
    phase: str
    subscripts: str
    a: str
    b: str
    out: str
    group: int = 0
    pad_a: tuple[int, ...] | None = None
    pad_b: tuple[int, ...] | None = None
    crop: tuple[int, ...] | None = None
    reshape: tuple[int, ...] | None = None

    def split(self) -> tuple[str, str, str]:
        lhs, out = self.subscripts.split("->")
        sa, sb = lhs.split(",")
        return sa, sb, out


@dataclass(frozen=True)
class ContractionPlan:
    steps: tuple[ContractionStep, ...]
    total_macs: int
    arch: str
    phases: tuple[str, ...]
    input_shapes: dict = field(default_factory=dict)
    result: str = "norm"

    def __post_init__(self):
        if self.total_macs != sum(s.macs for s in self.steps):
            raise PlanIntegrityError("total_macs does not equal the sum of step costs")


@dataclass(frozen=True)
class MacReport:
    arch: str
    subtotals: OrderedDict
    total: int
    per_step: tuple[tuple[str, str, tuple[int, ...], int], ...] = ()

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "subtotals": dict(self.subtotals),
            "total": self.total,
            "steps": [
                {"phase": p, "kind": k, "sites": list(s), "macs": m}
                for p, k, s, m in self.per_step
            ],
        }

    def table(self) -> str:
        width = max(len(k) for k in self.subtotals) + 2
        lines = [f"MAC report for {self.arch}", "-" * (width + 8)]
        for name, macs in self.subtotals.items():
            lines.append(f"{name:<{width}}{macs:>8d}")
        lines.append("-" * (width + 8))
        lines.append(f"{'total':<{width}}{self.total:>8d}")
        return "\n".join(lines)


# -- plan construction ----------------------------------------------------------------

class _PlanBuilder:
    def __init__(self):
        self.steps: list[ContractionStep] = []
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.group = 0
        self._n = 0

    def declare(self, name: str, shape) -> None:
        self.shapes[name] = tuple(shape)

    def fresh(self, stem: str) -> str:
        self._n += 1
        return f"{stem}#{self._n}"

    def add(self, kind, sites, phase, subscripts, a, b, out, macs, pad_a=None,
            pad_b=None, crop=None, reshape=None) -> str:
        sa, sb, so = _split(subscripts)
        shape_a = pad_a or self.shapes[a]
        shape_b = pad_b or self.shapes[b]
        extents = _extents(sa, shape_a, sb, shape_b)
        loop_count = prod(extents.values())
        if loop_count != macs:
            raise PlanIntegrityError(
                f"{kind} on sites {sites}: declared {macs} MACs, loop nest has {loop_count}")
        shape = tuple(extents[c] for c in so)
        if crop is not None:
            shape = tuple(crop)
        if reshape is not None:
            if prod(reshape) != prod(shape):
                raise PlanIntegrityError(f"cannot reshape {shape} to {reshape}")
            shape = tuple(reshape)
        self.shapes[out] = shape
        self.steps.append(ContractionStep(
            kind, tuple(sites), int(macs), phase, subscripts, a, b, out, self.group,
            None if pad_a is None else tuple(pad_a), None if pad_b is None else tuple(pad_b),
            None if crop is None else tuple(crop), None if reshape is None else tuple(reshape)))
        return out

    def next_group(self):
        self.group += 1


def _split(subscripts: str):
    lhs, out = subscripts.split("->")
    sa, sb = lhs.split(",")
    return sa, sb, out


def _extents(sa, shape_a, sb, shape_b) -> dict[str, int]:
    if len(sa) != len(shape_a) or len(sb) != len(shape_b):
        raise PlanIntegrityError(f"subscripts {sa},{sb} do not fit shapes {shape_a}, {shape_b}")
    ext: dict[str, int] = {}
    for c, n in itertools.chain(zip(sa, shape_a), zip(sb, shape_b)):
        if ext.setdefault(c, n) != n:
            raise PlanIntegrityError(
                f"index {c!r} has extents {ext[c]} and {n} in {sa},{sb}")
    return ext


def _vertical(bld: _PlanBuilder, layer: SmpoLayer, tag: int, phase: str) -> list[str]:
    regs = []
    for s, t in enumerate(layer.sites):
        x, w = f"x{s}", f"w{tag}.{s}"
        bld.declare(x, (layer.phys_in,))
        bld.declare(w, t.shape)
        p_in, p_out, left, right = t.shape
        regs.append(bld.add("VerticalContract", (s,), phase, "i,iolr->olr", x, w,
                            f"v{tag}.{s}", p_in * p_out * left * right))
    bld.next_group()
    return regs


def _sweep_and_merge(bld: _PlanBuilder, regs: Sequence[str], out_site: int,
                     phase: str, norm_phase: str = "norm") -> str:
    """Bidirectional sweep toward ``out_site``, merge, then the squared norm.

    ``regs[s]`` has shape ``(p, left, right)``; ``p`` is 1 off the output site.
    """
    n = len(regs)
    sh = bld.shapes
    left_env = regs[0] if out_site > 0 else None
    right_env = regs[-1] if out_site < n - 1 else None
    left_todo = list(range(1, out_site))
    right_todo = list(range(n - 2, out_site, -1))
    while left_todo or right_todo:
        if left_todo:
            s = left_todo.pop(0)
            _, l, r = sh[regs[s]]
            subs = "abc,dce->e" if len(sh[left_env]) == 3 else "c,dce->e"
            left_env = bld.add("SweepLeft", (s,), phase, subs, left_env, regs[s],
                               bld.fresh("envL"), l * r)
        if right_todo:
            s = right_todo.pop(0)
            _, l, r = sh[regs[s]]
            subs = "dce,aeb->c" if len(sh[right_env]) == 3 else "dce,e->c"
            right_env = bld.add("SweepRight", (s,), phase, subs, regs[s], right_env,
                                bld.fresh("envR"), l * r)
        bld.next_group()

    anchor = regs[out_site]
    p, l, r = sh[anchor]
    if right_env is not None:
        subs = "plr,ard->pl" if len(sh[right_env]) == 3 else "plr,r->pl"
        rc = bld.add("MergePass1", (out_site,), phase, subs, anchor, right_env,
                     bld.fresh("rc"), p * l * r)
        bld.next_group()
        if left_env is not None:
            subs = "abl,pl->p" if len(sh[left_env]) == 3 else "l,pl->p"
            final = bld.add("MergePass2", (out_site,), phase, subs, left_env, rc,
                            bld.fresh("out"), p * l)
            bld.next_group()
        else:
            final = rc
    elif left_env is not None:
        subs = "abl,plr->p" if len(sh[left_env]) == 3 else "l,plr->p"
        final = bld.add("MergePass2", (out_site,), phase, subs, left_env, anchor,
                        bld.fresh("out"), p * l * r)
        bld.next_group()
    else:
        final = anchor

    idx = "abcdefgh"[:len(sh[final])]
    bld.add("NormSquare", (out_site,), norm_phase, f"{idx},{idx}->", final, final, "norm",
            prod(sh[final]))
    return "norm"


def _finish(bld: _PlanBuilder, arch: str, phases) -> ContractionPlan:
    inputs = {k: v for k, v in bld.shapes.items() if k.startswith(("x", "w"))}
    return ContractionPlan(tuple(bld.steps), sum(s.macs for s in bld.steps), arch,
                           tuple(phases), inputs)


def plan_smpo(layer: SmpoLayer | TnModel, arch: str | None = None) -> ContractionPlan:
    """Vertical contractions, bidirectional sweep, two-pass merge, norm."""
    if isinstance(layer, TnModel):
        if layer.is_cascade:
            raise ConfigError("plan_smpo needs a single-layer model")
        arch = arch or layer.label
        layer = layer.layers[0]
    if len(layer.output_sites) != 1:
        raise ConfigError(
            f"unsupported topology: single-layer plan needs one output site, "
            f"got {layer.output_sites}")
    bld = _PlanBuilder()
    regs = _vertical(bld, layer, 1, "vertical")
    _sweep_and_merge(bld, regs, layer.output_sites[0], "horizontal")
    return _finish(bld, arch or "custom", SMPO_PHASES)


def _absorb_groups(bld: _PlanBuilder, layer: SmpoLayer, regs: list[str], phase: str) -> list[str]:
    """Chain each run of non-output sites and absorb it into an output site.

    Runs sit between consecutive outputs and are absorbed rightward; a run
    after the last output is absorbed leftward.  The absorb runs over the
    output tensor with its far bond padded to the layer bond, which is how
    the per-group cost ``p' * b^3`` arises at the chain ends too.
    """
    sh = bld.shapes
    outs = list(layer.output_sites)
    current = {o: regs[o] for o in outs}

    def chain(run):
        d = regs[run[0]]
        for s in run[1:]:
            subs = "abc,dce->be" if len(sh[d]) == 3 else "bc,dce->be"
            _, l, r = sh[regs[s]]
            rows = sh[d][1] if len(sh[d]) == 3 else sh[d][0]
            d = bld.add("GroupChain", (s,), phase, subs, d, regs[s], bld.fresh("chain"),
                        rows * l * r)
        return d

    runs = []
    prev = -1
    for o in outs:
        if o - prev > 1:
            runs.append((list(range(prev + 1, o)), o, "right"))
        prev = o
    if prev < layer.n_sites - 1:
        runs.append((list(range(prev + 1, layer.n_sites)), prev, "left"))

    for run, o, direction in runs:
        d = chain(run)
        c = current[o]
        p, cl, cr = sh[c]
        if len(sh[d]) == 3:
            _, rows, cols = sh[d]
        else:
            rows, cols = sh[d]
        if direction == "right":
            subs = "abc,pcr->pbr" if len(sh[d]) == 3 else "bc,pcr->pbr"
            padded = (p, cl, max(cr, layer.bond))
            current[o] = bld.add("GroupAbsorb", tuple(run) + (o,), phase, subs, d, c,
                                 bld.fresh(f"m{o}"), p * rows * cols * padded[2],
                                 pad_b=padded, crop=(p, rows, cr))
        else:
            subs = "plb,abc->plc" if len(sh[d]) == 3 else "plb,bc->plc"
            padded = (p, max(cl, layer.bond), cr)
            current[o] = bld.add("GroupAbsorb", (o,) + tuple(run), phase, subs, c, d,
                                 bld.fresh(f"m{o}"), p * padded[1] * rows * cols,
                                 pad_a=padded, crop=(p, cl, cols))
    bld.next_group()
    return [current[o] for o in outs]


def plan_csmpo(model: TnModel) -> ContractionPlan:
    """Grouped layer-1 contraction, composite-bond layer-2 vertical, then sweep."""
    if not model.is_cascade:
        raise ConfigError("plan_csmpo needs a two-layer model")
    l1, l2 = model.layers
    if len(l2.output_sites) != 1:
        raise ConfigError(f"layer 2 needs exactly one output site, got {l2.output_sites}")
    bld = _PlanBuilder()
    v1 = _vertical(bld, l1, 1, "l1_vertical")
    mps = _absorb_groups(bld, l1, v1, "l1_horizontal")

    regs2 = []
    for k, (m, t) in enumerate(zip(mps, l2.sites)):
        w = f"w2.{k}"
        bld.declare(w, t.shape)
        q, lm, rm = bld.shapes[m]
        q2, po, ls, rs = t.shape
        if q != q2:
            raise DimensionError(f"layer-2 site {k}: phys_in {q2} vs layer-1 output {q}")
        regs2.append(bld.add("VerticalContract", (k,), "l2_vertical", "qab,qocd->oacbd", m, w,
                             f"v2.{k}", q * po * lm * ls * rm * rs,
                             reshape=(po, lm * ls, rm * rs)))
    bld.next_group()
    _sweep_and_merge(bld, regs2, l2.output_sites[0], "l2_horizontal")
    return _finish(bld, model.label, CSMPO_PHASES)


def plan_model(model: TnModel) -> ContractionPlan:
    return plan_csmpo(model) if model.is_cascade else plan_smpo(model)


def count_macs(plan: ContractionPlan) -> MacReport:
    subtotals = OrderedDict((p, 0) for p in plan.phases)
    for s in plan.steps:
        subtotals[s.phase] = subtotals.get(s.phase, 0) + s.macs
    per_step = tuple((s.phase, s.kind, s.sites, s.macs) for s in plan.steps)
    return MacReport(plan.arch, subtotals, sum(subtotals.values()), per_step)


# -- register binding --------------------------------------------------------------

def bind_inputs(plan: ContractionPlan, model: TnModel, sites: np.ndarray) -> dict:
    """Map plan input registers to arrays; ``sites`` is ``(n, p)`` or ``(N, n, p)``."""
    regs = {}
    for layer_idx, layer in enumerate(model.layers, start=1):
        for s, t in enumerate(layer.sites):
            regs[f"w{layer_idx}.{s}"] = t
    for s in range(model.n_sites):
        regs[f"x{s}"] = sites[..., s, :]
    for name, shape in plan.input_shapes.items():
        got = regs.get(name)
        if got is None:
            raise PlanIntegrityError(f"plan input {name} is not provided by the model")
        if tuple(got.shape[-len(shape):]) != shape:
            raise PlanIntegrityError(f"input {name} has shape {got.shape}, plan expects {shape}")
    return regs


def _pad(x: np.ndarray, shape, batched: bool) -> np.ndarray:
    if shape is None or tuple(x.shape[batched:]) == tuple(shape):
        return x
    widths = [(0, 0)] * batched + [(0, n - m) for m, n in zip(x.shape[batched:], shape)]
    return np.pad(x, widths)


def _crop(x: np.ndarray, shape, batched: bool) -> np.ndarray:
    if shape is None:
        return x
    return x[(slice(None),) * batched + tuple(slice(0, n) for n in shape)]


def _batch_subs(subs: str, batched: bool) -> str:
    return "Z" + subs if batched else subs


def apply_step(step: ContractionStep, a: np.ndarray, b: np.ndarray, ba: bool, bb: bool,
               einsum: Callable = np.einsum) -> np.ndarray:
    """Evaluate one step on arrays, ``ba``/``bb`` flag a leading batch axis."""
    sa, sb, so = step.split()
    a = _pad(a, step.pad_a, ba)
    b = _pad(b, step.pad_b, bb)
    out_b = ba or bb
    res = einsum(f"{_batch_subs(sa, ba)},{_batch_subs(sb, bb)}->{_batch_subs(so, out_b)}", a, b)
    res = _crop(res, step.crop, out_b)
    if step.reshape is not None:
        res = res.reshape(res.shape[:out_b] + step.reshape)
    return res


def _check(step, idx, a, b, ba, bb):
    shape_a = step.pad_a or a.shape[ba:]
    shape_b = step.pad_b or b.shape[bb:]
    sa, sb, _ = step.split()
    try:
        _extents(sa, tuple(shape_a), sb, tuple(shape_b))
    except PlanIntegrityError as exc:
        raise PlanIntegrityError(f"{step.kind} on sites {step.sites}: {exc}", idx) from None
    if step.pad_a is not None and any(m > n for m, n in zip(a.shape[ba:], step.pad_a)):
        raise PlanIntegrityError(f"{step.kind}: operand larger than its padding", idx)
    if step.pad_b is not None and any(m > n for m, n in zip(b.shape[bb:], step.pad_b)):
        raise PlanIntegrityError(f"{step.kind}: operand larger than its padding", idx)


# -- floating execution with an optional tape ---------------------------------------

@dataclass
class Tape:
    regs: dict
    batched: dict


def run_plan(plan: ContractionPlan, regs: dict, batched: dict,
             record: bool = False) -> tuple[np.ndarray, Tape | None]:
    regs = dict(regs)
    batched = dict(batched)
    for i, step in enumerate(plan.steps):
        try:
            a, b = regs[step.a], regs[step.b]
        except KeyError as exc:
            raise PlanIntegrityError(f"missing register {exc}", i) from None
        ba, bb = batched[step.a], batched[step.b]
        _check(step, i, a, b, ba, bb)
        regs[step.out] = apply_step(step, a, b, ba, bb)
        batched[step.out] = ba or bb
    out = regs[plan.result]
    return out, (Tape(regs, batched) if record else None)


def _einsum_adjoint(g, g_subs, other, other_subs, target_subs, target_shape):
    avail = set(g_subs) | set(other_subs)
    keep = "".join(c for c in target_subs if c in avail)
    res = np.einsum(f"{g_subs},{other_subs}->{keep}", g, other)
    if keep != target_subs:
        for pos, c in enumerate(target_subs):
            if c not in avail:
                res = np.expand_dims(res, pos)
        res = np.broadcast_to(res, target_shape)
    return res


def backprop(plan: ContractionPlan, tape: Tape, seed: np.ndarray) -> dict:
    """Reverse sweep: returns adjoints for every register reached from ``seed``.

    Each step's adjoint is two contractions, one per operand.
    """
    regs, batched = tape.regs, tape.batched
    grads = {plan.result: seed}
    for step in reversed(plan.steps):
        g = grads.pop(step.out, None)
        if g is None:
            continue
        ob = batched[step.out]
        sa, sb, so = step.split()
        a, b = regs[step.a], regs[step.b]
        ba, bb = batched[step.a], batched[step.b]
        pa, pb = _pad(a, step.pad_a, ba), _pad(b, step.pad_b, bb)
        # undo reshape and crop
        full = tuple(_extents(sa, pa.shape[ba:], sb, pb.shape[bb:])[c] for c in so)
        g = g.reshape(g.shape[:ob] + full) if step.reshape is not None else g
        if step.crop is not None:
            g = _pad(g, full, ob)
        gs, as_, bs = _batch_subs(so, ob), _batch_subs(sa, ba), _batch_subs(sb, bb)
        ga = _einsum_adjoint(g, gs, pb, bs, as_, pa.shape)
        gb = _einsum_adjoint(g, gs, pa, as_, bs, pb.shape)
        ga = _crop(ga, a.shape[ba:], ba) if step.pad_a is not None else ga
        gb = _crop(gb, b.shape[bb:], bb) if step.pad_b is not None else gb
        for name, gr in ((step.a, ga), (step.b, gb)):
            grads[name] = grads[name] + gr if name in grads else np.array(gr)
    return grads


def execute_batch(plan: ContractionPlan, model: TnModel, sites: np.ndarray) -> np.ndarray:
    """Squared norms for a batch of embedded events ``(N, n, p)``."""
    sites = np.asarray(sites, dtype=np.float64)
    regs = bind_inputs(plan, model, sites)
    batched = {k: k.startswith("x") for k in regs}
    out, _ = run_plan(plan, regs, batched)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite squared norm")
    return out


def execute_plan(plan: ContractionPlan, model: TnModel, mps) -> float:
    """Squared norm of the model output for one embedded event."""
    sites = getattr(mps, "sites", mps)
    return float(execute_batch(plan, model, np.asarray(sites)[None])[0])


# -- scalar instrumented execution ------------------------------------------------

class MacCounter:
    def __init__(self):
        self.count = 0
        self.by_step: list[int] = []


def _loop_step(step: ContractionStep, a: np.ndarray, b: np.ndarray, counter: MacCounter):
    sa, sb, so = step.split()
    a = _pad(a, step.pad_a, False)
    b = _pad(b, step.pad_b, False)
    ext = _extents(sa, a.shape, sb, b.shape)
    summed = [c for c in ext if c not in so]
    out = np.zeros(tuple(ext[c] for c in so))
    before = counter.count
    for oidx in itertools.product(*(range(ext[c]) for c in so)):
        env = dict(zip(so, oidx))
        acc = 0.0
        for sidx in itertools.product(*(range(ext[c]) for c in summed)):
            env.update(zip(summed, sidx))
            acc += a[tuple(env[c] for c in sa)] * b[tuple(env[c] for c in sb)]
            counter.count += 1
        out[oidx] = acc
    counter.by_step.append(counter.count - before)
    if step.crop is not None:
        out = _crop(out, step.crop, False)
    if step.reshape is not None:
        out = out.reshape(step.reshape)
    return out


def execute_instrumented(plan: ContractionPlan, model: TnModel, mps) -> tuple[float, MacCounter]:
    """Pure-Python loop executor that counts every multiply-accumulate."""
    sites = np.asarray(getattr(mps, "sites", mps), dtype=np.float64)
    regs = bind_inputs(plan, model, sites)
    counter = MacCounter()
    for i, step in enumerate(plan.steps):
        _check(step, i, regs[step.a], regs[step.b], False, False)
        regs[step.out] = _loop_step(step, regs[step.a], regs[step.b], counter)
    return float(regs[plan.result]), counter


# -- reference full contraction -----------------------------------------------------

def full_contraction_norm_sq(model: TnModel, mps) -> float:
    """Squared output norm by contracting the whole network with ``tensor_core``.

    Independent of any plan: sites are contracted left to right into one
    dense tensor.
    """
    sites = np.asarray(getattr(mps, "sites", mps), dtype=np.float64)
    xs = [DenseTensor.from_array(v) for v in sites]
    l1 = model.layers[0]
    y = _chain(l1, xs)
    if not model.is_cascade:
        return norm_sq(y)
    l2 = model.layers[1]
    w = _operator(l2)
    # y axes: one per layer-1 output (p'); w axes: (p'_0.., po_out)
    m = len(l1.output_sites)
    out = contract(y, list(range(m)), w, list(range(m)))
    return norm_sq(out)


def _chain(layer: SmpoLayer, xs: Sequence[DenseTensor]) -> DenseTensor:
    """Apply a layer to a product state; one axis per output site."""
    acc = None   # axes: outputs so far..., right bond
    for s, t in enumerate(layer.sites):
        v = contract(xs[s], [0], DenseTensor.from_array(t), [0])   # (po, l, r)
        if s not in layer.output_sites:
            v = v.reshape(v.shape[1:])                                 # (l, r)
        if acc is None:
            acc = v.reshape(v.shape[:-2] + v.shape[-1:])               # drop left bond of 1
            continue
        lax = v.ndim - 2
        acc = contract(acc, [acc.ndim - 1], v, [lax])
    return acc.reshape(acc.shape[:-1])                                 # drop right bond of 1


def _operator(layer: SmpoLayer) -> DenseTensor:
    """Dense operator of a single-output layer: axes ``(phys_in per site..., phys_out)``."""
    acc = None   # axes: phys_in per site so far..., [phys_out], right bond
    out_axis = None
    for s, t in enumerate(layer.sites):
        w = DenseTensor.from_array(t)
        p_in, p_out, l, r = w.shape
        if s not in layer.output_sites:
            w = w.reshape((p_in, l, r))
        if acc is None:
            acc = w.reshape(w.shape[:-2] + w.shape[-1:])
        else:
            lax = w.ndim - 2
            acc = contract(acc, [acc.ndim - 1], w, [lax])
        if s in layer.output_sites:
            out_axis = acc.ndim - 2      # phys_out sits just before the trailing bond
    acc = acc.reshape(acc.shape[:-1])
    # bring the phys_out axis to the end
    perm = [i for i in range(acc.ndim) if i != out_axis] + [out_axis]
    return acc.transpose(perm)
