"""SMPO and cascaded-SMPO architectures.

Every site tensor is stored with axes ``(phys_in, phys_out, left, right)``.
The chain ends have bond 1 on their outer side and non-output sites have
a physical output extent of 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import N_SITES, validate_ordering
from .errors import ConfigError, DimensionError, FormatError

ARCHITECTURES = {
    # tag: (layer-1 outputs, layer-2 outputs); layer-2 is absent for 19->1
    "19-1": ((9,), None),
    "19-7-1": ((0, 3, 6, 9, 12, 15, 18), (3,)),
    "19-2-1": ((0, 18), (0,)),
}
_TAG_ALIASES = {"19→1": "19-1", "19→7→1": "19-7-1", "19→2→1": "19-2-1",
                "smpo": "19-1", "csmpo": "19-7-1"}


def canonical_tag(tag: str) -> str:
    tag = _TAG_ALIASES.get(tag, tag)
    if tag not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {tag!r}; choose from {sorted(ARCHITECTURES)}")
    return tag


def site_shape(s: int, n_sites: int, output_sites, bond: int, phys_in: int,
               phys_out: int) -> tuple[int, int, int, int]:
    left = 1 if s == 0 else bond
    right = 1 if s == n_sites - 1 else bond
    return (phys_in, phys_out if s in output_sites else 1, left, right)


@dataclass(frozen=True, eq=False)
class SmpoLayer:
    n_sites: int
    sites: tuple[np.ndarray, ...]
    output_sites: tuple[int, ...]
    bond: int
    phys_in: int
    phys_out: int

    def __post_init__(self):
        outs = tuple(sorted(set(int(s) for s in self.output_sites)))
        object.__setattr__(self, "output_sites", outs)
        sites = tuple(np.array(t, dtype=np.float64) for t in self.sites)
        if len(sites) != self.n_sites:
            raise DimensionError(f"{len(sites)} site tensors for {self.n_sites} sites")
        for s, t in enumerate(sites):
            want = self.expected_shape(s)
            if t.shape != want:
                raise DimensionError(f"site {s} has shape {t.shape}, expected {want}")
            t.flags.writeable = False
        object.__setattr__(self, "sites", sites)

    def expected_shape(self, s: int) -> tuple[int, int, int, int]:
        return site_shape(s, self.n_sites, self.output_sites, self.bond,
                          self.phys_in, self.phys_out)

    def param_count(self) -> int:
        return sum(t.size for t in self.sites)

    def with_sites(self, sites: Sequence[np.ndarray]) -> SmpoLayer:
        return SmpoLayer(self.n_sites, tuple(sites), self.output_sites, self.bond,
                         self.phys_in, self.phys_out)


def _noisy_identity(shape, bond: int, rng: np.random.Generator) -> np.ndarray:
    p_in, p_out, left, right = shape
    t = rng.uniform(-0.1, 0.1, size=shape) / np.sqrt(bond)
    # several inputs folding onto one output index share a unit-norm row
    fan = [sum(1 for i in range(p_in) if min(i, p_out - 1) == o) for o in range(p_out)]
    for i in range(p_in):
        o = min(i, p_out - 1)
        for b in range(min(left, right)):
            t[i, o, b, b] += 1.0 / np.sqrt(fan[o])
    return t


def new_smpo(n_sites: int, output_sites, bond: int, phys_in: int = 3,
             phys_out: int = 3, seed: int = 0) -> SmpoLayer:
    """Allocate an SMPO layer initialized as a noisy identity.

    Each site couples equal left/right bond indices and maps physical index
    ``i -> min(i, phys_out - 1)``, plus uniform noise in
    ``[-0.1, 0.1] / sqrt(bond)``.  Inputs that fold onto the same output
    index get weight ``1/sqrt(fan-in)`` so no site amplifies the norm.
    """
    outs = tuple(sorted(set(int(s) for s in output_sites)))
    if not outs:
        raise ConfigError("an SMPO needs at least one output site")
    if n_sites < 1 or not all(0 <= s < n_sites for s in outs):
        raise ConfigError(f"output sites {outs} outside [0, {n_sites})")
    if bond < 1 or phys_in < 1 or phys_out < 1:
        raise ConfigError("bond and physical dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    sites = [_noisy_identity(site_shape(s, n_sites, outs, bond, phys_in, phys_out), bond, rng)
             for s in range(n_sites)]
    return SmpoLayer(n_sites, tuple(sites), outs, bond, phys_in, phys_out)


@dataclass(frozen=True, eq=False)
class TnModel:
    layers: tuple[SmpoLayer, ...]
    ordering: tuple[int, ...] | None = None
    label: str = "custom"
    seed: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) not in (1, 2):
            raise ConfigError("a model has one or two layers")
        if len(layers) == 2:
            l1, l2 = layers
            if l2.n_sites != len(l1.output_sites):
                raise DimensionError(
                    f"layer 2 has {l2.n_sites} sites but layer 1 has "
                    f"{len(l1.output_sites)} outputs")
            if l2.phys_in != l1.phys_out:
                raise DimensionError(
                    f"layer 2 phys_in {l2.phys_in} != layer 1 phys_out {l1.phys_out}")
        object.__setattr__(self, "layers", layers)
        n = layers[0].n_sites
        ordering = range(n) if self.ordering is None else self.ordering
        object.__setattr__(self, "ordering", validate_ordering(ordering, n))

    @property
    def n_sites(self) -> int:
        return self.layers[0].n_sites

    @property
    def is_cascade(self) -> bool:
        return len(self.layers) == 2

    def weights(self) -> list[np.ndarray]:
        return [t for layer in self.layers for t in layer.sites]

    def with_weights(self, weights: Sequence[np.ndarray]) -> TnModel:
        weights = list(weights)
        layers = []
        for layer in self.layers:
            layers.append(layer.with_sites(weights[:layer.n_sites]))
            weights = weights[layer.n_sites:]
        return TnModel(tuple(layers), self.ordering, self.label, self.seed)


def single_layer_model(layer: SmpoLayer, ordering=None, label: str = "custom") -> TnModel:
    ordering = tuple(range(layer.n_sites)) if ordering is None else ordering
    return TnModel((layer,), ordering, label)


def new_model(tag: str, bond: int = 4, bond2: int = 2, phys_mid: int = 3,
              phys_out: int = 3, seed: int = 0, ordering=None) -> TnModel:
    """Build one of the named architectures.

    For ``19-1`` only ``bond`` is used.  For the cascades ``bond`` is the
    layer-1 bond and ``bond2`` the layer-2 bond.
    """
    tag = canonical_tag(tag)
    ordering = tuple(range(N_SITES)) if ordering is None else ordering
    outs1, outs2 = ARCHITECTURES[tag]
    if outs2 is None:
        layer = new_smpo(N_SITES, outs1, bond, 3, phys_out, seed)
        return TnModel((layer,), ordering, tag, seed)
    l1 = new_smpo(N_SITES, outs1, bond, 3, phys_mid, seed)
    l2 = new_smpo(len(outs1), outs2, bond2, phys_mid, phys_out, seed + 1)
    return TnModel((l1, l2), ordering, tag, seed)


def new_csmpo(tag: str, bond1: int = 2, bond2: int = 2, phys_mid: int = 3,
              seed: int = 0, ordering=None) -> TnModel:
    tag = canonical_tag(tag)
    if ARCHITECTURES[tag][1] is None:
        raise ConfigError(f"{tag} is not a cascade")
    return new_model(tag, bond1, bond2, phys_mid, 3, seed, ordering)


def param_count(model: TnModel | SmpoLayer) -> int:
    if isinstance(model, SmpoLayer):
        return model.param_count()
    return sum(layer.param_count() for layer in model.layers)


def _embed_bond(t: np.ndarray, axis: int, size: int) -> np.ndarray:
    if t.shape[axis] == size:
        return t
    pad = [(0, 0)] * t.ndim
    pad[axis] = (0, size - t.shape[axis])
    return np.pad(t, pad)


def flatten_cascade(model: TnModel) -> SmpoLayer:
    """Fold a two-layer cascade into one SMPO with bond ``b1 * b2``.

    Output sites of layer 1 absorb the matching layer-2 tensor; the other
    sites carry the layer-2 bond through as an identity.  Composite bond
    index ``(i1, i2)`` maps to ``i1 * b2 + i2``.  Edge sites whose composite
    bond is smaller than ``b1 * b2`` are zero-padded, which leaves the
    contraction unchanged.
    """
    if not model.is_cascade:
        raise DimensionError("flatten_cascade needs a two-layer model")
    l1, l2 = model.layers
    outs = l1.output_sites
    out_rank = {s: k for k, s in enumerate(outs)}
    big = l1.bond * l2.bond
    final_out = outs[l2.output_sites[0]] if len(l2.output_sites) == 1 else None
    if final_out is None:
        raise DimensionError("flattening needs a single layer-2 output site")
    sites = []
    for s, t in enumerate(l1.sites):
        if s in out_rank:
            w = l2.sites[out_rank[s]]
            # T[i, q, l1, r1] W[q, o, l2, r2] -> F[i, o, (l1 l2), (r1 r2)]
            f = np.einsum("iqab,qocd->ioacbd", t, w)
        else:
            # layer-2 bond passes through; its size is that of the bond between
            # the surrounding outputs (1 outside the first/last output)
            k = sum(1 for o in outs if o < s)
            b2 = 1 if k == 0 or k == len(outs) else l2.sites[k - 1].shape[3]
            f = np.einsum("iqab,cd->iqacbd", t, np.eye(b2))
        i, o, a, c, b, d = f.shape
        f = f.reshape(i, o, a * c, b * d)
        want = site_shape(s, l1.n_sites, (final_out,), big, l1.phys_in, l2.phys_out)
        if f.shape[0] != want[0] or f.shape[1] != want[1]:
            raise DimensionError(f"site {s}: composite shape {f.shape} vs {want}")
        if f.shape[2] > want[2] or f.shape[3] > want[3]:
            raise DimensionError(f"site {s}: composite bonds exceed {big}")
        f = _embed_bond(_embed_bond(f, 2, want[2]), 3, want[3])
        sites.append(f)
    return SmpoLayer(l1.n_sites, tuple(sites), (final_out,), big, l1.phys_in, l2.phys_out)


# -- serialization -----------------------------------------------------------------

MODEL_MAGIC = b"TNMD"


def model_header(model: TnModel, extra: dict | None = None) -> dict:
    header = {
        "format": 1,
        "label": model.label,
        "seed": model.seed,
        "ordering": list(model.ordering),
        "layers": [
            {"n_sites": l.n_sites, "output_sites": list(l.output_sites), "bond": l.bond,
             "phys_in": l.phys_in, "phys_out": l.phys_out}
            for l in model.layers
        ],
    }
    if extra:
        header.update(extra)
    return header


def save_model(model: TnModel, path, extra: dict | None = None) -> None:
    """Write magic, u32 header length, JSON header, then float64 LE weights."""
    header = json.dumps(model_header(model, extra), sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in model.weights())
    Path(path).write_bytes(MODEL_MAGIC + struct.pack("<I", len(header)) + header + blob)


def load_model(path) -> tuple[TnModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + n])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    weights = np.frombuffer(raw[8 + n:], dtype="<f8")
    layers, offset = [], 0
    for lh in header["layers"]:
        sites = []
        for s in range(lh["n_sites"]):
            shape = site_shape(s, lh["n_sites"], set(lh["output_sites"]), lh["bond"],
                               lh["phys_in"], lh["phys_out"])
            size = prod(shape)
            if offset + size > weights.size:
                raise FormatError(f"{path}: weight blob truncated")
            sites.append(weights[offset:offset + size].reshape(shape).astype(np.float64))
            offset += size
        layers.append(SmpoLayer(lh["n_sites"], tuple(sites), tuple(lh["output_sites"]),
                                lh["bond"], lh["phys_in"], lh["phys_out"]))
    if offset != weights.size:
        raise FormatError(f"{path}: {weights.size - offset} trailing weights")
    model = TnModel(tuple(layers), tuple(header["ordering"]), header["label"], header["seed"])
    return model, header
