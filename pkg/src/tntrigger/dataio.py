"""Dataset files and the synthetic event generator.

Two on-disk formats:

* CSV: a header row naming the 57 kinematic columns in canonical order
  (``met_pt, met_eta, met_phi, e1_pt, ..., j10_phi``), optionally followed
  by a ``label`` column.
* rawbin: ``b"TN19"``, little-endian ``u32`` event count, then per event
  57 little-endian ``float32`` values and one ``u8`` label code
  (see :data:`LABEL_CODES`).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import (ELECTRON_SITES, JET_SITES, MET_SITE, MUON_SITES, N_FEATURES, N_SITES,
                        PARTICLE_NAMES, EventRecord, check_kinematics)
from .errors import DataError, FormatError, ParseError

BACKGROUND = "background"
LABEL_CODES = {BACKGROUND: 0, "A4l": 1, "LQbtau": 2, "hToTauNu": 3, "h0TauTau": 4}
UNLABELED = 255
_CODE_LABELS = {v: k for k, v in LABEL_CODES.items()}

COLUMNS = [f"{p}_{v}" for p in PARTICLE_NAMES for v in ("pt", "eta", "phi")]
RAW_MAGIC = b"TN19"
_RAW_RECORD = np.dtype([("x", "<f4", (N_FEATURES,)), ("label", "u1")])


@dataclass(eq=False)
class Dataset:
    """Events as a ``(N, 19, 3)`` float64 array plus optional string labels."""

    particles: np.ndarray
    labels: list | None = None

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=np.float64).reshape(-1, N_SITES, 3)
        if self.labels is not None:
            self.labels = [str(l) for l in self.labels]
            if len(self.labels) != len(self.particles):
                raise DataError(
                    f"{len(self.labels)} labels for {len(self.particles)} events")

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def events(self) -> list[EventRecord]:
        return [EventRecord(p) for p in self.particles]

    def label_array(self) -> np.ndarray:
        if self.labels is None:
            return np.full(len(self), BACKGROUND)
        return np.asarray(self.labels)

    def subset(self, mask_or_idx) -> Dataset:
        idx = np.arange(len(self))[mask_or_idx]
        labels = None if self.labels is None else [self.labels[i] for i in idx]
        return Dataset(self.particles[idx], labels)

    def background(self) -> Dataset:
        return self.subset(self.label_array() == BACKGROUND)


# -- CSV ---------------------------------------------------------------------------

def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS + (["label"] if ds.labels is not None else []))
        flat = ds.particles.reshape(len(ds), N_FEATURES)
        for i, row in enumerate(flat):
            cells = [f"{v:.9g}" for v in row]
            if ds.labels is not None:
                cells.append(ds.labels[i])
            w.writerow(cells)


def load_csv(path) -> Dataset:
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        has_label = len(header) == N_FEATURES + 1 and header[-1] == "label"
        if header[:N_FEATURES] != COLUMNS or len(header) != N_FEATURES + has_label:
            raise ParseError("header must list the 57 canonical columns (plus optional label)", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                values = np.array([float(c) for c in row[:N_FEATURES]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            try:
                check_kinematics(values.reshape(N_SITES, 3))
            except DataError as exc:
                raise ParseError(str(exc), lineno) from None
            rows.append(values)
            if has_label:
                labels.append(row[-1].strip())
    particles = np.array(rows).reshape(-1, N_SITES, 3)
    return Dataset(particles, labels if has_label else None)


# -- rawbin ------------------------------------------------------------------------

def save_rawbin(ds: Dataset, path) -> None:
    rec = np.zeros(len(ds), dtype=_RAW_RECORD)
    rec["x"] = ds.particles.reshape(len(ds), N_FEATURES).astype("<f4")
    if ds.labels is None:
        rec["label"] = UNLABELED
    else:
        try:
            rec["label"] = [LABEL_CODES[l] for l in ds.labels]
        except KeyError as exc:
            raise FormatError(
                f"label {exc} has no rawbin code; known labels {sorted(LABEL_CODES)}") from None
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<I", len(ds)))
        fh.write(rec.tobytes())


def load_rawbin(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {RAW_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != count * _RAW_RECORD.itemsize:
        raise FormatError(
            f"{path}: {len(body)} payload bytes for {count} events "
            f"({_RAW_RECORD.itemsize} bytes each)")
    rec = np.frombuffer(body, dtype=_RAW_RECORD)
    particles = rec["x"].astype(np.float64).reshape(count, N_SITES, 3)
    try:
        check_kinematics(particles)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from None
    codes = rec["label"]
    if count and np.all(codes == UNLABELED):
        labels = None
    else:
        try:
            labels = [_CODE_LABELS[int(c)] for c in codes]
        except KeyError as exc:
            raise FormatError(f"{path}: unknown label code {exc}") from None
    return Dataset(particles, labels)


def detect_format(path) -> str:
    return "csv" if str(path).lower().endswith(".csv") else "rawbin"


def load_dataset(path, fmt: str | None = None) -> Dataset:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    fmt = fmt or detect_format(path)
    if fmt == "csv":
        return load_csv(path)
    if fmt == "rawbin":
        return load_rawbin(path)
    raise FormatError(f"unknown dataset format {fmt!r}")


def save_dataset(ds: Dataset, path, fmt: str | None = None) -> None:
    fmt = fmt or detect_format(path)
    if fmt == "csv":
        save_csv(ds, path)
    elif fmt == "rawbin":
        save_rawbin(ds, path)
    else:
        raise FormatError(f"unknown dataset format {fmt!r}")


# -- synthetic events ----------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Desk-scale stand-in for the collider samples.

    Background is multijet-like with at least one lepton above
    ``lepton_threshold``.  ``signals`` maps a label to ``(kind, count)``;
    ``four_lepton`` events carry four leptons whose pt is shifted by
    ``shift_sigma`` widths of the background lepton spectrum, and
    ``high_met`` events carry large missing energy.
    """

    n_background: int = 10000
    signals: dict = field(default_factory=lambda: {"A4l": ("four_lepton", 1000)})
    lepton_threshold: float = 23.0      # GeV
    lepton_pt_scale: float = 20.0       # width of the background lepton spectrum
    shift_sigma: float = 3.0
    jet_pt_min: float = 30.0
    jet_pt_scale: float = 60.0
    met_scale: float = 30.0
    mean_jets: float = 6.0
    second_lepton_prob: float = 0.15

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "signals" in known:
            known["signals"] = {k: tuple(v) for k, v in known["signals"].items()}
        return cls(**known)


def _fill(event, sites, pts, rng, eta_width, eta_max):
    pts = np.sort(pts)[::-1][:len(sites)]
    for site, pt in zip(sites, pts):
        event[site] = (pt, np.clip(rng.normal(0, eta_width), -eta_max, eta_max),
                       rng.uniform(-np.pi, np.pi))


def _lepton_sites(rng, n_lep):
    """Split ``n_lep`` leptons between the electron and muon slots."""
    n_e = rng.binomial(n_lep, 0.5)
    n_e = min(n_e, 4)
    n_mu = min(n_lep - n_e, 4)
    return list(ELECTRON_SITES)[:n_e], list(MUON_SITES)[:n_mu]


def _event(rng, cfg: SyntheticConfig, kind: str) -> np.ndarray:
    ev = np.zeros((N_SITES, 3))
    n_jets = min(int(rng.poisson(cfg.mean_jets)) + 1, len(JET_SITES))
    if kind == "four_lepton":
        n_jets = min(int(rng.poisson(1.0)), len(JET_SITES))
    jets = cfg.jet_pt_min + rng.exponential(cfg.jet_pt_scale, n_jets)
    _fill(ev, list(JET_SITES)[:n_jets], jets, rng, 2.0, 4.5)

    if kind == "four_lepton":
        n_lep = 4
        base = cfg.lepton_threshold + cfg.shift_sigma * cfg.lepton_pt_scale
    else:
        n_lep = 1 + int(rng.random() < cfg.second_lepton_prob)
        base = cfg.lepton_threshold
    lep_pt = base + rng.exponential(cfg.lepton_pt_scale, n_lep)
    if kind != "four_lepton" and n_lep > 1:
        # subleading lepton is softer and need not pass the filter
        lep_pt[1:] = 5.0 + rng.exponential(cfg.lepton_pt_scale / 2, n_lep - 1)
    e_sites, mu_sites = _lepton_sites(rng, n_lep)
    order = rng.permutation(n_lep)
    _fill(ev, e_sites, lep_pt[order[:len(e_sites)]], rng, 1.2, 2.5)
    _fill(ev, mu_sites, lep_pt[order[len(e_sites):len(e_sites) + len(mu_sites)]], rng, 1.2, 2.5)

    met = 0.4 * lep_pt.max() + rng.exponential(cfg.met_scale)
    if kind == "high_met":
        met += 3 * cfg.met_scale + rng.exponential(cfg.met_scale)
    ev[MET_SITE] = (met, 0.0, rng.uniform(-np.pi, np.pi))
    return ev


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> Dataset:
    """Labeled synthetic dataset; identical for identical ``(cfg, seed)``.

    Values are rounded to float32 so they survive a rawbin round trip.
    """
    rng = np.random.default_rng(seed)
    events, labels = [], []
    for _ in range(cfg.n_background):
        events.append(_event(rng, cfg, "background"))
        labels.append(BACKGROUND)
    for name, (kind, count) in cfg.signals.items():
        if kind not in ("four_lepton", "high_met"):
            raise DataError(f"unknown synthetic signal kind {kind!r}")
        for _ in range(int(count)):
            events.append(_event(rng, cfg, kind))
            labels.append(name)
    particles = np.array(events, dtype=np.float32).astype(np.float64).reshape(-1, N_SITES, 3)
    # float32 rounding can push |phi| a hair past pi
    particles[..., 2] = np.clip(particles[..., 2], -np.float32(np.pi), np.float32(np.pi))
    return Dataset(particles, labels)
