"""Event preprocessing, product-state embedding and QMI-based site ordering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateInputError, NumericError

log = logging.getLogger(__name__)

N_SITES = 19
N_FEATURES = 3 * N_SITES

# canonical particle layout: MET, 4 electrons, 4 muons, 10 jets
PARTICLE_NAMES = (
    ["met"]
    + [f"e{i}" for i in range(1, 5)]
    + [f"mu{i}" for i in range(1, 5)]
    + [f"j{i}" for i in range(1, 11)]
)
PT_REF = np.array([1200.0] * 5 + [800.0] * 4 + [2500.0] * 10)
MET_SITE = 0
ELECTRON_SITES = range(1, 5)
MUON_SITES = range(5, 9)
JET_SITES = range(9, 19)

ETA_MAX = 5.0
# float32 storage rounds pi upward by ~1e-7
_ANGLE_SLACK = 1e-6


def check_kinematics(particles: np.ndarray) -> None:
    """Raise :class:`DataError` if a ``(..., 19, 3)`` array violates ranges."""
    particles = np.asarray(particles, dtype=np.float64)
    if particles.shape[-2:] != (N_SITES, 3):
        raise DataError(f"expected (..., 19, 3) kinematics, got {particles.shape}")
    if not np.all(np.isfinite(particles)):
        raise DataError("non-finite kinematic value")
    pt, eta, phi = particles[..., 0], particles[..., 1], particles[..., 2]
    if np.any(pt < 0):
        raise DataError("negative pt")
    if np.any(np.abs(eta) > ETA_MAX + _ANGLE_SLACK):
        raise DataError("eta outside [-5, 5]")
    if np.any(np.abs(phi) > np.pi + _ANGLE_SLACK):
        raise DataError("phi outside [-pi, pi]")


@dataclass(frozen=True, eq=False)
class EventRecord:
    """19 ``(pt, eta, phi)`` triples in canonical particle order."""

    particles: np.ndarray

    def __post_init__(self):
        p = np.array(self.particles, dtype=np.float64).reshape(N_SITES, 3)
        check_kinematics(p)
        p.flags.writeable = False
        object.__setattr__(self, "particles", p)

    @classmethod
    def from_features(cls, features) -> EventRecord:
        return cls(np.asarray(features, dtype=np.float64).reshape(N_SITES, 3))

    def features(self) -> np.ndarray:
        return self.particles.reshape(-1).copy()


def preprocess_batch(particles: np.ndarray) -> np.ndarray:
    """Scale ``(N, 19, 3)`` kinematics into site vectors of the same shape."""
    p = np.asarray(particles, dtype=np.float64)
    x = np.empty_like(p)
    x[..., 0] = p[..., 0] / PT_REF
    eta = p[..., 1].copy()
    eta[..., MET_SITE] = 0.0
    x[..., 1] = (eta + ETA_MAX) / (2 * ETA_MAX)
    x[..., 2] = (p[..., 2] + np.pi) / (2 * np.pi)
    return x


def preprocess(event: EventRecord) -> np.ndarray:
    """Return the 19 site vectors of one event as a ``(19, 3)`` array."""
    return preprocess_batch(event.particles[None])[0]


def validate_ordering(ordering, n: int = N_SITES) -> tuple[int, ...]:
    order = tuple(int(i) for i in ordering)
    if sorted(order) != list(range(n)):
        raise DataError(f"ordering is not a permutation of 0..{n - 1}: {order}")
    return order


@dataclass(frozen=True, eq=False)
class EmbeddedMps:
    """Product-state MPS: ``sites[k]`` is canonical site ``ordering[k]`` divided by ``gamma``."""

    sites: np.ndarray
    gamma: float
    ordering: tuple[int, ...] = field(default_factory=lambda: tuple(range(N_SITES)))

    def norm_sq(self) -> float:
        return float(np.prod(np.sum(self.sites**2, axis=-1)))


def _gamma(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms <= 0):
        raise DegenerateInputError("site vector with zero norm")
    return np.exp(np.mean(np.log(norms), axis=-1))


def embed_sites(x: np.ndarray, ordering=None) -> tuple[np.ndarray, np.ndarray]:
    """Reorder and normalize preprocessed sites ``(N, n, 3)``.

    Returns the normalized sites and the per-event gamma.  Gamma is the
    geometric mean of the raw site norms and every site is divided by it,
    so the product-state norm is exactly one.
    """
    x = np.asarray(x, dtype=np.float64)
    if ordering is not None:
        x = x[..., list(validate_ordering(ordering, x.shape[-2])), :]
    gamma = _gamma(x)
    return x / gamma[..., None, None], gamma


def embed_batch(particles: np.ndarray, ordering=None) -> np.ndarray:
    """Raw ``(N, 19, 3)`` kinematics straight to normalized MPS sites."""
    return embed_sites(preprocess_batch(particles), ordering)[0]


def embed(event: EventRecord, ordering=None) -> EmbeddedMps:
    order = validate_ordering(range(N_SITES) if ordering is None else ordering)
    sites, gamma = embed_sites(preprocess(event)[None], order)
    return EmbeddedMps(sites[0], float(gamma[0]), order)


# -- quantum mutual information ------------------------------------------------

def von_neumann_entropy(rho: np.ndarray) -> float:
    """Entropy (natural log) of a PSD matrix after normalizing it to unit trace."""
    rho = 0.5 * (rho + rho.T)
    tr = np.trace(rho)
    if not tr > 0:
        return 0.0
    try:
        w = np.linalg.eigvalsh(rho / tr)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    w = w[w > 1e-12]
    return float(-np.sum(w * np.log(w)))


@dataclass(frozen=True, eq=False)
class QmiMatrix:
    values: np.ndarray
    single_entropy: np.ndarray


def compute_qmi_from_sites(x: np.ndarray) -> QmiMatrix:
    """QMI between all site pairs of preprocessed (not normalized) sites ``(N, n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 2:
        raise DataError("need at least 2 events of shape (n_sites, d)")
    n_ev, n, d = x.shape
    # per-event single-site projectors, flattened to (N, n*d*d)
    proj = np.einsum("kia,kib->kiab", x, x).reshape(n_ev, n * d * d)
    gram = (proj.T @ proj / n_ev).reshape(n, d, d, n, d, d)
    rho1 = proj.mean(axis=0).reshape(n, d, d)
    s1 = np.array([von_neumann_entropy(rho1[i]) for i in range(n)])
    qmi = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            # rho_ij[(a,c),(b,e)] = mean x_ia x_ib x_jc x_je
            rho2 = gram[i, :, :, j, :, :].transpose(0, 2, 1, 3).reshape(d * d, d * d)
            try:
                s2 = von_neumann_entropy(rho2)
            except NumericError as exc:
                raise NumericError(f"sites ({i}, {j}): {exc}") from exc
            qmi[i, j] = qmi[j, i] = s1[i] + s1[j] - s2
    return QmiMatrix(qmi, s1)


def compute_qmi(events) -> QmiMatrix:
    """QMI over a list of :class:`EventRecord` (or an ``(N, 19, 3)`` array) in canonical order."""
    if isinstance(events, np.ndarray):
        particles = events.reshape(-1, N_SITES, 3)
    else:
        particles = np.stack([e.particles for e in events])
    return compute_qmi_from_sites(preprocess_batch(particles))


@dataclass(frozen=True)
class SpectralOrdering:
    ordering: tuple[int, ...]
    fiedler: tuple[float, ...] = ()
    degenerate: bool = False


def spectral_order(qmi, tol: float = 1e-9) -> SpectralOrdering:
    """Seriate sites by the Fiedler vector of ``L = D - W``.

    The sorted sequence is then rotated cyclically so the site with the
    largest QMI row sum lands in the middle position.  A graph with no
    off-diagonal weight, or one so symmetric that every nontrivial
    eigenvalue coincides, yields the identity ordering.  When only the
    Fiedler eigenvalue is repeated, the eigenspace vector nearest the
    canonical index ramp is used.  Either way ``degenerate`` is set.
    """
    values = qmi.values if isinstance(qmi, QmiMatrix) else np.asarray(qmi, dtype=np.float64)
    n = values.shape[0]
    w = np.clip(0.5 * (values + values.T), 0.0, None)
    np.fill_diagonal(w, 0.0)
    identity = SpectralOrdering(tuple(range(n)), degenerate=True)
    if n < 3 or w.max() <= tol:
        if n >= 3:
            log.warning("QMI graph has no edges; using canonical ordering")
        return identity
    lap = np.diag(w.sum(axis=1)) - w
    evals, evecs = np.linalg.eigh(lap)
    scale = max(evals[-1], 1.0)
    tied = np.flatnonzero(np.abs(evals - evals[1]) <= tol * scale)
    tied = tied[tied >= 1]
    if len(tied) >= n - 1:
        log.warning("QMI graph is fully symmetric; using canonical ordering")
        return identity
    if len(tied) == 1:
        f = evecs[:, 1]
        # fix the eigenvector sign: largest-magnitude entry positive
        k = int(np.argmax(np.abs(f) - 1e-12 * np.arange(n)))
        if f[k] < 0:
            f = -f
    else:
        # no unique Fiedler vector: take the eigenspace member closest to the
        # canonical index ramp, which keeps the choice basis-independent
        ramp = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        basis = evecs[:, tied]
        f = basis @ (basis.T @ ramp)
        if np.max(np.abs(f)) <= 1e-12:
            f = evecs[:, 1]
    degenerate = len(tied) > 1
    # round away eigensolver noise so equal entries tie-break by index
    key = np.round(f / np.max(np.abs(f)), 9)
    order = np.lexsort((np.arange(n), key))
    row_sum = w.sum(axis=1)
    hub = int(np.flatnonzero(row_sum >= row_sum.max() - 1e-12 * max(row_sum.max(), 1))[0])
    shift = n // 2 - int(np.flatnonzero(order == hub)[0])
    order = np.roll(order, shift)
    return SpectralOrdering(tuple(int(i) for i in order), tuple(float(v) for v in f), degenerate)
