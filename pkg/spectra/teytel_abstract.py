"""
Resolvents, contour projectors and defining functions for finite-dimensional
operator families ``q -> (A(q), ⟨·,·⟩_q)`` with ``A(q)`` self-adjoint for the
varying inner product ``⟨x, y⟩_q = yᵀ G(q) x``.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg, ndimage
from scipy.spatial.distance import pdist
from tqdm import tqdm

from geometry.conf import toolkit_setting
from geometry.exceptions import (
    ContourError,
    NeighbourhoodError,
    OrthonormalityError,
    SingularResolventError,
)

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class AbstractOperatorFamily:
    """
    Family evaluated through callbacks.

    ``A(q)``, ``G(q)`` return ``(dim, dim)`` arrays; ``dA(q, h)``,
    ``dG(q, h)`` their directional derivatives in parameter direction ``h``.
    """
    dim: int
    param_dim: int
    A: Callable
    G: Callable
    dA: Callable
    dG: Callable
    name: str = 'custom'

    def eigen(self, q):
        """Eigenvalues and ``G(q)``-orthonormal eigenvectors, ascending."""
        A, G = self.A(q), self.G(q)
        S = G @ A
        return linalg.eigh(0.5 * (S + S.T), G)

    def self_adjointness_error(self, q):
        A, G = self.A(q), self.G(q)
        return float(np.max(np.abs(G @ A - A.T @ G)))


def _matrix_family(dim, S_terms, G_terms, name):
    """``A = G⁻¹ S`` with ``S(q) = S0 + Σ q_i S_i`` and ``G(q) = G0 + Σ q_i G_i``."""
    S0, S_lin = S_terms[0], S_terms[1:]
    G0, G_lin = G_terms[0], G_terms[1:]

    def S(q):
        return S0 + sum(qi * Si for qi, Si in zip(q, S_lin))

    def G(q):
        return G0 + sum(qi * Gi for qi, Gi in zip(q, G_lin))

    def A(q):
        return np.linalg.solve(G(q), S(q))

    def dS(q, h):
        return sum(hi * Si for hi, Si in zip(h, S_lin))

    def dG(q, h):
        return sum(hi * Gi for hi, Gi in zip(h, G_lin))

    def dA(q, h):
        return np.linalg.solve(G(q), dS(q, h) - dG(q, h) @ A(q))

    return AbstractOperatorFamily(dim, len(S_lin), A, G, dA, dG, name)


SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]])


def _preset_diag():
    return _matrix_family(
        2,
        [np.diag([1.0, 3.0]), np.diag([1.0, 0.0]), np.diag([0.0, 1.0])],
        [np.eye(2), np.zeros((2, 2)), np.zeros((2, 2))],
        'diag',
    )


def _preset_conic(offset=1.0):
    return _matrix_family(
        2, [offset * np.eye(2), SIGMA_Z, SIGMA_X],
        [np.eye(2), np.zeros((2, 2)), np.zeros((2, 2))], 'conic',
    )


def _preset_conic_metric(offset=1.0, strength=0.3):
    return _matrix_family(
        2, [offset * np.eye(2), SIGMA_Z, SIGMA_X],
        [np.eye(2), strength * np.diag([1.0, 0.0]), strength * 0.5 * SIGMA_X],
        'conic-metric',
    )


def _preset_sah2_violating():
    I2 = np.zeros((3, 3))
    I2[:2, :2] = np.eye(2)
    Z = np.zeros((3, 3))
    Z[:2, :2] = SIGMA_Z
    return _matrix_family(
        3, [np.diag([1.0, 1.0, 4.0]), Z, I2],
        [np.eye(3), np.zeros((3, 3)), np.zeros((3, 3))], 'sah2-violating',
    )


def _preset_random_symmetric(seed=7, dim=4, strength=0.2):
    rng = np.random.default_rng(seed)

    def sym(scale=1.0):
        X = rng.standard_normal((dim, dim))
        X = 0.5 * (X + X.T)
        return scale * X / np.linalg.norm(X, 2)

    S0 = np.diag(np.arange(1.0, dim + 1.0))
    return _matrix_family(
        dim, [S0, sym(), sym()], [np.eye(dim), sym(strength), sym(strength)], 'random-symmetric',
    )


PRESETS = {
    'diag': _preset_diag,
    'conic': _preset_conic,
    'conic-metric': _preset_conic_metric,
    'sah2-violating': _preset_sah2_violating,
    'random-symmetric': _preset_random_symmetric,
}


def preset(name, **kwargs):
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f'Unknown operator family preset: {name}') from None


# Resolvent and projector

def resolvent(family, q, mu):
    """``(μ I - A(q))⁻¹``; ``μ`` may be complex."""
    A = family.A(q)
    values = family.eigen(q)[0]
    spread = max(1.0, float(np.ptp(values)) if len(values) > 1 else 1.0)
    distance = float(np.min(np.abs(values - mu)))
    if distance <= 1e-12 * spread:
        raise SingularResolventError(
            f'Resolvent is singular: μ={mu} is an eigenvalue of A(q)', distance=distance,
        )
    return np.linalg.inv(mu * np.eye(family.dim) - A)


def default_radius(values, center, cluster_tol=1e-8):
    """Half the distance from ``center`` to the nearest eigenvalue not at ``center``."""
    scale = max(1.0, float(np.max(np.abs(values))))
    outside = np.abs(values - center)
    outside = outside[outside > cluster_tol * scale]
    if not outside.size:
        return 1.0
    return 0.5 * float(outside.min())


@dataclass
class SpectralProjector:
    matrix: np.ndarray
    center: float
    radius: float
    nodes: int
    rank: int
    idempotency_error: float
    commutator_error: float

    def as_dict(self):
        return {
            'center': self.center, 'radius': self.radius, 'nodes': self.nodes,
            'rank': self.rank, 'trace': float(np.trace(self.matrix)),
            'idempotency_error': self.idempotency_error,
            'commutator_error': self.commutator_error,
        }


def _check_clearance(values, center, radius, clearance=None):
    clearance = toolkit_setting('CONTOUR_CLEARANCE') if clearance is None else clearance
    offsets = np.abs(np.abs(values - center) - radius)
    if np.any(offsets < clearance * radius):
        raise ContourError(
            f'An eigenvalue lies within {clearance} * radius of the contour',
            center=center, radius=radius, closest=float(offsets.min()),
        )


def _contour_sum(term, nodes, threads=1):
    """``(1/N) Σ_j term(θ_j)`` over equispaced angles, summed in index order."""
    thetas = 2 * np.pi * np.arange(nodes) / nodes
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            terms = list(pool.map(term, thetas))
    else:
        terms = [term(t) for t in thetas]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / nodes


def spectral_projector(family, q, center, radius=None, nodes=None, threads=1):
    """Trapezoid rule for ``(1/2πi) ∮ R(z) dz`` on ``|z - center| = radius``; real part."""
    nodes = toolkit_setting('CONTOUR_NODES') if nodes is None else nodes
    values = family.eigen(q)[0]
    radius = default_radius(values, center) if radius is None else radius
    _check_clearance(values, center, radius)
    A = family.A(q)
    identity = np.eye(family.dim)

    def term(theta):
        z = center + radius * np.exp(1j * theta)
        return radius * np.exp(1j * theta) * np.linalg.inv(z * identity - A)

    P = _contour_sum(term, nodes, threads).real
    return SpectralProjector(
        P, float(center), float(radius), int(nodes),
        int(round(float(np.trace(P)))),
        float(np.max(np.abs(P @ P - P))),
        float(np.max(np.abs(A @ P - P @ A))),
    )


def projector_derivative(family, q, center, radius, h, nodes=None, threads=1):
    """Directional derivative of ``P(q)`` via ``(1/2πi) ∮ R A' R dz``."""
    nodes = toolkit_setting('CONTOUR_NODES') if nodes is None else nodes
    A, dA = family.A(q), family.dA(q, h)
    identity = np.eye(family.dim)

    def term(theta):
        z = center + radius * np.exp(1j * theta)
        R = np.linalg.inv(z * identity - A)
        return radius * np.exp(1j * theta) * (R @ dA @ R)

    return _contour_sum(term, nodes, threads).real


def exact_projector(family, q, center, radius):
    values, vectors = family.eigen(q)
    inside = np.abs(values - center) < radius
    V = vectors[:, inside]
    return V @ V.T @ family.G(q)


def contour_convergence(family, q, center, radius=None, node_counts=(4, 8, 16, 32, 64)):
    """Max-norm error of the trapezoid projector against the eigendecomposition."""
    values = family.eigen(q)[0]
    radius = default_radius(values, center) if radius is None else radius
    exact = exact_projector(family, q, center, radius)
    return [
        (int(n), float(np.max(np.abs(spectral_projector(family, q, center, radius, n).matrix - exact))))
        for n in node_counts
    ]


# Defining function

def reference_basis(family, q0, center, radius):
    """``G(q0)``-orthonormal eigenvectors of the eigenvalues inside the contour."""
    values, vectors = family.eigen(q0)
    inside = np.abs(values - center) < radius
    return values[inside], vectors[:, inside]


@dataclass
class DefiningFunction:
    matrix: np.ndarray
    mu: float
    radius: float
    condition: float
    basis: np.ndarray

    def eigenvalues(self):
        return np.sort(np.linalg.eigvals(self.matrix).real)


def _window(family, q0, center, radius, mu):
    values = family.eigen(q0)[0]
    radius = default_radius(values, center) if radius is None else radius
    mu = center + 1.5 * radius if mu is None else mu
    return radius, mu


def defining_function(family, q0, q, center, radius=None, mu=None, nodes=None):
    """
    ``f(q) = S(q)⁻¹ R(q) S(q)`` on ``E(q0)`` with ``S(q) = P(q) P(q0)``,
    written in the reference eigenbasis of ``E(q0)``.
    """
    radius, mu = _window(family, q0, center, radius, mu)
    _, V0 = reference_basis(family, q0, center, radius)
    P = spectral_projector(family, q, center, radius, nodes).matrix
    Y = P @ V0
    # measured against V0 so a single collapsing column is caught
    smallest = float(np.linalg.svd(Y, compute_uv=False).min())
    condition = float(np.linalg.norm(V0, 2) / smallest) if smallest > 0 else np.inf
    if not np.isfinite(condition) or condition > toolkit_setting('CONDITION_LIMIT'):
        raise NeighbourhoodError(
            f'Transfer map is singular on the reference eigenspace (cond {condition:.3e})',
            condition=condition,
        )
    RY = resolvent(family, q, mu) @ Y
    F = np.linalg.lstsq(Y, RY, rcond=None)[0]
    return DefiningFunction(F, float(mu), float(radius), condition, V0)


@dataclass
class FPrimeReport:
    entries: np.ndarray
    commutator: np.ndarray
    symmetry_error: float

    @property
    def max_commutator(self):
        return float(np.max(np.abs(self.commutator)))

    def as_dict(self):
        return {
            'entries': self.entries.tolist(),
            'max_commutator': self.max_commutator,
            'symmetry_error': self.symmetry_error,
        }


def f_prime_entries(family, q0, h, basis, center, radius=None, mu=None, nodes=None, tol=1e-8):
    """
    ``f'_ij(h) = ⟨R'(q0)[h] v_i, v_j⟩_{q0}`` together with the commutator
    entries ``⟨[S'(q0)[h], R(q0)] v_i, v_j⟩_{q0}``.
    """
    radius, mu = _window(family, q0, center, radius, mu)
    G0 = family.G(q0)
    V = np.asarray(basis, dtype=float)
    deviation = float(np.max(np.abs(V.T @ G0 @ V - np.eye(V.shape[1]))))
    if deviation > tol:
        raise OrthonormalityError(
            f'Basis is not orthonormal for ⟨·,·⟩_q0 (deviation {deviation:.3e})', deviation=deviation,
        )
    R0 = resolvent(family, q0, mu)
    dR = R0 @ family.dA(q0, h) @ R0
    entries = (G0 @ V).T @ dR @ V
    entries = entries.T
    P0 = spectral_projector(family, q0, center, radius, nodes).matrix
    dS = projector_derivative(family, q0, center, radius, h, nodes) @ P0
    commutator = ((G0 @ V).T @ (dS @ R0 - R0 @ dS) @ V).T
    return FPrimeReport(entries, commutator, float(np.max(np.abs(entries - entries.T))))


# Two-parameter slice scan

@dataclass
class DegeneracyComponent:
    points: np.ndarray
    diameter: float
    min_gap: float

    def as_dict(self):
        return {
            'size': int(len(self.points)),
            'diameter': self.diameter,
            'min_gap': self.min_gap,
            'centroid': self.points.mean(axis=0).tolist(),
        }


@dataclass
class SliceScan:
    q1: np.ndarray
    q2: np.ndarray
    gaps: np.ndarray
    tolerance: float
    components: list

    @property
    def spacing(self):
        return float(min(np.diff(self.q1).min(), np.diff(self.q2).min()))

    def as_dict(self):
        return {
            'spacing': self.spacing,
            'tolerance': self.tolerance,
            'components': [c.as_dict() for c in self.components],
        }


def _min_gap(family, q):
    values = family.eigen(q)[0]
    return float(np.min(np.diff(values)))


def codim2_slice_scan(family, q1_range, q2_range, points, kappa=3.0, threads=1):
    """
    Grid scan of the smallest eigenvalue gap over a 2-parameter slice.

    Grid points with ``gap < kappa * spacing`` are grouped into 8-connected
    components; each component reports its diameter.
    """
    q1 = np.linspace(q1_range[0], q1_range[1], points)
    q2 = np.linspace(q2_range[0], q2_range[1], points)
    spacing = float(min(q1[1] - q1[0], q2[1] - q2[0]))
    tolerance = kappa * spacing

    def row(a):
        return [_min_gap(family, np.array([a, b])) for b in q2]

    progress = toolkit_setting('PROGRESS')
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            gaps = np.array(list(tqdm(pool.map(row, q1), total=len(q1), disable=not progress)))
    else:
        gaps = np.array([row(a) for a in tqdm(q1, disable=not progress)])

    labels, count = ndimage.label(gaps < tolerance, structure=np.ones((3, 3), dtype=int))
    components = []
    for label in range(1, count + 1):
        i, j = np.nonzero(labels == label)
        pts = np.stack([q1[i], q2[j]], axis=1)
        diameter = float(pdist(pts).max()) if len(pts) > 1 else 0.0
        components.append(DegeneracyComponent(pts, diameter, float(gaps[i, j].min())))
    logger.info('slice scan %s: %d components at spacing %.3g', family.name, count, spacing)
    return SliceScan(q1, q2, gaps, tolerance, components)
