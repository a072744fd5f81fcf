"""
Plane-wave oracle for ``∗_G d`` and ``Δ⁰`` on the flat ``(2π)³`` torus.

For a constant metric ``G`` every wavevector ``k`` spans an invariant
block: ``∗_G d (a e^{ik·x}) = (i / sqrt(det G)) G (k × a) e^{ik·x}``. The
block is self-adjoint for the Gram matrix ``(2π)³ sqrt(det G) G⁻¹`` and has
eigenvalues ``0`` (gradients, ``a ∥ k``) and ``±sqrt(kᵀ G⁻¹ k)``.
Real eigenfields are ``Re(a e^{ik·x})`` and ``Im(a e^{ik·x})``.
"""
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from geometry.metric_core import (
    MetricField,
    OneFormField,
    Quadrature,
    SymTensorField,
    check_positive_definite,
)
from . import perturbation

logger = logging.getLogger(__name__)

BOX = 2 * np.pi


def _cross_matrix(k):
    k1, k2, k3 = k
    return np.array([[0.0, -k3, k2], [k3, 0.0, -k1], [-k2, k1, 0.0]])


def wavevectors(K):
    """All ``k`` in Z³ with ``0 < |k|∞ <= K``, lexicographic."""
    rng = range(-K, K + 1)
    return [k for k in itertools.product(rng, rng, rng) if any(k)]


def positive_wavevectors(K):
    """One representative of each ``±k`` pair (first nonzero entry positive)."""
    return [k for k in wavevectors(K) if next(x for x in k if x) > 0]


def box_volume(G):
    return BOX ** 3 * float(np.sqrt(np.linalg.det(G)))


def block_operator(G, k):
    return 1j / np.sqrt(np.linalg.det(G)) * (G @ _cross_matrix(k))


def block_gram(G):
    return box_volume(G) * np.linalg.inv(G)


def block_eigenpairs(G, k):
    """Nonzero eigenpairs ``(λ, a)`` of one block, ``a`` scaled so ``‖Re(a e^{ik·x})‖_G = 1``."""
    Ginv = np.linalg.inv(G)
    H = 1j / np.sqrt(np.linalg.det(G)) * _cross_matrix(k)
    values, vectors = linalg.eigh(H, Ginv)
    scale = np.sqrt(2.0 / box_volume(G))
    tol = 1e-10 * max(1.0, float(np.max(np.abs(values))))
    out = []
    for lam, a in zip(values, vectors.T):
        if abs(lam) <= tol:
            continue
        a = a * scale
        pivot = int(np.argmax(np.abs(a) > np.max(np.abs(a)) * (1 - 1e-12)))
        a = a * np.exp(-1j * np.angle(a[pivot]))
        out.append((float(lam), a))
    return out


def block_eigenvalue(G, k, sign):
    values = [lam for lam, _ in block_eigenpairs(G, k)]
    return max(values) if sign > 0 else min(values)


@dataclass(eq=False)
class OracleMode:
    """A real Beltrami eigenfield ``Re`` or ``Im`` of ``a e^{ik·x}``."""
    value: float
    k: tuple
    coefficients: np.ndarray
    part: str = 'real'

    def evaluate(self, points):
        phase = np.exp(1j * (np.asarray(points, dtype=float) @ np.asarray(self.k, dtype=float)))
        z = phase[:, None] * self.coefficients[None, :]
        return z.real if self.part == 'real' else z.imag

    def field(self, quadrature):
        return OneFormField(self.evaluate(quadrature.points), quadrature)

    def cochain(self, mesh):
        """Exact edge integrals on a periodic mesh of the same box."""
        start = mesh.vertices[mesh.edges[:, 0]]
        delta = mesh.harmonic_cochains().T
        kd = delta @ np.asarray(self.k, dtype=float)
        resonant = np.abs(kd) <= 1e-14
        safe = np.where(resonant, 1.0, kd)
        factor = np.where(resonant, 1.0, (np.exp(1j * kd) - 1.0) / (1j * safe))
        z = (delta @ self.coefficients) * np.exp(1j * (start @ np.asarray(self.k, dtype=float))) * factor
        return z.real if self.part == 'real' else z.imag


@dataclass
class OracleLevel:
    value: float
    multiplicity: int
    wavevectors: list = field(default_factory=list)
    modes: list = field(default_factory=list)

    def k_representatives(self):
        return ' '.join('({},{},{})'.format(*k) for k in self.wavevectors)


@dataclass(eq=False)
class FourierTruncation:
    G: np.ndarray
    K: int

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=float)
        check_positive_definite(self.G[None])
        self.wavevectors = wavevectors(self.K)

    def assembled(self):
        """Dense block-diagonal operator and Gram matrix over all wavevectors."""
        A = linalg.block_diag(*[block_operator(self.G, k) for k in self.wavevectors])
        gram = linalg.block_diag(*[block_gram(self.G) for _ in self.wavevectors])
        return A, gram

    def self_adjointness_error(self):
        A, gram = self.assembled()
        S = gram @ A
        return float(np.max(np.abs(S - S.conj().T)) / max(1.0, np.max(np.abs(S))))


def _group(entries, tol):
    """Cluster ``(value, k, payload)`` entries sorted by ``(|λ|, λ, k)``."""
    entries = sorted(entries, key=lambda e: (round(abs(e[0]), 12), e[0], e[1]))
    levels = []
    for value, k, payload in entries:
        if levels and abs(levels[-1].value - value) <= tol * max(1.0, abs(value)):
            level = levels[-1]
            level.multiplicity += 1
            level.wavevectors.append(k)
            if payload is not None:
                level.modes.append(payload)
        else:
            levels.append(OracleLevel(value, 1, [k], [] if payload is None else [payload]))
    return levels


def oracle_spectrum(G, K, tol=1e-9):
    """
    Nonzero eigenvalues of ``∗_G d`` on the plane waves ``0 < |k|∞ <= K``.

    Multiplicities count real dimensions (one per wavevector and sign);
    each level's ``modes`` hold an orthonormal real basis built from the
    lex-positive representatives.
    """
    truncation = FourierTruncation(G, K)
    entries = []
    positive = set(positive_wavevectors(K))
    for k in truncation.wavevectors:
        for lam, a in block_eigenpairs(truncation.G, k):
            entries.append((lam, k, (lam, a) if k in positive else None))
    levels = _group(entries, tol)
    for level in levels:
        reps = [k for k in level.wavevectors if k in positive]
        level.modes = [
            OracleMode(lam, k, a, part)
            for (lam, a), k in zip(level.modes, reps)
            for part in ('real', 'imag')
        ]
    logger.debug('oracle spectrum K=%d: %d levels', K, len(levels))
    return levels


def oracle_closed_spectrum(G, K, tol=1e-9):
    """Laplace-Beltrami eigenvalues ``kᵀ G⁻¹ k`` with real multiplicities."""
    Ginv = np.linalg.inv(np.asarray(G, dtype=float))
    entries = [(float(np.asarray(k) @ Ginv @ np.asarray(k)), k, None) for k in wavevectors(K)]
    levels = _group(entries, tol)
    return sorted(levels, key=lambda level: level.value)


def oracle_cluster(G, lam, K, quadrature, tol=1e-9):
    """Orthonormal real eigenfields of the level ``λ`` sampled on ``quadrature``."""
    for level in oracle_spectrum(G, K, tol):
        if abs(level.value - lam) <= tol * max(1.0, abs(lam)):
            return [mode.field(quadrature) for mode in level.modes]
    raise ValueError(f'No oracle eigenvalue {lam} within the truncation K={K}')


def uniform_quadrature(k_max):
    """Midpoint grid exact for products of four fields with ``|k|∞ <= k_max``."""
    return Quadrature.uniform_box(4 * max(1, int(k_max)) + 2)


def mode_for(G, k, sign):
    lam, a = next((lam, a) for lam, a in block_eigenpairs(G, k) if np.sign(lam) == np.sign(sign))
    return OracleMode(lam, tuple(k), a)


def closed_field(G, k, quadrature):
    """``f = sqrt(2/V) cos(k·x)`` and its differential."""
    scale = np.sqrt(2.0 / box_volume(G))
    theta = quadrature.points @ np.asarray(k, dtype=float)
    f = scale * np.cos(theta)
    df = -scale * np.sin(theta)[:, None] * np.asarray(k, dtype=float)[None, :]
    return f, OneFormField(df, quadrature)


def coclosed_rate(G, k, sign, H, quadrature=None):
    """Formula value of ``dλ`` for the block ``(k, sign)`` in the constant direction ``H``."""
    quadrature = quadrature or uniform_quadrature(max(abs(x) for x in k))
    g = MetricField.constant(G, quadrature)
    mode = mode_for(G, k, sign)
    return perturbation.beltrami_eigenvalue_derivative(
        g, mode.value, mode.field(quadrature), SymTensorField.constant(H, quadrature)
    )


def closed_rate(G, k, H, quadrature=None):
    quadrature = quadrature or uniform_quadrature(max(abs(x) for x in k))
    g = MetricField.constant(G, quadrature)
    rho = float(np.asarray(k) @ np.linalg.inv(G) @ np.asarray(k))
    f, df = closed_field(G, k, quadrature)
    return perturbation.closed_eigenvalue_derivative(g, rho, f, df, SymTensorField.constant(H, quadrature))


def oracle_derivative(G, K, k, sign, H, step=None):
    """
    First-order rate of the block eigenvalue ``(k, sign)`` along ``G + sH``.

    Returns the formula value, its central finite difference and their
    relative error. When the level is shared with other wavevectors the
    per-block rates of the whole level (the eigenvalues of the cluster
    derivative matrix, which is block diagonal for constant ``H``) are
    returned in ``cluster_rates``.
    """
    G = np.asarray(G, dtype=float)
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    k = tuple(k)
    lam = block_eigenvalue(G, k, sign)
    formula = coclosed_rate(G, k, sign, H)
    fd = perturbation.central_difference(lambda s: block_eigenvalue(G + s * H, k, sign), step)
    row = perturbation.fd_row(lam, 'oracle', formula, fd)
    level = next(
        lv for lv in oracle_spectrum(G, K)
        if abs(lv.value - lam) <= 1e-9 * max(1.0, abs(lam))
    )
    reps = sorted({mode.k for mode in level.modes})
    row.update({
        'k': list(k),
        'sign': int(np.sign(sign)),
        'multiplicity': level.multiplicity,
        'degenerate': level.multiplicity > 2,
        'cluster_rates': sorted(
            rate for q in reps for rate in [coclosed_rate(G, q, sign, H)] * 2
        ),
    })
    return row


def oracle_cochain(mesh, G, k, sign, part='real'):
    """Edge cochain of the real eigenfield of block ``(k, sign)``."""
    mode = mode_for(G, k, sign)
    mode.part = part
    return mode.cochain(mesh)
