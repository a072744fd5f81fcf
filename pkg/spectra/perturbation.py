"""
First-order eigenvalue variations under a metric perturbation ``h``.

All formulas are quadrature sums of pointwise algebra from
:mod:`geometry.metric_core`. Eigenfields are used exactly as given: the
caller is responsible for normalization (the S3 certificate deliberately
feeds pointwise unit fields).
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from geometry.conf import toolkit_setting
from geometry.exceptions import DegenerateClusterError, OrthonormalityError
from geometry.metric_core import (
    SymTensorField,
    inner_g,
    integrate,
    l2_inner,
    norm_sq,
    sym_product,
    tensor_on,
    trace_g,
)

logger = logging.getLogger(__name__)


def _variation_integral(g, u, v, h):
    """``∫ h(♯u, ♯v) - tr_g(h) g(u, v) / 2``."""
    return integrate(tensor_on(h, u, v, g) - 0.5 * trace_g(h, g) * inner_g(u, v, g), g)


def _refuse_degenerate(multiplicity, what):
    if multiplicity > 1:
        raise DegenerateClusterError(
            f'{what} has multiplicity {multiplicity}; use degenerate_directional_derivatives',
            multiplicity=multiplicity,
        )


def beltrami_eigenvalue_derivative(g, lam, u, h, multiplicity=1):
    """``λ ∫ (h(♯u, ♯u) - tr_g(h) |u|² / 2) dμ_g`` for a simple eigenpair."""
    _refuse_degenerate(multiplicity, f'Beltrami eigenvalue {lam:.6g}')
    return float(lam) * _variation_integral(g, u, u, h)


def coclosed_sq_derivative(g, lam_sq, u, h, multiplicity=1):
    """Variation of a coclosed Hodge eigenvalue ``λ²``."""
    _refuse_degenerate(multiplicity, f'Coclosed eigenvalue {lam_sq:.6g}')
    return 2.0 * float(lam_sq) * _variation_integral(g, u, u, h)


def closed_eigenvalue_derivative(g, rho, f, df, h, multiplicity=1, laplacian_of_trace=None):
    """
    Variation of a closed eigenvalue ``ρ`` with eigenfunction ``f``.

    Parameters
    ----------
    f : array of shape (N,)
        Eigenfunction samples, ``∫ f² dμ_g = 1``.
    df : OneFormField
        Its differential at the same samples.
    laplacian_of_trace : array of shape (N,), optional
        Samples of ``Δ⁰_g tr_g(h)``. When given, the literal form
        ``-∫ (Δ⁰ tr_g(h) f² / 4 + h(∇f, ∇f))`` is evaluated; otherwise the
        integrated-by-parts form
        ``-∫ h(∇f, ∇f) + ∫ tr_g(h) (|∇f|² - ρ f²) / 2``.
    """
    _refuse_degenerate(multiplicity, f'Closed eigenvalue {rho:.6g}')
    f = np.asarray(f, dtype=float)
    hess = tensor_on(h, df, df, g)
    if laplacian_of_trace is not None:
        return -integrate(0.25 * np.asarray(laplacian_of_trace) * f ** 2 + hess, g)
    tau = trace_g(h, g)
    return integrate(-hess + 0.5 * tau * (norm_sq(df, g) - float(rho) * f ** 2), g)


@dataclass
class APrimeMatrix:
    matrix: np.ndarray
    eigenvalue: float
    direction_id: str = ''
    asymmetry: float = 0.0

    def as_dict(self):
        return {
            'lambda': float(self.eigenvalue),
            'direction_id': self.direction_id,
            'matrix': self.matrix.tolist(),
            'asymmetry': float(self.asymmetry),
        }


def gram_matrix(basis, g):
    m = len(basis)
    G = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            G[i, j] = G[j, i] = l2_inner(basis[i], basis[j], g)
    return G


def check_orthonormal(basis, g, tol=None):
    tol = toolkit_setting('ORTHONORMAL_TOL') if tol is None else tol
    deviation = float(np.max(np.abs(gram_matrix(basis, g) - np.eye(len(basis)))))
    if deviation > tol:
        raise OrthonormalityError(
            f'Cluster basis is not orthonormal (Gram deviation {deviation:.3e})',
            deviation=deviation,
        )
    return deviation


def aprime_matrix(g, lam, basis, h, direction_id='', require_orthonormal=True):
    """Entries ``⟨A'_g[h] v_i, v_j⟩_g`` on a cluster basis."""
    if require_orthonormal:
        check_orthonormal(basis, g)
    m = len(basis)
    matrix = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            matrix[i, j] = float(lam) * _variation_integral(g, basis[i], basis[j], h)
    asymmetry = float(np.max(np.abs(matrix - matrix.T))) if m else 0.0
    scale = max(1.0, float(np.max(np.abs(matrix)))) if m else 1.0
    if asymmetry > 1e-10 * scale:
        logger.warning('A-prime matrix for %s is not symmetric: %.3e', direction_id, asymmetry)
    return APrimeMatrix(matrix, float(lam), direction_id, asymmetry)


def aprime_closed_form(g, lam, basis, k, l):
    """Entries for ``h = v_k ⊙ v_l`` from products of pointwise inner products."""
    m = len(basis)
    gk = [inner_g(basis[i], basis[k], g) for i in range(m)]
    gl = [inner_g(basis[i], basis[l], g) for i in range(m)]
    gkl = inner_g(basis[k], basis[l], g)
    matrix = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            integrand = gk[i] * gl[j] + gk[j] * gl[i] - inner_g(basis[i], basis[j], g) * gkl
            matrix[i, j] = 0.5 * float(lam) * integrate(integrand, g)
    return matrix


def degenerate_directional_derivatives(g, lam, basis, h, require_orthonormal=True):
    """First-order rates of the branches leaving a degenerate cluster, ascending."""
    aprime = aprime_matrix(g, lam, basis, h, require_orthonormal=require_orthonormal)
    return [float(x) for x in np.linalg.eigvalsh(0.5 * (aprime.matrix + aprime.matrix.T))]


# Splitting test on a double eigenvalue

def _vectorize(matrix):
    return np.array([matrix[0, 0], matrix[0, 1], matrix[1, 1]])


def tilted_direction(g, v1, a):
    """``v1 ⊙ v1 + a tr_g(v1 ⊙ v1) g``."""
    base = sym_product(v1, v1)
    tau = trace_g(base, g)
    return SymTensorField(base.values + a * tau[:, None, None] * g.values, g.quadrature)


@dataclass
class SpanReport:
    spanning: bool
    witness_a: float
    determinants: list
    parallel_defect: float

    def as_dict(self):
        return {
            'spanning': self.spanning,
            'witness_a': self.witness_a,
            'determinants': [{'a': a, 'det': d, 'relative': r} for a, d, r in self.determinants],
            'parallel_defect': self.parallel_defect,
        }


def sah2_span_test(g, lam, v1, v2, a_grid=None, det_tol=None):
    """
    Decide whether ``Id``, ``A'[v1 ⊙ v2]`` and ``A'[h̃_a]`` span the symmetric
    2x2 matrices, for each ``a`` in ``a_grid``.

    Rows are vectorized as ``(m11, m12, m22)`` in the order listed above;
    ``|det| > det_tol * prod(row norms)`` counts as spanning.
    """
    a_grid = toolkit_setting('A_GRID') if a_grid is None else a_grid
    det_tol = toolkit_setting('DET_TOL') if det_tol is None else det_tol
    basis = [v1, v2]
    cross = aprime_matrix(g, lam, basis, sym_product(v1, v2), 'v1*v2', require_orthonormal=False)
    rows_fixed = [np.array([1.0, 0.0, 1.0]), _vectorize(cross.matrix)]
    determinants = []
    witness = None
    for a in a_grid:
        tilted = aprime_matrix(g, lam, basis, tilted_direction(g, v1, a), f'tilted a={a}',
                               require_orthonormal=False)
        rows = np.vstack(rows_fixed + [_vectorize(tilted.matrix)])
        det = float(np.linalg.det(rows))
        norms = float(np.prod(np.linalg.norm(rows, axis=1)))
        relative = abs(det) / norms if norms > 0 else 0.0
        determinants.append((float(a), det, relative))
        if witness is None and relative > det_tol:
            witness = float(a)
    defect = integrate(inner_g(v1, v2, g) ** 2 - norm_sq(v1, g) * norm_sq(v2, g), g)
    report = SpanReport(witness is not None, witness, determinants, float(defect))
    logger.info('span test at lambda=%.6g: spanning=%s witness=%s', lam, report.spanning, witness)
    return report


# Finite-difference reports

def central_difference(fn, step=None):
    """``(fn(+δ) - fn(-δ)) / 2δ``."""
    step = toolkit_setting('FD_STEP') if step is None else step
    return (fn(step) - fn(-step)) / (2.0 * step)


def fd_row(lam, direction_id, derivative, fd_value):
    denom = max(abs(fd_value), abs(derivative), 1e-300)
    return {
        'lambda': float(lam),
        'direction_id': direction_id,
        'derivative': float(derivative),
        'fd_value': float(fd_value),
        'rel_error': float(abs(derivative - fd_value) / denom),
    }


# Mesh eigenpairs

def beltrami_rate_on_mesh(g, pair, h):
    u = pair.cochain.mesh.evaluate_one_form(pair.cochain)
    return beltrami_eigenvalue_derivative(g, pair.value, u, h, pair.cluster_size)


def laplacian_of_trace_on_mesh(ops, h):
    """``Δ⁰_g tr_g(h)`` through the P1 pair: L2-project, then ``M0⁻¹ K``."""
    mesh, g = ops.mesh, ops.metric
    weights = mesh.quadrature.weights * g.density
    lu = splu(ops.scalar_mass.tocsc())
    tau = lu.solve(mesh.load_vector(trace_g(h, g), weights))
    return mesh.evaluate_scalar(lu.solve(ops.stiffness @ tau))


def closed_rates_on_mesh(ops, pair, h):
    """Both forms of the closed variation for a mesh eigenpair."""
    mesh, g = ops.mesh, ops.metric
    f = mesh.evaluate_scalar(pair.cochain)
    df = mesh.evaluate_gradient(pair.cochain)
    return {
        'by_parts': closed_eigenvalue_derivative(g, pair.value, f, df, h, pair.cluster_size),
        'literal': closed_eigenvalue_derivative(
            g, pair.value, f, df, h, pair.cluster_size,
            laplacian_of_trace=laplacian_of_trace_on_mesh(ops, h),
        ),
    }


def cluster_fields_on_mesh(pairs):
    mesh = pairs[0].cochain.mesh
    return [mesh.evaluate_one_form(p.cochain) for p in pairs]
