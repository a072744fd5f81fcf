"""
Discrete Beltrami and scalar eigenproblems on a periodic mesh.

The coclosed problem is the symmetric indefinite pencil ``B u = λ M_g u``.
Its kernel (gradients plus the three harmonic forms) is removed inside the
shift-invert operator by the ``M_g``-orthogonal projector onto the
complement of the closed cochains; a post-filter ``|λ| > λ_min`` catches
anything the projector leaves behind.

Both problems are solved by repeated shift-invert passes that deflate the
vectors already found, so exactly degenerate clusters come back whole.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg as dense_linalg
from scipy.sparse import linalg as sparse_linalg

from geometry.conf import toolkit_setting
from geometry.dec_mesh import Cochain, assemble_mass_1forms, assemble_scalar
from geometry.exceptions import EmptyWindowError, SolverConvergenceError

logger = logging.getLogger(__name__)

COCLOSED_SHIFT = 1.37e-3
CLOSED_SHIFT = -0.01


@dataclass(eq=False)
class BeltramiEigenpair:
    value: float
    cochain: Cochain
    residual: float
    cluster_id: int
    seed: int
    cluster_size: int = 1
    borderline: bool = False

    @property
    def vector(self):
        return self.cochain.values

    @property
    def sign(self):
        return 1 if self.value > 0 else -1

    @property
    def hodge_value(self):
        return self.value ** 2

    def as_record(self):
        return {
            'lambda': float(self.value),
            'sign': self.sign,
            'residual': float(self.residual),
            'cluster_id': int(self.cluster_id),
            'seed': int(self.seed),
        }


@dataclass(eq=False)
class ClosedEigenpair:
    value: float
    cochain: Cochain
    residual: float
    cluster_id: int
    seed: int
    cluster_size: int = 1
    borderline: bool = False

    @property
    def vector(self):
        return self.cochain.values

    @property
    def hodge_value(self):
        return self.value

    def as_record(self):
        return {
            'rho': float(self.value),
            'residual': float(self.residual),
            'cluster_id': int(self.cluster_id),
            'seed': int(self.seed),
        }


@dataclass(eq=False)
class DiscreteOperators:
    """Everything a solve at one metric needs, assembled once."""
    mesh: object
    metric: object
    helicity: object
    mass: object
    stiffness: object
    scalar_mass: object

    @classmethod
    def assemble(cls, mesh, g, threads=1):
        K, M0 = assemble_scalar(mesh, g, threads)
        return cls(mesh, g, mesh.helicity, assemble_mass_1forms(mesh, g, threads), K, M0)


class ClosedFormProjector:
    """
    ``M_g``-orthogonal projector onto the complement of closed edge cochains.

    Gradients are removed by solving the grounded scalar system
    ``d0^T M d0 φ = d0^T M y``; the three harmonic cochains are then
    ``M_g``-orthonormalized and removed explicitly.
    """

    def __init__(self, ops):
        mesh = ops.mesh
        self.mass = ops.mass
        self.d0 = mesh.d0.astype(float).tocsr()
        # equals the P1 stiffness for Whitney/P1 pairs
        K = (self.d0.T @ self.mass @ self.d0).tocsc()
        self._grounded = sparse_linalg.splu(K[1:, 1:].tocsc())
        harmonic = np.stack([self._remove_gradients(c) for c in mesh.harmonic_cochains()], axis=1)
        gram = harmonic.T @ (self.mass @ harmonic)
        self.harmonic_rank = int(np.linalg.matrix_rank(gram, tol=1e-10 * np.trace(gram)))
        L = np.linalg.cholesky(gram)
        self.harmonic = np.linalg.solve(L, harmonic.T).T

    def _remove_gradients(self, y):
        rhs = self.d0.T @ (self.mass @ y)
        phi = np.zeros(self.d0.shape[1])
        phi[1:] = self._grounded.solve(rhs[1:])
        return y - self.d0 @ phi

    def __call__(self, y):
        y = self._remove_gradients(np.asarray(y, dtype=float))
        return y - self.harmonic @ (self.harmonic.T @ (self.mass @ y))


def gradient_scale(ops, seed=0, samples=4):
    """Largest |Rayleigh quotient| of ``B`` on random gradient cochains (roundoff level)."""
    rng = np.random.default_rng(seed)
    d0 = ops.mesh.d0.astype(float)
    worst = 0.0
    for _ in range(samples):
        x = d0 @ rng.standard_normal(d0.shape[1])
        worst = max(worst, abs(x @ (ops.helicity @ x)) / (x @ (ops.mass @ x)))
    return worst


def kernel_cutoff(ops, seed=0):
    factor = toolkit_setting('KERNEL_CUTOFF_FACTOR')
    floor = toolkit_setting('KERNEL_CUTOFF_FLOOR')
    return max(floor, factor * gradient_scale(ops, seed))


def cluster_values(values, gap_tol=None):
    """Group sorted values; returns ``(cluster_ids, sizes, borderline_flags)``."""
    gap_tol = toolkit_setting('GAP_TOL') if gap_tol is None else gap_tol
    factor = toolkit_setting('BORDERLINE_FACTOR')
    values = np.asarray(values, dtype=float)
    ids = np.zeros(len(values), dtype=int)
    borderline = np.zeros(len(values), dtype=bool)
    for i in range(1, len(values)):
        scale = gap_tol * max(1.0, abs(values[i]))
        gap = values[i] - values[i - 1]
        ids[i] = ids[i - 1] if gap <= scale else ids[i - 1] + 1
        if scale < gap <= factor * scale:
            borderline[i] = borderline[i - 1] = True
    sizes = np.bincount(ids, minlength=ids[-1] + 1 if len(ids) else 0)
    return ids, sizes[ids] if len(ids) else sizes, borderline


def _orthonormalize_clusters(vectors, mass, ids):
    out = vectors.copy()
    for cid in np.unique(ids):
        cols = np.flatnonzero(ids == cid)
        V = out[:, cols]
        gram = V.T @ (mass @ V)
        w, Q = np.linalg.eigh(0.5 * (gram + gram.T))
        out[:, cols] = V @ (Q / np.sqrt(w)) @ Q.T
    for j in range(out.shape[1]):
        v = out[:, j]
        v = v / np.sqrt(v @ (mass @ v))
        pivot = np.argmax(np.abs(v))
        out[:, j] = v if v[pivot] >= 0 else -v
    return out


def _start_vector(size, seed):
    return np.random.default_rng(seed).standard_normal(size)


def _eigsh(A, nev, M, sigma, op, v0, tol, maxiter):
    try:
        return sparse_linalg.eigsh(A, k=nev, M=M, sigma=sigma, which='LM', OPinv=op,
                                   v0=v0, tol=tol, maxiter=maxiter)
    except sparse_linalg.ArpackNoConvergence as exc:
        raise SolverConvergenceError(
            f'ARPACK did not converge for {nev} eigenpairs (converged {len(exc.eigenvalues)})',
            iterations=maxiter, converged=len(exc.eigenvalues),
        ) from exc


def _new_directions(values, vectors, basis, mass):
    """``M``-orthonormal part of ``vectors`` not already spanned by ``basis``."""
    current = basis
    kept = []
    for lam, v in zip(values, vectors.T):
        w = v - current @ (current.T @ (mass @ v)) if current.shape[1] else v
        norm = np.sqrt(max(float(w @ (mass @ w)), 0.0))
        # ARPACK vectors are M-normalized; anything shorter is a repeat
        if norm < 0.5:
            continue
        current = np.column_stack([current, w / norm])
        kept.append(lam)
    return np.asarray(kept, dtype=float), current[:, basis.shape[1]:]


def _count_bound(count):
    gap_tol = toolkit_setting('GAP_TOL')

    def bound(values):
        magnitudes = np.sort(np.abs(values))
        if len(magnitudes) < count:
            return np.inf
        cut = magnitudes[count - 1]
        return cut + gap_tol * max(1.0, cut)
    return bound


def _collect_eigenpairs(A, M, sigma, inverse, v0, nev, rank, bound, admit):
    """
    Shift-invert Lanczos with deflation of everything already converged.

    One Krylov sequence can return fewer copies of an exactly degenerate
    eigenvalue than its multiplicity. Every pass removes the vectors found so
    far from the operator and solves again; collection stops once a pass
    reaches past ``bound`` of the admitted values without adding anything
    inside it.
    """
    tol = toolkit_setting('SOLVER_TOL')
    maxiter = toolkit_setting('SOLVER_MAXITER')
    basis = np.empty((A.shape[0], 0))
    found = np.empty(0)

    def deflate(x):
        return x - basis @ (basis.T @ (M @ x)) if basis.shape[1] else x

    passes = 0
    while True:
        limit = rank - basis.shape[1] - 1
        if limit < 1:
            break
        nev = min(nev, limit)
        op = sparse_linalg.LinearOperator(M.shape, matvec=lambda y: deflate(inverse(y)), dtype=float)
        values, vectors = _eigsh(A, nev, M, sigma, op, deflate(v0), tol, maxiter)
        passes += 1
        fresh, fresh_vectors = _new_directions(values, vectors, basis, M)
        basis = np.hstack([basis, fresh_vectors])
        found = np.concatenate([found, fresh])
        edge = bound(found[admit(found)])
        reach = float(np.max(np.abs(values - sigma))) if len(values) else 0.0
        inside = bool(np.any(admit(fresh) & (np.abs(fresh) <= edge)))
        covered = reach >= edge + abs(sigma)
        if covered and not inside:
            break
        if not covered and not inside:
            if nev >= limit:
                break
            nev = min(limit, 2 * nev)
            logger.debug('window not covered, retrying with nev=%d', nev)
    logger.debug('collected %d eigenpairs in %d passes', len(found), passes)
    keep = admit(found)
    return found[keep], basis[:, keep]


def coclosed_spectrum(mesh, g, count=None, max_abs=None, seed=None, ops=None, threads=1):
    """
    Beltrami eigenpairs closest to zero, excluding the closed-form kernel.

    Exactly one of ``count`` (the ``count`` smallest ``|λ|``, completed to
    whole clusters) and ``max_abs`` (every ``|λ| <= max_abs``) selects the
    window. Pairs are sorted by ``λ`` and ``M_g``-orthonormal.
    """
    if (count is None) == (max_abs is None):
        raise ValueError('Give exactly one of count or max_abs')
    seed = toolkit_setting('DEFAULT_SEED') if seed is None else seed
    ops = ops or DiscreteOperators.assemble(mesh, g, threads)
    projector = ClosedFormProjector(ops)
    lam_min = kernel_cutoff(ops, seed)
    rank = mesh.num_edges - mesh.num_vertices - 2
    solver = sparse_linalg.splu((ops.helicity - COCLOSED_SHIFT * ops.mass).tocsc())
    bound = _count_bound(count) if count is not None else (lambda values: max_abs)
    values, vectors = _collect_eigenpairs(
        ops.helicity, ops.mass, COCLOSED_SHIFT, lambda y: projector(solver.solve(y)),
        projector(_start_vector(mesh.num_edges, seed)), max(12, 2 * (count or 0)), rank,
        bound, lambda values: np.abs(values) > lam_min,
    )
    selected = np.abs(values) <= bound(values)
    values, vectors = values[selected], vectors[:, selected]
    if not len(values):
        raise EmptyWindowError('No coclosed eigenvalues inside the window', lam_min=lam_min)

    order = np.argsort(values, kind='stable')
    values, vectors = values[order], vectors[:, order]
    ids, sizes, borderline = cluster_values(values)
    vectors = _orthonormalize_clusters(vectors, ops.mass, ids)

    pairs = []
    for j, lam in enumerate(values):
        u = vectors[:, j]
        Mu = ops.mass @ u
        residual = np.linalg.norm(ops.helicity @ u - lam * Mu) / np.linalg.norm(lam * Mu)
        helicity = u @ (ops.helicity @ u)
        if np.sign(helicity) != np.sign(lam):
            logger.warning('helicity sign disagrees with eigenvalue %.6g', lam)
        pairs.append(BeltramiEigenpair(
            float(lam), Cochain(1, u, mesh), float(residual), int(ids[j]), int(seed),
            int(sizes[j]), bool(borderline[j]),
        ))
    if borderline.any():
        logger.warning('borderline clusters near gap_tol in coclosed spectrum')
    logger.info('coclosed spectrum: %d pairs, lambda_min=%.3e, seed=%s', len(pairs), lam_min, seed)
    return pairs


def closed_spectrum(mesh, g, count, seed=None, ops=None, threads=1):
    """Lowest ``count`` nonzero Laplace-Beltrami eigenpairs (completed to whole clusters)."""
    seed = toolkit_setting('DEFAULT_SEED') if seed is None else seed
    ops = ops or DiscreteOperators.assemble(mesh, g, threads)
    K, M0 = ops.stiffness, ops.scalar_mass
    lu = sparse_linalg.splu((K - CLOSED_SHIFT * M0).tocsc())
    floor = toolkit_setting('KERNEL_CUTOFF_FLOOR')
    bound = _count_bound(count)
    values, vectors = _collect_eigenpairs(
        K, M0, CLOSED_SHIFT, lu.solve, _start_vector(mesh.num_vertices, seed),
        count + 1 + max(4, count // 2), mesh.num_vertices, bound, lambda values: values > floor,
    )
    keep = values <= bound(values)
    values, vectors = values[keep], vectors[:, keep]
    order = np.argsort(values, kind='stable')
    values, vectors = values[order], vectors[:, order]
    ids, sizes, borderline = cluster_values(values)
    vectors = _orthonormalize_clusters(vectors, M0, ids)
    pairs = []
    for j, rho in enumerate(values):
        f = vectors[:, j]
        Mf = M0 @ f
        residual = np.linalg.norm(K @ f - rho * Mf) / np.linalg.norm(rho * Mf)
        pairs.append(ClosedEigenpair(
            float(rho), Cochain(0, f, mesh), float(residual), int(ids[j]), int(seed),
            int(sizes[j]), bool(borderline[j]),
        ))
    logger.info('closed spectrum: %d pairs, seed=%s', len(pairs), seed)
    return pairs


def induced_exact_form(pair):
    """The exact 1-cochain ``d0 f``; its ``M_g`` norm squared is ``ρ``."""
    mesh = pair.cochain.mesh
    return Cochain(1, mesh.d0 @ pair.vector, mesh)


def helicity_of(cochain):
    """``∫ u ∧ du`` of an edge cochain."""
    u = cochain.values
    return float(u @ (cochain.mesh.helicity @ u))


def kernel_dimension(mesh, g, tol=1e-8):
    """Dense count of pencil eigenvalues with ``|λ| <= tol * max|λ|`` (small meshes only)."""
    B = mesh.helicity.toarray()
    M = assemble_mass_1forms(mesh, g).toarray()
    values = dense_linalg.eigh(B, M, eigvals_only=True)
    return int(np.sum(np.abs(values) <= tol * np.max(np.abs(values))))
