"""
Periodic tetrahedral mesh of the 3-torus with lowest-order Whitney forms.

Each cube of an ``n x n x n`` grid is split into the six Kuhn tetrahedra
``{x_p0 >= x_p1 >= x_p2}`` (one per axis permutation). Edges and faces are
named by a base vertex and 0/1 offset vectors, so every entity id is a pure
function of lattice coordinates:

* edge ``7 * v + d``, running from vertex ``v`` to ``v + DIRECTIONS[d]``;
* face ``12 * v + f``, the triangle ``(v, v + d1, v + d2)`` with
  ``FACE_TYPES[f] = (d1, d2)`` and ``d1`` a strict subset of ``d2``.

Metric-dependent matrices are assembled from per-tet local matrices on a
4-point (degree 2) quadrature. The helicity matrix ``B_ij = ∫ w_i ∧ d w_j``
has a linear-times-constant integrand and is therefore exact.
"""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .exceptions import GridMismatchError, MeshError
from .metric_core import Domain, OneFormField, Quadrature, TORUS

logger = logging.getLogger(__name__)

DIRECTIONS = np.array([
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, 0, 1), (0, 1, 1),
    (1, 1, 1),
])
_DIRECTION_INDEX = {tuple(d): i for i, d in enumerate(DIRECTIONS)}

FACE_TYPES = [
    (i1, i2)
    for i2, d2 in enumerate(DIRECTIONS)
    for i1, d1 in enumerate(DIRECTIONS)
    if i1 != i2 and np.all(d1 <= d2)
]
_FACE_INDEX = {pair: f for f, pair in enumerate(FACE_TYPES)}

PERMUTATIONS = list(itertools.permutations(range(3)))
LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
LOCAL_FACES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))

# symmetric 4-point rule, exact for quadratics
_QA = 0.5854101966249685
_QB = 0.1381966011250105
BARYCENTRIC = np.full((4, 4), _QB) + np.eye(4) * (_QA - _QB)

# fixed chunk count keeps floating-point summation order independent of threads
ASSEMBLY_CHUNKS = 8


def _kuhn_offsets():
    offsets = np.zeros((6, 4, 3), dtype=int)
    for p, perm in enumerate(PERMUTATIONS):
        corner = np.zeros(3, dtype=int)
        for step, axis in enumerate(perm, start=1):
            corner[axis] = 1
            offsets[p, step] = corner
    return offsets


KUHN_OFFSETS = _kuhn_offsets()


@dataclass(frozen=True)
class TetTemplate:
    """Geometry shared by every translate of one Kuhn tetrahedron."""
    corners: np.ndarray      # (4, 3) physical offsets inside the cube
    gradients: np.ndarray    # (4, 3) barycentric gradients
    volume: float
    whitney: np.ndarray      # (4 quad points, 6 edges, 3) Whitney field values
    curls: np.ndarray        # (6 edges, 3) constant curls


def _template(p, spacing):
    corners = KUHN_OFFSETS[p] * spacing
    D = corners[1:] - corners[0]
    Dinv = np.linalg.inv(D)
    gradients = np.vstack([-Dinv.sum(axis=1), Dinv.T])
    volume = abs(np.linalg.det(D)) / 6.0
    whitney = np.empty((4, 6, 3))
    curls = np.empty((6, 3))
    for e, (a, b) in enumerate(LOCAL_EDGES):
        whitney[:, e] = (BARYCENTRIC[:, a, None] * gradients[b]
                         - BARYCENTRIC[:, b, None] * gradients[a])
        curls[e] = 2.0 * np.cross(gradients[a], gradients[b])
    return TetTemplate(corners, gradients, volume, whitney, curls)


@dataclass(eq=False)
class Cochain:
    """Coefficients of a k-cochain on a mesh."""
    degree: int
    values: np.ndarray
    mesh: 'PeriodicMesh'

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.mesh.entity_count(self.degree)
        if self.values.shape != (expected,):
            raise GridMismatchError(
                f'{self.degree}-cochain needs {expected} coefficients',
                got=list(self.values.shape),
            )


class PeriodicMesh:
    """
    Kuhn-split periodic mesh of a box with opposite faces identified.

    Entity ordering is lexicographic in the lattice coordinates of the base
    vertex, so every table and matrix is bit-reproducible.
    """

    def __init__(self, n, lengths=(2 * np.pi, 2 * np.pi, 2 * np.pi)):
        if int(n) != n or n < 2:
            raise MeshError(f'Mesh resolution must be an integer >= 2, got {n}', n=n)
        self.n = int(n)
        self.lengths = tuple(float(L) for L in lengths)
        self.spacing = np.asarray(self.lengths) / self.n
        self.domain = Domain(TORUS, self.lengths)

        n = self.n
        axis = np.arange(n)
        I, J, K = np.meshgrid(axis, axis, axis, indexing='ij')
        self.lattice = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=1)
        self.vertices = self.lattice * self.spacing

        cubes = self.lattice
        self.tets = np.stack(
            [self.vertex_index(cubes[:, None, :] + KUHN_OFFSETS[None, p, :, :]) for p in range(6)],
            axis=1,
        ).reshape(-1, 4)
        self.tet_edges = self._tet_entities(LOCAL_EDGES, self._edge_id)
        self.tet_faces = self._tet_entities(LOCAL_FACES, self._face_id)

        base = np.repeat(np.arange(n ** 3), 7)
        dirs = np.tile(np.arange(7), n ** 3)
        self.edges = np.stack(
            [base, self.vertex_index(self.lattice[base] + DIRECTIONS[dirs])], axis=1
        )
        self.edge_directions = dirs
        self.templates = [_template(p, self.spacing) for p in range(6)]
        logger.debug('built periodic mesh n=%d V=%d E=%d F=%d T=%d',
                     n, self.num_vertices, self.num_edges, self.num_faces, self.num_tets)

    # counts

    @property
    def num_vertices(self):
        return self.n ** 3

    @property
    def num_edges(self):
        return 7 * self.n ** 3

    @property
    def num_faces(self):
        return 12 * self.n ** 3

    @property
    def num_tets(self):
        return 6 * self.n ** 3

    @property
    def num_cubes(self):
        return self.n ** 3

    def entity_count(self, degree):
        return (self.num_vertices, self.num_edges, self.num_faces, self.num_tets)[degree]

    def euler_characteristic(self):
        return self.num_vertices - self.num_edges + self.num_faces - self.num_tets

    # indexing

    def vertex_index(self, coords):
        c = np.mod(coords, self.n)
        return (c[..., 0] * self.n + c[..., 1]) * self.n + c[..., 2]

    def _edge_id(self, base, offsets):
        d = tuple(offsets[1] - offsets[0])
        return 7 * self.vertex_index(base + offsets[0]) + _DIRECTION_INDEX[d]

    def _face_id(self, base, offsets):
        d1 = tuple(offsets[1] - offsets[0])
        d2 = tuple(offsets[2] - offsets[0])
        f = _FACE_INDEX[(_DIRECTION_INDEX[d1], _DIRECTION_INDEX[d2])]
        return 12 * self.vertex_index(base + offsets[0]) + f

    def _tet_entities(self, local, naming):
        out = np.empty((self.num_cubes, 6, len(local)), dtype=np.int64)
        for p in range(6):
            for slot, verts in enumerate(local):
                out[:, p, slot] = naming(self.lattice, KUHN_OFFSETS[p][list(verts)])
        return out.reshape(-1, len(local))

    # incidence

    @cached_property
    def d0(self):
        E = self.num_edges
        rows = np.repeat(np.arange(E), 2)
        cols = self.edges.ravel()
        vals = np.tile([-1, 1], E)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(E, self.num_vertices), dtype=np.int64)

    @cached_property
    def d1(self):
        F = self.num_faces
        base = np.repeat(np.arange(self.num_vertices), 12)
        ftype = np.tile(np.arange(12), self.num_vertices)
        i1 = np.array([FACE_TYPES[f][0] for f in range(12)])[ftype]
        i2 = np.array([FACE_TYPES[f][1] for f in range(12)])[ftype]
        diff = DIRECTIONS[i2] - DIRECTIONS[i1]
        i12 = np.array([_DIRECTION_INDEX[tuple(d)] for d in diff])
        mid = self.vertex_index(self.lattice[base] + DIRECTIONS[i1])
        rows = np.repeat(np.arange(F), 3)
        cols = np.stack([7 * base + i1, 7 * mid + i12, 7 * base + i2], axis=1).ravel()
        vals = np.tile([1, 1, -1], F)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(F, self.num_edges), dtype=np.int64)

    def edge_tet_counts(self):
        return np.bincount(self.tet_edges.ravel(), minlength=self.num_edges)

    def face_tet_counts(self):
        return np.bincount(self.tet_faces.ravel(), minlength=self.num_faces)

    # quadrature

    @cached_property
    def quadrature(self):
        """4-point rule on every tet; sample ``(c*6 + p)*4 + q``."""
        origins = self.lattice * self.spacing
        local = np.stack([BARYCENTRIC @ tpl.corners for tpl in self.templates])  # (6, 4, 3)
        points = origins[:, None, None, :] + local[None]
        weights = np.broadcast_to(
            np.array([tpl.volume / 4.0 for tpl in self.templates])[None, :, None],
            (self.num_cubes, 6, 4),
        )
        return Quadrature(points.reshape(-1, 3), weights.reshape(-1).copy(), self.domain)

    @cached_property
    def _whitney(self):
        return np.stack([tpl.whitney for tpl in self.templates])

    @cached_property
    def _gradients(self):
        return np.stack([tpl.gradients for tpl in self.templates])

    def evaluate_one_form(self, cochain):
        """Whitney interpolant of an edge cochain at the quadrature points."""
        x = np.asarray(getattr(cochain, 'values', cochain), dtype=float)
        X = x[self.tet_edges].reshape(self.num_cubes, 6, 6)
        values = np.einsum('pqea,cpe->cpqa', self._whitney, X)
        return OneFormField(values.reshape(-1, 3), self.quadrature)

    def evaluate_scalar(self, f):
        f = np.asarray(getattr(f, 'values', f), dtype=float)
        F = f[self.tets].reshape(self.num_cubes, 6, 4)
        return np.einsum('qv,cpv->cpq', BARYCENTRIC, F).reshape(-1)

    def evaluate_gradient(self, f):
        """Gradient covector of the P1 interpolant, repeated on each tet's points."""
        f = np.asarray(getattr(f, 'values', f), dtype=float)
        F = f[self.tets].reshape(self.num_cubes, 6, 4)
        grads = np.einsum('pva,cpv->cpa', self._gradients, F)
        values = np.repeat(grads[:, :, None, :], 4, axis=2)
        return OneFormField(values.reshape(-1, 3), self.quadrature)

    def load_vector(self, values, weights):
        """``∫ values φ_v`` against every P1 hat function, for sampled ``values``."""
        V = (np.asarray(values, dtype=float) * weights).reshape(self.num_cubes, 6, 4)
        local = np.einsum('qv,cpq->cpv', BARYCENTRIC, V)
        return np.bincount(self.tets.ravel(), weights=local.ravel(), minlength=self.num_vertices)

    # cochains

    def harmonic_cochains(self):
        """Edge cochains of dx, dy, dz (rows)."""
        return (DIRECTIONS[self.edge_directions] * self.spacing).T.copy()

    def interpolate_one_form(self, field, order=4):
        """
        De Rham map of a smooth covector field.

        ``field`` maps an ``(m, 3)`` array of points to ``(m, 3)`` covector
        components; edge integrals use Gauss-Legendre with ``order`` nodes.
        """
        nodes, weights = np.polynomial.legendre.leggauss(order)
        s = 0.5 * (nodes + 1.0)
        w = 0.5 * weights
        start = self.vertices[self.edges[:, 0]]
        vec = DIRECTIONS[self.edge_directions] * self.spacing
        total = np.zeros(self.num_edges)
        for sk, wk in zip(s, w):
            u = np.asarray(field(start + sk * vec), dtype=float)
            total += wk * np.einsum('ea,ea->e', u, vec)
        return total

    def gradient_cochain(self, f):
        return self.d0 @ np.asarray(f, dtype=float)

    @cached_property
    def helicity(self):
        return assemble_helicity(self)


def build_mesh(n, lengths=(2 * np.pi, 2 * np.pi, 2 * np.pi)):
    return PeriodicMesh(n, lengths)


def incidence_d0(mesh):
    return mesh.d0


def incidence_d1(mesh):
    return mesh.d1


def quadrature_points(mesh):
    return mesh.quadrature


# Assembly

def _check_metric(mesh, g):
    quad = mesh.quadrature
    if len(g.quadrature) != len(quad) or (
        g.quadrature is not quad and not np.array_equal(g.quadrature.points, quad.points)
    ):
        raise GridMismatchError(
            'Metric must be sampled on the mesh quadrature points',
            samples=len(g.quadrature), expected=len(quad),
        )


def _chunks(mesh):
    return np.array_split(np.arange(mesh.num_cubes), min(ASSEMBLY_CHUNKS, mesh.num_cubes))


def _scatter(local, dofs, size):
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(size, size)).tocsr()


def _assemble(mesh, local_fn, dofs, size, threads=1):
    """Sum chunked local contributions in fixed chunk order."""
    chunks = _chunks(mesh)

    def work(cubes):
        tets = (cubes[:, None] * 6 + np.arange(6)[None, :]).ravel()
        return _scatter(local_fn(cubes), dofs[tets], size)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total.tocsr()


def _weighted_inverse(mesh, g, cubes):
    """Per-point ``w_q sqrt(det g) g^{-1}``, shaped (cubes, 6, 4, 3, 3)."""
    idx = (cubes[:, None] * 24 + np.arange(24)[None, :]).ravel()
    w = mesh.quadrature.weights[idx] * g.density[idx]
    return (w[:, None, None] * g.inverse[idx]).reshape(len(cubes), 6, 4, 3, 3)


def _mass_integrand_derivative(mesh, g, h, cubes):
    idx = (cubes[:, None] * 24 + np.arange(24)[None, :]).ravel()
    ginv = g.inverse[idx]
    hv = h.values[idx]
    tr = np.einsum('nab,nab->n', ginv, hv)
    dinv = -ginv @ hv @ ginv + 0.5 * tr[:, None, None] * ginv
    w = mesh.quadrature.weights[idx] * g.density[idx]
    return (w[:, None, None] * dinv).reshape(len(cubes), 6, 4, 3, 3)


def assemble_helicity(mesh):
    """Symmetrized ``B_ij = ∫ w_i · curl w_j dx`` (metric independent)."""
    local = np.stack([
        (tpl.volume / 4.0) * np.einsum('qia,ja->ij', tpl.whitney, tpl.curls)
        for tpl in mesh.templates
    ])

    def local_fn(cubes):
        return np.broadcast_to(local[None], (len(cubes), 6, 6, 6))

    B = _assemble(mesh, local_fn, mesh.tet_edges, mesh.num_edges)
    return ((B + B.T) * 0.5).tocsr()


def assemble_mass_1forms(mesh, g, threads=1):
    """``M_ij = ∫ g^{ab} (w_i)_a (w_j)_b sqrt(det g) dx``."""
    _check_metric(mesh, g)
    W = mesh._whitney

    def local_fn(cubes):
        D = _weighted_inverse(mesh, g, cubes)
        return np.einsum('pqia,cpqab,pqjb->cpij', W, D, W, optimize=True)

    M = _assemble(mesh, local_fn, mesh.tet_edges, mesh.num_edges, threads)
    return ((M + M.T) * 0.5).tocsr()


def mass_derivative(mesh, g, h, threads=1):
    """Directional derivative of ``M_g`` in the metric direction ``h``."""
    _check_metric(mesh, g)
    W = mesh._whitney

    def local_fn(cubes):
        D = _mass_integrand_derivative(mesh, g, h, cubes)
        return np.einsum('pqia,cpqab,pqjb->cpij', W, D, W, optimize=True)

    dM = _assemble(mesh, local_fn, mesh.tet_edges, mesh.num_edges, threads)
    return ((dM + dM.T) * 0.5).tocsr()


def assemble_scalar(mesh, g, threads=1):
    """P1 stiffness and mass matrices of the Laplace-Beltrami operator."""
    _check_metric(mesh, g)
    grads = mesh._gradients

    def stiffness_fn(cubes):
        D = _weighted_inverse(mesh, g, cubes).sum(axis=2)
        return np.einsum('pia,cpab,pjb->cpij', grads, D, grads, optimize=True)

    def mass_fn(cubes):
        idx = (cubes[:, None] * 24 + np.arange(24)[None, :]).ravel()
        w = (mesh.quadrature.weights[idx] * g.density[idx]).reshape(len(cubes), 6, 4)
        return np.einsum('qi,cpq,qj->cpij', BARYCENTRIC, w, BARYCENTRIC)

    K = _assemble(mesh, stiffness_fn, mesh.tets, mesh.num_vertices, threads)
    M0 = _assemble(mesh, mass_fn, mesh.tets, mesh.num_vertices, threads)
    return ((K + K.T) * 0.5).tocsr(), ((M0 + M0.T) * 0.5).tocsr()


def export_coo(matrix, target):
    """Write ``rows cols nnz`` then one ``i j value`` line per stored entry."""
    coo = sparse.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    lines = [f'{coo.shape[0]} {coo.shape[1]} {coo.nnz}']
    lines.extend(
        f'{int(i)} {int(j)} {float(v):.17g}'
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order])
    )
    text = '\n'.join(lines) + '\n'
    if hasattr(target, 'write'):
        target.write(text)
    else:
        with open(target, 'w', encoding='utf-8') as handle:
            handle.write(text)
    return coo.nnz
