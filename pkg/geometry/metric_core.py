"""
Pointwise tensor algebra for Riemannian metrics on sampled domains.

Every field lives on the nodes of a :class:`Quadrature`; integrals are
weighted sums ``sum_q w_q f(x_q) sqrt(det g(x_q))``. Components are stored in
a fixed coordinate (co)frame: the periodic box coordinates on the torus,
the left-invariant coframe on S3.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .conf import toolkit_setting
from .exceptions import GridMismatchError, MetricNotPositiveDefinite

logger = logging.getLogger(__name__)

TORUS = 'torus'
SPHERE = 's3'

# row-major order of the six independent components
COMPONENT_ORDER = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass(frozen=True)
class Domain:
    kind: str = TORUS
    lengths: tuple = (2 * np.pi, 2 * np.pi, 2 * np.pi)

    @property
    def volume(self):
        if self.kind == SPHERE:
            return 2 * np.pi ** 2
        return float(np.prod(self.lengths))

    def as_dict(self):
        if self.kind == SPHERE:
            return {'kind': SPHERE, 'chart': 'hopf'}
        return {'kind': TORUS, 'lengths': [float(x) for x in self.lengths]}

    @classmethod
    def from_dict(cls, data):
        if data.get('kind') == SPHERE:
            return cls(kind=SPHERE, lengths=(np.pi / 2, 2 * np.pi, 2 * np.pi))
        return cls(kind=TORUS, lengths=tuple(float(x) for x in data.get('lengths', (2 * np.pi,) * 3)))


@dataclass(eq=False)
class Quadrature:
    """Sample points with integration weights (coordinate measure)."""
    points: np.ndarray
    weights: np.ndarray
    domain: Domain = field(default_factory=Domain)
    grid_shape: tuple = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.points.shape[0] != self.weights.shape[0]:
            raise GridMismatchError(
                'Quadrature needs one weight per point',
                points=self.points.shape[0], weights=self.weights.shape[0],
            )

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def uniform_box(cls, n, lengths=(2 * np.pi, 2 * np.pi, 2 * np.pi)):
        """Midpoint grid with ``n`` points per axis (exact for trig polynomials of degree < n)."""
        axes = [(np.arange(n) + 0.5) * (L / n) for L in lengths]
        X, Y, Z = np.meshgrid(*axes, indexing='ij')
        points = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        weights = np.full(points.shape[0], np.prod(lengths) / n ** 3)
        return cls(points, weights, Domain(TORUS, tuple(lengths)), (n, n, n))


def _same_grid(*fields_):
    quads = [f.quadrature for f in fields_]
    first = quads[0]
    for quad in quads[1:]:
        if quad is first:
            continue
        if len(quad) != len(first) or not np.array_equal(quad.points, first.points):
            raise GridMismatchError(
                'Fields are sampled on different grids',
                sizes=[len(q) for q in quads],
            )
    return first


def cholesky_pivots(values):
    """Squared Cholesky diagonal (LDL^T pivots) of a stack of 3x3 matrices."""
    g = values
    d1 = g[:, 0, 0]
    safe1 = np.where(d1 > 0, d1, 1.0)
    d2 = g[:, 1, 1] - g[:, 0, 1] ** 2 / safe1
    minor = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] ** 2
    safe_minor = np.where(minor > 0, minor, 1.0)
    d3 = np.linalg.det(g) / safe_minor
    pivots = np.stack([d1, np.where(d1 > 0, d2, -np.inf), np.where(minor > 0, d3, -np.inf)], axis=1)
    return pivots


def check_positive_definite(values, tol=None):
    """Raise :class:`MetricNotPositiveDefinite` naming the first failing sample."""
    tol = toolkit_setting('PD_TOL') if tol is None else tol
    pivots = cholesky_pivots(values)
    smallest = pivots.min(axis=1)
    bad = np.flatnonzero(~(smallest > tol))
    if bad.size:
        location = int(bad[0])
        raise MetricNotPositiveDefinite(
            f'Metric is not positive definite at sample {location} '
            f'(smallest pivot {smallest[location]:.3e})',
            location=location,
            pivot=float(smallest[location]),
            failing_samples=int(bad.size),
        )
    return float(smallest.min()) if smallest.size else np.inf


def _check_symmetric(values, what):
    if values.ndim != 3 or values.shape[1:] != (3, 3):
        raise GridMismatchError(f'{what} samples must be 3x3 matrices', shape=list(values.shape))
    if not np.array_equal(values, np.swapaxes(values, 1, 2)):
        asym = float(np.max(np.abs(values - np.swapaxes(values, 1, 2))))
        raise ValueError(f'{what} samples are not symmetric (max asymmetry {asym:.3e})')


@dataclass(eq=False)
class SymTensorField:
    """Symmetric 2-tensor h_ab per sample."""
    values: np.ndarray
    quadrature: Quadrature

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        _check_symmetric(self.values, 'Symmetric tensor')
        if self.values.shape[0] != len(self.quadrature):
            raise GridMismatchError('Tensor field does not match its quadrature')

    def __add__(self, other):
        _same_grid(self, other)
        return SymTensorField(self.values + other.values, self.quadrature)

    def __sub__(self, other):
        _same_grid(self, other)
        return SymTensorField(self.values - other.values, self.quadrature)

    def __mul__(self, scalar):
        return SymTensorField(self.values * scalar, self.quadrature)

    __rmul__ = __mul__

    def __neg__(self):
        return SymTensorField(-self.values, self.quadrature)

    @classmethod
    def constant(cls, H, quadrature):
        H = np.asarray(H, dtype=float)
        H = 0.5 * (H + H.T)
        return cls(np.broadcast_to(H, (len(quadrature), 3, 3)).copy(), quadrature)


@dataclass(eq=False)
class MetricField:
    """Riemannian metric g_ab per sample, validated symmetric positive definite."""
    values: np.ndarray
    quadrature: Quadrature

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        _check_symmetric(self.values, 'Metric')
        if self.values.shape[0] != len(self.quadrature):
            raise GridMismatchError('Metric field does not match its quadrature')
        check_positive_definite(self.values)
        self.inverse = np.linalg.inv(self.values)
        self.inverse = 0.5 * (self.inverse + np.swapaxes(self.inverse, 1, 2))
        self.density = np.sqrt(np.linalg.det(self.values))

    @property
    def domain(self):
        return self.quadrature.domain

    @property
    def volume(self):
        return float(np.sum(self.quadrature.weights * self.density))

    def as_tensor(self):
        return SymTensorField(self.values.copy(), self.quadrature)

    def scaled(self, factor):
        return MetricField(self.values * factor, self.quadrature)

    def is_constant(self):
        return bool(np.all(self.values == self.values[:1]))

    @classmethod
    def constant(cls, G, quadrature):
        G = np.asarray(G, dtype=float)
        G = 0.5 * (G + G.T)
        return cls(np.broadcast_to(G, (len(quadrature), 3, 3)).copy(), quadrature)

    @classmethod
    def euclidean(cls, quadrature):
        return cls.constant(np.eye(3), quadrature)


@dataclass(eq=False)
class OneFormField:
    """Covector components u_a per sample."""
    values: np.ndarray
    quadrature: Quadrature

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1, 3)
        if self.values.shape[0] != len(self.quadrature):
            raise GridMismatchError('One-form does not match its quadrature')
        if not np.all(np.isfinite(self.values)):
            raise ValueError('One-form has non-finite entries')

    def __add__(self, other):
        _same_grid(self, other)
        return OneFormField(self.values + other.values, self.quadrature)

    def __sub__(self, other):
        _same_grid(self, other)
        return OneFormField(self.values - other.values, self.quadrature)

    def __mul__(self, scalar):
        return OneFormField(self.values * scalar, self.quadrature)

    __rmul__ = __mul__

    @classmethod
    def constant(cls, covector, quadrature):
        covector = np.asarray(covector, dtype=float)
        return cls(np.broadcast_to(covector, (len(quadrature), 3)).copy(), quadrature)


# Pointwise algebra

def sym_product(u, v):
    """Symmetric product ``(u⊙v)_ab = (u_a v_b + u_b v_a) / 2``."""
    quad = _same_grid(u, v)
    outer = np.einsum('na,nb->nab', u.values, v.values)
    return SymTensorField(0.5 * (outer + np.swapaxes(outer, 1, 2)), quad)


def raise_index(u, g):
    _same_grid(u, g)
    return np.einsum('nab,nb->na', g.inverse, u.values)


def inner_g(u, v, g):
    """Pointwise g(u, v) = g^{ab} u_a v_b."""
    _same_grid(u, v, g)
    return np.einsum('na,nab,nb->n', u.values, g.inverse, v.values)


def norm_sq(u, g):
    return inner_g(u, u, g)


def trace_g(h, g):
    """Pointwise g^{ab} h_ab."""
    _same_grid(h, g)
    return np.einsum('nab,nab->n', g.inverse, h.values)


def sharp_pair(h, u, g):
    """The covector ``h(♯u, -)``, components ``h_ab g^{bc} u_c``."""
    quad = _same_grid(h, u, g)
    return OneFormField(np.einsum('nab,nb->na', h.values, raise_index(u, g)), quad)


def tensor_on(h, u, v, g):
    """Pointwise h(♯u, ♯v)."""
    _same_grid(h, u, v, g)
    return np.einsum('na,nab,nb->n', raise_index(u, g), h.values, raise_index(v, g))


def volume_density(g):
    return g.density


def integrate(values, g):
    """Integral of a sampled scalar against the Riemannian measure of ``g``."""
    values = np.asarray(values)
    return float(np.sum(g.quadrature.weights * g.density * values))


def l2_inner(u, v, g):
    return integrate(inner_g(u, v, g), g)


# Random metrics

def random_spd(rng, amplitude=0.3):
    """Constant SPD matrix ``I + amplitude * S`` with ``||S||_2 = 1``."""
    A = rng.standard_normal((3, 3))
    S = 0.5 * (A + A.T)
    S /= np.linalg.norm(S, 2)
    return np.eye(3) + amplitude * S


def random_metric(quadrature, seed, amplitude=0.3, modes=3):
    """
    Smooth, deterministic, non-constant metric ``I + sum_j c_j S_j cos(k_j.x + phi_j)``.

    The symmetric matrices ``S_j`` have unit spectral norm and the weights
    ``|c_j|`` sum to ``amplitude``; ``amplitude < 1`` keeps the result
    positive definite.
    """
    if not 0 <= amplitude < 1:
        raise ValueError('amplitude must lie in [0, 1)')
    rng = np.random.default_rng(seed)
    lengths = np.asarray(quadrature.domain.lengths, dtype=float)
    x = quadrature.points
    weights = rng.random(modes) + 0.5
    weights *= amplitude / weights.sum()
    values = np.broadcast_to(np.eye(3), (len(quadrature), 3, 3)).copy()
    for j in range(modes):
        A = rng.standard_normal((3, 3))
        S = 0.5 * (A + A.T)
        S /= np.linalg.norm(S, 2)
        k = rng.integers(-1, 2, size=3)
        if not np.any(k):
            k[j % 3] = 1
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos((x * (2 * np.pi / lengths)) @ k + phase)
        values += weights[j] * wave[:, None, None] * S
    logger.debug('random metric seed=%s amplitude=%s modes=%s', seed, amplitude, modes)
    return MetricField(values, quadrature)


# Metric paths

def _bump(t):
    return np.sin(np.pi * t) ** 2, np.pi * np.sin(2 * np.pi * t)


def _hat(t):
    slope = 0.0 if t == 0.5 else (2.0 if t < 0.5 else -2.0)
    return 1.0 - abs(2 * t - 1), slope


PROFILES = {
    'linear': lambda t: (t, 1.0),
    'bump': _bump,
    'hat': _hat,
    'constant': lambda t: (1.0, 0.0),
}

RULES = ('linear', 'sqrt')


def _matrix_sqrt(values):
    w, V = np.linalg.eigh(values)
    return np.einsum('nai,ni,nbi->nab', V, np.sqrt(w), V)


@dataclass(eq=False)
class MetricPath:
    """
    One-parameter family ``t -> g(t)`` on ``[0, 1]``.

    Rules: ``linear`` interpolates components, ``sqrt`` interpolates the
    matrix square roots and squares the result (so ``g0 -> 4 g0`` becomes the
    conformal path ``(1+t)^2 g0``). Perturbation terms add
    ``profile(t) * h`` on top of either rule.
    """
    g0: MetricField
    g1: MetricField
    rule: str = 'linear'
    perturbations: tuple = ()

    def __post_init__(self):
        _same_grid(self.g0, self.g1, *[h for h, _ in self.perturbations])
        if self.rule not in RULES:
            raise ValueError(f'Unknown path rule: {self.rule}')
        for _, profile in self.perturbations:
            if profile not in PROFILES:
                raise ValueError(f'Unknown profile: {profile}')
        if self.rule == 'sqrt':
            self._roots = (_matrix_sqrt(self.g0.values), _matrix_sqrt(self.g1.values))

    @property
    def quadrature(self):
        return self.g0.quadrature

    def _check_t(self, t):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f'Path parameter {t} outside [0, 1]')

    def _base(self, t):
        if self.rule == 'sqrt':
            S = (1 - t) * self._roots[0] + t * self._roots[1]
            base = S @ S
        else:
            base = self.g0.values + t * (self.g1.values - self.g0.values)
        return base

    def _base_rate(self, t):
        if self.rule == 'sqrt':
            S = (1 - t) * self._roots[0] + t * self._roots[1]
            dS = self._roots[1] - self._roots[0]
            return S @ dS + dS @ S
        return self.g1.values - self.g0.values

    @staticmethod
    def _symmetrize(values):
        return 0.5 * (values + np.swapaxes(values, 1, 2))

    def values_at(self, t):
        values = self._base(t)
        for h, profile in self.perturbations:
            values = values + PROFILES[profile](t)[0] * h.values
        return self._symmetrize(values)


def path_eval(path, t):
    """Metric ``g(t)``; raises :class:`MetricNotPositiveDefinite` with the sample index."""
    path._check_t(t)
    if t == 0.0 and not path.perturbations:
        return path.g0
    if t == 1.0 and not path.perturbations:
        return path.g1
    try:
        return MetricField(path.values_at(t), path.quadrature)
    except MetricNotPositiveDefinite as exc:
        exc.details['t'] = float(t)
        exc.message = f'{exc.message} on the path at t={t}'
        exc.args = (exc.message,)
        raise


def path_derivative(path, t):
    """Velocity ``dg/dt`` as a symmetric tensor field."""
    path._check_t(t)
    rate = path._base_rate(t)
    for h, profile in path.perturbations:
        rate = rate + PROFILES[profile](t)[1] * h.values
    return SymTensorField(MetricPath._symmetrize(rate), path.quadrature)


# JSON layout

def metric_to_dict(g):
    components = [[float(row[a, b]) for a, b in COMPONENT_ORDER] for row in g.values]
    return {
        'domain': g.domain.as_dict(),
        'grid_shape': list(g.quadrature.grid_shape or (len(g.quadrature),)),
        'components': components,
    }


def metric_from_dict(data, quadrature):
    if 'domain' in data:
        domain = Domain.from_dict(data['domain'])
        expected = quadrature.domain
        if domain.kind != expected.kind or not np.allclose(domain.lengths, expected.lengths):
            raise GridMismatchError(
                'Metric JSON domain does not match the grid',
                domain=domain.as_dict(), expected=expected.as_dict(),
            )
    comps = np.asarray(data['components'], dtype=float)
    if comps.ndim != 2 or comps.shape[1] != 6:
        raise GridMismatchError('Metric JSON needs six components per sample', shape=list(comps.shape))
    if comps.shape[0] == 1:
        comps = np.repeat(comps, len(quadrature), axis=0)
    if comps.shape[0] != len(quadrature):
        raise GridMismatchError(
            'Metric JSON sample count does not match the grid',
            samples=comps.shape[0], expected=len(quadrature),
        )
    values = np.empty((comps.shape[0], 3, 3))
    for col, (a, b) in enumerate(COMPONENT_ORDER):
        values[:, a, b] = comps[:, col]
        values[:, b, a] = comps[:, col]
    return MetricField(values, quadrature)
