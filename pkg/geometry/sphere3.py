"""
Closed-form computations on the round 3-sphere in its left-invariant coframe.

Points are sampled in Hopf coordinates ``(η, ξ1, ξ2)``,
``(z1, z2) = (cos η e^{iξ1}, sin η e^{iξ2})``, with measure
``sin η cos η dη dξ1 dξ2`` (total ``2π²``). In the orthonormal coframe
``θ¹, θ², θ³`` the round metric is the identity and
``dθⁱ = c θʲ∧θᵏ`` (cyclic) with ``c = 2``, so ``∗dθⁱ = 2θⁱ``: the
positively oriented Hopf coframe ``θ¹`` has Beltrami eigenvalue ``+2``.

Frame components may depend on one phase ``x`` with ``dx = ω θ¹``
(``x = 2(ξ1 - ξ2)``, ``ω = 4``); this is the local model used for the
rotating field ``β = cos x θ² + sin x θ³``.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .metric_core import (
    SPHERE,
    Domain,
    MetricField,
    OneFormField,
    Quadrature,
    integrate,
    l2_inner,
    norm_sq,
    inner_g,
    sym_product,
    tensor_on,
    trace_g,
)

logger = logging.getLogger(__name__)

STRUCTURE_CONSTANT = 2.0
PHASE_RATE = 4.0
VOLUME = 2 * np.pi ** 2


def hopf_quadrature(n_eta=8, n_xi=8):
    """
    Product grid: Gauss-Legendre in ``η ∈ [0, π/2]``, uniform in ``ξ1, ξ2``.

    Exact for the low-degree trigonometric integrands used in this module.
    """
    nodes, weights = np.polynomial.legendre.leggauss(n_eta)
    eta = 0.25 * np.pi * (nodes + 1.0)
    w_eta = 0.25 * np.pi * weights * np.sin(eta) * np.cos(eta)
    xi = 2 * np.pi * np.arange(n_xi) / n_xi
    w_xi = 2 * np.pi / n_xi
    E, X1, X2 = np.meshgrid(eta, xi, xi, indexing='ij')
    W = w_eta[:, None, None] * w_xi * w_xi * np.ones_like(E)
    points = np.stack([E.ravel(), X1.ravel(), X2.ravel()], axis=1)
    return Quadrature(points, W.ravel(), Domain.from_dict({'kind': SPHERE}), (n_eta, n_xi, n_xi))


def phase(quadrature):
    """The phase ``x = 2(ξ1 - ξ2)`` at every node."""
    return 2.0 * (quadrature.points[:, 1] - quadrature.points[:, 2])


@dataclass
class InvariantFrameField:
    """
    One-form ``Σ aᵢ(x) θⁱ`` with ``aᵢ(x) = pᵢ + qᵢ cos x + rᵢ sin x``.

    ``coefficients`` has shape ``(3, 3)``: one row per coframe component,
    columns ``(constant, cos, sin)``.
    """
    coefficients: np.ndarray
    eigenvalue: float = None
    name: str = ''

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError('Frame field has non-finite coefficients')

    def components(self, x):
        basis = np.stack([np.ones_like(x), np.cos(x), np.sin(x)], axis=0)
        return (self.coefficients @ basis).T

    def derivative(self):
        """``d/dx`` of every component."""
        p, q, r = self.coefficients.T
        return InvariantFrameField(np.stack([np.zeros(3), r, -q], axis=1))

    def sample(self, quadrature):
        return OneFormField(self.components(phase(quadrature)), quadrature)

    def __add__(self, other):
        return InvariantFrameField(self.coefficients + other.coefficients)

    def __mul__(self, scalar):
        return InvariantFrameField(self.coefficients * scalar)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (-1.0) * other


def hopf_fields():
    """``α = θ¹`` (eigenvalue ``+2``) and ``β = cos x θ² + sin x θ³`` (eigenvalue ``-2``)."""
    alpha = InvariantFrameField([[1, 0, 0], [0, 0, 0], [0, 0, 0]], STRUCTURE_CONSTANT, 'alpha')
    beta = InvariantFrameField([[0, 0, 0], [0, 1, 0], [0, 0, 1]], -STRUCTURE_CONSTANT, 'beta')
    return alpha, beta


def curl_invariant(u, c=STRUCTURE_CONSTANT, rate=PHASE_RATE):
    """
    ``∗d u`` in the same coframe.

    With ``dx = ω θ¹`` and ``dθⁱ = c θʲ∧θᵏ``:
    ``(∗du)₁ = c a₁``, ``(∗du)₂ = c a₂ - ω a₃'``, ``(∗du)₃ = c a₃ + ω a₂'``.
    """
    a = u.coefficients
    da = u.derivative().coefficients
    out = c * a.copy()
    out[1] -= rate * da[2]
    out[2] += rate * da[1]
    return InvariantFrameField(out)


def eigen_residual(u, lam, quadrature, **kwargs):
    """Max-norm of ``∗du - λu`` on the grid."""
    x = phase(quadrature)
    return float(np.max(np.abs(curl_invariant(u, **kwargs).components(x) - lam * u.components(x))))


def crossing_direction(alpha, beta, quadrature):
    """``h = α⊙α - β⊙β`` sampled on the grid."""
    a, b = alpha.sample(quadrature), beta.sample(quadrature)
    return sym_product(a, a) - sym_product(b, b)


@dataclass
class CrossingCertificate:
    dmu: float
    dnu: float
    volume: float
    residual_alpha: float
    residual_beta: float
    quadrature_change: float
    flagged: bool

    @property
    def expected(self):
        return 2.0 * self.volume

    def as_dict(self):
        return {
            'dmu': self.dmu,
            'dnu': self.dnu,
            'expected': self.expected,
            'vol': self.volume,
            'residual_alpha': self.residual_alpha,
            'residual_beta': self.residual_beta,
            'quadrature_change': self.quadrature_change,
            'flagged': self.flagged,
        }


def _rates(quadrature, sign=1.0):
    # local import: perturbation lives in the spectra app
    from spectra.perturbation import beltrami_eigenvalue_derivative

    alpha, beta = hopf_fields()
    g = MetricField.euclidean(quadrature)
    h = crossing_direction(alpha, beta, quadrature) * sign
    dmu = beltrami_eigenvalue_derivative(g, alpha.eigenvalue, alpha.sample(quadrature), h)
    dnu = beltrami_eigenvalue_derivative(g, beta.eigenvalue, beta.sample(quadrature), h)
    return dmu, dnu, g.volume


def crossing_derivatives(n_eta=8, n_xi=8, sign=1.0, tol=1e-8):
    """
    Rates of ``μ = 2`` (field ``α``) and ``ν = -2`` (field ``β``) along
    ``h = α⊙α - β⊙β``; both equal ``2 vol(S³) = 4π²``.

    The fields enter unnormalized (pointwise unit length). ``flagged`` is
    set when the eigen-residuals or the change under grid doubling exceed
    ``tol``.
    """
    quadrature = hopf_quadrature(n_eta, n_xi)
    dmu, dnu, volume = _rates(quadrature, sign)
    fine_mu, fine_nu, _ = _rates(hopf_quadrature(2 * n_eta, 2 * n_xi), sign)
    change = max(abs(fine_mu - dmu), abs(fine_nu - dnu))
    alpha, beta = hopf_fields()
    res_a = eigen_residual(alpha, alpha.eigenvalue, quadrature)
    res_b = eigen_residual(beta, beta.eigenvalue, quadrature)
    flagged = max(res_a, res_b, change) > tol
    if flagged:
        logger.warning('S3 crossing certificate flagged: residuals %.3e %.3e, change %.3e', res_a, res_b, change)
    return CrossingCertificate(dmu, dnu, volume, res_a, res_b, change, flagged)


def pointwise_identities_check(n_eta=8, n_xi=8, tol=1e-12):
    """Max deviation of each pointwise identity behind the certificate."""
    quadrature = hopf_quadrature(n_eta, n_xi)
    g = MetricField.euclidean(quadrature)
    alpha, beta = hopf_fields()
    a, b = alpha.sample(quadrature), beta.sample(quadrature)
    h = crossing_direction(alpha, beta, quadrature)
    na, nb, ab = norm_sq(a, g), norm_sq(b, g), inner_g(a, b, g)
    checks = {
        'norm_alpha': np.abs(na - 1.0),
        'norm_beta': np.abs(nb - 1.0),
        'orthogonal': np.abs(ab),
        'h_alpha_alpha': np.abs(tensor_on(h, a, a, g) - (na ** 2 - ab ** 2)),
        'h_beta_beta': np.abs(tensor_on(h, b, b, g) - (ab ** 2 - nb ** 2)),
        'trace': np.abs(trace_g(h, g) - (na - nb)),
        'integrand_alpha': np.abs(tensor_on(h, a, a, g) - 0.5 * trace_g(h, g) * na - 1.0),
    }
    report = {name: float(dev.max()) for name, dev in checks.items()}
    report['l2_alpha_beta'] = abs(l2_inner(a, b, g))
    volume_error = abs(integrate(np.ones(len(quadrature)), g) - VOLUME)
    report['passed'] = max(report.values()) <= tol and volume_error <= 1e-10
    report['volume_error'] = volume_error
    if not report['passed']:
        logger.warning('S3 pointwise identities exceed %.1e: %s', tol, report)
    return report
