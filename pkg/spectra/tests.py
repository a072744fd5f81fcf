import numpy as np
from django.test import SimpleTestCase, tag
from numpy.testing import assert_allclose, assert_array_equal
from scipy import linalg as dense_linalg

from geometry.conf import toolkit_setting
from geometry.dec_mesh import assemble_mass_1forms, build_mesh, mass_derivative
from geometry.exceptions import (
    ContourError,
    DegenerateClusterError,
    EmptyWindowError,
    NeighbourhoodError,
    OrthonormalityError,
    SingularResolventError,
)
from geometry.metric_core import (
    MetricField,
    MetricPath,
    SymTensorField,
    random_metric,
    random_spd,
    sym_product,
)

from . import fourier_oracle, path_tracker, perturbation, teytel_abstract
from .beltrami_solver import (
    DiscreteOperators,
    closed_spectrum,
    cluster_values,
    coclosed_spectrum,
    helicity_of,
    induced_exact_form,
    kernel_cutoff,
    kernel_dimension,
)

BOX_VOLUME = (2 * np.pi) ** 3
H_DIRECTION = np.array([[0.4, 0.1, -0.2], [0.1, -0.3, 0.05], [-0.2, 0.05, 0.2]])


def _levels(G, K):
    return [(round(lv.value, 9), lv.multiplicity) for lv in fourier_oracle.oracle_spectrum(G, K)]


def _dense_window(values, count):
    """The ``count`` smallest ``|values|`` completed to whole clusters, sorted."""
    values = np.asarray(values)
    cut = np.sort(np.abs(values))[count - 1]
    bound = cut + toolkit_setting('GAP_TOL') * max(1.0, cut)
    return np.sort(values[np.abs(values) <= bound])


class FourierOracleTests(SimpleTestCase):

    def test_identity_spectrum(self):
        r2, r3 = round(np.sqrt(2), 9), round(np.sqrt(3), 9)
        self.assertEqual(_levels(np.eye(3), 1), [
            (-1.0, 6), (1.0, 6), (-r2, 12), (r2, 12), (-r3, 8), (r3, 8),
        ])

    def test_identity_closed_spectrum(self):
        levels = fourier_oracle.oracle_closed_spectrum(np.eye(3), 1)
        self.assertEqual([(round(lv.value, 9), lv.multiplicity) for lv in levels],
                         [(1.0, 6), (2.0, 12), (3.0, 8)])

    def test_anisotropic_block(self):
        G = np.diag([1.0, 1.0, 4.0])
        self.assertAlmostEqual(fourier_oracle.block_eigenvalue(G, (0, 0, 1), 1), 0.5, places=12)
        self.assertAlmostEqual(fourier_oracle.block_eigenvalue(G, (0, 0, 1), -1), -0.5, places=12)
        self.assertAlmostEqual(fourier_oracle.block_eigenvalue(G, (1, 0, 0), 1), 1.0, places=12)

    def test_block_eigenpairs_solve_the_block(self):
        G = random_spd(np.random.default_rng(3), 0.3)
        k = (1, -1, 1)
        expected = np.sqrt(np.asarray(k) @ np.linalg.inv(G) @ np.asarray(k))
        pairs = fourier_oracle.block_eigenpairs(G, k)
        assert_allclose(sorted(lam for lam, _ in pairs), [-expected, expected], rtol=1e-12)
        for lam, a in pairs:
            assert_allclose(fourier_oracle.block_operator(G, k) @ a, lam * a, atol=1e-12)

    def test_truncation_is_self_adjoint(self):
        G = random_spd(np.random.default_rng(4), 0.3)
        self.assertLess(fourier_oracle.FourierTruncation(G, 1).self_adjointness_error(), 1e-12)

    def test_level_modes_are_orthonormal(self):
        quad = fourier_oracle.uniform_quadrature(1)
        g = MetricField.euclidean(quad)
        fields = fourier_oracle.oracle_cluster(np.eye(3), 1.0, 1, quad)
        self.assertEqual(len(fields), 6)
        assert_allclose(perturbation.gram_matrix(fields, g), np.eye(6), atol=1e-12)

    def test_unknown_level(self):
        with self.assertRaises(ValueError):
            fourier_oracle.oracle_cluster(np.eye(3), 1.2345, 1, fourier_oracle.uniform_quadrature(1))

    def test_coclosed_rate_matches_finite_difference(self):
        G = random_spd(np.random.default_rng(3), 0.3)
        row = fourier_oracle.oracle_derivative(G, 1, (1, 0, 0), 1, H_DIRECTION)
        self.assertLess(row['rel_error'], 1e-6)
        self.assertFalse(row['degenerate'])
        self.assertEqual(row['multiplicity'], 2)

    def test_degenerate_level_reports_cluster_rates(self):
        row = fourier_oracle.oracle_derivative(np.eye(3), 1, (1, 0, 0), 1, H_DIRECTION)
        self.assertTrue(row['degenerate'])
        self.assertEqual(len(row['cluster_rates']), 6)
        self.assertLess(row['rel_error'], 1e-6)

    def test_closed_rate(self):
        G = random_spd(np.random.default_rng(6), 0.3)
        k = np.array([1, 2, 0])
        Ginv = np.linalg.inv(G)
        expected = -(Ginv @ k) @ H_DIRECTION @ (Ginv @ k)
        assert_allclose(fourier_oracle.closed_rate(G, tuple(k), H_DIRECTION), expected, rtol=1e-10)

    def test_conformal_scaling(self):
        G = random_spd(np.random.default_rng(9), 0.3)

        def levels(metric):
            coclosed = sorted(fourier_oracle.oracle_spectrum(metric, 1), key=lambda lv: lv.value)
            return coclosed, fourier_oracle.oracle_closed_spectrum(metric, 1)

        base_coclosed, base_closed = levels(G)
        for c in (0.5, 2.0, 3.0):
            coclosed, closed = levels(c ** 2 * G)
            assert_allclose([lv.value * c for lv in coclosed], [lv.value for lv in base_coclosed], rtol=1e-12)
            assert_allclose([lv.value * c ** 2 for lv in closed], [lv.value for lv in base_closed], rtol=1e-12)
            self.assertEqual([lv.multiplicity for lv in coclosed], [lv.multiplicity for lv in base_coclosed])
            self.assertEqual([lv.multiplicity for lv in closed], [lv.multiplicity for lv in base_closed])

    def test_oracle_cochain_is_the_de_rham_map(self):
        mesh = build_mesh(3)
        mode = fourier_oracle.mode_for(np.eye(3), (1, 0, 0), 1)
        exact = fourier_oracle.oracle_cochain(mesh, np.eye(3), (1, 0, 0), 1)
        assert_allclose(exact, mesh.interpolate_one_form(mode.evaluate, order=8), atol=1e-12)


class BeltramiSolverTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.mesh = build_mesh(3)
        cls.g = MetricField.euclidean(cls.mesh.quadrature)
        cls.pairs = coclosed_spectrum(cls.mesh, cls.g, count=8, seed=1)
        cls.closed = closed_spectrum(cls.mesh, cls.g, 6, seed=1)

    def test_window_and_order(self):
        values = [p.value for p in self.pairs]
        self.assertGreaterEqual(len(values), 8)
        self.assertEqual(values, sorted(values))
        self.assertTrue(any(v > 0 for v in values) and any(v < 0 for v in values))

    def test_residuals_and_orthonormality(self):
        M = assemble_mass_1forms(self.mesh, self.g)
        V = np.stack([p.vector for p in self.pairs], axis=1)
        assert_allclose(V.T @ (M @ V), np.eye(V.shape[1]), atol=1e-8)
        for pair in self.pairs:
            self.assertLess(pair.residual, 1e-6)
            assert_allclose(helicity_of(pair.cochain), pair.value, rtol=1e-6)

    def test_pairs_are_coclosed(self):
        M = assemble_mass_1forms(self.mesh, self.g)
        d0 = self.mesh.d0.astype(float)
        for pair in self.pairs:
            self.assertLess(np.linalg.norm(d0.T @ (M @ pair.vector)), 1e-6)

    def test_records(self):
        record = self.pairs[0].as_record()
        self.assertEqual(set(record), {'lambda', 'sign', 'residual', 'cluster_id', 'seed'})
        self.assertEqual(record['seed'], 1)

    def test_same_seed_same_spectrum(self):
        again = coclosed_spectrum(self.mesh, self.g, count=8, seed=1)
        assert_array_equal([p.value for p in again], [p.value for p in self.pairs])

    def test_max_abs_window(self):
        bound = max(abs(p.value) for p in self.pairs)
        pairs = coclosed_spectrum(self.mesh, self.g, max_abs=bound, seed=1)
        self.assertTrue(pairs)
        self.assertTrue(all(abs(p.value) <= bound for p in pairs))

    def test_window_arguments(self):
        with self.assertRaises(ValueError):
            coclosed_spectrum(self.mesh, self.g, count=4, max_abs=1.0)
        with self.assertRaises(ValueError):
            coclosed_spectrum(self.mesh, self.g)

    def test_empty_window(self):
        with self.assertRaises(EmptyWindowError):
            coclosed_spectrum(self.mesh, self.g, max_abs=1e-3, seed=1)

    def test_closed_spectrum(self):
        values = [p.value for p in self.closed]
        self.assertGreaterEqual(len(values), 6)
        self.assertEqual(values, sorted(values))
        self.assertTrue(all(v > 0 for v in values))
        M = assemble_mass_1forms(self.mesh, self.g)
        for pair in self.closed:
            exact = induced_exact_form(pair).values
            assert_allclose(exact @ (M @ exact), pair.value, rtol=1e-8)

    def test_degenerate_clusters_come_back_whole(self):
        ops = DiscreteOperators.assemble(self.mesh, self.g)
        coclosed = dense_linalg.eigh(ops.helicity.toarray(), ops.mass.toarray(), eigvals_only=True)
        coclosed = coclosed[np.abs(coclosed) > kernel_cutoff(ops, 1)]
        assert_allclose([p.value for p in self.pairs], _dense_window(coclosed, 8), atol=1e-8)
        closed = dense_linalg.eigh(ops.stiffness.toarray(), ops.scalar_mass.toarray(), eigvals_only=True)
        closed = closed[closed > toolkit_setting('KERNEL_CUTOFF_FLOOR')]
        assert_allclose([p.value for p in self.closed], _dense_window(closed, 6), atol=1e-8)

    def test_conformal_scaling(self):
        for c in (0.5, 2.0, 3.0):
            g = MetricField.constant(c ** 2 * np.eye(3), self.mesh.quadrature)
            pairs = coclosed_spectrum(self.mesh, g, count=8, seed=1)
            assert_allclose([p.value * c for p in pairs], [p.value for p in self.pairs], rtol=1e-7)
            closed = closed_spectrum(self.mesh, g, 6, seed=1)
            assert_allclose([p.value * c ** 2 for p in closed], [p.value for p in self.closed], rtol=1e-7)

    @tag('slow')
    def test_convergence_to_the_oracle(self):
        errors = []
        for n in (4, 8):
            mesh = build_mesh(n)
            pairs = coclosed_spectrum(mesh, MetricField.euclidean(mesh.quadrature), count=6, seed=1)
            positive = min(p.value for p in pairs if p.value > 0)
            errors.append(abs(positive - 1.0))
        self.assertLess(errors[1], errors[0])
        self.assertLess(errors[1], 0.06)

    def test_cluster_values(self):
        ids, sizes, borderline = cluster_values([1.0, 1.0 + 1e-12, 2.0, 2.0 + 1e-5])
        assert_array_equal(ids, [0, 0, 1, 2])
        assert_array_equal(sizes, [2, 2, 1, 1])
        assert_array_equal(borderline, [False, False, True, True])

    def test_kernel_contains_closed_forms(self):
        mesh = build_mesh(2)
        dim = kernel_dimension(mesh, MetricField.euclidean(mesh.quadrature))
        self.assertGreaterEqual(dim, mesh.num_vertices + 2)


class PerturbationTests(SimpleTestCase):

    def setUp(self):
        self.quad = fourier_oracle.uniform_quadrature(1)
        self.g = MetricField.euclidean(self.quad)
        level = next(lv for lv in fourier_oracle.oracle_spectrum(np.eye(3), 1) if lv.value > 0)
        self.lam = level.value
        self.fields = [mode.field(self.quad) for mode in level.modes]
        self.h = SymTensorField.constant(H_DIRECTION, self.quad)

    def test_simple_formula_refuses_clusters(self):
        with self.assertRaises(DegenerateClusterError):
            perturbation.beltrami_eigenvalue_derivative(self.g, self.lam, self.fields[0], self.h, multiplicity=6)

    def test_cluster_rates_match_block_rates(self):
        rates = perturbation.degenerate_directional_derivatives(self.g, self.lam, self.fields, self.h)
        row = fourier_oracle.oracle_derivative(np.eye(3), 1, (1, 0, 0), 1, H_DIRECTION)
        assert_allclose(rates, row['cluster_rates'], atol=1e-10)

    def test_orthonormality_is_checked(self):
        scaled = [f * 2.0 for f in self.fields[:2]]
        with self.assertRaises(OrthonormalityError):
            perturbation.aprime_matrix(self.g, self.lam, scaled, self.h)

    def test_closed_form_entries(self):
        G = random_spd(np.random.default_rng(5), 0.3)
        g = MetricField.constant(G, self.quad)
        level = next(lv for lv in fourier_oracle.oracle_spectrum(G, 1) if lv.value > 0)
        basis = [mode.field(self.quad) for mode in level.modes[:2]]
        direct = perturbation.aprime_matrix(g, level.value, basis, sym_product(basis[0], basis[1]))
        closed = perturbation.aprime_closed_form(g, level.value, basis, 0, 1)
        assert_allclose(direct.matrix, closed, atol=1e-12 * np.max(np.abs(closed)))
        self.assertLess(direct.asymmetry, 1e-12)

    def test_span_test_on_a_plane_wave_pair(self):
        v1, v2 = self.fields[:2]
        report = perturbation.sah2_span_test(self.g, self.lam, v1, v2)
        self.assertTrue(report.spanning)
        self.assertEqual(report.witness_a, -2.0)
        expected = -self.lam ** 2 / (2 * BOX_VOLUME ** 2)
        for a, det, relative in report.determinants:
            assert_allclose(det, expected, rtol=1e-8)
            assert_allclose(relative, 1 / np.sqrt(1 + a ** 2), rtol=1e-8)
        assert_allclose(report.parallel_defect, -1 / BOX_VOLUME, rtol=1e-10)

    def test_span_test_on_a_parallel_pair(self):
        v1 = self.fields[0]
        report = perturbation.sah2_span_test(self.g, self.lam, v1, v1 * 0.7)
        self.assertFalse(report.spanning)
        self.assertIsNone(report.witness_a)
        self.assertLess(abs(report.parallel_defect), 1e-12)
        for _, _, relative in report.determinants:
            self.assertLess(relative, 1e-10)

    def test_rates_along_the_metric_itself(self):
        G = random_spd(np.random.default_rng(7), 0.3)
        k = (1, 0, 1)
        quad = fourier_oracle.uniform_quadrature(1)
        g = MetricField.constant(G, quad)
        for sign in (1, -1):
            mode = fourier_oracle.mode_for(G, k, sign)
            assert_allclose(fourier_oracle.coclosed_rate(G, k, sign, G), -mode.value / 2, rtol=1e-10)
            lam_sq_rate = perturbation.coclosed_sq_derivative(
                g, mode.value ** 2, mode.field(quad), SymTensorField.constant(G, quad))
            assert_allclose(lam_sq_rate, -mode.value ** 2, rtol=1e-10)
        rho = np.asarray(k) @ np.linalg.inv(G) @ np.asarray(k)
        assert_allclose(fourier_oracle.closed_rate(G, k, G), -rho, rtol=1e-10)

    def test_squared_rate_is_the_chain_rule(self):
        G = random_spd(np.random.default_rng(5), 0.3)
        quad = fourier_oracle.uniform_quadrature(1)
        g = MetricField.constant(G, quad)
        mode = fourier_oracle.mode_for(G, (1, -1, 0), 1)
        u = mode.field(quad)
        direct = perturbation.beltrami_eigenvalue_derivative(g, mode.value, u, self.h)
        squared = perturbation.coclosed_sq_derivative(g, mode.value ** 2, u, self.h)
        assert_allclose(squared, 2 * mode.value * direct, rtol=1e-12)

    def test_rate_is_linear_in_the_direction(self):
        u = self.fields[0]
        other = SymTensorField.constant(np.diag([1.0, -0.5, 0.25]), self.quad)

        def rate(h):
            return perturbation.beltrami_eigenvalue_derivative(self.g, self.lam, u, h)

        assert_allclose(rate(self.h + 2.5 * other), rate(self.h) + 2.5 * rate(other), atol=1e-12)
        assert_allclose(rate(-self.h), -rate(self.h), atol=1e-15)

    def test_fd_row(self):
        row = perturbation.fd_row(1.0, 'x', 2.0, 2.002)
        assert_allclose(row['rel_error'], 0.002 / 2.002)
        self.assertAlmostEqual(perturbation.central_difference(lambda s: s ** 2 + 3 * s, 1e-3), 3.0)

    @tag('slow')
    def test_mesh_rates(self):
        mesh = build_mesh(3)
        quad = mesh.quadrature
        g = random_metric(quad, seed=8, amplitude=0.2)
        h = SymTensorField.constant(H_DIRECTION, quad)
        step = 1e-4
        shifted = [MetricField(g.values + s * h.values, quad) for s in (step, -step)]
        pairs = [p for p in coclosed_spectrum(mesh, g, count=4, seed=1) if p.cluster_size == 1]
        if not pairs:
            self.skipTest('no simple coclosed eigenvalue in the window')
        pair = pairs[0]
        formula = perturbation.beltrami_rate_on_mesh(g, pair, h)
        dM = mass_derivative(mesh, g, h)
        assert_allclose(formula, -pair.value * (pair.vector @ (dM @ pair.vector)), rtol=1e-9)

        def nearest(metric):
            values = [p.value for p in coclosed_spectrum(mesh, metric, count=4, seed=1)]
            return min(values, key=lambda v: abs(v - pair.value))

        fd = (nearest(shifted[0]) - nearest(shifted[1])) / (2 * step)
        self.assertLess(perturbation.fd_row(pair.value, 'mesh', formula, fd)['rel_error'], 1e-4)

    @tag('slow')
    def test_mesh_closed_rates(self):
        mesh = build_mesh(3)
        quad = mesh.quadrature
        g = random_metric(quad, seed=8, amplitude=0.2)
        h = SymTensorField.constant(H_DIRECTION, quad)
        ops = DiscreteOperators.assemble(mesh, g)
        pairs = [p for p in closed_spectrum(mesh, g, 4, seed=1, ops=ops) if p.cluster_size == 1]
        if not pairs:
            self.skipTest('no simple closed eigenvalue in the window')
        pair = pairs[0]
        rates = perturbation.closed_rates_on_mesh(ops, pair, h)
        step = 1e-4

        def nearest(sign):
            metric = MetricField(g.values + sign * step * h.values, quad)
            return min((p.value for p in closed_spectrum(mesh, metric, 4, seed=1)),
                       key=lambda v: abs(v - pair.value))

        fd = (nearest(1) - nearest(-1)) / (2 * step)
        self.assertLess(perturbation.fd_row(pair.value, 'closed', rates['by_parts'], fd)['rel_error'], 1e-4)
        self.assertTrue(np.isfinite(rates['literal']))


class OperatorFamilyTests(SimpleTestCase):

    def setUp(self):
        self.q0 = np.zeros(2)

    def test_presets(self):
        for name in teytel_abstract.PRESETS:
            family = teytel_abstract.preset(name)
            self.assertEqual(family.param_dim, 2)
            self.assertLess(family.self_adjointness_error(np.array([0.2, -0.1])), 1e-12)
        with self.assertRaises(ValueError):
            teytel_abstract.preset('nope')

    def test_resolvent(self):
        family = teytel_abstract.preset('diag')
        assert_allclose(teytel_abstract.resolvent(family, self.q0, 2.0), np.diag([1.0, -1.0]))
        with self.assertRaises(SingularResolventError):
            teytel_abstract.resolvent(family, self.q0, 1.0)

    def test_projector(self):
        family = teytel_abstract.preset('diag')
        projector = teytel_abstract.spectral_projector(family, self.q0, 1.0)
        assert_allclose(projector.matrix, np.diag([1.0, 0.0]), atol=1e-12)
        self.assertEqual(projector.rank, 1)
        self.assertLess(projector.idempotency_error, 1e-12)
        self.assertLess(projector.commutator_error, 1e-12)

    def test_projector_with_threads(self):
        family = teytel_abstract.preset('conic-metric')
        q = np.array([0.3, 0.2])
        center = family.eigen(q)[0][0]
        serial = teytel_abstract.spectral_projector(family, q, center)
        parallel = teytel_abstract.spectral_projector(family, q, center, threads=3)
        assert_array_equal(serial.matrix, parallel.matrix)

    def test_contour_too_close(self):
        family = teytel_abstract.preset('diag')
        with self.assertRaises(ContourError):
            teytel_abstract.spectral_projector(family, self.q0, 1.0, radius=2.0)

    def test_contour_convergence(self):
        family = teytel_abstract.preset('diag')
        errors = teytel_abstract.contour_convergence(family, self.q0, 1.0)
        self.assertEqual([n for n, _ in errors], [4, 8, 16, 32, 64])
        self.assertGreater(errors[0][1], errors[2][1])
        self.assertLess(errors[-1][1], 1e-12)

    def test_projector_derivative(self):
        family = teytel_abstract.preset('conic-metric')
        q, h = np.array([0.3, 0.2]), np.array([0.5, -1.0])
        center = family.eigen(q)[0][0]
        radius = teytel_abstract.default_radius(family.eigen(q)[0], center)
        dP = teytel_abstract.projector_derivative(family, q, center, radius, h)
        fd = perturbation.central_difference(
            lambda s: teytel_abstract.exact_projector(family, q + s * h, center, radius), 1e-5)
        assert_allclose(dP, fd, atol=1e-7)

    def test_defining_function_on_diagonal_family(self):
        family = teytel_abstract.preset('diag')
        f = teytel_abstract.defining_function(family, self.q0, np.array([0.1, 0.0]), 1.0)
        assert_allclose(f.mu, 2.5)
        assert_allclose(f.matrix, [[1 / 1.4]], rtol=1e-12)

    def test_defining_function_at_a_double_eigenvalue(self):
        family = teytel_abstract.preset('conic')
        f0 = teytel_abstract.defining_function(family, self.q0, self.q0, 1.0)
        assert_allclose(f0.matrix, np.eye(2) / 1.5, atol=1e-12)
        q = np.array([0.1, 0.05])
        f = teytel_abstract.defining_function(family, self.q0, q, 1.0)
        assert_allclose(f.eigenvalues(), np.sort(1 / (f.mu - family.eigen(q)[0])), rtol=1e-10)

    def test_defining_function_leaves_neighbourhood(self):
        family = teytel_abstract.preset('conic')
        q0 = np.array([0.5, 0.0])
        with self.assertRaises(NeighbourhoodError):
            teytel_abstract.defining_function(family, q0, np.array([-0.5, 0.0]), 0.5)

    def test_f_prime(self):
        family = teytel_abstract.preset('diag')
        basis = teytel_abstract.reference_basis(family, self.q0, 1.0, 1.0)[1]
        report = teytel_abstract.f_prime_entries(family, self.q0, np.array([1.0, 0.0]), basis, 1.0)
        assert_allclose(report.entries, [[1 / 2.25]], rtol=1e-12)
        self.assertLess(report.max_commutator, 1e-8)

    def test_f_prime_matches_finite_difference(self):
        family = teytel_abstract.preset('conic-metric')
        h = np.array([0.7, -0.4])
        basis = teytel_abstract.reference_basis(family, self.q0, 1.0, 1.0)[1]
        report = teytel_abstract.f_prime_entries(family, self.q0, h, basis, 1.0, 1.0)
        fd = perturbation.central_difference(
            lambda s: teytel_abstract.defining_function(family, self.q0, s * h, 1.0, 1.0).matrix, 1e-5)
        assert_allclose(report.entries, fd.T, atol=1e-7)
        self.assertLess(report.symmetry_error, 1e-10)
        self.assertLess(report.max_commutator, 1e-8)

    def test_basis_must_be_orthonormal(self):
        family = teytel_abstract.preset('diag')
        with self.assertRaises(OrthonormalityError):
            teytel_abstract.f_prime_entries(family, self.q0, np.array([1.0, 0.0]), 2 * np.eye(2)[:, :1], 1.0)

    def test_conic_degeneracy_shrinks_with_the_grid(self):
        family = teytel_abstract.preset('conic')
        coarse = teytel_abstract.codim2_slice_scan(family, (-1, 1), (-1, 1), 21)
        fine = teytel_abstract.codim2_slice_scan(family, (-1, 1), (-1, 1), 41)
        self.assertEqual(len(coarse.components), 1)
        self.assertEqual(len(fine.components), 1)
        assert_allclose(coarse.components[0].points.mean(axis=0), [0.0, 0.0], atol=1e-12)
        self.assertLess(fine.components[0].diameter, coarse.components[0].diameter)
        assert_allclose(coarse.components[0].diameter, 0.2 * np.sqrt(2), rtol=1e-9)

    def test_degeneracy_along_a_curve(self):
        family = teytel_abstract.preset('sah2-violating')
        scan = teytel_abstract.codim2_slice_scan(family, (-1, 1), (-1, 1), 21, threads=2)
        self.assertEqual(len(scan.components), 1)
        self.assertGreater(scan.components[0].diameter, 1.9)
        self.assertEqual(scan.as_dict()['components'][0]['size'], 63)


def _branch(bid, kind, color, times, values):
    return path_tracker.SpectralBranch(bid, kind, color, list(times), list(values), [1.0] * len(times))


class OrderAndCrossingTests(SimpleTestCase):

    def setUp(self):
        self.closed = _branch(0, 'closed', 'closed', [0.0, 1.0], [1.0, 3.0])
        self.plus = _branch(1, 'coclosed', 'coclosed+', [0.0, 1.0], [1.5, 1.5])

    def test_order_words(self):
        branches = [self.closed, self.plus]
        before = path_tracker.order_sequence(branches, 0.0)
        after = path_tracker.order_sequence(branches, 1.0)
        self.assertEqual((before.word, after.word), ('c+', '+c'))
        self.assertTrue(path_tracker.differs_by_transposition(before.word, after.word))
        self.assertFalse(path_tracker.differs_by_transposition('c+-', '+-c'))

    def test_ties_are_ambiguous(self):
        minus = _branch(2, 'coclosed', 'coclosed-', [0.0], [-1.0])
        sequence = path_tracker.order_sequence([self.plus, minus, self.closed], 0.0)
        self.assertTrue(sequence.ambiguous)
        self.assertEqual(sequence.word, 'c-+')

    def test_crossing_by_interpolation(self):
        events = path_tracker.detect_crossings([self.closed, self.plus])
        self.assertEqual(len(events), 1)
        self.assertAlmostEqual(events[0].t, 0.625)
        self.assertTrue(events[0].mixed_type)
        self.assertFalse(events[0].mixed_sign)

    def test_crossing_by_bisection(self):
        def refine(t, branch):
            return 1.0 + 2.0 * t if branch.id == 0 else 2.25

        event = path_tracker.detect_crossings([self.closed, self.plus], refine=refine)[0]
        self.assertAlmostEqual(event.t, 0.625, places=4)
        self.assertLess(event.gap, 1e-3)

    def test_identical_branches_never_cross(self):
        twin = _branch(3, 'coclosed', 'coclosed-', [0.0, 1.0], [-1.5, -1.5])
        events = path_tracker.detect_crossings([self.closed, self.plus, twin])
        self.assertNotIn((1, 3), [e.branch_ids for e in events])
        self.assertEqual(len(events), 2)

    def test_avoided_crossing(self):
        a = _branch(0, 'closed', 'closed', [0.0, 0.5, 1.0], [1.0, 1.99, 1.0])
        b = _branch(1, 'closed', 'closed', [0.0, 0.5, 1.0], [2.0, 2.0, 2.0])
        events = path_tracker.detect_crossings([a, b])
        self.assertEqual([(e.kind, e.t) for e in events], [('avoided', 0.5)])

    def test_sign_flip_is_recorded(self):
        branch = path_tracker.SpectralBranch(0, 'coclosed', 'coclosed+')
        branch.append(path_tracker.LevelSample(0.0, 1.0, 'coclosed', None), 1.0)
        branch.append(path_tracker.LevelSample(0.1, -1.0, 'coclosed', None), 0.9)
        self.assertTrue(branch.sign_flip)
        self.assertEqual([row['t'] for row in branch.rows()], [0.0, 0.1])

    def test_invariants_without_branches(self):
        result = path_tracker.TrackResult([], [0.0, 1.0], [], 0, {})
        invariants = path_tracker.check_invariants(result, [])
        self.assertIsNone(invariants['min_value'])
        self.assertTrue(invariants['positive'])
        self.assertEqual(invariants['word_violations'], [])


class TrackingTests(SimpleTestCase):

    def test_oracle_backend_track(self):
        path = path_tracker.constant_path(np.eye(3), np.diag([1.0, 1.0, 4.0]), 'sqrt')
        backend = path_tracker.OracleBackend(path, 1, 'closed')
        result = path_tracker.track(backend, np.linspace(0.0, 1.0, 5))
        self.assertEqual(len(result.branches), 13)
        self.assertTrue(all(len(b.times) == 5 for b in result.branches))
        self.assertEqual(result.unresolved, [])
        self.assertEqual(set(result.harmonic_ranks.values()), {3})

    def test_conformal_path_keeps_the_order(self):
        path = path_tracker.constant_path(np.eye(3), 4 * np.eye(3), 'sqrt')
        grid = np.linspace(0.0, 1.0, 5)
        result = path_tracker.track(path_tracker.OracleBackend(path, 1, 'both'), grid)
        words = {path_tracker.order_sequence(result.branches, t).word for t in grid}
        self.assertEqual(len(words), 1)
        self.assertEqual(path_tracker.detect_crossings(result.branches), [])
        for branch in result.branches:
            power = 1 if branch.kind == 'coclosed' else 2
            scaled = np.asarray(branch.values) * (1 + np.asarray(branch.times)) ** power
            assert_allclose(scaled, branch.values[0], rtol=1e-12)

    def test_closed_coclosed_crossing(self):
        result, report = path_tracker.closed_coclosed_experiment()
        stretched = next(b for b in result.branches if b.label == ('closed', (0, 0, 1), 0))
        fixed = next(b for b in result.branches if b.label == ('closed', (1, 0, 0), 0))
        assert_allclose(stretched.values, 1 / (1 + np.asarray(stretched.times)) ** 2, rtol=1e-10)
        assert_allclose(fixed.values, 1.0, rtol=1e-12)
        t_star = np.sqrt(2.0) - 1.0
        hits = [
            c for c in report['certificates']
            if [0, 0, 2] in c['labels'] and ([1, 1, 0] in c['labels'] or [1, -1, 0] in c['labels'])
        ]
        self.assertTrue(hits)
        moving_rows = []
        for certificate in hits:
            self.assertAlmostEqual(certificate['event']['t'], t_star, delta=1e-4)
            self.assertTrue(certificate['transversal'])
            # the (1, 1, 0) levels are constant along this path
            moving_rows += [row for label, row in zip(certificate['labels'], certificate['fd'])
                            if label == [0, 0, 2]]
        self.assertTrue(moving_rows)
        for row in moving_rows:
            self.assertLess(row['rel_error'], 1e-6)
        self.assertTrue(report['invariants']['positive'])
        self.assertTrue(report['invariants']['harmonic_rank_constant'])

    def test_branch_rate_check(self):
        path = path_tracker.constant_path(np.eye(3), np.diag([1.0, 1.0, 4.0]), 'sqrt')
        backend = path_tracker.OracleBackend(path, 2, 'closed')
        result = path_tracker.track(backend, np.linspace(0.0, 1.0, 11))
        branch = next(b for b in result.branches if b.label == ('closed', (0, 0, 2), 0))
        row = path_tracker.branch_rate_check(backend, branch, 5)
        self.assertLess(row['rel_error'], 1e-6)
        assert_allclose(row['derivative'], -8.0 / 1.5 ** 3, rtol=1e-8)

    @tag('slow')
    def test_mesh_backend_track(self):
        mesh = build_mesh(3)
        quad = mesh.quadrature
        path = MetricPath(MetricField.euclidean(quad), random_metric(quad, seed=4, amplitude=0.2))
        backend = path_tracker.DecBackend(mesh, path, 6, 'both', seed=1)
        result = path_tracker.track(backend, [0.0, 0.5, 1.0])
        events = path_tracker.detect_crossings(result.branches, refine=backend.refine)
        invariants = path_tracker.check_invariants(result, events)
        self.assertTrue(invariants['positive'])
        self.assertEqual(invariants['harmonic_ranks'], [3])
        self.assertTrue(result.rows())

    @tag('slow')
    def test_random_path(self):
        mesh = build_mesh(3)
        quad = mesh.quadrature
        path = MetricPath(random_metric(quad, seed=1, amplitude=0.2), random_metric(quad, seed=2, amplitude=0.2))
        backend = path_tracker.DecBackend(mesh, path, 4, 'both', seed=1)
        result = path_tracker.track(backend, [0.0, 0.5, 1.0])
        events = path_tracker.detect_crossings(result.branches, refine=backend.refine)
        invariants = path_tracker.check_invariants(result, events)
        self.assertTrue(invariants['positive'])
        self.assertEqual(invariants['harmonic_ranks'], [3])
        moved = [b for b in result.branches if len(b.values) > 1 and abs(b.values[-1] - b.values[0]) > 1e-6]
        self.assertTrue(moved)

    @tag('slow')
    def test_forced_crossing(self):
        result, report = path_tracker.forced_crossing_experiment(seed=20240917)
        self.assertTrue(all(rate > 0 for rate in report['rates']))
        self.assertTrue(report['found'])
        self.assertTrue(report['transposition'])
        self.assertTrue(report['invariants']['positive'])
        self.assertEqual(len(report['target_branches']), 2)
        self.assertTrue(any(e['kind'] == 'crossing' for e in report['events']))
        self.assertGreaterEqual(report['pairs_tried'], 1)
