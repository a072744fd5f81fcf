import io

import numpy as np
from django.test import SimpleTestCase, tag
from numpy.testing import assert_allclose, assert_array_equal

from . import sphere3
from .dec_mesh import (
    assemble_helicity,
    assemble_mass_1forms,
    assemble_scalar,
    build_mesh,
    export_coo,
    incidence_d0,
    incidence_d1,
    mass_derivative,
    quadrature_points,
)
from .exceptions import GridMismatchError, MeshError, MetricNotPositiveDefinite
from .metric_core import (
    MetricField,
    MetricPath,
    OneFormField,
    Quadrature,
    SymTensorField,
    check_positive_definite,
    inner_g,
    integrate,
    metric_from_dict,
    metric_to_dict,
    norm_sq,
    path_derivative,
    path_eval,
    random_metric,
    sym_product,
    trace_g,
)

BOX_VOLUME = (2 * np.pi) ** 3


class MetricCoreTests(SimpleTestCase):

    def setUp(self):
        self.quad = Quadrature.uniform_box(4)

    def test_constant_metric_volume(self):
        g = MetricField.constant(np.diag([1.0, 4.0, 9.0]), self.quad)
        self.assertAlmostEqual(g.volume, 6.0 * BOX_VOLUME, places=9)
        self.assertTrue(g.is_constant())

    def test_pointwise_algebra(self):
        g = MetricField.constant(np.diag([1.0, 4.0, 9.0]), self.quad)
        u = OneFormField.constant([1.0, 2.0, 3.0], self.quad)
        assert_allclose(norm_sq(u, g), 3.0)
        assert_allclose(trace_g(g.as_tensor(), g), 3.0)
        h = sym_product(u, u)
        assert_allclose(h.values[0], np.outer([1, 2, 3], [1, 2, 3]))
        assert_allclose(integrate(np.ones(len(self.quad)), g), g.volume)

    def test_positive_definite_failure_names_sample(self):
        values = np.broadcast_to(np.eye(3), (5, 3, 3)).copy()
        values[2] = np.diag([1.0, 1.0, -1.0])
        with self.assertRaises(MetricNotPositiveDefinite) as ctx:
            check_positive_definite(values)
        self.assertEqual(ctx.exception.location, 2)
        self.assertEqual(ctx.exception.code, 'metric_not_positive_definite')

    def test_asymmetric_metric_rejected(self):
        values = np.broadcast_to(np.eye(3), (len(self.quad), 3, 3)).copy()
        values[:, 0, 1] = 0.1
        with self.assertRaises(ValueError):
            MetricField(values, self.quad)

    def test_fields_on_different_grids(self):
        u = OneFormField.constant([1.0, 0.0, 0.0], self.quad)
        v = OneFormField.constant([1.0, 0.0, 0.0], Quadrature.uniform_box(3))
        with self.assertRaises(GridMismatchError):
            sym_product(u, v)

    def test_random_metric_is_seeded(self):
        a = random_metric(self.quad, seed=11, amplitude=0.3)
        b = random_metric(self.quad, seed=11, amplitude=0.3)
        c = random_metric(self.quad, seed=12, amplitude=0.3)
        assert_array_equal(a.values, b.values)
        self.assertFalse(np.array_equal(a.values, c.values))
        self.assertFalse(a.is_constant())
        with self.assertRaises(ValueError):
            random_metric(self.quad, seed=11, amplitude=1.0)

    def test_sqrt_path_is_conformal(self):
        g0 = MetricField.euclidean(self.quad)
        path = MetricPath(g0, g0.scaled(4.0), 'sqrt')
        assert_allclose(path_eval(path, 0.5).values[0], 2.25 * np.eye(3))
        assert_allclose(path_derivative(path, 0.5).values[0], 3.0 * np.eye(3))

    def test_linear_path_derivative(self):
        g0 = MetricField.euclidean(self.quad)
        g1 = MetricField.constant(np.diag([1.0, 2.0, 3.0]), self.quad)
        path = MetricPath(g0, g1)
        assert_allclose(path_derivative(path, 0.3).values[0], np.diag([0.0, 1.0, 2.0]))
        with self.assertRaises(ValueError):
            path_eval(path, 1.5)

    def test_path_leaving_the_cone(self):
        g0 = MetricField.euclidean(self.quad)
        h = SymTensorField.constant(-3.0 * np.eye(3), self.quad)
        path = MetricPath(g0, g0, 'linear', ((h, 'bump'),))
        with self.assertRaises(MetricNotPositiveDefinite) as ctx:
            path_eval(path, 0.5)
        self.assertEqual(ctx.exception.details['t'], 0.5)

    def test_metric_json_layout(self):
        g = random_metric(self.quad, seed=3)
        data = metric_to_dict(g)
        self.assertEqual(data['domain']['kind'], 'torus')
        self.assertEqual(len(data['components'][0]), 6)
        assert_allclose(metric_from_dict(data, self.quad).values, g.values)

    def test_metric_json_sample_count(self):
        data = {'components': [[1, 0, 0, 1, 0, 1]] * 7}
        with self.assertRaises(GridMismatchError):
            metric_from_dict(data, self.quad)

    def test_metric_json_domain(self):
        data = metric_to_dict(random_metric(self.quad, seed=3))
        for domain in ({'kind': 's3', 'chart': 'hopf'}, {'kind': 'torus', 'lengths': [1.0, 1.0, 1.0]}):
            with self.assertRaises(GridMismatchError) as ctx:
                metric_from_dict({**data, 'domain': domain}, self.quad)
            self.assertIn('expected', ctx.exception.details)


class PeriodicMeshTests(SimpleTestCase):

    def setUp(self):
        self.mesh = build_mesh(3)

    def test_counts_and_euler_characteristic(self):
        mesh = self.mesh
        self.assertEqual((mesh.num_vertices, mesh.num_edges, mesh.num_faces, mesh.num_tets),
                         (27, 189, 324, 162))
        self.assertEqual(mesh.euler_characteristic(), 0)

    def test_every_face_bounds_two_tets(self):
        assert_array_equal(self.mesh.face_tet_counts(), 2)
        self.assertTrue(np.all(self.mesh.edge_tet_counts() > 0))

    def test_incidence_composes_to_zero(self):
        product = incidence_d1(self.mesh) @ incidence_d0(self.mesh)
        self.assertEqual(abs(product).sum(), 0)

    def test_rejects_coarse_resolution(self):
        with self.assertRaises(MeshError):
            build_mesh(1)

    def test_whitney_reproduces_constant_forms(self):
        cochain = self.mesh.interpolate_one_form(lambda x: np.tile([1.0, 2.0, 3.0], (len(x), 1)))
        u = self.mesh.evaluate_one_form(cochain)
        assert_allclose(u.values, np.tile([1.0, 2.0, 3.0], (len(u.values), 1)), atol=1e-12)

    def test_helicity_annihilates_gradients(self):
        B = assemble_helicity(self.mesh)
        f = np.random.default_rng(0).standard_normal(self.mesh.num_vertices)
        assert_allclose(abs(B - B.T).max(), 0.0)
        assert_allclose(B @ self.mesh.gradient_cochain(f), 0.0, atol=1e-10)

    def test_mass_of_harmonic_cochain(self):
        quad = quadrature_points(self.mesh)
        dx = self.mesh.harmonic_cochains()[0]
        M = assemble_mass_1forms(self.mesh, MetricField.euclidean(quad))
        assert_allclose(dx @ (M @ dx), BOX_VOLUME, rtol=1e-12)
        M = assemble_mass_1forms(self.mesh, MetricField.constant(np.diag([1.0, 4.0, 9.0]), quad))
        assert_allclose(dx @ (M @ dx), 6.0 * BOX_VOLUME, rtol=1e-12)

    def test_scalar_matrices(self):
        g = random_metric(self.mesh.quadrature, seed=5, amplitude=0.2)
        K, M0 = assemble_scalar(self.mesh, g)
        ones = np.ones(self.mesh.num_vertices)
        assert_allclose(K @ ones, 0.0, atol=1e-10)
        assert_allclose(ones @ (M0 @ ones), g.volume, rtol=1e-12)

    def test_stiffness_is_gradient_mass(self):
        g = random_metric(self.mesh.quadrature, seed=5, amplitude=0.2)
        K, _ = assemble_scalar(self.mesh, g)
        M = assemble_mass_1forms(self.mesh, g)
        d0 = self.mesh.d0.astype(float)
        assert_allclose((d0.T @ M @ d0).toarray(), K.toarray(), atol=1e-10)

    def test_mass_derivative_matches_finite_difference(self):
        quad = self.mesh.quadrature
        g = random_metric(quad, seed=9, amplitude=0.2)
        H = np.array([[0.3, 0.1, 0.0], [0.1, -0.2, 0.05], [0.0, 0.05, 0.1]])
        h = SymTensorField.constant(H, quad)
        step = 1e-5
        plus = assemble_mass_1forms(self.mesh, MetricField(g.values + step * h.values, quad))
        minus = assemble_mass_1forms(self.mesh, MetricField(g.values - step * h.values, quad))
        fd = ((plus - minus) / (2 * step)).toarray()
        dM = mass_derivative(self.mesh, g, h).toarray()
        self.assertLess(np.max(np.abs(dM - fd)), 1e-6 * np.max(np.abs(dM)))

    def test_assembly_independent_of_threads(self):
        g = random_metric(self.mesh.quadrature, seed=2)
        serial = assemble_mass_1forms(self.mesh, g, threads=1).toarray()
        parallel = assemble_mass_1forms(self.mesh, g, threads=3).toarray()
        assert_array_equal(serial, parallel)

    def test_metric_on_wrong_grid(self):
        g = MetricField.euclidean(Quadrature.uniform_box(3))
        with self.assertRaises(GridMismatchError):
            assemble_mass_1forms(self.mesh, g)

    def test_export_coo(self):
        M = assemble_mass_1forms(self.mesh, MetricField.euclidean(self.mesh.quadrature))
        buffer = io.StringIO()
        nnz = export_coo(M, buffer)
        lines = buffer.getvalue().splitlines()
        self.assertEqual(lines[0], f'189 189 {nnz}')
        self.assertEqual(len(lines), nnz + 1)


class Sphere3Tests(SimpleTestCase):

    def test_quadrature_volume(self):
        quad = sphere3.hopf_quadrature(8, 8)
        assert_allclose(quad.weights.sum(), sphere3.VOLUME, rtol=1e-12)

    def test_hopf_fields_are_eigenfields(self):
        quad = sphere3.hopf_quadrature()
        alpha, beta = sphere3.hopf_fields()
        self.assertLess(sphere3.eigen_residual(alpha, 2.0, quad), 1e-12)
        self.assertLess(sphere3.eigen_residual(beta, -2.0, quad), 1e-12)

    def test_constant_frame_fields_have_eigenvalue_two(self):
        quad = sphere3.hopf_quadrature()
        theta2 = sphere3.InvariantFrameField([[0, 0, 0], [1, 0, 0], [0, 0, 0]])
        self.assertLess(sphere3.eigen_residual(theta2, 2.0, quad), 1e-12)

    def test_counter_rotating_field(self):
        quad = sphere3.hopf_quadrature()
        field = sphere3.InvariantFrameField([[0, 0, 0], [0, 1, 0], [0, 0, -1]])
        self.assertLess(sphere3.eigen_residual(field, 6.0, quad), 1e-12)

    def test_crossing_rates_equal_twice_the_volume(self):
        certificate = sphere3.crossing_derivatives()
        assert_allclose(certificate.dmu, 4 * np.pi ** 2, rtol=1e-10)
        assert_allclose(certificate.dnu, 4 * np.pi ** 2, rtol=1e-10)
        assert_allclose(certificate.volume, 2 * np.pi ** 2, rtol=1e-12)
        self.assertFalse(certificate.flagged)
        self.assertEqual(certificate.as_dict()['vol'], certificate.volume)

    def test_reversed_direction_flips_rates(self):
        certificate = sphere3.crossing_derivatives(sign=-1.0)
        assert_allclose(certificate.dmu, -4 * np.pi ** 2, rtol=1e-10)
        assert_allclose(certificate.dnu, -4 * np.pi ** 2, rtol=1e-10)

    def test_pointwise_identities(self):
        report = sphere3.pointwise_identities_check()
        self.assertTrue(report['passed'])
        self.assertLess(report['l2_alpha_beta'], 1e-12)
        self.assertLess(report['integrand_alpha'], 1e-12)

    @tag('slow')
    def test_fine_grid_agrees(self):
        coarse = sphere3.crossing_derivatives(8, 8)
        fine = sphere3.crossing_derivatives(24, 24)
        assert_allclose(fine.dmu, coarse.dmu, rtol=1e-12)
