import csv
import io
import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from geometry.metric_core import Quadrature, random_metric, random_spd

from .cli import run
from .execution import EXIT_FAILED, EXIT_INVALID, EXIT_OK, ExperimentEngine
from .serializers import (
    OracleConfigSerializer,
    PerturbConfigSerializer,
    SpectrumConfigSerializer,
    TeytelConfigSerializer,
    TrackConfigSerializer,
)
from .writers import config_hash, header, write_csv


class ConfigValidationTests(SimpleTestCase):

    def test_defaults(self):
        serializer = OracleConfigSerializer(data={})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        data = serializer.validated_data
        self.assertEqual(data['seed'], 20240917)
        self.assertEqual(data['threads'], 1)
        self.assertEqual(data['K'], 1)
        assert_allclose(data['metric']['matrix'], np.eye(3))

    def test_unknown_key_is_rejected(self):
        serializer = OracleConfigSerializer(data={'metric': 'I', 'colour': 'blue'})
        self.assertFalse(serializer.is_valid())
        self.assertIn('colour', serializer.errors)

    def test_flag_strings_are_parsed(self):
        serializer = OracleConfigSerializer(data={'K': '2', 'seed': '5', 'metric': '{"diag": [1, 2, 3]}'})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['K'], 2)
        assert_allclose(serializer.validated_data['metric']['matrix'], np.diag([1.0, 2.0, 3.0]))

    def test_metric_must_be_positive_definite(self):
        serializer = OracleConfigSerializer(data={'metric': {'diag': [1, -1, 1]}})
        self.assertFalse(serializer.is_valid())
        self.assertIn('metric', serializer.errors)

    def test_missing_metric_file(self):
        serializer = OracleConfigSerializer(data={'metric': '/nonexistent/metric.json'})
        self.assertFalse(serializer.is_valid())
        self.assertIn('metric', serializer.errors)

    def test_metric_file_with_constant_components(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'metric.json'
            path.write_text(json.dumps({'components': [[2, 0, 0, 1, 0, 1]] * 4}), encoding='utf-8')
            serializer = OracleConfigSerializer(data={'metric': str(path)})
            self.assertTrue(serializer.is_valid(), serializer.errors)
        assert_allclose(serializer.validated_data['metric']['matrix'], np.diag([2.0, 1.0, 1.0]))

    def test_varying_components_are_a_field(self):
        serializer = SpectrumConfigSerializer(data={'metric': {'components': [[1, 0, 0, 1, 0, 1], [2, 0, 0, 1, 0, 1]]}})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['metric']['kind'], 'field')

    def test_oracle_needs_a_constant_metric(self):
        serializer = OracleConfigSerializer(data={'metric': {'random': {'amplitude': 0.2}}})
        self.assertFalse(serializer.is_valid())
        self.assertIn('metric', serializer.errors)

    def test_spectrum_window(self):
        serializer = SpectrumConfigSerializer(data={'count': 4, 'max_abs': 2.0})
        self.assertFalse(serializer.is_valid())
        serializer = SpectrumConfigSerializer(data={})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['count'], 10)

    def test_perturb_oracle_checks(self):
        self.assertFalse(PerturbConfigSerializer(data={'metric': {'random': {}}}).is_valid())
        serializer = PerturbConfigSerializer(data={'k': [2, 0, 0], 'K': 1})
        self.assertFalse(serializer.is_valid())
        self.assertIn('k', serializer.errors)
        serializer = PerturbConfigSerializer(data={'direction': [[1, 2, 0], [0, 1, 0], [0, 0, 1]]})
        self.assertFalse(serializer.is_valid())

    def test_teytel_parameter_dimension(self):
        serializer = TeytelConfigSerializer(data={'preset': 'diag', 'q0': [0, 0, 0]})
        self.assertFalse(serializer.is_valid())
        self.assertIn('q0', serializer.errors)

    def test_track_path_requirements(self):
        serializer = TrackConfigSerializer(data={'experiment': 'path'})
        self.assertFalse(serializer.is_valid())
        self.assertIn('path', serializer.errors)
        serializer = TrackConfigSerializer(data={
            'experiment': 'path', 'backend': 'oracle', 'path': {'end': {'random': {}}},
        })
        self.assertFalse(serializer.is_valid())
        serializer = TrackConfigSerializer(data={
            'experiment': 'path', 'path': {'end': {'diag': [1, 1, 4]}, 'rule': 'sqrt'},
        })
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_track_defaults_follow_the_experiment(self):
        serializer = TrackConfigSerializer(data={'experiment': 'forced'})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        data = serializer.validated_data
        self.assertEqual((data['n'], data['count'], data['t_points']), (3, 8, 9))
        serializer = TrackConfigSerializer(data={'experiment': 'forced', 't_points': 5})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['t_points'], 5)
        serializer = TrackConfigSerializer(data={})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['t_points'], 41)

    def test_components_need_the_torus_domain(self):
        serializer = SpectrumConfigSerializer(data={'metric': {
            'components': [[1, 0, 0, 1, 0, 1]], 'domain': {'kind': 's3', 'chart': 'hopf'},
        }})
        self.assertFalse(serializer.is_valid())
        self.assertIn('metric', serializer.errors)


class WriterTests(SimpleTestCase):

    def test_hash_ignores_threads_and_out(self):
        base = {'seed': 1, 'K': 2, 'threads': 1, 'out': 'a'}
        self.assertEqual(config_hash(base), config_hash({**base, 'threads': 8, 'out': 'b'}))
        self.assertNotEqual(config_hash(base), config_hash({**base, 'seed': 2}))

    def test_csv_header_and_float_format(self):
        head = header({'seed': 1}, 'oracle')
        self.assertEqual(head['version'], '1.0.0')
        with tempfile.TemporaryDirectory() as tmp:
            path = write_csv(Path(tmp) / 'rows.csv', head, ['x', 'y'], [{'x': 0.1, 'y': 1 / 3}])
            lines = path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], f"# config_hash={head['config_hash']}")
        self.assertEqual(lines[1], '# version=1.0.0')
        self.assertEqual(lines[2:], ['x,y', '0.1,0.3333333333333333'])


def _rows(path):
    lines = [line for line in path.read_text(encoding='utf-8').splitlines() if not line.startswith('#')]
    return list(csv.DictReader(lines))


def _json(path):
    return json.loads(path.read_text(encoding='utf-8'))


class CommandLineTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.out = Path(self._tmp.name)
        self.stdout, self.stderr = io.StringIO(), io.StringIO()

    def tearDown(self):
        self._tmp.cleanup()

    def call(self, *argv):
        return run(list(argv), stdout=self.stdout, stderr=self.stderr)

    def diagnostic(self):
        return json.loads(self.stderr.getvalue().strip().splitlines()[-1])

    def test_oracle(self):
        self.assertEqual(self.call('oracle', '--metric', 'I', '--K', '1', '--out', str(self.out)), EXIT_OK)
        rows = _rows(self.out / 'oracle.csv')
        self.assertEqual([int(r['multiplicity']) for r in rows], [6, 6, 12, 12, 8, 8])
        self.assertAlmostEqual(float(rows[0]['lambda']), -1.0, places=12)
        document = _json(self.out / 'oracle.json')
        self.assertEqual(document['header']['subcommand'], 'oracle')
        self.assertLess(document['self_adjointness_error'], 1e-12)
        self.assertEqual([lv['multiplicity'] for lv in document['closed']], [6, 12, 8])
        self.assertIn('oracle.csv', self.stdout.getvalue())

    def test_outputs_are_reproducible(self):
        first, second = self.out / 'first', self.out / 'second'
        self.assertEqual(self.call('oracle', '--K', '2', '--out', str(first)), EXIT_OK)
        self.assertEqual(self.call('oracle', '--K', '2', '--threads', '2', '--out', str(second)), EXIT_OK)
        for name in ('oracle.csv', 'oracle.json'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())

    def test_config_file(self):
        config = self.out / 'config.json'
        config.write_text(json.dumps({'metric': {'diag': [1, 1, 4]}, 'K': 1}), encoding='utf-8')
        self.assertEqual(self.call('oracle', '--config', str(config), '--out', str(self.out)), EXIT_OK)
        rows = _rows(self.out / 'oracle.csv')
        self.assertAlmostEqual(float(rows[0]['lambda']), -0.5, places=12)

    def test_invalid_metric(self):
        target = self.out / 'never'
        code = self.call('oracle', '--metric', '{"diag": [1, -1, 1]}', '--out', str(target))
        self.assertEqual(code, EXIT_INVALID)
        self.assertFalse(target.exists())
        diagnostic = self.diagnostic()
        self.assertEqual((diagnostic['status'], diagnostic['code']), ('invalid', 'invalid_config'))
        self.assertIn('metric', diagnostic['details'])

    def test_unreadable_config_file(self):
        code = self.call('oracle', '--config', str(self.out / 'missing.json'))
        self.assertEqual(code, EXIT_INVALID)

    def test_unknown_subcommand(self):
        self.assertEqual(self.call('fourier'), EXIT_INVALID)
        self.assertEqual(self.diagnostic()['code'], 'unknown_subcommand')
        self.assertEqual(self.call(), EXIT_INVALID)

    def test_unknown_flag(self):
        self.assertEqual(self.call('oracle', '--bogus', '1'), EXIT_INVALID)

    def test_toolkit_failure(self):
        code = self.call('sah2', '--metric', 'I', '--level', '99', '--out', str(self.out))
        self.assertEqual(code, EXIT_FAILED)
        diagnostic = self.diagnostic()
        self.assertEqual((diagnostic['status'], diagnostic['code']), ('failed', 'empty_window'))

    def test_sah2(self):
        self.assertEqual(self.call('sah2', '--metric', 'I', '--out', str(self.out)), EXIT_OK)
        document = _json(self.out / 'sah2.json')
        self.assertTrue(document['spanning'])
        self.assertEqual(document['witness_a'], -2.0)
        expected = -1.0 / (2 * (2 * np.pi) ** 6)
        assert_allclose([row['det'] for row in document['determinants']], expected, rtol=1e-8)
        self.assertLess(document['closed_form_deviation'], 1e-12)
        self.assertEqual(len(_rows(self.out / 'sah2.csv')), 8)

    def test_sah2_random_metric_is_seeded(self):
        self.assertEqual(self.call('sah2', '--seed', '3', '--out', str(self.out)), EXIT_OK)
        document = _json(self.out / 'sah2.json')
        self.assertEqual(document['multiplicity'], 2)
        self.assertTrue(document['spanning'])

    def test_sphere3(self):
        self.assertEqual(self.call('sphere3', '--out', str(self.out)), EXIT_OK)
        document = _json(self.out / 'sphere3.json')
        assert_allclose([document['dmu'], document['dnu']], 4 * np.pi ** 2, rtol=1e-10)
        assert_allclose(document['reversed']['dmu'], -4 * np.pi ** 2, rtol=1e-10)
        self.assertFalse(document['flagged'])
        self.assertTrue(document['identities']['passed'])

    def test_teytel(self):
        code = self.call('teytel', '--preset', 'conic', '--out', str(self.out),
                         '--scan', '{"q1_range": [-1, 1], "q2_range": [-1, 1], "points": 21}')
        self.assertEqual(code, EXIT_OK)
        document = _json(self.out / 'teytel.json')
        self.assertEqual(document['projector']['rank'], 2)
        assert_allclose(document['defining_function']['eigenvalues'],
                        document['defining_function']['expected'], rtol=1e-10)
        self.assertLess(document['f_prime']['fd_error'], 1e-6)
        self.assertLess(document['projector_derivative_error'], 1e-6)
        self.assertEqual(len(document['scan']['components']), 1)

    def test_perturb_oracle(self):
        code = self.call('perturb', '--metric', '{"diag": [1, 2, 3]}', '--k', '1', '0', '0',
                         '--out', str(self.out))
        self.assertEqual(code, EXIT_OK)
        rows = _rows(self.out / 'perturb.csv')
        self.assertEqual([r['direction_id'] for r in rows], ['oracle/coclosed', 'oracle/closed'])
        self.assertTrue(all(float(r['rel_error']) < 1e-5 for r in rows))

    def test_spectrum(self):
        code = self.call('spectrum', '--n', '3', '--count', '4', '--which', 'both', '--out', str(self.out))
        self.assertEqual(code, EXIT_OK)
        document = _json(self.out / 'spectrum.json')
        self.assertEqual(document['mesh']['edges'], 189)
        self.assertGreaterEqual(len(document['coclosed']), 4)
        self.assertGreaterEqual(len(document['closed']), 4)
        kinds = {r['kind'] for r in _rows(self.out / 'spectrum.csv')}
        self.assertEqual(kinds, {'coclosed', 'closed'})

    def test_track_closed_coclosed(self):
        self.assertEqual(self.call('track', '--out', str(self.out)), EXIT_OK)
        document = _json(self.out / 'events.json')
        self.assertGreaterEqual(document['mixed_events'], 1)
        self.assertTrue(all(c['transversal'] for c in document['certificates']))
        self.assertEqual(document['unresolved'], [])
        self.assertEqual(len(document['words']), 41)
        self.assertTrue(_rows(self.out / 'branches.csv'))


class ExperimentEngineTests(SimpleTestCase):

    def test_invalid_config_writes_nothing(self):
        result = ExperimentEngine('teytel', {'preset': 'diag', 'q0': [0, 0, 0]}).execute()
        self.assertEqual((result['status'], result['exit_code']), ('invalid', EXIT_INVALID))
        self.assertIn('q0', result['error']['details'])
        self.assertEqual(result['outputs'], [])

    def test_execution_log(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = ExperimentEngine('oracle', {'metric': 'I', 'out': tmp}).execute()
        self.assertEqual(result['status'], 'success')
        self.assertEqual(len(result['outputs']), 2)
        self.assertEqual(result['execution_log'][-1]['type'], 'success')

    def test_random_path_endpoints_use_separate_seeds(self):
        serializer = TrackConfigSerializer(data={
            'experiment': 'path', 'backend': 'mesh', 'seed': 5,
            'path': {'start': {'random': {}}, 'end': {'random': {}}},
        })
        self.assertTrue(serializer.is_valid(), serializer.errors)
        engine = ExperimentEngine('track', {})
        engine.config = dict(serializer.validated_data)
        route = engine.config['path']
        quad = Quadrature.uniform_box(3)
        start, end = engine._route_endpoints(route, quad)
        assert_allclose(start.values, random_metric(quad, 5, 0.3, 3).values)
        assert_allclose(end.values, random_metric(quad, 6, 0.3, 3).values)
        self.assertFalse(np.allclose(start.values, end.values))
        G0, G1 = engine._route_endpoints(route)
        assert_allclose(G1, random_spd(np.random.default_rng(6), 0.3))
        self.assertFalse(np.allclose(G0, G1))
