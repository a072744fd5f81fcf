"""
Experiment Execution Engine
Validates an ExperimentConfig, runs one subcommand and writes its outputs.
"""
import logging
from pathlib import Path

import numpy as np

from geometry import sphere3
from geometry.conf import toolkit_setting
from geometry.dec_mesh import build_mesh, export_coo, mass_derivative
from geometry.exceptions import EmptyWindowError, SpectralToolkitError
from geometry.metric_core import (
    MetricField,
    MetricPath,
    SymTensorField,
    metric_from_dict,
    random_metric,
    random_spd,
    sym_product,
)
from spectra import fourier_oracle, path_tracker, perturbation, teytel_abstract
from spectra.beltrami_solver import DiscreteOperators, closed_spectrum, coclosed_spectrum

from .serializers import SERIALIZERS
from .writers import header, write_csv, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3


class ExperimentEngine:
    """
    Runs one subcommand:
    1. validation of the raw config (exit 2 on failure, nothing written)
    2. the computation (exit 3 on toolkit failures)
    3. JSON/CSV outputs stamped with the config hash and version
    """

    def __init__(self, subcommand, raw_config):
        """
        Args:
            subcommand: key of SERIALIZERS
            raw_config: dict merged from the config file and command-line flags
        """
        self.subcommand = subcommand
        self.raw_config = raw_config
        self.config = None
        self.execution_log = []
        self.outputs = []

    def log(self, message, kind='info'):
        self.execution_log.append({'message': message, 'type': kind})
        level = {'warning': logging.WARNING, 'error': logging.ERROR}.get(kind, logging.INFO)
        logger.log(level, '[%s] %s', self.subcommand, message)

    def execute(self):
        """
        Main execution method
        Returns: dict with status, exit_code, error, outputs and the execution log
        """
        serializer = SERIALIZERS[self.subcommand](data=self.raw_config)
        if not serializer.is_valid():
            return self._result('invalid', EXIT_INVALID, {
                'code': 'invalid_config',
                'message': 'Configuration failed validation',
                'details': serializer.errors,
            })
        self.config = dict(serializer.validated_data)
        self.header = header(self.config, self.subcommand)
        self.out_dir = Path(self.config['out'])
        self.log(f"Config {self.header['config_hash'][:12]} validated")

        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            getattr(self, f'_run_{self.subcommand}')()
        except SpectralToolkitError as exc:
            self.log(f'{exc.code}: {exc.message}', 'error')
            return self._result('failed', EXIT_FAILED, exc.as_dict())
        except (ValueError, np.linalg.LinAlgError) as exc:
            self.log(f'Execution error: {exc}', 'error')
            return self._result('failed', EXIT_FAILED, {
                'code': 'execution_error', 'message': str(exc), 'details': {},
            })
        self.log('Finished', 'success')
        return self._result('success', EXIT_OK, None)

    def _result(self, status, exit_code, error):
        return {
            'status': status,
            'exit_code': exit_code,
            'error': error,
            'outputs': [str(p) for p in self.outputs],
            'execution_log': self.execution_log,
        }

    # helpers

    def _json(self, name, payload):
        payload = {**payload, 'log': list(self.execution_log)}
        self.outputs.append(write_json(self.out_dir / name, self.header, payload))

    def _csv(self, name, columns, rows):
        self.outputs.append(write_csv(self.out_dir / name, self.header, columns, rows))

    def _constant_matrix(self, described, offset=0):
        if described['kind'] == 'random':
            return random_spd(np.random.default_rng(self.config['seed'] + offset), described['amplitude'])
        return np.asarray(described['matrix'], dtype=float)

    def _metric_on(self, described, quadrature, offset=0):
        if described['kind'] == 'constant':
            return MetricField.constant(described['matrix'], quadrature)
        if described['kind'] == 'random':
            return random_metric(quadrature, self.config['seed'] + offset, described['amplitude'],
                                 described['modes'])
        return metric_from_dict(described['data'], quadrature)

    def _route_endpoints(self, route, quadrature=None):
        """Start and end of a path; random endpoints draw from ``seed`` and ``seed + 1``."""
        if quadrature is None:
            return tuple(self._constant_matrix(route[end], offset) for offset, end in enumerate(('start', 'end')))
        return tuple(self._metric_on(route[end], quadrature, offset) for offset, end in enumerate(('start', 'end')))

    def _direction(self):
        if 'direction' in self.config:
            return np.asarray(self.config['direction'], dtype=float)
        rng = np.random.default_rng(self.config['seed'] + 1)
        A = rng.standard_normal((3, 3))
        H = 0.5 * (A + A.T)
        return H / np.linalg.norm(H, 2)

    # subcommands

    def _run_spectrum(self):
        cfg = self.config
        mesh = build_mesh(cfg['n'])
        g = self._metric_on(cfg['metric'], mesh.quadrature)
        ops = DiscreteOperators.assemble(mesh, g, cfg['threads'])
        self.log(f'Mesh n={cfg["n"]}: {mesh.num_vertices} vertices, {mesh.num_edges} edges', 'step')
        payload, rows = {'mesh': {'n': cfg['n'], 'vertices': mesh.num_vertices,
                                  'edges': mesh.num_edges, 'faces': mesh.num_faces,
                                  'tets': mesh.num_tets}}, []
        if cfg['which'] in ('coclosed', 'both'):
            pairs = coclosed_spectrum(mesh, g, count=cfg.get('count'), max_abs=cfg.get('max_abs'),
                                      seed=cfg['seed'], ops=ops, threads=cfg['threads'])
            payload['coclosed'] = [p.as_record() for p in pairs]
            payload['coclosed_borderline'] = sorted({p.cluster_id for p in pairs if p.borderline})
            rows += [{'kind': 'coclosed', 'value': p.value, 'cluster_id': p.cluster_id,
                      'residual': p.residual} for p in pairs]
            self.log(f'{len(pairs)} coclosed eigenpairs', 'step')
            if payload['coclosed_borderline']:
                self.log('Borderline clusters near gap_tol', 'warning')
        if cfg['which'] in ('closed', 'both'):
            pairs = closed_spectrum(mesh, g, cfg['count'], seed=cfg['seed'], ops=ops)
            payload['closed'] = [p.as_record() for p in pairs]
            rows += [{'kind': 'closed', 'value': p.value, 'cluster_id': p.cluster_id,
                      'residual': p.residual} for p in pairs]
            self.log(f'{len(pairs)} closed eigenpairs', 'step')
        if cfg['export_matrices']:
            for name, matrix in (('helicity', ops.helicity), ('mass_1forms', ops.mass),
                                 ('stiffness', ops.stiffness), ('mass_0forms', ops.scalar_mass)):
                path = self.out_dir / f'{name}.coo'
                export_coo(matrix, path)
                self.outputs.append(path)
        self._csv('spectrum.csv', ['kind', 'value', 'cluster_id', 'residual'], rows)
        self._json('spectrum.json', payload)

    def _run_oracle(self):
        cfg = self.config
        G = self._constant_matrix(cfg['metric'])
        truncation = fourier_oracle.FourierTruncation(G, cfg['K'])
        levels = fourier_oracle.oracle_spectrum(G, cfg['K'])
        closed = fourier_oracle.oracle_closed_spectrum(G, cfg['K'])
        self.log(f'{len(levels)} coclosed levels, {len(closed)} closed levels for K={cfg["K"]}', 'step')
        rows = [{'lambda': lv.value, 'multiplicity': lv.multiplicity,
                 'k_representatives': lv.k_representatives()} for lv in levels]
        payload = {
            'coclosed': rows,
            'closed': [{'rho': lv.value, 'multiplicity': lv.multiplicity,
                        'k_representatives': lv.k_representatives()} for lv in closed],
            'self_adjointness_error': truncation.self_adjointness_error(),
        }
        if 'compare_n' in cfg:
            payload['comparison'] = self._compare_mesh(G, levels, cfg['compare_n'])
        self._csv('oracle.csv', ['lambda', 'multiplicity', 'k_representatives'], rows)
        self._json('oracle.json', payload)

    def _compare_mesh(self, G, levels, n):
        lowest = [lv for lv in levels if abs(abs(lv.value) - abs(levels[0].value)) <= 1e-9 * abs(levels[0].value)]
        exact = sorted(v for lv in lowest for v in [lv.value] * lv.multiplicity)
        mesh = build_mesh(n)
        pairs = coclosed_spectrum(mesh, MetricField.constant(G, mesh.quadrature), count=len(exact),
                                  seed=self.config['seed'], threads=self.config['threads'])
        discrete = sorted(p.value for p in pairs)
        positives = [v for v in discrete if v > 0][:sum(v > 0 for v in exact)]
        negatives = [v for v in discrete if v < 0][-sum(v < 0 for v in exact):]
        discrete = sorted(negatives + positives)
        self.log(f'Mesh comparison on n={n}: {len(discrete)} eigenvalues', 'step')
        return [{'oracle': e, 'mesh': d, 'abs_error': abs(e - d)} for e, d in zip(exact, discrete)]

    def _run_perturb(self):
        cfg = self.config
        H = self._direction()
        step = cfg.get('fd_step')
        if cfg['source'] == 'oracle':
            rows = self._perturb_oracle(self._constant_matrix(cfg['metric']), H, step)
        else:
            rows = self._perturb_mesh(H, step)
        columns = ['lambda', 'direction_id', 'derivative', 'fd_value', 'rel_error']
        self._csv('perturb.csv', columns, rows)
        self._json('perturb.json', {'direction': H, 'rows': rows})

    def _perturb_oracle(self, G, H, step):
        cfg = self.config
        k = tuple(cfg['k'])
        row = fourier_oracle.oracle_derivative(G, cfg['K'], k, cfg['sign'], H, step)
        row['direction_id'] = 'oracle/coclosed'
        rho = float(np.asarray(k) @ np.linalg.inv(G) @ np.asarray(k))
        fd = perturbation.central_difference(
            lambda s: float(np.asarray(k) @ np.linalg.inv(G + s * H) @ np.asarray(k)), step)
        closed = perturbation.fd_row(rho, 'oracle/closed', fourier_oracle.closed_rate(G, k, H), fd)
        self.log(f'Oracle rate for k={list(k)}: rel_error {row["rel_error"]:.3e}', 'step')
        if row['degenerate']:
            self.log('Level is degenerate; see cluster_rates', 'warning')
        return [row, closed]

    def _perturb_mesh(self, H, step):
        cfg = self.config
        step = toolkit_setting('FD_STEP') if step is None else step
        mesh = build_mesh(cfg['n'])
        g = self._metric_on(cfg['metric'], mesh.quadrature)
        h = SymTensorField.constant(H, mesh.quadrature)
        ops = DiscreteOperators.assemble(mesh, g, cfg['threads'])
        shifted = [MetricField(g.values + s * h.values, mesh.quadrature) for s in (step, -step)]

        def solve(metric, kind):
            if kind == 'coclosed':
                return coclosed_spectrum(mesh, metric, count=cfg['count'], seed=cfg['seed'],
                                         threads=cfg['threads'])
            return closed_spectrum(mesh, metric, cfg['count'], seed=cfg['seed'], threads=cfg['threads'])

        def nearest(pairs, pair):
            same = [p for p in pairs if np.sign(p.value) == np.sign(pair.value)]
            return min(same, key=lambda p: abs(p.value - pair.value)).value

        rows = []
        coclosed = coclosed_spectrum(mesh, g, count=cfg['count'], seed=cfg['seed'], ops=ops)
        plus, minus = (solve(m, 'coclosed') for m in shifted)
        dM = mass_derivative(mesh, g, h, cfg['threads'])
        for pair in (p for p in coclosed if p.cluster_size == 1):
            formula = perturbation.beltrami_rate_on_mesh(g, pair, h)
            fd = (nearest(plus, pair) - nearest(minus, pair)) / (2 * step)
            row = perturbation.fd_row(pair.value, 'mesh/coclosed', formula, fd)
            row['matrix_form'] = float(-pair.value * (pair.vector @ (dM @ pair.vector)))
            rows.append(row)
        closed = closed_spectrum(mesh, g, cfg['count'], seed=cfg['seed'], ops=ops)
        plus, minus = (solve(m, 'closed') for m in shifted)
        for pair in (p for p in closed if p.cluster_size == 1):
            rates = perturbation.closed_rates_on_mesh(ops, pair, h)
            fd = (nearest(plus, pair) - nearest(minus, pair)) / (2 * step)
            row = perturbation.fd_row(pair.value, 'mesh/closed', rates['by_parts'], fd)
            row['literal'] = rates['literal']
            rows.append(row)
        skipped = sum(p.cluster_size > 1 for p in coclosed) + sum(p.cluster_size > 1 for p in closed)
        if skipped:
            self.log(f'{skipped} eigenpairs in degenerate clusters skipped', 'warning')
        self.log(f'{len(rows)} finite-difference rows on n={cfg["n"]}', 'step')
        return rows

    def _run_sah2(self):
        cfg = self.config
        G = self._constant_matrix(cfg['metric'])
        positive = [lv for lv in fourier_oracle.oracle_spectrum(G, cfg['K']) if lv.value > 0]
        positive.sort(key=lambda lv: lv.value)
        if cfg['level'] >= len(positive):
            raise EmptyWindowError(f'Only {len(positive)} positive levels for K={cfg["K"]}', level=cfg['level'])
        level = positive[cfg['level']]
        if level.multiplicity < 2:
            raise EmptyWindowError('The selected level is simple', multiplicity=level.multiplicity)
        k_max = max(max(abs(x) for x in mode.k) for mode in level.modes[:2])
        quadrature = fourier_oracle.uniform_quadrature(k_max)
        g = MetricField.constant(G, quadrature)
        v1, v2 = (mode.field(quadrature) for mode in level.modes[:2])
        report = perturbation.sah2_span_test(g, level.value, v1, v2, cfg.get('a_grid'), cfg.get('det_tol'))
        cross = perturbation.aprime_matrix(g, level.value, [v1, v2], sym_product(v1, v2), 'v1*v2')
        closed_form = perturbation.aprime_closed_form(g, level.value, [v1, v2], 0, 1)
        self.log(f'Span test on lambda={level.value:.6g}: spanning={report.spanning}',
                 'success' if report.spanning else 'warning')
        rows = [{'a': a, 'det': d, 'relative': r} for a, d, r in report.determinants]
        self._csv('sah2.csv', ['a', 'det', 'relative'], rows)
        self._json('sah2.json', {
            'lambda': level.value,
            'multiplicity': level.multiplicity,
            'metric': G,
            **report.as_dict(),
            'aprime_v1v2': cross.as_dict(),
            'closed_form_deviation': float(np.max(np.abs(cross.matrix - closed_form))),
        })

    def _run_sphere3(self):
        cfg = self.config
        certificate = sphere3.crossing_derivatives(cfg['n_eta'], cfg['n_xi'], tol=cfg['tol'])
        reversed_ = sphere3.crossing_derivatives(cfg['n_eta'], cfg['n_xi'], sign=-1.0, tol=cfg['tol'])
        identities = sphere3.pointwise_identities_check(cfg['n_eta'], cfg['n_xi'])
        self.log(f'dmu={certificate.dmu:.12g} dnu={certificate.dnu:.12g}',
                 'warning' if certificate.flagged else 'success')
        self._json('sphere3.json', {
            **certificate.as_dict(),
            'reversed': {'dmu': reversed_.dmu, 'dnu': reversed_.dnu},
            'identities': identities,
        })

    def _run_teytel(self):
        cfg = self.config
        family = teytel_abstract.preset(cfg['preset'])
        q0 = np.asarray(cfg['q0'], dtype=float)
        h = np.asarray(cfg['h'], dtype=float)
        q = np.asarray(cfg['q'], dtype=float) if 'q' in cfg else q0 + 0.1 * h
        values = family.eigen(q0)[0]
        if cfg['level'] >= len(values):
            raise EmptyWindowError(f'Family has {len(values)} eigenvalues', level=cfg['level'])
        center = float(values[cfg['level']])
        radius = cfg.get('radius') or teytel_abstract.default_radius(values, center)
        nodes = cfg.get('nodes')
        threads = cfg['threads']
        step = toolkit_setting('FD_STEP')

        projector = teytel_abstract.spectral_projector(family, q0, center, radius, nodes, threads)
        dP = teytel_abstract.projector_derivative(family, q0, center, radius, h, nodes, threads)
        dP_fd = perturbation.central_difference(
            lambda s: teytel_abstract.spectral_projector(family, q0 + s * h, center, radius, nodes).matrix)
        fdef = teytel_abstract.defining_function(family, q0, q, center, radius, nodes=nodes)
        basis = teytel_abstract.reference_basis(family, q0, center, radius)[1]
        fprime = teytel_abstract.f_prime_entries(family, q0, h, basis, center, radius, nodes=nodes)
        df_fd = perturbation.central_difference(
            lambda s: teytel_abstract.defining_function(family, q0, q0 + s * h, center, radius,
                                                        nodes=nodes).matrix, step)
        inside = np.abs(family.eigen(q)[0] - center) < radius
        payload = {
            'preset': family.name,
            'center': center,
            'self_adjointness_error': family.self_adjointness_error(q0),
            'projector': projector.as_dict(),
            'projector_derivative_error': float(np.max(np.abs(dP - dP_fd))),
            'contour_convergence': teytel_abstract.contour_convergence(family, q0, center, radius),
            'defining_function': {
                'q': q,
                'matrix': fdef.matrix,
                'eigenvalues': fdef.eigenvalues(),
                'expected': np.sort(1.0 / (fdef.mu - family.eigen(q)[0][inside])),
                'mu': fdef.mu,
                'condition': fdef.condition,
            },
            'f_prime': {**fprime.as_dict(), 'fd_error': float(np.max(np.abs(fprime.entries - df_fd.T)))},
        }
        self.log(f'Projector rank {projector.rank} around {center:.6g}', 'step')
        if 'scan' in cfg:
            scan_cfg = cfg['scan']
            scan = teytel_abstract.codim2_slice_scan(family, scan_cfg['q1_range'], scan_cfg['q2_range'],
                                                     scan_cfg['points'], scan_cfg['kappa'], threads)
            payload['scan'] = scan.as_dict()
            self.log(f'Slice scan: {len(scan.components)} near-degenerate components', 'step')
        self._json('teytel.json', payload)

    def _run_track(self):
        cfg = self.config
        if cfg['experiment'] == 'forced':
            result, report = path_tracker.forced_crossing_experiment(
                cfg['n'], cfg['seed'], cfg['count'], cfg['t_points'], threads=cfg['threads'])
            self.log('Forced crossing found' if report['found'] else 'Forced crossing not observed',
                     'success' if report['found'] else 'warning')
        elif cfg['experiment'] == 'closed-coclosed':
            path = cfg.get('path')
            kwargs = {}
            if path:
                start, end = self._route_endpoints(path)
                kwargs = {'start': start, 'end': end, 'rule': path['rule']}
            result, report = path_tracker.closed_coclosed_experiment(
                cfg['K'], t_points=cfg['t_points'], threads=cfg['threads'], **kwargs)
            self.log(f'{report["mixed_events"]} closed/coclosed crossings certified', 'step')
        else:
            result, report = self._track_path()
        report['unresolved'] = result.unresolved
        report['refinements'] = result.refinements
        report['words'] = [path_tracker.order_sequence(result.branches, t).as_dict() for t in result.grid]
        columns = ['t', 'branch_id', 'type', 'value', 'color', 'overlap']
        self._csv('branches.csv', columns, result.rows())
        self._json('events.json', report)

    def _track_path(self):
        cfg = self.config
        route = cfg['path']
        grid = np.linspace(0.0, 1.0, cfg['t_points'])
        if cfg['backend'] == 'oracle':
            path = path_tracker.constant_path(*self._route_endpoints(route), route['rule'])
            backend = path_tracker.OracleBackend(path, cfg['K'], cfg['which'])
        else:
            mesh = build_mesh(cfg['n'])
            path = MetricPath(*self._route_endpoints(route, mesh.quadrature), route['rule'])
            backend = path_tracker.DecBackend(mesh, path, cfg['count'], cfg['which'], cfg['seed'], cfg['threads'])
        result = path_tracker.track(backend, grid, cfg['threads'])
        events = path_tracker.detect_crossings(result.branches, refine=backend.refine)
        self.log(f'{len(result.branches)} branches, {len(events)} events', 'step')
        return result, {
            'events': [e.as_dict() for e in events],
            'invariants': path_tracker.check_invariants(result, events),
        }
