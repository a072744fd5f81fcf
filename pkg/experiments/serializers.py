import json
from pathlib import Path

import numpy as np
from rest_framework import serializers

from geometry.conf import toolkit_setting
from spectra.teytel_abstract import PRESETS


def identity_metric():
    return {'kind': 'constant', 'matrix': np.eye(3).tolist()}


def random_constant_metric():
    return {'kind': 'random', 'amplitude': 0.3, 'modes': 3}


class MetricSpecField(serializers.Field):
    """
    Metric specification.

    Accepts ``"I"``, ``{"diag": [a, b, c]}``, ``{"constant": 3x3}``,
    ``{"random": {"amplitude": a, "modes": m}}``, a metric JSON object
    (``components`` rows), or a string holding inline JSON or a file path.
    Returns a normalized dict with a ``kind`` key.
    """
    default_error_messages = {
        'invalid': 'Metric must be "I", an inline JSON object or a path to a JSON file.',
        'missing_file': 'Metric file {path} does not exist.',
        'bad_json': 'Metric JSON could not be parsed: {error}.',
        'not_spd': 'Constant metric must be symmetric positive definite.',
    }

    def to_internal_value(self, data):
        if isinstance(data, str):
            text = data.strip()
            if text == 'I':
                return identity_metric()
            if text.startswith('{'):
                data = self._loads(text)
            else:
                path = Path(text)
                if not path.is_file():
                    self.fail('missing_file', path=text)
                data = self._loads(path.read_text(encoding='utf-8'))
        if not isinstance(data, dict):
            self.fail('invalid')
        if 'diag' in data:
            return self._constant(np.diag(self._floats(data['diag'], 3)))
        if 'constant' in data:
            return self._constant(np.asarray(data['constant'], dtype=float))
        if 'random' in data:
            options = data['random'] or {}
            amplitude = float(options.get('amplitude', 0.3))
            modes = int(options.get('modes', 3))
            if not 0 <= amplitude < 1 or modes < 1:
                raise serializers.ValidationError('random metric needs 0 <= amplitude < 1 and modes >= 1.')
            return {'kind': 'random', 'amplitude': amplitude, 'modes': modes}
        if 'components' in data:
            comps = np.asarray(data['components'], dtype=float)
            if comps.ndim != 2 or comps.shape[1] != 6:
                raise serializers.ValidationError('components must be rows of six numbers.')
            domain = data.get('domain') or {}
            if not isinstance(domain, dict) or domain.get('kind', 'torus') != 'torus':
                raise serializers.ValidationError('metric components must describe the torus domain.')
            if np.all(comps == comps[:1]):
                row = comps[0]
                return self._constant(np.array([
                    [row[0], row[1], row[2]], [row[1], row[3], row[4]], [row[2], row[4], row[5]],
                ]))
            return {'kind': 'field', 'data': {'components': comps.tolist(), **{
                k: v for k, v in data.items() if k != 'components'}}}
        self.fail('invalid')

    def to_representation(self, value):
        return value

    def _loads(self, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            self.fail('bad_json', error=str(exc))

    @staticmethod
    def _floats(values, size):
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.size != size or not np.all(np.isfinite(arr)):
            raise serializers.ValidationError(f'expected {size} finite numbers.')
        return arr

    def _constant(self, G):
        if G.shape != (3, 3) or not np.all(np.isfinite(G)) or not np.array_equal(G, G.T):
            self.fail('not_spd')
        if np.linalg.eigvalsh(G).min() <= 0:
            self.fail('not_spd')
        return {'kind': 'constant', 'matrix': G.tolist()}


class SymmetricMatrixField(serializers.ListField):
    """3x3 symmetric matrix given as nested lists."""
    child = serializers.ListField(child=serializers.FloatField(), min_length=3, max_length=3)

    def __init__(self, **kwargs):
        kwargs.setdefault('min_length', 3)
        kwargs.setdefault('max_length', 3)
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        if not np.array_equal(np.asarray(value), np.asarray(value).T):
            raise serializers.ValidationError('direction matrix must be symmetric.')
        return value


def _seed_default():
    return toolkit_setting('DEFAULT_SEED')


def _threads_default():
    return toolkit_setting('DEFAULT_THREADS')


class ExperimentConfigSerializer(serializers.Serializer):
    """Keys shared by every subcommand; unknown keys are rejected."""
    seed = serializers.IntegerField(min_value=0, max_value=2 ** 64 - 1, default=_seed_default)
    threads = serializers.IntegerField(min_value=1, max_value=256, default=_threads_default)
    out = serializers.CharField(default='.')

    def validate(self, attrs):
        unknown = sorted(set(self.initial_data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({key: 'Unknown key.' for key in unknown})
        return attrs


class MeshConfigMixin(serializers.Serializer):
    n = serializers.IntegerField(min_value=2, default=6)
    metric = MetricSpecField(default=identity_metric)


class SpectrumConfigSerializer(MeshConfigMixin, ExperimentConfigSerializer):
    which = serializers.ChoiceField(choices=['coclosed', 'closed', 'both'], default='coclosed')
    count = serializers.IntegerField(min_value=1, required=False)
    max_abs = serializers.FloatField(min_value=0.0, required=False)
    export_matrices = serializers.BooleanField(default=False)

    def validate(self, attrs):
        attrs = super().validate(attrs)
        if 'count' in attrs and 'max_abs' in attrs:
            raise serializers.ValidationError('Give either count or max_abs, not both.')
        if 'max_abs' in attrs and attrs['which'] != 'coclosed':
            raise serializers.ValidationError('max_abs windows apply to the coclosed spectrum only.')
        if 'count' not in attrs and 'max_abs' not in attrs:
            attrs['count'] = 10
        return attrs


class ConstantMetricMixin:
    def validate_metric(self, value):
        if value['kind'] != 'constant':
            raise serializers.ValidationError('This subcommand needs a constant metric.')
        return value


class OracleConfigSerializer(ConstantMetricMixin, ExperimentConfigSerializer):
    metric = MetricSpecField(default=identity_metric)
    K = serializers.IntegerField(min_value=1, max_value=8, default=1)
    compare_n = serializers.IntegerField(min_value=2, required=False)


class PerturbConfigSerializer(MeshConfigMixin, ExperimentConfigSerializer):
    source = serializers.ChoiceField(choices=['oracle', 'mesh'], default='oracle')
    K = serializers.IntegerField(min_value=1, max_value=8, default=1)
    k = serializers.ListField(child=serializers.IntegerField(), min_length=3, max_length=3,
                              default=[1, 0, 0])
    sign = serializers.ChoiceField(choices=[1, -1], default=1)
    direction = SymmetricMatrixField(required=False)
    count = serializers.IntegerField(min_value=1, default=6)
    fd_step = serializers.FloatField(min_value=1e-12, required=False)

    def validate_k(self, value):
        if not any(value):
            raise serializers.ValidationError('k must be a nonzero wavevector.')
        return value

    def validate(self, attrs):
        attrs = super().validate(attrs)
        if attrs['source'] == 'oracle':
            if attrs['metric']['kind'] != 'constant':
                raise serializers.ValidationError({'metric': 'The oracle needs a constant metric.'})
            if max(abs(x) for x in attrs['k']) > attrs['K']:
                raise serializers.ValidationError({'k': 'k lies outside the truncation K.'})
        return attrs


class Sah2ConfigSerializer(ConstantMetricMixin, ExperimentConfigSerializer):
    metric = MetricSpecField(default=random_constant_metric)
    K = serializers.IntegerField(min_value=1, max_value=4, default=1)
    level = serializers.IntegerField(min_value=0, default=0)
    a_grid = serializers.ListField(child=serializers.FloatField(), min_length=1, required=False)
    det_tol = serializers.FloatField(min_value=0.0, required=False)

    def validate_metric(self, value):
        # a seeded random constant metric is drawn by the engine
        if value['kind'] == 'random':
            return value
        return super().validate_metric(value)


class Sphere3ConfigSerializer(ExperimentConfigSerializer):
    n_eta = serializers.IntegerField(min_value=2, max_value=64, default=8)
    n_xi = serializers.IntegerField(min_value=5, max_value=128, default=8)
    tol = serializers.FloatField(min_value=0.0, default=1e-8)


class SliceScanSerializer(serializers.Serializer):
    q1_range = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2)
    q2_range = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2)
    points = serializers.IntegerField(min_value=3, max_value=1001, default=41)
    kappa = serializers.FloatField(min_value=0.0, default=3.0)


class TeytelConfigSerializer(ExperimentConfigSerializer):
    preset = serializers.ChoiceField(choices=sorted(PRESETS), default='conic')
    q0 = serializers.ListField(child=serializers.FloatField(), min_length=1, default=[0.0, 0.0])
    q = serializers.ListField(child=serializers.FloatField(), min_length=1, required=False)
    h = serializers.ListField(child=serializers.FloatField(), min_length=1, default=[1.0, 0.0])
    level = serializers.IntegerField(min_value=0, default=0)
    radius = serializers.FloatField(min_value=0.0, required=False)
    nodes = serializers.IntegerField(min_value=4, max_value=4096, required=False)
    scan = SliceScanSerializer(required=False)

    def validate(self, attrs):
        attrs = super().validate(attrs)
        dim = PRESETS[attrs['preset']]().param_dim
        for key in ('q0', 'q', 'h'):
            if key in attrs and len(attrs[key]) != dim:
                raise serializers.ValidationError({key: f'expected {dim} parameters.'})
        if 'scan' in attrs and dim != 2:
            raise serializers.ValidationError({'scan': 'slice scans need a 2-parameter family.'})
        return attrs


class PathSpecSerializer(serializers.Serializer):
    start = MetricSpecField(default=identity_metric)
    end = MetricSpecField()
    rule = serializers.ChoiceField(choices=['linear', 'sqrt'], default='linear')


class TrackConfigSerializer(ExperimentConfigSerializer):
    EXPERIMENT_DEFAULTS = {
        'forced': {'n': 3, 'count': 8, 't_points': 9},
        'path': {'n': 4, 'count': 12, 't_points': 41},
        'closed-coclosed': {'n': 4, 'count': 12, 't_points': 41},
    }

    experiment = serializers.ChoiceField(choices=['path', 'forced', 'closed-coclosed'],
                                         default='closed-coclosed')
    backend = serializers.ChoiceField(choices=['oracle', 'mesh'], default='oracle')
    path = PathSpecSerializer(required=False)
    which = serializers.ChoiceField(choices=['coclosed', 'closed', 'both'], default='both')
    n = serializers.IntegerField(min_value=2, required=False)
    K = serializers.IntegerField(min_value=1, max_value=4, default=2)
    count = serializers.IntegerField(min_value=1, required=False)
    t_points = serializers.IntegerField(min_value=2, max_value=10001, required=False)

    def validate(self, attrs):
        attrs = super().validate(attrs)
        for key, value in self.EXPERIMENT_DEFAULTS[attrs['experiment']].items():
            attrs.setdefault(key, value)
        if attrs['experiment'] == 'path':
            if 'path' not in attrs:
                raise serializers.ValidationError({'path': 'A path experiment needs a path.'})
            if attrs['backend'] == 'oracle':
                for end in ('start', 'end'):
                    if attrs['path'][end]['kind'] != 'constant':
                        raise serializers.ValidationError(
                            {'path': 'The oracle backend needs constant endpoint metrics.'})
        return attrs


SERIALIZERS = {
    'spectrum': SpectrumConfigSerializer,
    'oracle': OracleConfigSerializer,
    'perturb': PerturbConfigSerializer,
    'sah2': Sah2ConfigSerializer,
    'sphere3': Sphere3ConfigSerializer,
    'teytel': TeytelConfigSerializer,
    'track': TrackConfigSerializer,
}
