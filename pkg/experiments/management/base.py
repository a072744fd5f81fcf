import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from experiments.execution import EXIT_INVALID, ExperimentEngine
from experiments.writers import dumps


class ExperimentCommand(BaseCommand):
    """
    Base for every experiment subcommand.

    Options are collected into a raw config (file first, flags on top) and
    handed to ExperimentEngine; values stay strings so the serializers
    report every bad value as a validation failure.
    """
    subcommand = None
    # (flag, config key, argparse kwargs)
    options = ()
    json_options = ()

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON file with the experiment config')
        parser.add_argument('--out', help='Output directory')
        parser.add_argument('--seed', help='Random seed (unsigned 64-bit)')
        parser.add_argument('--threads', help='Worker threads')
        for flag, key, kwargs in self.options:
            parser.add_argument(flag, dest=key, **kwargs)

    def fail(self, exit_code, code, message, details=None):
        self.stderr.write(dumps({
            'status': 'failed' if exit_code != EXIT_INVALID else 'invalid',
            'code': code,
            'message': message,
            'details': details or {},
        }))
        raise CommandError(message, returncode=exit_code)

    def load_config(self, path):
        if not path:
            return {}
        try:
            data = json.loads(Path(path).read_text(encoding='utf-8'))
        except OSError as exc:
            self.fail(EXIT_INVALID, 'invalid_config', f'Cannot read config file {path}', {'error': str(exc)})
        except json.JSONDecodeError as exc:
            self.fail(EXIT_INVALID, 'invalid_config', 'Config file is not valid JSON', {'error': str(exc)})
        if not isinstance(data, dict):
            self.fail(EXIT_INVALID, 'invalid_config', 'Config file must hold a JSON object')
        return data

    def raw_config(self, options):
        raw = self.load_config(options.get('config'))
        keys = ['out', 'seed', 'threads'] + [key for _, key, _ in self.options]
        for key in keys:
            value = options.get(key)
            if value is None or value is False:
                continue
            if key in self.json_options:
                try:
                    value = json.loads(value)
                except json.JSONDecodeError as exc:
                    self.fail(EXIT_INVALID, 'invalid_config', f'--{key} is not valid JSON', {'error': str(exc)})
            raw[key] = value
        return raw

    def handle(self, *args, **options):
        engine = ExperimentEngine(self.subcommand, self.raw_config(options))
        result = engine.execute()
        if result['status'] != 'success':
            error = result['error']
            self.fail(result['exit_code'], error['code'], error['message'], error.get('details'))
        for path in result['outputs']:
            self.stdout.write(path)
