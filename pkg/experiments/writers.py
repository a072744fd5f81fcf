"""
Deterministic JSON and CSV outputs with a header block.
"""
import csv
import hashlib
import json
from pathlib import Path

from django.conf import settings
from rest_framework.utils.encoders import JSONEncoder

HASH_EXCLUDED = ('threads', 'out')


def dumps(payload, **kwargs):
    return json.dumps(payload, cls=JSONEncoder, sort_keys=True, **kwargs)


def config_hash(config):
    """SHA-256 of the canonical config, ignoring keys that never change results."""
    canonical = {k: v for k, v in config.items() if k not in HASH_EXCLUDED}
    return hashlib.sha256(dumps(canonical, separators=(',', ':')).encode('utf-8')).hexdigest()


def header(config, subcommand):
    return {
        'config_hash': config_hash(config),
        'version': settings.TOOLKIT_VERSION,
        'subcommand': subcommand,
    }


def write_json(path, head, payload):
    path = Path(path)
    document = {'header': head, **payload}
    path.write_text(dumps(document, indent=2) + '\n', encoding='utf-8')
    return path


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, 'tolist'):
        return _cell(value.tolist())
    return value


def write_csv(path, head, columns, rows):
    path = Path(path)
    with path.open('w', newline='', encoding='utf-8') as handle:
        handle.write(f"# config_hash={head['config_hash']}\n")
        handle.write(f"# version={head['version']}\n")
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])
    return path
