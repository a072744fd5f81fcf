"""
Programmatic entry point: ``run(['oracle', '--metric', 'I', '--K', '1'])``.

Returns the process exit code: 0 success, 2 invalid config, 3 failure.
"""
import os
import sys

import django
from django.core.management import call_command
from django.core.management.base import CommandError

from .execution import EXIT_INVALID
from .serializers import SERIALIZERS
from .writers import dumps


def run(argv=None, stdout=None, stderr=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'beltrami_lab.settings')
    django.setup()
    stderr = stderr or sys.stderr
    if not argv or argv[0] not in SERIALIZERS:
        stderr.write(dumps({
            'status': 'invalid',
            'code': 'unknown_subcommand',
            'message': f'Expected one of: {", ".join(SERIALIZERS)}',
            'details': {'argv': argv},
        }) + '\n')
        return EXIT_INVALID
    try:
        call_command(argv[0], *argv[1:], stdout=stdout, stderr=stderr)
    except CommandError as exc:
        # argument parsing errors carry the default returncode 1
        return EXIT_INVALID if exc.returncode == 1 else exc.returncode
    return 0


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
