"""
`python -m trust <subcommand>`: the pipeline commands under their hyphenated
names, with exit codes 0 (success), 1 (validation or usage error) and 2
(internal error).
"""
import logging
import os
import sys

SUBCOMMANDS = {
    'gen-data': 'gen_data',
    'train': 'train',
    'maps': 'maps',
    'audit': 'audit',
    'report': 'report',
}
USAGE = 'usage: trust {%s} [--config PATH] [--seed N] [--out DIR] [--workers N]' % '|'.join(SUBCOMMANDS)

logger = logging.getLogger(__name__)


def _setup():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'saliency_trust.settings')
    import django

    django.setup()


def cli_run(argv=None, stdout=None, stderr=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv:
            stderr.write(f'Unknown subcommand "{argv[0]}".\n')
        stderr.write(USAGE + '\n')
        return 1

    _setup()
    from django.core.management import load_command_class
    from django.core.management.base import CommandError

    name = argv[0]
    command = load_command_class('trust', SUBCOMMANDS[name])
    parser = command.create_parser('trust', name)
    try:
        options = vars(parser.parse_args(argv[1:]))
    except CommandError as exc:
        stderr.write(f'{exc}\n{USAGE}\n')
        return 1
    except SystemExit as exc:
        return exc.code or 0
    args = options.pop('args', ())
    options['stdout'] = stdout
    options['stderr'] = stderr
    try:
        command.execute(*args, **options)
    except CommandError as exc:
        stderr.write(f'{exc}\n')
        return exc.returncode
    except Exception:
        logger.exception('%s failed', name)
        return 2
    return 0


def main():
    sys.exit(cli_run())
