# pipeline/cli.py
"""Single entry point: ``python -m pipeline <subcommand> [flags]``.

Each subcommand is a management command; this module only sets Django up,
keeps the run registry migrated and turns every outcome into an exit code
(0 success, 2 usage or config error, 3 data or format error, 4 numerical
error).
"""
import logging
import os
import sys

import django
from django.core.management import call_command, get_commands, load_command_class

logger = logging.getLogger(__name__)

SUBCOMMANDS = (
    'synth', 'pretrain', 'adapt', 'compare', 'contextualize', 'aggregate', 'eval', 'report', 'selftest',
)
PROG = 'python -m pipeline'


def usage():
    return (
        f'usage: {PROG} <subcommand> [options]\n\n'
        f'subcommands: {", ".join(SUBCOMMANDS)}\n'
        f'run "{PROG} <subcommand> --help" for the flags of one subcommand\n'
    )


def run(argv=None):
    """Run one subcommand and return its exit code."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'ticon_lab.settings')
    django.setup()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ('-h', '--help'):
        (sys.stdout if argv else sys.stderr).write(usage())
        return 0 if argv else 2
    name, rest = argv[0], argv[1:]
    if name not in SUBCOMMANDS:
        sys.stderr.write(f'unknown subcommand {name!r}\n\n{usage()}')
        return 2

    call_command('migrate', verbosity=0, interactive=False)
    command = load_command_class(get_commands()[name], name)
    try:
        command.run_from_argv([PROG, name, *rest])
    except SystemExit as exc:
        # argparse errors and CommandError(returncode=...) both end here
        code = exc.code if isinstance(exc.code, int) else 1
        if code:
            logger.debug('%s exited with %d', name, code)
        return code
    return 0


def main():
    sys.exit(run())
