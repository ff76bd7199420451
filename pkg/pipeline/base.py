# pipeline/base.py
import json
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from pipeline.config import RunConfig
from slides.encoders import EncoderRegistry
from slides.store import SlideStore
from ticon_lab.exceptions import TiconError

logger = logging.getLogger(__name__)


class PipelineCommand(BaseCommand):
    """Base for pipeline subcommands.

    Adds the shared run flags, resolves the run configuration, leaves the
    output directory self-describing and turns typed errors into exit codes.
    Subclasses implement ``add_command_arguments`` and ``run``.
    """
    # False when --out names a file (its directory gets the run records)
    out_is_directory = True
    out_required = True
    # True when the subcommand spreads work over --threads workers
    parallel = False

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Run config file ([section] / key = value)')
        parser.add_argument(
            '--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
            help='Override one config value; may be repeated',
        )
        parser.add_argument('--seed', type=int, help='Root seed (overrides run.seed)')
        if self.parallel:
            threads_help = 'Worker threads (default 1); outputs do not depend on the count'
        else:
            threads_help = 'Accepted for every subcommand; this one always runs on a single thread'
        parser.add_argument('--threads', type=int, help=threads_help)
        parser.add_argument('--out', required=self.out_required, help='Output location')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            cfg = RunConfig.resolve(
                config_path=options['config'], overrides=options['set'],
                seed=options['seed'], threads=options['threads'],
            )
            out = Path(options['out']) if options['out'] else None
            self.run_dir = None
            if out is not None:
                self.run_dir = out if self.out_is_directory else out.parent
                cfg.write(self.run_dir)
            if not self.parallel and cfg.get('run', 'threads') > 1:
                logger.warning('--threads %d ignored: this subcommand runs on a single thread', cfg.get('run', 'threads'))
            self.registry = EncoderRegistry.from_settings(cfg.get('synth', 'latent_dim'))
            if self.run_dir is not None:
                self.write_json('registry.json', {
                    'encoders': self.registry.describe(), 'digest': self.registry.digest(),
                })
            self.run(cfg, out, **{k: v for k, v in options.items() if k != 'out'})
        except TiconError as exc:
            logger.error('%s failed: %s', type(self).__module__.rsplit('.', 1)[-1], exc)
            raise CommandError(f'{type(exc).__name__}: {exc}', returncode=exc.exit_code) from exc

    def run(self, cfg, out, **options):
        raise NotImplementedError

    def write_json(self, name, payload):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path

    def record_artifacts(self, hashes):
        """Merge ``{file name: sha256}`` into the run's MANIFEST.json."""
        path = self.run_dir / 'MANIFEST.json'
        manifest = json.loads(path.read_text()) if path.exists() else {}
        manifest.update(hashes)
        return self.write_json('MANIFEST.json', manifest)

    def open_store(self, root, encoder_ids):
        """The synthesized corpus at ``root``, checked against the registry."""
        store = SlideStore(root)
        store.check_registry(self.registry, encoder_ids)
        return store
