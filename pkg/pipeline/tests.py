import json
import logging
import shutil
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command, load_command_class
from django.test import SimpleTestCase, TestCase, tag

from aggregation.training import build_pairs, load_aggregator
from contextualizer.checkpoint import content_hash, load_model
from evaluation.benchmark import context_benchmark, eval_settings, slide_benchmark
from evaluation.models import EvalResult
from pipeline import cli
from pipeline.config import RunConfig
from pretraining.models import PretrainRun
from slides.gridio import read_grid
from slides.store import SlideStore
from ticon_lab.exceptions import ConfigError

logger = logging.getLogger(__name__)


class RunConfigTests(SimpleTestCase):
    def test_file_grammar(self):
        cfg = RunConfig().load_text(
            '# a run\n'
            '[run]\n'
            'seed = 7   # trailing comment\n'
            'deterministic = off\n'
            '\n'
            '[pretrain]\n'
            'base_lr = 5e-4\n'
            'mode = individual\n'
            'input_encoders = enc48, enc64\n'
        )
        self.assertEqual(cfg.seed, 7)
        self.assertIs(cfg.get('run', 'deterministic'), False)
        self.assertEqual(cfg.get('pretrain', 'base_lr'), 5e-4)
        self.assertEqual(cfg.get('pretrain', 'mode'), 'individual')
        self.assertEqual(cfg.list('pretrain', 'input_encoders'), ['enc48', 'enc64'])
        self.assertEqual(cfg.list('eval', 'ridge_lambdas', float)[0], 0.01)

    def test_defaults_are_not_shared(self):
        cfg = RunConfig()
        cfg.set('run', 'seed', '3')
        self.assertNotEqual(RunConfig().seed, 3)

    def test_errors(self):
        for text in ('[nowhere]\n', '[run]\nunknown = 1\n', 'seed = 1\n', '[run]\nseed\n', '[run]\nseed = many\n',
                     '[run]\ndeterministic = maybe\n'):
            with self.subTest(text=text):
                with self.assertRaises(ConfigError):
                    RunConfig().load_text(text)
        with self.assertRaises(ConfigError):
            RunConfig().apply_overrides(['seed=1'])
        with self.assertRaises(ConfigError):
            RunConfig().list('eval', 'distance', int)
        with self.assertRaises(ConfigError):
            RunConfig.resolve(threads=0)
        with self.assertRaises(ConfigError):
            RunConfig.resolve(config_path='/nonexistent/run.cfg')

    def test_precedence(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.cfg'
            path.write_text('[run]\nseed = 5\n[model]\nheads = 2\n')
            cfg = RunConfig.resolve(config_path=path, overrides=['model.heads=8', 'run.seed=6'], seed=9, threads=3)
        self.assertEqual(cfg.get('model', 'heads'), 8)
        self.assertEqual(cfg.seed, 9)
        self.assertEqual(cfg.get('run', 'threads'), 3)

    def test_resolved_file_reloads(self):
        cfg = RunConfig.resolve(overrides=['aggregate.temperature=0.07', 'aggregate.unified=yes'])
        with tempfile.TemporaryDirectory() as tmp:
            again = RunConfig().load_file(cfg.write(tmp))
        self.assertEqual(again.values, cfg.values)


class CliTests(SimpleTestCase):
    def run_cli(self, argv):
        out, err = StringIO(), StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = cli.run(argv)
        return code, out.getvalue(), err.getvalue()

    def test_usage(self):
        code, _, err = self.run_cli([])
        self.assertEqual(code, 2)
        self.assertIn('subcommands:', err)
        code, out, _ = self.run_cli(['--help'])
        self.assertEqual(code, 0)
        self.assertIn('contextualize', out)

    def test_unknown_subcommand(self):
        code, _, err = self.run_cli(['train'])
        self.assertEqual(code, 2)
        self.assertIn("unknown subcommand 'train'", err)

    def command_exit(self, name, argv):
        with redirect_stderr(StringIO()), redirect_stdout(StringIO()):
            command = load_command_class(cli.get_commands()[name], name)
            with self.assertRaises(SystemExit) as ctx:
                command.run_from_argv([cli.PROG, name, *argv])
        return ctx.exception.code

    def test_bad_flag_exits_2(self):
        self.assertEqual(self.command_exit('report', ['--bogus']), 2)

    def test_config_error_exits_2(self):
        self.assertEqual(self.command_exit('report', ['--set', 'nosuch.key=1']), 2)

    def test_format_error_exits_3(self):
        with tempfile.TemporaryDirectory() as tmp:
            bad = Path(tmp) / 'bad.tck'
            bad.write_bytes(b'not a checkpoint at all')
            grid = Path(tmp) / 'in.teg'
            grid.write_bytes(b'')
            code = self.command_exit('contextualize', [
                '--checkpoint', str(bad), '--encoder', 'enc48', '--in', str(grid), '--out', str(Path(tmp) / 'o.teg'),
            ])
        self.assertEqual(code, 3)

    def test_threads_help_names_the_single_threaded_commands(self):
        def help_text(name):
            command = load_command_class(cli.get_commands()[name], name)
            return ' '.join(command.create_parser(cli.PROG, name).format_help().split())

        for name in ('pretrain', 'adapt', 'aggregate'):
            with self.subTest(command=name):
                self.assertIn('single thread', help_text(name))
        self.assertNotIn('single thread', help_text('synth'))
        self.assertIn('do not depend on the count', help_text('synth'))


class RunRecordTests(SimpleTestCase):
    def test_output_directory_is_self_describing(self):
        record = {'task': 'tile', 'variant': 'raw', 'metric': 'f1_macro', 'value': 0.5, 'seed': 1,
                  'extra': {'encoder': 'enc48', 'window': 0}}
        with tempfile.TemporaryDirectory() as tmp:
            results = Path(tmp) / 'results.jsonl'
            results.write_text(json.dumps(record) + '\n')
            out = Path(tmp) / 'report'
            call_command('report', str(results), out=str(out), set=['run.seed=99'], stdout=StringIO())
            self.assertIn('seed = 99', (out / 'resolved.cfg').read_text())
            registry = json.loads((out / 'registry.json').read_text())
            self.assertEqual(len(registry['digest']), 64)
            self.assertTrue({'enc48', 'enc64', 'enc96'} <= {e['id'] for e in registry['encoders']})
            self.assertIn('tile', (out / 'report.txt').read_text())


# Small enough for a desk run; every stage still goes through its command.
DEMO = [
    'synth.slides=16', 'synth.rows=12', 'synth.cols=12',
    'model.d_model=16', 'model.encoder_depth=1', 'model.heads=2',
    'pretrain.total_iters=20', 'pretrain.warmup_iters=5', 'pretrain.batch_size=4', 'pretrain.heldout_items=8',
    'pretrain.eval_interval=10', 'pretrain.checkpoint_interval=10',
    'adapt.adapt_iters=10', 'adapt.warmup_iters=2', 'adapt.batch_size=4',
    'aggregate.iters=10', 'aggregate.batch_size=4', 'aggregate.warmup_iters=2', 'aggregate.max_tokens=32',
    'aggregate.hidden=8', 'aggregate.slide_dim=8', 'aggregate.eval_interval=5',
    'eval.tiles_per_slide=16', 'eval.pca_dims=8', 'eval.probe_iters=50',
]


@tag('slow')
class EndToEndTests(TestCase):
    def call(self, name, *args, **options):
        call_command(name, *args, set=DEMO, seed=5, stdout=StringIO(), **options)

    def test_demo_pipeline(self):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            corpus, model = tmp / 'corpus', tmp / 'pretrain' / 'model.tck'
            self.call('synth', out=str(corpus))
            self.assertTrue((corpus / 'manifest.json').exists())

            self.call('pretrain', corpus=str(corpus), out=str(tmp / 'pretrain'))
            manifest = json.loads((tmp / 'pretrain' / 'MANIFEST.json').read_text())
            self.assertEqual(manifest['model.tck'], content_hash(model))
            run = PretrainRun.objects.get(kind='PRETRAIN')
            self.assertLess(run.final_loss, run.initial_loss)

            self.call('adapt', corpus=str(corpus), checkpoint=str(model), encoder='enc56', out=str(tmp / 'adapt'))
            adapted, meta = load_model(tmp / 'adapt' / 'model.tck')
            self.assertIn('enc56', adapted.cfg.input_dims)
            self.assertEqual(meta['adapted'], 'enc56')

            grid_in = corpus / 'grids' / 'enc48' / 'slide000.teg'
            self.call('contextualize', checkpoint=str(model), encoder='enc48', grid_in=str(grid_in),
                      out=str(tmp / 'ctx' / 'slide000.teg'))
            contextualized = read_grid(tmp / 'ctx' / 'slide000.teg')
            self.assertEqual(contextualized.encoder_id, 'ticon:enc48')
            self.assertEqual(contextualized.dim, 16)

            self.call('eval', corpus=str(corpus), checkpoint=str(model), encoder='enc48', task='tile-aliased',
                      out=str(tmp / 'eval'))
            self.assertEqual(
                sorted(EvalResult.objects.values_list('variant', flat=True)), ['ctx', 'iso', 'raw'],
            )

            self.call('aggregate', corpus=str(corpus), source='ctx', checkpoint=str(model), encoder=['enc48'],
                      out=str(tmp / 'tangle'))
            self.call('eval', corpus=str(corpus), checkpoint=str(model), encoder='enc48', task='slide',
                      aggregator=str(tmp / 'tangle' / 'aggregator.tck'), out=str(tmp / 'eval'))
            self.assertTrue(EvalResult.objects.filter(task='slide', variant='tangle:ctx').exists())

            records = (tmp / 'eval' / 'results.jsonl').read_text().splitlines()
            self.assertEqual(len(records), 4)
            self.call('report', str(tmp / 'eval'), xlsx=str(tmp / 'report.xlsx'), out=str(tmp / 'report'))
            table = json.loads((tmp / 'report' / 'report.json').read_text())
            self.assertIn('ctx-raw', table['deltas'])
            self.assertTrue((tmp / 'report.xlsx').exists())

    def test_resumed_pretraining_is_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            corpus = tmp / 'corpus'
            self.call('synth', out=str(corpus))
            self.call('pretrain', corpus=str(corpus), out=str(tmp / 'straight'))
            self.call('pretrain', corpus=str(corpus), out=str(tmp / 'split'), stop_at=10)
            self.call('pretrain', corpus=str(corpus), out=str(tmp / 'split'),
                      resume=str(tmp / 'split' / 'checkpoints' / 'train_state.tck'))
            self.assertEqual(content_hash(tmp / 'split' / 'model.tck'), content_hash(tmp / 'straight' / 'model.tck'))
            self.assertEqual((tmp / 'split' / 'metrics.jsonl').read_bytes(),
                             (tmp / 'straight' / 'metrics.jsonl').read_bytes())

    def test_two_demo_runs_are_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            for name in ('first', 'second'):
                run = tmp / name
                self.call('synth', out=str(run / 'corpus'))
                self.call('pretrain', corpus=str(run / 'corpus'), out=str(run / 'pretrain'))
                self.call('eval', corpus=str(run / 'corpus'), checkpoint=str(run / 'pretrain' / 'model.tck'),
                          encoder='enc48', task='tile-aliased', out=str(run / 'eval'))
            for relative in ('pretrain/metrics.jsonl', 'pretrain/heldout.jsonl', 'eval/results.jsonl'):
                with self.subTest(file=relative):
                    self.assertEqual((tmp / 'first' / relative).read_bytes(), (tmp / 'second' / relative).read_bytes())
            self.assertEqual(content_hash(tmp / 'first' / 'pretrain' / 'model.tck'),
                             content_hash(tmp / 'second' / 'pretrain' / 'model.tck'))


ACCEPTANCE_SEEDS = (1, 2, 3, 4, 5)


@tag('slow')
class AcceptanceTests(TestCase):
    """Orderings a desk-trained model reproduces, averaged over five seeds.

    Every seed runs the stock desk configuration end to end, so this class
    takes the better part of an hour on a laptop CPU.
    """

    @classmethod
    def setUpTestData(cls):
        root = Path(tempfile.mkdtemp())
        cls.addClassCleanup(shutil.rmtree, root, ignore_errors=True)
        cls.tile, cls.slide = {}, {}
        cls.window_gain = {4: [], 12: []}
        cls.adapt_gain, cls.frozen_intact = [], []
        for seed in ACCEPTANCE_SEEDS:
            cls.run_seed(root / f'seed{seed}', seed)
        logger.info('acceptance means: %s', json.dumps(cls.means(), sort_keys=True))

    @classmethod
    def run_seed(cls, work, seed):
        quiet = dict(seed=seed, stdout=StringIO())
        corpus, model_path = work / 'corpus', work / 'pretrain' / 'model.tck'
        call_command('synth', out=str(corpus), **quiet)
        call_command('pretrain', corpus=str(corpus), out=str(work / 'pretrain'), **quiet)
        params, _ = load_model(model_path)
        store = SlideStore(corpus)
        cfg = RunConfig.resolve(seed=seed)
        eval_cfg = eval_settings(cfg)

        for task in ('tile-aliased', 'tile-nonaliased', 'tile'):
            for report in context_benchmark(params, 'enc48', store, task, eval_cfg, seed):
                cls.tile.setdefault(f'{task}/{report.variant}', []).append(report.value)
        for window in cls.window_gain:
            raw, ctx = context_benchmark(params, 'enc48', store, 'tile-aliased', eval_cfg, seed, window=window,
                                         variants=('raw', 'ctx'))
            cls.window_gain[window].append(ctx.value - raw.value)

        call_command('adapt', corpus=str(corpus), checkpoint=str(model_path), encoder='enc56',
                     out=str(work / 'adapt'), **quiet)
        adapted, _ = load_model(work / 'adapt' / 'model.tck')
        raw, ctx = context_benchmark(adapted, 'enc56', store, 'tile-aliased', eval_cfg, seed, variants=('raw', 'ctx'))
        cls.adapt_gain.append(ctx.value - raw.value)
        cls.frozen_intact.append(all(adapted[n].data.tobytes() == params[n].data.tobytes() for n in params.names()))

        max_tokens = cfg.get('aggregate', 'max_tokens')
        for source in ('raw', 'ctx'):
            options = {'checkpoint': str(model_path)} if source == 'ctx' else {}
            call_command('aggregate', corpus=str(corpus), source=source, encoder=['enc48'],
                         out=str(work / f'tangle-{source}'), **options, **quiet)
            aggregator, _ = load_aggregator(work / f'tangle-{source}' / 'aggregator.tck')
            pairs = build_pairs(store, store.slide_ids(), ['enc48'], source, max_tokens, seed, params=params)
            report = slide_benchmark(pairs, 'tangle', eval_cfg, seed, aggregator=aggregator, variant=source)
            cls.slide.setdefault(f'tangle:{source}', []).append(report.value)
            if source == 'ctx':
                report = slide_benchmark(pairs, 'meanpool', eval_cfg, seed, variant=source)
                cls.slide.setdefault('meanpool:ctx', []).append(report.value)

    @classmethod
    def means(cls):
        values = {**cls.tile, **cls.slide, 'window4/gain': cls.window_gain[4], 'window12/gain': cls.window_gain[12],
                  'adapt/gain': cls.adapt_gain}
        return {name: float(np.mean(v)) for name, v in values.items()}

    def test_context_beats_both_baselines_on_the_aliased_pair(self):
        means = self.means()
        self.assertGreaterEqual(means['tile-aliased/ctx'], means['tile-aliased/iso'], means)
        self.assertGreaterEqual(means['tile-aliased/ctx'] - means['tile-aliased/raw'], 0.10, means)

    def test_context_keeps_the_nonaliased_classes(self):
        means = self.means()
        self.assertGreaterEqual(means['tile-nonaliased/ctx'], means['tile-nonaliased/raw'] - 0.02, means)

    def test_isolated_mode_is_not_worse_than_raw(self):
        means = self.means()
        self.assertGreaterEqual(means['tile/iso'], means['tile/raw'] - 0.02, means)

    def test_larger_windows_keep_the_gain(self):
        means = self.means()
        self.assertGreater(means['window4/gain'], 0.0, means)
        self.assertGreaterEqual(means['window12/gain'], 0.8 * means['window4/gain'], means)

    def test_adapted_encoder_gains_context_with_a_frozen_core(self):
        self.assertTrue(all(self.frozen_intact))
        self.assertGreaterEqual(self.means()['adapt/gain'], 0.05, self.means())

    def test_tangle_on_context_leads_the_slide_task(self):
        means = self.means()
        self.assertGreaterEqual(means['tangle:ctx'] - means['tangle:raw'], 0.03, means)
        self.assertGreaterEqual(means['tangle:ctx'] - means['meanpool:ctx'], 0.03, means)
