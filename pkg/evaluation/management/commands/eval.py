import json

from aggregation.training import build_pairs, load_aggregator
from contextualizer.checkpoint import content_hash, load_model
from evaluation.benchmark import SLIDE_POOLINGS, TILE_TASKS, VARIANTS, context_benchmark, eval_settings, slide_benchmark
from evaluation.models import EvalResult
from pipeline.base import PipelineCommand
from ticon_lab.exceptions import ConfigError


class Command(PipelineCommand):
    help = 'Probe raw, isolated and contextualized features on a tile or slide task'

    def add_command_arguments(self, parser):
        parser.add_argument('--corpus', required=True, help='Directory written by synth')
        parser.add_argument('--encoder', required=True, help='Tile encoder whose grids are evaluated')
        parser.add_argument('--checkpoint', help='Contextualizer checkpoint (needed for iso and ctx)')
        parser.add_argument('--task', choices=list(TILE_TASKS) + ['slide'], default='tile')
        parser.add_argument(
            '--variant', action='append', choices=VARIANTS,
            help='Feature variant; may be repeated (default: every variant the task supports)',
        )
        parser.add_argument('--context-window', type=int, help='Contextualize in KxK blocks (0: whole slide)')
        parser.add_argument('--pooling', choices=SLIDE_POOLINGS, help='Slide pooling for --task slide')
        parser.add_argument('--aggregator', help='Aggregator checkpoint for tangle pooling')

    def run(self, cfg, out, **options):
        eval_cfg = eval_settings(cfg)
        task = options['task']
        encoder_id = options['encoder']
        store = self.open_store(options['corpus'], [encoder_id])
        params, checkpoint_hash = None, ''
        if options['checkpoint']:
            params, _ = load_model(options['checkpoint'])
            checkpoint_hash = content_hash(options['checkpoint'])
        window = options['context_window']
        if window is None:
            window = eval_cfg['context_window']
        if window < 0:
            raise ConfigError(f'--context-window must be >= 0, got {window}')

        if task == 'slide':
            reports = self.slide_reports(store, encoder_id, params, eval_cfg, cfg, options)
        else:
            variants = options['variant'] or (list(VARIANTS) if params is not None else ['raw'])
            self.stdout.write(f'Evaluating {task} on {encoder_id} ({", ".join(variants)})...')
            reports = context_benchmark(params, encoder_id, store, task, eval_cfg, cfg.seed, window, variants)

        out.mkdir(parents=True, exist_ok=True)
        with open(out / 'results.jsonl', 'a', encoding='utf-8') as handle:
            for report in reports:
                handle.write(json.dumps(report.as_dict(), sort_keys=True) + '\n')
        for report in reports:
            EvalResult.objects.create(
                task=task, variant=report.variant, metric=report.metric, value=report.value,
                chosen=report.chosen, encoder=encoder_id, context_window=window, seed=report.seed,
                checkpoint_hash=checkpoint_hash, output_dir=str(out), extra=report.extra,
            )
            self.stdout.write(f'  {report.variant:<16} {report.metric} = {report.value:.4f} (chosen {report.chosen:g})')
        self.stdout.write(self.style.SUCCESS(f'{len(reports)} results appended to {out / "results.jsonl"}'))

    def slide_reports(self, store, encoder_id, params, eval_cfg, cfg, options):
        variants = options['variant'] or ['ctx' if params is not None else 'raw']
        if 'iso' in variants:
            raise ConfigError('the slide task pools raw or ctx tokens; iso is a tile-level variant')
        pooling = options['pooling'] or ('tangle' if options['aggregator'] else 'meanpool')
        aggregator, agg_meta = None, {}
        if pooling == 'tangle':
            if not options['aggregator']:
                raise ConfigError('--pooling tangle needs --aggregator')
            aggregator, agg_meta = load_aggregator(options['aggregator'])
        max_tokens = cfg.get('aggregate', 'max_tokens')
        reports = []
        for variant in variants:
            if agg_meta and agg_meta.get('source') != variant:
                raise ConfigError(
                    f'aggregator was trained on {agg_meta.get("source")} tokens, cannot pool {variant} tokens'
                )
            self.stdout.write(f'Evaluating slide labels with {pooling} over {variant} {encoder_id} tokens...')
            pairs = build_pairs(store, store.slide_ids(), [encoder_id], variant, max_tokens, cfg.seed,
                                params=params)
            report = slide_benchmark(pairs, pooling, eval_cfg, cfg.seed, aggregator=aggregator, variant=variant)
            report.extra['encoder'] = encoder_id
            reports.append(report)
        return reports
