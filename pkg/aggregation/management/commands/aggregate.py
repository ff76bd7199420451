from aggregation.training import AggregateConfig, build_pairs, pretrain_aggregator
from contextualizer.checkpoint import content_hash, load_model
from pipeline.base import PipelineCommand
from pretraining.models import PretrainRun
from ticon_lab.exceptions import ConfigError


class Command(PipelineCommand):
    help = 'Pretrain the ABMIL slide aggregator against bulk gene vectors (symmetric InfoNCE)'

    def add_command_arguments(self, parser):
        parser.add_argument('--corpus', required=True, help='Directory written by synth')
        parser.add_argument('--source', choices=['raw', 'ctx'], default='ctx', help='Tile features to pool')
        parser.add_argument('--checkpoint', help='Contextualizer checkpoint (required for --source ctx)')
        parser.add_argument(
            '--encoder', action='append', default=[],
            help='Encoder id; repeat with --unified to draw one per slide',
        )
        parser.add_argument('--unified', action='store_true', default=None,
                            help='Draw a random source encoder per slide')

    def run(self, cfg, out, **options):
        agg_cfg = AggregateConfig.from_run_config(cfg, unified=options['unified'])
        source = options['source']
        params, meta = (None, {})
        if source == 'ctx':
            if not options['checkpoint']:
                raise ConfigError('--source ctx needs --checkpoint')
            params, meta = load_model(options['checkpoint'])
        encoder_ids = options['encoder']
        if not encoder_ids:
            encoder_ids = sorted(params.cfg.input_dims) if agg_cfg.unified and params else []
            if not encoder_ids:
                raise ConfigError('name the encoder with --encoder')
        store = self.open_store(options['corpus'], encoder_ids)

        self.stdout.write(self.style.SUCCESS(
            f'Aggregator pretraining on {source} features of {",".join(encoder_ids)} '
            f'({agg_cfg.iters} iterations, batch {agg_cfg.batch_size})...'
        ))
        build = dict(encoder_ids=encoder_ids, source=source, max_tokens=agg_cfg.max_tokens, seed=agg_cfg.seed,
                     params=params, unified=agg_cfg.unified)
        train_pairs = build_pairs(store, store.slide_ids('train'), **build)
        heldout_pairs = build_pairs(store, store.slide_ids('heldout'), **build)
        run_meta = {'source': source, 'encoders': encoder_ids, 'unified': agg_cfg.unified,
                    'registry_digest': self.registry.digest()}
        if source == 'ctx':
            run_meta['contextualizer_hash'] = content_hash(options['checkpoint'])
        result = pretrain_aggregator(train_pairs, heldout_pairs, agg_cfg, out, meta=run_meta)

        self.record_artifacts({result.path.name: result.digest})
        PretrainRun.objects.create(
            kind='AGGREGATE', mode=f'tangle-{source}' + ('-unified' if agg_cfg.unified else ''),
            encoders=','.join(encoder_ids), output_dir=str(out), checkpoint_hash=result.digest,
            seed=agg_cfg.seed, iterations=agg_cfg.iters,
            initial_loss=result.initial['loss'], final_loss=result.final['loss'],
        )
        ratio = result.final['top1'] / result.final['chance']
        style = self.style.SUCCESS if ratio >= 3.0 else self.style.WARNING
        self.stdout.write(style(
            f'Held-out retrieval top-1 {result.final["top1"]:.3f} ({ratio:.1f}x chance). '
            f'Aggregator written to {result.path}'
        ))
