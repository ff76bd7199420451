from contextualizer.checkpoint import load_model
from pipeline.base import PipelineCommand
from pretraining.compare import compare_targets
from pretraining.corpus import WindowCorpus
from pretraining.training import TrainConfig


class Command(PipelineCommand):
    help = 'Compare multi-target and single-target models on cross-encoder reconstruction'

    def add_command_arguments(self, parser):
        parser.add_argument('--corpus', required=True, help='Directory written by synth')
        parser.add_argument('--multi', required=True, help='Model trained with --mode omni-multi')
        parser.add_argument('--single', required=True, help='Model trained with --mode omni-single')

    def run(self, cfg, out, **options):
        train_cfg = TrainConfig.from_run_config(cfg)
        encoder_ids = list(train_cfg.input_ids)
        store = self.open_store(options['corpus'], encoder_ids)
        items = WindowCorpus(store, 'heldout', encoder_ids).fixed_items(
            train_cfg.seed, train_cfg.heldout_items, train_cfg.mask_ratio, train_cfg.prediction_ratio,
        )
        multi, _ = load_model(options['multi'])
        single, _ = load_model(options['single'])
        record = compare_targets(multi, single, items, encoder_ids)
        self.write_json('compare.json', record)

        for target_id, row in record['targets'].items():
            self.stdout.write(
                f'{target_id:>8}  multi {row["multi_target"]:.4f}  single {row["single_target"]:.4f}'
                f'  {"multi" if row["multi_wins"] else "single"}'
            )
        summary = f'Multi-target wins {record["wins"]} of {len(encoder_ids)} targets (expected >= {record["required"]})'
        if record['flagged']:
            self.stdout.write(self.style.WARNING(f'FLAGGED: {summary}'))
        else:
            self.stdout.write(self.style.SUCCESS(summary))
