from pipeline.base import PipelineCommand
from pretraining.corpus import WindowCorpus
from pretraining.models import PretrainRun
from pretraining.training import TrainConfig, model_config_for, pretrain


class Command(PipelineCommand):
    help = 'Pretrain the contextualizer with omni-feature masked modeling'

    def add_command_arguments(self, parser):
        parser.add_argument('--corpus', required=True, help='Directory written by synth')
        parser.add_argument(
            '--mode', choices=['omni-multi', 'omni-single', 'individual'],
            help='Training mode (default: pretrain.mode)',
        )
        parser.add_argument('--encoder', help='The single encoder of --mode individual')
        parser.add_argument('--resume', help='Resumable checkpoint to continue from')
        parser.add_argument('--stop-at', type=int, help='Stop after this iteration (resume later)')

    def run(self, cfg, out, **options):
        train_cfg = TrainConfig.from_run_config(cfg, mode=options['mode'], encoder=options['encoder'])
        encoder_ids = sorted(set(train_cfg.input_ids) | set(train_cfg.target_ids))
        store = self.open_store(options['corpus'], encoder_ids)
        model_section = cfg.section('model')
        model_cfg = model_config_for(train_cfg, self.registry.dims(encoder_ids), **model_section)

        self.stdout.write(self.style.SUCCESS(
            f'Pretraining ({train_cfg.mode}, inputs {",".join(train_cfg.input_ids)}, '
            f'{train_cfg.total_iters} iterations)...'
        ))
        result = pretrain(
            WindowCorpus(store, 'train', encoder_ids),
            WindowCorpus(store, 'heldout', encoder_ids),
            train_cfg, model_cfg, out,
            resume=options['resume'], stop_at=options['stop_at'],
            registry_digest=self.registry.digest(),
        )
        if result.iterations < train_cfg.total_iters:
            self.stdout.write(self.style.WARNING(
                f'Stopped at iteration {result.iterations}; resume with --resume {result.model_path}'
            ))
            return

        self.record_artifacts({result.model_path.name: result.model_hash})
        PretrainRun.objects.create(
            kind='PRETRAIN', mode=train_cfg.mode, encoders=','.join(encoder_ids), output_dir=str(out),
            checkpoint_hash=result.model_hash, seed=train_cfg.seed, iterations=result.iterations,
            initial_loss=result.initial_heldout, final_loss=result.final_heldout,
        )
        reduction = 1.0 - result.final_heldout / result.initial_heldout
        style = self.style.SUCCESS if reduction >= 0.5 else self.style.WARNING
        self.stdout.write(style(
            f'Held-out loss {result.initial_heldout:.4f} -> {result.final_heldout:.4f} '
            f'({reduction:.0%} reduction). Model written to {result.model_path}'
        ))
