from pipeline.base import PipelineCommand
from pretraining.corpus import WindowCorpus
from pretraining.models import PretrainRun
from pretraining.training import TrainConfig, adapt_config, adapt_unseen


class Command(PipelineCommand):
    help = 'Attach an unseen encoder to a pretrained model, training only its projector and head'

    def add_command_arguments(self, parser):
        parser.add_argument('--corpus', required=True, help='Directory written by synth')
        parser.add_argument('--checkpoint', required=True, help='Pretrained model checkpoint')
        parser.add_argument('--encoder', required=True, help='Registry id of the unseen encoder')
        parser.add_argument('--resume', help='Resumable adaptation checkpoint to continue from')

    def run(self, cfg, out, **options):
        unseen = options['encoder']
        spec = self.registry.get(unseen)
        store = self.open_store(options['corpus'], [unseen])
        train_cfg = adapt_config(TrainConfig.from_run_config(cfg), unseen, cfg)

        self.stdout.write(self.style.SUCCESS(
            f'Adapting {unseen} (d={spec.dim}) for {train_cfg.total_iters} iterations with the core frozen...'
        ))
        result = adapt_unseen(
            options['checkpoint'], unseen, spec.dim,
            WindowCorpus(store, 'train', [unseen]), WindowCorpus(store, 'heldout', [unseen]),
            train_cfg, out, resume=options['resume'], registry_digest=self.registry.digest(),
        )
        self.record_artifacts({result.model_path.name: result.model_hash})
        PretrainRun.objects.create(
            kind='ADAPT', mode=train_cfg.mode, encoders=unseen, output_dir=str(out),
            checkpoint_hash=result.model_hash, seed=train_cfg.seed, iterations=result.iterations,
            initial_loss=result.initial_heldout, final_loss=result.final_heldout,
        )
        self.stdout.write(self.style.SUCCESS(
            f'Self-reconstruction loss {result.initial_heldout:.4f} (untrained projector) -> '
            f'{result.final_heldout:.4f}. Model written to {result.model_path}'
        ))
