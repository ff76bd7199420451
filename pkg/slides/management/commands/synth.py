import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from pipeline.base import PipelineCommand
from slides.candidates import sample_candidates
from slides.encoders import EncoderRegistry, encode_tiles, golden_embeddings
from slides.previews import save_preview
from slides.store import SlideStore
from slides.synth import SynthConfig, generate_slide
from ticon_lab.exceptions import ConfigError
from ticon_lab.seeding import derive_seed, stream

GOLDEN_PATH = Path(__file__).resolve().parents[2] / 'fixtures' / 'golden_embeddings.json'


def synth_config(cfg):
    section = cfg.section('synth')
    alias_pair = tuple(cfg.list('synth', 'alias_pair', int))
    if len(alias_pair) != 2:
        raise ConfigError(f'synth.alias_pair must name two classes, got {section["alias_pair"]!r}')
    synth_cfg = SynthConfig(
        rows=section['rows'], cols=section['cols'], regions=section['regions'],
        latent_dim=section['latent_dim'], genes=section['genes'], alias_pair=alias_pair,
        background_fraction=section['background_fraction'], tile_size=section['tile_size'],
    )
    synth_cfg.validate()
    return synth_cfg


def split_slides(slide_ids, heldout_fraction, seed):
    """Slide-level train / heldout split for pretraining."""
    order = stream(seed, 'synth', 'split').permutation(len(slide_ids))
    n_heldout = max(1, int(round(heldout_fraction * len(slide_ids))))
    heldout = sorted(slide_ids[i] for i in order[:n_heldout])
    return {'train': [s for s in slide_ids if s not in heldout], 'heldout': heldout}


class Command(PipelineCommand):
    help = 'Generate synthetic slides, encode them with every registry encoder and sample pretraining windows'
    parallel = True

    def add_command_arguments(self, parser):
        parser.add_argument('--previews', action='store_true', help='Write a PNG region map per slide')
        parser.add_argument(
            '--write-golden', action='store_true',
            help='Regenerate the golden embedding fixture used by the test suite',
        )

    def run(self, cfg, out, **options):
        synth_cfg = synth_config(cfg)
        section = cfg.section('synth')
        seed = cfg.seed
        store = SlideStore(out)
        slide_ids = [f'slide{i:03d}' for i in range(section['slides'])]
        if len(slide_ids) < 2:
            raise ConfigError('synth.slides must be at least 2 (train and heldout)')
        encoder_ids = self.registry.ids()

        self.stdout.write(self.style.SUCCESS(
            f'Synthesizing {len(slide_ids)} slides of {synth_cfg.rows}x{synth_cfg.cols} tiles '
            f'for {len(encoder_ids)} encoders...'
        ))

        def build(slide_id):
            slide = generate_slide(derive_seed(seed, 'synth', 'slide', slide_id), synth_cfg, slide_id=slide_id)
            store.save_slide(slide)
            for encoder_id in encoder_ids:
                store.save_grid(slide_id, encode_tiles(slide, encoder_id, self.registry))
            if options['previews']:
                save_preview(slide, Path(out) / 'previews')
            windows = sample_candidates(
                slide, section['candidate_k'], section['min_tissue'], section['max_per_slide'], seed,
            )
            return slide_id, windows

        with ThreadPoolExecutor(max_workers=cfg.get('run', 'threads')) as pool:
            windows = dict(pool.map(build, slide_ids))

        splits = split_slides(slide_ids, section['heldout_fraction'], seed)
        store.write_manifest(synth_cfg, splits, self.registry.digest(), encoder_ids)
        store.write_candidates({
            split: [c for slide_id in ids for c in windows[slide_id]] for split, ids in splits.items()
        })
        n_windows = sum(len(w) for w in windows.values())

        if options['write_golden']:
            GOLDEN_PATH.parent.mkdir(parents=True, exist_ok=True)
            default_cfg = SynthConfig()
            golden = golden_embeddings(EncoderRegistry.from_settings(default_cfg.latent_dim), default_cfg)
            GOLDEN_PATH.write_text(json.dumps(golden, indent=1))
            self.stdout.write(f'Golden embeddings written to {GOLDEN_PATH}')

        self.stdout.write(self.style.SUCCESS(
            f'Corpus written to {out}: {len(splits["train"])} train / {len(splits["heldout"])} heldout slides, '
            f'{n_windows} {section["candidate_k"]}x{section["candidate_k"]} windows'
        ))
