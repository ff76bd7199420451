# slides/store.py
"""On-disk layout of a synthesized corpus.

    <root>/manifest.json              slide ids, splits, synth config, registry digest
    <root>/slides/<slide_id>.npz      SyntheticSlide arrays
    <root>/grids/<encoder>/<slide_id>.teg
    <root>/candidates.json            pretraining windows per split
"""
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from slides.candidates import Candidate
from slides.gridio import read_grid, write_grid
from slides.synth import SynthConfig, SyntheticSlide
from ticon_lab.exceptions import DataError, RegistryError

logger = logging.getLogger(__name__)

_ARRAYS = ('region_labels', 'tile_latents', 'quadrant_latents', 'tile_labels', 'gene_vector', 'validity')


class SlideStore:
    def __init__(self, root):
        self.root = Path(root)
        self._grid_cache = {}
        self._manifest = None

    # writing

    def save_slide(self, slide):
        path = self.root / 'slides' / f'{slide.slide_id}.npz'
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            seed=np.array(slide.seed, dtype=np.uint64),
            slide_label=np.array(slide.slide_label),
            **{name: getattr(slide, name) for name in _ARRAYS},
        )

    def save_grid(self, slide_id, grid):
        write_grid(grid, self.grid_path(slide_id, grid.encoder_id))

    def write_manifest(self, synth_cfg, splits, registry_digest, encoder_ids):
        manifest = {
            'synth': {**asdict(synth_cfg), 'alias_pair': list(synth_cfg.alias_pair)},
            'splits': splits,
            'registry_digest': registry_digest,
            'encoders': list(encoder_ids),
        }
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True))
        self._manifest = manifest

    def write_candidates(self, candidates_by_split):
        payload = {split: [c.as_dict() for c in cands] for split, cands in candidates_by_split.items()}
        (self.root / 'candidates.json').write_text(json.dumps(payload, indent=1, sort_keys=True))

    # reading

    @property
    def manifest(self):
        if self._manifest is None:
            path = self.root / 'manifest.json'
            if not path.exists():
                raise DataError(f'{self.root} is not a synthesized corpus (no manifest.json)')
            self._manifest = json.loads(path.read_text())
        return self._manifest

    @property
    def synth_config(self):
        cfg = dict(self.manifest['synth'])
        cfg['alias_pair'] = tuple(cfg['alias_pair'])
        return SynthConfig(**cfg)

    def slide_ids(self, split=None):
        splits = self.manifest['splits']
        if split is None:
            return [s for ids in splits.values() for s in ids]
        return list(splits[split])

    def encoder_ids(self):
        return list(self.manifest['encoders'])

    def check_registry(self, registry, encoder_ids):
        for encoder_id in encoder_ids:
            if encoder_id not in registry:
                raise RegistryError(f'encoder {encoder_id!r} is not in the registry')
            if encoder_id not in self.manifest['encoders']:
                raise RegistryError(f'corpus {self.root} has no grids for encoder {encoder_id!r}')
        if self.manifest['registry_digest'] != registry.digest():
            raise RegistryError(f'corpus {self.root} was encoded with a different encoder registry')

    def grid_path(self, slide_id, encoder_id):
        return self.root / 'grids' / encoder_id / f'{slide_id}.teg'

    def load_grid(self, slide_id, encoder_id):
        key = (slide_id, encoder_id)
        if key not in self._grid_cache:
            path = self.grid_path(slide_id, encoder_id)
            if not path.exists():
                raise RegistryError(f'no {encoder_id!r} grid for slide {slide_id} in {self.root}')
            self._grid_cache[key] = read_grid(path)
        return self._grid_cache[key]

    def load_slide(self, slide_id):
        path = self.root / 'slides' / f'{slide_id}.npz'
        if not path.exists():
            raise DataError(f'slide {slide_id} missing from {self.root}')
        with np.load(path) as data:
            return SyntheticSlide(
                slide_id=slide_id,
                seed=int(data['seed']),
                slide_label=int(data['slide_label']),
                **{name: data[name].copy() for name in _ARRAYS},
            )

    def candidates(self, split):
        path = self.root / 'candidates.json'
        if not path.exists():
            raise DataError(f'{self.root} has no candidates.json')
        return [Candidate.from_dict(c) for c in json.loads(path.read_text())[split]]
