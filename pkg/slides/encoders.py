# slides/encoders.py
"""Frozen mock tile encoders and their registry."""
import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from django.conf import settings

from slides.grids import EmbeddingGrid, pool_quadrants
from slides.synth import generate_slide
from ticon_lab.exceptions import ConfigError, RegistryError
from ticon_lab.seeding import stream

logger = logging.getLogger(__name__)

SCALES = ('full-tile', 'quadrant')
HIDDEN = 64


@dataclass(frozen=True)
class MockEncoderSpec:
    encoder_id: str
    dim: int
    operating_scale: str
    seed: int
    latent_dim: int
    role: str = 'pretrain'

    def __post_init__(self):
        if self.operating_scale not in SCALES:
            raise ConfigError(f'{self.encoder_id}: unknown operating scale {self.operating_scale!r}')

    @cached_property
    def frozen_weights(self):
        """Fixed 2-layer map latent -> tanh(hidden) -> dim, drawn once from the seed."""
        rng = stream(self.seed, 'mock-encoder', self.encoder_id)
        return {
            'w1': rng.standard_normal((self.latent_dim, HIDDEN)) / np.sqrt(self.latent_dim),
            'b1': 0.1 * rng.standard_normal(HIDDEN),
            'w2': rng.standard_normal((HIDDEN, self.dim)) / np.sqrt(HIDDEN),
            'b2': 0.1 * rng.standard_normal(self.dim),
        }

    def apply(self, latents):
        """Map (..., L) latents to (..., dim) embeddings, one tile at a time."""
        w = self.frozen_weights
        return np.tanh(latents @ w['w1'] + w['b1']) @ w['w2'] + w['b2']

    def describe(self):
        return {
            'id': self.encoder_id, 'dim': self.dim, 'scale': self.operating_scale,
            'seed': self.seed, 'role': self.role,
        }


class EncoderRegistry:
    def __init__(self, specs):
        self._specs = {}
        for spec in specs:
            if spec.encoder_id in self._specs:
                raise ConfigError(f'duplicate encoder id {spec.encoder_id!r}')
            self._specs[spec.encoder_id] = spec
        seeds = [s.seed for s in specs]
        if len(set(seeds)) != len(seeds):
            raise ConfigError('mock encoders must use distinct seeds')

    @classmethod
    def from_settings(cls, latent_dim, entries=None):
        entries = settings.TICON_ENCODERS if entries is None else entries
        return cls([
            MockEncoderSpec(
                encoder_id=e['id'], dim=int(e['dim']), operating_scale=e['scale'],
                seed=int(e['seed']), latent_dim=latent_dim, role=e.get('role', 'pretrain'),
            )
            for e in entries
        ])

    def __contains__(self, encoder_id):
        return encoder_id in self._specs

    def __len__(self):
        return len(self._specs)

    def get(self, encoder_id):
        try:
            return self._specs[encoder_id]
        except KeyError:
            raise RegistryError(f'encoder {encoder_id!r} is not in the registry') from None

    def ids(self, role=None):
        return [i for i, s in self._specs.items() if role is None or s.role == role]

    def dims(self, ids=None):
        return {i: self.get(i).dim for i in (ids if ids is not None else self.ids())}

    def describe(self):
        return [s.describe() for s in self._specs.values()]

    def digest(self):
        canonical = json.dumps(self.describe(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def as_stored(values):
    """Round to float32 so cached grid files reproduce the in-memory grid exactly."""
    return values.astype(np.float32).astype(np.float64)


def encode_tiles(slide, spec, registry=None):
    """Embed every tile of ``slide`` independently; background tiles become zeros."""
    if registry is not None:
        spec = registry.get(spec if isinstance(spec, str) else spec.encoder_id)
    if spec.operating_scale == 'full-tile':
        embeddings = spec.apply(slide.tile_latents)
        return EmbeddingGrid(spec.encoder_id, as_stored(embeddings), slide.validity.copy())

    fine_validity = np.repeat(np.repeat(slide.validity, 2, axis=0), 2, axis=1)
    fine = EmbeddingGrid(spec.encoder_id, spec.apply(slide.quadrant_latents), fine_validity)
    coarse = pool_quadrants(fine)
    coarse.embeddings = as_stored(coarse.embeddings)
    return coarse


GOLDEN_SLIDE_SEED = 424242
GOLDEN_TILE = (3, 5)


def golden_embeddings(registry, cfg):
    """Embedding of one fixed tile of one fixed slide, per registry encoder."""
    slide = generate_slide(GOLDEN_SLIDE_SEED, cfg, slide_id='golden')
    r, c = GOLDEN_TILE
    slide.validity[r, c] = True
    return {
        'slide_seed': GOLDEN_SLIDE_SEED,
        'tile': list(GOLDEN_TILE),
        'embeddings': {
            encoder_id: encode_tiles(slide, encoder_id, registry).embeddings[r, c].tolist()
            for encoder_id in registry.ids()
        },
    }
