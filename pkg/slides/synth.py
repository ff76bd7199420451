# slides/synth.py
"""Synthetic slides whose aliased tile classes need neighborhood context.

Layout of a slide:
  * a coarse compartment field splits the tissue into two kinds of areas;
  * each compartment kind holds one class of the aliased pair plus its own
    partner class, and both kinds share the remaining classes;
  * the aliased pair's tiles draw their latents from one common
    distribution, so a tile alone cannot tell them apart, while the partner
    classes around it can.
Class geometry (latent means, gene mixing) comes from the world seed and is
shared by every slide; the slide seed drives everything else.
"""
import logging
from dataclasses import dataclass

import numpy as np

from ticon_lab.exceptions import ConfigError
from ticon_lab.seeding import stream

logger = logging.getLogger(__name__)

WORLD_SEED = 71002024
LATENT_NOISE = 0.6
QUADRANT_NOISE = 0.3
MEAN_NORM = 3.0
GENE_NOISE = 0.1
SMOOTHING_ROUNDS = 3
COMPARTMENT_CELL = 8
ROLE_CELL = 2
BACKGROUND_CELL = 4


@dataclass(frozen=True)
class SynthConfig:
    rows: int = 24
    cols: int = 24
    regions: int = 5
    latent_dim: int = 16
    genes: int = 32
    alias_pair: tuple = (0, 1)
    background_fraction: float = 0.15
    tile_size: int = 512
    world_seed: int = WORLD_SEED

    def validate(self):
        if self.regions < 2:
            raise ConfigError(f'need at least 2 region classes, got {self.regions}')
        if self.rows < 4 or self.cols < 4:
            raise ConfigError(f'slides must be at least 4x4 tiles, got {self.rows}x{self.cols}')
        a, b = self.alias_pair
        if a == b or not (0 <= a < self.regions and 0 <= b < self.regions):
            raise ConfigError(f'alias_pair {self.alias_pair} must name two distinct classes in [0, {self.regions})')
        if not 0.0 <= self.background_fraction < 1.0:
            raise ConfigError(f'background_fraction {self.background_fraction} leaves no tissue')

    @property
    def partners(self):
        """(partner of alias a, partner of alias b, shared classes)."""
        others = [c for c in range(self.regions) if c not in self.alias_pair]
        if len(others) >= 2:
            return others[0], others[1], others[2:]
        return None, None, others


@dataclass
class SyntheticSlide:
    slide_id: str
    seed: int
    region_labels: np.ndarray     # (M, N) ints in [0, R)
    tile_latents: np.ndarray      # (M, N, L)
    quadrant_latents: np.ndarray  # (2M, 2N, L)
    tile_labels: np.ndarray       # (M, N), -1 on background
    slide_label: int
    gene_vector: np.ndarray       # (G,)
    validity: np.ndarray          # (M, N) bool

    @property
    def rows(self):
        return self.validity.shape[0]

    @property
    def cols(self):
        return self.validity.shape[1]


def class_means(cfg):
    """Latent mean per region class; the aliased pair shares one mean."""
    rng = stream(cfg.world_seed, 'class-means', cfg.regions, cfg.latent_dim)
    means = rng.standard_normal((cfg.regions, cfg.latent_dim))
    means *= MEAN_NORM / np.linalg.norm(means, axis=1, keepdims=True)
    a, b = cfg.alias_pair
    means[b] = means[a]
    return means


def gene_mixing(cfg, genes, name='bulk'):
    rng = stream(cfg.world_seed, 'gene-mixing', name, cfg.regions, genes)
    return rng.standard_normal((genes, cfg.regions))


def majority_smooth(labels, n_classes, rounds=SMOOTHING_ROUNDS):
    """Replace each label by the majority of itself and its 4 neighbors.

    Ties keep the current label.
    """
    labels = labels.copy()
    rows, cols = labels.shape
    for _ in range(rounds):
        padded = np.pad(labels, 1, mode='edge')
        votes = np.zeros((n_classes, rows, cols), dtype=np.int64)
        for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
            window = padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
            for cls in range(n_classes):
                votes[cls] += window == cls
        best = votes.max(axis=0)
        winner = votes.argmax(axis=0)
        keep = votes[labels, np.arange(rows)[:, None], np.arange(cols)[None, :]] == best
        labels = np.where(keep, labels, winner)
    return labels


def _upsample(field, cell, rows, cols):
    return np.kron(field, np.ones((cell, cell), dtype=field.dtype))[:rows, :cols]


def _coarse_shape(rows, cols, cell):
    return -(-rows // cell), -(-cols // cell)


def generate_slide(seed, cfg, slide_id=None):
    cfg.validate()
    rng = stream(seed, 'slide')
    rows, cols, regions = cfg.rows, cfg.cols, cfg.regions
    a, b = cfg.alias_pair
    partner_a, partner_b, shared = cfg.partners

    # compartments: 0 hosts alias a, 1 hosts alias b
    compartment_share = rng.uniform(0.2, 0.8)
    coarse = (rng.random(_coarse_shape(rows, cols, COMPARTMENT_CELL)) < compartment_share).astype(np.int64)
    compartments = majority_smooth(_upsample(coarse, COMPARTMENT_CELL, rows, cols), 2)

    # roles inside each compartment: alias, partner, shared classes
    role_shape = _coarse_shape(rows, cols, ROLE_CELL)
    region_coarse = np.zeros(role_shape, dtype=np.int64)
    compartment_coarse = compartments[::ROLE_CELL, ::ROLE_CELL]
    for kind, alias, partner in ((0, a, partner_a), (1, b, partner_b)):
        alias_share = rng.uniform(0.35, 0.6)
        shared_share = rng.uniform(0.1, 0.25) if shared else 0.0
        choices = [alias]
        weights = [alias_share]
        if partner is not None:
            choices.append(partner)
            weights.append(1.0 - alias_share - shared_share)
        else:
            weights[0] = 1.0 - shared_share
        for cls in shared:
            choices.append(cls)
            weights.append(shared_share / len(shared))
        draws = rng.choice(np.array(choices), size=role_shape, p=np.array(weights) / np.sum(weights))
        region_coarse = np.where(compartment_coarse == kind, draws, region_coarse)
    region_labels = majority_smooth(_upsample(region_coarse, ROLE_CELL, rows, cols), regions)

    background = rng.random(_coarse_shape(rows, cols, BACKGROUND_CELL)) < cfg.background_fraction
    validity = ~_upsample(background, BACKGROUND_CELL, rows, cols)
    if not validity.any():
        validity[rows // 2, cols // 2] = True

    means = class_means(cfg)
    tile_latents = means[region_labels] + LATENT_NOISE * rng.standard_normal((rows, cols, cfg.latent_dim))
    quadrant_latents = (
        np.repeat(np.repeat(tile_latents, 2, axis=0), 2, axis=1)
        + QUADRANT_NOISE * rng.standard_normal((2 * rows, 2 * cols, cfg.latent_dim))
    )
    tile_labels = np.where(validity, region_labels, -1)

    counts = np.bincount(tile_labels[validity], minlength=regions)
    slide_label = int(counts[b] > counts[a])
    composition = counts / counts.sum()
    gene_vector = gene_mixing(cfg, cfg.genes) @ composition * 4.0 + GENE_NOISE * rng.standard_normal(cfg.genes)

    return SyntheticSlide(
        slide_id=slide_id or f'slide{seed % 10**8:08d}',
        seed=int(seed),
        region_labels=region_labels,
        tile_latents=tile_latents,
        quadrant_latents=quadrant_latents,
        tile_labels=tile_labels,
        slide_label=slide_label,
        gene_vector=gene_vector,
        validity=validity,
    )


def spot_targets(slide, cfg, genes, seed):
    """Per-tile expression targets for the spot regression task.

    Each valid tile's targets mix its own class with its 3x3 neighborhood
    composition, so context helps beyond the tile's appearance.
    """
    rows, cols = slide.rows, slide.cols
    onehot = np.zeros((rows, cols, cfg.regions))
    valid_r, valid_c = np.nonzero(slide.validity)
    onehot[valid_r, valid_c, slide.tile_labels[valid_r, valid_c]] = 1.0
    padded = np.pad(onehot, ((1, 1), (1, 1), (0, 0)))
    neighborhood = sum(
        padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
        for dr in (-1, 0, 1) for dc in (-1, 0, 1)
    )
    neighborhood /= np.maximum(neighborhood.sum(axis=-1, keepdims=True), 1.0)
    mixture = 0.6 * onehot + 0.4 * neighborhood
    rng = stream(seed, 'spot-noise', slide.slide_id)
    targets = mixture @ gene_mixing(cfg, genes, name='spot').T
    targets += GENE_NOISE * rng.standard_normal(targets.shape)
    return np.where(slide.validity[..., None], targets, 0.0)


def neighbor_agreement(labels):
    """Fraction of 4-neighbor pairs carrying the same label."""
    same = np.count_nonzero(labels[1:, :] == labels[:-1, :]) + np.count_nonzero(labels[:, 1:] == labels[:, :-1])
    total = labels[1:, :].size + labels[:, 1:].size
    return same / total
