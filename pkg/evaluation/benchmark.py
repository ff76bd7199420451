# evaluation/benchmark.py
"""Raw vs isolated vs contextualized tile features on the synthetic corpus.

Tasks
  tile             every region class, k-NN macro-F1
  tile-aliased     only the aliased pair (needs context), k-NN macro-F1
  tile-nonaliased  every other class, k-NN macro-F1
  spot             per-tile expression targets, PCA + ridge mean PCC
  slide            slide label from pooled slide vectors, linear probe balanced accuracy
The contextual variants concatenate the L2-normalized raw embedding with
the L2-normalized contextualizer output.
"""
import logging

import numpy as np

from aggregation.abmil import embed_slides, meanpool_slide
from contextualizer.network import contextualize, contextualize_isolated_batch
from evaluation.probes import ProbeDataset, knn_probe, linear_probe, pca_ridge
from slides.grids import EmbeddingGrid
from slides.synth import spot_targets
from ticon_lab.exceptions import ConfigError, RegistryError
from ticon_lab.seeding import stream

logger = logging.getLogger(__name__)

TILE_TASKS = ('tile', 'tile-aliased', 'tile-nonaliased', 'spot')
VARIANTS = ('raw', 'iso', 'ctx')


def split_by_slide(slide_ids, train_fraction, val_fraction, seed):
    """``{slide id: 'train' | 'val' | 'test'}``; every split gets a slide."""
    if len(slide_ids) < 3:
        raise ConfigError('evaluation needs at least 3 slides')
    order = stream(seed, 'eval', 'split').permutation(len(slide_ids))
    n_train = max(1, int(round(train_fraction * len(slide_ids))))
    n_val = max(1, int(round(val_fraction * len(slide_ids))))
    n_train = min(n_train, len(slide_ids) - n_val - 1)
    assignment = {}
    for rank, i in enumerate(order):
        assignment[slide_ids[i]] = 'train' if rank < n_train else 'val' if rank < n_train + n_val else 'test'
    return assignment


def l2_rows(x):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def contextualize_windows(params, encoder_id, grid, window):
    """Contextualize ``grid`` in independent ``window`` x ``window`` blocks (0: whole grid)."""
    if not window:
        return contextualize(params, encoder_id, grid)
    out = np.zeros((grid.rows, grid.cols, params.cfg.d_model))
    for r in range(0, grid.rows, window):
        for c in range(0, grid.cols, window):
            k_r, k_c = min(window, grid.rows - r), min(window, grid.cols - c)
            validity = grid.validity[r:r + k_r, c:c + k_c]
            if not validity.any():
                continue
            block = EmbeddingGrid(encoder_id, grid.embeddings[r:r + k_r, c:c + k_c], validity)
            out[r:r + k_r, c:c + k_c] = contextualize(params, encoder_id, block).embeddings
    return EmbeddingGrid(f'ticon:{encoder_id}', out, grid.validity.copy(), grid.origin)


def tile_features(grid, variant, params=None, encoder_id=None, window=0):
    """(M, N, width) features of ``variant`` for every tile of one grid."""
    if variant == 'raw':
        return grid.embeddings
    if params is None:
        raise ConfigError(f'the {variant} variant needs a contextualizer checkpoint')
    if encoder_id not in params.cfg.input_dims:
        raise RegistryError(f'checkpoint has no input projector for encoder {encoder_id!r}')
    if variant == 'iso':
        ticon = np.zeros((grid.rows, grid.cols, params.cfg.d_model))
        ticon[grid.validity] = contextualize_isolated_batch(params, encoder_id, grid.embeddings[grid.validity])
    elif variant == 'ctx':
        ticon = contextualize_windows(params, encoder_id, grid, window).embeddings
    else:
        raise ConfigError(f'unknown feature variant {variant!r}')
    features = np.concatenate([l2_rows(grid.embeddings), l2_rows(ticon)], axis=-1)
    return np.where(grid.validity[..., None], features, 0.0)


class TileBenchmark:
    """Tile rows (sampled per slide) and their features for one encoder."""

    def __init__(self, store, encoder_id, eval_cfg, seed):
        self.store = store
        self.encoder_id = encoder_id
        self.eval_cfg = eval_cfg
        self.seed = seed
        self.synth_cfg = store.synth_config
        self.slide_ids = store.slide_ids()
        self.assignment = split_by_slide(
            self.slide_ids, eval_cfg['train_fraction'], eval_cfg['val_fraction'], seed,
        )
        self.positions = {}
        for slide_id in self.slide_ids:
            valid = np.argwhere(store.load_grid(slide_id, encoder_id).validity)
            rng = stream(seed, 'eval', 'tiles', slide_id)
            take = min(eval_cfg['tiles_per_slide'], len(valid))
            self.positions[slide_id] = valid[np.sort(rng.choice(len(valid), size=take, replace=False))]

    def features(self, variant, params=None, window=0):
        rows = []
        for slide_id in self.slide_ids:
            grid = self.store.load_grid(slide_id, self.encoder_id)
            feats = tile_features(grid, variant, params, self.encoder_id, window)
            pos = self.positions[slide_id]
            rows.append(feats[pos[:, 0], pos[:, 1]])
        return np.concatenate(rows, axis=0)

    def targets(self, task):
        """(labels or regression targets, row mask, split) for ``task``."""
        labels, split = [], []
        alias = set(self.synth_cfg.alias_pair)
        for slide_id in self.slide_ids:
            slide = self.store.load_slide(slide_id)
            pos = self.positions[slide_id]
            if task == 'spot':
                values = spot_targets(slide, self.synth_cfg, self.eval_cfg['spot_genes'], self.seed)
                labels.append(values[pos[:, 0], pos[:, 1]])
            else:
                labels.append(slide.tile_labels[pos[:, 0], pos[:, 1]])
            split += [self.assignment[slide_id]] * len(pos)
        labels = np.concatenate(labels, axis=0)
        split = np.asarray(split)
        if task in ('tile', 'spot'):
            keep = np.ones(len(labels), dtype=bool)
        elif task == 'tile-aliased':
            keep = np.isin(labels, list(alias))
        elif task == 'tile-nonaliased':
            keep = ~np.isin(labels, list(alias))
        else:
            raise ConfigError(f'unknown tile task {task!r}')
        return labels[keep], keep, split[keep]

    def run(self, task, variant, params=None, features=None, window=0):
        labels, keep, split = self.targets(task)
        if features is None:
            features = self.features(variant, params, window)
        ds = ProbeDataset(features[keep], labels, split, classification=task != 'spot')
        if task == 'spot':
            return pca_ridge(
                ds, self.eval_cfg['pca_dims'], self.eval_cfg['lambdas'], task=task, variant=variant, seed=self.seed,
                target_names=[f'gene{g}' for g in range(labels.shape[1])],
            )
        return knn_probe(ds, self.eval_cfg['ks'], self.eval_cfg['distance'], task=task, variant=variant,
                         seed=self.seed)


def context_benchmark(params, encoder_id, store, task, eval_cfg, seed, window=0, variants=VARIANTS):
    """One EvalReport per variant, all on the same rows and split."""
    bench = TileBenchmark(store, encoder_id, eval_cfg, seed)
    reports = []
    for variant in variants:
        report = bench.run(task, variant, params=params, window=window)
        report.extra.update({'encoder': encoder_id, 'window': window})
        reports.append(report)
    return reports


def eval_settings(cfg):
    """The ``[eval]`` section with its list values parsed."""
    section = dict(cfg.section('eval'))
    section['ks'] = cfg.list('eval', 'knn_ks', int)
    section['lambdas'] = cfg.list('eval', 'ridge_lambdas', float)
    return section


SLIDE_POOLINGS = ('tangle', 'meanpool')


def slide_benchmark(pairs, pooling, eval_cfg, seed, aggregator=None, variant='ctx'):
    """Linear-probe balanced accuracy on the slide label from pooled slide vectors.

    ``pairs`` covers every slide; the probe split is drawn by slide like the
    tile tasks. Tangle pooling runs the pretrained ``aggregator``, meanpool
    averages the tokens.
    """
    if pooling == 'tangle':
        if aggregator is None:
            raise ConfigError('tangle pooling needs an aggregator checkpoint')
        features = embed_slides(aggregator, [p.tokens for p in pairs])
    elif pooling == 'meanpool':
        features = np.stack([meanpool_slide(p.tokens) for p in pairs])
    else:
        raise ConfigError(f'unknown slide pooling {pooling!r}')
    slide_ids = [p.slide_id for p in pairs]
    assignment = split_by_slide(slide_ids, eval_cfg['train_fraction'], eval_cfg['val_fraction'], seed)
    ds = ProbeDataset(
        features, np.array([p.slide_label for p in pairs]), np.array([assignment[s] for s in slide_ids]),
    )
    report = linear_probe(ds, costs=(eval_cfg['probe_cost'],), iters=eval_cfg['probe_iters'], task='slide',
                          variant=f'{pooling}:{variant}', seed=seed)
    report.extra['pooling'] = pooling
    return report
