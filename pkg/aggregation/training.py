# aggregation/training.py
"""Slide-level contrastive pretraining of the ABMIL aggregator.

Each slide becomes a bag of at most ``max_tokens`` tile embeddings (raw
encoder outputs or contextualizer outputs) paired with its bulk gene vector.
The aggregator and the gene branch are trained jointly with AdamW on the
symmetric InfoNCE loss.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from aggregation.abmil import (
    AbmilConfig, abmil_forward_batch, abmil_from_arrays, embed_slides, gene_forward, init_abmil,
    pad_bags, retrieval_top1, tangle_loss,
)
from contextualizer.checkpoint import load_checkpoint, save_checkpoint
from contextualizer.network import contextualize
from numerics.optim import OptState, Schedule, adamw_step, lr_at
from numerics.tensor import no_grad
from ticon_lab.exceptions import BatchError, ConfigError, EmptyInputError, FormatError
from ticon_lab.seeding import stream

logger = logging.getLogger(__name__)

SOURCES = ('raw', 'ctx')


@dataclass
class SlidePair:
    slide_id: str
    tokens: np.ndarray        # (n, d), n <= max_tokens
    gene_vector: np.ndarray   # (G,)
    slide_label: int
    encoder_id: str


@dataclass
class AggregateConfig:
    iters: int = 1000
    batch_size: int = 32
    max_tokens: int = 256
    hidden: int = 64
    heads: int = 2
    slide_dim: int = 64
    attention: str = 'gated'
    temperature: float = 0.1
    base_lr: float = 1e-3
    warmup_iters: int = 50
    weight_decay: float = 0.05
    eval_interval: int = 100
    unified: bool = False
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f'aggregate.batch_size must be >= 2, got {self.batch_size}')
        if self.max_tokens < 1:
            raise ConfigError(f'aggregate.max_tokens must be >= 1, got {self.max_tokens}')
        if self.eval_interval < 1:
            raise ConfigError('aggregate.eval_interval must be >= 1')

    @property
    def sched(self):
        return Schedule(self.base_lr, self.warmup_iters, self.iters)

    def abmil_config(self, in_dim, genes):
        return AbmilConfig(
            in_dim=in_dim, genes=genes, hidden=self.hidden, heads=self.heads,
            slide_dim=self.slide_dim, attention=self.attention, temperature=self.temperature,
        )

    @classmethod
    def from_run_config(cls, cfg, unified=None):
        section = dict(cfg.section('aggregate'))
        if unified is not None:
            section['unified'] = unified
        return cls(**section, seed=cfg.seed, deterministic=cfg.get('run', 'deterministic'))


def sample_tokens(tokens, max_tokens, seed, slide_id):
    if len(tokens) <= max_tokens:
        return tokens
    rng = stream(seed, 'aggregate', 'tokens', slide_id)
    return tokens[np.sort(rng.choice(len(tokens), size=max_tokens, replace=False))]


def pair_encoder(encoder_ids, unified, seed, slide_id):
    if not unified:
        return encoder_ids[0]
    return encoder_ids[int(stream(seed, 'aggregate', 'unified', slide_id).integers(len(encoder_ids)))]


def build_pairs(store, slide_ids, encoder_ids, source, max_tokens, seed, params=None, unified=False):
    """One SlidePair per slide.

    ``source='ctx'`` contextualizes each whole slide once with ``params``.
    With ``unified`` every slide draws its encoder from ``encoder_ids``;
    that needs a common width, so only the contextual source allows it.
    """
    if source not in SOURCES:
        raise ConfigError(f'aggregate source must be one of {SOURCES}, got {source!r}')
    if source == 'ctx' and params is None:
        raise ConfigError('the ctx source needs a contextualizer checkpoint')
    if unified and source == 'raw' and len({store.load_grid(slide_ids[0], e).dim for e in encoder_ids}) > 1:
        raise ConfigError('unified aggregation over raw embeddings needs encoders of one width; use --source ctx')
    if not unified and len(encoder_ids) != 1:
        raise ConfigError(f'name exactly one encoder unless unified, got {list(encoder_ids)}')
    pairs = []
    for slide_id in slide_ids:
        encoder_id = pair_encoder(list(encoder_ids), unified, seed, slide_id)
        grid = store.load_grid(slide_id, encoder_id)
        if grid.n_valid == 0:
            raise EmptyInputError(f'slide {slide_id} has no tissue tiles')
        if source == 'ctx':
            features = contextualize(params, encoder_id, grid).embeddings
        else:
            features = grid.embeddings
        slide = store.load_slide(slide_id)
        pairs.append(SlidePair(
            slide_id=slide_id,
            tokens=sample_tokens(features[grid.validity], max_tokens, seed, slide_id),
            gene_vector=np.asarray(slide.gene_vector, dtype=np.float64),
            slide_label=int(slide.slide_label),
            encoder_id=encoder_id,
        ))
    logger.info('built %d slide pairs (%s, encoders %s)', len(pairs), source, ','.join(encoder_ids))
    return pairs


def gene_stats(pairs):
    genes = np.stack([p.gene_vector for p in pairs])
    return genes.mean(axis=0), np.maximum(genes.std(axis=0), 1e-8)


def heldout_retrieval(params, pairs, gene_mean, gene_std, batch_size):
    """Mean top-1 retrieval, loss and chance level over held-out batches of ``batch_size``."""
    chunks = [pairs[i:i + batch_size] for i in range(0, len(pairs), batch_size)]
    chunks = [c for c in chunks if len(c) >= 2]
    if not chunks:
        raise BatchError('held-out retrieval needs at least 2 held-out slides')
    top1, loss, chance = [], [], []
    with no_grad():
        for chunk in chunks:
            slide = embed_slides(params, [p.tokens for p in chunk])
            genes = gene_forward(params, (np.stack([p.gene_vector for p in chunk]) - gene_mean) / gene_std).data
            top1.append(retrieval_top1(slide, genes))
            loss.append(tangle_loss(slide, genes, params.cfg.temperature).item())
            chance.append(1.0 / len(chunk))
    return {'top1': float(np.mean(top1)), 'loss': float(np.mean(loss)), 'chance': float(np.mean(chance))}


def aggregate_step(params, opt, pairs, gene_mean, gene_std, cfg, iteration):
    started = time.perf_counter()
    rng = stream(cfg.seed, 'aggregate', 'batch', iteration)
    index = np.sort(rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False))
    batch = [pairs[i] for i in index]
    tiles, mask = pad_bags([p.tokens for p in batch])

    for t in params.tensors.values():
        t.zero_grad()
    slide, _ = abmil_forward_batch(params, tiles, mask)
    genes = gene_forward(params, (np.stack([p.gene_vector for p in batch]) - gene_mean) / gene_std)
    loss = tangle_loss(slide, genes, cfg.temperature)
    loss.backward()
    grads = {name: t.grad for name, t in params.tensors.items() if t.grad is not None}
    lr = lr_at(iteration, cfg.sched)
    adamw_step(params.tensors, grads, opt, lr, weight_decay=cfg.weight_decay)
    elapsed = 0 if cfg.deterministic else int(round((time.perf_counter() - started) * 1000))
    return {'iter': iteration, 'lr': lr, 'loss': loss.item(), 'wallclock_ms': elapsed}


@dataclass
class AggregateResult:
    path: Path
    digest: str
    initial: dict
    final: dict
    params: object = None


def _append_jsonl(path, record):
    with open(path, 'a', encoding='utf-8') as handle:
        handle.write(json.dumps(record, sort_keys=True) + '\n')


def pretrain_aggregator(train_pairs, heldout_pairs, cfg, out_dir, meta=None):
    """Train ABMIL + gene branch; writes metrics.jsonl, heldout.jsonl and aggregator.tck."""
    if len(train_pairs) < 2:
        raise BatchError(f'aggregator pretraining needs at least 2 training slides, got {len(train_pairs)}')
    widths = {p.tokens.shape[1] for p in train_pairs + heldout_pairs}
    if len(widths) != 1:
        raise ConfigError(f'slide tokens have mixed widths {sorted(widths)}')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / 'metrics.jsonl'
    heldout_path = out_dir / 'heldout.jsonl'
    for path in (metrics_path, heldout_path):
        path.unlink(missing_ok=True)

    params = init_abmil(cfg.abmil_config(widths.pop(), len(train_pairs[0].gene_vector)), cfg.seed)
    opt = OptState.for_params(params.tensors)
    gene_mean, gene_std = gene_stats(train_pairs)

    def evaluate(iteration):
        record = {'iter': iteration, **heldout_retrieval(params, heldout_pairs, gene_mean, gene_std, cfg.batch_size)}
        _append_jsonl(heldout_path, record)
        logger.info('aggregate iter %d held-out top-1 %.3f (chance %.3f)', iteration, record['top1'], record['chance'])
        return record

    initial = evaluate(0)
    final = initial
    for iteration in range(cfg.iters):
        _append_jsonl(metrics_path, aggregate_step(params, opt, train_pairs, gene_mean, gene_std, cfg, iteration))
        done = iteration + 1
        if done % cfg.eval_interval == 0 or done == cfg.iters:
            final = evaluate(done)

    header = {
        'kind': 'abmil',
        'config': params.cfg.as_dict(),
        'meta': {
            **(meta or {}),
            'iterations': cfg.iters,
            'train': asdict(cfg),
            'gene_mean': gene_mean.tolist(),
            'gene_std': gene_std.tolist(),
        },
    }
    path = out_dir / 'aggregator.tck'
    digest = save_checkpoint(path, header, params.arrays(), dtype='f32')
    return AggregateResult(path, digest, initial, final, params)


def load_aggregator(path):
    header, arrays = load_checkpoint(path)
    if header.get('kind') != 'abmil':
        raise FormatError(f'{path} is not an aggregator checkpoint (kind {header.get("kind")!r})')
    return abmil_from_arrays(AbmilConfig.from_dict(header['config']), arrays), header['meta']
