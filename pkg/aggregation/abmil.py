# aggregation/abmil.py
"""Multi-head attention-based MIL pooling and the slide/gene contrastive loss.

Tensor names:
  pre.<0-2>.w / .b        pre-attention MLP, in_dim -> hidden
  attn.<k>.V / .bV        attention branch of head k (hidden -> hidden)
  attn.<k>.U / .bU        gate branch of head k (gated attention only)
  attn.<k>.w              attention score vector of head k (hidden -> 1)
  proj.w / .b             concatenated head outputs -> slide_dim
  gene.<0-2>.w / .b       gene-branch MLP, genes -> slide_dim
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from numerics import functional as F
from numerics.tensor import as_tensor, no_grad, parameter
from ticon_lab.exceptions import BatchError, ConfigError, EmptyInputError, FormatError, RangeError, ShapeError
from ticon_lab.seeding import stream

ATTENTION_KINDS = ('gated', 'tanh')


@dataclass(frozen=True)
class AbmilConfig:
    in_dim: int
    genes: int
    hidden: int = 64
    heads: int = 2
    slide_dim: int = 64
    attention: str = 'gated'
    temperature: float = 0.1

    def __post_init__(self):
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f'attention must be one of {ATTENTION_KINDS}, got {self.attention!r}')
        if min(self.in_dim, self.genes, self.hidden, self.heads, self.slide_dim) < 1:
            raise ConfigError('aggregator widths and head count must be positive')
        if self.temperature <= 0:
            raise RangeError(f'temperature must be > 0, got {self.temperature}')

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _mlp3_shapes(prefix, d_in, hidden, d_out):
    return [
        (f'{prefix}.0.w', (d_in, hidden)), (f'{prefix}.0.b', (hidden,)),
        (f'{prefix}.1.w', (hidden, hidden)), (f'{prefix}.1.b', (hidden,)),
        (f'{prefix}.2.w', (hidden, d_out)), (f'{prefix}.2.b', (d_out,)),
    ]


def abmil_shapes(cfg):
    shapes = _mlp3_shapes('pre', cfg.in_dim, cfg.hidden, cfg.hidden)
    for k in range(cfg.heads):
        shapes += [(f'attn.{k}.V', (cfg.hidden, cfg.hidden)), (f'attn.{k}.bV', (cfg.hidden,))]
        if cfg.attention == 'gated':
            shapes += [(f'attn.{k}.U', (cfg.hidden, cfg.hidden)), (f'attn.{k}.bU', (cfg.hidden,))]
        shapes.append((f'attn.{k}.w', (cfg.hidden, 1)))
    shapes += [('proj.w', (cfg.heads * cfg.hidden, cfg.slide_dim)), ('proj.b', (cfg.slide_dim,))]
    shapes += _mlp3_shapes('gene', cfg.genes, cfg.hidden, cfg.slide_dim)
    return shapes


class AbmilParams:
    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def arrays(self):
        return OrderedDict((name, t.data) for name, t in self.tensors.items())

    def num_params(self):
        return int(sum(t.size for t in self.tensors.values()))


def init_abmil(cfg, seed):
    """Weights ~ N(0, 1/fan_in), biases zero."""
    rng = stream(seed, 'init-abmil')
    tensors = OrderedDict()
    for name, shape in abmil_shapes(cfg):
        if len(shape) == 1:
            tensors[name] = parameter(np.zeros(shape))
        else:
            tensors[name] = parameter(rng.standard_normal(shape) / np.sqrt(shape[0]))
    return AbmilParams(cfg, tensors)


def abmil_from_arrays(cfg, arrays):
    tensors = OrderedDict()
    for name, shape in abmil_shapes(cfg):
        if name not in arrays:
            raise FormatError(f'aggregator checkpoint lacks tensor {name}')
        if tuple(arrays[name].shape) != tuple(shape):
            raise FormatError(f'tensor {name} has shape {arrays[name].shape}, config implies {shape}')
        tensors[name] = parameter(np.asarray(arrays[name], dtype=np.float64))
    return AbmilParams(cfg, tensors)


def _mlp3(params, prefix, x):
    h = F.gelu(F.linear(x, params[f'{prefix}.0.w'], params[f'{prefix}.0.b']))
    h = F.gelu(F.linear(h, params[f'{prefix}.1.w'], params[f'{prefix}.1.b']))
    return F.linear(h, params[f'{prefix}.2.w'], params[f'{prefix}.2.b'])


def attention_scores(params, k, h):
    """Unnormalized attention logits of head ``k`` for tokens h (..., n, hidden) -> (..., n, 1)."""
    a = F.tanh(F.linear(h, params[f'attn.{k}.V'], params[f'attn.{k}.bV']))
    if params.cfg.attention == 'gated':
        a = F.mul(a, F.sigmoid(F.linear(h, params[f'attn.{k}.U'], params[f'attn.{k}.bU'])))
    return F.matmul(a, params[f'attn.{k}.w'])


def abmil_forward_batch(params, tiles, mask):
    """Pool a padded batch of bags.

    ``tiles`` is (B, n, in_dim); ``mask`` (B, n) marks real tiles. Returns the
    (B, slide_dim) slide vectors and a list of (B, n) attention arrays, one
    per head, zero at padding.
    """
    tiles = as_tensor(tiles)
    mask = np.asarray(mask, dtype=bool)
    if tiles.ndim != 3 or tiles.shape[-1] != params.cfg.in_dim:
        raise ShapeError(f'aggregator expects (B, n, {params.cfg.in_dim}) tiles, got {tiles.shape}')
    if mask.shape != tiles.shape[:2]:
        raise ShapeError(f'tile mask {mask.shape} does not match tiles {tiles.shape}')
    if not mask.any(axis=1).all():
        raise EmptyInputError('every bag needs at least one tile')
    batch, n = mask.shape

    h = _mlp3(params, 'pre', tiles)
    pooled, weights = [], []
    for k in range(params.cfg.heads):
        logits = F.reshape(attention_scores(params, k, h), (batch, 1, n))
        a = F.softmax(logits, mask=mask[:, None, :])
        pooled.append(F.reshape(F.matmul(a, h), (batch, params.cfg.hidden)))
        weights.append(a.data[:, 0, :])
    slide = F.linear(F.concat(pooled, axis=-1), params['proj.w'], params['proj.b'])
    return slide, weights


def abmil_forward(params, tiles):
    """One bag (n, in_dim) -> (slide vector Tensor (slide_dim,), [attention (n,) per head])."""
    tiles = as_tensor(tiles)
    if tiles.ndim != 2 or tiles.shape[0] == 0:
        raise EmptyInputError(f'abmil_forward needs n >= 1 tiles, got shape {tiles.shape}')
    n = tiles.shape[0]
    slide, weights = abmil_forward_batch(
        params, F.reshape(tiles, (1, n, tiles.shape[1])), np.ones((1, n), dtype=bool),
    )
    return F.reshape(slide, (params.cfg.slide_dim,)), [w[0] for w in weights]


def gene_forward(params, genes):
    """Gene vectors (B, G) -> (B, slide_dim) through the gene branch."""
    genes = as_tensor(genes)
    if genes.shape[-1] != params.cfg.genes:
        raise ShapeError(f'gene branch expects {params.cfg.genes} genes, got {genes.shape}')
    return _mlp3(params, 'gene', genes)


def tangle_loss(slide_vecs, gene_vecs, temperature):
    """Symmetric InfoNCE between matched rows of two (B, D) batches.

    Both batches are L2-normalized; the slide->gene and gene->slide
    cross-entropies with the diagonal as positives are averaged.
    """
    slide_vecs, gene_vecs = as_tensor(slide_vecs), as_tensor(gene_vecs)
    if temperature <= 0:
        raise RangeError(f'temperature must be > 0, got {temperature}')
    if slide_vecs.ndim != 2 or slide_vecs.shape != gene_vecs.shape:
        raise ShapeError(f'tangle_loss needs two (B, D) batches, got {slide_vecs.shape} and {gene_vecs.shape}')
    batch = slide_vecs.shape[0]
    if batch < 2:
        raise BatchError(f'contrastive loss needs a batch of at least 2, got {batch}')
    s = F.l2_normalize(slide_vecs)
    g = F.l2_normalize(gene_vecs)
    logits = F.scale(F.matmul(s, F.transpose(g, (1, 0))), 1.0 / temperature)
    eye = np.eye(batch)
    slide_to_gene = F.sum(F.mul(F.log_softmax(logits), eye))
    gene_to_slide = F.sum(F.mul(F.log_softmax(F.transpose(logits, (1, 0))), eye))
    return F.scale(F.add(slide_to_gene, gene_to_slide), -0.5 / batch)


def retrieval_top1(slide_vecs, gene_vecs):
    """Fraction of rows whose nearest partner (cosine) is their own, averaged over both directions."""
    s = np.asarray(slide_vecs, dtype=np.float64)
    g = np.asarray(gene_vecs, dtype=np.float64)
    s = s / np.maximum(np.linalg.norm(s, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    sim = s @ g.T
    index = np.arange(len(s))
    return float(0.5 * (np.mean(sim.argmax(axis=1) == index) + np.mean(sim.argmax(axis=0) == index)))


def meanpool_slide(tiles):
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim != 2 or tiles.shape[0] == 0:
        raise EmptyInputError(f'meanpool needs n >= 1 tiles, got shape {tiles.shape}')
    return tiles.mean(axis=0)


def embed_slides(params, bags, chunk=16):
    """Slide vectors (len(bags), slide_dim) for a list of (n_i, in_dim) arrays, no tape."""
    out = []
    with no_grad():
        for start in range(0, len(bags), chunk):
            tiles, mask = pad_bags(bags[start:start + chunk])
            slide, _ = abmil_forward_batch(params, tiles, mask)
            out.append(slide.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.cfg.slide_dim))


def pad_bags(bags):
    """Stack variable-length bags into (B, n_max, d) with a validity mask."""
    if not bags:
        raise EmptyInputError('no bags to pad')
    n_max = max(len(b) for b in bags)
    dim = bags[0].shape[1]
    tiles = np.zeros((len(bags), n_max, dim))
    mask = np.zeros((len(bags), n_max), dtype=bool)
    for i, bag in enumerate(bags):
        if len(bag) == 0:
            raise EmptyInputError('every bag needs at least one tile')
        tiles[i, :len(bag)] = bag
        mask[i, :len(bag)] = True
    return tiles, mask
