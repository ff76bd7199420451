# contextualizer/params.py
"""Learnable state of the contextualizer.

Tensors live in one flat name -> Tensor mapping:
  proj_in.<encoder>.*     input projector (2-layer MLP, d_i -> D)
  encoder.<l>.*           pre-norm transformer blocks, encoder.norm.*
  decoder.mask_token      the shared mask token
  decoder.<l>.*           cross-decoder blocks, decoder.norm.*
  head_out.<encoder>.*    output head (2-layer MLP, D -> d_j)
"""
from collections import OrderedDict

import numpy as np

from contextualizer.config import ModelConfig
from numerics.tensor import parameter
from ticon_lab.exceptions import FormatError, RegistryError
from ticon_lab.seeding import stream

INIT_STD = 0.02


def _norm_shapes(prefix, d):
    return [(f'{prefix}.gamma', (d,)), (f'{prefix}.beta', (d,))]


def _attention_shapes(prefix, d):
    shapes = []
    for proj in ('q', 'k', 'v', 'o'):
        shapes += [(f'{prefix}.w{proj}', (d, d)), (f'{prefix}.b{proj}', (d,))]
    return shapes


def _mlp_shapes(prefix, d_in, hidden, d_out):
    return [
        (f'{prefix}.w1', (d_in, hidden)), (f'{prefix}.b1', (hidden,)),
        (f'{prefix}.w2', (hidden, d_out)), (f'{prefix}.b2', (d_out,)),
    ]


def projector_shapes(cfg, encoder_id, dim):
    return _mlp_shapes(f'proj_in.{encoder_id}', dim, cfg.hidden, cfg.d_model)


def head_shapes(cfg, encoder_id, dim):
    return _mlp_shapes(f'head_out.{encoder_id}', cfg.d_model, cfg.hidden, dim)


def encoder_shapes(cfg):
    d = cfg.d_model
    shapes = []
    for layer in range(cfg.encoder_depth):
        p = f'encoder.{layer}'
        shapes += _norm_shapes(f'{p}.norm1', d) + _attention_shapes(f'{p}.attn', d)
        shapes += _norm_shapes(f'{p}.norm2', d) + _mlp_shapes(f'{p}.mlp', d, cfg.mlp_hidden, d)
    return shapes + _norm_shapes('encoder.norm', d)


def decoder_shapes(cfg):
    d = cfg.d_model
    shapes = [('decoder.mask_token', (d,))]
    for layer in range(cfg.decoder_depth):
        p = f'decoder.{layer}'
        if cfg.decoder_self_attention:
            shapes += _norm_shapes(f'{p}.self_norm', d) + _attention_shapes(f'{p}.self_attn', d)
        shapes += _norm_shapes(f'{p}.cross_norm_q', d) + _norm_shapes(f'{p}.cross_norm_kv', d)
        shapes += _attention_shapes(f'{p}.cross_attn', d)
        shapes += _norm_shapes(f'{p}.norm2', d) + _mlp_shapes(f'{p}.mlp', d, cfg.mlp_hidden, d)
    return shapes + _norm_shapes('decoder.norm', d)


def param_shapes(cfg):
    """Ordered (name, shape) list for every tensor ``cfg`` implies."""
    shapes = []
    for encoder_id, dim in sorted(cfg.input_dims.items()):
        shapes += projector_shapes(cfg, encoder_id, dim)
    shapes += encoder_shapes(cfg) + decoder_shapes(cfg)
    for encoder_id, dim in sorted(cfg.target_dims.items()):
        shapes += head_shapes(cfg, encoder_id, dim)
    return shapes


def count(shapes):
    return int(sum(np.prod(shape) for _, shape in shapes))


def truncated_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) redrawn until every value lies within two std."""
    values = rng.standard_normal(shape)
    out_of_range = np.abs(values) > 2.0
    while out_of_range.any():
        values[out_of_range] = rng.standard_normal(int(out_of_range.sum()))
        out_of_range = np.abs(values) > 2.0
    return values * std


def initial_value(rng, name, shape):
    leaf = name.rsplit('.', 1)[-1]
    if leaf == 'gamma':
        return np.ones(shape)
    if leaf == 'beta' or leaf.startswith('b'):
        return np.zeros(shape)
    return truncated_normal(rng, shape)


class TiconParams:
    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def num_params(self, prefix=''):
        return int(sum(t.size for n, t in self.tensors.items() if n.startswith(prefix)))

    def require_input(self, encoder_id):
        if encoder_id not in self.cfg.input_dims:
            raise RegistryError(f'model has no input projector for encoder {encoder_id!r}')
        return self.cfg.input_dims[encoder_id]

    def require_target(self, encoder_id):
        if encoder_id not in self.cfg.target_dims:
            raise RegistryError(f'model has no output head for encoder {encoder_id!r}')
        return self.cfg.target_dims[encoder_id]

    def arrays(self):
        return OrderedDict((name, t.data) for name, t in self.tensors.items())

    def add_encoder(self, encoder_id, dim, seed):
        """Fresh input projector and output head for an unseen encoder; returns their names."""
        if encoder_id in self.cfg.input_dims or encoder_id in self.cfg.target_dims:
            raise RegistryError(f'model already has projectors for encoder {encoder_id!r}')
        self.cfg = self.cfg.with_encoder(encoder_id, dim)
        rng = stream(seed, 'init-adapter', encoder_id)
        added = []
        for name, shape in projector_shapes(self.cfg, encoder_id, dim) + head_shapes(self.cfg, encoder_id, dim):
            self.tensors[name] = parameter(initial_value(rng, name, shape))
            added.append(name)
        return added


def init_params(cfg: ModelConfig, seed):
    rng = stream(seed, 'init-params')
    tensors = OrderedDict(
        (name, parameter(initial_value(rng, name, shape))) for name, shape in param_shapes(cfg)
    )
    return TiconParams(cfg, tensors)


def params_from_arrays(cfg, arrays):
    """Rebuild TiconParams from loaded arrays, checking them against ``cfg``."""
    expected = param_shapes(cfg)
    missing = [n for n, _ in expected if n not in arrays]
    if missing:
        raise FormatError(f'checkpoint lacks tensors required by its config: {missing[:3]}')
    tensors = OrderedDict()
    for name, shape in expected:
        if tuple(arrays[name].shape) != tuple(shape):
            raise FormatError(f'tensor {name} has shape {arrays[name].shape}, config implies {shape}')
        tensors[name] = parameter(np.asarray(arrays[name], dtype=np.float64))
    return TiconParams(cfg, tensors)
