# contextualizer/network.py
"""Forward pass of the contextualizer.

Everything is computed on padded batches: ``B`` items of up to ``n`` tokens,
with a boolean validity mask per token. Padded keys never enter a softmax;
padded queries produce values that callers ignore. Single-item entry points
(``encode``, ``decode_predict``, ``contextualize``) wrap the batched ones
with ``B = 1``.
"""
import logging
from dataclasses import dataclass

import numpy as np

from numerics import functional as F
from numerics.tensor import Tensor, no_grad
from slides.grids import EmbeddingGrid
from ticon_lab.exceptions import EmptyInputError, ShapeError

logger = logging.getLogger(__name__)


def head_slopes(heads):
    """Geometric ALiBi slopes 2^(-8(h+1)/H)."""
    return 2.0 ** (-8.0 * (np.arange(heads) + 1) / heads)


def alibi_bias(h, pos_a, pos_b, heads):
    """Pre-softmax bias between two grid positions for head ``h``."""
    distance = abs(pos_a[0] - pos_b[0]) + abs(pos_a[1] - pos_b[1])
    return float(-head_slopes(heads)[h] * distance)


def alibi_matrix(query_positions, key_positions, heads):
    """(B, H, n, m) biases for (B, n, 2) query and (B, m, 2) key positions."""
    q = np.asarray(query_positions, dtype=np.float64)
    k = np.asarray(key_positions, dtype=np.float64)
    distance = np.abs(q[:, :, None, :] - k[:, None, :, :]).sum(axis=-1)
    return -head_slopes(heads)[None, :, None, None] * distance[:, None, :, :]


def _mlp(params, prefix, x):
    hidden = F.gelu(F.linear(x, params[f'{prefix}.w1'], params[f'{prefix}.b1']))
    return F.linear(hidden, params[f'{prefix}.w2'], params[f'{prefix}.b2'])


def _norm(params, prefix, x):
    return F.layer_norm(x, params[f'{prefix}.gamma'], params[f'{prefix}.beta'])


def _split_heads(x, heads):
    batch, length, width = x.shape
    return F.transpose(F.reshape(x, (batch, length, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    batch, heads, length, head_dim = x.shape
    return F.reshape(F.transpose(x, (0, 2, 1, 3)), (batch, length, heads * head_dim))


def attention(params, prefix, queries, keys, bias, key_valid, heads):
    """Multi-head attention with an additive position bias.

    ``queries`` (B, n, D) and ``keys`` (B, m, D) are already normalized.
    ``key_valid`` (B, m) drops padded keys from every softmax row.
    """
    q = _split_heads(F.linear(queries, params[f'{prefix}.wq'], params[f'{prefix}.bq']), heads)
    k = _split_heads(F.linear(keys, params[f'{prefix}.wk'], params[f'{prefix}.bk']), heads)
    v = _split_heads(F.linear(keys, params[f'{prefix}.wv'], params[f'{prefix}.bv']), heads)
    scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(q.shape[-1]))
    weights = F.softmax(scores, bias=bias, mask=np.asarray(key_valid, dtype=bool)[:, None, None, :])
    mixed = _merge_heads(F.matmul(weights, v))
    return F.linear(mixed, params[f'{prefix}.wo'], params[f'{prefix}.bo'])


def project_inputs(params, encoder_id, embeddings):
    dim = params.require_input(encoder_id)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[-1] != dim:
        raise ShapeError(f'{encoder_id} embeddings have dim {embeddings.shape[-1]}, projector expects {dim}')
    return _mlp(params, f'proj_in.{encoder_id}', Tensor(embeddings))


def encode_batch(params, encoder_id, embeddings, positions, valid):
    """Contextualize a padded batch: (B, n, d_i) embeddings -> (B, n, D) Tensor."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise EmptyInputError('encode needs at least one visible position per item')
    cfg = params.cfg
    x = project_inputs(params, encoder_id, embeddings)
    bias = alibi_matrix(positions, positions, cfg.heads)
    for layer in range(cfg.encoder_depth):
        prefix = f'encoder.{layer}'
        h = _norm(params, f'{prefix}.norm1', x)
        x = x + attention(params, f'{prefix}.attn', h, h, bias, valid, cfg.heads)
        x = x + _mlp(params, f'{prefix}.mlp', _norm(params, f'{prefix}.norm2', x))
    return _norm(params, 'encoder.norm', x)


def decode_batch(params, context, context_positions, context_valid, pred_positions, pred_valid, target_ids):
    """Predict target embeddings at masked positions from contextualized tokens.

    Returns ``{target_id: (B, p, d_j) Tensor}``.
    """
    pred_valid = np.asarray(pred_valid, dtype=bool)
    if pred_valid.shape[-1] == 0 or not pred_valid.any(axis=-1).all():
        raise EmptyInputError('decode_predict needs at least one prediction position per item')
    for target_id in target_ids:
        params.require_target(target_id)
    cfg = params.cfg
    batch, n_pred = pred_valid.shape
    z = F.add(np.zeros((batch, n_pred, cfg.d_model)), params['decoder.mask_token'])
    cross_bias = alibi_matrix(pred_positions, context_positions, cfg.heads)
    self_bias = alibi_matrix(pred_positions, pred_positions, cfg.heads) if cfg.decoder_self_attention else None
    for layer in range(cfg.decoder_depth):
        prefix = f'decoder.{layer}'
        if cfg.decoder_self_attention:
            h = _norm(params, f'{prefix}.self_norm', z)
            z = z + attention(params, f'{prefix}.self_attn', h, h, self_bias, pred_valid, cfg.heads)
        q = _norm(params, f'{prefix}.cross_norm_q', z)
        kv = _norm(params, f'{prefix}.cross_norm_kv', context)
        z = z + attention(params, f'{prefix}.cross_attn', q, kv, cross_bias, context_valid, cfg.heads)
        z = z + _mlp(params, f'{prefix}.mlp', _norm(params, f'{prefix}.norm2', z))
    z = _norm(params, 'decoder.norm', z)
    return {target_id: _mlp(params, f'head_out.{target_id}', z) for target_id in target_ids}


@dataclass
class ContextOutput:
    """Contextualized embeddings of the visible positions, in input order."""
    embeddings: Tensor
    positions: np.ndarray

    def __len__(self):
        return self.positions.shape[0]


def encode(params, encoder_id, embeddings, positions):
    """Contextualize one set of visible (embedding, position) pairs."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    params.require_input(encoder_id)
    if positions.shape[0] == 0:
        raise EmptyInputError('encode needs at least one visible position')
    if embeddings.ndim != 2 or embeddings.shape[0] != positions.shape[0]:
        raise ShapeError(f'{embeddings.shape} embeddings for {positions.shape[0]} positions')
    out = encode_batch(
        params, encoder_id, embeddings[None], positions[None], np.ones((1, positions.shape[0]), dtype=bool),
    )
    return ContextOutput(embeddings=F.reshape(out, out.shape[1:]), positions=positions)


def decode_predict(params, ctx, pred_positions, target_ids):
    pred_positions = np.asarray(pred_positions, dtype=np.int64).reshape(-1, 2)
    if pred_positions.shape[0] == 0:
        raise EmptyInputError('decode_predict needs at least one prediction position')
    context = F.reshape(ctx.embeddings, (1,) + ctx.embeddings.shape)
    predictions = decode_batch(
        params, context, ctx.positions[None], np.ones((1, len(ctx)), dtype=bool),
        pred_positions[None], np.ones((1, pred_positions.shape[0]), dtype=bool), target_ids,
    )
    return {target_id: F.reshape(y, y.shape[1:]) for target_id, y in predictions.items()}


def contextualize(params, encoder_id, grid):
    """TICON-ctx embeddings for every valid tile of ``grid``.

    Positions are grid-relative; any grid size is accepted.
    """
    positions = grid.valid_positions()
    if positions.shape[0] == 0:
        raise EmptyInputError(f'{encoder_id} grid has no valid tiles')
    with no_grad():
        ctx = encode(params, encoder_id, grid.embeddings[grid.validity], positions)
    out = np.zeros((grid.rows, grid.cols, params.cfg.d_model))
    out[positions[:, 0], positions[:, 1]] = ctx.embeddings.data
    return EmbeddingGrid(f'ticon:{encoder_id}', out, grid.validity.copy(), grid.origin)


def contextualize_isolated(params, encoder_id, embedding):
    """TICON-iso: one tile seen as a 1x1 grid."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 1:
        raise ShapeError(f'expected one embedding vector, got shape {embedding.shape}')
    params.require_input(encoder_id)
    if embedding.shape[0] != params.cfg.input_dims[encoder_id]:
        raise ShapeError(
            f'{encoder_id} embedding has dim {embedding.shape[0]}, projector expects {params.cfg.input_dims[encoder_id]}'
        )
    grid = EmbeddingGrid(encoder_id, embedding[None, None, :], np.ones((1, 1), dtype=bool))
    return contextualize(params, encoder_id, grid).embeddings[0, 0]


def contextualize_isolated_batch(params, encoder_id, embeddings, chunk=512):
    """TICON-iso for many tiles at once: a batch of independent length-1 items."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise ShapeError(f'expected an (N, d) array of embeddings, got {embeddings.shape}')
    outputs = []
    with no_grad():
        for start in range(0, embeddings.shape[0], chunk):
            part = embeddings[start:start + chunk, None, :]
            count = part.shape[0]
            out = encode_batch(
                params, encoder_id, part, np.zeros((count, 1, 2), dtype=np.int64), np.ones((count, 1), dtype=bool),
            )
            outputs.append(out.data[:, 0, :])
    if not outputs:
        return np.zeros((0, params.cfg.d_model))
    return np.concatenate(outputs, axis=0)


def contextualize_grids(params, encoder_id, grids):
    """Contextualize several grids, one at a time; returns a list of grids."""
    return [contextualize(params, encoder_id, grid) for grid in grids]
