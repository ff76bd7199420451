# pretraining/objective.py
"""Multi-target masked reconstruction loss.

For one window, input encoder i and targets T:

    loss = sum over j in T of mean over predicted positions of (1 - cos(y_j, target_j))

A batch loss is the mean of the per-window losses.
"""
from dataclasses import dataclass

import numpy as np

from contextualizer.network import decode_batch, encode_batch
from numerics import functional as F
from numerics.tensor import as_tensor
from ticon_lab.exceptions import AlignmentError, EmptyInputError, ShapeError


def cosine_loss(y, target):
    """Mean over rows of 1 - cosine(y_row, target_row); a Tensor in [0, 2]."""
    y, target = as_tensor(y), as_tensor(target)
    if y.shape != target.shape or y.ndim != 2:
        raise ShapeError(f'prediction {y.shape} vs target {target.shape}')
    return F.sub(1.0, F.mean(F.cosine_similarity(y, target)))


def check_alignment(reference, grid):
    if (grid.rows, grid.cols) != (reference.rows, reference.cols) or grid.origin != reference.origin:
        raise AlignmentError(
            f'{grid.encoder_id} grid {grid.rows}x{grid.cols}@{grid.origin} does not line up with '
            f'{reference.encoder_id} grid {reference.rows}x{reference.cols}@{reference.origin}'
        )
    if not np.array_equal(grid.validity, reference.validity):
        raise AlignmentError(f'{grid.encoder_id} and {reference.encoder_id} disagree on tissue validity')


@dataclass
class MaskedBatch:
    """Padded arrays for a batch of masked windows."""
    visible_embeddings: np.ndarray   # (B, V, d_i)
    visible_positions: np.ndarray    # (B, V, 2)
    visible_valid: np.ndarray        # (B, V)
    pred_positions: np.ndarray       # (B, P, 2)
    pred_valid: np.ndarray           # (B, P)
    targets: dict                    # target id -> (B, P, d_j), padded rows are ones
    row_weights: np.ndarray          # (B, P): 1 / (B * |p_b|) on real rows, 0 on padding

    @property
    def size(self):
        return self.pred_valid.shape[0]


def _padded(rows, length, width, fill=0.0):
    out = np.full((len(rows), length, width), fill, dtype=np.float64)
    for b, row in enumerate(rows):
        out[b, :len(row)] = row
    return out


def assemble_batch(items, input_id, target_ids):
    """Stack ``(grids by encoder id, MaskPlan)`` items into one MaskedBatch."""
    if not items:
        raise EmptyInputError('empty training batch')
    visible_emb, visible_pos, pred_pos, targets = [], [], [], {j: [] for j in target_ids}
    for grids, plan in items:
        if input_id not in grids:
            raise AlignmentError(f'window has no {input_id!r} grid')
        reference = grids[input_id]
        for j in target_ids:
            if j not in grids:
                raise AlignmentError(f'window has no {j!r} target grid')
            check_alignment(reference, grids[j])
        visible_emb.append(reference.embeddings[plan.visible[:, 0], plan.visible[:, 1]])
        visible_pos.append(plan.visible)
        pred_pos.append(plan.predicted)
        for j in target_ids:
            targets[j].append(grids[j].embeddings[plan.predicted[:, 0], plan.predicted[:, 1]])

    n_vis = max(len(v) for v in visible_pos)
    n_pred = max(len(p) for p in pred_pos)
    batch = len(items)
    visible_valid = np.zeros((batch, n_vis), dtype=bool)
    pred_valid = np.zeros((batch, n_pred), dtype=bool)
    row_weights = np.zeros((batch, n_pred))
    for b in range(batch):
        visible_valid[b, :len(visible_pos[b])] = True
        pred_valid[b, :len(pred_pos[b])] = True
        row_weights[b, :len(pred_pos[b])] = 1.0 / (batch * len(pred_pos[b]))
    return MaskedBatch(
        visible_embeddings=_padded(visible_emb, n_vis, visible_emb[0].shape[-1]),
        visible_positions=_padded(visible_pos, n_vis, 2).astype(np.int64),
        visible_valid=visible_valid,
        pred_positions=_padded(pred_pos, n_pred, 2).astype(np.int64),
        pred_valid=pred_valid,
        targets={j: _padded(rows, n_pred, rows[0].shape[-1], fill=1.0) for j, rows in targets.items()},
        row_weights=row_weights,
    )


def batch_loss(params, batch, input_id, target_ids):
    """(total Tensor, {target id: Tensor}) averaged over the batch's windows."""
    context = encode_batch(
        params, input_id, batch.visible_embeddings, batch.visible_positions, batch.visible_valid,
    )
    predictions = decode_batch(
        params, context, batch.visible_positions, batch.visible_valid,
        batch.pred_positions, batch.pred_valid, target_ids,
    )
    per_target = {}
    for j in target_ids:
        cos = F.cosine_similarity(predictions[j], batch.targets[j])
        # padded rows carry zero weight; the real weights sum to 1
        per_target[j] = F.sub(1.0, F.sum(F.mul(cos, batch.row_weights)))
    total = per_target[target_ids[0]]
    for j in target_ids[1:]:
        total = F.add(total, per_target[j])
    return total, per_target


def ofmm_loss(params, input_id, grids, plan, target_ids):
    """Loss of one masked window; returns (total Tensor, {target id: float})."""
    target_ids = list(target_ids)
    total, per_target = batch_loss(params, assemble_batch([(grids, plan)], input_id, target_ids), input_id, target_ids)
    return total, {j: t.item() for j, t in per_target.items()}
