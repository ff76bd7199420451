# pretraining/masking.py
import math
from dataclasses import dataclass

import numpy as np

from ticon_lab.exceptions import DegenerateGridError, RangeError
from ticon_lab.seeding import derive_seed, stream


@dataclass(frozen=True)
class MaskPlan:
    """Split of a window's valid positions into visible and masked sets.

    ``predicted`` is the subset of ``masked`` the decoder reconstructs.
    Positions are (row, col) arrays in row-major order.
    """
    visible: np.ndarray
    masked: np.ndarray
    predicted: np.ndarray
    mask_ratio: float
    prediction_ratio: float
    seed: int

    @property
    def n_valid(self):
        return len(self.visible) + len(self.masked)


def _round_half_up(value):
    return int(math.floor(value + 0.5))


def mask_counts(n_valid, mask_ratio, prediction_ratio):
    """(n_masked, n_predicted) for ``n_valid`` positions."""
    n_mask = min(max(_round_half_up(mask_ratio * n_valid), 1), n_valid - 1)
    n_pred = min(n_mask, max(1, _round_half_up(prediction_ratio * n_valid)))
    return n_mask, n_pred


def make_mask_plan(validity, mask_ratio, prediction_ratio, seed):
    if not 0.0 < mask_ratio < 1.0:
        raise RangeError(f'mask ratio must lie in (0, 1), got {mask_ratio}')
    if not 0.0 < prediction_ratio <= mask_ratio:
        raise RangeError(f'prediction ratio must lie in (0, {mask_ratio}], got {prediction_ratio}')
    positions = np.argwhere(np.asarray(validity, dtype=bool))
    n_valid = len(positions)
    if n_valid < 2:
        raise DegenerateGridError(f'masking needs at least 2 valid positions, got {n_valid}')

    n_mask, n_pred = mask_counts(n_valid, mask_ratio, prediction_ratio)
    rng = stream(seed, 'maskplan')
    masked_idx = np.sort(rng.choice(n_valid, size=n_mask, replace=False))
    predicted_idx = np.sort(rng.choice(masked_idx, size=n_pred, replace=False))
    is_masked = np.zeros(n_valid, dtype=bool)
    is_masked[masked_idx] = True
    return MaskPlan(
        visible=positions[~is_masked],
        masked=positions[masked_idx],
        predicted=positions[predicted_idx],
        mask_ratio=mask_ratio,
        prediction_ratio=prediction_ratio,
        seed=int(seed),
    )


def plan_seed(root_seed, candidate, iteration, purpose='maskplan'):
    """Seed of the mask plan drawn for ``candidate`` at ``iteration``."""
    return derive_seed(root_seed, purpose, candidate.slide_id, candidate.origin[0], candidate.origin[1], iteration)
