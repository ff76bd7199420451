# pretraining/compare.py
"""Multi-target vs single-target pretraining on cross-encoder reconstruction.

Both models see the same held-out windows. For every target encoder the
score is the mean held-out loss of reconstructing it from the *other*
encoders' inputs; the multi-target model should win on most targets. A
missed expectation is reported as a flagged record, never as an error.
"""
import logging

import numpy as np

from pretraining.training import cross_reconstruction
from ticon_lab.exceptions import RegistryError

logger = logging.getLogger(__name__)


def required_wins(n_targets):
    return max(1, -(-2 * n_targets // 3))


def compare_targets(multi_params, single_params, items, encoder_ids):
    for params, label in ((multi_params, 'multi-target'), (single_params, 'single-target')):
        missing = [e for e in encoder_ids if e not in params.cfg.input_dims or e not in params.cfg.target_dims]
        if missing:
            raise RegistryError(f'{label} model lacks encoders {missing}')
    multi = cross_reconstruction(multi_params, items, encoder_ids, encoder_ids)
    single = cross_reconstruction(single_params, items, encoder_ids, encoder_ids)

    targets = {}
    for target_id in encoder_ids:
        others = [i for i in encoder_ids if i != target_id]
        multi_loss = float(np.mean([multi[target_id][i] for i in others]))
        single_loss = float(np.mean([single[target_id][i] for i in others]))
        targets[target_id] = {
            'multi_target': multi_loss,
            'single_target': single_loss,
            'multi_wins': multi_loss <= single_loss,
        }
    wins = sum(t['multi_wins'] for t in targets.values())
    record = {
        'targets': targets,
        'wins': wins,
        'required': required_wins(len(encoder_ids)),
        'flagged': wins < required_wins(len(encoder_ids)),
    }
    if record['flagged']:
        logger.warning('multi-target model won only %d of %d cross-encoder targets', wins, len(encoder_ids))
    return record
