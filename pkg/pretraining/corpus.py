# pretraining/corpus.py
import logging

from pretraining.masking import make_mask_plan, plan_seed
from ticon_lab.exceptions import EmptyInputError
from ticon_lab.seeding import stream

logger = logging.getLogger(__name__)


class WindowCorpus:
    """Pretraining windows of one split, cropped from the cached grid files."""

    def __init__(self, store, split, encoder_ids):
        self.store = store
        self.split = split
        self.encoder_ids = list(encoder_ids)
        self.candidates = store.candidates(split)
        if not self.candidates:
            raise EmptyInputError(f'no pretraining windows in split {split!r} of {store.root}')
        self._windows = {}

    def __len__(self):
        return len(self.candidates)

    def window(self, index):
        """``{encoder id: EmbeddingGrid}`` crops of candidate ``index``."""
        if index not in self._windows:
            cand = self.candidates[index]
            self._windows[index] = {
                encoder_id: self.store.load_grid(cand.slide_id, encoder_id).crop(cand.origin, cand.k)
                for encoder_id in self.encoder_ids
            }
        return self._windows[index]

    def batch(self, root_seed, iteration, batch_size):
        """``[(candidate, windows)]`` drawn for one optimizer step."""
        rng = stream(root_seed, 'pretrain', 'batch', iteration)
        picked = rng.choice(len(self), size=batch_size, replace=len(self) < batch_size).tolist()
        return [(self.candidates[i], self.window(i)) for i in picked]

    def fixed_items(self, root_seed, count, mask_ratio, prediction_ratio, input_id=None):
        """A fixed set of masked windows for held-out loss tracking."""
        input_id = input_id or self.encoder_ids[0]
        rng = stream(root_seed, 'heldout', self.split)
        picked = sorted(rng.choice(len(self), size=min(count, len(self)), replace=False).tolist())
        items = []
        for i in picked:
            windows = self.window(i)
            seed = plan_seed(root_seed, self.candidates[i], 0, purpose='heldout-plan')
            items.append((windows, make_mask_plan(windows[input_id].validity, mask_ratio, prediction_ratio, seed)))
        return items
