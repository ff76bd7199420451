# slides/candidates.py
from dataclasses import asdict, dataclass

import numpy as np

from ticon_lab.exceptions import ShapeError
from ticon_lab.seeding import stream


@dataclass(frozen=True)
class Candidate:
    slide_id: str
    origin: tuple
    k: int
    tissue_fraction: float

    def as_dict(self):
        data = asdict(self)
        data['origin'] = list(self.origin)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(data['slide_id'], tuple(data['origin']), int(data['k']), float(data['tissue_fraction']))


def window_tissue_fractions(validity, k):
    """Tissue fraction of every k x k window, indexed by window origin."""
    integral = np.pad(validity.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    counts = integral[k:, k:] - integral[:-k, k:] - integral[k:, :-k] + integral[:-k, :-k]
    return counts / float(k * k)


def sample_candidates(slide, k, min_tissue, max_per_slide, seed):
    """Pick up to ``max_per_slide`` distinct k x k windows with enough tissue.

    Windows are drawn uniformly without replacement from the feasible set and
    returned sorted by origin.
    """
    rows, cols = slide.validity.shape
    if k > min(rows, cols):
        raise ShapeError(f'K={k} exceeds the {rows}x{cols} slide')
    fractions = window_tissue_fractions(slide.validity, k)
    feasible = np.argwhere(fractions >= min_tissue)
    if len(feasible) == 0 or max_per_slide <= 0:
        return []
    rng = stream(seed, 'candidates', slide.slide_id, k)
    picked = rng.choice(len(feasible), size=min(max_per_slide, len(feasible)), replace=False)
    return [
        Candidate(slide.slide_id, (int(r), int(c)), k, float(fractions[r, c]))
        for r, c in sorted(map(tuple, feasible[picked]))
    ]
