# slides/grids.py
from dataclasses import dataclass

import numpy as np

from ticon_lab.exceptions import ShapeError


@dataclass
class EmbeddingGrid:
    """An M x N grid of d-dimensional tile embeddings plus tissue validity.

    Invalid positions always hold all-zero embeddings.
    """
    encoder_id: str
    embeddings: np.ndarray
    validity: np.ndarray
    origin: tuple = (0, 0)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.embeddings.ndim != 3 or self.embeddings.shape[:2] != self.validity.shape:
            raise ShapeError(
                f'grid embeddings {self.embeddings.shape} do not match validity {self.validity.shape}'
            )
        if np.any(self.embeddings[~self.validity]):
            self.embeddings = np.where(self.validity[..., None], self.embeddings, 0.0)
        self.origin = (int(self.origin[0]), int(self.origin[1]))

    @property
    def rows(self):
        return self.embeddings.shape[0]

    @property
    def cols(self):
        return self.embeddings.shape[1]

    @property
    def dim(self):
        return self.embeddings.shape[2]

    @property
    def n_valid(self):
        return int(self.validity.sum())

    def valid_positions(self):
        """(n_valid, 2) array of (row, col), row-major order."""
        return np.argwhere(self.validity)

    def crop(self, origin, k):
        r, c = origin
        if r < 0 or c < 0 or r + k > self.rows or c + k > self.cols:
            raise ShapeError(f'{k}x{k} window at {origin} leaves the {self.rows}x{self.cols} grid')
        return EmbeddingGrid(
            encoder_id=self.encoder_id,
            embeddings=self.embeddings[r:r + k, c:c + k].copy(),
            validity=self.validity[r:r + k, c:c + k].copy(),
            origin=(self.origin[0] + r, self.origin[1] + c),
        )

    def same_content(self, other):
        return (
            self.encoder_id == other.encoder_id
            and self.origin == other.origin
            and np.array_equal(self.validity, other.validity)
            and np.array_equal(self.embeddings, other.embeddings)
        )


def pool_quadrants(fine, encoder_id=None):
    """Harmonize a 2M x 2N quadrant grid to M x N by averaging each 2x2 block.

    A coarse cell is valid only when all four of its quadrants are valid.
    """
    rows, cols = fine.rows, fine.cols
    if rows % 2 or cols % 2:
        raise ShapeError(f'quadrant grid must have even extents, got {rows}x{cols}')
    blocks = fine.embeddings.reshape(rows // 2, 2, cols // 2, 2, fine.dim)
    coarse = blocks.mean(axis=(1, 3))
    validity = fine.validity.reshape(rows // 2, 2, cols // 2, 2).all(axis=(1, 3))
    return EmbeddingGrid(
        encoder_id=encoder_id or fine.encoder_id,
        embeddings=np.where(validity[..., None], coarse, 0.0),
        validity=validity,
        origin=(fine.origin[0] // 2, fine.origin[1] // 2),
    )
