# slides/previews.py
from pathlib import Path

import numpy as np
from PIL import Image

# one color per region class, cycling for larger R; background is white
PALETTE = np.array([
    (200, 60, 60), (60, 60, 200), (230, 170, 50), (80, 170, 90),
    (150, 90, 170), (90, 190, 200), (140, 110, 80), (220, 120, 180),
], dtype=np.uint8)
BACKGROUND = np.array((255, 255, 255), dtype=np.uint8)


def region_map_image(slide, pixels_per_tile=8):
    colors = PALETTE[slide.region_labels % len(PALETTE)]
    colors[~slide.validity] = BACKGROUND
    image = Image.fromarray(colors)
    return image.resize(
        (slide.cols * pixels_per_tile, slide.rows * pixels_per_tile), resample=Image.Resampling.NEAREST
    )


def save_preview(slide, directory):
    path = Path(directory) / f'{slide.slide_id}.png'
    path.parent.mkdir(parents=True, exist_ok=True)
    region_map_image(slide).save(path)
    return path
