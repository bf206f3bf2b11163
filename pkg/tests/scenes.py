"""Procedural clean scenes for smoke datasets."""

import numpy as np
from PIL import Image


def make_scene(size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    top, bottom = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    img = top * (1 - yy[..., None]) + bottom * yy[..., None]
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 255, 3)
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.3, 1.5))
        img[mask] = color
    img += rng.normal(0, 4, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_scenes(folder, n, size=128, seed=0):
    rng = np.random.default_rng(seed)
    folder.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        Image.fromarray(make_scene(size, rng)).save(folder / f"scene_{i:03d}.png")
    return folder
