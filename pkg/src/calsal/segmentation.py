"""SLIC superpixels: k-means in (l, a, b, y, x) with local search windows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab


@dataclass
class SuperpixelSegmentation:
    labels: np.ndarray
    K: int


def lab_features(x) -> np.ndarray:
    """``(H, W, 5)`` features: CIELAB colour (sRGB, D65) followed by row and column."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape[2] == 3:
        lab = rgb2lab(np.clip(x, 0.0, 1.0))
    else:
        lab = np.zeros(x.shape[:2] + (3,))
        lab[..., 0] = x.mean(axis=2) * 100.0
    rows, cols = np.mgrid[0:x.shape[0], 0:x.shape[1]]
    return np.concatenate([lab, rows[..., None], cols[..., None]], axis=2)


def grid_centers(features, target_k) -> tuple[np.ndarray, float]:
    h, w = features.shape[:2]
    step = math.sqrt(h * w / target_k)
    ny, nx = max(1, round(h / step)), max(1, round(w / step))
    cy = ((np.arange(ny) + 0.5) * h / ny).astype(int)
    cx = ((np.arange(nx) + 0.5) * w / nx).astype(int)
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    return features[yy.ravel(), xx.ravel()].copy(), step


def slic_assign(features, centers, step, compactness) -> np.ndarray:
    """Label every pixel with the nearest centre among those whose 2S x 2S window covers it.

    Distance is ``d_lab^2 + (d_xy / S)^2 m^2``; ties go to the lowest centre
    index. Pixels outside every window get the globally nearest centre.
    """
    h, w = features.shape[:2]
    flat = features.reshape(-1, 5)
    colour = ((flat[None, :, :3] - centers[:, None, :3]) ** 2).sum(axis=2)
    offset = flat[None, :, 3:] - centers[:, None, 3:]
    space = (offset ** 2).sum(axis=2)
    dist = colour + space * (compactness / step) ** 2
    inside = np.all(np.abs(offset) <= step, axis=2)
    windowed = np.where(inside, dist, np.inf)
    labels = windowed.argmin(axis=0)
    uncovered = ~inside.any(axis=0)
    labels[uncovered] = dist[:, uncovered].argmin(axis=0)
    return labels.reshape(h, w)


def slic_kmeans(features, target_k, compactness=10.0, iters=10):
    """Run the assignment/update loop; returns ``(labels, centers used for the last assignment, S)``."""
    centers, step = grid_centers(features, target_k)
    flat = features.reshape(-1, 5)
    labels = None
    for _ in range(iters):
        labels = slic_assign(features, centers, step, compactness)
        used = centers
        counts = np.bincount(labels.ravel(), minlength=len(centers))
        sums = np.stack([np.bincount(labels.ravel(), weights=flat[:, d], minlength=len(centers))
                         for d in range(5)], axis=1)
        centers = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centers)
    return labels, used, step


def enforce_connectivity(labels) -> np.ndarray:
    """Keep each label's largest 4-connected piece; merge the other pieces into their largest neighbour.

    Output labels are consecutive, numbered by first appearance in row-major order.
    """
    h, w = labels.shape
    comp = np.zeros((h, w), dtype=np.int64)
    n_comp = 0
    owner = []
    for value in np.unique(labels):
        pieces, n = ndimage.label(labels == value)
        comp[pieces > 0] = pieces[pieces > 0] + n_comp
        owner += [value] * n
        n_comp += n
    comp -= 1
    sizes = np.bincount(comp.ravel(), minlength=n_comp)
    keeper = {}
    for c in range(n_comp):
        v = owner[c]
        if v not in keeper or sizes[c] > sizes[keeper[v]]:
            keeper[v] = c
    keepers = set(keeper.values())
    pairs = np.concatenate([
        np.stack([comp[:, 1:].ravel(), comp[:, :-1].ravel()], axis=1),
        np.stack([comp[1:, :].ravel(), comp[:-1, :].ravel()], axis=1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    neighbours = [set() for _ in range(n_comp)]
    for a, b in np.unique(np.sort(pairs, axis=1), axis=0):
        neighbours[a].add(b)
        neighbours[b].add(a)
    parent = list(range(n_comp))
    group_size = sizes.astype(np.int64).copy()

    def root(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    orphans = sorted((c for c in range(n_comp) if c not in keepers), key=lambda c: (sizes[c], c))
    for c in orphans:
        rc = root(c)
        candidates = {root(nb) for nb in neighbours[c]} - {rc}
        if not candidates:
            continue
        target = min(candidates, key=lambda r: (-group_size[r], r))
        parent[rc] = target
        group_size[target] += group_size[rc]
    roots = np.array([root(c) for c in range(n_comp)])[comp]
    _, first = np.unique(roots.ravel(), return_index=True)
    order = np.argsort(first)
    relabel = np.empty(roots.max() + 1, dtype=np.int64)
    relabel[np.unique(roots.ravel())[order]] = np.arange(len(order))
    return relabel[roots]


def slic_superpixels(x, target_k: int = 100, compactness: float = 10.0, iters: int = 10) -> SuperpixelSegmentation:
    """Segment an ``(H, W, C)`` image into roughly ``target_k`` connected superpixels."""
    x = np.asarray(x)
    h, w = x.shape[:2]
    if not 2 <= target_k <= h * w:
        raise ValueError(f"target_k must lie in [2, {h * w}]")
    labels, _, _ = slic_kmeans(lab_features(x), target_k, compactness, iters)
    labels = enforce_connectivity(labels)
    return SuperpixelSegmentation(labels, int(labels.max()) + 1)
