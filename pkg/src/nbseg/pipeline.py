"""Whole-image inference: tile, predict, vote-assemble, post-process."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .nbnet import Model, as_ternary_probs, merge_binary_predictions, predict_probs
from .postproc import PostprocConfig, segment
from .tiler import assemble, extract_patches, loss_weight_map, plan_patches


def _batches(items, size):
    batch = []
    for it in items:
        batch.append(it)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def tiled_probs(predict_fn, image: np.ndarray, patch_size: int = 128, stride: int = 64,
                batch_size: int = 8, jobs: int = 1, weighted: bool = True) -> np.ndarray:
    """Probability map for an arbitrarily large image.

    ``predict_fn`` maps a (B, s, s, 3) batch to (B, s, s, C) probabilities.
    With ``jobs > 1`` batches are predicted on a thread pool; assembly
    still consumes them in grid order.
    """
    grid = plan_patches(image.shape[0], image.shape[1], patch_size, stride)
    wmap = loss_weight_map(patch_size, patch_size) if weighted else np.ones((patch_size, patch_size))
    batches = _batches(extract_patches(image, grid), batch_size)

    def run(batch):
        return predict_fn(np.stack(batch))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(run, batches)
            return assemble((p for out in results for p in out), grid, wmap)
    return assemble((p for b in batches for p in run(b)), grid, wmap)


def model_predict_fn(model: Model):
    def fn(batch):
        return as_ternary_probs(predict_probs(model, batch.astype(model.config.dtype)), model.config.class_scheme)
    return fn


def merged_predict_fn(inside_model: Model, boundary_model: Model):
    def fn(batch):
        return merge_binary_predictions(predict_probs(inside_model, batch), predict_probs(boundary_model, batch))
    return fn


def predict_image(model: Model, image: np.ndarray, stride: int = 64, postproc: PostprocConfig | None = None,
                  batch_size: int = 8, jobs: int = 1, boundary_model: Model | None = None):
    """Returns (ternary probability map, instance label map)."""
    fn = merged_predict_fn(model, boundary_model) if boundary_model is not None else model_predict_fn(model)
    probs = tiled_probs(fn, image, model.config.input_size, stride, batch_size, jobs)
    return probs, segment(probs, postproc)
