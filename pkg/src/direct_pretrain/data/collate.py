import numpy as np

from ..errors import SampleError
from .types import ResizePlan


def _ceil_to(x, divisor):
    return -(-x // divisor) * divisor


def batch_collate(samples, plans=None, pad_divisor=32):
    """Stack resized samples into an ``N x H x W x C`` batch.

    If every sample already has the same shape (ImageNet-style crops) the
    batch is that shape; otherwise each sample is zero padded at the bottom
    and right to the per-batch maximum rounded up to ``pad_divisor``.
    Returns ``(batch, plans)`` with the collation padding folded into plans
    (identity plans when none are given).
    """
    if not samples:
        raise SampleError("cannot collate an empty batch")
    channels = {s.pixels.shape[2] for s in samples}
    if len(channels) != 1:
        raise SampleError(f"mixed channel counts in batch: {sorted(channels)}")
    shapes = {s.pixels.shape[:2] for s in samples}
    if len(shapes) == 1:
        out_h, out_w = shapes.pop()
    else:
        out_h = _ceil_to(max(s.pixels.shape[0] for s in samples), pad_divisor)
        out_w = _ceil_to(max(s.pixels.shape[1] for s in samples), pad_divisor)
    c = channels.pop()
    batch = np.zeros((len(samples), out_h, out_w, c), dtype=np.float32)
    for i, s in enumerate(samples):
        h, w = s.pixels.shape[:2]
        batch[i, :h, :w] = s.pixels
    if plans is None:
        plans = [ResizePlan.identity(*s.pixels.shape[:2]) for s in samples]
    plans = [p.with_pad(out_h, out_w) for p in plans]
    return batch, plans


def pad_masks(masks, out_h, out_w):
    """Bottom-right zero pad an ``N x h x w`` mask stack."""
    n, h, w = masks.shape
    out = np.zeros((n, out_h, out_w), dtype=np.uint8)
    out[:, :h, :w] = masks
    return out
