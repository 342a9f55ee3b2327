"""Resizing strategies for the pre-training and fine-tuning phases.

Every function returns ``(resized_sample, plan)``; the plan is all that is
needed to move annotations or detections between the two coordinate frames.
"""
import numpy as np

from ..errors import SampleError
from .geometry import apply_plan
from .types import ImageSample, ResizePlan, ResizeSpec, round_half_up


def sample_rng(global_seed, epoch, sample_index):
    """Per-sample generator; independent of worker count and load order."""
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), int(epoch), int(sample_index)]))


def _check_sample(sample):
    if sample.pixels.ndim != 3 or sample.pixels.shape[0] < 1 or sample.pixels.shape[1] < 1:
        raise SampleError(f"degenerate image with shape {sample.pixels.shape}")


def _expect(spec, strategy):
    if spec.strategy != strategy:
        raise SampleError(f"spec strategy is {spec.strategy!r}, expected {strategy!r}")


def imagenet_style_plan(height, width, spec: ResizeSpec, rng, alpha=None):
    lo, hi = spec.alpha_range
    if lo <= 0:
        raise SampleError(f"alpha_range lower bound must be > 0, got {lo}")
    if hi < lo:
        raise SampleError(f"alpha_range {spec.alpha_range} is not an interval")
    L = int(spec.base_size)
    if L < 1:
        raise SampleError(f"base_size must be positive, got {L}")
    if alpha is None:
        alpha = rng.uniform(lo, hi)
    side = max(1, round_half_up(alpha * L))
    if side > L:
        dx = int(rng.integers(0, side - L + 1))
        dy = int(rng.integers(0, side - L + 1))
        pad = (0, 0)
    else:
        dx = dy = 0
        pad = (L - side, L - side)
    return ResizePlan(
        scale_x=side / width,
        scale_y=side / height,
        crop_offset=(dx, dy),
        pad=pad,
        out_size=(L, L),
        in_size=(height, width),
    )


def imagenet_style_resize(sample: ImageSample, spec: ResizeSpec, rng, alpha=None):
    """Jitter to a square of side ``round(alpha * L)`` then crop or pad to ``L x L``."""
    _expect(spec, "imagenet_style")
    _check_sample(sample)
    plan = imagenet_style_plan(sample.height, sample.width, spec, rng, alpha=alpha)
    return apply_plan(sample, plan), plan


def keep_ratio_size(height, width, max_long, max_short):
    if max_long <= 0 or max_short <= 0:
        raise SampleError(f"max edges must be positive, got ({max_long}, {max_short})")
    long_edge, short_edge = max(height, width), min(height, width)
    scale = min(max_long / long_edge, max_short / short_edge)
    return max(1, round_half_up(height * scale)), max(1, round_half_up(width * scale))


def _plan_to(height, width, new_h, new_w):
    return ResizePlan(
        scale_x=new_w / width,
        scale_y=new_h / height,
        out_size=(new_h, new_w),
        in_size=(height, width),
    )


def keep_ratio_plan(height, width, spec: ResizeSpec):
    return _plan_to(height, width, *keep_ratio_size(height, width, spec.max_long, spec.max_short))


def keep_ratio_resize(sample: ImageSample, spec: ResizeSpec):
    _expect(spec, "keep_ratio")
    _check_sample(sample)
    plan = keep_ratio_plan(sample.height, sample.width, spec)
    return apply_plan(sample, plan), plan


def stitcher_style_plan(height, width, spec: ResizeSpec):
    n = spec.divide_factor
    if int(n) != n or n < 1:
        raise SampleError(f"divide_factor must be a positive integer, got {n}")
    h, w = keep_ratio_size(height, width, spec.max_long, spec.max_short)
    return _plan_to(height, width, max(1, round_half_up(h / n)), max(1, round_half_up(w / n)))


def stitcher_style_resize(sample: ImageSample, spec: ResizeSpec):
    """Keep-ratio resize followed by division of both sides by ``divide_factor``."""
    _expect(spec, "stitcher_style")
    _check_sample(sample)
    plan = stitcher_style_plan(sample.height, sample.width, spec)
    return apply_plan(sample, plan), plan


def multi_scale_plan(height, width, spec: ResizeSpec, rng):
    choices = spec.short_edge_choices
    if not choices:
        raise SampleError("short_edge_choices is empty")
    short = choices[int(rng.integers(0, len(choices)))] if len(choices) > 1 else choices[0]
    return _plan_to(height, width, *keep_ratio_size(height, width, spec.max_long, short))


def multi_scale_keep_ratio_resize(sample: ImageSample, spec: ResizeSpec, rng):
    _expect(spec, "multi_scale_keep_ratio")
    _check_sample(sample)
    plan = multi_scale_plan(sample.height, sample.width, spec, rng)
    return apply_plan(sample, plan), plan


def plan_for(height, width, spec: ResizeSpec, rng=None):
    """Draw the plan ``spec`` would apply to an image of this size."""
    if spec.strategy == "imagenet_style":
        return imagenet_style_plan(height, width, spec, rng)
    if spec.strategy == "stitcher_style":
        return stitcher_style_plan(height, width, spec)
    if spec.strategy == "keep_ratio":
        return keep_ratio_plan(height, width, spec)
    return multi_scale_plan(height, width, spec, rng)


def resize_sample(sample: ImageSample, spec: ResizeSpec, rng=None):
    """Dispatch on ``spec.strategy``."""
    _check_sample(sample)
    plan = plan_for(sample.height, sample.width, spec, rng)
    return apply_plan(sample, plan), plan
