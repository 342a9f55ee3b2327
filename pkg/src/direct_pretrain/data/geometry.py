"""Propagating a :class:`ResizePlan` to pixels, boxes and masks."""
import numpy as np

from .. import kernels
from ..errors import SampleError
from .types import ResizePlan

MIN_BOX_SIDE = 1.0


def transform_boxes(boxes, plan: ResizePlan, min_side=MIN_BOX_SIDE):
    """Scale, shift and clip corner boxes.

    Returns ``(boxes, keep)`` where ``keep`` indexes the input rows that
    survive: a box is dropped when its clipped width or height is below
    ``min_side`` pixels.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    dx, dy = plan.crop_offset
    out_h, out_w = plan.out_size
    out = np.empty_like(boxes)
    out[:, 0::2] = boxes[:, 0::2] * plan.scale_x - dx
    out[:, 1::2] = boxes[:, 1::2] * plan.scale_y - dy
    np.clip(out[:, 0::2], 0.0, out_w, out=out[:, 0::2])
    np.clip(out[:, 1::2], 0.0, out_h, out=out[:, 1::2])
    keep = np.flatnonzero(((out[:, 2] - out[:, 0]) >= min_side) & ((out[:, 3] - out[:, 1]) >= min_side))
    return out[keep], keep


def transform_points(points, plan: ResizePlan):
    """Map ``(N, 2)`` xy points through the plan without clipping."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    dx, dy = plan.crop_offset
    return np.stack([pts[:, 0] * plan.scale_x - dx, pts[:, 1] * plan.scale_y - dy], axis=1)


def transform_masks(masks, plan: ResizePlan):
    """Nearest-neighbour resample an ``N x H x W`` mask stack through the plan."""
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    ch, cw = plan.content_size
    return kernels.resample_nearest(
        masks, plan.scale_x, plan.scale_y, plan.crop_offset[0], plan.crop_offset[1],
        plan.out_size[0], plan.out_size[1], ch, cw,
    )


def transform_pixels(pixels, plan: ResizePlan):
    ch, cw = plan.content_size
    return kernels.resample_bilinear(
        pixels, plan.scale_x, plan.scale_y, plan.crop_offset[0], plan.crop_offset[1],
        plan.out_size[0], plan.out_size[1], ch, cw,
    )


def invert_plan(plan: ResizePlan) -> ResizePlan:
    """Plan mapping output coordinates back to the original image."""
    if plan.scale_x == 0 or plan.scale_y == 0:
        raise SampleError("cannot invert a plan with zero scale")
    dx, dy = plan.crop_offset
    return ResizePlan(
        scale_x=1.0 / plan.scale_x,
        scale_y=1.0 / plan.scale_y,
        crop_offset=(-dx / plan.scale_x, -dy / plan.scale_y),
        pad=(0, 0),
        out_size=tuple(plan.in_size),
        in_size=tuple(plan.out_size),
    )


def apply_plan(sample, plan: ResizePlan):
    """Apply ``plan`` to every field of ``sample``; drops vanished instances."""
    boxes, keep = transform_boxes(sample.boxes, plan)
    masks = None
    if sample.masks is not None:
        masks = transform_masks(sample.masks[keep], plan)
    return sample.replace(
        pixels=transform_pixels(sample.pixels, plan),
        boxes=boxes,
        labels=sample.labels[keep],
        masks=masks,
    )
