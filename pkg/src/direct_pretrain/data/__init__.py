from .collate import batch_collate
from .geometry import apply_plan, invert_plan, transform_boxes, transform_masks, transform_points
from .resize import (
    imagenet_style_resize,
    keep_ratio_resize,
    multi_scale_keep_ratio_resize,
    plan_for,
    resize_sample,
    sample_rng,
    stitcher_style_resize,
)
from .types import ImageSample, ResizePlan, ResizeSpec

__all__ = [
    "ImageSample",
    "ResizePlan",
    "ResizeSpec",
    "apply_plan",
    "batch_collate",
    "imagenet_style_resize",
    "invert_plan",
    "keep_ratio_resize",
    "multi_scale_keep_ratio_resize",
    "plan_for",
    "resize_sample",
    "sample_rng",
    "stitcher_style_resize",
    "transform_boxes",
    "transform_masks",
    "transform_points",
]
