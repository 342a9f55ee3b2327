from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from ..errors import SampleError

STRATEGIES = ("imagenet_style", "stitcher_style", "keep_ratio", "multi_scale_keep_ratio")


@dataclass
class ImageSample:
    """An image with corner-format pixel boxes, optional masks and labels.

    ``pixels`` is ``H x W x C`` float32 (already normalised), ``boxes`` is
    ``N x 4`` as ``(x1, y1, x2, y2)``, ``masks`` is ``N x H x W`` uint8.
    """

    pixels: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray] = None
    image_id: object = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def validate(self):
        if self.pixels.ndim != 3:
            raise SampleError(f"pixels must be HxWxC, got shape {self.pixels.shape}")
        h, w = self.pixels.shape[:2]
        if h < 1 or w < 1:
            raise SampleError(f"degenerate image of size {w}x{h}")
        n = len(self.boxes)
        if len(self.labels) != n:
            raise SampleError(f"{n} boxes but {len(self.labels)} labels")
        if n:
            b = self.boxes
            ok = (b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 0] < b[:, 2]) & (b[:, 1] < b[:, 3])
            ok &= (b[:, 2] <= w) & (b[:, 3] <= h)
            if not ok.all():
                bad = np.flatnonzero(~ok).tolist()
                raise SampleError(f"boxes {bad} fall outside the {w}x{h} image or are empty")
        if self.masks is not None:
            if self.masks.shape != (n, h, w):
                raise SampleError(f"masks shape {self.masks.shape} != {(n, h, w)}")
        return self

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class ResizeSpec:
    strategy: str = "imagenet_style"
    base_size: int = 448
    alpha_range: Tuple[float, float] = (0.8, 1.2)
    divide_factor: int = 2
    max_long: int = 1333
    max_short: int = 800
    short_edge_choices: Sequence[int] = (640, 672, 704, 736, 768, 800)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SampleError(f"unknown resize strategy {self.strategy!r}; expected one of {STRATEGIES}")
        object.__setattr__(self, "alpha_range", tuple(float(a) for a in self.alpha_range))
        object.__setattr__(self, "short_edge_choices", tuple(int(s) for s in self.short_edge_choices))


@dataclass(frozen=True)
class ResizePlan:
    """Scale, integer crop offset and bottom-right pad taking an ``in_size``
    image to ``out_size``. Sizes are ``(H, W)``.

    A point maps as ``x' = x * scale_x - crop_offset[0]`` (same for y).
    """

    scale_x: float
    scale_y: float
    crop_offset: Tuple[float, float] = (0.0, 0.0)
    pad: Tuple[int, int] = (0, 0)
    out_size: Tuple[int, int] = (0, 0)
    in_size: Tuple[int, int] = (0, 0)

    @property
    def content_size(self):
        """``(H, W)`` of the non-padded region of the output."""
        return (self.out_size[0] - self.pad[1], self.out_size[1] - self.pad[0])

    def with_pad(self, out_h, out_w):
        """Same plan with extra bottom-right padding up to ``(out_h, out_w)``."""
        ch, cw = self.content_size
        return replace(self, pad=(int(out_w - cw), int(out_h - ch)), out_size=(int(out_h), int(out_w)))

    def to_dict(self):
        return {
            "scale_x": self.scale_x,
            "scale_y": self.scale_y,
            "crop_offset": list(self.crop_offset),
            "pad": list(self.pad),
            "out_size": list(self.out_size),
            "in_size": list(self.in_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            scale_x=float(d["scale_x"]),
            scale_y=float(d["scale_y"]),
            crop_offset=tuple(d["crop_offset"]),
            pad=tuple(d["pad"]),
            out_size=tuple(d["out_size"]),
            in_size=tuple(d["in_size"]),
        )

    @classmethod
    def identity(cls, height, width):
        return cls(1.0, 1.0, (0, 0), (0, 0), (height, width), (height, width))


def round_half_up(x):
    return int(np.floor(x + 0.5))
