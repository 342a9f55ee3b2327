"""Synthetic shapes dataset written in COCO layout.

Shapes are rasterised at pixel centres, so every box is exactly the bounding
box of its mask. Instances never overlap (rejection sampling), which keeps
that property true after compositing.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

from ..data.coco import mask_to_box, rle_encode, xyxy_to_xywh

KINDS = ("circle", "square", "triangle")


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 100
    image_size: Tuple[int, int] = (160, 128)  # (width, height)
    shapes_per_image: Tuple[int, int] = (1, 4)
    kinds: Sequence[str] = KINDS
    radius_range: Tuple[int, int] = (8, 24)
    seed: int = 0

    def __post_init__(self):
        bad = set(self.kinds) - set(KINDS)
        if bad:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"bad shapes_per_image {self.shapes_per_image}")


def rasterize(kind, cx, cy, r, height, width):
    """Binary mask of a shape sampled at pixel centres."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5 - cx
    py = ys + 0.5 - cy
    if kind == "circle":
        m = px * px + py * py <= r * r
    elif kind == "square":
        m = (np.abs(px) <= r) & (np.abs(py) <= r)
    elif kind == "triangle":
        # apex up at (0, -r), base from (-r, r) to (r, r)
        m = (py <= r) & (2 * px <= py + r) & (-2 * px <= py + r)
    else:
        raise ValueError(kind)
    return m.astype(np.uint8)


def _background(rng, height, width):
    base = rng.uniform(0, 80, size=3)
    noise = rng.normal(0, 12, size=(height, width, 3))
    grad = np.linspace(0, rng.uniform(0, 40), width)[None, :, None]
    return np.clip(base + noise + grad, 0, 255)


def generate_image(rng, spec: SyntheticSpec):
    width, height = spec.image_size
    img = _background(rng, height, width)
    lo, hi = spec.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    instances = []
    occupied = np.zeros((height, width), dtype=bool)
    for _ in range(n):
        for _attempt in range(50):
            kind = spec.kinds[int(rng.integers(0, len(spec.kinds)))]
            r = float(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
            r = min(r, (min(width, height) - 2) / 2)
            cx = float(rng.uniform(r + 1, width - r - 1))
            cy = float(rng.uniform(r + 1, height - r - 1))
            mask = rasterize(kind, cx, cy, r, height, width)
            box = mask_to_box(mask)
            if box is None:
                continue
            x1, y1, x2, y2 = box.astype(int)
            if occupied[max(y1 - 1, 0):y2 + 1, max(x1 - 1, 0):x2 + 1].any():
                continue
            occupied[y1:y2, x1:x2] = True
            color = rng.uniform(120, 255, size=3)
            img[mask.astype(bool)] = color
            instances.append((kind, mask, box))
            break
    return img.astype(np.uint8), instances


def generate_shapes_dataset(spec: SyntheticSpec, out_dir):
    """Write ``images/*.png`` and ``annotations.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    categories = [{"id": i + 1, "name": k} for i, k in enumerate(KINDS) if k in spec.kinds]
    cat_id = {c["name"]: c["id"] for c in categories}
    width, height = spec.image_size
    images, annotations = [], []
    ann_id = 1
    for i in range(spec.num_images):
        img, instances = generate_image(rng, spec)
        name = f"{i:06d}.png"
        Image.fromarray(img).save(out / "images" / name, optimize=False)
        images.append({"id": i + 1, "file_name": name, "width": width, "height": height})
        for kind, mask, box in instances:
            annotations.append({
                "id": ann_id,
                "image_id": i + 1,
                "category_id": cat_id[kind],
                "bbox": [float(v) for v in xyxy_to_xywh(box)[0]],
                "area": float(mask.sum()),
                "iscrowd": 0,
                "segmentation": rle_encode(mask),
            })
            ann_id += 1
    doc = {"images": images, "annotations": annotations, "categories": categories,
           "info": {"generator": "direct_pretrain.synthetic", "seed": spec.seed}}
    (out / "annotations.json").write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    return out
