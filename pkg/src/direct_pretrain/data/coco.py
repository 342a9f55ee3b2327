"""COCO-style annotation I/O.

Boxes are ``[x, y, w, h]`` on disk and corner format in memory; the
conversion happens only here. Segmentations may be polygons or uncompressed
RLE (``{"size": [h, w], "counts": [...]}``, column-major, zeros first).
"""
import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .types import ImageSample

PIXEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
PIXEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def xywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([b[:, :2], b[:, :2] + b[:, 2:]], axis=1)


def xyxy_to_xywh(b):
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([b[:, :2], b[:, 2:] - b[:, :2]], axis=1)


def rle_encode(mask):
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle):
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values.astype(np.uint8), counts)
    if flat.size != h * w:
        raise ValueError(f"RLE counts sum to {flat.size}, expected {h * w}")
    return flat.reshape((h, w), order="F")


def polygons_to_mask(polygons, height, width):
    img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(img)
    for poly in polygons:
        if len(poly) >= 6:
            draw.polygon([(poly[i], poly[i + 1]) for i in range(0, len(poly), 2)], fill=1)
    return np.asarray(img, dtype=np.uint8)


def segmentation_to_mask(seg, height, width):
    if isinstance(seg, dict):
        return rle_decode(seg)
    return polygons_to_mask(seg, height, width)


def mask_to_box(mask):
    """Tight corner box ``[x1, y1, x2, y2]`` of a binary mask, or ``None``."""
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if len(xs) == 0:
        return None
    return np.array([xs[0], ys[0], xs[-1] + 1, ys[-1] + 1], dtype=np.float64)


def normalize_pixels(rgb):
    return ((np.asarray(rgb, dtype=np.float32) / 255.0) - PIXEL_MEAN) / PIXEL_STD


class CocoDataset:
    """Image directory + COCO annotation document, decoded on demand."""

    def __init__(self, root, annotation_file="annotations.json", image_dir="images", cache=True):
        self.root = Path(root)
        self.image_dir = self.root / image_dir
        with open(self.root / annotation_file) as f:
            doc = json.load(f)
        self.doc = doc
        self.images = sorted(doc["images"], key=lambda im: im["id"])
        self.categories = sorted(doc["categories"], key=lambda c: c["id"])
        self.cat_to_label = {c["id"]: i for i, c in enumerate(self.categories)}
        self.label_to_cat = {i: c["id"] for i, c in enumerate(self.categories)}
        self.anns_by_image = {im["id"]: [] for im in self.images}
        for ann in doc["annotations"]:
            self.anns_by_image[ann["image_id"]].append(ann)
        self._cache = {} if cache else None

    @property
    def num_classes(self):
        return len(self.categories)

    def __len__(self):
        return len(self.images)

    def read_rgb(self, index):
        info = self.images[index]
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        with Image.open(self.image_dir / info["file_name"]) as im:
            rgb = np.asarray(im.convert("RGB"))
        if self._cache is not None:
            self._cache[index] = rgb
        return rgb

    def ground_truth(self, index):
        """``(boxes, labels, masks)`` in original image coordinates."""
        info = self.images[index]
        h, w = info["height"], info["width"]
        anns = [a for a in self.anns_by_image[info["id"]] if not a.get("iscrowd", 0)]
        boxes = xywh_to_xyxy([a["bbox"] for a in anns]) if anns else np.zeros((0, 4))
        labels = np.array([self.cat_to_label[a["category_id"]] for a in anns], dtype=np.int64)
        if anns and all("segmentation" in a for a in anns):
            masks = np.stack([segmentation_to_mask(a["segmentation"], h, w) for a in anns])
        else:
            masks = np.zeros((len(anns), h, w), dtype=np.uint8) if not anns else None
        return boxes, labels, masks

    def sample(self, index):
        boxes, labels, masks = self.ground_truth(index)
        return ImageSample(
            pixels=normalize_pixels(self.read_rgb(index)),
            boxes=boxes,
            labels=labels,
            masks=masks,
            image_id=self.images[index]["id"],
        )


def write_coco(path, images, annotations, categories):
    doc = {"images": images, "annotations": annotations, "categories": categories}
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    return path


def detections_to_results(image_id, boxes, scores, labels, label_to_cat):
    """COCO result records (``bbox`` in xywh) for one image."""
    xywh = xyxy_to_xywh(boxes)
    return [
        {
            "image_id": image_id,
            "category_id": int(label_to_cat[int(l)]),
            "bbox": [float(v) for v in b],
            "score": float(s),
        }
        for b, s, l in zip(xywh, scores, labels)
    ]
