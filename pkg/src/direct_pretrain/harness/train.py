"""Two-phase training loop for the toy detector."""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from ..bn import set_bn_mode, trainable_parameters
from ..checkpoint import Checkpoint, load_checkpoint, load_partial, save_checkpoint
from ..data.collate import batch_collate, pad_masks
from ..data.geometry import invert_plan, transform_boxes, transform_masks
from ..data.resize import plan_for, resize_sample, sample_rng
from ..data.types import ResizeSpec
from ..errors import DivergenceError
from ..schedule import LrPolicy, epochs_to_iters, get_preset, lr_at
from .detector import ToyDetector, paste_masks
from .evaluator import evaluate_ap
from .profiler import profile, timed_loop, write_log

log = logging.getLogger(__name__)


@dataclass
class LoadSpec:
    checkpoint: object  # path or Checkpoint
    parts: Tuple[str, ...] = ("all",)
    strict: bool = True


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    resize: ResizeSpec = field(default_factory=lambda: ResizeSpec("imagenet_style", base_size=64))
    total_batch: int = 32
    bn_mode: str = "train"
    lr: LrPolicy = field(default_factory=LrPolicy)
    preset: str = "P1x"
    epochs: Optional[int] = None
    max_iters: Optional[int] = None
    load: Optional[LoadSpec] = None
    seed: int = 0
    output_dir: Optional[str] = None
    name: Optional[str] = None
    num_workers: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: Optional[float] = 10.0
    model: dict = field(default_factory=dict)

    @property
    def schedule(self):
        # a zero-epoch run keeps the preset's LR shape but executes no steps
        return get_preset(self.preset, self.epochs or None)

    @property
    def run_name(self):
        return self.name or self.phase


def build_model(num_classes, seed, **kwargs):
    torch.manual_seed(seed)
    model = ToyDetector(num_classes=num_classes, **kwargs)
    model.sample_generator.manual_seed(seed)
    return model


def _targets(samples, out_h, out_w):
    targets = []
    for s in samples:
        t = {
            "boxes": torch.from_numpy(s.boxes.astype(np.float32)),
            "labels": torch.from_numpy(s.labels.astype(np.int64)),
        }
        if s.masks is not None:
            t["masks"] = torch.from_numpy(pad_masks(s.masks, out_h, out_w))
        targets.append(t)
    return targets


def make_batches(dataset, spec, total_batch, seed, epoch, indices=None):
    """Yield collated training batches for one epoch (ceil accounting)."""
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 2**31 - 1])).permutation(indices)
    for start in range(0, len(order), total_batch):
        chunk = order[start:start + total_batch]
        samples, plans = [], []
        for idx in chunk:
            s, p = resize_sample(dataset.sample(int(idx)), spec, sample_rng(seed, epoch, int(idx)))
            samples.append(s)
            plans.append(p)
        pixels, plans = batch_collate(samples, plans)
        images = torch.from_numpy(pixels).permute(0, 3, 1, 2).contiguous()
        sizes = [s.pixels.shape[:2] for s in samples]
        yield {
            "images": images,
            "targets": _targets(samples, pixels.shape[1], pixels.shape[2]),
            "image_sizes": sizes,
            "plans": plans,
            "batch_shape": list(pixels.shape),
        }


def _load_into(model, spec: LoadSpec):
    ckpt = spec.checkpoint
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    _, report = load_partial(model, ckpt, spec.parts, strict=spec.strict)
    log.info("loaded %s from checkpoint: %s", ",".join(spec.parts), report.summary())
    return report


def train_phase(config: TrainConfig, dataset, model=None):
    """Run one phase. Returns ``(checkpoint, run_log)``.

    With ``config.output_dir`` set, ``<name>.ckpt`` and ``<name>.log.jsonl``
    are written there once the phase completes.
    """
    if model is None:
        model = build_model(dataset.num_classes, config.seed, **config.model)
    else:
        model.sample_generator.manual_seed(config.seed)
    torch.manual_seed(config.seed)
    report = _load_into(model, config.load) if config.load is not None else None
    set_bn_mode(model, config.bn_mode, num_workers=config.num_workers)
    model.train()
    params = list(trainable_parameters(model).values())
    opt = torch.optim.SGD(params, lr=config.lr.base_lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    preset = config.schedule
    ipe = math.ceil(len(dataset) / config.total_batch)
    epochs = preset.epochs if config.epochs is None else config.epochs
    total = epochs_to_iters(len(dataset), config.total_batch, epochs)
    if config.max_iters is not None:
        total = min(total, int(config.max_iters))
    state = {"it": 0}

    def batches():
        epoch = 0
        while state["it"] < total:
            for b in make_batches(dataset, config.resize, config.total_batch, config.seed, epoch):
                if state["it"] >= total:
                    return
                yield b
            epoch += 1

    def step(batch):
        it = state["it"]
        lr = lr_at(config.lr, preset, it, ipe, batch=config.total_batch)
        for g in opt.param_groups:
            g["lr"] = lr
        losses = model(batch["images"], batch["targets"], batch["image_sizes"])
        loss = sum(losses.values())
        if not torch.isfinite(loss):
            parts = {k: float(v.detach()) for k, v in losses.items()}
            raise DivergenceError(f"non-finite loss at iteration {it} (lr={lr:.4g}): {parts}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        state["it"] = it + 1
        return {
            "epoch": it // ipe,
            "lr": lr,
            "loss": float(loss.detach()),
            **{k: float(v.detach()) for k, v in losses.items()},
            "batch_shape": batch["batch_shape"],
        }

    t0 = time.perf_counter()
    run_log = timed_loop(batches(), step)
    meta = {
        "phase": config.phase,
        "schedule_preset": preset.name,
        "epochs": epochs,
        "resolution": _resolution(config.resize),
        "resize_strategy": config.resize.strategy,
        "batch": config.total_batch,
        "bn_mode": config.bn_mode,
        "seed": config.seed,
        "iteration": state["it"],
        "wall_time": time.perf_counter() - t0,
        "num_classes": dataset.num_classes,
        "model": dict(config.model),
    }
    if report is not None:
        meta["transfer"] = report.as_dict()
    ckpt = Checkpoint.from_model(model, meta)
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(run_log, out / f"{config.run_name}.log.jsonl")
        save_checkpoint(ckpt, out / f"{config.run_name}.ckpt")
    return ckpt, run_log


def _resolution(spec: ResizeSpec):
    if spec.strategy == "imagenet_style":
        return [spec.base_size, spec.base_size]
    return [spec.max_long, spec.max_short]


def model_from_checkpoint(ckpt, **kwargs):
    num_classes = int(ckpt.meta.get("num_classes", 3))
    model = build_model(num_classes, 0, **{**ckpt.meta.get("model", {}), **kwargs})
    load_partial(model, ckpt, "all")
    return model


@torch.no_grad()
def predict(model, dataset, spec: ResizeSpec, indices=None, batch_size=8, with_masks=True):
    """Detections for ``indices`` mapped back to original image coordinates."""
    model.eval()
    indices = range(len(dataset)) if indices is None else indices
    indices = list(indices)
    out = {}
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        samples, plans = [], []
        for idx in chunk:
            s, p = resize_sample(dataset.sample(idx), spec, sample_rng(0, 0, idx))
            samples.append(s)
            plans.append(p)
        pixels, plans = batch_collate(samples, plans)
        images = torch.from_numpy(pixels).permute(0, 3, 1, 2).contiguous()
        sizes = [s.pixels.shape[:2] for s in samples]
        results = model(images, image_sizes=sizes)
        for idx, s, plan, r in zip(chunk, samples, plans, results):
            inv = invert_plan(plan)
            boxes = r["boxes"].numpy().astype(np.float64)
            back, keep = transform_boxes(boxes, inv)
            det = {
                "boxes": back,
                "scores": r["scores"].numpy()[keep].astype(np.float64),
                "labels": r["labels"].numpy()[keep],
            }
            if with_masks:
                h, w = plan.out_size
                pasted = paste_masks(r["mask_probs"][torch.as_tensor(keep, dtype=torch.long)],
                                     boxes[keep], h, w)
                det["masks"] = transform_masks(pasted, inv) if len(keep) else np.zeros((0,) + tuple(inv.out_size), np.uint8)
            out[dataset.images[idx]["id"]] = det
    return out


def ground_truth_table(dataset, indices=None):
    indices = range(len(dataset)) if indices is None else indices
    gts = {}
    for idx in indices:
        boxes, labels, masks = dataset.ground_truth(idx)
        gts[dataset.images[idx]["id"]] = {"boxes": boxes, "labels": labels, "masks": masks}
    return gts


def evaluate_model(model, dataset, spec: ResizeSpec, iou_type="bbox", indices=None, **kw):
    dets = predict(model, dataset, spec, indices, with_masks=iou_type == "segm")
    gts = ground_truth_table(dataset, indices)
    return evaluate_ap(dets, gts, iou_type=iou_type, categories=list(range(dataset.num_classes)), **kw)


__all__ = [
    "LoadSpec",
    "TrainConfig",
    "build_model",
    "evaluate_model",
    "ground_truth_table",
    "make_batches",
    "model_from_checkpoint",
    "predict",
    "profile",
    "train_phase",
]
