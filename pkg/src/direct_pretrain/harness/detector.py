"""A small two-stage detector with the Mask R-CNN part layout.

backbone -> neck (two-level top-down fusion) -> rpn -> RoIAlign ->
box_head (4conv1fc) and mask_head. Every normalisation layer is a
:class:`ModeBatchNorm2d`; every parameter belongs to exactly one part.
"""
import math

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms, box_iou, nms, roi_align

from ..bn import ModeBatchNorm2d

PART_REGISTRY = {
    "backbone": "backbone",
    "neck": "neck",
    "rpn": "rpn",
    "box_head": "box_head",
    "mask_head": "mask_head",
}


def conv_bn(cin, cout, stride=1, k=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        ModeBatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    def __init__(self, width=16):
        super().__init__()
        self.stem = conv_bn(3, width, stride=2)
        self.layer1 = nn.Sequential(conv_bn(width, 2 * width, stride=2), conv_bn(2 * width, 2 * width))
        self.layer2 = nn.Sequential(conv_bn(2 * width, 4 * width, stride=2), conv_bn(4 * width, 4 * width))
        self.layer3 = conv_bn(4 * width, 4 * width, stride=2)
        self.out_channels = (4 * width, 4 * width)

    def forward(self, x):
        c3 = self.layer2(self.layer1(self.stem(x)))
        c4 = self.layer3(c3)
        return c3, c4


class Neck(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.lateral3 = nn.Conv2d(in_channels[0], out_channels, 1)
        self.lateral4 = nn.Conv2d(in_channels[1], out_channels, 1)
        self.smooth = conv_bn(out_channels, out_channels)

    def forward(self, c3, c4):
        top = F.interpolate(self.lateral4(c4), size=c3.shape[-2:], mode="nearest")
        return self.smooth(self.lateral3(c3) + top)


class RpnHead(nn.Module):
    def __init__(self, channels, num_anchors):
        super().__init__()
        self.conv = conv_bn(channels, channels)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.constant_(self.cls.bias, -math.log(99.0))
        nn.init.normal_(self.reg.weight, std=0.01)
        nn.init.zeros_(self.reg.bias)

    def forward(self, feat):
        t = self.conv(feat)
        n, _, h, w = t.shape
        obj = self.cls(t).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.reg(t).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return obj, deltas


class BoxHead(nn.Module):
    """Four 3x3 conv + BN layers, one fc, then classifier and box regressor."""

    def __init__(self, channels, num_classes, roi_size=7, fc_dim=256):
        super().__init__()
        self.convs = nn.Sequential(*[conv_bn(channels, channels) for _ in range(4)])
        self.fc = nn.Linear(channels * roi_size * roi_size, fc_dim)
        self.cls = nn.Linear(fc_dim, num_classes + 1)
        self.reg = nn.Linear(fc_dim, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.zeros_(self.cls.bias)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.reg.bias)

    def forward(self, x):
        x = F.relu(self.fc(self.convs(x).flatten(1)))
        return self.cls(x), self.reg(x)


class MaskHead(nn.Module):
    def __init__(self, channels, num_classes):
        super().__init__()
        self.convs = nn.Sequential(conv_bn(channels, channels), conv_bn(channels, channels))
        self.up = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.logits = nn.Conv2d(channels, num_classes, 1)

    def forward(self, x):
        return self.logits(F.relu(self.up(self.convs(x))))


# --------------------------------------------------------------------------
# box coding


def encode(ref, gt, weights):
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack([wx * (gx - rx) / rw, wy * (gy - ry) / rh,
                        ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1)


def decode(ref, deltas, weights, clip=math.log(1000.0 / 16)):
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=clip)
    dh = (deltas[:, 3] / wh).clamp(max=clip)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes, height, width):
    return torch.stack([boxes[:, 0].clamp(0, width), boxes[:, 1].clamp(0, height),
                        boxes[:, 2].clamp(0, width), boxes[:, 3].clamp(0, height)], dim=1)


def _sample(labels, num, pos_fraction, generator):
    """Indices of a positive/negative subsample; labels 1 / 0 / -1 (ignore)."""
    pos = torch.nonzero(labels == 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(len(pos), int(num * pos_fraction))
    n_neg = min(len(neg), num - n_pos)
    pos = pos[torch.randperm(len(pos), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(len(neg), generator=generator)[:n_neg]]
    return pos, neg


class ToyDetector(nn.Module):
    RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
    ROI_WEIGHTS = (10.0, 10.0, 5.0, 5.0)

    def __init__(self, num_classes=3, width=16, neck_channels=32, anchor_sizes=(8, 16, 32, 64),
                 stride=8, rpn_batch=128, roi_batch=32, pre_nms=300, post_nms_train=100,
                 post_nms_test=50, score_thresh=0.05, detections_per_img=100):
        super().__init__()
        self.num_classes = num_classes
        self.stride = stride
        self.anchor_sizes = tuple(anchor_sizes)
        self.rpn_batch = rpn_batch
        self.roi_batch = roi_batch
        self.pre_nms = pre_nms
        self.post_nms_train = post_nms_train
        self.post_nms_test = post_nms_test
        self.score_thresh = score_thresh
        self.detections_per_img = detections_per_img
        self.backbone = Backbone(width)
        self.neck = Neck(self.backbone.out_channels, neck_channels)
        self.rpn = RpnHead(neck_channels, len(anchor_sizes))
        self.box_head = BoxHead(neck_channels, num_classes)
        self.mask_head = MaskHead(neck_channels, num_classes)
        self.part_registry = dict(PART_REGISTRY)
        self.sample_generator = torch.Generator().manual_seed(0)

    # ----------------------------------------------------------------- parts
    def features(self, images):
        return self.neck(*self.backbone(images))

    def anchors(self, h, w, device=None):
        ys = (torch.arange(h, device=device, dtype=torch.float32) + 0.5) * self.stride
        xs = (torch.arange(w, device=device, dtype=torch.float32) + 0.5) * self.stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        sizes = torch.tensor(self.anchor_sizes, dtype=torch.float32, device=device)
        half = sizes / 2
        cx = cx[..., None]
        cy = cy[..., None]
        boxes = torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1)
        return boxes.reshape(-1, 4)

    def _roi_feats(self, feat, rois, size):
        return roi_align(feat, rois, output_size=size, spatial_scale=1.0 / self.stride,
                         sampling_ratio=1, aligned=True)

    def proposals(self, objectness, deltas, anchors, image_sizes, post_nms):
        out = []
        for i, (h, w) in enumerate(image_sizes):
            scores = objectness[i].detach()
            k = min(self.pre_nms, len(scores))
            top = scores.topk(k).indices
            boxes = decode(anchors[top], deltas[i, top].detach(), self.RPN_WEIGHTS)
            boxes = clip_boxes(boxes, h, w)
            s = scores[top]
            ok = ((boxes[:, 2] - boxes[:, 0]) > 1e-2) & ((boxes[:, 3] - boxes[:, 1]) > 1e-2)
            boxes, s = boxes[ok], s[ok]
            keep = nms(boxes, s, 0.7)[:post_nms]
            out.append(boxes[keep])
        return out

    # ----------------------------------------------------------------- forward
    def forward(self, images, targets=None, image_sizes=None):
        n, _, H, W = images.shape
        if image_sizes is None:
            image_sizes = [(H, W)] * n
        feat = self.features(images)
        objectness, deltas = self.rpn(feat)
        anchors = self.anchors(feat.shape[2], feat.shape[3], images.device)
        post = self.post_nms_train if self.training else self.post_nms_test
        props = self.proposals(objectness, deltas, anchors, image_sizes, post)
        if self.training:
            if targets is None:
                raise ValueError("targets are required in training mode")
            losses = self._rpn_loss(objectness, deltas, anchors, targets)
            losses.update(self._roi_losses(feat, props, targets))
            return losses
        return self._detect(feat, props, image_sizes)

    def _rpn_loss(self, objectness, deltas, anchors, targets):
        cls_terms, reg_terms, count = [], [], 0
        for i, t in enumerate(targets):
            gt = t["boxes"]
            labels = torch.zeros(len(anchors))
            matched = torch.zeros(len(anchors), dtype=torch.long)
            if len(gt):
                iou = box_iou(anchors, gt)
                best, matched = iou.max(dim=1)
                labels[(best >= 0.3) & (best < 0.7)] = -1
                labels[best >= 0.7] = 1
                gt_best = iou.max(dim=0).values
                for g in range(len(gt)):
                    if gt_best[g] > 0:
                        hit = torch.nonzero(iou[:, g] == gt_best[g]).flatten()
                        labels[hit] = 1
                        matched[hit] = g
            pos, neg = _sample(labels, self.rpn_batch, 0.5, self.sample_generator)
            idx = torch.cat([pos, neg])
            target = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))])
            cls_terms.append(F.binary_cross_entropy_with_logits(objectness[i, idx], target, reduction="sum"))
            if len(pos):
                tgt = encode(anchors[pos], gt[matched[pos]], self.RPN_WEIGHTS)
                reg_terms.append(F.smooth_l1_loss(deltas[i, pos], tgt, beta=1.0 / 9, reduction="sum"))
            count += len(idx)
        count = max(count, 1)
        zero = objectness.sum() * 0
        return {
            "loss_rpn_cls": sum(cls_terms) / count,
            "loss_rpn_reg": (sum(reg_terms) if reg_terms else zero) / count,
        }

    def _roi_losses(self, feat, props, targets):
        rois, cls_t, reg_t, fg_info = [], [], [], []
        for i, (p, t) in enumerate(zip(props, targets)):
            gt, gl = t["boxes"], t["labels"]
            cand = torch.cat([p, gt]) if len(gt) else p
            labels = torch.zeros(len(cand))
            matched = torch.zeros(len(cand), dtype=torch.long)
            if len(gt):
                best, matched = box_iou(cand, gt).max(dim=1)
                labels[best >= 0.5] = 1
            pos, neg = _sample(labels, self.roi_batch, 0.25, self.sample_generator)
            idx = torch.cat([pos, neg])
            boxes = cand[idx]
            rois.append(torch.cat([torch.full((len(idx), 1), float(i)), boxes], dim=1))
            cls = torch.zeros(len(idx), dtype=torch.long)
            if len(pos):
                cls[: len(pos)] = gl[matched[pos]] + 1
                reg_t.append(encode(cand[pos], gt[matched[pos]], self.ROI_WEIGHTS))
                fg_info.append((i, cand[pos], matched[pos], gl[matched[pos]]))
            cls_t.append(cls)
        rois = torch.cat(rois)
        cls_t = torch.cat(cls_t)
        logits, reg = self.box_head(self._roi_feats(feat, rois, 7))
        loss_cls = F.cross_entropy(logits, cls_t)
        fg = cls_t > 0
        zero = logits.sum() * 0
        if fg.any():
            loss_reg = F.smooth_l1_loss(reg[fg], torch.cat(reg_t), beta=1.0, reduction="sum") / max(len(cls_t), 1)
        else:
            loss_reg = zero
        loss_mask = zero
        if fg_info and all("masks" in t and t["masks"] is not None for t in targets):
            m_rois, m_tgt, m_cls = [], [], []
            for i, boxes, midx, labels in fg_info:
                gt_masks = targets[i]["masks"].float()[:, None]
                box_rois = torch.cat([torch.arange(len(boxes), dtype=torch.float32)[:, None], boxes], dim=1)
                crops = roi_align(gt_masks[midx], box_rois, output_size=28, spatial_scale=1.0,
                                  sampling_ratio=1, aligned=True)
                m_tgt.append((crops[:, 0] >= 0.5).float())
                m_rois.append(torch.cat([torch.full((len(boxes), 1), float(i)), boxes], dim=1))
                m_cls.append(labels)
            m_rois = torch.cat(m_rois)
            m_cls = torch.cat(m_cls)
            mask_logits = self.mask_head(self._roi_feats(feat, m_rois, 14))
            picked = mask_logits[torch.arange(len(m_cls)), m_cls]
            loss_mask = F.binary_cross_entropy_with_logits(picked, torch.cat(m_tgt))
        return {"loss_cls": loss_cls, "loss_box_reg": loss_reg, "loss_mask": loss_mask}

    @torch.no_grad()
    def _detect(self, feat, props, image_sizes):
        rois = torch.cat([torch.cat([torch.full((len(p), 1), float(i)), p], dim=1)
                          for i, p in enumerate(props)])
        if len(rois) == 0:
            return [self._empty() for _ in props]
        logits, reg = self.box_head(self._roi_feats(feat, rois, 7))
        probs = F.softmax(logits, dim=1)
        boxes_all = decode(rois[:, 1:], reg, self.ROI_WEIGHTS)
        results, start = [], 0
        for i, p in enumerate(props):
            end = start + len(p)
            h, w = image_sizes[i]
            boxes = clip_boxes(boxes_all[start:end], h, w)
            sc = probs[start:end, 1:]
            start = end
            r, c = torch.nonzero(sc > self.score_thresh, as_tuple=True)
            b, s = boxes[r], sc[r, c]
            ok = ((b[:, 2] - b[:, 0]) > 1e-2) & ((b[:, 3] - b[:, 1]) > 1e-2)
            b, s, c = b[ok], s[ok], c[ok]
            keep = batched_nms(b, s, c, 0.5)[: self.detections_per_img]
            results.append({"boxes": b[keep], "scores": s[keep], "labels": c[keep]})
        det_rois = torch.cat([torch.cat([torch.full((len(r["boxes"]), 1), float(i)), r["boxes"]], dim=1)
                              for i, r in enumerate(results)])
        if len(det_rois):
            mlog = self.mask_head(self._roi_feats(feat, det_rois, 14))
            labels = torch.cat([r["labels"] for r in results])
            mprob = torch.sigmoid(mlog[torch.arange(len(labels)), labels])
            start = 0
            for r in results:
                r["mask_probs"] = mprob[start:start + len(r["boxes"])]
                start += len(r["boxes"])
        else:
            for r in results:
                r["mask_probs"] = torch.zeros((0, 28, 28))
        return results

    @staticmethod
    def _empty():
        return {"boxes": torch.zeros((0, 4)), "scores": torch.zeros(0),
                "labels": torch.zeros(0, dtype=torch.long), "mask_probs": torch.zeros((0, 28, 28))}


def paste_masks(mask_probs, boxes, height, width, threshold=0.5):
    """Paste ``K x 28 x 28`` mask probabilities into ``K x height x width`` binary masks."""
    import numpy as np

    out = np.zeros((len(boxes), height, width), dtype=np.uint8)
    for k, (m, b) in enumerate(zip(mask_probs, boxes)):
        x1, y1, x2, y2 = [float(v) for v in b]
        ix1, iy1 = max(int(math.floor(x1)), 0), max(int(math.floor(y1)), 0)
        ix2, iy2 = min(int(math.ceil(x2)), width), min(int(math.ceil(y2)), height)
        if ix2 <= ix1 or iy2 <= iy1:
            continue
        # sample mask at pixel centres of the covered window
        xs = (torch.arange(ix1, ix2, dtype=torch.float32) + 0.5 - x1) / max(x2 - x1, 1e-6) * 2 - 1
        ys = (torch.arange(iy1, iy2, dtype=torch.float32) + 0.5 - y1) / max(y2 - y1, 1e-6) * 2 - 1
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        grid = torch.stack([gx, gy], dim=-1)[None]
        vals = F.grid_sample(m[None, None].float(), grid, align_corners=False, padding_mode="zeros")[0, 0]
        out[k, iy1:iy2, ix1:ix2] = (vals >= threshold).numpy()
    return out
