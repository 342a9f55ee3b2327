"""Checkpoint files and part-tagged partial weight transfer.

File layout::

    b"DPCKPT" + u16 version + u64 header length
    header: UTF-8 JSON {meta, part_index, arrays: [{name, dtype, shape, offset, nbytes}], sha256}
    payload: raw little-endian array bytes, concatenated

``sha256`` covers the payload; any truncation or bit flip is reported as a
:class:`CheckpointIntegrityError`.
"""
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch

from .errors import CheckpointError, CheckpointIntegrityError, TransferError

MAGIC = b"DPCKPT"
VERSION = 1
PART_TAGS = ("backbone", "neck", "rpn", "box_head", "mask_head")
ALL_TAGS = PART_TAGS + ("other",)
# cumulative load sets: Backbone, +FPN, +RPN, +box head, +mask head
PART_PROGRESSION = tuple(frozenset(PART_TAGS[: i + 1]) for i in range(len(PART_TAGS)))


def part_of(name, registry):
    """Tag of a parameter name by longest matching dotted prefix; else ``other``."""
    best, best_len = "other", -1
    for prefix, tag in registry.items():
        if (name == prefix or name.startswith(prefix + ".")) and len(prefix) > best_len:
            best, best_len = tag, len(prefix)
    return best


def _registry(model):
    reg = getattr(model, "part_registry", None)
    if reg is None:
        raise CheckpointError(f"{type(model).__name__} does not declare a part_registry")
    return reg


def model_arrays(model):
    """State dict (parameters + BN buffers) as numpy arrays."""
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    part_index: Dict[str, str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(self.params) - set(self.part_index)
        if missing:
            raise CheckpointError(f"parameters without a part tag: {sorted(missing)[:5]}")
        bad = {t for t in self.part_index.values() if t not in ALL_TAGS}
        if bad:
            raise CheckpointError(f"unknown part tags {sorted(bad)}")
        if int(self.meta.get("iteration", 0)) < 0:
            raise CheckpointError("meta.iteration must be >= 0")

    @classmethod
    def from_model(cls, model, meta=None):
        reg = _registry(model)
        params = model_arrays(model)
        return cls(params, {k: part_of(k, reg) for k in params}, dict(meta or {}))

    def names_for(self, parts):
        return [k for k, t in self.part_index.items() if t in parts]

    def digest(self):
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def save_checkpoint(model_or_ckpt, path, meta=None):
    """Write a checkpoint atomically (temp file + rename). Returns the path."""
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, meta)
    if meta is not None and isinstance(model_or_ckpt, Checkpoint):
        ckpt.meta = dict(meta)
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps({
        "meta": ckpt.meta,
        "part_index": ckpt.part_index,
        "arrays": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC + struct.pack("<HQ", VERSION, len(header)))
            f.write(header)
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"cannot write checkpoint to {path}: {e}") from e
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    fixed = len(MAGIC) + struct.calcsize("<HQ")
    if len(raw) < fixed or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<HQ", raw[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointIntegrityError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < fixed + hlen:
        raise CheckpointIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[fixed:fixed + hlen])
    except ValueError as e:
        raise CheckpointIntegrityError(f"{path}: corrupted header") from e
    payload = raw[fixed + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch (truncated or corrupted)")
    params = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(params, header["part_index"], header["meta"])


@dataclass
class TransferReport:
    loaded: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    unexpected: List[str] = field(default_factory=list)
    shape_mismatches: List[str] = field(default_factory=list)

    def as_dict(self):
        return {k: list(getattr(self, k)) for k in ("loaded", "missing", "unexpected", "shape_mismatches")}

    def summary(self):
        return ", ".join(f"{k}={len(v)}" for k, v in self.as_dict().items())


def normalize_parts(parts):
    if isinstance(parts, str):
        parts = [p.strip() for p in parts.split(",") if p.strip()]
    parts = set(parts)
    if "all" in parts:
        parts = (parts - {"all"}) | set(PART_TAGS)
    bad = parts - set(ALL_TAGS)
    if bad:
        raise CheckpointError(f"unknown part tags {sorted(bad)}; allowed: {', '.join(ALL_TAGS)} or 'all'")
    return frozenset(parts)


def load_partial(model, checkpoint: Checkpoint, parts, strict=True):
    """Copy the checkpoint entries tagged with ``parts`` into ``model``.

    Only names whose model-side tag is in ``parts`` are requested; everything
    else in the model is left bit-identical. With ``strict`` a shape mismatch
    raises :class:`TransferError` before anything is written.
    """
    parts = normalize_parts(parts)
    reg = _registry(model)
    state = model.state_dict()
    report = TransferReport()
    report.unexpected = sorted(set(checkpoint.params) - set(state))
    updates = {}
    for name in sorted(state):
        if part_of(name, reg) not in parts:
            continue
        if name not in checkpoint.params:
            report.missing.append(name)
            continue
        src = checkpoint.params[name]
        if tuple(src.shape) != tuple(state[name].shape):
            report.shape_mismatches.append(name)
            continue
        updates[name] = src
        report.loaded.append(name)
    if strict and report.shape_mismatches:
        raise TransferError(f"shape mismatch for {report.shape_mismatches}")
    with torch.no_grad():
        for name, src in updates.items():
            dst = state[name]
            dst.copy_(torch.from_numpy(np.array(src)).to(dst.dtype))
    return model, report


def verify_transfer(model, checkpoint: Checkpoint, parts):
    """True iff every requested, shape-matched entry equals the checkpoint exactly."""
    parts = normalize_parts(parts)
    reg = _registry(model)
    state = model.state_dict()
    checked = 0
    for name, t in state.items():
        if part_of(name, reg) not in parts or name not in checkpoint.params:
            continue
        src = checkpoint.params[name]
        if tuple(src.shape) != tuple(t.shape):
            continue
        if not np.array_equal(t.detach().cpu().numpy(), src):
            return False
        checked += 1
    return checked > 0
