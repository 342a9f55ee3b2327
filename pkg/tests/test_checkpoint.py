import numpy as np
import pytest
import torch

from direct_pretrain.checkpoint import (
    PART_PROGRESSION,
    PART_TAGS,
    Checkpoint,
    load_checkpoint,
    load_partial,
    part_of,
    save_checkpoint,
    verify_transfer,
)
from direct_pretrain.errors import CheckpointError, CheckpointIntegrityError, TransferError
from direct_pretrain.harness.detector import PART_REGISTRY
from direct_pretrain.harness.train import build_model
from oracles import flat, pair, part_inputs


def test_part_of_examples():
    assert part_of("backbone.layer1.bn.gamma", PART_REGISTRY) == "backbone"
    assert part_of("rpn.cls.weight", PART_REGISTRY) == "rpn"
    assert part_of("classifier.weight", PART_REGISTRY) == "other"
    assert part_of("rpnx.weight", {"rpn": "rpn"}) == "other"
    assert part_of("a.b.c", {"a": "backbone", "a.b": "neck"}) == "neck"


def test_toy_detector_tags_everything():
    model = build_model(3, 0)
    tags = {k: part_of(k, model.part_registry) for k in model.state_dict()}
    assert "other" not in tags.values()
    assert set(tags.values()) == set(PART_TAGS)


def test_save_load_roundtrip(tmp_path):
    src, _ = pair()
    meta = {"phase": "pretrain", "schedule_preset": "P3x", "resolution": [64, 64], "batch": 32,
            "seed": 1, "iteration": 7, "nested": {"x": [1, 2]}}
    path = save_checkpoint(src, tmp_path / "a.ckpt", meta)
    ck = load_checkpoint(path)
    assert ck.meta == meta
    for k, v in src.state_dict().items():
        assert ck.params[k].dtype == v.numpy().dtype
        np.testing.assert_array_equal(ck.params[k], v.numpy())
    assert ck.digest() == Checkpoint.from_model(src).digest()
    assert not list(tmp_path.glob("*.tmp"))


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic"])
def test_corrupted_file_detected(tmp_path, damage):
    src, _ = pair()
    path = save_checkpoint(src, tmp_path / "a.ckpt", {"iteration": 0})
    raw = bytearray(path.read_bytes())
    if damage == "truncate":
        raw = raw[: len(raw) - 100]
    elif damage == "flip":
        raw[-10] ^= 0xFF
    else:
        raw[:6] = b"NOTCKP"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_unwritable_path(tmp_path):
    src, _ = pair()
    with pytest.raises(CheckpointError):
        save_checkpoint(src, tmp_path / "missing_dir" / "a.ckpt")


def test_checkpoint_invariants():
    with pytest.raises(CheckpointError):
        Checkpoint({"a": np.zeros(1)}, {}, {})
    with pytest.raises(CheckpointError):
        Checkpoint({"a": np.zeros(1)}, {"a": "trunk"}, {})
    with pytest.raises(CheckpointError):
        Checkpoint({}, {}, {"iteration": -1})


@pytest.mark.parametrize("parts", PART_PROGRESSION, ids=lambda p: "+".join(t for t in PART_TAGS if t in p))
def test_progression_transfer(parts):
    src, dst = pair()
    ck = Checkpoint.from_model(src)
    before = {k: v.clone() for k, v in dst.state_dict().items()}
    _, report = load_partial(dst, ck, parts)
    # report key sets match hand enumeration over the registry
    requested = sorted(k for k in before if part_of(k, PART_REGISTRY) in parts)
    assert sorted(report.loaded) == requested
    assert report.missing == [] and report.unexpected == [] and report.shape_mismatches == []
    after = dst.state_dict()
    for k in before:
        if k in requested:
            assert torch.equal(after[k], src.state_dict()[k]), k
        else:
            assert torch.equal(after[k], before[k]), k  # non-interference
    src.eval()
    dst.eval()
    inputs = part_inputs(src)
    for tag in parts:
        a = flat(getattr(src, tag)(*inputs[tag]))
        b = flat(getattr(dst, tag)(*inputs[tag]))
        assert all(torch.equal(x, y) for x, y in zip(a, b)), tag
    assert verify_transfer(dst, ck, parts)


def test_loaded_sets_are_monotone():
    src, _ = pair()
    ck = Checkpoint.from_model(src)
    prev = set()
    for parts in PART_PROGRESSION:
        _, rep = load_partial(build_model(3, 2), ck, parts)
        assert prev <= set(rep.loaded)
        prev = set(rep.loaded)


def test_full_transfer_forward_equality():
    src, dst = pair()
    load_partial(dst, Checkpoint.from_model(src), "all")
    src.eval()
    dst.eval()
    x = torch.randn(2, 3, 64, 64, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        a, b = src(x), dst(x)
    for ra, rb in zip(a, b):
        for k in ra:
            assert torch.equal(ra[k], rb[k])


def test_shape_mismatch_strict_and_permissive():
    src, _ = pair()
    ck = Checkpoint.from_model(src)
    dst = build_model(5, 2)
    before = {k: v.clone() for k, v in dst.state_dict().items()}
    with pytest.raises(TransferError):
        load_partial(dst, ck, "all", strict=True)
    assert all(torch.equal(before[k], v) for k, v in dst.state_dict().items())  # nothing written
    _, rep = load_partial(dst, ck, "all", strict=False)
    assert set(rep.shape_mismatches) == {"box_head.cls.weight", "box_head.cls.bias",
                                         "mask_head.logits.weight", "mask_head.logits.bias"}
    lists = [set(getattr(rep, k)) for k in ("loaded", "missing", "unexpected", "shape_mismatches")]
    assert all(not (a & b) for i, a in enumerate(lists) for b in lists[i + 1:])
    assert verify_transfer(dst, ck, "all")


def test_missing_and_unexpected_entries():
    src, dst = pair()
    ck = Checkpoint.from_model(src)
    ck.params.pop("rpn.cls.weight")
    ck.part_index.pop("rpn.cls.weight")
    ck.params["extra.w"] = np.zeros(2, np.float32)
    ck.part_index["extra.w"] = "other"
    _, rep = load_partial(dst, ck, ["rpn"])
    assert rep.missing == ["rpn.cls.weight"]
    assert rep.unexpected == ["extra.w"]
    requested = {k for k in dst.state_dict() if k.startswith("rpn.")}
    assert set(rep.loaded) | set(rep.missing) == requested


def test_verify_transfer_negative_cases():
    src, dst = pair()
    ck = Checkpoint.from_model(src)
    assert not verify_transfer(dst, ck, "all")
    load_partial(dst, ck, "all")
    assert verify_transfer(dst, ck, "all")
    with torch.no_grad():
        next(dst.backbone.parameters()).add_(1e-3)
    assert not verify_transfer(dst, ck, ["backbone"])


def test_unknown_part_rejected():
    src, dst = pair()
    with pytest.raises(CheckpointError):
        load_partial(dst, Checkpoint.from_model(src), "wheels")
