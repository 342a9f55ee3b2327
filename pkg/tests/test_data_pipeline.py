import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from direct_pretrain.data import (
    ImageSample,
    ResizePlan,
    ResizeSpec,
    batch_collate,
    imagenet_style_resize,
    invert_plan,
    keep_ratio_resize,
    multi_scale_keep_ratio_resize,
    resize_sample,
    sample_rng,
    stitcher_style_resize,
    transform_boxes,
    transform_masks,
    transform_points,
)
from direct_pretrain.data.coco import mask_to_box, rle_decode, rle_encode, xywh_to_xyxy, xyxy_to_xywh
from direct_pretrain.data.resize import imagenet_style_plan, keep_ratio_size
from direct_pretrain.errors import SampleError


def blank(h, w, boxes=(), masks=False):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    m = None
    if masks:
        m = np.zeros((len(boxes), h, w), np.uint8)
        for k, (x1, y1, x2, y2) in enumerate(boxes.astype(int)):
            m[k, y1:y2, x1:x2] = 1
    return ImageSample(np.zeros((h, w, 3), np.float32), boxes, np.zeros(len(boxes), np.int64), m)


# ImageNet-style


def test_imagenet_alpha_one_fits_exactly(rng):
    out, plan = imagenet_style_resize(blank(480, 640), ResizeSpec("imagenet_style", base_size=448), rng, alpha=1.0)
    assert out.pixels.shape[:2] == (448, 448)
    assert plan.scale_x == pytest.approx(0.7)
    assert plan.scale_y == pytest.approx(448 / 480)
    assert plan.crop_offset == (0, 0) and plan.pad == (0, 0)


def test_imagenet_alpha_1_2_offsets_cover_range():
    spec = ResizeSpec("imagenet_style", base_size=448)
    seen = set()
    for i in range(400):
        plan = imagenet_style_plan(480, 640, spec, np.random.default_rng(i), alpha=1.2)
        assert plan.scale_x * 640 == pytest.approx(538)  # round(537.6)
        assert 0 <= plan.crop_offset[0] <= 90 and 0 <= plan.crop_offset[1] <= 90
        seen.update(plan.crop_offset)
    assert min(seen) == 0 and max(seen) == 90


def test_imagenet_small_alpha_pads_bottom_right(rng):
    s = blank(100, 100, [[0, 0, 100, 100]], masks=True)
    out, plan = imagenet_style_resize(s, ResizeSpec("imagenet_style", base_size=64), rng, alpha=0.8)
    side = 51  # round_half_up(51.2)
    assert plan.pad == (64 - side, 64 - side)
    assert out.pixels.shape[:2] == (64, 64)
    np.testing.assert_allclose(out.boxes, [[0, 0, side, side]])
    assert out.masks[0, :side, :side].all() and not out.masks[0, side:].any()


def test_imagenet_alpha_default_range():
    assert ResizeSpec().alpha_range == (0.8, 1.2)


def test_imagenet_rejects_bad_alpha(rng):
    with pytest.raises(SampleError):
        imagenet_style_resize(blank(10, 10), ResizeSpec("imagenet_style", alpha_range=(0.0, 1.0)), rng)
    with pytest.raises(SampleError):
        imagenet_style_resize(ImageSample(np.zeros((0, 5, 3), np.float32), [], []), ResizeSpec(), rng)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 300), w=st.integers(1, 300), L=st.integers(8, 96), seed=st.integers(0, 10**6))
def test_imagenet_output_always_square(h, w, L, seed):
    out, plan = imagenet_style_resize(blank(h, w), ResizeSpec("imagenet_style", base_size=L),
                                      np.random.default_rng(seed))
    assert out.pixels.shape[:2] == (L, L)
    assert plan.out_size == (L, L)


# keep-ratio family


def test_keep_ratio_examples():
    spec = ResizeSpec("keep_ratio")
    assert keep_ratio_resize(blank(480, 640), spec)[1].out_size == (800, 1067)
    plan = keep_ratio_resize(blank(800, 1333), spec)[1]
    assert plan.out_size == (800, 1333) and plan.scale_x == 1.0
    assert keep_ratio_size(1600, 2666, 1333, 800) == (800, 1333)


def test_keep_ratio_rejects_nonpositive():
    with pytest.raises(SampleError):
        keep_ratio_size(10, 10, 0, 800)


@settings(max_examples=100, deadline=None)
@given(h=st.integers(1, 2000), w=st.integers(1, 2000))
def test_keep_ratio_preserves_aspect(h, w):
    nh, nw = keep_ratio_size(h, w, 1333, 800)
    assert max(nh, nw) <= 1333 and min(nh, nw) <= 800
    assert abs(nw / nh - w / h) / (w / h) <= 1.0 / min(nh, nw) + 1e-12


def test_stitcher_examples():
    spec = ResizeSpec("stitcher_style", divide_factor=2)
    assert stitcher_style_resize(blank(480, 640), spec)[1].out_size == (400, 534)
    one = stitcher_style_resize(blank(480, 640), ResizeSpec("stitcher_style", divide_factor=1))[1]
    assert one == keep_ratio_resize(blank(480, 640), ResizeSpec("keep_ratio"))[1]
    with pytest.raises(SampleError):
        stitcher_style_resize(blank(10, 10), ResizeSpec("stitcher_style", divide_factor=0))


def test_multi_scale(rng):
    single = ResizeSpec("multi_scale_keep_ratio", short_edge_choices=(800,))
    assert multi_scale_keep_ratio_resize(blank(480, 640), single, rng)[1] == \
        keep_ratio_resize(blank(480, 640), ResizeSpec("keep_ratio"))[1]
    p = multi_scale_keep_ratio_resize(blank(480, 640), ResizeSpec("multi_scale_keep_ratio",
                                      short_edge_choices=(640,)), rng)[1]
    assert p.scale_y == pytest.approx(640 / 480)
    picks = {multi_scale_keep_ratio_resize(blank(480, 640), ResizeSpec("multi_scale_keep_ratio"),
                                           np.random.default_rng(i))[1].out_size[0] for i in range(200)}
    assert picks == {640, 672, 704, 736, 768, 800}
    with pytest.raises(SampleError):
        multi_scale_keep_ratio_resize(blank(4, 4), ResizeSpec("multi_scale_keep_ratio", short_edge_choices=()), rng)


def test_strategy_mismatch_rejected(rng):
    with pytest.raises(SampleError):
        keep_ratio_resize(blank(4, 4), ResizeSpec("imagenet_style"))
    with pytest.raises(SampleError):
        ResizeSpec("bicubic")


# box / mask geometry


def plan(sx, sy, dx=0, dy=0, out=(448, 448), inp=(100, 100)):
    return ResizePlan(sx, sy, (dx, dy), (0, 0), out, inp)


def test_transform_boxes_examples():
    b, keep = transform_boxes([[10, 10, 50, 50]], plan(2, 2, out=(200, 200)))
    np.testing.assert_allclose(b, [[20, 20, 100, 100]])
    b, keep = transform_boxes([[20, 20, 100, 100]], plan(1, 1, 30, 0))
    np.testing.assert_allclose(b, [[0, 20, 70, 100]])
    b, keep = transform_boxes([[0, 0, 20, 20], [40, 0, 60, 20]], plan(1, 1, 30, 0))
    assert keep.tolist() == [1] and len(b) == 1


def test_transform_boxes_sliver_rule():
    # clipped width 0.5 px is dropped, 1 px survives
    _, keep = transform_boxes([[0, 0, 30.5, 10], [0, 0, 31, 10]], plan(1, 1, 30, 0))
    assert keep.tolist() == [1]


def test_transform_masks_identity_and_zero(rng):
    m = (rng.random((2, 20, 30)) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(transform_masks(m, ResizePlan.identity(20, 30)), m)
    z = transform_masks(np.zeros((1, 20, 30), np.uint8), plan(1.7, 0.6, out=(12, 51), inp=(20, 30)))
    assert not z.any()


def test_invert_plan_examples():
    ident = ResizePlan.identity(10, 20)
    assert invert_plan(ident) == ident
    inv = invert_plan(plan(2, 2, out=(200, 200)))
    assert inv.scale_x == 0.5 and inv.scale_y == 0.5
    with pytest.raises(SampleError):
        invert_plan(plan(0, 1))


@pytest.mark.parametrize("strategy", ["imagenet_style", "stitcher_style", "keep_ratio", "multi_scale_keep_ratio"])
def test_plan_roundtrip_points(strategy, rng):
    spec = ResizeSpec(strategy, base_size=64, max_long=400, max_short=240, short_edge_choices=(160, 200))
    for _ in range(20):
        h, w = rng.integers(10, 300, 2)
        p = resize_sample(blank(int(h), int(w)), spec, rng)[1]
        pts = rng.uniform(0, 1, (1000, 2)) * [w, h]
        back = transform_points(transform_points(pts, p), invert_plan(p))
        assert np.abs(back - pts).max() < 1e-6


def test_box_roundtrip_without_clipping():
    p = plan(1.37, 0.81, 0, 0, out=(81, 137))
    boxes = np.array([[3.3, 4.1, 50.0, 60.2], [10, 10, 90, 95]])
    fwd, keep = transform_boxes(boxes, p)
    back, _ = transform_boxes(fwd, invert_plan(p))
    np.testing.assert_allclose(back, boxes[keep], atol=1e-6)


def test_per_sample_rng_is_deterministic():
    spec = ResizeSpec("imagenet_style", base_size=64)
    a = resize_sample(blank(50, 70), spec, sample_rng(1, 2, 3))[1]
    b = resize_sample(blank(50, 70), spec, sample_rng(1, 2, 3))[1]
    c = resize_sample(blank(50, 70), spec, sample_rng(1, 2, 4))[1]
    assert a == b and a != c


# collation


def test_collate_shapes():
    eight = [blank(448, 448) for _ in range(8)]
    batch, plans = batch_collate(eight)
    assert batch.shape == (8, 448, 448, 3) and all(p.pad == (0, 0) for p in plans)
    batch, plans = batch_collate([blank(400, 534), blank(534, 400)])
    assert batch.shape == (2, 544, 544, 3)
    assert plans[0].pad == (544 - 534, 544 - 400)


def test_collate_imagenet_stream_is_constant():
    spec = ResizeSpec("imagenet_style", base_size=32)
    r = np.random.default_rng(0)
    areas = set()
    for _ in range(100):
        samples = [resize_sample(blank(int(r.integers(10, 90)), int(r.integers(10, 90))), spec, r)[0] for _ in range(2)]
        b, _ = batch_collate(samples)
        areas.add(b.shape[1] * b.shape[2])
    assert len(areas) == 1


def test_collate_rejects_mixed_channels():
    with pytest.raises(SampleError):
        batch_collate([blank(8, 8), ImageSample(np.zeros((8, 8, 1), np.float32), [], [])])


# COCO helpers


def test_box_format_roundtrip():
    b = np.array([[1.0, 2.0, 3.0, 4.0]])
    np.testing.assert_allclose(xywh_to_xyxy(b), [[1, 2, 4, 6]])
    np.testing.assert_allclose(xyxy_to_xywh(xywh_to_xyxy(b)), b)


def test_rle_roundtrip(rng):
    m = (rng.random((13, 17)) > 0.6).astype(np.uint8)
    np.testing.assert_array_equal(rle_decode(rle_encode(m)), m)
    m[:] = 0
    m[2:5, 3:9] = 1
    np.testing.assert_array_equal(mask_to_box(m), [3, 2, 9, 5])


def test_sample_validation():
    with pytest.raises(SampleError):
        blank(10, 10, [[5, 5, 20, 8]]).validate()
    with pytest.raises(SampleError):
        blank(10, 10, [[5, 5, 5, 8]]).validate()
