"""The numba and numpy backends must agree."""
import numpy as np
import pytest

from direct_pretrain import kernels


@pytest.mark.parametrize("seed", range(5))
def test_bilinear_parity(seed):
    r = np.random.default_rng(seed)
    img = r.random((r.integers(5, 40), r.integers(5, 40), 3)).astype(np.float32)
    sx, sy = r.uniform(0.3, 3.0, 2)
    dx, dy = r.uniform(0, 4, 2)
    args = (img, sx, sy, dx, dy, 33, 29, int(r.integers(10, 33)), int(r.integers(10, 29)))
    np.testing.assert_allclose(kernels._bilinear_nb(*args), kernels._bilinear_np(*args), atol=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_nearest_parity(seed):
    r = np.random.default_rng(seed)
    m = (r.random((3, r.integers(5, 40), r.integers(5, 40))) > 0.5).astype(np.uint8)
    sx, sy = r.uniform(0.3, 3.0, 2)
    dx, dy = r.integers(0, 4, 2)
    args = (m, sx, sy, float(dx), float(dy), 31, 27, 31, 20)
    np.testing.assert_array_equal(kernels._nearest_nb(*args), kernels._nearest_np(*args))


def test_box_iou_parity_and_values(rng):
    a = np.sort(rng.uniform(0, 50, (7, 4)).reshape(7, 2, 2), axis=1).transpose(0, 2, 1).reshape(7, 4)
    b = np.sort(rng.uniform(0, 50, (5, 4)).reshape(5, 2, 2), axis=1).transpose(0, 2, 1).reshape(5, 4)
    np.testing.assert_allclose(kernels._box_iou_nb(a, b), kernels._box_iou_np(a, b), atol=1e-12)
    iou = kernels.box_iou(np.array([[0, 0, 10, 10.0]]), np.array([[5, 0, 15, 10.0], [0, 0, 10, 10.0]]))
    np.testing.assert_allclose(iou, [[1 / 3, 1.0]])


def test_greedy_match_parity(rng):
    thr = np.array([0.5, 0.75])
    for _ in range(20):
        ious = rng.random((rng.integers(0, 8), rng.integers(1, 6)))
        ign = rng.random(ious.shape[1]) < 0.3
        ign = np.sort(ign)  # callers put ignored ground truth last
        g1, i1 = kernels._greedy_match_nb(ious, ign, thr)
        g2, i2 = kernels._greedy_match_np(ious, ign, thr)
        np.testing.assert_array_equal(g1, g2)
        np.testing.assert_array_equal(i1, i2)


def test_mask_iou():
    a = np.zeros((1, 4, 4), np.uint8)
    a[0, :2] = 1
    b = np.zeros((2, 4, 4), np.uint8)
    b[0, :, :2] = 1
    b[1] = a[0]
    np.testing.assert_allclose(kernels.mask_iou(a, b), [[2 / 6, 1.0]])
