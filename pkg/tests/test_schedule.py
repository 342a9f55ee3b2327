import math

import pytest

from direct_pretrain.errors import ConfigError
from direct_pretrain.schedule import LrPolicy, epochs_to_iters, get_preset, lr_at, lr_curve, scaled_lr

BASE = LrPolicy(base_lr=0.02, base_batch=2)


def test_linear_scaling_examples():
    assert scaled_lr(BASE, 8) == 0.08
    assert scaled_lr(BASE, 2) == 0.02
    assert scaled_lr(BASE, 16) == 0.16
    for b in (1, 3, 7, 64):
        assert scaled_lr(BASE, 2 * b) == 2 * scaled_lr(BASE, b)


def test_epochs_to_iters_examples():
    assert epochs_to_iters(118287, 16, 12) == 88716
    assert epochs_to_iters(100, 10, 1) == 10
    assert epochs_to_iters(5, 10, 3) == 3


def test_presets():
    assert [get_preset(p).epochs for p in ("P1x", "P2x", "P3x", "P4x", "1x", "2x")] == [12, 24, 36, 48, 12, 24]
    assert get_preset("1x").milestones == (8, 11)
    assert get_preset("2x").milestones == (16, 22)
    assert get_preset("P3x").milestones == ()
    # shortened fine-tune keeps proportional milestones (floor)
    assert get_preset("1x", epochs=6).milestones == (4, 5)
    with pytest.raises(ConfigError):
        get_preset("3x")


def test_lr_at_endpoints():
    p = LrPolicy(0.02, 2, warmup_iters=500, warmup_start_fraction=1 / 3)
    assert lr_at(p, get_preset("P3x"), 0, 100, batch=8) == pytest.approx(0.08 / 3, rel=1e-15)
    assert lr_at(p, get_preset("P3x"), 3000, 100, batch=8) == 0.08
    assert lr_at(p, get_preset("1x"), 9 * 100 + 5, 100, batch=8) == pytest.approx(0.008, rel=1e-15)
    # warmup continuity
    assert lr_at(p, get_preset("P1x"), 500, 100, batch=8) == pytest.approx(lr_at(p, get_preset("P1x"), 499, 100, batch=8)
                                                                           + 0.08 * (2 / 3) / 500, rel=1e-12)


def test_lr_curve_shape():
    p = LrPolicy(0.01, 2, warmup_iters=10)
    ft = lr_curve(p, get_preset("1x"), 20, batch=4)
    post = ft[10:]
    assert all(b <= a for a, b in zip(post, post[1:]))
    pre = lr_curve(p, get_preset("P1x"), 20, batch=4)[10:]
    assert len(set(pre)) == 1


def test_policy_validation():
    with pytest.raises(ConfigError):
        LrPolicy(decay_milestones=(8, 8))
    with pytest.raises(ConfigError):
        LrPolicy(base_lr=0)
    with pytest.raises(ValueError):
        scaled_lr(BASE, 0)
    assert math.isclose(BASE.for_batch(8).scale_k, 4)
