import numpy as np
import pytest
import torch
from torch import nn

from direct_pretrain.bn import (
    BnState,
    ModeBatchNorm2d,
    bn_forward_eval,
    bn_forward_train,
    bn_parameter_names,
    set_bn_mode,
    sync_reduce_stats,
    trainable_parameters,
)
from direct_pretrain.errors import BnError
from oracles import scalar_bn


def tiny_net(mode="train"):
    torch.manual_seed(0)
    net = nn.Sequential(
        nn.Conv2d(3, 4, 3, padding=1), ModeBatchNorm2d(4), nn.ReLU(),
        nn.Conv2d(4, 4, 3, padding=1), ModeBatchNorm2d(4), nn.ReLU(),
        nn.Conv2d(4, 2, 1), ModeBatchNorm2d(2),
    )
    return set_bn_mode(net, mode)


def test_train_forward_matches_scalar_oracle(rng):
    x = rng.normal(2.0, 3.0, (6, 3, 4, 5))
    st = BnState.create(3)
    st.gamma = rng.uniform(0.5, 2, 3)
    st.beta = rng.normal(size=3)
    y, new = bn_forward_train(x, st)
    for c in range(3):
        vals = x[:, c].ravel().tolist()
        ref, mean, var = scalar_bn(vals, st.gamma[c], st.beta[c], st.eps)
        np.testing.assert_allclose(y[:, c].ravel(), ref, atol=1e-7)
        n = len(vals)
        assert new.running_mean[c] == pytest.approx(0.9 * 0 + 0.1 * mean, abs=1e-12)
        assert new.running_var[c] == pytest.approx(0.9 * 1 + 0.1 * var * n / (n - 1), abs=1e-12)


def test_eval_uses_running_stats(rng):
    st = BnState(np.array([1.0]), np.array([4.0]), np.array([2.0]), np.array([0.5]))
    y = bn_forward_eval(np.array([3.0, 1.0]), st)
    np.testing.assert_allclose(y, [(2 / np.sqrt(4 + 1e-5)) * 2 + 0.5, 0.5])


@pytest.mark.parametrize("mode", ["affine", "fixed"])
def test_frozen_stat_modes_leave_state(mode, rng):
    st = BnState.create(2, mode=mode)
    st.running_mean = np.array([0.3, -0.2])
    x = rng.normal(size=(5, 2))
    y, new = bn_forward_train(x, st)
    assert new is st
    np.testing.assert_allclose(y, bn_forward_eval(x, st))


@pytest.mark.parametrize("k", [2, 4, 8])
def test_sync_equals_single_batch(k, rng):
    x = rng.normal(5.0, 2.0, (8 * k, 3, 3, 3))
    workers = np.split(x, k)
    mean, var = sync_reduce_stats(workers)
    np.testing.assert_allclose(mean, x.transpose(1, 0, 2, 3).reshape(3, -1).mean(1), rtol=1e-5)
    np.testing.assert_allclose(var, x.transpose(1, 0, 2, 3).reshape(3, -1).var(1), rtol=1e-5)
    st = BnState.create(3, mode="sync")
    ys, s_sync = bn_forward_train(workers, st)
    y, s_one = bn_forward_train(x, BnState.create(3))
    np.testing.assert_allclose(np.concatenate(ys), y, rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(s_sync.running_var, s_one.running_var, rtol=1e-5)


def test_sync_is_order_independent(rng):
    workers = [rng.normal(1e4, 1.0, (7, 2)) for _ in range(5)]
    a = sync_reduce_stats(workers)
    b = sync_reduce_stats(workers[::-1][:4] + [workers[0]])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-9)


def test_single_value_batch_rejected():
    with pytest.raises(BnError, match="batch of 1"):
        bn_forward_train(np.ones((1, 3)), BnState.create(3))
    with pytest.raises(BnError):
        BnState.create(2, mode="frozen")


def test_torch_layer_matches_functional_batch_norm():
    torch.manual_seed(1)
    layer = ModeBatchNorm2d(3)
    ref = nn.BatchNorm2d(3)
    x = torch.randn(4, 3, 5, 5)
    np.testing.assert_allclose(layer(x).detach(), ref(x).detach(), atol=1e-5)
    np.testing.assert_allclose(layer.running_var, ref.running_var, atol=1e-6)


def test_torch_sync_layer_uses_whole_batch_stats():
    torch.manual_seed(2)
    x = torch.randn(8, 3, 4, 4)
    sync = ModeBatchNorm2d(3, bn_mode="sync", num_workers=4)
    whole = ModeBatchNorm2d(3)
    np.testing.assert_allclose(sync(x).detach(), whole(x).detach(), atol=1e-5)
    split = ModeBatchNorm2d(3, num_workers=4)
    assert not torch.allclose(split(x), whole(x), atol=1e-3)


def _bn_snapshot(net):
    return {k: v.clone() for k, v in net.state_dict().items() if k.split(".")[0] in ("1", "4", "7")}


def _train(net, steps=100):
    opt = torch.optim.SGD(trainable_parameters(net).values(), lr=0.05, momentum=0.9)
    g = torch.Generator().manual_seed(0)
    net.train()
    for _ in range(steps):
        x = torch.randn(4, 3, 6, 6, generator=g)
        loss = (net(x) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()


def test_fixed_mode_bit_identical_after_training():
    net = tiny_net("fixed")
    before = _bn_snapshot(net)
    _train(net)
    after = _bn_snapshot(net)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_affine_mode_changes_only_gamma_beta():
    net = tiny_net("affine")
    before = _bn_snapshot(net)
    _train(net, 20)
    after = _bn_snapshot(net)
    for k in before:
        changed = not torch.equal(before[k], after[k])
        assert changed == k.endswith(("weight", "bias")), k


def test_trainable_parameter_sets():
    net = tiny_net("fixed")
    bn = bn_parameter_names(net)
    assert len(bn) == 6  # hand count: 3 BN layers x (gamma, beta)
    assert not bn & set(trainable_parameters(net))
    set_bn_mode(net, "train")
    assert bn <= set(trainable_parameters(net))
    assert len(trainable_parameters(net)) == 6 + 6  # 3 convs x (weight, bias)
