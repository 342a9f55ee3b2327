"""Batch normalisation with the four fine-tuning modes.

``train``  batch statistics, running stats updated, gamma/beta learnable
``sync``   like ``train`` but statistics are reduced across simulated workers
``affine`` stored statistics, gamma/beta learnable
``fixed``  stored statistics, gamma/beta frozen

The numpy functions operate on :class:`BnState` and are the reference
implementation; :class:`ModeBatchNorm2d` is the torch layer the detector uses.
"""
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import BnError

MODES = ("train", "affine", "fixed", "sync")


def check_mode(mode):
    if mode not in MODES:
        raise BnError(f"unknown bn_mode {mode!r}; allowed: {', '.join(MODES)}")
    return mode


@dataclass
class BnState:
    running_mean: Optional[np.ndarray]
    running_var: Optional[np.ndarray]
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        check_mode(self.mode)
        if self.eps <= 0:
            raise BnError(f"eps must be positive, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise BnError(f"momentum must be in (0, 1], got {self.momentum}")
        if self.running_var is not None and np.any(self.running_var < 0):
            raise BnError("running_var must be non-negative")

    @classmethod
    def create(cls, num_channels, **kw):
        return cls(
            running_mean=np.zeros(num_channels),
            running_var=np.ones(num_channels),
            gamma=np.ones(num_channels),
            beta=np.zeros(num_channels),
            **kw,
        )

    def copy(self):
        def c(a):
            return None if a is None else np.array(a, copy=True)

        return replace(self, running_mean=c(self.running_mean), running_var=c(self.running_var),
                       gamma=c(self.gamma), beta=c(self.beta))


def _to_rows(x):
    """View ``x`` as ``(values, C)``; channel axis is 1 (or the only axis)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], lambda r: r[:, 0]
    if x.ndim == 2:
        return x, lambda r: r
    moved = np.moveaxis(x, 1, -1)
    shape = moved.shape

    def back(r):
        return np.moveaxis(r.reshape(shape), -1, 1)

    return moved.reshape(-1, shape[-1]), back


def _normalize(rows, mean, var, state):
    return (rows - mean) / np.sqrt(var + state.eps) * state.gamma + state.beta


def _update_running(state, mean, biased_var, count):
    unbiased = biased_var * count / (count - 1)
    m = state.momentum
    return replace(
        state,
        running_mean=(1 - m) * state.running_mean + m * mean,
        running_var=(1 - m) * state.running_var + m * unbiased,
    )


def sync_reduce_stats(worker_batches):
    """Global mean and biased variance of the concatenation of worker batches.

    Workers contribute shifted partial sums ``(n, sum, sum_sq)``; the
    cross-worker reduction uses exactly rounded summation, so the result does
    not depend on worker order.
    """
    rows = [_to_rows(w)[0] for w in worker_batches]
    rows = [r for r in rows if r.shape[0] > 0]
    if not rows:
        raise BnError("sync_reduce_stats needs at least one non-empty worker batch")
    shift = rows[0][0]
    counts, s1, s2 = [], [], []
    for r in rows:
        d = r - shift
        counts.append(r.shape[0])
        s1.append(d.sum(axis=0))
        s2.append((d * d).sum(axis=0))
    n = sum(counts)
    s1 = np.array([math.fsum(col) for col in np.stack(s1, axis=1)])
    s2 = np.array([math.fsum(col) for col in np.stack(s2, axis=1)])
    mean_d = s1 / n
    var = np.maximum(s2 / n - mean_d * mean_d, 0.0)
    return shift + mean_d, var


def bn_forward_eval(x, state: BnState):
    """Normalise with the stored running statistics; ``state`` is untouched."""
    if state.running_mean is None or state.running_var is None:
        raise BnError("running statistics are not initialised")
    rows, back = _to_rows(x)
    return back(_normalize(rows, state.running_mean, state.running_var, state))


def bn_forward_train(x, state: BnState):
    """Training-time forward. Returns ``(y, new_state)``.

    In ``sync`` mode ``x`` is a list of per-worker arrays and ``y`` a list of
    matching outputs. ``affine``/``fixed`` modes normalise with stored
    statistics and return ``state`` unchanged.
    """
    if state.mode in ("affine", "fixed"):
        if isinstance(x, (list, tuple)):
            return [bn_forward_eval(w, state) for w in x], state
        return bn_forward_eval(x, state), state
    if state.mode == "sync":
        workers = list(x) if isinstance(x, (list, tuple)) else [x]
        mean, var = sync_reduce_stats(workers)
        count = sum(_to_rows(w)[0].shape[0] for w in workers)
        if count < 2:
            raise BnError("batch normalisation in sync mode needs >= 2 values per channel")
        outs = []
        for w in workers:
            rows, back = _to_rows(w)
            outs.append(back(_normalize(rows, mean, var, state)))
        new_state = _update_running(state, mean, var, count) if state.running_mean is not None else state
        return (outs if isinstance(x, (list, tuple)) else outs[0]), new_state
    rows, back = _to_rows(x)
    count = rows.shape[0]
    if count < 2:
        raise BnError(
            "batch normalisation in train mode needs >= 2 values per channel; "
            "a batch of 1 usually means the pre-training batch is misconfigured"
        )
    mean = rows.mean(axis=0)
    var = rows.var(axis=0)
    y = back(_normalize(rows, mean, var, state))
    new_state = _update_running(state, mean, var, count) if state.running_mean is not None else state
    return y, new_state


# --------------------------------------------------------------------------
# torch layer


class ModeBatchNorm2d(nn.BatchNorm2d):
    """``BatchNorm2d`` whose training behaviour follows ``bn_mode``.

    ``num_workers`` splits the batch into that many simulated devices: in
    ``train`` mode each chunk is normalised with its own statistics (the
    running stats follow worker 0), in ``sync`` mode statistics are summed
    across chunks before normalising.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1, bn_mode="train", num_workers=1):
        super().__init__(num_features, eps=eps, momentum=momentum)
        self.bn_mode = check_mode(bn_mode)
        self.num_workers = num_workers

    def extra_repr(self):
        return super().extra_repr() + f", bn_mode={self.bn_mode}, num_workers={self.num_workers}"

    def _affine(self, x, mean, var):
        shape = (1, -1, 1, 1)
        inv = torch.rsqrt(var + self.eps)
        return (x - mean.view(shape)) * inv.view(shape) * self.weight.view(shape) + self.bias.view(shape)

    def _update(self, mean, var, count):
        with torch.no_grad():
            unbiased = var * count / (count - 1)
            self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
            self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
            self.num_batches_tracked.add_(1)

    def forward(self, x):
        if not self.training or self.bn_mode in ("affine", "fixed"):
            return self._affine(x, self.running_mean, self.running_var)
        chunks = torch.chunk(x, max(1, min(self.num_workers, x.shape[0])), dim=0)
        per_channel = [c.shape[0] * c.shape[2] * c.shape[3] for c in chunks]
        if self.bn_mode == "sync":
            count = sum(per_channel)
            if count < 2:
                raise BnError("sync batch normalisation needs >= 2 values per channel")
            s1 = sum(c.sum(dim=(0, 2, 3)) for c in chunks)
            s2 = sum((c * c).sum(dim=(0, 2, 3)) for c in chunks)
            mean = s1 / count
            var = (s2 / count - mean * mean).clamp_min(0)
            self._update(mean.detach(), var.detach(), count)
            return self._affine(x, mean, var)
        if min(per_channel) < 2:
            raise BnError(
                "batch normalisation in train mode needs >= 2 values per channel; "
                "a batch of 1 usually means the pre-training batch is misconfigured"
            )
        outs = []
        for i, c in enumerate(chunks):
            mean = c.mean(dim=(0, 2, 3))
            var = c.var(dim=(0, 2, 3), unbiased=False)
            if i == 0:
                self._update(mean.detach(), var.detach(), per_channel[0])
            outs.append(self._affine(c, mean, var))
        return torch.cat(outs, dim=0) if len(outs) > 1 else outs[0]

    def state(self):
        """Snapshot as a numpy :class:`BnState`."""
        return BnState(
            running_mean=self.running_mean.detach().double().numpy().copy(),
            running_var=self.running_var.detach().double().numpy().copy(),
            gamma=self.weight.detach().double().numpy().copy(),
            beta=self.bias.detach().double().numpy().copy(),
            eps=self.eps,
            momentum=self.momentum,
            mode=self.bn_mode,
        )


def bn_layers(model):
    return [(name, m) for name, m in model.named_modules() if isinstance(m, ModeBatchNorm2d)]


def set_bn_mode(model, mode, num_workers=None):
    """Put every BN layer of ``model`` in ``mode``; ``fixed`` freezes gamma/beta."""
    check_mode(mode)
    for _, layer in bn_layers(model):
        layer.bn_mode = mode
        if num_workers is not None:
            layer.num_workers = int(num_workers)
        trainable = mode != "fixed"
        layer.weight.requires_grad_(trainable)
        layer.bias.requires_grad_(trainable)
    return model


def trainable_parameters(model):
    """Named parameters the optimiser may update under the current modes."""
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def bn_parameter_names(model):
    names = set()
    for prefix, _ in bn_layers(model):
        names.add(f"{prefix}.weight")
        names.add(f"{prefix}.bias")
    return names
