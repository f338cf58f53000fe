"""Gradient verification harness: every layer kind plus the composite losses.

Checks run in double precision. Routing uses the backpropagation rule that
is active in the checked configuration: the default rule differentiates
with the final-iteration couplings held constant, so its finite-difference
probe evaluates exactly that function; the unrolled mode differentiates the
whole recurrence and is probed directly.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .capsules import capsule_lengths, dynamic_routing, margin_loss, squash
from .memo import MEMO_PARTITIONS, TRAIN_PARTITIONS, MemoConfig, MemoNetwork
from .models import CapsNetConfig, CapsuleClassifier, ConvNetConfig, ConvNetClassifier
from .nn.gradcheck import grad_check


def _labels(batch, rng):
    return [tuple(sorted(rng.choice(10, size=2, replace=False))) for _ in range(batch)]


def check_layer_gradients(coords=100, seed=0):
    """Finite-difference checks for each primitive layer kind."""
    rng = np.random.default_rng(seed)
    results = {}

    x = nn.Tensor(rng.standard_normal((2, 8, 8, 2)), requires_grad=True)
    w = nn.Tensor(rng.standard_normal((3, 3, 2, 4)) * 0.3, requires_grad=True)
    b = nn.Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    results["conv2d"] = grad_check(
        lambda: nn.tsum(nn.square(nn.conv2d(x, w, bias=b, stride=2))),
        [x, w, b],
        coords_per_param=coords // 2,
        rng=np.random.default_rng(seed),
    )

    xs = nn.Tensor(rng.standard_normal((1, 5, 5, 130)), requires_grad=True)
    ws = nn.Tensor(rng.standard_normal((3, 3, 130, 2)) * 0.1, requires_grad=True)
    results["conv2d_wide"] = grad_check(
        lambda: nn.tsum(nn.square(nn.conv2d(xs, ws, stride=1))),
        [xs, ws],
        coords_per_param=coords,
        rng=np.random.default_rng(seed),
    )

    xd = nn.Tensor(rng.standard_normal((4, 30)), requires_grad=True)
    wd = nn.Tensor(rng.standard_normal((30, 12)) * 0.3, requires_grad=True)
    bd = nn.Tensor(rng.standard_normal(12) * 0.1, requires_grad=True)
    results["fully_connected"] = grad_check(
        lambda: nn.tsum(nn.square(nn.dense(xd, wd, bd))),
        [xd, wd, bd],
        coords_per_param=coords,
        rng=np.random.default_rng(seed),
    )

    base = rng.standard_normal(150)
    base[np.abs(base) < 0.05] += 0.2  # keep clear of the activation kinks
    for name, fn in (
        ("relu", nn.relu),
        ("leaky_relu", lambda t: nn.leaky_relu(t, 0.2)),
        ("sigmoid", nn.sigmoid),
    ):
        xa = nn.Tensor(base.copy(), requires_grad=True)
        results[name] = grad_check(
            lambda xa=xa, fn=fn: nn.tsum(nn.square(fn(xa))),
            [xa],
            coords_per_param=coords,
            rng=np.random.default_rng(seed),
        )

    xdrop = nn.Tensor(rng.standard_normal(150), requires_grad=True)
    results["dropout"] = grad_check(
        lambda: nn.tsum(
            nn.square(nn.dropout(xdrop, 0.5, train=True, rng=np.random.default_rng(7)))
        ),
        [xdrop],
        coords_per_param=coords,
        rng=np.random.default_rng(seed),
    )

    logits = nn.Tensor(rng.standard_normal((10, 10)), requires_grad=True)
    target = rng.random((10, 10))
    target /= target.sum(axis=1, keepdims=True)
    results["softmax_cross_entropy"] = grad_check(
        lambda: nn.softmax_cross_entropy(logits, target),
        [logits],
        coords_per_param=coords,
        rng=np.random.default_rng(seed),
    )

    poses = nn.Tensor(rng.standard_normal((15, 8)), requires_grad=True)
    results["squash"] = grad_check(
        lambda: nn.tsum(nn.square(squash(poses))),
        [poses],
        coords_per_param=coords,
        rng=np.random.default_rng(seed),
    )

    u_hat = nn.Tensor(rng.standard_normal((1, 6, 4, 3)), requires_grad=True)
    _, state = dynamic_routing(u_hat, iterations=3)
    frozen = state.couplings
    results["routing_constant_couplings"] = grad_check(
        lambda: nn.tsum(
            nn.square(dynamic_routing(u_hat, iterations=3, frozen_couplings=frozen)[0])
        ),
        [u_hat],
        coords_per_param=coords,
        rng=np.random.default_rng(seed),
    )
    results["routing_unrolled"] = grad_check(
        lambda: nn.tsum(nn.square(dynamic_routing(u_hat, iterations=3, unroll=True)[0])),
        [u_hat],
        coords_per_param=coords,
        rng=np.random.default_rng(seed),
    )
    return results


def _sample_params(params, partitions=None):
    chosen = params.select(*partitions) if partitions else list(params)
    # weights carry the interesting structure; keep a couple of biases too
    return [p for p in chosen if not p.name.endswith("bias")] + [
        p for p in chosen if p.name.endswith("bias")
    ][:2]


def _jitter(params, rng, scale=0.08):
    """Move every parameter (biases included) to a generic random point.

    Fresh zero-bias models keep many preactivations pinned to the ReLU
    kink, where difference quotients measure nothing; a jittered point
    spreads them out so the probe sees locally linear behavior.
    """
    for p in params:
        p.tensor.data += rng.normal(0.0, scale, size=p.value.shape)


def check_convnet_loss(coords=100, seed=0, width=0.12):
    """Composite check: softmax cross-entropy through the conv baseline."""
    rng = np.random.default_rng(seed)
    model = ConvNetClassifier(ConvNetConfig.scaled(width, image_size=22), seed=seed)
    _jitter(model.params, rng)
    images = rng.random((2, 22, 22))
    labels = _labels(2, rng)

    def f():
        return model.loss(model.forward(images), labels)

    params = _sample_params(model.params)
    per_param = max(2, coords // len(params))
    return grad_check(f, params, coords_per_param=per_param, rng=np.random.default_rng(seed))


def check_capsnet_loss(coords=100, seed=0, width=0.05, mode="constant"):
    """Composite check: margin + reconstruction loss through the capsule net."""
    rng = np.random.default_rng(seed)
    config = CapsNetConfig.scaled(width, unroll_routing=(mode == "unroll"))
    model = CapsuleClassifier(config, seed=seed)
    _jitter(model.params, rng)
    images = rng.random((1, 36, 36))
    labels = _labels(1, rng)
    if mode == "constant":
        _, state = model.forward(images)
        frozen = state.couplings

        def f():
            loss, _ = model.loss(images, labels, frozen_couplings=frozen)
            return loss

    else:

        def f():
            loss, _ = model.loss(images, labels)
            return loss

    params = _sample_params(model.params)
    per_param = max(2, coords // len(params))
    return grad_check(f, params, coords_per_param=per_param, rng=np.random.default_rng(seed))


def check_memo_losses(coords=50, seed=0, width=0.05):
    """Composite checks for both memo-architecture losses.

    The training loss is probed with the routing couplings of the base
    point held constant (the active rule); the memo loss is probed with
    respect to the memo partitions, whose path contains no routing.
    """
    rng = np.random.default_rng(seed)
    config = MemoConfig.scaled(width, memo_fc_units=24)
    model = MemoNetwork(config, seed=seed)
    _jitter(model.params, rng)
    images = rng.random((1, 36, 36))
    labels = _labels(1, rng)

    _, state = model.encoder(nn.Tensor(images[..., None].astype(model.dtype)))
    frozen = state.couplings

    def train_loss():
        trace = model.forward(
            images, labels, train=True, include_memo=False, frozen_couplings=frozen
        )
        loss, _ = model.losses(trace, labels, images)
        return loss

    def memo_loss():
        trace = model.forward(images, labels, train=True, step=0, include_memo=True)
        _, loss = model.losses(trace, labels, images)
        return loss

    train_params = _sample_params(model.params, TRAIN_PARTITIONS)
    memo_params = _sample_params(model.params, MEMO_PARTITIONS)
    results = {
        "memo_train_loss": grad_check(
            train_loss,
            train_params,
            coords_per_param=max(2, coords // len(train_params)),
            rng=np.random.default_rng(seed),
        ),
        "memo_loss": grad_check(
            memo_loss,
            memo_params,
            coords_per_param=max(2, coords // len(memo_params)),
            rng=np.random.default_rng(seed),
        ),
    }
    return results


def run_all_checks(coords=100, seed=0):
    """Every gradient check; returns {name: GradCheckResult}."""
    results = dict(check_layer_gradients(coords=coords, seed=seed))
    results["convnet_loss"] = check_convnet_loss(coords=coords, seed=seed)
    results["capsnet_loss"] = check_capsnet_loss(coords=coords, seed=seed)
    results["capsnet_loss_unrolled"] = check_capsnet_loss(
        coords=coords // 2, seed=seed, mode="unroll"
    )
    results.update(check_memo_losses(coords=max(50, coords // 2), seed=seed))
    return results
