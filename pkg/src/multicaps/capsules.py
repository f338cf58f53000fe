"""Capsule primitives: squash, routing by agreement, margin loss, layers.

A capsule layer's activity is carried as an array of pose vectors with
shape ``(num_capsules, pose_dim)`` — batched as ``(B, num_capsules,
pose_dim)`` — whose per-capsule Euclidean norm encodes presence
probability. After ``squash`` every norm lies in [0, 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError
from .nn.tensor import Tensor, as_tensor


@dataclass(frozen=True)
class MarginLossParams:
    """Hinge margins for present/absent classes and the absent down-weight."""

    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.m_minus < self.m_plus < 1.0):
            raise ConfigurationError(
                f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}"
            )
        if self.lam <= 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")


@dataclass
class RoutingState:
    """Final routing logits/couplings; ``couplings`` produced the returned poses.

    ``logits`` is the pre-softmax agreement matrix whose softmax over the
    output axis equals ``couplings``. When ``record_history`` was set, holds
    the couplings of every iteration for inspection.
    """

    logits: np.ndarray
    couplings: np.ndarray
    iterations: int
    coupling_history: list | None = None


def _squash_forward(s):
    """Return (squashed, norm, scale) for pose vectors along the last axis."""
    norm_sq = (s * s).sum(axis=-1, keepdims=True)
    norm = np.sqrt(norm_sq)
    scale = norm / (1.0 + norm_sq)  # == (n^2/(1+n^2)) / n, zero at n = 0
    return s * scale, norm, scale


def squash(poses):
    """Shrink pose vectors: |v| = |s|^2/(1+|s|^2), direction preserved.

    The zero vector maps exactly to the zero vector (no division occurs).
    """
    poses = as_tensor(poses)
    s = poses.data
    out, norm, scale = _squash_forward(s)

    def vjp(g):
        # dv/ds = scale*I + (scale'(n)/n) s s^T with scale'(n) = (1-n^2)/(1+n^2)^2
        n_safe = np.where(norm > 0, norm, 1.0)
        norm_sq = norm * norm
        dscale_over_n = (1.0 - norm_sq) / ((1.0 + norm_sq) ** 2 * n_safe)
        dscale_over_n = np.where(norm > 0, dscale_over_n, 0.0)
        dot = (g * s).sum(axis=-1, keepdims=True)
        return scale * g + dscale_over_n * dot * s

    return Tensor(out, parents=((poses, vjp),))


def capsule_lengths(poses):
    """Per-capsule Euclidean norm along the last axis (zero-safe gradient)."""
    poses = as_tensor(poses)
    s = poses.data
    norm = np.sqrt((s * s).sum(axis=-1))

    def vjp(g):
        n_safe = np.where(norm > 0, norm, 1.0)
        return (g / n_safe)[..., None] * s

    return Tensor(norm, parents=((poses, vjp),))


def presence_mask(present_classes, num_classes=10, batch=None, dtype=np.float64):
    """One/zero mask T with T[k] = 1 iff class k is present.

    ``present_classes`` is an iterable of class indices for a single
    example, or a sequence of such iterables when ``batch`` is given.
    """
    if batch is None:
        mask = np.zeros(num_classes, dtype=dtype)
        mask[list(present_classes)] = 1.0
        return mask
    mask = np.zeros((batch, num_classes), dtype=dtype)
    for row, classes in zip(mask, present_classes):
        row[list(classes)] = 1.0
    return mask


def margin_loss(lengths, present_classes, params=MarginLossParams()):
    """Sum over classes of the two-sided hinge on capsule lengths.

    Present classes pay ``max(0, m_plus - |v_k|)^2``; absent classes pay
    ``lam * max(0, |v_k| - m_minus)^2``. Batched input returns the mean
    over examples of the per-example class sum.
    """
    lengths = as_tensor(lengths)
    batched = lengths.ndim == 2
    num_classes = lengths.shape[-1]
    t_mask = presence_mask(
        present_classes,
        num_classes,
        batch=lengths.shape[0] if batched else None,
        dtype=lengths.dtype,
    )
    present = nn.square(nn.relu(nn.sub(params.m_plus, lengths)))
    absent = nn.square(nn.relu(nn.sub(lengths, params.m_minus)))
    per_class = nn.add(nn.mul(t_mask, present), nn.mul(params.lam * (1.0 - t_mask), absent))
    total = nn.tsum(per_class)
    if batched:
        total = nn.mul(total, 1.0 / lengths.shape[0])
    return total


def _route_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dynamic_routing(
    predictions, iterations=3, unroll=False, record_history=False, frozen_couplings=None
):
    """Route prediction vectors to output capsules by iterative agreement.

    ``predictions`` has shape ``(num_in, num_out, pose_dim)`` or batched
    ``(B, num_in, num_out, pose_dim)``. Each iteration computes couplings
    ``c = softmax(b)`` over output capsules, the candidate outputs
    ``v_j = squash(sum_i c_ij * u_hat_ij)``, and the agreement update
    ``b_ij += u_hat_ij . v_j``.

    By default the couplings of the final iteration are treated as
    constants when backpropagating; ``unroll=True`` differentiates through
    the whole recurrence instead. ``frozen_couplings`` skips the recurrence
    and routes with the given constant couplings — finite-difference
    verification of the default mode must evaluate exactly that function.
    """
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least 1 iteration, got {iterations}")
    predictions = as_tensor(predictions)
    single = predictions.ndim == 3
    if unroll:
        if frozen_couplings is not None:
            raise ConfigurationError("frozen_couplings only applies to the default mode")
        return _routing_unrolled(predictions, iterations, single, record_history)

    u_hat = predictions.data[None] if single else predictions.data
    history = [] if record_history else None
    if frozen_couplings is not None:
        couplings = frozen_couplings[None] if single else frozen_couplings
        logits_used = np.log(np.maximum(couplings, 1e-300))
        s = np.einsum("bij,bijd->bjd", couplings, u_hat, optimize=True)
    else:
        b = np.zeros(u_hat.shape[:3], dtype=u_hat.dtype)
        couplings = None
        s = None
        for _ in range(iterations):
            couplings = _route_softmax(b)
            if record_history:
                history.append(couplings.copy())
            s = np.einsum("bij,bijd->bjd", couplings, u_hat, optimize=True)
            v, _, _ = _squash_forward(s)
            logits_used = b
            b = b + np.einsum("bijd,bjd->bij", u_hat, v, optimize=True)

    out, norm, scale = _squash_forward(s)
    c_final = couplings

    def vjp(g):
        g = g[None] if single else g
        n_safe = np.where(norm > 0, norm, 1.0)
        norm_sq = norm * norm
        dscale_over_n = np.where(
            norm > 0, (1.0 - norm_sq) / ((1.0 + norm_sq) ** 2 * n_safe), 0.0
        )
        gs = scale * g + dscale_over_n * (g * s).sum(axis=-1, keepdims=True) * s
        gu = c_final[..., None] * gs[:, None, :, :]
        return gu[0] if single else gu

    squeeze = (lambda a: a[0]) if single else (lambda a: a)
    state = RoutingState(
        logits=squeeze(logits_used),
        couplings=squeeze(c_final),
        iterations=iterations,
        coupling_history=[squeeze(c) for c in history] if record_history else None,
    )
    return Tensor(squeeze(out), parents=((predictions, vjp),)), state


def _route_sum(couplings, u_hat):
    """s[b,j,d] = sum_i c[b,i,j] * u_hat[b,i,j,d] as a differentiable op."""
    c, u = as_tensor(couplings), as_tensor(u_hat)
    out = np.einsum("bij,bijd->bjd", c.data, u.data, optimize=True)
    return Tensor(
        out,
        parents=(
            (c, lambda g: np.einsum("bjd,bijd->bij", g, u.data, optimize=True)),
            (u, lambda g: c.data[..., None] * g[:, None, :, :]),
        ),
    )


def _agreement(u_hat, v):
    """a[b,i,j] = sum_d u_hat[b,i,j,d] * v[b,j,d] as a differentiable op."""
    u, vt = as_tensor(u_hat), as_tensor(v)
    out = np.einsum("bijd,bjd->bij", u.data, vt.data, optimize=True)
    return Tensor(
        out,
        parents=(
            (u, lambda g: g[..., None] * vt.data[:, None, :, :]),
            (vt, lambda g: np.einsum("bij,bijd->bjd", g, u.data, optimize=True)),
        ),
    )


def _routing_unrolled(predictions, iterations, single, record_history):
    u_hat = nn.reshape(predictions, (1,) + predictions.shape) if single else predictions
    b = Tensor(np.zeros(u_hat.shape[:3], dtype=u_hat.dtype))
    history = [] if record_history else None
    v = None
    couplings = None
    logits_used = None
    for _ in range(iterations):
        couplings = nn.softmax(b, axis=-1)
        if record_history:
            history.append(couplings.data.copy())
        s = _route_sum(couplings, u_hat)
        v = squash(s)
        logits_used = b
        b = nn.add(b, _agreement(u_hat, v))

    squeeze = (lambda a: a[0]) if single else (lambda a: a)
    state = RoutingState(
        logits=squeeze(logits_used.data),
        couplings=squeeze(couplings.data),
        iterations=iterations,
        coupling_history=[squeeze(c) for c in history] if record_history else None,
    )
    out = nn.reshape(v, v.shape[1:]) if single else v
    return out, state


def primary_capsules(features, pose_dim=8):
    """Group feature-map channels into pose vectors and squash each one.

    ``features``: (B, h, w, C) or (h, w, C) with C divisible by
    ``pose_dim``; consecutive groups of ``pose_dim`` channels at each
    spatial position form one capsule.
    """
    features = as_tensor(features)
    channels = features.shape[-1]
    if channels % pose_dim != 0:
        raise ConfigurationError(
            f"{channels} channels do not divide into {pose_dim}-dim capsules"
        )
    if features.ndim == 3:
        poses = nn.reshape(features, (-1, pose_dim))
    else:
        poses = nn.reshape(features, (features.shape[0], -1, pose_dim))
    return squash(poses)


def capsule_transform(primary, transforms):
    """Per-capsule linear predictions u_hat[i,j] = W[i,j] @ u[i].

    ``primary``: (B, I, p); ``transforms``: (I, J, p, d). Returns
    (B, I, J, d).
    """
    primary, w = as_tensor(primary), as_tensor(transforms)
    single = primary.ndim == 2
    u = primary.data[None] if single else primary.data
    batch, num_in, p = u.shape
    if w.ndim != 4 or w.shape[0] != num_in or w.shape[2] != p:
        raise ConfigurationError(
            f"transforms {w.shape} incompatible with primary poses {primary.shape}"
        )
    num_out, d = w.shape[1], w.shape[3]
    # batched matmul over the input-capsule axis
    u2 = np.ascontiguousarray(u.transpose(1, 0, 2))  # (I, B, p)
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 1, 3).reshape(num_in, p, num_out * d))
    out = np.matmul(u2, w2)  # (I, B, J*d)
    out = out.transpose(1, 0, 2).reshape(batch, num_in, num_out, d)

    def u_vjp(g):
        g2 = np.ascontiguousarray(
            g.reshape(batch, num_in, num_out * d).transpose(1, 0, 2)
        )
        gu = np.matmul(g2, w2.transpose(0, 2, 1)).transpose(1, 0, 2)
        return gu[0] if single else gu

    def w_vjp(g):
        g2 = np.ascontiguousarray(
            g.reshape(batch, num_in, num_out * d).transpose(1, 0, 2)
        )
        gw2 = np.matmul(u2.transpose(0, 2, 1), g2)  # (I, p, J*d)
        return gw2.reshape(num_in, p, num_out, d).transpose(0, 2, 1, 3)

    return Tensor(out[0] if single else out, parents=((primary, u_vjp), (w, w_vjp)))


def digit_capsules(
    primary,
    transforms,
    iterations=3,
    unroll=False,
    record_history=False,
    frozen_couplings=None,
):
    """Transform primary poses into per-class predictions, then route."""
    u_hat = capsule_transform(primary, transforms)
    return dynamic_routing(
        u_hat,
        iterations=iterations,
        unroll=unroll,
        record_history=record_history,
        frozen_couplings=frozen_couplings,
    )


def predict_top2(lengths):
    """Indices of the two largest lengths, ties broken by lower class index.

    Returns an ascending pair; batched input (B, C) returns an int array
    (B, 2) of ascending pairs.
    """
    data = lengths.data if isinstance(lengths, Tensor) else np.asarray(lengths)
    if data.ndim == 1:
        order = np.argsort(-data, kind="stable")
        return tuple(sorted(int(i) for i in order[:2]))
    order = np.argsort(-data, axis=-1, kind="stable")[:, :2]
    return np.sort(order, axis=-1)
