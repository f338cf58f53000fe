"""Differentiable layers: convolution, fully-connected, activations, losses.

Layout conventions: images are channels-last, ``(batch, H, W, C)`` or
``(H, W, C)`` for a single example; convolution kernels are
``(K, K, C_in, C_out)``. Convolutions are cross-correlations (no kernel
flip) with valid padding only, so the output spatial size is
``floor((in - K) / stride) + 1``.
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor, as_tensor

# Patch rows longer than this make the materialized-column matrix the
# bottleneck; fall back to per-offset shifted matmuls instead.
_IM2COL_MAX_PATCH = 1024


def conv_output_size(size, kernel, stride):
    out = (size - kernel) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"kernel {kernel} with stride {stride} does not fit input size {size}"
        )
    return out


def conv2d(x, kernels, bias=None, stride=1):
    """Cross-correlate ``x`` with ``kernels`` and add a per-filter bias.

    ``x``: (B, H, W, Cin) or (H, W, Cin); ``kernels``: (K, K, Cin, Cout);
    ``bias``: (Cout,) or None. Returns (B, Ho, Wo, Cout), squeezed back to
    3-d for single-example input.
    """
    x, w = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects image (H,W,C) or (B,H,W,C) and kernels (K,K,Cin,Cout); "
            f"got {x.shape} and {w.shape}"
        )
    batch, h, wd, c_in = xd.shape
    kh, kw, kc_in, c_out = w.shape
    if kh != kw:
        raise ConfigurationError(f"only square kernels supported, got {kh}x{kw}")
    if kc_in != c_in:
        raise ConfigurationError(
            f"input has {c_in} channels but kernel depth is {kc_in}"
        )
    if kh > h or kw > wd:
        raise ConfigurationError(
            f"kernel {kh}x{kw} larger than input {h}x{wd}"
        )
    k = kh
    ho = conv_output_size(h, k, stride)
    wo = conv_output_size(wd, k, stride)

    if k * k * c_in <= _IM2COL_MAX_PATCH:
        out, parents = _conv_im2col(x, w, xd, k, stride, ho, wo)
    else:
        out, parents = _conv_shifted(x, w, xd, k, stride, ho, wo)

    if bias is not None:
        b = as_tensor(bias)
        out = out + b.data

        def bias_vjp(g):
            return g.reshape(-1, c_out).sum(axis=0)

        parents = parents + ((b, bias_vjp),)

    if single:
        result = Tensor(out[0], parents=parents)
    else:
        result = Tensor(out, parents=parents)
    return result


def _conv_im2col(x, w, xd, k, stride, ho, wo):
    batch, h, wd, c_in = xd.shape
    c_out = w.shape[3]
    sb, sh, sw, sc = xd.strides
    view = np.lib.stride_tricks.as_strided(
        xd,
        shape=(batch, ho, wo, k, k, c_in),
        strides=(sb, stride * sh, stride * sw, sh, sw, sc),
        writeable=False,
    )
    cols = view.reshape(batch * ho * wo, k * k * c_in)  # copies
    wmat = w.data.reshape(k * k * c_in, c_out)
    out = (cols @ wmat).reshape(batch, ho, wo, c_out)

    def x_vjp(g):
        gcols = g.reshape(-1, c_out) @ wmat.T
        return _col2im(gcols, xd.shape, k, stride, ho, wo, squeeze=x.ndim == 3)

    def w_vjp(g):
        return (cols.T @ g.reshape(-1, c_out)).reshape(w.shape)

    return out, ((x, x_vjp), (w, w_vjp))


def _conv_shifted(x, w, xd, k, stride, ho, wo):
    batch, h, wd, c_in = xd.shape
    c_out = w.shape[3]
    out = np.zeros((batch, ho, wo, c_out), dtype=xd.dtype)
    flat = out.reshape(-1, c_out)
    for i in range(k):
        for j in range(k):
            patch = xd[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
            flat += patch.reshape(-1, c_in) @ w.data[i, j]

    def x_vjp(g):
        gf = g.reshape(-1, c_out)
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                    gf @ w.data[i, j].T
                ).reshape(batch, ho, wo, c_in)
        return gx[0] if x.ndim == 3 else gx

    def w_vjp(g):
        gf = g.reshape(-1, c_out)
        gw = np.empty_like(w.data)
        for i in range(k):
            for j in range(k):
                patch = xd[
                    :, i : i + stride * ho : stride, j : j + stride * wo : stride, :
                ]
                gw[i, j] = patch.reshape(-1, c_in).T @ gf
        return gw

    return out, ((x, x_vjp), (w, w_vjp))


def _col2im(gcols, x_shape, k, stride, ho, wo, squeeze):
    batch, h, wd, c_in = x_shape
    gx = np.zeros(x_shape, dtype=gcols.dtype)
    g6 = gcols.reshape(batch, ho, wo, k, k, c_in)
    for i in range(k):
        for j in range(k):
            gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += g6[
                :, :, :, i, j, :
            ]
    return gx[0] if squeeze else gx


def dense(x, weights, bias=None):
    """Fully-connected layer: ``x @ weights + bias``.

    ``x``: (B, n) or (n,); ``weights``: (n, m); ``bias``: (m,) or None.
    """
    x, w = as_tensor(x), as_tensor(weights)
    single = x.ndim == 1
    xd = x.data[None] if single else x.data
    if xd.shape[1] != w.shape[0]:
        raise ConfigurationError(
            f"input of length {xd.shape[1]} incompatible with weights {w.shape}"
        )
    out = xd @ w.data

    def x_vjp(g):
        g = g[None] if single else g
        gx = g @ w.data.T
        return gx[0] if single else gx

    def w_vjp(g):
        g = g[None] if single else g
        return xd.T @ g

    parents = [(x, x_vjp), (w, w_vjp)]
    if bias is not None:
        b = as_tensor(bias)
        out = out + b.data
        parents.append((b, lambda g: (g[None] if single else g).sum(axis=0)))
    return Tensor(out[0] if single else out, parents=parents)


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return Tensor(
        np.where(pos, x.data, 0.0).astype(x.dtype),
        parents=((x, lambda g: np.where(pos, g, 0.0).astype(g.dtype)),),
    )


def leaky_relu(x, alpha):
    """Elementwise max(x, alpha * x) for 0 <= alpha < 1."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError(f"leaky_relu alpha must be in [0, 1), got {alpha}")
    x = as_tensor(x)
    pos = x.data > 0
    return Tensor(
        np.where(pos, x.data, alpha * x.data),
        parents=((x, lambda g: g * np.where(pos, 1.0, alpha).astype(g.dtype)),),
    )


def sigmoid(x):
    x = as_tensor(x)
    # stable in both tails
    s = np.where(
        x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))), np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data)))
    ).astype(x.dtype)
    return Tensor(s, parents=((x, lambda g: g * s * (1.0 - s)),))


def dropout(x, rate, train, rng):
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    Evaluation mode returns the input unchanged (no rescaling needed).
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale
    return Tensor(x.data * mask, parents=((x, lambda g: g * mask),))


def softmax_cross_entropy(logits, target):
    """Cross entropy of a target distribution against softmax(logits).

    Accepts a single (C,) pair or a batch (B, C); batches are averaged.
    The softmax is computed with max-subtraction, so the result is finite
    and nonnegative for any finite logits.
    """
    logits = as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    tt = t[None] if single else t
    if np.any(tt < 0) or not np.allclose(tt.sum(axis=-1), 1.0, atol=1e-9):
        raise ValueError("target must be a distribution (nonnegative, summing to 1)")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    per_example = -(tt * log_probs).sum(axis=-1)
    n = per_example.shape[0]
    out = per_example.sum() / n

    def vjp(g):
        sm = np.exp(log_probs)
        gl = g * (sm - tt) / n
        return gl[0] if single else gl

    return Tensor(np.asarray(out, dtype=logits.dtype), parents=((logits, vjp),))


def sigmoid_cross_entropy(logits, target):
    """Independent per-class binary cross entropy on sigmoid(logits).

    Stable form ``max(z,0) - z*t + log(1 + exp(-|z|))`` summed over classes,
    averaged over the batch axis when present.
    """
    logits = as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    tt = t[None] if single else t
    per_element = np.maximum(z, 0.0) - z * tt + np.log1p(np.exp(-np.abs(z)))
    n = per_element.shape[0]
    out = per_element.sum() / n

    def vjp(g):
        s = np.where(
            z >= 0,
            1.0 / (1.0 + np.exp(-np.abs(z))),
            np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))),
        )
        gl = g * (s - tt) / n
        return gl[0] if single else gl

    return Tensor(np.asarray(out, dtype=logits.dtype), parents=((logits, vjp),))


def squared_error(prediction, target):
    """Total squared difference, averaged over the batch axis if present."""
    prediction = as_tensor(prediction)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    diff = prediction.data - t
    n = diff.shape[0] if diff.ndim > 2 else 1
    out = np.asarray((diff * diff).sum() / n, dtype=prediction.dtype)
    return Tensor(out, parents=((prediction, lambda g: g * (2.0 / n) * diff),))


# -- parameter initialization ---------------------------------------------


def truncated_normal(rng, shape, stddev, dtype=np.float64):
    """Normal draws with |x| > 2*stddev resampled."""
    draws = rng.standard_normal(shape)
    bad = np.abs(draws) > 2.0
    while np.any(bad):
        draws[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(draws) > 2.0
    return (draws * stddev).astype(dtype)


def init_conv_kernel(rng, kernel, c_in, c_out, dtype=np.float64, stddev=0.05):
    return truncated_normal(rng, (kernel, kernel, c_in, c_out), stddev, dtype)


def init_dense_weights(rng, n_in, n_out, dtype=np.float64):
    return truncated_normal(rng, (n_in, n_out), 1.0 / np.sqrt(n_in), dtype)


def zeros(shape, dtype=np.float64):
    return np.zeros(shape, dtype=dtype)
