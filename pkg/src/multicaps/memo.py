"""The generative capsule ("memo") architecture.

One shared encoder lifts the image to routed digit capsules. From those, an
image decoder rebuilds the input (masked to the labeled classes), and a
memo decoder rebuilds one candidate image per class by decoding ten one-hot
maskings of the capsules through shared weights. The best two candidate
channels, ranked by the primary branch's capsule lengths, combine into a
composite reconstruction. A final memo encoder — convolutions over the ten
candidates plus the original image, with no routing anywhere — re-encodes
the candidates into a second set of digit capsules.

Two Adam optimizers train the network concurrently from one forward pass:
the training optimizer owns {shared_encoder, image_decoder} and minimizes
margin + scaled reconstruction loss of the primary branch; the memo
optimizer owns {memo_decoder, memo_encoder} and minimizes the same losses
computed on the memo branch. For the first ``pretrain_iterations`` steps
only the training optimizer runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .capsules import (
    MarginLossParams,
    capsule_lengths,
    margin_loss,
    predict_top2,
    squash,
)
from .errors import ConfigurationError
from .models import (
    CapsuleEncoder,
    ConvSpec,
    ImageDecoder,
    _activate,
    _as_batch,
    _conv_spec,
    _STREAM_INIT,
    _STREAM_DROPOUT,
    mask_capsules,
    resolve_dtype,
)
from .nn.tensor import Tensor, as_tensor

TRAIN_PARTITIONS = ("shared_encoder", "image_decoder")
MEMO_PARTITIONS = ("memo_decoder", "memo_encoder")


@dataclass(frozen=True)
class MemoConfig:
    # shared encoder: two feature convs, then the capsule conv
    conv_specs: tuple = (
        ConvSpec(128, 9, 1, "leaky_relu", 0.2),
        ConvSpec(256, 9, 1, "leaky_relu", 0.15),
    )
    caps_conv: ConvSpec = ConvSpec(256, 9, 2, "relu")
    pose_dim: int = 8
    num_classes: int = 10
    digit_dim: int = 16
    routing_iterations: int = 3
    unroll_routing: bool = False
    # image decoder
    decoder_conv_filters: int = 128
    decoder_fc: tuple = (2304, 1024)
    # memo decoder: shared fully-connected stack, one 36x36 channel per class
    memo_decoder_fc: tuple = (512, 1024)
    # memo encoder: same conv shapes with an 11-deep first conv, then fc tail
    memo_fc_units: int = 1024
    memo_dropout: float = 0.5
    share_memo_encoder_convs: bool = False
    # training
    margin: MarginLossParams = field(default_factory=MarginLossParams)
    recon_scale: float = 0.005
    pretrain_iterations: int = 1000
    image_size: int = 36
    lr_train: float = 1e-3
    lr_memo: float = 1e-3
    dtype: str = "float64"

    @classmethod
    def scaled(cls, width=1.0, **overrides):
        base = cls()
        caps_types = max(1, int((base.caps_conv.filters // base.pose_dim) * width))
        kwargs = dict(
            conv_specs=tuple(
                ConvSpec(max(1, int(s.filters * width)), s.kernel, s.stride, s.activation, s.alpha)
                for s in base.conv_specs
            ),
            caps_conv=ConvSpec(
                caps_types * base.pose_dim,
                base.caps_conv.kernel,
                base.caps_conv.stride,
                base.caps_conv.activation,
            ),
            decoder_conv_filters=max(1, int(base.decoder_conv_filters * width)),
            decoder_fc=tuple(max(4, int(u * width)) for u in base.decoder_fc),
            memo_decoder_fc=tuple(max(4, int(u * width)) for u in base.memo_decoder_fc),
            memo_fc_units=max(4, int(base.memo_fc_units * width)),
        )
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class MemoForwardTrace:
    """Everything one forward pass produces, both branches."""

    digit_caps_primary: Tensor
    primary_lengths: Tensor
    reconstruction: Tensor | None = None
    memo_stack: Tensor | None = None
    composite_reconstruction: Tensor | None = None
    digit_caps_memo: Tensor | None = None


def _take_channels(stack, picks):
    """Gather two image channels per example: stack (B,H,W,C), picks (B,2)."""
    stack = as_tensor(stack)
    idx0 = picks[:, 0][:, None, None, None]
    idx1 = picks[:, 1][:, None, None, None]
    a = np.take_along_axis(stack.data, idx0, axis=3)[..., 0]
    b = np.take_along_axis(stack.data, idx1, axis=3)[..., 0]

    def make_vjp(idx):
        def vjp(g):
            grad = np.zeros_like(stack.data)
            np.put_along_axis(grad, idx, g[..., None], axis=3)
            return grad

        return vjp

    ta = Tensor(a, parents=((stack, make_vjp(idx0)),))
    tb = Tensor(b, parents=((stack, make_vjp(idx1)),))
    return ta, tb


def _clip01(t):
    """Clip to [0,1] with pass-through gradients inside the interval."""
    return nn.sub(1.0, nn.relu(nn.sub(1.0, nn.relu(t))))


def select_best_two(memo_stack, lengths):
    """Combine the two channels with the largest capsule lengths by
    pixelwise maximum, clipped to [0,1]. Ties break toward lower class
    indices; the ranking itself carries no gradient.
    """
    memo_stack = as_tensor(memo_stack)
    lengths_data = lengths.data if isinstance(lengths, Tensor) else np.asarray(lengths)
    single = memo_stack.ndim == 3
    stack = (
        nn.reshape(memo_stack, (1,) + memo_stack.shape) if single else memo_stack
    )
    if lengths_data.ndim == 1:
        lengths_data = lengths_data[None]
    picks = np.asarray(predict_top2(lengths_data))
    if picks.ndim == 1:
        picks = picks[None]
    chan_a, chan_b = _take_channels(stack, picks)
    combined = _clip01(nn.maximum(chan_a, chan_b))
    return nn.reshape(combined, combined.shape[1:]) if single else combined


class MemoNetwork:
    """The full two-encoder, two-decoder generative capsule model."""

    architecture = "memo"

    def __init__(self, config=MemoConfig(), seed=0):
        if config.memo_fc_units < 1:
            raise ConfigurationError("memo encoder needs a positive fc width")
        self.config = config
        self.seed = seed
        self.dtype = resolve_dtype(config.dtype)
        self.params = nn.ParameterSet()
        rng = np.random.default_rng((seed, _STREAM_INIT))
        cfg = config

        self.encoder = CapsuleEncoder(
            self.params,
            rng,
            name="encoder",
            partition="shared_encoder",
            conv_specs=cfg.conv_specs,
            caps_conv=cfg.caps_conv,
            pose_dim=cfg.pose_dim,
            num_classes=cfg.num_classes,
            digit_dim=cfg.digit_dim,
            routing_iterations=cfg.routing_iterations,
            image_size=cfg.image_size,
            in_channels=1,
            lr=cfg.lr_train,
            dtype=self.dtype,
            unroll_routing=cfg.unroll_routing,
        )
        self.image_decoder = ImageDecoder(
            self.params,
            rng,
            name="image_decoder",
            partition="image_decoder",
            num_classes=cfg.num_classes,
            digit_dim=cfg.digit_dim,
            conv_filters=cfg.decoder_conv_filters,
            fc_sizes=cfg.decoder_fc,
            image_size=cfg.image_size,
            lr=cfg.lr_train,
            dtype=self.dtype,
        )
        # memo decoder: shared fc stack from one capsule's pose to one image.
        # Position-symmetric on purpose: every masking decodes through the
        # same pose-to-image map, so permuting capsules permutes channels.
        self._memo_decoder_fc = []
        width = cfg.digit_dim
        for i, units in enumerate(tuple(cfg.memo_decoder_fc) + (cfg.image_size**2,)):
            w = self.params.add(
                f"memo_decoder/fc{i}/weights",
                nn.init_dense_weights(rng, width, units, self.dtype),
                "memo_decoder",
                lr=cfg.lr_memo,
            )
            b = self.params.add(
                f"memo_decoder/fc{i}/bias", nn.zeros(units, self.dtype), "memo_decoder", lr=cfg.lr_memo
            )
            self._memo_decoder_fc.append((w, b))
            width = units
        # memo encoder: conv stack over 11 channels, fc, dropout, fc to capsules
        self._build_memo_encoder(rng)

    def _build_memo_encoder(self, rng):
        cfg = self.config
        self._memo_convs = []
        size = cfg.image_size
        channels = cfg.num_classes + 1  # ten candidate channels plus the original
        specs = tuple(cfg.conv_specs) + (cfg.caps_conv,)
        for i, spec in enumerate(specs):
            if cfg.share_memo_encoder_convs and i > 0:
                # reuse the shared encoder's kernels past the first conv; those
                # tensors stay in the shared_encoder partition and are never
                # updated by the memo optimizer
                kernel, bias, _ = self.encoder.layers[i]
            else:
                kernel = self.params.add(
                    f"memo_encoder/conv{i}/kernel",
                    nn.init_conv_kernel(rng, spec.kernel, channels, spec.filters, self.dtype),
                    "memo_encoder",
                    lr=cfg.lr_memo,
                )
                bias = self.params.add(
                    f"memo_encoder/conv{i}/bias",
                    nn.zeros(spec.filters, self.dtype),
                    "memo_encoder",
                    lr=cfg.lr_memo,
                )
            self._memo_convs.append((kernel, bias, spec))
            size = nn.conv_output_size(size, spec.kernel, spec.stride)
            channels = spec.filters
        flat = size * size * channels
        self._memo_fc1 = (
            self.params.add(
                "memo_encoder/fc0/weights",
                nn.init_dense_weights(rng, flat, cfg.memo_fc_units, self.dtype),
                "memo_encoder",
                lr=cfg.lr_memo,
            ),
            self.params.add(
                "memo_encoder/fc0/bias",
                nn.zeros(cfg.memo_fc_units, self.dtype),
                "memo_encoder",
                lr=cfg.lr_memo,
            ),
        )
        caps_values = cfg.num_classes * cfg.digit_dim
        self._memo_fc2 = (
            self.params.add(
                "memo_encoder/fc1/weights",
                nn.init_dense_weights(rng, cfg.memo_fc_units, caps_values, self.dtype),
                "memo_encoder",
                lr=cfg.lr_memo,
            ),
            self.params.add(
                "memo_encoder/fc1/bias",
                nn.zeros(caps_values, self.dtype),
                "memo_encoder",
                lr=cfg.lr_memo,
            ),
        )

    # -- forward pieces -----------------------------------------------------

    def decode_image(self, digit_caps, present_classes):
        """Reconstruct from capsules masked to the given classes."""
        return self.image_decoder(mask_capsules(digit_caps, present_classes))

    def memo_decode_all(self, digit_caps):
        """Decode every one-hot masking through the shared memo decoder.

        Masking all capsules but k leaves exactly capsule k's pose, which
        the shared (position-symmetric) decoder turns into one candidate
        image. Returns (B, H, W, num_classes): channel k is the
        reconstruction attempt that assumes class k is present.
        """
        digit_caps = as_tensor(digit_caps)
        batch, num_classes, dim = digit_caps.shape
        h = nn.reshape(digit_caps, (batch * num_classes, dim))
        for w, b in self._memo_decoder_fc[:-1]:
            h = nn.relu(nn.dense(h, w, b))
        w, b = self._memo_decoder_fc[-1]
        size = self.config.image_size
        out = nn.sigmoid(nn.dense(h, w, b))
        out = nn.reshape(out, (batch, num_classes, size, size))
        return nn.transpose(out, (0, 2, 3, 1))

    def memo_encode(self, memo_stack, original, train=False, rng=None):
        """Candidate channels plus the original image back to digit capsules.

        A plain conv/fc path: no routing state exists anywhere in it.
        """
        memo_stack = as_tensor(memo_stack)
        if memo_stack.shape[-1] != self.config.num_classes:
            raise ConfigurationError(
                f"memo stack has {memo_stack.shape[-1]} channels, "
                f"expected {self.config.num_classes}"
            )
        original = as_tensor(original)
        if original.ndim == memo_stack.ndim - 1:
            original = nn.reshape(original, original.shape + (1,))
        h = nn.concatenate([memo_stack, original], axis=-1)
        if h.shape[-1] != self.config.num_classes + 1:
            raise ConfigurationError(f"memo encoder input depth must be {self.config.num_classes + 1}")
        for kernel, bias, spec in self._memo_convs:
            h = _activate(nn.conv2d(h, kernel, bias=bias, stride=spec.stride), spec)
        h = nn.relu(nn.dense(nn.flatten(h), *self._memo_fc1))
        if train:
            rng = rng if rng is not None else np.random.default_rng((self.seed, _STREAM_DROPOUT, 0))
            h = nn.dropout(h, self.config.memo_dropout, train=True, rng=rng)
        caps = nn.dense(h, *self._memo_fc2)
        caps = nn.reshape(caps, (caps.shape[0], self.config.num_classes, self.config.digit_dim))
        return squash(caps)

    def forward(self, images, labels=None, train=False, step=0, include_memo=True,
                frozen_couplings=None):
        """Run one or both branches; labels drive the reconstruction masking
        during training, the predicted top-2 classes drive it at evaluation.
        """
        x = _as_batch(images, self.dtype)
        digit_caps, _ = self.encoder(nn.Tensor(x), frozen_couplings=frozen_couplings)
        lengths = capsule_lengths(digit_caps)
        trace = MemoForwardTrace(digit_caps_primary=digit_caps, primary_lengths=lengths)
        if train and labels is None:
            raise ConfigurationError("training forward pass needs labels for masking")
        present = labels if train else predict_top2(lengths.data)
        trace.reconstruction = self.decode_image(digit_caps, present)
        if include_memo:
            trace.memo_stack = self.memo_decode_all(digit_caps)
            trace.composite_reconstruction = select_best_two(trace.memo_stack, lengths.data)
            rng = np.random.default_rng((self.seed, _STREAM_DROPOUT, step))
            trace.digit_caps_memo = self.memo_encode(
                trace.memo_stack, nn.Tensor(x[..., 0]), train=train, rng=rng
            )
        return trace

    # -- losses and updates ---------------------------------------------------

    def losses(self, trace, labels, images):
        """(train_loss, memo_loss); memo_loss is None without a memo branch."""
        target = _as_batch(images, self.dtype)[..., 0]
        scale = self.config.recon_scale
        train_loss = margin_loss(trace.primary_lengths, labels, self.config.margin)
        if scale:
            train_loss = nn.add(
                train_loss, nn.mul(nn.squared_error(trace.reconstruction, target), scale)
            )
        memo_loss = None
        if trace.digit_caps_memo is not None:
            memo_lengths = capsule_lengths(trace.digit_caps_memo)
            memo_loss = margin_loss(memo_lengths, labels, self.config.margin)
            if scale:
                memo_loss = nn.add(
                    memo_loss,
                    nn.mul(nn.squared_error(trace.composite_reconstruction, target), scale),
                )
        return train_loss, memo_loss

    def train_step(self, images, labels, step):
        """One optimization step; ``step`` counts from 0 for the pre-training gate.

        Both optimizers see gradients from the same forward pass. Updates
        apply after both backward passes, training optimizer first.
        """
        gate_open = step >= self.config.pretrain_iterations
        trace = self.forward(images, labels, train=True, step=step, include_memo=gate_open)
        train_loss, memo_loss = self.losses(trace, labels, images)
        self.params.zero_grads()
        train_loss.backward()
        train_grads = {
            p.name: p.tensor.grad
            for p in self.params.select(*TRAIN_PARTITIONS)
            if p.tensor.grad is not None
        }
        memo_grads = {}
        if gate_open:
            memo_loss.backward()
            memo_grads = {
                p.name: p.tensor.grad
                for p in self.params.select(*MEMO_PARTITIONS)
                if p.tensor.grad is not None
            }
        for p in self.params.select(*TRAIN_PARTITIONS):
            if p.name in train_grads:
                nn.adam_step(p.tensor.data, train_grads[p.name], p.adam)
        for p in self.params.select(*MEMO_PARTITIONS):
            if p.name in memo_grads:
                nn.adam_step(p.tensor.data, memo_grads[p.name], p.adam)
        return train_loss.item() if memo_loss is None else (
            train_loss.item() + memo_loss.item()
        ) / 2.0

    def predict(self, images):
        with nn.no_grad():
            x = _as_batch(images, self.dtype)
            digit_caps, _ = self.encoder(nn.Tensor(x))
            lengths = capsule_lengths(digit_caps)
        return predict_top2(lengths.data)

    def config_dict(self):
        return {"architecture": self.architecture, "seed": self.seed, **asdict(self.config)}

    @classmethod
    def from_config_dict(cls, cfg):
        cfg = dict(cfg)
        cfg.pop("architecture", None)
        seed = cfg.pop("seed", 0)
        cfg["conv_specs"] = tuple(_conv_spec(s) for s in cfg["conv_specs"])
        cfg["caps_conv"] = _conv_spec(cfg["caps_conv"])
        for key in ("decoder_fc", "memo_decoder_fc"):
            cfg[key] = tuple(cfg[key])
        if isinstance(cfg.get("margin"), dict):
            cfg["margin"] = MarginLossParams(**cfg["margin"])
        return cls(MemoConfig(**cfg), seed=seed)
