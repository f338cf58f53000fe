"""The convolutional baseline and the routed capsule classifier.

Both models consume 36x36 grayscale batches shaped (B, 36, 36) and predict
an unordered pair of distinct digit classes. Randomness is stateless: the
weight draw and each step's dropout derive from (seed, stream, step), so a
run is reproducible from its seed and resumable from any checkpoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .capsules import (
    MarginLossParams,
    capsule_lengths,
    digit_capsules,
    margin_loss,
    predict_top2,
    primary_capsules,
)
from .errors import ConfigurationError

# seed-stream tags
_STREAM_INIT = 0
_STREAM_DROPOUT = 1

_DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(name):
    if isinstance(name, type) and name in (np.float64, np.float32):
        return name
    try:
        return _DTYPES[str(name)]
    except KeyError:
        raise ConfigurationError(f"unsupported dtype {name!r}") from None


def dtype_name(dtype):
    return np.dtype(dtype).name


@dataclass(frozen=True)
class ConvSpec:
    """One convolutional layer: filter count, square kernel, stride, activation."""

    filters: int
    kernel: int = 9
    stride: int = 1
    activation: str = "relu"
    alpha: float = 0.0


def _activate(h, spec):
    if spec.activation == "relu":
        return nn.relu(h)
    if spec.activation == "leaky_relu":
        return nn.leaky_relu(h, spec.alpha)
    if spec.activation == "none":
        return h
    raise ConfigurationError(f"unknown activation {spec.activation!r}")


def _as_batch(images, dtype):
    """(B, 36, 36) or (36, 36) grayscale to a (B, H, W, 1) array of ``dtype``."""
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    return np.ascontiguousarray(arr[..., None], dtype=dtype)


class CapsuleEncoder:
    """Conv stack to primary capsules, then one routed digit-capsule layer."""

    def __init__(
        self,
        params,
        rng,
        *,
        name,
        partition,
        conv_specs,
        caps_conv,
        pose_dim,
        num_classes,
        digit_dim,
        routing_iterations,
        image_size,
        in_channels,
        lr,
        dtype,
        unroll_routing=False,
        transform_stddev=0.05,
    ):
        self.pose_dim = pose_dim
        self.routing_iterations = routing_iterations
        self.unroll_routing = unroll_routing
        self.layers = []
        size, channels = image_size, in_channels
        for i, spec in enumerate(tuple(conv_specs) + (caps_conv,)):
            kernel = params.add(
                f"{name}/conv{i}/kernel",
                nn.init_conv_kernel(rng, spec.kernel, channels, spec.filters, dtype),
                partition,
                lr=lr,
            )
            bias = params.add(
                f"{name}/conv{i}/bias", nn.zeros(spec.filters, dtype), partition, lr=lr
            )
            self.layers.append((kernel, bias, spec))
            size = nn.conv_output_size(size, spec.kernel, spec.stride)
            channels = spec.filters
        if channels % pose_dim:
            raise ConfigurationError(
                f"capsule conv filters {channels} not divisible by pose_dim {pose_dim}"
            )
        self.feature_size = size
        self.num_primary = size * size * (channels // pose_dim)
        self.transforms = params.add(
            f"{name}/digit_transforms",
            nn.truncated_normal(
                rng, (self.num_primary, num_classes, pose_dim, digit_dim),
                transform_stddev, dtype,
            ),
            partition,
            lr=lr,
        )

    def __call__(self, x, frozen_couplings=None):
        h = x
        for kernel, bias, spec in self.layers:
            h = _activate(nn.conv2d(h, kernel, bias=bias, stride=spec.stride), spec)
        primary = primary_capsules(h, pose_dim=self.pose_dim)
        return digit_capsules(
            primary,
            self.transforms,
            iterations=self.routing_iterations,
            unroll=self.unroll_routing,
            frozen_couplings=frozen_couplings,
        )


class ImageDecoder:
    """Masked digit capsules back to a 36x36 image: two convs over the
    capsule grid, then a fully-connected tail ending in a sigmoid."""

    def __init__(
        self,
        params,
        rng,
        *,
        name,
        partition,
        num_classes,
        digit_dim,
        conv_filters,
        fc_sizes,
        image_size,
        lr,
        dtype,
    ):
        self.num_classes = num_classes
        self.digit_dim = digit_dim
        self.image_size = image_size
        self.convs = []
        rows, cols, channels = digit_dim, num_classes, 1
        for i in range(2):
            kernel = params.add(
                f"{name}/conv{i}/kernel",
                nn.init_conv_kernel(rng, 3, channels, conv_filters, dtype),
                partition,
                lr=lr,
            )
            bias = params.add(
                f"{name}/conv{i}/bias", nn.zeros(conv_filters, dtype), partition, lr=lr
            )
            self.convs.append((kernel, bias))
            rows = nn.conv_output_size(rows, 3, 1)
            cols = nn.conv_output_size(cols, 3, 1)
            channels = conv_filters
        self.fc = []
        width = rows * cols * channels
        for i, units in enumerate(tuple(fc_sizes) + (image_size * image_size,)):
            w = params.add(
                f"{name}/fc{i}/weights",
                nn.init_dense_weights(rng, width, units, dtype),
                partition,
                lr=lr,
            )
            b = params.add(f"{name}/fc{i}/bias", nn.zeros(units, dtype), partition, lr=lr)
            self.fc.append((w, b))
            width = units

    def __call__(self, masked_caps):
        batch = masked_caps.shape[0]
        # capsule grid as a (digit_dim, num_classes) one-channel image
        h = nn.reshape(
            nn.transpose(masked_caps, (0, 2, 1)),
            (batch, self.digit_dim, self.num_classes, 1),
        )
        for kernel, bias in self.convs:
            h = nn.relu(nn.conv2d(h, kernel, bias=bias, stride=1))
        h = nn.flatten(h)
        for w, b in self.fc[:-1]:
            h = nn.relu(nn.dense(h, w, b))
        w, b = self.fc[-1]
        out = nn.sigmoid(nn.dense(h, w, b))
        return nn.reshape(out, (batch, self.image_size, self.image_size))


def mask_capsules(digit_caps, present_classes):
    """Zero every capsule whose class is not present; keeps the graph intact."""
    batch, num_classes, _ = digit_caps.shape
    mask = np.zeros((batch, num_classes, 1), dtype=digit_caps.dtype)
    for row, classes in zip(mask, present_classes):
        row[list(classes), 0] = 1.0
    return nn.mul(digit_caps, mask)


# -- convolutional baseline ---------------------------------------------------


@dataclass(frozen=True)
class ConvNetConfig:
    conv_specs: tuple = (
        ConvSpec(32, 5, 1, "relu"),
        ConvSpec(64, 5, 2, "relu"),
        ConvSpec(128, 5, 2, "relu"),
    )
    fc_units: int = 512
    num_classes: int = 10
    image_size: int = 36
    weight_decay: float = 1e-4
    target_mode: str = "two_hot_softmax"  # or "sigmoid"
    lr: float = 1e-3
    dtype: str = "float64"

    @classmethod
    def scaled(cls, width=1.0, **overrides):
        specs = tuple(
            ConvSpec(max(1, int(s.filters * width)), s.kernel, s.stride, s.activation)
            for s in cls().conv_specs
        )
        kwargs = dict(conv_specs=specs, fc_units=max(4, int(512 * width)))
        kwargs.update(overrides)
        return cls(**kwargs)


class ConvNetClassifier:
    """Three conv layers and two fully-connected layers over 10 logits.

    The two-digit label is encoded as half probability mass on each class;
    prediction takes the top-2 logits. Optional L2 weight decay enters the
    loss itself.
    """

    architecture = "convnet"

    def __init__(self, config=ConvNetConfig(), seed=0):
        self.config = config
        self.seed = seed
        self.dtype = resolve_dtype(config.dtype)
        self.params = nn.ParameterSet()
        rng = np.random.default_rng((seed, _STREAM_INIT))
        self._convs = []
        size, channels = config.image_size, 1
        for i, spec in enumerate(config.conv_specs):
            kernel = self.params.add(
                f"convnet/conv{i}/kernel",
                nn.init_conv_kernel(rng, spec.kernel, channels, spec.filters, self.dtype),
                "baseline",
                lr=config.lr,
            )
            bias = self.params.add(
                f"convnet/conv{i}/bias",
                nn.zeros(spec.filters, self.dtype),
                "baseline",
                lr=config.lr,
            )
            self._convs.append((kernel, bias, spec))
            size = nn.conv_output_size(size, spec.kernel, spec.stride)
            channels = spec.filters
        flat = size * size * channels
        self._fc1 = (
            self.params.add(
                "convnet/fc0/weights",
                nn.init_dense_weights(rng, flat, config.fc_units, self.dtype),
                "baseline",
                lr=config.lr,
            ),
            self.params.add(
                "convnet/fc0/bias", nn.zeros(config.fc_units, self.dtype), "baseline", lr=config.lr
            ),
        )
        self._fc2 = (
            self.params.add(
                "convnet/fc1/weights",
                nn.init_dense_weights(rng, config.fc_units, config.num_classes, self.dtype),
                "baseline",
                lr=config.lr,
            ),
            self.params.add(
                "convnet/fc1/bias",
                nn.zeros(config.num_classes, self.dtype),
                "baseline",
                lr=config.lr,
            ),
        )

    def forward(self, images):
        h = nn.Tensor(_as_batch(images, self.dtype))
        for kernel, bias, spec in self._convs:
            h = _activate(nn.conv2d(h, kernel, bias=bias, stride=spec.stride), spec)
        h = nn.relu(nn.dense(nn.flatten(h), *self._fc1))
        return nn.dense(h, *self._fc2)

    def _targets(self, labels, batch):
        target = np.zeros((batch, self.config.num_classes), dtype=self.dtype)
        for row, pair in zip(target, labels):
            row[list(pair)] = 0.5 if self.config.target_mode == "two_hot_softmax" else 1.0
        return target

    def loss(self, logits, labels):
        target = self._targets(labels, logits.shape[0])
        if self.config.target_mode == "two_hot_softmax":
            loss = nn.softmax_cross_entropy(logits, target)
        elif self.config.target_mode == "sigmoid":
            loss = nn.sigmoid_cross_entropy(logits, target)
        else:
            raise ConfigurationError(f"unknown target mode {self.config.target_mode!r}")
        if self.config.weight_decay:
            penalty = None
            for p in self.params:
                if p.name.endswith("/weights") or p.name.endswith("/kernel"):
                    term = nn.tsum(nn.square(p.tensor))
                    penalty = term if penalty is None else nn.add(penalty, term)
            loss = nn.add(loss, nn.mul(penalty, self.config.weight_decay))
        return loss

    def train_step(self, images, labels, step):
        logits = self.forward(images)
        loss = self.loss(logits, labels)
        self.params.zero_grads()
        loss.backward()
        self.params.apply_adam()
        return loss.item()

    def predict(self, images):
        with nn.no_grad():
            logits = self.forward(images)
        return predict_top2(logits.data)

    def config_dict(self):
        return {"architecture": self.architecture, "seed": self.seed, **asdict(self.config)}

    @classmethod
    def from_config_dict(cls, cfg):
        cfg = dict(cfg)
        cfg.pop("architecture", None)
        seed = cfg.pop("seed", 0)
        cfg["conv_specs"] = tuple(ConvSpec(**dict(zip(
            ("filters", "kernel", "stride", "activation", "alpha"), spec
        ))) if isinstance(spec, (list, tuple)) else ConvSpec(**spec) for spec in cfg["conv_specs"])
        return cls(ConvNetConfig(**cfg), seed=seed)


# -- routed capsule classifier ------------------------------------------------


@dataclass(frozen=True)
class CapsNetConfig:
    conv_specs: tuple = (ConvSpec(256, 9, 1, "relu"),)
    caps_conv: ConvSpec = ConvSpec(256, 9, 2, "relu")
    pose_dim: int = 8
    num_classes: int = 10
    digit_dim: int = 16
    routing_iterations: int = 3
    unroll_routing: bool = False
    decoder_conv_filters: int = 128
    decoder_fc: tuple = (2304, 1024)
    margin: MarginLossParams = field(default_factory=MarginLossParams)
    recon_scale: float = 0.005
    image_size: int = 36
    lr: float = 1e-3
    dtype: str = "float64"

    @classmethod
    def scaled(cls, width=1.0, **overrides):
        """Shrink encoder filter counts (and the decoder to match) by ``width``."""
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
        )
        kwargs.update(overrides)
        return cls(**kwargs)


class CapsuleClassifier:
    """Encoder to routed digit capsules, trained on margin loss plus a
    reconstruction regularizer decoded from the label-masked capsules."""

    architecture = "capsnet"

    def __init__(self, config=CapsNetConfig(), seed=0):
        self.config = config
        self.seed = seed
        self.dtype = resolve_dtype(config.dtype)
        self.params = nn.ParameterSet()
        rng = np.random.default_rng((seed, _STREAM_INIT))
        self.encoder = CapsuleEncoder(
            self.params,
            rng,
            name="encoder",
            partition="shared_encoder",
            conv_specs=config.conv_specs,
            caps_conv=config.caps_conv,
            pose_dim=config.pose_dim,
            num_classes=config.num_classes,
            digit_dim=config.digit_dim,
            routing_iterations=config.routing_iterations,
            image_size=config.image_size,
            in_channels=1,
            lr=config.lr,
            dtype=self.dtype,
            unroll_routing=config.unroll_routing,
        )
        self.decoder = ImageDecoder(
            self.params,
            rng,
            name="decoder",
            partition="image_decoder",
            num_classes=config.num_classes,
            digit_dim=config.digit_dim,
            conv_filters=config.decoder_conv_filters,
            fc_sizes=config.decoder_fc,
            image_size=config.image_size,
            lr=config.lr,
            dtype=self.dtype,
        )

    def forward(self, images, frozen_couplings=None):
        x = nn.Tensor(_as_batch(images, self.dtype))
        return self.encoder(x, frozen_couplings=frozen_couplings)

    def loss(self, images, labels, frozen_couplings=None):
        """Margin loss plus ``recon_scale`` times the masked-reconstruction error."""
        x = np.asarray(images)
        digit_caps, state = self.forward(x, frozen_couplings=frozen_couplings)
        lengths = capsule_lengths(digit_caps)
        loss = margin_loss(lengths, labels, self.config.margin)
        if self.config.recon_scale:
            recon = self.decoder(mask_capsules(digit_caps, labels))
            target = _as_batch(x, self.dtype)[..., 0]
            loss = nn.add(loss, nn.mul(nn.squared_error(recon, target), self.config.recon_scale))
        return loss, state

    def train_step(self, images, labels, step):
        loss, _ = self.loss(images, labels)
        self.params.zero_grads()
        loss.backward()
        self.params.apply_adam()
        return loss.item()

    def predict(self, images):
        with nn.no_grad():
            digit_caps, _ = self.forward(images)
            lengths = capsule_lengths(digit_caps)
        return predict_top2(lengths.data)

    def config_dict(self):
        return {"architecture": self.architecture, "seed": self.seed, **asdict(self.config)}

    @classmethod
    def from_config_dict(cls, cfg):
        cfg = dict(cfg)
        cfg.pop("architecture", None)
        seed = cfg.pop("seed", 0)
        cfg["conv_specs"] = tuple(_conv_spec(spec) for spec in cfg["conv_specs"])
        cfg["caps_conv"] = _conv_spec(cfg["caps_conv"])
        cfg["decoder_fc"] = tuple(cfg["decoder_fc"])
        cfg["margin"] = MarginLossParams(**cfg["margin"]) if isinstance(cfg["margin"], dict) else cfg["margin"]
        return cls(CapsNetConfig(**cfg), seed=seed)


def _conv_spec(spec):
    if isinstance(spec, ConvSpec):
        return spec
    if isinstance(spec, dict):
        return ConvSpec(**spec)
    return ConvSpec(*spec)
