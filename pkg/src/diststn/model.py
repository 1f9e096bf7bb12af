"""Encoder / decoder / pose-discrepancy network / classifier and the pair objective.

Shapes: images go in as ``N x S x S`` (or a single ``S x S``); the encoder
emits identity maps ``f`` and pose maps ``r`` of ``N x C x S' x S'`` where
``S' = S / prod(strides)``.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ShapeMismatch
from .nn import ParamGroup, dense, mae_loss, softmax, softmax_cross_entropy
from .stn import IDENTITY, AffineParams, warp
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    num_classes: int = 10
    enc_channels: tuple[int, ...] = (16, 32, 48)
    f_channels: int = 24
    kernels: tuple[int, ...] = (4, 4, 3)
    strides: tuple[int, ...] = (2, 2, 1)
    pose_hidden: tuple[int, ...] = (60, 30)
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (len(self.enc_channels) == len(self.kernels) == len(self.strides)):
            raise ValueError("enc_channels, kernels and strides must have equal length")
        if not 0 < self.f_channels < self.enc_channels[-1]:
            raise ValueError("f_channels must leave at least one pose channel")
        size = self.image_size
        for k, s in zip(self.kernels, self.strides):
            size = ops.conv_output_size(size, k, s, self.pad(k, s))

    @staticmethod
    def pad(kernel: int, stride: int) -> int:
        return (kernel - stride) // 2

    @property
    def r_channels(self) -> int:
        return self.enc_channels[-1] - self.f_channels

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for k, s in zip(self.kernels, self.strides):
            size = ops.conv_output_size(size, k, s, self.pad(k, s))
        return size

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """16 x 16 images, 2 identity + 2 pose channels; for gradient checks."""
        base = dict(image_size=16, num_classes=3, enc_channels=(4, 4, 4), f_channels=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class LossBreakdown:
    classification: float
    cross: float
    self_i: float
    self_j: float
    total: float


@dataclass
class DistStnModel:
    config: ModelConfig
    groups: dict[str, ParamGroup] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.groups:
            self.groups = _init_params(self.config)

    # parameter access -----------------------------------------------------

    def p(self, name: str) -> Tensor:
        group, key = name.split(".", 1)
        return self.groups[group].params[key]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{g}.{k}", t) for g, grp in self.groups.items() for k, t in grp.params.items()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if state[name].shape != t.shape:
                raise ShapeMismatch(f"{name}: {state[name].shape} vs {t.shape}")
            t.data[...] = state[name]

    def copy(self) -> "DistStnModel":
        return copy.deepcopy(self)

    def reset_pose_to_identity(self) -> None:
        last = len(self.config.pose_hidden) + 1
        self.p(f"pose.fc{last}.weight").data[...] = 0.0
        self.p(f"pose.fc{last}.bias").data[...] = IDENTITY

    # forward pieces -------------------------------------------------------

    def _as_batch(self, x) -> tuple[Tensor, bool]:
        """Coerce ``S x S``, ``N x S x S`` or ``N x 1 x S x S`` input to a 4-D tensor."""
        t = x if isinstance(x, Tensor) else Tensor(x)
        s = self.config.image_size
        if t.shape[-2:] != (s, s) or t.ndim not in (2, 3, 4) or (t.ndim == 4 and t.shape[1] != 1):
            raise ShapeMismatch(f"expected {s} x {s} images, got {t.shape}")
        if t.ndim == 4:
            return t, False
        return ops.reshape(t, (-1, 1, s, s)), t.ndim == 2

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """Identity maps ``f`` and pose maps ``r`` from one encoder pass."""
        h, _ = self._as_batch(x)
        cfg = self.config
        for i, (k, s) in enumerate(zip(cfg.kernels, cfg.strides), start=1):
            h = ops.relu(
                ops.conv2d(
                    h, self.p(f"encoder.conv{i}.weight"), self.p(f"encoder.conv{i}.bias"),
                    stride=s, pad=cfg.pad(k, s),
                )
            )
        return ops.split_channels(h, cfg.f_channels)

    def decode(self, f: Tensor, r: Tensor) -> Tensor:
        """Image ``N x S x S`` from identity and pose maps; last layer is linear."""
        if f.shape[:-3] != r.shape[:-3] or f.shape[-2:] != r.shape[-2:]:
            raise ShapeMismatch(f"decode: f {f.shape} and r {r.shape} disagree")
        cfg = self.config
        h = ops.concat_channels(f, r)
        n_layers = len(cfg.kernels)
        for i, (k, s) in enumerate(zip(reversed(cfg.kernels), reversed(cfg.strides)), start=1):
            h = ops.conv2d_transpose(
                h, self.p(f"decoder.deconv{i}.weight"), self.p(f"decoder.deconv{i}.bias"),
                stride=s, pad=cfg.pad(k, s),
            )
            if i < n_layers:
                h = ops.relu(h)
        lead = h.shape[:-3]
        return ops.reshape(h, lead + h.shape[-2:])

    def pose_discrepancy(self, r_i: Tensor, r_j: Tensor) -> Tensor:
        """Affine parameters warping ``r_i`` onto ``r_j``: ``(6,)`` or ``N x 6``."""
        if r_i.shape != r_j.shape:
            raise ShapeMismatch(f"pose_discrepancy: {r_i.shape} vs {r_j.shape}")
        h = ops.flatten(ops.concat_channels(r_i, r_j))
        n_layers = len(self.config.pose_hidden) + 1
        for i in range(1, n_layers + 1):
            h = dense(h, self.p(f"pose.fc{i}.weight"), self.p(f"pose.fc{i}.bias"))
            if i < n_layers:
                h = ops.relu(h)
        return h

    def logits(self, f: Tensor) -> Tensor:
        return dense(ops.flatten(f), self.p("classifier.fc.weight"), self.p("classifier.fc.bias"))

    def classify(self, f: Tensor) -> np.ndarray:
        return softmax(self.logits(f).data)

    def predict(self, x) -> np.ndarray:
        """Class ids from the encoder and classifier only; ties go to the lowest id."""
        t, single = self._as_batch(x)
        f, _ = self.encode(t)
        out = np.argmax(self.logits(f).data, axis=-1)
        return out[0] if single else out

    def pose_params(self, x_i, x_j) -> list[AffineParams]:
        _, r_i = self.encode(x_i)
        _, r_j = self.encode(x_j)
        theta = self.pose_discrepancy(r_i, r_j).data.reshape(-1, 6)
        return [AffineParams(tuple(t)) for t in theta]

    # objectives ----------------------------------------------------------

    def pair_terms(self, x_i, y_i, x_j, y_j) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """The four per-pair terms: classification, cross, self_i, self_j."""
        xi, _ = self._as_batch(x_i)
        xj, _ = self._as_batch(x_j)
        f_i, r_i = self.encode(xi)
        f_j, r_j = self.encode(xj)
        s = self.config.image_size
        img_i = ops.reshape(xi, (-1, s, s))
        img_j = ops.reshape(xj, (-1, s, s))

        cls = softmax_cross_entropy(self.logits(f_i), np.atleast_1d(y_i))
        theta = self.pose_discrepancy(r_i, r_j)
        cross = mae_loss(img_j, self.decode(f_j, warp(r_i, theta)))
        self_i = mae_loss(img_i, self.decode(f_i, r_i))
        self_j = mae_loss(img_j, self.decode(f_j, r_j))
        return cls, cross, self_i, self_j

    def pair_loss(
        self, x_i, y_i, x_j, y_j, alpha: float | None = None, beta: float | None = None
    ) -> tuple[Tensor, LossBreakdown]:
        """``CE(f_i, y_i) + alpha * cross + beta * (self_i + self_j)``, batch-averaged.

        ``y_j`` is accepted for symmetry of the pair interface; only ``y_i``
        enters the classification term.
        """
        alpha = self.config.alpha if alpha is None else alpha
        beta = self.config.beta if beta is None else beta
        cls, cross, self_i, self_j = self.pair_terms(x_i, y_i, x_j, y_j)
        total = ops.add_n(
            cls, ops.scale(cross, alpha), ops.scale(self_i, beta), ops.scale(self_j, beta)
        )
        breakdown = LossBreakdown(
            cls.item(), cross.item(), self_i.item(), self_j.item(), total.item()
        )
        return total, breakdown

    def classification_loss(self, x, y) -> Tensor:
        f, _ = self.encode(x)
        return softmax_cross_entropy(self.logits(f), np.atleast_1d(y))

    def cross_reconstruct(self, x_1, x_2) -> tuple[np.ndarray, np.ndarray]:
        """Self-reconstruction of ``x_1`` and its reconstruction from ``x_2``'s warped pose."""
        x1, single = self._as_batch(x_1)
        x2, _ = self._as_batch(x_2)
        f1, r1 = self.encode(x1)
        _, r2 = self.encode(x2)
        hat = self.decode(f1, r1).data
        theta = self.pose_discrepancy(r2, r1)
        tilde = self.decode(f1, warp(r2, theta)).data
        if single:
            return hat[0], tilde[0]
        return hat, tilde


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: float, gain: float = 2.0) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _init_params(cfg: ModelConfig) -> dict[str, ParamGroup]:
    rng = np.random.default_rng(cfg.seed)
    enc: dict[str, Tensor] = {}
    c_in = 1
    for i, (c, k) in enumerate(zip(cfg.enc_channels, cfg.kernels), start=1):
        enc[f"conv{i}.weight"] = _he(rng, (c, c_in, k, k), c_in * k * k)
        enc[f"conv{i}.bias"] = _zeros(c)
        c_in = c

    dec: dict[str, Tensor] = {}
    chans = list(reversed(cfg.enc_channels)) + [1]
    layers = list(zip(reversed(cfg.kernels), reversed(cfg.strides)))
    for i, (k, s) in enumerate(layers, start=1):
        cin, cout = chans[i - 1], chans[i]
        gain = 2.0 if i < len(layers) else 1.0
        dec[f"deconv{i}.weight"] = _he(rng, (cin, cout, k, k), cin * k * k / (s * s), gain)
        dec[f"deconv{i}.bias"] = _zeros(cout)

    pose: dict[str, Tensor] = {}
    width = 2 * cfg.r_channels * cfg.feature_size**2
    for i, hidden in enumerate(cfg.pose_hidden, start=1):
        pose[f"fc{i}.weight"] = _he(rng, (hidden, width), width)
        pose[f"fc{i}.bias"] = _zeros(hidden)
        width = hidden
    last = len(cfg.pose_hidden) + 1
    pose[f"fc{last}.weight"] = _zeros(6, width)
    pose[f"fc{last}.bias"] = Tensor(np.array(IDENTITY), requires_grad=True)

    n_f = cfg.f_channels * cfg.feature_size**2
    clf = {
        "fc.weight": _he(rng, (cfg.num_classes, n_f), n_f, gain=1.0),
        "fc.bias": _zeros(cfg.num_classes),
    }
    return {
        "encoder": ParamGroup("encoder", enc),
        "decoder": ParamGroup("decoder", dec),
        "pose": ParamGroup("pose", pose, weight_decay_exempt=True),
        "classifier": ParamGroup("classifier", clf),
    }


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
