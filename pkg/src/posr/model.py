"""Shared convolutional backbone with a semantic (class) head and a style (subject) head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UnsupportedConfigurationError
from .losses import CLF_KINDS, RECIPROCAL_KINDS, LossConfig, head_scores, softmax
from .rng import make_rng
from .tensor import Parameter, Tensor

UNKNOWN = -1


@dataclass
class BackboneConfig:
    """Compact DeepConvNet-style extractor.

    temporal conv -> spatial conv -> ELU -> max-pool, followed by
    ``n_extra_blocks`` of (temporal conv, ELU, max-pool).
    """

    n_channels: int = 8
    n_samples: int = 200
    temporal_kernel: int = 11
    n_temporal_filters: int = 8
    n_spatial_filters: int = 8
    pool_size: int = 4
    n_extra_blocks: int = 1
    flatten_dim: int | None = None

    def __post_init__(self):
        for name in ("n_channels", "n_samples", "temporal_kernel", "n_temporal_filters", "n_spatial_filters", "pool_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"backbone.{name} must be positive, got {getattr(self, name)}")
        if self.n_extra_blocks < 0:
            raise ConfigError(f"backbone.n_extra_blocks must be >= 0, got {self.n_extra_blocks}")
        derived = self.n_spatial_filters * self.time_trace()[-1]
        if self.flatten_dim is None:
            self.flatten_dim = derived
        elif self.flatten_dim != derived:
            raise ConfigError(f"backbone.flatten_dim={self.flatten_dim} but the layers produce {derived}")

    def time_trace(self) -> list[int]:
        """Time-axis length after each pooling stage; fails if any stage collapses."""
        lengths = []
        t = self.n_samples
        for block in range(self.n_extra_blocks + 1):
            t = t - self.temporal_kernel + 1
            if t < self.pool_size:
                raise ConfigError(
                    f"backbone block {block}: {t} samples left before pooling by {self.pool_size}; "
                    f"n_samples={self.n_samples} is too short for this kernel/pool setup"
                )
            t //= self.pool_size
            lengths.append(t)
        return lengths


@dataclass
class HeadConfig:
    n_categories: int
    embed_dim: int = 2
    loss_kind: str = "GCPL"

    def __post_init__(self):
        self.loss_kind = self.loss_kind.upper()
        if self.loss_kind not in CLF_KINDS:
            raise ConfigError(f"head loss kind must be one of {CLF_KINDS}, got {self.loss_kind!r}")
        if self.n_categories < 2:
            raise ConfigError(f"a head needs at least 2 categories, got {self.n_categories}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.head_kind == "plain_logits" and self.embed_dim != self.n_categories:
            raise ConfigError(
                f"plain_logits head emits logits directly, so embed_dim ({self.embed_dim}) "
                f"must equal n_categories ({self.n_categories})"
            )

    @property
    def head_kind(self) -> str:
        return "plain_logits" if self.loss_kind == "CE" else "distance_prototype"

    @property
    def point_role(self) -> str | None:
        if self.loss_kind == "GCPL":
            return "prototype"
        if self.loss_kind in RECIPROCAL_KINDS:
            return "reciprocal_point"
        return None


@dataclass
class PrototypeSet:
    points: Parameter
    radii: Parameter | None
    role: str

    @property
    def n_categories(self) -> int:
        return self.points.shape[0]


@dataclass
class Head:
    config: HeadConfig
    weight: Parameter
    bias: Parameter
    prototypes: PrototypeSet | None = None

    def __call__(self, features: Tensor) -> Tensor:
        return T.add(T.matmul(features, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        params = [self.weight, self.bias]
        if self.prototypes is not None:
            params.append(self.prototypes.points)
            if self.prototypes.radii is not None:
                params.append(self.prototypes.radii)
        return params


@dataclass
class DualEncoderModel:
    backbone: BackboneConfig
    semantic: Head
    style: Head | None
    loss_config: LossConfig | None = None
    backbone_params: list[Parameter] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        params = list(self.backbone_params) + self.semantic.parameters()
        if self.style is not None:
            params += self.style.parameters()
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = [p.name for p in params if p.name not in state]
        if missing:
            raise KeyError(f"state is missing parameters: {missing}")
        for p in params:
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {p.name}: expected shape {p.shape}, got {value.shape}")
            p.values[...] = value

    def features(self, x) -> Tensor:
        """Flattened backbone activations for raw trials ``x`` of shape [B, channels, samples]."""
        data = getattr(x, "data", x)
        data = np.asarray(data, dtype=np.float64)
        cfg = self.backbone
        expected = (cfg.n_channels, cfg.n_samples)
        if data.ndim != 3 or data.shape[1:] != expected:
            raise ShapeError(f"input trials: expected [B, {expected[0]}, {expected[1]}], got {data.shape}")
        bp = iter(self.backbone_params)
        h = Tensor(data[:, None, :, :])
        h = _conv_bias(T.conv1d_temporal(h, next(bp)), next(bp))
        h = _conv_bias(T.conv_spatial(h, next(bp)), next(bp))
        h = T.max_pool_time(T.elu(h), cfg.pool_size)
        for _ in range(cfg.n_extra_blocks):
            h = _conv_bias(T.conv1d_temporal(h, next(bp)), next(bp))
            h = T.max_pool_time(T.elu(h), cfg.pool_size)
        return T.reshape(h, (data.shape[0], cfg.flatten_dim))

    def forward(self, x) -> tuple[Tensor, Tensor | None]:
        """Semantic and style embeddings, both computed from one backbone pass."""
        feats = self.features(x)
        style = self.style(feats) if self.style is not None else None
        return self.semantic(feats), style

    __call__ = forward


def _conv_bias(h: Tensor, bias: Parameter) -> Tensor:
    return T.add(h, T.reshape(bias, (1, bias.shape[0], 1, 1)))


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Parameter:
    bound = math.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), name)


def _build_head(prefix: str, cfg: HeadConfig, in_dim: int, rng: np.random.Generator) -> Head:
    weight = _uniform(rng, (in_dim, cfg.embed_dim), in_dim, f"{prefix}.weight")
    bias = _uniform(rng, (cfg.embed_dim,), in_dim, f"{prefix}.bias")
    protos = None
    if cfg.head_kind == "distance_prototype":
        points = Parameter(0.1 * rng.standard_normal((cfg.n_categories, cfg.embed_dim)), f"{prefix}.points")
        radii = None
        if cfg.point_role == "reciprocal_point":
            radii = Parameter(np.ones(cfg.n_categories), f"{prefix}.radii")
        protos = PrototypeSet(points, radii, cfg.point_role)
    return Head(cfg, weight, bias, protos)


def build_model(
    backbone: BackboneConfig,
    semantic: HeadConfig,
    style: HeadConfig | None,
    seed: int,
    loss_config: LossConfig | None = None,
) -> DualEncoderModel:
    """Initialise every parameter from ``seed``; identical seeds give identical models."""
    if loss_config is not None:
        if semantic.loss_kind != loss_config.clf_kind:
            raise ConfigError(f"semantic head is {semantic.loss_kind} but clf_kind is {loss_config.clf_kind}")
        want_style = loss_config.ossr_kind != "NONE"
        if want_style != (style is not None):
            raise ConfigError(f"ossr_kind={loss_config.ossr_kind} but style head is {'present' if style else 'absent'}")
        if style is not None and style.loss_kind != loss_config.ossr_kind:
            raise ConfigError(f"style head is {style.loss_kind} but ossr_kind is {loss_config.ossr_kind}")
    rng = make_rng(seed, "model-init")
    c = backbone
    k = c.temporal_kernel
    params = [
        _uniform(rng, (c.n_temporal_filters, 1, k), k, "backbone.temporal.weight"),
        _uniform(rng, (c.n_temporal_filters,), k, "backbone.temporal.bias"),
    ]
    fan = c.n_temporal_filters * c.n_channels
    params += [
        _uniform(rng, (c.n_spatial_filters, c.n_temporal_filters, c.n_channels), fan, "backbone.spatial.weight"),
        _uniform(rng, (c.n_spatial_filters,), fan, "backbone.spatial.bias"),
    ]
    for i in range(c.n_extra_blocks):
        fan = c.n_spatial_filters * k
        params += [
            _uniform(rng, (c.n_spatial_filters, c.n_spatial_filters, k), fan, f"backbone.block{i + 1}.weight"),
            _uniform(rng, (c.n_spatial_filters,), fan, f"backbone.block{i + 1}.bias"),
        ]
    sem = _build_head("semantic", semantic, c.flatten_dim, rng)
    sty = _build_head("style", style, c.flatten_dim, rng) if style is not None else None
    model = DualEncoderModel(c, sem, sty, loss_config, params)
    with T.no_grad():
        probe = model.features(np.zeros((1, c.n_channels, c.n_samples)))
    if probe.shape[1] != c.flatten_dim:
        raise ConfigError(f"backbone emits {probe.shape[1]} features, config says {c.flatten_dim}")
    return model


def embed(model: DualEncoderModel, x, chunk: int = 512) -> tuple[np.ndarray, np.ndarray | None]:
    """Graph-free embeddings for a whole dataset, evaluated in chunks."""
    data = np.asarray(getattr(x, "data", x))
    sem_parts, sty_parts = [], []
    with T.no_grad():
        for start in range(0, data.shape[0], chunk):
            sem, sty = model.forward(data[start : start + chunk])
            sem_parts.append(sem.values)
            if sty is not None:
                sty_parts.append(sty.values)
    sem = np.concatenate(sem_parts) if sem_parts else np.zeros((0, model.semantic.config.embed_dim))
    sty = np.concatenate(sty_parts) if sty_parts else None
    return sem, sty


def head_predict(head: Head, embeddings: np.ndarray) -> np.ndarray:
    points = head.prototypes.points.values if head.prototypes is not None else None
    return np.argmax(head_scores(head.config.loss_kind, embeddings, points), axis=1)


def predict_class(model: DualEncoderModel, x) -> np.ndarray:
    """Nearest prototype, farthest reciprocal point, or largest logit; ties go to the lowest index."""
    sem, _ = embed(model, x)
    return head_predict(model.semantic, sem)


def subject_scores(
    head: Head, embeddings: np.ndarray, gamma_temp: float = 1.0, score: str = "distance"
) -> tuple[np.ndarray, np.ndarray]:
    """Best category and "unknown-ness" score per embedding (higher = more unknown).

    Prototype heads score by the minimum squared distance (``score="distance"``)
    or by the negated maximum class probability (``score="probability"``).
    Reciprocal-point heads always use the negated maximum probability.
    """
    kind = head.config.loss_kind
    if head.prototypes is None:
        raise UnsupportedConfigurationError(f"subject recognition needs a distance head, style head is {kind}")
    if score not in ("distance", "probability"):
        raise ValueError(f"score must be 'distance' or 'probability', got {score!r}")
    scores = head_scores(kind, embeddings, head.prototypes.points.values)
    best = np.argmax(scores, axis=1)
    if kind == "GCPL" and score == "distance":
        return best, -scores.max(axis=1)
    with T.no_grad():
        probs = softmax(Tensor(gamma_temp * scores)).values
    return best, -probs.max(axis=1)


def recognize_subject(
    model: DualEncoderModel, x, threshold: float, score: str = "distance"
) -> tuple[np.ndarray, np.ndarray]:
    """Source-subject index per trial, or :data:`UNKNOWN` when the score exceeds ``threshold``."""
    if model.style is None:
        raise UnsupportedConfigurationError("model has no style head")
    _, sty = embed(model, x)
    gamma = model.loss_config.gamma_temp if model.loss_config is not None else 1.0
    best, value = subject_scores(model.style, sty, gamma, score)
    return np.where(value > threshold, UNKNOWN, best), value


def class_probabilities(model: DualEncoderModel, x) -> np.ndarray:
    sem, _ = embed(model, x)
    kind = model.semantic.config.loss_kind
    gamma = model.loss_config.gamma_temp if model.loss_config is not None else 1.0
    scores = head_scores(kind, sem, model.semantic.prototypes.points.values if model.semantic.prototypes else None)
    with T.no_grad():
        return softmax(Tensor(scores if kind == "CE" else gamma * scores)).values
