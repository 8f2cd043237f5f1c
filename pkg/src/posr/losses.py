"""Distance-based probabilities and losses for prototype and reciprocal-point heads.

All batch losses reduce with the arithmetic mean. Distances are squared
Euclidean throughout, including the Euclidean part of the ARPL distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelError, ShapeError
from .tensor import Tensor

CLF_KINDS = ("CE", "GCPL", "RPL", "ARPL")
OSSR_KINDS = ("NONE", "GCPL", "RPL", "ARPL")
RECIPROCAL_KINDS = ("RPL", "ARPL")


@dataclass
class LossConfig:
    """Loss selection and weights for both heads.

    ``gamma_temp`` is the softmax temperature shared by every distance
    softmax; ``gamma_reg`` weights the open-space regularizer of RPL/ARPL.
    """

    clf_kind: str = "CE"
    ossr_kind: str = "NONE"
    gamma_temp: float = 1.0
    beta: float = 0.001
    gamma_reg: float = 0.001
    alpha: float = 0.1

    def __post_init__(self):
        self.clf_kind = str(self.clf_kind).upper()
        self.ossr_kind = str(self.ossr_kind).upper()
        if self.clf_kind not in CLF_KINDS:
            raise ConfigError(f"clf_kind must be one of {CLF_KINDS}, got {self.clf_kind!r}")
        if self.ossr_kind not in OSSR_KINDS:
            raise ConfigError(f"ossr_kind must be one of {OSSR_KINDS}, got {self.ossr_kind!r}")
        if not self.gamma_temp > 0:
            raise ConfigError(f"gamma_temp must be positive, got {self.gamma_temp}")
        for name in ("beta", "gamma_reg", "alpha"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")

    @property
    def method_name(self) -> str:
        if self.ossr_kind == "NONE":
            return f"{self.clf_kind}_clf"
        return f"{self.clf_kind}_clf+{self.ossr_kind}_ossr"


def _check_pair(op: str, embeds: Tensor, points: Tensor) -> None:
    if embeds.ndim != 2 or points.ndim != 2 or embeds.shape[1] != points.shape[1]:
        raise ShapeError(f"{op}: embeddings {embeds.shape} and points {points.shape} disagree")


def one_hot(labels, n_categories: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be a 1-D integer array, got {labels.dtype} {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_categories):
        raise LabelError(f"labels must lie in [0, {n_categories}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, n_categories))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _pick(mat: Tensor, labels) -> Tensor:
    """Row-wise entry at each label, as a length-B tensor."""
    mask = one_hot(labels, mat.shape[1])
    if mask.shape[0] != mat.shape[0]:
        raise LabelError(f"{mask.shape[0]} labels for {mat.shape[0]} rows")
    return T.sum_(T.multiply(mat, mask), axis=1)


def _own(points: Tensor, labels) -> Tensor:
    return T.matmul(Tensor(one_hot(labels, points.shape[0])), points)


def _log_softmax(logits: Tensor) -> Tensor:
    shift = Tensor(logits.values.max(axis=1, keepdims=True))
    z = T.subtract(logits, shift)
    return T.subtract(z, T.log(T.sum_(T.exp(z), axis=1, keepdims=True)))


def softmax(logits: Tensor) -> Tensor:
    return T.exp(_log_softmax(logits))


def _nll(logits: Tensor, labels) -> Tensor:
    return T.negate(T.mean(_pick(_log_softmax(logits), labels)))


# ---------------------------------------------------------------- GCPL


def sq_euclidean(embeds: Tensor, points: Tensor) -> Tensor:
    """[B, d] x [C, d] -> [B, C] squared Euclidean distances."""
    _check_pair("sq_euclidean", embeds, points)
    (b, d), c = embeds.shape, points.shape[0]
    diff = T.subtract(T.reshape(embeds, (b, 1, d)), T.reshape(points, (1, c, d)))
    return T.sum_(T.square(diff), axis=2)


def gcpl_probs(dists: Tensor, gamma_temp: float = 1.0) -> Tensor:
    return softmax(T.scale(dists, -gamma_temp))


def dce_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    return T.negate(T.mean(T.log(_pick(probs, labels))))


def prototype_loss(embeds: Tensor, points: Tensor, labels) -> Tensor:
    _check_pair("prototype_loss", embeds, points)
    diff = T.subtract(embeds, _own(points, labels))
    return T.mean(T.sum_(T.square(diff), axis=1))


def gcpl_loss(embeds: Tensor, points: Tensor, labels, cfg: LossConfig) -> Tensor:
    # DCE is evaluated from log-probabilities directly so that a saturated
    # softmax cannot underflow to log(0).
    dce = _nll(T.scale(sq_euclidean(embeds, points), -cfg.gamma_temp), labels)
    if cfg.beta == 0:
        return dce
    return T.add(dce, T.scale(prototype_loss(embeds, points, labels), cfg.beta))


# ---------------------------------------------------------------- RPL


def rpl_probs(dists: Tensor, gamma_temp: float = 1.0) -> Tensor:
    """Reciprocal-point probabilities: far from a class's point means likely that class."""
    return softmax(T.scale(dists, gamma_temp))


def rpl_ce(probs: Tensor, labels) -> Tensor:
    return dce_loss(probs, labels)


def _own_radius(radii: Tensor | None, labels, op: str) -> Tensor:
    if radii is None:
        raise ConfigError(f"{op} requires learnable radii")
    c = radii.shape[0]
    return T.reshape(T.matmul(Tensor(one_hot(labels, c)), T.reshape(radii, (c, 1))), (len(labels),))


def rpl_open_reg(embeds: Tensor, points: Tensor, radii: Tensor | None, labels) -> Tensor:
    """Mean squared gap between own-class distance and that class's radius."""
    r = _own_radius(radii, labels, "rpl_open_reg")
    d = _pick(sq_euclidean(embeds, points), labels)
    return T.mean(T.square(T.subtract(d, r)))


def rpl_loss(embeds: Tensor, points: Tensor, radii: Tensor | None, labels, cfg: LossConfig) -> Tensor:
    ce = _nll(T.scale(sq_euclidean(embeds, points), cfg.gamma_temp), labels)
    if cfg.gamma_reg == 0:
        return ce
    return T.add(ce, T.scale(rpl_open_reg(embeds, points, radii, labels), cfg.gamma_reg))


# ---------------------------------------------------------------- ARPL


def arpl_distance(embeds: Tensor, points: Tensor) -> Tensor:
    """Squared Euclidean distance minus dot product; may be negative."""
    _check_pair("arpl_distance", embeds, points)
    return T.subtract(sq_euclidean(embeds, points), T.matmul(embeds, T.transpose(points)))


def arpl_probs(d: Tensor, gamma_temp: float = 1.0) -> Tensor:
    return softmax(T.scale(d, gamma_temp))


def arpl_open_reg(embeds: Tensor, points: Tensor, radii: Tensor | None, labels) -> Tensor:
    r = _own_radius(radii, labels, "arpl_open_reg")
    d = _pick(sq_euclidean(embeds, points), labels)
    return T.mean(T.maximum_scalar(T.subtract(d, r), 0.0))


def arpl_loss(embeds: Tensor, points: Tensor, radii: Tensor | None, labels, cfg: LossConfig) -> Tensor:
    ce = _nll(T.scale(arpl_distance(embeds, points), cfg.gamma_temp), labels)
    if cfg.gamma_reg == 0:
        return ce
    return T.add(ce, T.scale(arpl_open_reg(embeds, points, radii, labels), cfg.gamma_reg))


# ---------------------------------------------------------------- plain CE and hybrid


def ce_loss(logits: Tensor, labels) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"ce_loss: logits must be [B, C], got {logits.shape}")
    return _nll(logits, labels)


def hybrid_loss(l_clf: Tensor, l_ossr: Tensor | None, alpha: float) -> Tensor:
    """Classification loss plus ``alpha`` times the subject-recognition loss."""
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    if l_ossr is None:
        return l_clf
    return T.add(l_clf, T.scale(l_ossr, alpha))


# ---------------------------------------------------------------- head dispatch


def head_loss(kind: str, embeds: Tensor, points: Tensor | None, radii: Tensor | None, labels, cfg: LossConfig) -> Tensor:
    if kind == "CE":
        return ce_loss(embeds, labels)
    if points is None:
        raise ConfigError(f"{kind} head needs a point set")
    if kind == "GCPL":
        return gcpl_loss(embeds, points, labels, cfg)
    if kind == "RPL":
        return rpl_loss(embeds, points, radii, labels, cfg)
    if kind == "ARPL":
        return arpl_loss(embeds, points, radii, labels, cfg)
    raise ConfigError(f"unknown loss kind {kind!r}")


def head_open_reg(kind: str, embeds: Tensor, points: Tensor, radii: Tensor, labels) -> Tensor | None:
    """The unweighted open-space term of a reciprocal head, else ``None``."""
    if kind == "RPL":
        return rpl_open_reg(embeds, points, radii, labels)
    if kind == "ARPL":
        return arpl_open_reg(embeds, points, radii, labels)
    return None


def head_scores(kind: str, embeds: np.ndarray, points: np.ndarray | None) -> np.ndarray:
    """Pre-temperature logits whose row argmax is the predicted category."""
    if kind == "CE":
        return np.asarray(embeds)
    e, p = Tensor(embeds), Tensor(points)
    with T.no_grad():
        if kind == "GCPL":
            return -sq_euclidean(e, p).values
        if kind == "RPL":
            return sq_euclidean(e, p).values.copy()
        if kind == "ARPL":
            return arpl_distance(e, p).values.copy()
    raise ConfigError(f"unknown loss kind {kind!r}")
