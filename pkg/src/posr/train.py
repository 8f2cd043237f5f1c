"""Single-fold training with the hybrid loss, and the leave-one-subject-out runner."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import write_checkpoint
from .config import RunConfig, config_text
from .data import EpochBatch, Fold, downsample, generate_synthetic, make_loso_plan, read_epochs, split_indices
from .errors import DivergenceError
from .eval import MetricsRecord, accuracy, auroc
from .losses import RECIPROCAL_KINDS, head_loss, head_open_reg, hybrid_loss
from .model import DualEncoderModel, build_model, embed, head_predict, subject_scores
from .optim import AdamState, CosineSchedule, adam_step
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    val_accuracy: float
    clf_open_reg: float | None = None
    ossr_open_reg: float | None = None


@dataclass
class FoldResult:
    record: MetricsRecord
    train_accuracy: float
    val_accuracy: float
    best_epoch: int
    history: list[EpochLog] = field(default_factory=list)
    state: dict[str, np.ndarray] = field(default_factory=dict)
    # AUROC when prototype style heads score by the negated max probability
    ossr_auroc_probability: float | None = None


def load_dataset(cfg: RunConfig) -> EpochBatch:
    batch = read_epochs(cfg.data.path) if cfg.data.path else generate_synthetic(cfg.synth)
    if cfg.data.downsample > 1:
        batch = downsample(batch, cfg.data.downsample)
    return batch


def _derived_seed(seed: int, *stream) -> int:
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))


def fold_model(cfg: RunConfig, batch: EpochBatch, fold: Fold) -> DualEncoderModel:
    n_classes = max(2, int(batch.class_labels.max()) + 1)
    return build_model(
        cfg.arch.backbone(batch.n_channels, batch.n_samples),
        cfg.arch.semantic_head(n_classes, cfg.loss),
        cfg.arch.style_head(len(fold.sources), cfg.loss),
        seed=_derived_seed(cfg.train.seed, "model", fold.index),
        loss_config=cfg.loss,
    )


def _head_points(head):
    if head.prototypes is None:
        return None, None
    return head.prototypes.points, head.prototypes.radii


def _open_reg_means(model: DualEncoderModel, data: EpochBatch, style_labels: np.ndarray) -> tuple[float | None, float | None]:
    sem, sty = embed(model, data)
    out = []
    with T.no_grad():
        for head, emb, labels in ((model.semantic, sem, data.class_labels), (model.style, sty, style_labels)):
            if head is None or head.prototypes is None:
                out.append(None)
                continue
            reg = head_open_reg(head.config.loss_kind, Tensor(emb), *_head_points(head), labels)
            out.append(None if reg is None else reg.item())
    return out[0], out[1]


def train_fold(
    cfg: RunConfig,
    batch: EpochBatch,
    fold: Fold,
    checkpoint_path: str | Path | None = None,
) -> FoldResult:
    """Train one fold and evaluate it on the target subject's evaluation session.

    Each epoch visits the training trials in a seeded random order, minimises
    ``L_clf + alpha * L_ossr`` with Adam, and uses a cosine-annealed rate fixed
    for the whole epoch. The parameters with the best validation accuracy
    (latest epoch on ties) are kept.
    """
    split = split_indices(batch, fold, cfg.loso.train_fraction, cfg.train.seed)
    train, val, test = batch.subset(split.train), batch.subset(split.val), batch.subset(split.test)
    to_source = np.vectorize(split.source_index.__getitem__, otypes=[np.int64])
    train_style = to_source(train.subject_ids)

    model = fold_model(cfg, batch, fold)
    params = model.parameters()
    tc = cfg.train
    state = AdamState(tc.beta1, tc.beta2, tc.eps)
    schedule = CosineSchedule(tc.epochs, tc.lr, tc.lr_min)
    echo = config_text(cfg)
    track_reg = any(k in RECIPROCAL_KINDS for k in (cfg.loss.clf_kind, cfg.loss.ossr_kind))

    best_acc, best_epoch, best_state = -1.0, -1, model.state_dict()
    history: list[EpochLog] = []

    def diverged(epoch: int, step: int, what: str, last_finite: dict[str, np.ndarray]) -> DivergenceError:
        if checkpoint_path is not None:
            write_checkpoint(Path(checkpoint_path).with_suffix(".last_finite.posr"), last_finite, echo)
        return DivergenceError(f"fold {fold.index}: {what} at epoch {epoch} step {step}", epoch, step)

    for epoch in range(tc.epochs):
        lr = schedule(epoch)
        order = make_rng(tc.seed, "shuffle", fold.index, epoch).permutation(train.n_trials)
        losses = []
        for step, start in enumerate(range(0, order.size, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            with np.errstate(all="ignore"):
                sem, sty = model.forward(train.data[idx])
                if not (np.all(np.isfinite(sem.values)) and (sty is None or np.all(np.isfinite(sty.values)))):
                    raise diverged(epoch, step, "non-finite embeddings", model.state_dict())
                l_clf = head_loss(cfg.loss.clf_kind, sem, *_head_points(model.semantic), train.class_labels[idx], cfg.loss)
                l_ossr = None
                if model.style is not None:
                    l_ossr = head_loss(cfg.loss.ossr_kind, sty, *_head_points(model.style), train_style[idx], cfg.loss)
                loss = hybrid_loss(l_clf, l_ossr, cfg.loss.alpha)
                value = loss.item()
                if not math.isfinite(value):
                    raise diverged(epoch, step, "non-finite loss", model.state_dict())
                grads = T.backward(loss, params)
            snapshot = model.state_dict()
            adam_step(params, grads, state, lr)
            if not all(np.all(np.isfinite(p.values)) for p in params):
                raise diverged(epoch, step, "non-finite parameters after the update", snapshot)
            losses.append(value)
        val_acc = accuracy(head_predict(model.semantic, embed(model, val)[0]), val.class_labels)
        clf_reg, ossr_reg = _open_reg_means(model, train, train_style) if track_reg else (None, None)
        history.append(EpochLog(epoch, lr, float(np.mean(losses)), val_acc, clf_reg, ossr_reg))
        log.debug("fold %d epoch %d lr %.5f loss %.4f val %.3f", fold.index, epoch, lr, history[-1].loss, val_acc)
        if val_acc >= best_acc:
            best_acc, best_epoch, best_state = val_acc, epoch, model.state_dict()

    model.load_state_dict(best_state)
    train_acc = accuracy(head_predict(model.semantic, embed(model, train)[0]), train.class_labels)
    sem_test, sty_test = embed(model, test)
    test_acc = accuracy(head_predict(model.semantic, sem_test), test.class_labels)
    ossr_auroc = ossr_auroc_probability = None
    if model.style is not None and model.style.prototypes is not None:
        # known = source-subject validation trials, unknown = the held-out target,
        # both scored exactly as recognize_subject scores them
        _, sty_val = embed(model, val)
        gamma = cfg.loss.gamma_temp
        ossr_auroc = auroc(
            subject_scores(model.style, sty_val, gamma)[1],
            subject_scores(model.style, sty_test, gamma)[1],
        )
        if model.style.config.loss_kind == "GCPL":
            ossr_auroc_probability = auroc(
                subject_scores(model.style, sty_val, gamma, "probability")[1],
                subject_scores(model.style, sty_test, gamma, "probability")[1],
            )
    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, best_state, echo)
    record = MetricsRecord(
        run_id=cfg.loso.run_id,
        fold=fold.index,
        target_subject=fold.target,
        method=cfg.loss.method_name,
        accuracy=test_acc,
        ossr_auroc=ossr_auroc,
        seed=tc.seed,
        epochs=tc.epochs,
    )
    return FoldResult(record, train_acc, best_acc, best_epoch, history, best_state, ossr_auroc_probability)


# ---------------------------------------------------------------- LOSO


@dataclass
class LosoResult:
    results: list[FoldResult]
    failures: dict[int, str]

    @property
    def records(self) -> list[MetricsRecord]:
        return [r.record for r in self.results]


def _run_fold(args) -> tuple[int, FoldResult | None, str | None]:
    cfg, batch, fold, ckpt = args
    try:
        return fold.index, train_fold(cfg, batch, fold, ckpt), None
    except Exception as exc:  # one fold failing must not sink the run
        log.error("fold %d failed: %s", fold.index, exc)
        return fold.index, None, f"{type(exc).__name__}: {exc}"


def run_loso(
    cfg: RunConfig,
    batch: EpochBatch | None = None,
    parallel: int = 1,
    checkpoint_dir: str | Path | None = None,
) -> LosoResult:
    """Train every fold of the plan; results come back in fold order regardless of ``parallel``."""
    if batch is None:
        batch = load_dataset(cfg)
    pool = cfg.loso.pool or tuple(batch.subjects())
    plan = make_loso_plan(pool, cfg.loso.eval_session, cfg.train.seed, cfg.loso.run_id, cfg.loso.train_fraction)
    jobs = []
    for fold in plan.folds:
        ckpt = None if checkpoint_dir is None else Path(checkpoint_dir) / f"fold{fold.index:02d}.posr"
        jobs.append((cfg, batch, fold, ckpt))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            outcomes = list(ex.map(_run_fold, jobs))
    else:
        outcomes = [_run_fold(j) for j in jobs]
    outcomes.sort(key=lambda o: o[0])
    results = [r for _, r, _ in outcomes if r is not None]
    failures = {i: err for i, _, err in outcomes if err is not None}
    return LosoResult(results, failures)
