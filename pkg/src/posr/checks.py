"""Finite-difference verification of every loss, used by ``posr gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from .model import BackboneConfig, HeadConfig, build_model
from .rng import make_rng
from .tensor import GradCheckReport, Parameter, Tensor, grad_check


@dataclass
class CheckCase:
    name: str
    report: GradCheckReport


def _loss_case(kind: str, cfg: L.LossConfig, rng: np.random.Generator, batch: int = 6, dim: int = 3, cats: int = 4):
    embeds = Parameter(rng.uniform(-2, 2, (batch, dim)), "embeds")
    points = Parameter(rng.uniform(-2, 2, (cats, dim)), "points")
    radii = Parameter(rng.uniform(0.5, 3.0, cats), "radii")
    labels = rng.integers(0, cats, batch)
    if kind == "CE":
        logits = Parameter(rng.uniform(-2, 2, (batch, cats)), "logits")
        return (lambda: L.ce_loss(logits, labels)), [logits]
    params = [embeds, points] + ([radii] if kind in L.RECIPROCAL_KINDS else [])
    return (lambda: L.head_loss(kind, embeds, points, radii, labels, cfg)), params


def _hybrid_case(clf: str, ossr: str, rng: np.random.Generator, seed: int):
    cfg = L.LossConfig(clf_kind=clf, ossr_kind=ossr, gamma_reg=0.05)
    backbone = BackboneConfig(n_channels=3, n_samples=24, temporal_kernel=3, n_temporal_filters=2,
                              n_spatial_filters=2, pool_size=2, n_extra_blocks=1)
    n_sub = 3
    model = build_model(
        backbone,
        HeadConfig(2, 2 if clf == "CE" else 3, clf),
        HeadConfig(n_sub, 3, ossr),
        seed=seed,
        loss_config=cfg,
    )
    # spread the points so no softmax saturates and every gradient is well above rounding noise
    for head in (model.semantic, model.style):
        if head.prototypes is not None:
            head.prototypes.points.values[...] = rng.uniform(-1, 1, head.prototypes.points.shape)
            if head.prototypes.radii is not None:
                # small radii keep the ARPL hinge active
                head.prototypes.radii.values[...] = rng.uniform(0.01, 0.2, head.prototypes.radii.shape)
    x = rng.normal(0, 1, (5, 3, 24))
    y = rng.integers(0, 2, 5)
    s = rng.integers(0, n_sub, 5)

    def build() -> Tensor:
        sem, sty = model.forward(x)
        pts = lambda h: (h.prototypes.points, h.prototypes.radii) if h.prototypes else (None, None)
        l_clf = L.head_loss(clf, sem, *pts(model.semantic), y, cfg)
        l_ossr = L.head_loss(ossr, sty, *pts(model.style), s, cfg)
        return L.hybrid_loss(l_clf, l_ossr, cfg.alpha)

    return build, model.parameters()


def default_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Parameter]]]:
    cases = []
    for kind in ("GCPL", "RPL", "ARPL", "CE"):
        for label, cfg in (("defaults", L.LossConfig()), ("strong-reg", L.LossConfig(beta=0.5, gamma_reg=0.5, gamma_temp=0.7))):
            rng = make_rng(seed, "gradcheck", kind, label)
            fn, params = _loss_case(kind, cfg, rng)
            cases.append((f"{kind} ({label})", fn, params))
            if kind == "CE":
                break
    for clf, ossr in (("CE", "GCPL"), ("GCPL", "GCPL"), ("RPL", "RPL"), ("ARPL", "ARPL")):
        rng = make_rng(seed, "gradcheck-hybrid", clf, ossr)
        fn, params = _hybrid_case(clf, ossr, rng, seed)
        cases.append((f"hybrid {clf}_clf+{ossr}_ossr", fn, params))
    return cases


def run_gradcheck_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> list[CheckCase]:
    return [CheckCase(name, grad_check(fn, params, h=h, tol=tol)) for name, fn, params in default_cases(seed)]


def format_gradcheck(cases: list[CheckCase]) -> str:
    lines = []
    for case in cases:
        status = "PASS" if case.report.passed else "FAIL"
        detail = ", ".join(f"{k}={v:.2e}" for k, v in case.report.max_rel_error.items() if not k.startswith("backbone"))
        lines.append(f"{status}  {case.name:<32} max_rel_err={case.report.worst:.2e}  [{detail}]")
        if case.report.failures:
            lines.append(f"      failing: {', '.join(case.report.failures)}")
    n_fail = sum(not c.report.passed for c in cases)
    lines.append(f"{len(cases) - n_fail}/{len(cases)} gradient checks passed")
    return "\n".join(lines) + "\n"
