import numpy as np
import pytest

from helpers import tiny_config
from posr.checkpoint import read_checkpoint
from posr.config import config_text, parse_config
from posr.data import make_loso_plan
from posr.errors import DivergenceError
from posr.eval import metrics_csv_text
from posr.train import load_dataset, run_loso, train_fold


def _fold(cfg, i=0):
    batch = load_dataset(cfg)
    return batch, make_loso_plan(batch.subjects(), cfg.loso.eval_session).folds[i]


@pytest.mark.parametrize("clf, ossr", [("CE", "NONE"), ("GCPL", "GCPL"), ("RPL", "RPL"), ("ARPL", "ARPL"), ("CE", "ARPL")])
def test_train_fold_runs(clf, ossr, tmp_path):
    cfg = tiny_config(loss__clf_kind=clf, loss__ossr_kind=ossr)
    batch, fold = _fold(cfg)
    res = train_fold(cfg, batch, fold, tmp_path / "c.posr")
    assert res.record.method == cfg.loss.method_name
    assert len(res.history) == 2 and 0 <= res.best_epoch < 2
    assert (res.record.ossr_auroc is None) == (ossr == "NONE")
    reciprocal = clf in ("RPL", "ARPL")
    assert (res.history[0].clf_open_reg is not None) == reciprocal
    ck = read_checkpoint(tmp_path / "c.posr")
    assert set(ck.params) == set(res.state)
    assert parse_config(ck.config_text) == cfg


def test_train_is_deterministic():
    cfg = tiny_config(loss__clf_kind="GCPL", loss__ossr_kind="GCPL")
    batch, fold = _fold(cfg, 1)
    a, b = train_fold(cfg, batch, fold), train_fold(cfg, batch, fold)
    assert a.record == b.record
    assert all(a.state[k].tobytes() == b.state[k].tobytes() for k in a.state)


def test_echo_reproduces_checkpoint(tmp_path):
    cfg = tiny_config(loss__clf_kind="RPL", loss__ossr_kind="GCPL", train__seed=11)
    batch, fold = _fold(cfg)
    first = train_fold(cfg, batch, fold, tmp_path / "a.posr")
    again = parse_config(config_text(cfg))
    train_fold(again, load_dataset(again), fold, tmp_path / "b.posr")
    assert (tmp_path / "a.posr").read_bytes() == (tmp_path / "b.posr").read_bytes()
    assert first.record.seed == 11


def test_divergence_saves_last_finite_state(tmp_path):
    cfg = tiny_config(loss__clf_kind="GCPL", train__lr=1e150)
    batch, fold = _fold(cfg)
    with pytest.raises(DivergenceError) as info:
        train_fold(cfg, batch, fold, tmp_path / "c.posr")
    assert info.value.epoch == 0
    saved = read_checkpoint(tmp_path / "c.last_finite.posr")
    assert all(np.all(np.isfinite(v)) for v in saved.params.values())


def test_loso_parallel_matches_serial():
    cfg = tiny_config()
    serial = run_loso(cfg, parallel=1)
    parallel = run_loso(cfg, parallel=2)
    assert not serial.failures and len(serial.records) == 3
    assert metrics_csv_text(serial.records) == metrics_csv_text(parallel.records)
    assert [r.fold for r in serial.records] == [0, 1, 2]


def test_loso_records_failures_and_continues():
    cfg = tiny_config(loso__pool=(0, 1, 9))
    res = run_loso(cfg)
    # subject 9 does not exist: every fold mentions it, so all fail without raising
    assert len(res.failures) == 3 and not res.records
    cfg = tiny_config(train__lr=1e150, loss__clf_kind="GCPL")
    res = run_loso(cfg)
    assert set(res.failures) == {0, 1, 2} and all("DivergenceError" in v for v in res.failures.values())
