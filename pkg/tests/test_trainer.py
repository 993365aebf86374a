import copy
import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hybridseg import checkpoint as ck
from hybridseg.blocks import ParameterError
from hybridseg.config import NetConfig, OptimizerConfig, ScheduleConfig
from hybridseg.data import DataError
from hybridseg.losses import NumericError
from hybridseg.optim import MomentumSGD, lr_at, poly_schedule, sgd_step
from hybridseg.semisup import StateError
from hybridseg import trainer

from conftest import make_small_cfg


OC = OptimizerConfig()
SC = ScheduleConfig(warmup_steps=10, total_steps=110, poly_power=0.9)


def test_lr_schedule_values():
    assert lr_at(0, OC, SC) == 0.0
    assert lr_at(5, OC, SC) == pytest.approx(0.005)
    assert lr_at(10, OC, SC) == pytest.approx(0.01)
    assert lr_at(110, OC, SC) == 0.0
    assert lr_at(60, OC, SC) == pytest.approx(0.01 * 0.5 ** 0.9)
    with pytest.raises(ParameterError):
        lr_at(111, OC, SC)
    with pytest.raises(ParameterError):
        lr_at(-1, OC, SC)


def test_lr_continuous_at_junction():
    left = OC.lr0 * (SC.warmup_steps - 1e-9) / SC.warmup_steps
    assert left == pytest.approx(lr_at(SC.warmup_steps, OC, SC), abs=1e-9)


def test_lr_shape():
    values = [lr_at(s, OC, SC) for s in range(SC.total_steps + 1)]
    assert all(a < b for a, b in zip(values[:10], values[1:11]))
    assert all(a > b for a, b in zip(values[10:-1], values[11:]))


def test_poly_schedule_short_runs():
    sc = poly_schedule(3, 10, 0.9)
    assert sc.warmup_steps == 2 and sc.total_steps == 3
    assert lr_at(2, OC, sc) == pytest.approx(OC.lr0)


def _scalar(value):
    return torch.tensor([value], dtype=torch.float64)


def test_sgd_null_step():
    p, buf = _scalar(0.7), _scalar(0.0)
    sgd_step([p], [_scalar(0.0)], [buf], 0.1, OptimizerConfig(weight_decay=0.0))
    assert p.item() == 0.7


def test_sgd_momentum_arithmetic():
    oc = OptimizerConfig(weight_decay=0.0, momentum=0.9)
    p, buf = _scalar(1.0), _scalar(0.0)
    sgd_step([p], [_scalar(1.0)], [buf], 0.1, oc)
    assert p.item() == pytest.approx(0.9)
    sgd_step([p], [_scalar(1.0)], [buf], 0.1, oc)
    assert 0.9 - p.item() == pytest.approx(0.1 * 1.9)


def test_sgd_weight_decay_shrinks():
    oc = OptimizerConfig(weight_decay=0.1)
    p, buf = torch.tensor([2.0, -3.0], dtype=torch.float64), torch.zeros(2, dtype=torch.float64)
    before = p.abs().clone()
    sgd_step([p], [torch.zeros(2, dtype=torch.float64)], [buf], 0.1, oc)
    assert (p.abs() < before).all()


def test_sgd_rejects_non_finite():
    with pytest.raises(NumericError, match="w"):
        sgd_step([_scalar(1.0)], [_scalar(float("nan"))], [_scalar(0.0)], 0.1, OC, names=["w"])


def test_weight_decay_mask(small_cfg):
    model = trainer.build_model(small_cfg.net)
    opt = MomentumSGD(model, small_cfg.optim)
    mask = dict(zip(opt.names, opt.decay_mask))
    assert not any(v for n, v in mask.items() if n.endswith(".bias"))
    assert not mask["stem.0.body.1.weight"]      # BatchNorm scale
    assert mask["stem.0.body.0.weight"]          # conv kernel


def test_kfold_sizes():
    assert [len(f) for f in trainer.kfold_split(785).folds] == [157] * 5
    assert sorted(len(f) for f in trainer.kfold_split(12).folds) == [2, 2, 2, 3, 3]
    assert trainer.kfold_split(12, seed=4).folds == trainer.kfold_split(12, seed=4).folds
    with pytest.raises(ParameterError):
        trainer.kfold_split(4)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(5, 200), seed=st.integers(0, 100))
def test_kfold_partition(n, seed):
    plan = trainer.kfold_split(n, seed)
    flat = [i for f in plan.folds for i in f]
    assert sorted(flat) == list(range(n))
    train, val = plan.split(seed % 5)
    assert set(train).isdisjoint(val) and len(train) + len(val) == n


def test_train_history_and_determinism(small_cfg, train32):
    log_a, log_b = trainer.TrainLog(io.StringIO()), trainer.TrainLog()
    best_a, hist_a, _ = trainer.train_supervised(train32, train32, small_cfg, epochs=3, train_log=log_a)
    best_b, hist_b, _ = trainer.train_supervised(train32, train32, small_cfg, epochs=3, train_log=log_b)
    assert len(hist_a) == 3
    assert hist_a.epochs == hist_b.epochs
    assert log_a.lines == log_b.lines
    step_lines = [l for l in log_a.lines if len(l.split("\t")) == 8]
    epoch_lines = [l for l in log_a.lines if len(l.split("\t")) == 5]
    assert len(step_lines) == 6 and len(epoch_lines) == 3
    assert log_a.stream.getvalue().splitlines() == log_a.lines
    assert best_a.best_val_dsc == max(hist_a.column("val_dsc"))


def test_train_rejects_empty(small_cfg, train32):
    with pytest.raises(DataError):
        trainer.train_supervised(train32.subset([]), train32, small_cfg, epochs=1)


@pytest.fixture(scope="module")
def supervised_ckpt(train32):
    cfg = make_small_cfg()
    best, _, _ = trainer.train_supervised(train32, train32, cfg, epochs=2)
    return cfg, best


def test_finetune_teacher_starts_at_student(supervised_ckpt, train32):
    cfg, best = supervised_ckpt
    _, _, state = trainer.finetune_semisup(best, train32, train32, train32, cfg, epochs=0)
    for (_, t), (_, s) in zip(state.teacher.state_dict().items(), state.student.state_dict().items()):
        assert torch.equal(t, s)


def test_finetune_config_mismatch(supervised_ckpt, train32):
    cfg, best = supervised_ckpt
    other = copy.deepcopy(cfg)
    other.net = NetConfig(input_size=32, stem_channels=(4, 4, 8), patch=2, embed_dim=32,
                          stage_heads=(2, 2), window=2, se_reduction=4)
    with pytest.raises(StateError):
        trainer.finetune_semisup(best, train32, train32, train32, other, epochs=1)


def test_finetune_zero_weights_equals_continued_supervised(supervised_ckpt, train32):
    cfg, best = supervised_ckpt
    cfg = trainer.ablation_config(cfg, "s")
    _, _, semi = trainer.finetune_semisup(best, train32, train32, train32, cfg, epochs=2)
    _, _, sup = trainer.continue_supervised(best, train32, train32, cfg, epochs=2)
    for (name, a), b in zip(semi.student.state_dict().items(), sup.student.state_dict().values()):
        if a.is_floating_point():
            assert torch.allclose(a, b, atol=1e-6, rtol=0), name


def test_finetune_logs_finite_breakdown(supervised_ckpt, train32):
    cfg, best = supervised_ckpt
    log = trainer.TrainLog()
    tuned, hist, state = trainer.finetune_semisup(best, train32, train32, train32, cfg, epochs=1,
                                                  train_log=log)
    steps = [l.split("\t") for l in log.lines if len(l.split("\t")) == 8]
    assert len(steps) == 2 and state.semi_step == 2
    assert all(np.isfinite(float(v)) for row in steps for v in row[3:])
    assert set(state.pseudo.labels) == set(train32.ids)


def test_ablation_config():
    from hybridseg.config import ExperimentConfig
    cfg = trainer.ablation_config(ExperimentConfig(), "s,m")
    assert (cfg.losses.w_c, cfg.losses.w_m, cfg.losses.w_f) == (0.0, 0.4, 0.0)
    with pytest.raises(ParameterError):
        trainer.ablation_config(ExperimentConfig(), "c,m")
    with pytest.raises(ParameterError):
        trainer.ablation_config(ExperimentConfig(), "s,x")


def test_checkpoint_round_trip(supervised_ckpt, train32, tmp_path):
    cfg, best = supervised_ckpt
    # add a pseudo label and momentum so every section is exercised
    best = copy.deepcopy(best)
    best.pseudo.refine("img0003", torch.rand(2, 32, 32))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ck.save_checkpoint(best, a)
    loaded = ck.load_checkpoint(a)
    ck.save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.rng_state == best.rng_state and loaded.step == best.step
    assert torch.equal(loaded.pseudo.labels["img0003"], best.pseudo.labels["img0003"])
    x = train32.images[:2]
    before = trainer.predict(trainer.model_from_checkpoint(best), x)
    after = trainer.predict(trainer.model_from_checkpoint(loaded), x)
    assert torch.equal(before, after)
    dsc = lambda c: trainer.metrics.mean_metrics(
        trainer.evaluate_model(trainer.model_from_checkpoint(c), train32)).dsc
    assert dsc(best) == dsc(loaded)


def test_restore_state_resumes_identically(small_cfg, train32):
    """A run interrupted at a checkpoint and resumed matches the uninterrupted run."""
    state = trainer.TrainState.create(trainer.build_model(small_cfg.net), small_cfg)
    rng = np.random.default_rng(0)
    x, y = train32.images[:4], trainer.one_hot(train32.masks[:4])
    trainer.supervised_step(state, x, y, small_cfg, 0.01)
    ckpt = ck.decode(ck.encode(trainer.snapshot(state, small_cfg, rng)))
    resumed, _ = trainer.restore_state(ckpt, small_cfg)
    trainer.supervised_step(state, x, y, small_cfg, 0.01)
    trainer.supervised_step(resumed, x, y, small_cfg, 0.01)
    for a, b in zip(state.student.state_dict().values(), resumed.student.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_format_errors(supervised_ckpt, tmp_path):
    _, best = supervised_ckpt
    blob = ck.encode(best)
    bad_version = blob[:8] + (ck.VERSION + 1).to_bytes(4, "little") + blob[12:]
    with pytest.raises(ck.FormatError, match="version"):
        ck.decode(bad_version)
    with pytest.raises(ck.FormatError, match="header"):
        ck.decode(b"NOTACKPT" + blob[8:])
    with pytest.raises(ck.FormatError, match="header"):
        ck.decode(blob[:10])
    with pytest.raises(ck.FormatError, match="payload"):
        ck.decode(blob[:-100])
    meta_len = int.from_bytes(blob[12:16], "little")
    garbled = blob[:16] + b"{" * meta_len + blob[16 + meta_len:]
    with pytest.raises(ck.FormatError, match="metadata"):
        ck.decode(garbled)
    with pytest.raises(ck.FormatError):
        ck.load_checkpoint(tmp_path / "missing.ckpt")


def test_cross_validate_folds(small_cfg, train32):
    small_cfg.train.n_folds = 4
    per_fold = trainer.cross_validate(train32, small_cfg, epochs=1)
    assert list(per_fold) == ["fold0", "fold1", "fold2", "fold3"]
    assert sum(len(v) for v in per_fold.values()) == len(train32)
