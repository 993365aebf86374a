import copy

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from hybridseg import augment, semisup
from hybridseg.blocks import ParameterError
from hybridseg.config import AugmentationSpec, ExperimentConfig, tiny_config
from hybridseg.network import build_model


class Toy(nn.Module):
    """Two scalar parameters: fg probability = sigmoid(a*x + b) per pixel."""

    def __init__(self, a=0.5, b=-0.2):
        super().__init__()
        self.a = nn.Parameter(torch.tensor([[a]]))
        self.b = nn.Parameter(torch.tensor([b]))

    def forward(self, x):
        fg = torch.sigmoid(self.a[0, 0] * x[:, 0] + self.b[0])
        return torch.stack([1 - fg, fg], dim=1)


def test_update_teacher_arithmetic():
    teacher, student = Toy(0.0, 0.0), Toy(1.0, 1.0)
    semisup.update_teacher(teacher, student, 0.99)
    assert teacher.a.item() == pytest.approx(0.01, abs=1e-7)
    assert teacher.b.item() == pytest.approx(0.01, abs=1e-7)


def test_update_teacher_fixed_point():
    student = build_model(tiny_config())
    teacher = semisup.make_teacher(student)
    semisup.update_teacher(teacher, student, 0.99)
    for (_, t), (_, s) in zip(teacher.state_dict().items(), student.state_dict().items()):
        assert torch.allclose(t, s, atol=1e-6, rtol=0)
    assert all(not p.requires_grad for p in teacher.parameters())


@settings(max_examples=20, deadline=None)
@given(decay=st.floats(0.5, 0.999), n=st.integers(1, 50), start=st.floats(-3, 3))
def test_update_teacher_geometric(decay, n, start):
    teacher, student = Toy(start, start), Toy(1.0, 1.0)
    for _ in range(n):
        semisup.update_teacher(teacher, student, decay)
    expected = 1.0 + (start - 1.0) * decay ** n
    assert teacher.a.item() == pytest.approx(expected, abs=1e-5)


def test_update_teacher_name_mismatch():
    with pytest.raises(semisup.StateError):
        semisup.update_teacher(Toy(), nn.Linear(1, 1), 0.9)


def test_teacher_decay_ramp():
    assert semisup.teacher_decay_at(0) == pytest.approx(0.9)
    assert semisup.teacher_decay_at(50) == pytest.approx(0.945)
    assert semisup.teacher_decay_at(1000) == pytest.approx(0.99)
    assert semisup.teacher_decay_at(5, ramp=0) == 0.99


def test_weak_augment_identity_parameters(rng):
    spec = AugmentationSpec(dropout_range=(0.0, 0.0), noise_std=0.0)
    x = torch.rand(2, 1, 8, 8)
    views = augment.weak_augment(x, spec, rng, k=2)
    assert len(views) == 2
    assert all(torch.equal(v, x) for v in views)


def test_weak_augment_deterministic_and_ranged():
    x = torch.rand(3, 1, 16, 16)
    a = augment.weak_augment(x, AugmentationSpec(), np.random.default_rng(5))
    b = augment.weak_augment(x, AugmentationSpec(), np.random.default_rng(5))
    for va, vb in zip(a, b):
        assert torch.equal(va, vb)
        assert va.shape == x.shape and va.min() >= 0 and va.max() <= 1


@pytest.mark.parametrize("rate", [0.02, 0.10])
def test_dropout_rate_monte_carlo(rate):
    spec = AugmentationSpec(dropout_range=(rate, rate))
    x = torch.ones(16, 1, 256, 256)   # ~10^6 pixels
    view = augment.weak_augment(x, spec, np.random.default_rng(0), k=1)[0]
    assert abs(float((view == 0).float().mean()) - rate) < 0.02


def test_strong_augment_frequencies():
    rng = np.random.default_rng(0)
    counts = np.zeros(len(augment.STRONG_NAMES))
    # draw ids exactly as strong_augment does, without paying for 10^4 transforms
    for _ in range(10_000):
        counts[int(rng.integers(len(augment.STRONG_NAMES)))] += 1
    assert np.all(np.abs(counts / 10_000 - 0.125) < 0.01)
    x = torch.rand(2, 1, 8, 8)
    seen = set()
    for seed in range(40):
        out, tid = augment.strong_augment(x, AugmentationSpec(), np.random.default_rng(seed))
        seen.add(tid)
        assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    assert seen == set(range(8))


def test_all_strong_transforms_shape(rng):
    x = torch.rand(2, 1, 8, 8)
    for tid in range(8):
        out = augment.apply_strong(x, tid, AugmentationSpec(), rng)
        assert out.shape == x.shape and out.dtype == x.dtype
    with pytest.raises(ValueError):
        augment.apply_strong(x, 8, AugmentationSpec(), rng)


def test_gamma_identity():
    x = torch.rand(2, 1, 8, 8)
    assert torch.allclose(augment.gamma(x, 1.0), x)


def test_guess_labels_value():
    p_u = torch.full((1, 1, 1, 1), 0.9)
    views = [torch.full((1, 1, 1, 1), 0.7), torch.full((1, 1, 1, 1), 0.5)]
    assert semisup.guess_labels(p_u, views).item() == pytest.approx(0.7)


def test_sharpen_values():
    p = torch.tensor([0.8, 0.2]).view(1, 2, 1, 1)
    assert semisup.sharpen(p, 0.5).flatten().tolist() == pytest.approx([0.9412, 0.0588], abs=1e-4)
    assert torch.allclose(semisup.sharpen(p, 1.0), p)
    with pytest.raises(ParameterError):
        semisup.sharpen(p, 0.0)


@settings(max_examples=40, deadline=None)
@given(fg=st.floats(0.01, 0.99), T=st.floats(0.1, 0.99))
def test_sharpen_properties(fg, T):
    p = torch.tensor([1 - fg, fg], dtype=torch.float64).view(1, 2, 1, 1)
    out = semisup.sharpen(p, T)
    assert out.sum().item() == pytest.approx(1.0)
    if abs(fg - 0.5) > 1e-6:
        assert out.argmax() == p.argmax()
        assert out.max() > p.max()


def test_pseudo_label_refinement():
    store = semisup.PseudoLabelStore(ema_alpha=0.9)
    first = torch.tensor([0.0, 1.0])
    assert torch.equal(store.refine("a", first), first)
    out = store.refine("a", torch.tensor([1.0, 0.0]))
    assert out.tolist() == pytest.approx([0.1, 0.9])
    # fixed point: feeding the stored value back leaves it unchanged
    again = store.refine("a", out.clone())
    assert torch.allclose(again, out)
    assert store.visits["a"] == 3
    assert torch.equal(semisup.refine_pseudo(store, "b", first), first)


def _batches(size, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 1, size, size, generator=g)
    mask = (torch.rand(2, size, size, generator=g) > 0.7).long()
    x_u = torch.rand(2, 1, size, size, generator=g)
    return x, semisup.one_hot(mask), x_u


def test_semisup_step_breakdown(small_cfg):
    state = semisup.TrainState.create(build_model(small_cfg.net), small_cfg, seed=0)
    x, y, x_u = _batches(32)
    before = copy.deepcopy(state.teacher.state_dict())
    bd = semisup.semisup_step(state, x, y, x_u, ["u0", "u1"], small_cfg, lr=0.01)
    assert all(np.isfinite(v) and v >= 0 for v in bd.as_tuple())
    assert bd.total == pytest.approx(bd.sup + 0.3 * bd.cons + 0.4 * bd.mix + 0.3 * bd.fix, rel=1e-5)
    assert state.step == 1 and state.semi_step == 1
    assert set(state.pseudo.labels) == {"u0", "u1"}
    assert any(not torch.equal(before[k], v) for k, v in state.teacher.state_dict().items())


def test_semisup_step_requires_ids(small_cfg):
    state = semisup.TrainState.create(build_model(small_cfg.net), small_cfg)
    x, y, x_u = _batches(32)
    with pytest.raises(semisup.StateError):
        semisup.semisup_step(state, x, y, x_u, ["u0", ""], small_cfg, lr=0.01)
    with pytest.raises(semisup.StateError):
        semisup.semisup_step(state, x, y, x_u, ["u0"], small_cfg, lr=0.01)


def test_teacher_is_ema_of_post_step_student():
    """Toy two-parameter model: teacher' = d*teacher + (1-d)*student_after_step."""
    cfg = ExperimentConfig()
    student = Toy(0.5, -0.2)
    state = semisup.TrainState.create(student, cfg, seed=3)
    with torch.no_grad():
        state.teacher.a.fill_(2.0)
        state.teacher.b.fill_(1.0)
    x, y, x_u = _batches(4)
    a0 = student.a.item()
    semisup.semisup_step(state, x, y, x_u, ["p", "q"], cfg, lr=0.1)
    a1, b1 = student.a.item(), student.b.item()
    assert a1 != a0
    d = semisup.teacher_decay_at(0, cfg.train.teacher_decay, cfg.train.teacher_decay_start,
                                 cfg.train.teacher_ramp_steps)
    assert state.teacher.a.item() == pytest.approx(d * 2.0 + (1 - d) * a1, abs=1e-6)
    assert state.teacher.b.item() == pytest.approx(d * 1.0 + (1 - d) * b1, abs=1e-6)
    # the pre-step student would give a different teacher
    assert abs(state.teacher.a.item() - (d * 2.0 + (1 - d) * a0)) > 1e-6


def test_zero_weights_collapse_to_supervised(small_cfg):
    small_cfg.losses.w_c = small_cfg.losses.w_m = small_cfg.losses.w_f = 0.0
    model = build_model(small_cfg.net, seed=2)
    semi = semisup.TrainState.create(copy.deepcopy(model), small_cfg, seed=7)
    sup = semisup.TrainState.create(copy.deepcopy(model), small_cfg, seed=7)
    x, y, x_u = _batches(32, seed=4)
    for _ in range(2):
        semisup.semisup_step(semi, x, y, x_u, ["a", "b"], small_cfg, lr=0.01)
        semisup.supervised_step(sup, x, y, small_cfg, lr=0.01)
    for (name, a), b in zip(semi.student.state_dict().items(), sup.student.state_dict().values()):
        if a.is_floating_point():
            assert torch.allclose(a, b, atol=1e-7, rtol=0), name
