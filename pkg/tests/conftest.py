import numpy as np
import pytest
import torch

from hybridseg.blocks import init_weights
from hybridseg.config import ExperimentConfig, NetConfig
from hybridseg.data import SyntheticSpec, gen_synthetic, load_dataset

# one "criterion N: PASS/FAIL" line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def central_diff(fn, tensors, h=1e-5, coords=None):
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``tensors``.

    ``coords`` optionally maps tensor position -> list of flat indices to probe;
    unprobed entries come back as NaN.
    """
    grads = []
    with torch.no_grad():
        for pos, t in enumerate(tensors):
            g = torch.full_like(t, float("nan"))
            flat, gflat = t.view(-1), g.view(-1)
            indices = range(flat.numel()) if coords is None else coords[pos]
            for i in indices:
                orig = flat[i].item()
                flat[i] = orig + h
                plus = float(fn())
                flat[i] = orig - h
                minus = float(fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * h)
            grads.append(g)
    return grads


def autograd_grads(fn, tensors):
    for t in tensors:
        t.grad = None
    fn().backward()
    return [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


def rel_error(analytic, numeric):
    """Norm-wise relative error over the probed (non-NaN) entries."""
    a = torch.cat([x.reshape(-1) for x in analytic])
    n = torch.cat([x.reshape(-1) for x in numeric])
    keep = ~torch.isnan(n)
    a, n = a[keep], n[keep]
    return float((a - n).norm() / max(float(n.norm()), 1e-12))


def module_grad_error(module, shape, call, seed=0):
    """Relative error between autograd and central differences for ``call(module, x)``, 64-bit."""
    torch.manual_seed(seed)
    module = module.double()
    init_weights(module)
    # perturb away from init so every branch contributes measurably
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.3 * torch.randn_like(p))
    x = torch.randn(shape, dtype=torch.float64, requires_grad=True)
    probe = torch.randn_like(call(module, x)).detach()
    tensors = [x] + list(module.parameters())

    def loss():
        return (call(module, x) * probe).sum()

    return rel_error(autograd_grads(loss, tensors), central_diff(loss, tensors, h=1e-5))


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    gen_synthetic(SyntheticSpec(n_images=8, seed=1), root / "train")
    return root


@pytest.fixture(scope="session")
def train8(synthetic_dir):
    return load_dataset(synthetic_dir / "train" / "manifest.tsv")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_small_cfg():
    """Tiny network, short schedule: for loop/plumbing tests that must run in seconds."""
    cfg = ExperimentConfig(net=NetConfig(input_size=32, stem_channels=(4, 4, 8), patch=2,
                                         embed_dim=16, stage_heads=(2, 2), window=2,
                                         se_reduction=4))
    cfg.optim.batch = 4
    cfg.train.warmup_epochs = 1
    return cfg


@pytest.fixture
def small_cfg():
    return make_small_cfg()


@pytest.fixture(scope="session")
def train32(tmp_path_factory):
    """Eight 32-pixel labeled images matching ``small_cfg``."""
    root = tmp_path_factory.mktemp("synthetic32")
    gen_synthetic(SyntheticSpec(n_images=8, size=32, seed=2), root)
    return load_dataset(root / "manifest.tsv")
