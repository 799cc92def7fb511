import numpy as np
import pytest
import torch

from partpolicy import EmbodimentSpec
from partpolicy.slots import CanonicalSlot as S


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def arms_only_spec():
    return EmbodimentSpec(
        name="arms-only",
        state_dims={S.LEFT_ARM: 3, S.RIGHT_ARM: 3},
        action_dims={S.LEFT_ARM: 3, S.RIGHT_ARM: 3},
    )


@pytest.fixture
def full_spec():
    dims = {s: 2 for s in S}
    return EmbodimentSpec(name="full", state_dims=dims, action_dims=dict(dims))


def finite_difference_grads(fn, params, eps=1e-6):
    """Central finite differences of a scalar-valued fn() w.r.t. each
    parameter tensor, at double precision."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(fn())
                flat[i] = orig - eps
                f_minus = float(fn())
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2 * eps)
            grads.append(g)
    return grads


def check_gradients(fn, named_params, eps=1e-6, rtol=1e-4):
    """Compare autograd gradients of scalar fn() against central finite
    differences, per parameter tensor. Returns the worst relative error."""
    names = [n for n, _ in named_params]
    params = [p for _, p in named_params]
    for p in params:
        p.grad = None
    value = fn()
    value.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]
    numeric = finite_difference_grads(fn, params, eps=eps)
    worst = 0.0
    for name, a, n in zip(names, analytic, numeric):
        denom = max(float(a.norm()), float(n.norm()), 1e-12)
        rel = float((a - n).norm()) / denom
        assert rel <= rtol, f"gradient mismatch for {name}: relative error {rel:.3e}"
        worst = max(worst, rel)
    return worst
