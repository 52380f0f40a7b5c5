"""Shared fixtures and numerical-check helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from skelact import tensor as tn
from skelact.model import ModelConfig
from skelact.tensor import GradTape, Tensor


def rel_err(a, b, floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def numeric_grad_5pt(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Five-point central stencil; roundoff-resistant for tiny gradients."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for step in (-2.0, -1.0, 1.0, 2.0):
            flat[i] = orig + step * h
            vals.append(f(x))
        flat[i] = orig
        fm2, fm1, fp1, fp2 = vals
        gf[i] = (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * h)
    return g


def analytic_grad(f_tensor, x: np.ndarray) -> np.ndarray:
    """Tape gradient of scalar f_tensor(Tensor) at x (f64)."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with GradTape() as tape:
        loss = f_tensor(xt)
        tape.backward(loss)
    return xt.grad


def check_op_grad(f_tensor, f_value, x, tol: float = 1e-4,
                  h: float = 1e-6) -> float:
    """Compare tape gradient against central differences; return max rel."""
    an = analytic_grad(f_tensor, x)
    fd = numeric_grad(f_value, np.asarray(x, dtype=np.float64), h=h)
    err = rel_err(an, fd, floor=1e-6)
    assert err <= tol, f"gradient mismatch: rel={err:.3e}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest full-featured model used by the gradient sweep."""
    base = dict(V=8, T=8, C=16, H=8, R=2, blocks_per_stage=2, k=3, e=1,
                N_c=3, layout_kind="custom",
                custom_table=[[0, 1, 2, 3], [4, 5, 6, 7]],
                attn_dropout=0.0, drop_path=0.0)
    base.update(overrides)
    return ModelConfig(**base)


_ = tn  # re-exported for test modules that want the op namespace
