"""Shared fixtures and numeric helpers for the test suite."""

import numpy as np
import pytest
import torch

from softpo import TabularPolicy, e1_env, uniform_tabular

torch.set_num_threads(1)

# Exact constants for the smallest canonical environment (V=2, T=2, accepting
# set {(1, 1)}, uniform reference, beta=1), derived by direct enumeration:
#   Z = (1 + 3 e^-1) / 4,  root value = ln Z,
#   Q1(1) = ln((1 + e^-1) / 2),  pi*(1 | empty) = (1 + e^-1) / 4 / Z.
E1_Z = (1.0 + 3.0 * np.exp(-1.0)) / 4.0
E1_ROOT = float(np.log(E1_Z))                      # -0.6426259804912116
E1_Q1_AFTER_1 = float(np.log((1.0 + np.exp(-1.0)) / 2.0))   # -0.3798854930417225
E1_PI1_EMPTY = float((1.0 + np.exp(-1.0)) / 4.0 / E1_Z)     # 0.6502445909457811
E1_PI1_AFTER_1 = float(1.0 / (1.0 + np.exp(-1.0)))          # 0.7310585786300049
E1_SUCCESS_PROB = 0.25                                       # uniform reference


@pytest.fixture
def env_e1():
    return e1_env()


@pytest.fixture
def ref_e1(env_e1):
    return uniform_tabular(env_e1)


def random_tabular(env, scale=0.7, seed=0) -> TabularPolicy:
    return TabularPolicy(env.prompts, env.vocab_size, env.horizon,
                         init_scale=scale, seed=seed)


def flat_params(modules) -> torch.Tensor:
    params = [p for m in modules for p in m.parameters()]
    return torch.nn.utils.parameters_to_vector(params)


def set_flat_params(modules, vec: torch.Tensor) -> None:
    params = [p for m in modules for p in m.parameters()]
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec, params)


def finite_difference_gradient(loss_fn, modules, h=1e-6) -> np.ndarray:
    """Central finite differences of a scalar loss over all module parameters."""
    base = flat_params(modules).detach().clone()
    grad = np.zeros(base.numel())
    for i in range(base.numel()):
        for sign in (+1.0, -1.0):
            shifted = base.clone()
            shifted[i] += sign * h
            set_flat_params(modules, shifted)
            with torch.no_grad():
                value = float(loss_fn().detach())
            grad[i] += sign * value
    set_flat_params(modules, base)
    return grad / (2.0 * h)


def analytic_gradient(loss_fn, modules) -> np.ndarray:
    for m in modules:
        m.zero_grad()
    loss = loss_fn()
    loss.backward()
    chunks = []
    for m in modules:
        for p in m.parameters():
            chunks.append((p.grad if p.grad is not None
                           else torch.zeros_like(p)).flatten())
    for m in modules:
        m.zero_grad()
    return torch.cat(chunks).numpy()


def relative_gradient_error(loss_fn, modules, h=1e-6) -> float:
    analytic = analytic_gradient(loss_fn, modules)
    numeric = finite_difference_gradient(loss_fn, modules, h=h)
    scale = max(np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
