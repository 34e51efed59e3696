"""Adam optimizer and the finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .autograd import Tape, backward
from .errors import ContractError


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(store, state):
    """One bias-corrected Adam update over every parameter in `store`.

    Every parameter must carry a populated gradient buffer (backward
    guarantees that, filling zeros for unreachable ones). Gradients are
    cleared after the update.
    """
    missing = [name for name, p in store.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step before backward: no gradient for {missing}")
    state.step_count += 1
    kernel = _kernels.active.adam_update
    for name, p in store.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
        v = state.second_moment.get(name)
        if v is None:
            v = state.second_moment[name] = np.zeros_like(p.data)
        kernel(p.data, p.grad, m, v,
               state.learning_rate, state.beta1, state.beta2, state.epsilon,
               state.step_count)
    store.zero_grad()


def finite_difference_check(loss_fn, store, epsilon=1e-4, n_coordinates=200,
                            rng=None, parameter_names=None):
    """Compare analytic gradients against central differences.

    `loss_fn(store)` must build a scalar loss through recorded ops and be
    deterministic (it is evaluated repeatedly with perturbed parameters).
    Returns the max over sampled coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))

    def value():
        return loss_fn(store).item()

    first, second = value(), value()
    if first != second:
        raise ContractError(
            f"loss_fn is not deterministic ({first!r} != {second!r}); freeze its rng")

    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn(store)
    backward(tape, loss, store)
    analytic = {name: p.grad.copy() for name, p in store.items()}
    store.zero_grad()

    names = list(parameter_names) if parameter_names is not None else store.names()
    coords = []
    for name in names:
        for flat in range(store[name].size):
            coords.append((name, flat))
    if n_coordinates < len(coords):
        chosen = rng.choice(len(coords), size=n_coordinates, replace=False)
        coords = [coords[i] for i in chosen]

    worst = 0.0
    for name, flat in coords:
        data = store[name].data.reshape(-1)
        original = data[flat]
        data[flat] = original + epsilon
        f_plus = value()
        data[flat] = original - epsilon
        f_minus = value()
        data[flat] = original
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        exact = analytic[name].reshape(-1)[flat]
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
