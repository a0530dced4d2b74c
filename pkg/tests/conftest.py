"""Shared test helpers: finite-difference gradients and tiny fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from fsar.data import SynthSpec, synth_dataset
from fsar.tensor import Tensor


def finite_difference(make_loss, param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar-valued rebuild function.

    ``make_loss`` must rebuild the computation from the current ``param.data``
    each time it is called (the graph is not reused).
    """
    base = param.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        param.data = flat.reshape(base.shape)
        up = make_loss().item()
        flat[i] = original - h
        param.data = flat.reshape(base.shape)
        down = make_loss().item()
        flat[i] = original
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    param.data = base
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor turns the comparison into an absolute one for near-zero
    coordinates, where central differences carry ~1e-10 of cancellation
    noise at h=1e-6 that would swamp a pure relative check.
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def check_gradient(make_loss, params: dict[str, Tensor], h: float = 1e-6,
                   tol: float = 1e-6) -> None:
    """Assert reverse-mode gradients match central differences for each param."""
    loss = make_loss()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for name, p in params.items():
        numeric = finite_difference(make_loss, p, h=h)
        err = relative_error(analytic[name], numeric)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"


@pytest.fixture
def tiny_feature_set():
    return synth_dataset(
        SynthSpec(classes=4, videos_per_class=4, frames=4, boxes_per_frame=2,
                  dim=16, separation=5.0, temporal_jitter=0.2, speed_jitter=0.1, seed=11)
    )
