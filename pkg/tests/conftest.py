import numpy as np
import pytest
import torch

from semalign.model import ModelConfig
from semalign.trainer import TrainConfig


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(numeric.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / denom


def numeric_grad(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar-valued fn w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(loss_fn, tensors, tol=1e-4) -> None:
    """Assert autograd gradients match central differences for each tensor."""
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    for t in tensors:
        assert t.grad is not None, "no gradient reached an input"
        analytic = t.grad.clone()
        with torch.no_grad():
            numeric = numeric_grad(loss_fn, t)
        err = rel_error(analytic, numeric)
        assert err < tol, f"gradient mismatch: rel err {err:.2e}"
        t.requires_grad_(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Desk-scale model small enough for fast training tests."""
    return ModelConfig(
        feature_channels=16,
        encoder_width=8,
        window_radius=2,
        num_landmarks=5,
        margin=0.05,
        detector_hidden=16,
        align_width=16,
        uncertainty_width=16,
    )


@pytest.fixture
def tiny_train_config():
    return TrainConfig(batch_size=2, steps_per_epoch=2, epochs_per_phase=1)
