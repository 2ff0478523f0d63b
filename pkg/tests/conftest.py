"""Shared fixtures and oracle helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from fassl.autodiff import Tensor
from fassl.model import EncoderConfig, init_encoder


def gradclose(analytic: dict, numeric: dict, rtol: float = 1e-4, atol: float = 1e-8) -> bool:
    """Gradient-map comparison at the finite-difference tolerance.

    The atol floor only absorbs central-difference roundoff (|f|*eps/step,
    ~1e-10 here), far below any real gradient signal.
    """
    assert set(analytic) == set(numeric)
    return all(
        np.allclose(numeric[name].data, analytic[name].data, rtol=rtol, atol=atol)
        for name in analytic
    )


def tiny_encoder_config(input_dim: int = 10) -> EncoderConfig:
    return EncoderConfig(
        input_dim=input_dim, hidden_dim=7, embed_dim=6, projection_dim=5, acop_classes=6
    )


def perturbed_params(cfg: EncoderConfig, seed: int):
    """An encoder tree nudged off the zero-bias init, emulating mid-training state."""
    rng = np.random.default_rng(seed)
    base = init_encoder(cfg, seed=seed + 1000)
    return base.map_values(
        lambda _, t: Tensor(t.data + rng.normal(0.0, 0.3, size=t.shape), requires_grad=True)
    )


def fd_fixture_ok(params, batch: np.ndarray, step: float = 1e-5) -> bool:
    """Screen a (params, batch) fixture for central-difference validity.

    Rejects fixtures whose forward pass sits too close to a non-smooth
    region at the fd step scale: a ReLU preactivation within 10*step of its
    kink, a near-zero embedding row (normalization guard region), or a
    near-constant projection column (standardization guard region).
    """
    x = np.asarray(batch)
    pre1 = x @ params.get("backbone.fc1.weight").data + params.get("backbone.fc1.bias").data
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ params.get("backbone.fc2.weight").data + params.get("backbone.fc2.bias").data
    emb = np.maximum(pre2, 0.0)
    pre3 = emb @ params.get("head.proj.fc1.weight").data + params.get("head.proj.fc1.bias").data
    h3 = np.maximum(pre3, 0.0)
    z = h3 @ params.get("head.proj.fc2.weight").data + params.get("head.proj.fc2.bias").data
    kink_margin = min(np.abs(p).min() for p in (pre1, pre2, pre3))
    if kink_margin < 10.0 * step:
        return False
    if np.linalg.norm(z, axis=1).min() < 1e-3:
        return False
    half = len(z) // 2
    for rows in (z[0::2][:half], z[1::2][:half]):
        if rows.std(axis=0).min() < 1e-3:
            return False
    return True


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
