"""Shared fixtures: small trained policies reused across test modules."""

import numpy as np
import pytest

from dscascade.data import Demonstration
from dscascade.policy import TrainingConfig, train_segment


def linear_field_demo(n=60, t_end=5.0):
    """Samples of xdot = -x decaying toward the origin (goal at the end)."""
    t = np.linspace(0.0, t_end, n)
    x0 = np.array([1.0, 0.8, -0.5])
    x = x0[None, :] * np.exp(-t)[:, None]
    return Demonstration(t=t, x=x, xdot=-x, gripper=np.zeros(n, dtype=int))


@pytest.fixture(scope="session")
def linear_demo():
    return linear_field_demo()


@pytest.fixture(scope="session")
def trained_stable_policy(linear_demo):
    cfg = TrainingConfig(epochs=2500, seed=3)
    return train_segment(linear_demo, linear_demo.x[-1], cfg, "stable")


@pytest.fixture(scope="session")
def trained_bc_policy(linear_demo):
    cfg = TrainingConfig(epochs=1500, seed=3, gamma=1.0)
    return train_segment(linear_demo, linear_demo.x[-1], cfg, "bc")
