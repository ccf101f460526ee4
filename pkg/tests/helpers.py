"""Shared test utilities: finite differences and small data builders."""

import numpy as np

from dscascade.data import Demonstration


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
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


def rel_close(a, b, rtol, atol=1e-10):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.all(np.abs(a - b) <= atol + rtol * np.maximum(np.abs(a), np.abs(b)))


def line_demo(n=20, d=3, dt=0.1, direction=None, gripper=None):
    """Uniformly sampled straight-line demonstration from origin."""
    if direction is None:
        direction = np.arange(1, d + 1, dtype=float)
    t = np.arange(n) * dt
    x = t[:, None] * np.asarray(direction)[None, :]
    xdot = np.tile(np.asarray(direction, dtype=float), (n, 1))
    if gripper is None:
        gripper = np.zeros(n, dtype=int)
    return Demonstration(t=t, x=x, xdot=xdot, gripper=np.asarray(gripper))


def demo_from_positions(x, dt=0.1, gripper=None):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    t = np.arange(n) * dt
    xdot = np.gradient(x, t, axis=0)
    if gripper is None:
        gripper = np.zeros(n, dtype=int)
    return Demonstration(t=t, x=x, xdot=xdot, gripper=np.asarray(gripper))
