"""Network parameter containers, taped/plain forward passes, and Adam.

Every network has two forward implementations: one recording onto an autodiff
tape (used by the training loss, supports nested gradients) and one in plain
numpy (used by rollouts and evaluation). Tests pin them to identical outputs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

# Lyapunov rectifier: quadratic on (0, SMOOTH_WIDTH), linear above, zero below.
SMOOTH_WIDTH = 0.1


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MLP:
    """Fully connected d -> hidden -> hidden -> d network with tanh activations."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @staticmethod
    def init(d: int, hidden: int, rng: np.random.Generator, std: float = 0.1) -> "MLP":
        dims = [d, hidden, hidden, d]
        weights = [rng.normal(scale=std, size=(dims[i], dims[i + 1])) for i in range(3)]
        biases = [rng.normal(scale=std, size=dims[i + 1]) for i in range(3)]
        return MLP(weights, biases)

    def forward(self, X: np.ndarray) -> np.ndarray:
        h = np.tanh(X @ self.weights[0] + self.biases[0])
        h = np.tanh(h @ self.weights[1] + self.biases[1])
        return h @ self.weights[2] + self.biases[2]

    def to_obj(self) -> list[dict]:
        return [{"w": w.tolist(), "b": b.tolist()}
                for w, b in zip(self.weights, self.biases)]

    @staticmethod
    def from_obj(obj: list[dict]) -> "MLP":
        return MLP([np.asarray(layer["w"]) for layer in obj],
                   [np.asarray(layer["b"]) for layer in obj])


class TapedMLP:
    def __init__(self, tape: ad.Tape, mlp: MLP, trainable: bool = True):
        leaf = tape.leaf if trainable else tape.constant
        self.w = [leaf(w) for w in mlp.weights]
        self.b = [leaf(b) for b in mlp.biases]

    def forward(self, Xt: ad.Tensor) -> ad.Tensor:
        h = ad.tanh(ad.affine(Xt, self.w[0], self.b[0]))
        h = ad.tanh(ad.affine(h, self.w[1], self.b[1]))
        return ad.affine(h, self.w[2], self.b[2])

    def params(self) -> list[ad.Tensor]:
        return [t for pair in zip(self.w, self.b) for t in pair]

    def export(self) -> MLP:
        return MLP([w.value.copy() for w in self.w], [b.value.copy() for b in self.b])


class ICNN:
    """Input-convex scalar network: two hidden softplus layers with skip paths.

    Convexity in the input holds because the hidden-to-hidden weights
    (``u_hidden``, ``u_out``) are kept elementwise nonnegative and softplus is
    convex and nondecreasing; the input skip connections are unconstrained.
    """

    def __init__(self, w_in, b_in, u_hidden, w_skip, b_skip, u_out, w_out, b_out):
        self.w_in = np.asarray(w_in, dtype=np.float64)
        self.b_in = np.asarray(b_in, dtype=np.float64)
        self.u_hidden = np.asarray(u_hidden, dtype=np.float64)
        self.w_skip = np.asarray(w_skip, dtype=np.float64)
        self.b_skip = np.asarray(b_skip, dtype=np.float64)
        self.u_out = np.asarray(u_out, dtype=np.float64)
        self.w_out = np.asarray(w_out, dtype=np.float64)
        self.b_out = np.asarray(b_out, dtype=np.float64)

    @staticmethod
    def init(d: int, hidden: int, rng: np.random.Generator, std: float = 0.1) -> "ICNN":
        return ICNN(
            w_in=rng.normal(scale=std, size=(d, hidden)),
            b_in=rng.normal(scale=std, size=hidden),
            u_hidden=np.abs(rng.normal(scale=std, size=(hidden, hidden))),
            w_skip=rng.normal(scale=std, size=(d, hidden)),
            b_skip=rng.normal(scale=std, size=hidden),
            u_out=np.abs(rng.normal(scale=std, size=(hidden, 1))),
            w_out=rng.normal(scale=std, size=(d, 1)),
            b_out=rng.normal(scale=std, size=1),
        )

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Convex scalar h(x) per row, shape (B, 1)."""
        a0 = _softplus_np(X @ self.w_in + self.b_in)
        a1 = _softplus_np(a0 @ self.u_hidden + X @ self.w_skip + self.b_skip)
        return a1 @ self.u_out + X @ self.w_out + self.b_out

    def forward_grad(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """h(x) and its input gradient per row: (B,1), (B,d)."""
        z0 = X @ self.w_in + self.b_in
        a0 = _softplus_np(z0)
        z1 = a0 @ self.u_hidden + X @ self.w_skip + self.b_skip
        a1 = _softplus_np(z1)
        h = a1 @ self.u_out + X @ self.w_out + self.b_out
        dz1 = _sigmoid_np(z1) * self.u_out.T
        dz0 = (dz1 @ self.u_hidden.T) * _sigmoid_np(z0)
        gh = dz1 @ self.w_skip.T + dz0 @ self.w_in.T + self.w_out.T
        return h, gh

    def project_nonneg(self) -> None:
        np.maximum(self.u_hidden, 0.0, out=self.u_hidden)
        np.maximum(self.u_out, 0.0, out=self.u_out)

    def to_obj(self) -> dict:
        return {name: getattr(self, name).tolist()
                for name in ("w_in", "b_in", "u_hidden", "w_skip", "b_skip",
                             "u_out", "w_out", "b_out")}

    @staticmethod
    def from_obj(obj: dict) -> "ICNN":
        return ICNN(**{k: np.asarray(v) for k, v in obj.items()})


class TapedLyapunov:
    """Taped v(x) = smooth_relu(h(x) - h(0)) + epsilon * ||x||^2.

    ``grad_rows`` returns per-row spatial gradients as taped values, so the
    training loss can backpropagate through them.
    """

    def __init__(self, tape: ad.Tape, icnn: ICNN, epsilon: float,
                 trainable: bool = True):
        leaf = tape.leaf if trainable else tape.constant
        self.tape = tape
        self.epsilon = float(epsilon)
        self.w_in = leaf(icnn.w_in)
        self.b_in = leaf(icnn.b_in)
        self.u_hidden = leaf(icnn.u_hidden)
        self.w_skip = leaf(icnn.w_skip)
        self.b_skip = leaf(icnn.b_skip)
        self.u_out = leaf(icnn.u_out)
        self.w_out = leaf(icnn.w_out)
        self.b_out = leaf(icnn.b_out)
        self._h0 = None
        d = icnn.w_in.shape[0]
        self._zero = tape.constant(np.zeros((1, d)))

    def _h(self, Xt: ad.Tensor) -> ad.Tensor:
        a0 = ad.softplus(ad.affine(Xt, self.w_in, self.b_in))
        a1 = ad.softplus(ad.linear2(a0, self.u_hidden, Xt, self.w_skip, self.b_skip))
        return ad.linear2(a1, self.u_out, Xt, self.w_out, self.b_out)

    def value_rows(self, Xt: ad.Tensor) -> ad.Tensor:
        if self._h0 is None:
            self._h0 = self._h(self._zero)
        delta = ad.sub(self._h(Xt), self._h0)
        quad = ad.scalar_mul(ad.row_norm_sq(Xt), self.epsilon)
        return ad.add(ad.smooth_relu(delta, SMOOTH_WIDTH), quad)

    def grad_rows(self, Xt: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        v = self.value_rows(Xt)
        (gv,) = ad.backward(self.tape, ad.sum_(v), [Xt])
        return v, gv

    def params(self) -> list[ad.Tensor]:
        return [self.w_in, self.b_in, self.u_hidden, self.w_skip, self.b_skip,
                self.u_out, self.w_out, self.b_out]

    def nonneg_params(self) -> list[ad.Tensor]:
        return [self.u_hidden, self.u_out]

    def export(self) -> ICNN:
        return ICNN(*(t.value.copy() for t in self.params()))


def lyapunov_value_np(icnn: ICNN, epsilon: float, X: np.ndarray) -> np.ndarray:
    h = icnn.forward(X)
    h0 = icnn.forward(np.zeros((1, X.shape[1])))
    from .autodiff import _smooth_relu_np
    return (_smooth_relu_np(h - h0, SMOOTH_WIDTH)
            + epsilon * np.sum(X * X, axis=1, keepdims=True))


def lyapunov_value_grad_np(icnn: ICNN, epsilon: float,
                           X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    from .autodiff import _smooth_relu_grad_np, _smooth_relu_np
    h, gh = icnn.forward_grad(X)
    h0 = icnn.forward(np.zeros((1, X.shape[1])))
    delta = h - h0
    v = _smooth_relu_np(delta, SMOOTH_WIDTH) + epsilon * np.sum(X * X, axis=1,
                                                                keepdims=True)
    gv = _smooth_relu_grad_np(delta, SMOOTH_WIDTH) * gh + 2.0 * epsilon * X
    return v, gv


class Adam:
    """Adaptive-moment gradient descent over tape leaves."""

    def __init__(self, params: list[ad.Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.assign(p.value - update)
