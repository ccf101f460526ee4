"""Per-segment dynamical policies: the Lyapunov-stable policy and a BC baseline.

The stable policy projects a nominal tanh network onto the descent half-space
of a learned positive-definite energy function, so every velocity command
strictly decreases that energy toward the segment's subgoal. The behavioral
cloning baseline is the same nominal architecture without any constraint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Demonstration, GoalFrame, to_goal_frame
from .errors import ConfigError, DivergenceError, ValidationError
from .nets import (MLP, ICNN, Adam, TapedLyapunov, TapedMLP,
                   lyapunov_value_grad_np, lyapunov_value_np, _softplus_np)

# Projection gate: near-exact rectifier, softplus-smoothed for twice
# differentiability. The denominator guard only resolves 0/0 at the goal.
GATE_SHARPNESS = 2.0e4
GATE_EPS = 1e-16
EQUILIBRIUM_TOL = 1e-9

# Exponential descent margin. At the guaranteed floor rate v' = -alpha*v,
# recovering from a perturbation within a 1000-step horizon at dt=0.01 needs
# alpha >= ~0.04, so the default sits above that with headroom.
DEFAULT_ALPHA = 0.05
DEFAULT_EPSILON = 1e-3
DEFAULT_GAMMA = 0.5
DEFAULT_LR = 1e-3
DEFAULT_EPOCHS = 10_000
DEFAULT_WINDOW = 5
DEFAULT_BATCH = 8
DEFAULT_HIDDEN = 64
DEFAULT_VMAX_FACTOR = 2.0


@dataclass
class TrainingConfig:
    """Knobs of the per-segment training run.

    ``batch`` is the number of rollout starts sampled (evenly strided) for the
    trajectory term; 0 uses every sample. The velocity term always uses the
    full segment. ``dt`` of None resolves to the median demonstration
    timestep.
    """

    gamma: float = DEFAULT_GAMMA
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    rollout_window: int = DEFAULT_WINDOW
    dt: float | None = None
    batch: int = DEFAULT_BATCH
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    hidden: int = DEFAULT_HIDDEN
    v_max_factor: float = DEFAULT_VMAX_FACTOR
    # Recovery shaping: extra trajectory-term rollouts whose starts are
    # demonstration states displaced by up to ``recovery_radius`` (meters,
    # converted to the goal frame per segment) but whose targets are the
    # unchanged demonstration tail. Teaches the field to pull back onto the
    # corridor after a perturbation. 0 disables.
    recovery_starts: int = DEFAULT_BATCH
    recovery_radius: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0,1], got {self.gamma}")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.rollout_window < 1:
            raise ConfigError(f"rollout_window must be >= 1, got {self.rollout_window}")
        if self.epochs < 0 or self.batch < 0:
            raise ConfigError("epochs and batch must be nonnegative")
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ConfigError("alpha and epsilon must be positive")


class StablePolicy:
    """Goal-framed stable policy: nominal network + Lyapunov projection."""

    kind = "stable"

    def __init__(self, mlp: MLP, icnn: ICNN, alpha: float, epsilon: float,
                 frame: GoalFrame, v_max: float, train_log: dict | None = None):
        self.mlp = mlp
        self.icnn = icnn
        self.alpha = float(alpha)
        self.epsilon = float(epsilon)
        self.frame = frame
        self.v_max = float(v_max)
        self.train_log = train_log or {}

    @property
    def d(self) -> int:
        return self.frame.dim

    def velocity_rows(self, X: np.ndarray) -> np.ndarray:
        """Projected velocities for a batch of goal-frame positions.

        Computed in the gradient-normalized form pi = f - ghat * gate(uhat)
        with ghat = grad_v / sqrt(||grad_v||^2 + eps); identical to dividing
        the gate by the regularized squared norm, but without the 1/||g||^2
        stiffness that wrecks optimization where grad_v is small.
        """
        X = np.asarray(X, dtype=np.float64)
        f = self.mlp.forward(X)
        v, gv = lyapunov_value_grad_np(self.icnn, self.epsilon, X)
        g_norm = np.sqrt(np.sum(gv * gv, axis=1, keepdims=True) + GATE_EPS)
        ghat = gv / g_norm
        uhat = (np.sum(gv * f, axis=1, keepdims=True) + self.alpha * v) / g_norm
        gate = _softplus_np(GATE_SHARPNESS * uhat) / GATE_SHARPNESS
        out = f - ghat * gate
        at_goal = np.linalg.norm(X, axis=1) <= EQUILIBRIUM_TOL
        out[at_goal] = 0.0
        return out

    def velocity(self, x: np.ndarray) -> np.ndarray:
        return self.velocity_rows(np.asarray(x)[None, :])[0]

    def lyapunov_rows(self, X: np.ndarray) -> np.ndarray:
        return lyapunov_value_np(self.icnn, self.epsilon, np.asarray(X))[:, 0]

    def lyapunov_grad_rows(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v, gv = lyapunov_value_grad_np(self.icnn, self.epsilon, np.asarray(X))
        return v[:, 0], gv


class BCPolicy:
    """Unconstrained behavioral-cloning regressor (same nominal architecture)."""

    kind = "bc"

    def __init__(self, mlp: MLP, frame: GoalFrame, v_max: float,
                 train_log: dict | None = None):
        self.mlp = mlp
        self.frame = frame
        self.v_max = float(v_max)
        self.train_log = train_log or {}

    @property
    def d(self) -> int:
        return self.frame.dim

    def velocity_rows(self, X: np.ndarray) -> np.ndarray:
        return self.mlp.forward(np.asarray(X, dtype=np.float64))

    def velocity(self, x: np.ndarray) -> np.ndarray:
        return self.velocity_rows(np.asarray(x)[None, :])[0]


def stable_forward(policy: StablePolicy, x: np.ndarray) -> np.ndarray:
    """Velocity at a goal-frame position; exact zero at the equilibrium."""
    return policy.velocity(x)


def bc_forward(policy: BCPolicy, x: np.ndarray) -> np.ndarray:
    """Raw network output; carries no stability guarantee."""
    return policy.velocity(x)


def euler_rollout(policy_fn, x0: np.ndarray, steps: int, dt: float) -> np.ndarray:
    """Forward-Euler integration x_{m+1} = x_m + policy(x_m) * dt."""
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x0, dtype=np.float64)
    traj = np.empty((steps + 1, x.shape[0]))
    traj[0] = x
    for m in range(steps):
        x = x + np.asarray(policy_fn(x)) * dt
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"rollout diverged at step {m + 1}")
        traj[m + 1] = x
    return traj


# ---------------------------------------------------------------------------
# taped loss graph

def _taped_stable_velocity(tmlp: TapedMLP, tlyap: TapedLyapunov, alpha: float,
                           Xt: ad.Tensor, gate_eps: ad.Tensor) -> ad.Tensor:
    f = tmlp.forward(Xt)
    v, gv = tlyap.grad_rows(Xt)
    g_norm = ad.sqrt(ad.add(ad.row_norm_sq(gv), gate_eps))
    ghat = ad.div(gv, g_norm)
    uhat = ad.div(ad.add(ad.row_dot(gv, f), ad.scalar_mul(v, alpha)), g_norm)
    gate = ad.scalar_mul(ad.softplus(ad.scalar_mul(uhat, GATE_SHARPNESS)),
                         1.0 / GATE_SHARPNESS)
    return ad.sub(f, ad.mul(ghat, gate))


def _trajectory_starts(n: int, batch: int) -> np.ndarray:
    if batch <= 0 or batch >= n - 1:
        return np.arange(n - 1)
    return np.unique(np.linspace(0, n - 2, batch).astype(int))


def _loss_graph(tape: ad.Tape, velocity_of, framed: Demonstration,
                cfg: TrainingConfig, dt: float,
                start_offsets: np.ndarray | None = None) -> ad.Tensor:
    """Hybrid loss: gamma * velocity MSE + (1-gamma) * rollout position MSE.

    Both terms are means over samples of squared Euclidean norms. Rollout
    windows that would run past the segment end are truncated via masking,
    not skipped. ``start_offsets``, when given, appends rollouts whose starts
    are displaced copies of the strided demonstration starts but whose
    targets are unchanged (recovery shaping; not used by hybrid_loss).
    """
    n = len(framed)
    terms = []
    # Data positions are leaves (not constants): the stable policy's energy
    # gradient is taken with respect to them on the tape.
    if cfg.gamma > 0.0:
        X = tape.leaf(framed.x)
        Xdot = tape.constant(framed.xdot)
        vel_term = ad.scalar_mul(ad.norm_sq(ad.sub(velocity_of(X), Xdot)), 1.0 / n)
        terms.append(ad.scalar_mul(vel_term, cfg.gamma))
    if cfg.gamma < 1.0:
        starts = _trajectory_starts(n, cfg.batch)
        x_start = framed.x[starts]
        if start_offsets is not None:
            rec_starts = np.resize(starts, len(start_offsets))
            starts = np.concatenate([starts, rec_starts])
            x_start = np.concatenate(
                [x_start, framed.x[rec_starts] + start_offsets])
        m_steps = cfg.rollout_window
        mask = np.zeros((len(starts), m_steps, 1))
        for row, i in enumerate(starts):
            mask[row, :min(m_steps, n - 1 - i), 0] = 1.0
        Xc = tape.leaf(x_start)
        acc = None
        for m in range(m_steps):
            Xc = ad.add(Xc, ad.scalar_mul(velocity_of(Xc), dt))
            target_idx = np.minimum(starts + m + 1, n - 1)
            diff = ad.sub(Xc, tape.constant(framed.x[target_idx]))
            err = ad.sum_(ad.mul(ad.row_norm_sq(diff), tape.constant(mask[:, m])))
            acc = err if acc is None else ad.add(acc, err)
        traj_term = ad.scalar_mul(acc, 1.0 / float(mask.sum()))
        terms.append(ad.scalar_mul(traj_term, 1.0 - cfg.gamma))
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss


def _resolve_dt(framed: Demonstration, cfg: TrainingConfig) -> float:
    return cfg.dt if cfg.dt is not None else framed.median_dt()


def hybrid_loss(policy, segment_data: Demonstration, cfg: TrainingConfig) -> float:
    """Evaluate the hybrid loss of a built policy on goal-frame segment data."""
    tape = ad.Tape()
    gate_eps = tape.constant(np.full((1, 1), GATE_EPS))
    if policy.kind == "stable":
        tmlp = TapedMLP(tape, policy.mlp, trainable=False)
        tlyap = TapedLyapunov(tape, policy.icnn, policy.epsilon, trainable=False)

        def velocity_of(Xt):
            return _taped_stable_velocity(tmlp, tlyap, policy.alpha, Xt, gate_eps)
    else:
        tmlp = TapedMLP(tape, policy.mlp, trainable=False)
        velocity_of = tmlp.forward
    dt = _resolve_dt(segment_data, cfg)
    loss = _loss_graph(tape, velocity_of, segment_data, cfg, dt)
    return float(loss.value)


def train_segment(segment_data: Demonstration, subgoal: np.ndarray,
                  cfg: TrainingConfig, kind: str = "stable"):
    """Train one per-segment policy on (waypoint-reconstructed) segment data.

    The data is goal-centered first; parameters start from a seeded Gaussian
    (std 0.1) and take ``cfg.epochs`` adaptive-moment steps on the hybrid
    loss. For the stable kind the convex-network hidden weights are projected
    to nonnegative after every step, which keeps the energy function convex
    and the descent guarantee intact.
    """
    if kind not in ("stable", "bc"):
        raise ConfigError(f"unknown policy kind '{kind}'")
    framed, frame = to_goal_frame(segment_data, subgoal)
    dt = _resolve_dt(framed, cfg)
    v_max = cfg.v_max_factor * segment_data.max_speed()
    if v_max <= 0:
        v_max = 1.0
    rng = np.random.default_rng(cfg.seed)
    tape = ad.Tape()
    gate_eps = tape.constant(np.full((1, 1), GATE_EPS))
    mlp0 = MLP.init(framed.dim, cfg.hidden, rng)
    tmlp = TapedMLP(tape, mlp0)
    params = tmlp.params()
    if kind == "stable":
        icnn0 = ICNN.init(framed.dim, cfg.hidden, rng)
        tlyap = TapedLyapunov(tape, icnn0, cfg.epsilon)
        params = params + tlyap.params()

        def velocity_of(Xt):
            return _taped_stable_velocity(tmlp, tlyap, cfg.alpha, Xt, gate_eps)
    else:
        tlyap = None
        velocity_of = tmlp.forward
    offsets = None
    if cfg.gamma < 1.0 and cfg.recovery_starts > 0 and cfg.recovery_radius > 0:
        n_rec = min(cfg.recovery_starts, len(_trajectory_starts(len(framed), cfg.batch)))
        radius_frame = cfg.recovery_radius * float(frame.scale[0])
        # two shells: at and inside the expected displacement scale
        offsets = np.concatenate([
            rng.normal(scale=1.3 * radius_frame / np.sqrt(framed.dim),
                       size=(n_rec, framed.dim)),
            rng.normal(scale=0.6 * radius_frame / np.sqrt(framed.dim),
                       size=(n_rec, framed.dim)),
        ])
    loss = _loss_graph(tape, velocity_of, framed, cfg, dt, start_offsets=offsets)
    grads = ad.backward(tape, loss, params)
    tape.freeze([loss] + grads)
    opt = Adam(params, lr=cfg.lr)
    for epoch in range(cfg.epochs):
        tape.replay()
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
        opt.step([g.value for g in grads])
        if tlyap is not None:
            for t in tlyap.nonneg_params():
                t.assign(np.maximum(t.value, 0.0))
    tape.replay()
    final_loss = float(loss.value)
    if not np.isfinite(final_loss):
        raise DivergenceError(f"training loss became non-finite at epoch {cfg.epochs}")
    train_log = {"final_loss": final_loss, "epochs": cfg.epochs, "seed": cfg.seed,
                 "gamma": cfg.gamma, "dt": dt}
    if kind == "stable":
        return StablePolicy(mlp=tmlp.export(), icnn=tlyap.export(), alpha=cfg.alpha,
                            epsilon=cfg.epsilon, frame=frame, v_max=v_max,
                            train_log=train_log)
    return BCPolicy(mlp=tmlp.export(), frame=frame, v_max=v_max, train_log=train_log)


# ---------------------------------------------------------------------------
# model files

def policy_to_obj(policy) -> dict:
    obj = {
        "kind": policy.kind,
        "d": policy.d,
        "alpha": policy.alpha if policy.kind == "stable" else None,
        "epsilon": policy.epsilon if policy.kind == "stable" else None,
        "frame": policy.frame.to_obj(),
        "layers": policy.mlp.to_obj(),
        "icnn": policy.icnn.to_obj() if policy.kind == "stable" else None,
        "v_max": policy.v_max,
        "train_log": policy.train_log,
    }
    return obj


def policy_from_obj(obj: dict):
    frame = GoalFrame.from_obj(obj["frame"])
    mlp = MLP.from_obj(obj["layers"])
    if obj["kind"] == "stable":
        return StablePolicy(mlp=mlp, icnn=ICNN.from_obj(obj["icnn"]),
                            alpha=float(obj["alpha"]), epsilon=float(obj["epsilon"]),
                            frame=frame, v_max=float(obj["v_max"]),
                            train_log=obj.get("train_log", {}))
    if obj["kind"] == "bc":
        return BCPolicy(mlp=mlp, frame=frame, v_max=float(obj["v_max"]),
                        train_log=obj.get("train_log", {}))
    raise ValidationError(f"unknown policy kind '{obj.get('kind')}' in model file")


def save_policy(policy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_to_obj(policy), fh)


def load_policy(path):
    with open(path, "r", encoding="utf-8") as fh:
        return policy_from_obj(json.load(fh))
