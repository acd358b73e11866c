"""Deterministic toy control domains.

Four families (point mass, pendulum, linear system, spring-coupled chain of
masses) with configurable physics, an optional frozen nonlinear "sensor"
that scrambles the state into an observation, and analytic reference
controllers.  Stepping is stateless and works on a single state of shape
``(n,)`` or a batch of shape ``(batch, n)``.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.linalg import solve_discrete_are

from cyclealign.nn import MlpSpec, mlp_forward, mlp_init

FAMILIES = ("point_mass", "pendulum", "linear_system", "chain_mass")
MODALITIES = ("state", "scrambled")

GRAVITY = 9.81
PENDULUM_LENGTH = 1.0
SPRING_STIFFNESS = 10.0
SPRING_REST_LENGTH = 1.0
KP, KD = 4.0, 2.0
STATE_LIMIT = 50.0
OMEGA_LIMIT = 20.0
GOAL_POSITION = 1.0
ENCODER_HIDDEN = 32
ENCODER_INPUT_GAIN = 2.0
ACTION_TOLERANCE = 1e-9


class ActionBoundError(ValueError):
    """An action coordinate lies outside the domain's action bound."""


@dataclass(frozen=True)
class EnvSpec:
    family: str
    state_dim: int
    action_dim: int
    dt: float = 0.05
    mass: float = 1.0
    damping: float = 0.0
    num_links: int = 1
    action_bound: float = 1.0
    modality: str = "state"
    modality_seed: int = 0
    linear_A: tuple | None = None
    linear_B: tuple | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not self.mass > 0:
            raise ValueError(f"mass must be > 0, got {self.mass}")
        if not 0 <= self.damping < 1:
            raise ValueError(f"damping must lie in [0, 1), got {self.damping}")
        if not self.action_bound > 0:
            raise ValueError(f"action_bound must be > 0, got {self.action_bound}")
        n, m = self.state_dim, self.action_dim
        if self.family == "point_mass":
            if m < 1 or n != 2 * m:
                raise ValueError(f"point_mass needs state_dim = 2 * action_dim, got n={n}, m={m}")
        elif self.family == "pendulum":
            if (n, m) != (2, 1):
                raise ValueError(f"pendulum needs n=2, m=1, got n={n}, m={m}")
        elif self.family == "chain_mass":
            k = self.num_links
            if k < 1 or (n, m) != (2 * k, k):
                raise ValueError(f"chain_mass with {k} links needs n={2 * k}, m={k}, got n={n}, m={m}")
        else:
            if self.linear_A is None or self.linear_B is None:
                raise ValueError("linear_system needs linear_A and linear_B")
            A = np.asarray(self.linear_A, dtype=np.float64)
            B = np.asarray(self.linear_B, dtype=np.float64)
            if A.shape != (n, n) or B.shape != (n, m):
                raise ValueError(f"linear_system matrices must be {n}x{n} and {n}x{m}, "
                                 f"got {A.shape} and {B.shape}")
            radius = max(abs(np.linalg.eigvals(A))) if n else 0.0
            if radius > 1.05 + 1e-12:
                raise ValueError(f"linear_A spectral radius {radius:.4f} exceeds 1.05")
            object.__setattr__(self, "linear_A", _as_tuple(A))
            object.__setattr__(self, "linear_B", _as_tuple(B))

    @property
    def A(self):
        return np.asarray(self.linear_A, dtype=np.float64)

    @property
    def B(self):
        return np.asarray(self.linear_B, dtype=np.float64)

    @property
    def obs_dim(self):
        return self.state_dim if self.modality == "state" else 2 * self.state_dim

    def with_(self, **changes) -> "EnvSpec":
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        for key in ("linear_A", "linear_B"):
            if d[key] is not None:
                d[key] = [list(row) for row in d[key]]
        return d

    def digest(self) -> bytes:
        """32-byte SHA-256 of the canonical JSON form."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).digest()


def _as_tuple(M):
    return tuple(tuple(float(v) for v in row) for row in np.asarray(M))


# ---------------------------------------------------------------------------
# constructors


def point_mass(dims=1, **kw) -> EnvSpec:
    kw.setdefault("action_bound", 5.0)
    return EnvSpec("point_mass", 2 * dims, dims, **kw)


def pendulum(**kw) -> EnvSpec:
    kw.setdefault("action_bound", 5.0)
    return EnvSpec("pendulum", 2, 1, **kw)


def chain_mass(links=3, **kw) -> EnvSpec:
    kw.setdefault("action_bound", 5.0)
    return EnvSpec("chain_mass", 2 * links, links, num_links=links, **kw)


def linear_system(A, B, **kw) -> EnvSpec:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    return EnvSpec("linear_system", A.shape[0], B.shape[1], linear_A=A, linear_B=B, **kw)


def damped_integrators(dims=2, dt=0.1, decay=(0.1, 0.25), **kw) -> EnvSpec:
    """Linear system made of ``dims`` damped double integrators.

    State layout is (positions..., velocities...).  Each axis obeys
    v' = (1 - decay) v + dt a, p' = p + dt v'.  ``decay`` values are
    cycled over the axes.
    """
    decay = np.resize(np.asarray(decay, dtype=np.float64), dims)
    n = 2 * dims
    A = np.zeros((n, n))
    B = np.zeros((n, dims))
    for j in range(dims):
        A[j, j] = 1.0
        A[j, dims + j] = dt * (1.0 - decay[j])
        A[dims + j, dims + j] = 1.0 - decay[j]
        B[j, j] = dt * dt
        B[dims + j, j] = dt
    return linear_system(A, B, dt=dt, **kw)


# ---------------------------------------------------------------------------
# dynamics


def _check_action(spec, a):
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != spec.action_dim:
        raise ValueError(f"action dim {a.shape[-1]} != {spec.action_dim}")
    if np.any(np.abs(a) > spec.action_bound + ACTION_TOLERANCE) or not np.all(np.isfinite(a)):
        raise ActionBoundError(f"action outside [-{spec.action_bound}, {spec.action_bound}]; "
                               "clamp before stepping")
    return a


def clamp_action(spec: EnvSpec, a):
    return np.clip(a, -spec.action_bound, spec.action_bound)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def step(spec: EnvSpec, s, a):
    """Next state after applying action ``a`` in state ``s`` for one ``dt``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != spec.state_dim:
        raise ValueError(f"state dim {s.shape[-1]} != {spec.state_dim}")
    a = _check_action(spec, a)
    fam = spec.family
    if fam == "linear_system":
        return s @ spec.A.T + a @ spec.B.T
    if fam == "pendulum":
        theta, omega = s[..., 0], s[..., 1]
        u = a[..., 0]
        omega = omega + spec.dt * (
            -(GRAVITY / PENDULUM_LENGTH) * np.sin(theta)
            + u / (spec.mass * PENDULUM_LENGTH ** 2)
            - spec.damping * omega
        )
        omega = np.clip(omega, -OMEGA_LIMIT, OMEGA_LIMIT)
        theta = wrap_angle(theta + spec.dt * omega)
        return np.stack([theta, omega], axis=-1)
    half = spec.state_dim // 2
    p, v = s[..., :half], s[..., half:]
    force = a
    if fam == "chain_mass":
        force = a + spring_forces(p)
    v = (1.0 - spec.damping) * v + (force / spec.mass) * spec.dt
    v = np.clip(v, -STATE_LIMIT, STATE_LIMIT)
    p = np.clip(p + v * spec.dt, -STATE_LIMIT, STATE_LIMIT)
    return np.concatenate([p, v], axis=-1)


def spring_forces(q):
    """Forces from unit springs between neighbours; ``q`` are displacements from rest."""
    ext = SPRING_STIFFNESS * np.diff(q, axis=-1)
    force = np.zeros_like(q)
    force[..., :-1] += ext
    force[..., 1:] -= ext
    return force


def rollout(spec: EnvSpec, s0, policy, horizon):
    """Roll ``policy(state) -> action`` forward; returns (states, actions)."""
    states = [np.asarray(s0, dtype=np.float64)]
    actions = []
    for _ in range(horizon):
        a = clamp_action(spec, policy(states[-1]))
        actions.append(a)
        states.append(step(spec, states[-1], a))
    return np.stack(states), np.stack(actions)


def pendulum_energy(spec: EnvSpec, s):
    s = np.asarray(s)
    theta, omega = s[..., 0], s[..., 1]
    ml2 = spec.mass * PENDULUM_LENGTH ** 2
    return 0.5 * ml2 * omega ** 2 + spec.mass * GRAVITY * PENDULUM_LENGTH * (1.0 - np.cos(theta))


# ---------------------------------------------------------------------------
# reset, reward, reference policies


def reset_region(spec: EnvSpec):
    """(low, high) bounds of the uniform initial-state distribution."""
    n = spec.state_dim
    half = n // 2
    if spec.family == "point_mass":
        return (np.r_[np.full(half, -0.5), np.full(half, -0.1)],
                np.r_[np.full(half, 0.5), np.full(half, 0.1)])
    if spec.family == "pendulum":
        return np.array([-0.5, -0.5]), np.array([0.5, 0.5])
    if spec.family == "chain_mass":
        return (np.r_[np.full(half, -0.2), np.full(half, -0.1)],
                np.r_[np.full(half, 0.2), np.full(half, 0.1)])
    return np.full(n, -0.5), np.full(n, 0.5)


def reset(spec: EnvSpec, seed, count=None):
    """Seed-deterministic initial state(s) drawn uniformly from :func:`reset_region`."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    low, high = reset_region(spec)
    shape = (spec.state_dim,) if count is None else (count, spec.state_dim)
    return rng.uniform(low, high, size=shape)


def goal(spec: EnvSpec):
    if spec.family in ("point_mass", "chain_mass"):
        return np.full(spec.state_dim // 2, GOAL_POSITION)
    return np.zeros(spec.state_dim)


def reward(spec: EnvSpec, s, a):
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    fam = spec.family
    if fam in ("point_mass", "chain_mass"):
        half = spec.state_dim // 2
        dist = np.linalg.norm(s[..., :half] - goal(spec), axis=-1)
        return -dist - 0.01 * np.sum(a * a, axis=-1)
    if fam == "pendulum":
        return -(s[..., 0] ** 2 + 0.1 * s[..., 1] ** 2 + 0.01 * a[..., 0] ** 2)
    return -np.sum(s * s, axis=-1)


@functools.lru_cache(maxsize=64)
def _lqr_gain(A_key, B_key):
    A = np.asarray(A_key)
    B = np.asarray(B_key)
    Q = np.eye(A.shape[0])
    R = np.eye(B.shape[1])
    P = solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def lqr_gain(spec: EnvSpec):
    """Discrete-time LQR gain (Q = I, R = I) for a linear_system spec."""
    return _lqr_gain(spec.linear_A, spec.linear_B)


def reference_policy(spec: EnvSpec, s):
    """Analytic controller tuned for the physics in ``spec``.

    point_mass / chain_mass: PD toward the goal with gains scaled by the
    mass; pendulum: PD regulation of the angle to the rest position;
    linear_system: LQR.  Output is clamped to the action bound.
    """
    s = np.asarray(s, dtype=np.float64)
    fam = spec.family
    if fam in ("point_mass", "chain_mass"):
        half = spec.state_dim // 2
        p, v = s[..., :half], s[..., half:]
        a = spec.mass * (KP * (goal(spec) - p) - KD * v)
    elif fam == "pendulum":
        ml2 = spec.mass * PENDULUM_LENGTH ** 2
        a = (ml2 * (-KP * s[..., 0] - KD * s[..., 1]))[..., None]
    else:
        a = -s @ lqr_gain(spec).T
    return clamp_action(spec, a)


def reference_policy_for(spec: EnvSpec):
    return functools.partial(reference_policy, spec)


def random_policy(spec: EnvSpec, rng):
    def policy(s):
        shape = np.shape(s)[:-1] + (spec.action_dim,)
        return rng.uniform(-spec.action_bound, spec.action_bound, size=shape)

    return policy


# ---------------------------------------------------------------------------
# observations


@functools.lru_cache(maxsize=64)
def _encoder(state_dim, seed):
    spec = MlpSpec((state_dim, ENCODER_HIDDEN, 2 * state_dim), "tanh", "linear")
    params = mlp_init(spec, seed)
    rng = np.random.default_rng([seed, 1])
    params.weights[0] *= ENCODER_INPUT_GAIN
    params.biases[0][:] = rng.uniform(-0.5, 0.5, size=ENCODER_HIDDEN)
    for a in params.arrays():
        a.setflags(write=False)
    return params


def encoder_params(spec: EnvSpec):
    """Frozen random MLP used as the scrambled sensor (read-only arrays)."""
    return _encoder(spec.state_dim, spec.modality_seed)


def observe(spec: EnvSpec, s):
    s = np.asarray(s, dtype=np.float64)
    if spec.modality == "state":
        return s.copy()
    return mlp_forward(encoder_params(spec), s)


def encoder_expansion_bound(spec: EnvSpec, states, pairs=2000, seed=0):
    """Smallest ratio ||obs(s1) - obs(s2)|| / ||s1 - s2|| over sampled pairs.

    Includes every state's nearest sampled neighbour so close pairs are
    always checked.  A ratio bounded away from zero means the sensor does
    not fold distinct states together on this sample.
    """
    states = np.asarray(states, dtype=np.float64)
    obs = observe(spec, states)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(states), size=pairs)
    j = rng.integers(0, len(states), size=pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    sub = states[: min(len(states), 1000)]
    d = np.linalg.norm(sub[:, None, :] - sub[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    nn = np.argmin(d, axis=1)
    i = np.r_[i, np.arange(len(sub))]
    j = np.r_[j, nn]
    ds = np.linalg.norm(states[i] - states[j], axis=-1)
    do = np.linalg.norm(obs[i] - obs[j], axis=-1)
    ok = ds > 0
    return float(np.min(do[ok] / ds[ok]))


# ---------------------------------------------------------------------------
# morphology


def make_morphology_pair(base: EnvSpec, extra_links: int):
    """Return (spec_X, spec_Y, joint_map) for a chain with extra tail links.

    ``joint_map`` maps every X joint index to the Y joint whose action it
    copies at initialisation: shared joints map to themselves, novel tail
    joints map to the last Y joint.  Indices are 0-based.
    """
    if base.family != "chain_mass":
        raise ValueError("make_morphology_pair needs a chain_mass base spec")
    if extra_links < 1:
        raise ValueError(f"extra_links must be >= 1, got {extra_links}")
    k = base.num_links
    spec_y = base
    kx = k + extra_links
    spec_x = base.with_(num_links=kx, state_dim=2 * kx, action_dim=kx)
    joint_map = {j: min(j, k - 1) for j in range(kx)}
    return spec_x, spec_y, joint_map
