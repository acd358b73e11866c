"""Learned correspondences between an unpaired source domain X and target domain Y.

G maps X observations to Y states, H maps X actions to Y actions, and P maps
Y actions back to X actions.  D_Y, D_U and D_A are discriminators on Y
states, Y actions and X actions.  Training alternates between the action
maps (phase A) and the observation map (phase B), always through a frozen
forward model of Y.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from cyclealign import data, forward_model, nn

G_HIDDEN = (256, 64, 32)
MAP_HIDDEN = (32, 64, 128, 32)
DISC_HIDDEN = (32, 64, 128, 32)
MODES = ("cross_physics", "cross_modality", "joint")
ROLES = ("G", "H", "P", "D_Y", "D_U", "D_A")
MAPPERS = ("G", "H", "P")


class ConfigError(ValueError):
    """Inconsistent training configuration."""


# ---------------------------------------------------------------------------
# networks


@dataclass(eq=False)
class Net:
    """An MLP wrapped in fixed input/output affine maps and an optional skip.

    ``out = out_mean + out_std * mlp((inp - in_mean) / in_std) + skip_part``
    where ``skip_part = inp[:, -k:] @ skip.T`` copies selected trailing input
    columns (the action block) straight to the output.
    """

    params: nn.MlpParams
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    skip: np.ndarray | None = None

    @property
    def input_dim(self):
        return self.params.spec.input_dim

    @property
    def output_dim(self):
        return self.params.spec.output_dim

    def constants(self):
        extra = [] if self.skip is None else [self.skip]
        return [self.in_mean, self.in_std, self.out_mean, self.out_std] + extra

    def copy(self):
        return Net(self.params.copy(), *[c.copy() for c in self.constants()[:4]],
                   None if self.skip is None else self.skip.copy())

    def digest(self):
        h = hashlib.sha256(self.params.digest().encode())
        for c in self.constants():
            h.update(np.ascontiguousarray(c, dtype="<f8").tobytes())
        return h.hexdigest()


def _check_width(value, width, what):
    if np.shape(value)[-1] != width:
        raise nn.ShapeError(f"{what}: expected width {width}, got shape {np.shape(value)}")


def apply(net: Net, inp):
    """Evaluate a :class:`Net` on numpy input (vector or batch)."""
    inp = np.asarray(inp, dtype=np.float64)
    _check_width(inp, net.input_dim, "network input")
    out = net.out_mean + net.out_std * nn.mlp_forward(net.params, (inp - net.in_mean) / net.in_std)
    if net.skip is not None:
        out = out + inp[..., -net.skip.shape[1]:] @ net.skip.T
    return out


def apply_on_tape(net: Net, inp: nn.Var, tape: nn.Tape, trainable: bool) -> nn.Var:
    _check_width(inp.value, net.input_dim, "network input")
    z = nn.affine(inp, 1.0 / net.in_std, -net.in_mean / net.in_std)
    out = nn.affine(nn.mlp_forward(net.params, z, tape, trainable=trainable), net.out_std, net.out_mean)
    if net.skip is not None:
        k = net.skip.shape[1]
        cols = nn.take_columns(inp, range(net.input_dim - k, net.input_dim))
        out = nn.add(out, nn.matmul_const(cols, net.skip))
    return out


def _stats(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows.mean(axis=0), np.maximum(rows.std(axis=0), 1e-6)


def _new_net(sizes, hidden, seed, in_stats=None, out_stats=None, skip=None, zero_last=False):
    spec = nn.MlpSpec(tuple(sizes), hidden, "linear")
    params = nn.mlp_init(spec, seed)
    if zero_last:
        params.weights[-1][:] = 0.0
    d_in, d_out = sizes[0], sizes[-1]
    in_mean, in_std = in_stats if in_stats is not None else (np.zeros(d_in), np.ones(d_in))
    out_mean, out_std = out_stats if out_stats is not None else (np.zeros(d_out), np.ones(d_out))
    return Net(params, np.array(in_mean, dtype=np.float64), np.array(in_std, dtype=np.float64),
               np.array(out_mean, dtype=np.float64), np.array(out_std, dtype=np.float64),
               None if skip is None else np.array(skip, dtype=np.float64))


def copy_matrix(out_dim, in_dim, correspondence):
    """0/1 matrix whose row ``i`` selects input column ``correspondence[i]``."""
    M = np.zeros((out_dim, in_dim))
    for i in range(out_dim):
        if i not in correspondence:
            raise ValueError(f"no correspondence for output coordinate {i}")
        j = correspondence[i]
        if not 0 <= j < in_dim:
            raise ValueError(f"correspondence {i} -> {j} is out of range for input width {in_dim}")
        M[i, j] = 1.0
    return M


def _action_correspondences(act_x, act_y, joint_correspondence):
    """Copy maps for H (Y coordinate <- X coordinate) and P (X <- Y)."""
    if act_x == act_y and joint_correspondence is None:
        ident = {i: i for i in range(act_x)}
        return ident, ident
    if joint_correspondence is None:
        raise ValueError(f"action dims differ ({act_x} vs {act_y}); a joint correspondence is required")
    p_map = {int(k): int(v) for k, v in joint_correspondence.items()}
    missing = [j for j in range(act_x) if j not in p_map]
    if missing:
        raise ValueError(f"joint correspondence is missing X joints {missing}")
    # each Y joint is read back from the first X joint mapped onto it
    h_map = {}
    for j in sorted(p_map):
        h_map.setdefault(p_map[j], j)
    unmapped = [i for i in range(act_y) if i not in h_map]
    if unmapped:
        raise ValueError(f"Y joints {unmapped} have no corresponding X joint")
    return h_map, p_map


def init_action_maps(obs_x, act_x, obs_y, act_y, joint_correspondence=None, seed=0,
                     stats=None):
    """Initial H and P realising the action correspondence exactly.

    The MLP branches start with a zero last layer, so at initialisation
    ``H(x, a) = C_H a`` and ``P(y, u) = C_P u`` for the copy matrices given by
    the correspondence (the identity when action dims agree).
    ``joint_correspondence`` maps each X joint to the Y joint it copies.
    """
    h_map, p_map = _action_correspondences(act_x, act_y, joint_correspondence)
    stats = stats or {}
    H = _new_net((obs_x + act_x,) + MAP_HIDDEN + (act_y,), "relu", [seed, 2],
                 stats.get("H_in"), stats.get("H_out"), copy_matrix(act_y, act_x, h_map), zero_last=True)
    P = _new_net((obs_y + act_y,) + MAP_HIDDEN + (act_x,), "relu", [seed, 3],
                 stats.get("P_in"), stats.get("P_out"), copy_matrix(act_x, act_y, p_map), zero_last=True)
    return H, P


@dataclass(eq=False)
class AlignmentModel:
    obs_x: int
    act_x: int
    obs_y: int
    act_y: int
    identity_G: bool
    identity_HP: bool
    nets: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.identity_G and self.obs_x != self.obs_y:
            raise nn.ShapeError("identity G needs equal observation dims")
        if self.identity_HP and self.act_x != self.act_y:
            raise nn.ShapeError("identity H/P needs equal action dims")
        unknown = set(self.nets) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown network roles {sorted(unknown)}")

    def __getattr__(self, name):
        if name in ROLES:
            return self.__dict__.get("nets", {}).get(name)
        raise AttributeError(name)

    def copy(self):
        return AlignmentModel(self.obs_x, self.act_x, self.obs_y, self.act_y, self.identity_G,
                              self.identity_HP, {k: v.copy() for k, v in self.nets.items()})

    def digests(self):
        return {k: v.digest() for k, v in sorted(self.nets.items())}


def build_model(mode, dataset_x: data.TrajectoryDataset, dataset_y: data.TrajectoryDataset,
                joint_correspondence=None, seed=0, obs_correspondence=None) -> AlignmentModel:
    """Construct the networks a training mode needs, normalised by dataset statistics.

    cross_physics bypasses G (shared observation space); cross_modality
    bypasses H and P (shared action space).  Raw data statistics only set
    fixed input/output affine maps; they never pair samples across domains.
    ``obs_correspondence`` (Y coordinate -> X coordinate) makes G start as
    the matching coordinate copy, like H and P.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    ox, ax, oy, ay = dataset_x.obs_dim, dataset_x.action_dim, dataset_y.obs_dim, dataset_y.action_dim
    identity_G = mode == "cross_physics"
    identity_HP = mode == "cross_modality"
    x_stats = _stats(np.concatenate([dataset_x.obs, dataset_x.next_obs]))
    y_stats = _stats(np.concatenate([dataset_y.obs, dataset_y.next_obs]))
    ax_stats = _stats(dataset_x.actions)
    ay_stats = _stats(dataset_y.actions)
    nets = {}
    if not identity_G:
        if obs_correspondence is None:
            nets["G"] = _new_net((ox,) + G_HIDDEN + (oy,), "relu", [seed, 1], x_stats, y_stats)
        else:
            nets["G"] = _new_net((ox,) + G_HIDDEN + (oy,), "relu", [seed, 1], x_stats,
                                 (np.zeros(oy), y_stats[1]),
                                 copy_matrix(oy, ox, {int(k): int(v) for k, v in obs_correspondence.items()}),
                                 zero_last=True)
        nets["D_Y"] = _new_net((oy,) + DISC_HIDDEN + (1,), "relu", [seed, 4], y_stats)
    if not identity_HP:
        stats = {
            "H_in": (np.r_[x_stats[0], ax_stats[0]], np.r_[x_stats[1], ax_stats[1]]),
            "H_out": (np.zeros(ay), ay_stats[1]),
            "P_in": (np.r_[y_stats[0], ay_stats[0]], np.r_[y_stats[1], ay_stats[1]]),
            "P_out": (np.zeros(ax), ax_stats[1]),
        }
        nets["H"], nets["P"] = init_action_maps(ox, ax, oy, ay, joint_correspondence, seed, stats)
        nets["D_U"] = _new_net((ay,) + DISC_HIDDEN + (1,), "relu", [seed, 5], ay_stats)
        nets["D_A"] = _new_net((ax,) + DISC_HIDDEN + (1,), "relu", [seed, 6], ax_stats)
    return AlignmentModel(ox, ax, oy, ay, identity_G, identity_HP, nets)


# ---------------------------------------------------------------------------
# translation


def translate_observation(model: AlignmentModel, x):
    _check_width(x, model.obs_x, "translate_observation")
    if model.identity_G:
        return np.array(x, dtype=np.float64)
    return apply(model.G, x)


def translate_action_to_Y(model: AlignmentModel, x, a):
    _check_width(x, model.obs_x, "translate_action_to_Y observation")
    _check_width(a, model.act_x, "translate_action_to_Y action")
    if model.identity_HP:
        return np.array(a, dtype=np.float64)
    return apply(model.H, np.concatenate([np.asarray(x, float), np.asarray(a, float)], axis=-1))


def translate_action_to_X(model: AlignmentModel, y, u):
    _check_width(y, model.obs_y, "translate_action_to_X observation")
    _check_width(u, model.act_y, "translate_action_to_X action")
    if model.identity_HP:
        return np.array(u, dtype=np.float64)
    return apply(model.P, np.concatenate([np.asarray(y, float), np.asarray(u, float)], axis=-1))


def _G_on_tape(model, x: nn.Var, tape, trainable):
    if model.identity_G:
        return x
    return apply_on_tape(model.G, x, tape, trainable)


def _H_on_tape(model, x, a, tape, trainable):
    if model.identity_HP:
        return a
    return apply_on_tape(model.H, nn.concat([x, a]), tape, trainable)


def _P_on_tape(model, y, u, tape, trainable):
    if model.identity_HP:
        return u
    return apply_on_tape(model.P, nn.concat([y, u]), tape, trainable)


# ---------------------------------------------------------------------------
# losses


def adversarial_pass(generator_outputs, real_samples, D: Net, tape: nn.Tape | None = None,
                     train_D=False):
    """(generator loss, discriminator loss) for one discriminator.

    With a tape, ``generator_outputs`` and ``real_samples`` may be Vars;
    gradients reach the generator only through the fake batch.
    """
    if tape is None:
        fake = np.asarray(generator_outputs, dtype=np.float64)
        real = np.asarray(real_samples, dtype=np.float64)
        if len(fake) == 0 or len(real) == 0:
            raise nn.ShapeError("adversarial_pass: empty batch")
        _check_width(fake, D.input_dim, "adversarial_pass fake batch")
        _check_width(real, D.input_dim, "adversarial_pass real batch")
        disc, gen = nn.gan_losses(apply(D, real), apply(D, fake))
        return gen, disc
    fake, real = tape.lift(generator_outputs), tape.lift(real_samples)
    if len(fake.value) == 0 or len(real.value) == 0:
        raise nn.ShapeError("adversarial_pass: empty batch")
    disc, gen = nn.gan_losses(apply_on_tape(D, real, tape, train_D), apply_on_tape(D, fake, tape, train_D))
    return gen, disc


def domain_cycle_loss(model: AlignmentModel, x, a, y_for_P, tape: nn.Tape | None = None,
                      train=()):
    """Mean L1 of ``P(y, H(x, a)) - a``."""
    if tape is None:
        _check_width(a, model.act_x, "domain_cycle_loss actions")
        u = translate_action_to_Y(model, x, a)
        return nn.l1_loss(translate_action_to_X(model, y_for_P, u), a)
    x, a, y = tape.lift(x), tape.lift(a), tape.lift(y_for_P)
    _check_width(a.value, model.act_x, "domain_cycle_loss actions")
    u = _H_on_tape(model, x, a, tape, "H" in train)
    return nn.l1_loss(_P_on_tape(model, y, u, tape, "P" in train), a)


def _require_frozen(F):
    if not F.frozen:
        raise forward_model.FrozenModelError(
            "dynamics-cycle loss needs a frozen forward model; freeze() it first")


def dynamics_cycle_loss(model: AlignmentModel, F, x, a, x_next, tape: nn.Tape | None = None,
                        train=()):
    """Mean L1 of ``G(x') - F(G(x), H(x, a))``; gradients reach G and H only."""
    _require_frozen(F)
    if tape is None:
        y = translate_observation(model, x)
        y_next = translate_observation(model, x_next)
        u = translate_action_to_Y(model, x, a)
        return nn.l1_loss(y_next, forward_model.predict(F, y, u))
    x, a, x_next = tape.lift(x), tape.lift(a), tape.lift(x_next)
    n = len(x.value)
    both = _G_on_tape(model, nn.stack_rows([x, x_next]), tape, "G" in train)
    y, y_next = nn.take_rows(both, 0, n), nn.take_rows(both, n, 2 * n)
    u = _H_on_tape(model, x, a, tape, "H" in train)
    return nn.l1_loss(y_next, forward_model.predict_on_tape(F, y, u, tape, trainable=False))


@dataclass
class Batches:
    """One X batch and one (independently drawn) Y batch."""

    x: np.ndarray
    a: np.ndarray
    x_next: np.ndarray
    y: np.ndarray
    u: np.ndarray
    y_next: np.ndarray


TERMS = ("dyn_cycle", "adv_H", "adv_P", "dom_cycle", "adv_G")


def _term_weights(lambda0, lambda1, lambda2):
    return {"dyn_cycle": lambda0, "adv_H": lambda1, "adv_P": lambda1, "dom_cycle": lambda1,
            "adv_G": lambda2}


def _check_lambdas(*lams):
    for lam in lams:
        if not np.isfinite(lam) or lam < 0:
            raise ConfigError(f"loss weights must be finite and nonnegative, got {lam}")


def full_loss(model: AlignmentModel, F, batches: Batches, config, tape: nn.Tape | None = None,
              train=(), lambdas=None):
    """Weighted objective and its per-term breakdown.

    total = l0 * dyn_cycle + l1 * (adv_H + adv_P + dom_cycle) + l2 * adv_G.
    Terms whose weight is zero (or whose networks are bypassed) are not
    computed and are absent from the breakdown.  Returns ``(total, breakdown)``
    where ``total`` is a float, or a Var when a tape is given.
    """
    lam = lambdas if lambdas is not None else (config.lambda0, config.lambda1, config.lambda2)
    _check_lambdas(*lam)
    weights = _term_weights(*lam)
    own_tape = tape is None
    tape = tape or nn.Tape()
    terms = {}
    if weights["dyn_cycle"] > 0:
        terms["dyn_cycle"] = dynamics_cycle_loss(model, F, batches.x, batches.a, batches.x_next, tape, train)
    if weights["adv_H"] > 0 and not model.identity_HP:
        u_fake = _H_on_tape(model, tape.constant(batches.x), tape.constant(batches.a), tape, "H" in train)
        terms["adv_H"] = adversarial_pass(u_fake, batches.u, model.D_U, tape)[0]
        a_fake = _P_on_tape(model, tape.constant(batches.y), tape.constant(batches.u), tape, "P" in train)
        terms["adv_P"] = adversarial_pass(a_fake, batches.a, model.D_A, tape)[0]
        terms["dom_cycle"] = domain_cycle_loss(model, batches.x, batches.a,
                                               _y_for_P(model, batches.x), tape, train)
    if weights["adv_G"] > 0 and not model.identity_G:
        y_fake = _G_on_tape(model, tape.constant(batches.x), tape, "G" in train)
        terms["adv_G"] = adversarial_pass(y_fake, batches.y, model.D_Y, tape)[0]
    if not terms:
        zero = tape.constant(np.float64(0.0))
        return (0.0 if own_tape else zero), {}
    total = nn.weighted_sum([(weights[k], v) for k, v in terms.items()])
    breakdown = {k: float(v.value) for k, v in terms.items()}
    return (float(total.value) if own_tape else total), breakdown


def _y_for_P(model, x):
    # the observation fed to P in the domain cycle: x itself when observations
    # are shared, otherwise G(x) as a constant so no gradient reaches G
    if model.identity_G:
        return x
    return apply(model.G, x)


def discriminator_loss(model: AlignmentModel, batches: Batches, phase: str, tape: nn.Tape):
    """Summed discriminator losses for a phase, on detached generator outputs."""
    parts = []
    if phase == "A":
        u_fake = translate_action_to_Y(model, batches.x, batches.a)
        parts.append(adversarial_pass(u_fake, batches.u, model.D_U, tape, train_D=True)[1])
        a_fake = translate_action_to_X(model, batches.y, batches.u)
        parts.append(adversarial_pass(a_fake, batches.a, model.D_A, tape, train_D=True)[1])
    else:
        y_fake = translate_observation(model, batches.x)
        parts.append(adversarial_pass(y_fake, batches.y, model.D_Y, tape, train_D=True)[1])
    return nn.weighted_sum([(1.0, p) for p in parts])


# ---------------------------------------------------------------------------
# configuration and training


@dataclass
class TrainConfig:
    mode: str = "cross_modality"
    lambda0: float = 200.0
    lambda1: float = 0.0
    lambda2: float = 3.0
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 50
    steps_per_epoch: int = 0
    outer_rounds: int = 10
    phase_steps_a: int = 5000
    phase_steps_b: int = 5000
    lr_decay: float = 2.0 / 3.0
    decay_every: int = 10
    seed: int = 0
    log_every: int = 50

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        _check_lambdas(self.lambda0, self.lambda1, self.lambda2)
        if self.mode == "cross_modality" and self.lambda1 != 0:
            raise ConfigError("cross_modality shares the action space: lambda1 must be 0")
        if self.mode == "cross_physics" and self.lambda2 != 0:
            raise ConfigError("cross_physics shares the observation space: lambda2 must be 0")
        if not (self.lr > 0 and np.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        for name in ("batch", "epochs", "outer_rounds", "decay_every", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("steps_per_epoch", "phase_steps_a", "phase_steps_b"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def schedule(config: TrainConfig, dataset_size: int):
    """Yield ``(phase, lr)`` for every optimizer step, in order.

    Single-phase modes run ``epochs`` epochs with the rate decayed every
    ``decay_every`` epochs; joint mode runs ``outer_rounds`` rounds of
    ``phase_steps_a`` A-steps then ``phase_steps_b`` B-steps, decaying by round.
    """
    if config.mode == "joint":
        for r in range(config.outer_rounds):
            lr = config.lr * config.lr_decay ** (r // config.decay_every)
            for _ in range(config.phase_steps_a):
                yield "A", lr
            for _ in range(config.phase_steps_b):
                yield "B", lr
        return
    phase = "A" if config.mode == "cross_physics" else "B"
    steps = config.steps_per_epoch or max(1, dataset_size // config.batch)
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** (epoch // config.decay_every)
        for _ in range(steps):
            yield phase, lr


PHASE_MAPPERS = {"A": ("H", "P"), "B": ("G",)}
PHASE_DISCS = {"A": ("D_U", "D_A"), "B": ("D_Y",)}


@dataclass
class TrainResult:
    model: AlignmentModel
    traces: dict
    steps: dict
    phase_order: list
    probe_dyn: list


def _phase_lambdas(config, phase):
    if phase == "A":
        return config.lambda0, config.lambda1, 0.0
    return config.lambda0, 0.0, config.lambda2


def _params_of(model, roles):
    out = []
    for r in roles:
        if r in model.nets:
            out.extend(model.nets[r].params.arrays())
    return out


def train_alternating(dataset_x: data.TrajectoryDataset, dataset_y: data.TrajectoryDataset, F,
                      config: TrainConfig, model: AlignmentModel | None = None,
                      joint_correspondence=None, on_log=None, check_freezes=False,
                      obs_correspondence=None) -> TrainResult:
    """Alternating training of the mapped networks through the frozen F.

    Each step draws an X batch and an independent Y batch, updates the
    phase's discriminators once on their own loss, then updates the phase's
    mapped networks once on the generator side of the weighted objective.
    Traces record, every ``log_every`` steps of each phase, the breakdown and
    total.  ``probe_dyn`` tracks the dynamics-cycle loss on a fixed X batch.
    A non-finite loss raises ``FloatingPointError`` naming the step.
    """
    config.validate()
    _require_frozen(F)
    if dataset_x.obs_dim == 0 or len(dataset_x) == 0 or len(dataset_y) == 0:
        raise ValueError("datasets must be nonempty")
    if F.state_dim != dataset_y.obs_dim or F.action_dim != dataset_y.action_dim:
        raise nn.ShapeError("forward model does not match domain Y's dimensions")
    batch = min(config.batch, len(dataset_x), len(dataset_y))
    if model is None:
        model = build_model(config.mode, dataset_x, dataset_y, joint_correspondence, config.seed,
                            obs_correspondence)
    sampler_x = data.BatchSampler(len(dataset_x), batch, [config.seed, 11])
    sampler_y = data.BatchSampler(len(dataset_y), batch, [config.seed, 12])
    probe_idx = np.random.default_rng([config.seed, 13]).choice(len(dataset_x), size=min(256, len(dataset_x)),
                                                                replace=False)
    probe = (dataset_x.obs[probe_idx], dataset_x.actions[probe_idx], dataset_x.next_obs[probe_idx])
    adam = {r: nn.AdamState.for_params(net.params.arrays()) for r, net in model.nets.items()}
    F_digest = F.digest()
    traces = {"A": [], "B": []}
    counts = {"A": 0, "B": 0}
    order = []
    probe_dyn = []

    def record_probe():
        probe_dyn.append(float(dynamics_cycle_loss(model, F, *probe)))

    before = {}

    def verify_frozen():
        for r, dg in before.items():
            if model.nets[r].digest() != dg:
                raise AssertionError(f"{r} changed during phase {order[-1]}")

    record_probe()
    for step, (phase, lr) in enumerate(schedule(config, len(dataset_x))):
        if not order or order[-1] != phase:
            if check_freezes and order:
                verify_frozen()
            order.append(phase)
            if check_freezes:
                frozen = [r for r in ROLES if r in model.nets and r not in
                          PHASE_MAPPERS[phase] + PHASE_DISCS[phase]]
                before = {r: model.nets[r].digest() for r in frozen}
        lams = _phase_lambdas(config, phase)
        x, a, x_next = data.sample_batch(dataset_x, batch, sampler_x)
        y, u, y_next = data.sample_batch(dataset_y, batch, sampler_y)
        b = Batches(x, a, x_next, y, u, y_next)

        discs = [r for r in PHASE_DISCS[phase] if r in model.nets]
        needs_disc = (phase == "A" and lams[1] > 0) or (phase == "B" and lams[2] > 0)
        if discs and needs_disc:
            tape = nn.Tape()
            d_loss = discriminator_loss(model, b, phase, tape)
            if not np.isfinite(d_loss.value):
                raise FloatingPointError(f"non-finite discriminator loss at step {step}")
            grads = nn.backprop(tape, d_loss)
            for r in discs:
                nn.adam_step(model.nets[r].params, grads, adam[r], lr)

        mappers = [r for r in PHASE_MAPPERS[phase] if r in model.nets]
        tape = nn.Tape()
        total, breakdown = full_loss(model, F, b, config, tape, train=mappers, lambdas=lams)
        if not np.isfinite(total.value):
            raise FloatingPointError(f"non-finite alignment loss at step {step}")
        if mappers and tape.marked():
            grads = nn.backprop(tape, total)
            for r in mappers:
                nn.adam_step(model.nets[r].params, grads, adam[r], lr)
        counts[phase] += 1
        if counts[phase] % config.log_every == 0 or counts[phase] == 1:
            row = {"step": counts[phase], "total": float(total.value), **breakdown}
            traces[phase].append(row)
            if on_log is not None:
                on_log(phase, row)
    if check_freezes and order:
        verify_frozen()
    record_probe()
    if F.digest() != F_digest:
        raise AssertionError("forward model changed during alignment training")
    return TrainResult(model, traces, counts, order, probe_dyn)


# ---------------------------------------------------------------------------
# checkpoint: CYAM container of role-keyed parameter blocks

MODEL_MAGIC = b"CYAM"
MODEL_VERSION = 1
_ROLE_CODES = {r: i for i, r in enumerate(ROLES)}


def _write_array(stream, a):
    a = np.ascontiguousarray(a, dtype="<f8")
    stream.write(struct.pack("<II", *(a.shape if a.ndim == 2 else (1, a.size))))
    stream.write(a.tobytes())


def _read_array(stream, what, vector=False):
    rows, cols = struct.unpack("<II", nn._read_exact(stream, 8, what))
    raw = nn._read_exact(stream, 8 * rows * cols, what)
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a if vector else a.reshape(rows, cols)


def write_model(stream, model: AlignmentModel, config: TrainConfig | None = None):
    stream.write(MODEL_MAGIC)
    stream.write(struct.pack("<I", MODEL_VERSION))
    flags = (1 if model.identity_G else 0) | (2 if model.identity_HP else 0)
    stream.write(struct.pack("<B4I", flags, model.obs_x, model.act_x, model.obs_y, model.act_y))
    blob = json.dumps(config.to_dict() if config else None, sort_keys=True).encode()
    stream.write(struct.pack("<I", len(blob)))
    stream.write(blob)
    roles = [r for r in ROLES if r in model.nets]
    stream.write(struct.pack("<I", len(roles)))
    for r in roles:
        net = model.nets[r]
        stream.write(struct.pack("<BB", _ROLE_CODES[r], 0 if net.skip is None else 1))
        nn.write_params(stream, net.params)
        for c in net.constants():
            _write_array(stream, c)


def read_model(stream):
    """Return ``(model, config)``; ``config`` is None when none was stored."""
    magic = stream.read(4)
    if len(magic) < 4:
        raise nn.FormatError("truncated: model file shorter than magic")
    if magic != MODEL_MAGIC:
        raise nn.FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    (version,) = struct.unpack("<I", nn._read_exact(stream, 4, "version"))
    if version != MODEL_VERSION:
        raise nn.FormatError(f"version mismatch: file has {version}, reader supports {MODEL_VERSION}")
    flags, ox, ax, oy, ay = struct.unpack("<B4I", nn._read_exact(stream, 17, "model header"))
    (n,) = struct.unpack("<I", nn._read_exact(stream, 4, "config size"))
    cfg = json.loads(nn._read_exact(stream, n, "config").decode())
    (count,) = struct.unpack("<I", nn._read_exact(stream, 4, "network count"))
    codes = {i: r for r, i in _ROLE_CODES.items()}
    nets = {}
    for _ in range(count):
        code, has_skip = struct.unpack("<BB", nn._read_exact(stream, 2, "network header"))
        if code not in codes:
            raise nn.FormatError(f"unknown network role code {code}")
        params = nn.read_params(stream)
        consts = [_read_array(stream, "normalization", vector=True) for _ in range(4)]
        skip = _read_array(stream, "skip matrix") if has_skip else None
        nets[codes[code]] = Net(params, *consts, skip)
    model = AlignmentModel(ox, ax, oy, ay, bool(flags & 1), bool(flags & 2), nets)
    return model, (TrainConfig.from_dict(cfg) if cfg is not None else None)


def model_to_bytes(model, config=None) -> bytes:
    buf = io.BytesIO()
    write_model(buf, model, config)
    return buf.getvalue()


def model_from_bytes(blob: bytes):
    stream = io.BytesIO(blob)
    out = read_model(stream)
    if stream.read(1):
        raise nn.FormatError("trailing bytes after model")
    return out


def save_model(model, path, config=None):
    data.write_atomic(path, model_to_bytes(model, config))


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
