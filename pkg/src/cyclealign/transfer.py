"""Zero-shot policy transfer through learned correspondences, and its scoring."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from cyclealign import align, data, envs, nn
from cyclealign import forward_model as fm

CONDITIONS = ("transferred", "direct", "oracle_x", "oracle_y", "random")
BASELINES = ("direct", "random_G", "cyclegan_style", "no_discriminator", "init_only")


# ---------------------------------------------------------------------------
# inference


def transfer_step(model: align.AlignmentModel, policy_y, x, action_bound=None):
    """Act in X with a Y policy: y = G(x), u = policy(y), a = P(y, u), clamped."""
    x = np.asarray(x, dtype=np.float64)
    y = align.translate_observation(model, x)
    u = np.asarray(policy_y(y), dtype=np.float64)
    a = align.translate_action_to_X(model, y, u)
    if action_bound is not None:
        a = np.clip(a, -action_bound, action_bound)
    return a


def _resize(v, n):
    v = np.asarray(v, dtype=np.float64)
    k = v.shape[-1]
    if k >= n:
        return v[..., :n]
    pad = np.zeros(v.shape[:-1] + (n - k,))
    return np.concatenate([v, pad], axis=-1)


def _blockwise(family):
    return family in ("point_mass", "chain_mass")


def resize_state(spec_from: envs.EnvSpec, spec_to: envs.EnvSpec, s):
    """Fit a state vector to another morphology by zero padding or truncation.

    Position/velocity state layouts are resized block by block so the
    shared joints stay aligned.
    """
    if spec_from.state_dim == spec_to.state_dim:
        return np.asarray(s, dtype=np.float64)
    if _blockwise(spec_from.family) and _blockwise(spec_to.family):
        h = spec_from.state_dim // 2
        s = np.asarray(s, dtype=np.float64)
        n = spec_to.state_dim // 2
        return np.concatenate([_resize(s[..., :h], n), _resize(s[..., h:], n)], axis=-1)
    return _resize(s, spec_to.state_dim)


def direct_policy(spec_x: envs.EnvSpec, spec_y: envs.EnvSpec, policy_y):
    """Deploy a Y policy on X observations unchanged, zero padding/truncating vectors."""
    def policy(x):
        if spec_x.modality == "state" and spec_y.modality == "state":
            y = resize_state(spec_x, spec_y, x)
        else:
            y = _resize(x, spec_y.obs_dim)
        a = _resize(policy_y(y), spec_x.action_dim)
        return np.clip(a, -spec_x.action_bound, spec_x.action_bound)

    return policy


def transferred_policy(model, spec_x: envs.EnvSpec, policy_y):
    def policy(x):
        return transfer_step(model, policy_y, x, spec_x.action_bound)

    return policy


# ---------------------------------------------------------------------------
# rollouts


def _reset_states(spec, episodes, seed):
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 31]).spawn(episodes)]
    return np.stack([envs.reset(spec, r) for r in rngs])


def mean_return(spec: envs.EnvSpec, policy, episodes: int, horizon: int, seed: int,
                sees_state=False):
    """Mean undiscounted return of ``policy`` over ``episodes`` episodes stepped together.

    The policy acts on observations, or on the true state when
    ``sees_state``.  Reset states depend only on ``(spec, seed)``, so every
    condition sees the same starts.
    """
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must be >= 1")
    s = _reset_states(spec.with_(modality="state"), episodes, seed)
    total = np.zeros(episodes)
    for _ in range(horizon):
        obs = s if sees_state else envs.observe(spec, s)
        a = np.asarray(policy(obs), dtype=np.float64).reshape(episodes, spec.action_dim)
        total += envs.reward(spec, s, a)
        s = envs.step(spec, s, a)
    return float(total.mean())


@dataclass
class TransferReport:
    seeds: list
    episodes: int
    horizon: int
    returns: dict = field(default_factory=dict)
    state_l1: list | None = None

    def mean(self, condition):
        return float(np.mean(self.returns[condition]))

    def summary(self):
        out = {c: self.mean(c) for c in self.returns}
        if self.state_l1 is not None:
            out["state_l1"] = float(np.mean(self.state_l1))
        return out

    def to_dict(self):
        return {"seeds": list(self.seeds), "episodes": self.episodes, "horizon": self.horizon,
                "returns": {k: list(map(float, v)) for k, v in self.returns.items()},
                "state_l1": None if self.state_l1 is None else list(map(float, self.state_l1))}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["seeds"]), int(d["episodes"]), int(d["horizon"]),
                   {k: list(v) for k, v in d["returns"].items()}, d.get("state_l1"))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_csv(self):
        """One row per seed per condition; state L1 rows use condition ``state_l1``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "seed", "value"])
        for c in sorted(self.returns):
            for s, v in zip(self.seeds, self.returns[c]):
                w.writerow([c, s, repr(float(v))])
        if self.state_l1 is not None:
            for s, v in zip(self.seeds, self.state_l1):
                w.writerow(["state_l1", s, repr(float(v))])
        return buf.getvalue()


def evaluate_transfer(spec_x: envs.EnvSpec, model, policy_y, episodes: int, horizon: int, seeds,
                      spec_y: envs.EnvSpec | None = None) -> TransferReport:
    """Per-seed mean returns of the transferred policy and its reference points.

    ``model`` may be one AlignmentModel or a list with one per seed.  The
    direct condition deploys ``policy_y`` raw; ``oracle_x`` is the reference
    controller tuned for X; ``oracle_y`` (when ``spec_y`` is given) is
    ``policy_y`` in its own domain.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seeds must be nonempty")
    models = model if isinstance(model, (list, tuple)) else [model] * len(seeds)
    if len(models) != len(seeds):
        raise ValueError("need one model per seed")
    report = TransferReport(seeds, episodes, horizon, {c: [] for c in CONDITIONS})
    if spec_y is None:
        del report.returns["oracle_y"]
    spec_y_for_direct = spec_y if spec_y is not None else spec_x
    for s, m in zip(seeds, models):
        report.returns["transferred"].append(
            mean_return(spec_x, transferred_policy(m, spec_x, policy_y), episodes, horizon, s))
        report.returns["direct"].append(
            mean_return(spec_x, direct_policy(spec_x, spec_y_for_direct, policy_y), episodes, horizon, s))
        report.returns["oracle_x"].append(
            mean_return(spec_x, envs.reference_policy_for(spec_x), episodes, horizon, s, sees_state=True))
        if spec_y is not None:
            report.returns["oracle_y"].append(
                mean_return(spec_y, policy_y, episodes, horizon, s, sees_state=spec_y.modality == "state"))
        rng = np.random.default_rng([s, 41])
        report.returns["random"].append(
            mean_return(spec_x, envs.random_policy(spec_x, rng), episodes, horizon, s))
    return report


# ---------------------------------------------------------------------------
# state estimation


def evaluate_state_estimation(model: align.AlignmentModel, paired_eval: data.PairedEvalSet, scale=None):
    """Mean L1 between G(obs_X) and the true Y state, optionally per-coordinate scaled."""
    if model.identity_G:
        raise ValueError("state estimation is undefined for an identity observation map")
    pred = align.translate_observation(model, paired_eval.obs_x)
    err = np.abs(pred - paired_eval.states_y)
    if scale is not None:
        err = err / np.asarray(scale, dtype=np.float64)
    return float(err.mean())


# ---------------------------------------------------------------------------
# experiment pipeline and baselines


@dataclass
class TransferTask:
    """Everything needed to run one transfer experiment end to end."""

    spec_x: envs.EnvSpec
    spec_y: envs.EnvSpec
    train: align.TrainConfig
    forward: fm.ForwardConfig = field(default_factory=fm.ForwardConfig)
    triples_x: int = 20000
    triples_y: int = 20000
    collect_horizon: int = 20
    collect_mode_x: str = "random"
    collect_mode_y: str = "random"
    joint_map: dict | None = None
    eval_episodes: int = 50
    eval_horizon: int = 50
    seeds: tuple = (0, 1, 2, 3, 4)
    paired_eval: int = 1000

    def policy_y(self):
        return envs.reference_policy_for(self.spec_y)

    def obs_map(self):
        """Y-to-X observation coordinate copy map for morphology pairs, else None."""
        if self.joint_map is None or not (_blockwise(self.spec_x.family) and _blockwise(self.spec_y.family)):
            return None
        return state_correspondence(self.spec_x, self.spec_y, self.joint_map)


def state_correspondence(spec_x, spec_y, joint_map):
    """Each Y position/velocity coordinate copies the first X joint mapped onto it."""
    hx, hy = spec_x.state_dim // 2, spec_y.state_dim // 2
    first = {}
    for j in sorted(joint_map):
        first.setdefault(int(joint_map[j]), int(j))
    out = {}
    for i in range(hy):
        out[i] = first[i]
        out[hy + i] = hx + first[i]
    return out


def dataset_seeds(seed):
    """Collection seeds for (X, Y, paired eval, paired train) under one experiment seed."""
    return 1000 * seed + 1, 1000 * seed + 2, 1000 * seed + 3, 1000 * seed + 4


def prepare(task: TransferTask, seed: int):
    """Collect both unpaired datasets and train the frozen forward model."""
    sx, sy, _, _ = dataset_seeds(seed)
    h = task.collect_horizon
    dx = data.collect(task.spec_x, task.collect_mode_x, max(1, task.triples_x // h), h, sx)
    dy = data.collect(task.spec_y, task.collect_mode_y, max(1, task.triples_y // h), h, sy)
    F = fm.train_forward(dy, replace(task.forward, seed=seed))
    return dx, dy, F


def fit(task: TransferTask, seed: int, config: align.TrainConfig | None = None, prepared=None):
    dx, dy, F = prepared if prepared is not None else prepare(task, seed)
    config = replace(config or task.train, seed=seed)
    return align.train_alternating(dx, dy, F, config, joint_correspondence=task.joint_map,
                                   obs_correspondence=task.obs_map())


def paired_eval_for(task: TransferTask, seed: int):
    if task.spec_x.state_dim != task.spec_y.state_dim or task.spec_x.modality == task.spec_y.modality:
        return None
    return data.build_paired_eval(task.spec_x, task.spec_y, task.paired_eval, dataset_seeds(seed)[2])


def baseline_config(kind, config: align.TrainConfig):
    if kind == "cyclegan_style":
        return replace(config, lambda0=0.0)
    if kind == "no_discriminator":
        if config.mode != "cross_modality":
            raise ValueError("the discriminator ablation is defined for cross_modality runs")
        return replace(config, lambda2=0.0)
    return config


def run_baseline(kind: str, task: TransferTask, seeds=None, prepared=None) -> TransferReport:
    """Evaluate one method variant over the task's seeds.

    ``full`` is the complete method; ``cyclegan_style`` drops the dynamics
    term; ``no_discriminator`` drops the observation adversary;
    ``random_G`` and ``init_only`` skip training; ``direct`` reports raw
    deployment in the transferred slot.  ``prepared`` optionally maps seed
    to precomputed ``(dataset_x, dataset_y, F)``.
    """
    if kind not in BASELINES + ("full",):
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES + ('full',)}")
    seeds = list(task.seeds if seeds is None else seeds)
    models, l1s = [], []
    for s in seeds:
        dx, dy, F = (prepared or {}).get(s) or prepare(task, s)
        if kind in ("random_G", "init_only", "direct"):
            model = align.build_model(task.train.mode, dx, dy, task.joint_map, s, task.obs_map())
        else:
            model = fit(task, s, baseline_config(kind, task.train), (dx, dy, F)).model
        models.append(model)
        if not model.identity_G:
            paired = paired_eval_for(task, s)
            if paired is not None:
                l1s.append(evaluate_state_estimation(model, paired, data.standardization(dy)[1]))
    policy = task.policy_y()
    report = evaluate_transfer(task.spec_x, models, policy, task.eval_episodes, task.eval_horizon, seeds,
                               task.spec_y)
    if kind == "direct":
        report.returns["transferred"] = list(report.returns["direct"])
    report.state_l1 = l1s or None
    return report


def supervised_combination(paired_train: data.PairedEvalSet, dataset_x: data.TrajectoryDataset, F,
                           config: align.TrainConfig, use_dynamics: bool, paired_eval=None,
                           spec_x=None, policy_y=None, episodes=20, horizon=50, seeds=(0,),
                           steps=None):
    """Fit G on paired (obs_X, state_Y) examples, optionally adding the
    dynamics-cycle term on unpaired X triples.

    Returns ``(model, eval L1, mean transfer return)``; the last two are None
    when no evaluation split / environment is supplied.
    """
    if paired_eval is not None:
        data.check_disjoint(paired_train, paired_eval)
    fm_check = F.frozen or not use_dynamics
    if not fm_check:
        raise fm.FrozenModelError("dynamics-cycle loss needs a frozen forward model")
    ys = paired_train.states_y
    ds_y = data.TrajectoryDataset(b"\0" * 32, ys.copy(), np.zeros((len(ys), F.action_dim)), ys.copy(),
                                  "random", 0)
    model = align.build_model("cross_modality", dataset_x, ds_y, seed=config.seed)
    model.nets.pop("D_Y")
    G = model.G
    adam = nn.AdamState.for_params(G.params.arrays())
    batch = min(config.batch, len(paired_train), len(dataset_x))
    s_pair = data.BatchSampler(len(paired_train), batch, [config.seed, 21])
    s_x = data.BatchSampler(len(dataset_x), batch, [config.seed, 22])
    total_steps = steps if steps is not None else config.epochs * max(1, len(dataset_x) // batch)
    per_decay = max(1, total_steps // max(1, config.epochs)) * config.decay_every
    for k in range(total_steps):
        lr = config.lr * config.lr_decay ** (k // per_decay)
        idx = s_pair.next_indices()
        tape = nn.Tape()
        pred = align.apply_on_tape(G, tape.constant(paired_train.obs_x[idx]), tape, True)
        loss = nn.l1_loss(pred, paired_train.states_y[idx])
        if use_dynamics and config.lambda0 > 0:
            j = s_x.next_indices()
            dyn = align.dynamics_cycle_loss(model, F, dataset_x.obs[j], dataset_x.actions[j],
                                            dataset_x.next_obs[j], tape, train=("G",))
            loss = nn.weighted_sum([(1.0, loss), (config.lambda0, dyn)])
        if not np.isfinite(loss.value):
            raise FloatingPointError(f"non-finite supervised loss at step {k}")
        nn.adam_step(G.params, nn.backprop(tape, loss), adam, lr)
    l1 = evaluate_state_estimation(model, paired_eval) if paired_eval is not None else None
    ret = None
    if spec_x is not None and policy_y is not None:
        ret = float(np.mean([mean_return(spec_x, transferred_policy(model, spec_x, policy_y), episodes,
                                         horizon, s) for s in seeds]))
    return model, l1, ret
