"""Run configuration: a line-oriented ``section.key = value`` document.

Blank lines and ``#`` comments are ignored.  Keys are strict: an unknown key
is an error with a closest-match suggestion.  Lines prefixed ``ci.`` hold
desk-scale overrides that apply only when ``scale = ci``.
"""

from __future__ import annotations

import ast
import difflib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from cyclealign import align, envs, transfer
from cyclealign import forward_model as fm


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every diagnostic found."""

    def __init__(self, problems):
        self.problems = list(problems) if not isinstance(problems, str) else [problems]
        super().__init__("\n".join(self.problems))


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _opt_float(v):
    return None if v is None else _float(v)


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _int_list(v):
    if v == "":
        return []
    if isinstance(v, int) and not isinstance(v, bool):
        return [v]
    if isinstance(v, (list, tuple)) and all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        return list(v)
    raise TypeError("expected a comma-separated list of integers")


def _str_list(v):
    if isinstance(v, str):
        return [s for s in (p.strip() for p in v.split(",")) if s]
    if isinstance(v, (list, tuple)) and all(isinstance(x, str) for x in v):
        return list(v)
    raise TypeError("expected a comma-separated list of names")


def _matrix(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)) and all(isinstance(r, (list, tuple)) for r in v):
        return [[_float(x) for x in r] for r in v]
    raise TypeError("expected a nested list of numbers")


_ENV_KEYS = {
    "family": (_str, None), "dims": (_int, 1), "links": (_int, 3), "mass": (_float, 1.0),
    "damping": (_float, 0.0), "dt": (_opt_float, None), "action_bound": (_opt_float, None),
    "modality": (_str, "state"), "modality_seed": (_int, 0), "A": (_matrix, None), "B": (_matrix, None),
}

SCHEMA = {
    "out_dir": (_str, "runs/default"),
    "scale": (_str, "full"),
    "data.triples_x": (_int, 50000), "data.triples_y": (_int, 50000), "data.horizon": (_int, 50),
    "data.mode_x": (_str, "random"), "data.mode_y": (_str, "random"), "data.seed": (_int, 0),
    "forward.epochs": (_int, 20), "forward.lr": (_float, 1e-3), "forward.halve_every": (_int, 3),
    "forward.batch": (_int, 32), "forward.seed": (_int, 0),
    "align.mode": (_str, "cross_modality"), "align.lambda0": (_float, 200.0),
    "align.lambda1": (_float, 0.0), "align.lambda2": (_float, 3.0), "align.lr": (_float, 1e-3),
    "align.batch": (_int, 32), "align.epochs": (_int, 50), "align.steps_per_epoch": (_int, 0),
    "align.e": (_int, 10), "align.e1": (_int, 5000), "align.e2": (_int, 5000),
    "align.lr_decay": (_float, 2.0 / 3.0), "align.decay_every": (_int, 10), "align.seed": (_int, 0),
    "align.log_every": (_int, 50),
    "eval.episodes": (_int, 50), "eval.horizon": (_int, 50), "eval.seeds": (_int_list, [0, 1, 2, 3, 4]),
    "eval.paired_count": (_int, 1000), "eval.baselines": (_str_list, []),
    "eval.dataset_sizes": (_int_list, []),
}
for _d in ("X", "Y"):
    for _k, _v in _ENV_KEYS.items():
        SCHEMA[f"env.{_d}.{_k}"] = _v
SCALES = ("full", "ci")
DATA_MODES = ("random", "reference", "noisy_reference")


def _parse_value(text):
    text = text.strip()
    try:
        v = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    if isinstance(v, tuple):
        return list(v)
    return v


@dataclass
class RunConfig:
    values: dict
    origin: dict = field(default_factory=dict)
    ci_overrides: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def snapshot(self):
        return {k: self.values[k] for k in sorted(self.values)}

    def to_text(self):
        """Canonical config document that parses back to the same values."""
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if v is None:
                continue
            lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    # typed views

    def env_spec(self, domain) -> envs.EnvSpec:
        g = lambda k: self.values[f"env.{domain}.{k}"]  # noqa: E731
        fam = g("family")
        kw = {"mass": g("mass"), "damping": g("damping"), "modality": g("modality"),
              "modality_seed": g("modality_seed")}
        if g("dt") is not None:
            kw["dt"] = g("dt")
        if g("action_bound") is not None:
            kw["action_bound"] = g("action_bound")
        if fam == "point_mass":
            return envs.point_mass(g("dims"), **kw)
        if fam == "pendulum":
            return envs.pendulum(**kw)
        if fam == "chain_mass":
            return envs.chain_mass(g("links"), **kw)
        if fam == "linear_system":
            if g("A") is None and g("B") is None:
                kw.pop("mass")
                kw.pop("damping")
                return envs.damped_integrators(g("dims"), **kw)
            if g("A") is None or g("B") is None:
                raise ValueError("linear_system needs both A and B (or neither for the default system)")
            kw.setdefault("action_bound", 1.0)
            return envs.linear_system(g("A"), g("B"), **kw)
        raise ValueError(f"unknown family {fam!r}; expected one of {envs.FAMILIES}")

    def joint_map(self):
        x, y = self.env_spec("X"), self.env_spec("Y")
        if x.action_dim == y.action_dim:
            return None
        if x.family == y.family == "chain_mass" and x.num_links > y.num_links:
            return {j: min(j, y.num_links - 1) for j in range(x.num_links)}
        raise ValueError("action dims differ but no joint correspondence rule applies")

    def forward_config(self) -> fm.ForwardConfig:
        return fm.ForwardConfig(self["forward.epochs"], self["forward.lr"], self["forward.halve_every"],
                                self["forward.batch"], self["forward.seed"])

    def train_config(self) -> align.TrainConfig:
        return align.TrainConfig(
            mode=self["align.mode"], lambda0=self["align.lambda0"], lambda1=self["align.lambda1"],
            lambda2=self["align.lambda2"], lr=self["align.lr"], batch=self["align.batch"],
            epochs=self["align.epochs"], steps_per_epoch=self["align.steps_per_epoch"],
            outer_rounds=self["align.e"], phase_steps_a=self["align.e1"], phase_steps_b=self["align.e2"],
            lr_decay=self["align.lr_decay"], decay_every=self["align.decay_every"],
            seed=self["align.seed"], log_every=self["align.log_every"])

    def task(self) -> transfer.TransferTask:
        """The experiment this config describes, for the in-process pipeline."""
        return transfer.TransferTask(
            self.env_spec("X"), self.env_spec("Y"), self.train_config(), self.forward_config(),
            triples_x=self["data.triples_x"], triples_y=self["data.triples_y"],
            collect_horizon=self["data.horizon"], collect_mode_x=self["data.mode_x"],
            collect_mode_y=self["data.mode_y"], joint_map=self.joint_map(),
            eval_episodes=self["eval.episodes"], eval_horizon=self["eval.horizon"],
            seeds=tuple(self["eval.seeds"]), paired_eval=self["eval.paired_count"])


def _format(v):
    if isinstance(v, str):
        return v
    if isinstance(v, list) and all(isinstance(x, str) for x in v):
        return ", ".join(v)
    if isinstance(v, list) and all(isinstance(x, int) for x in v):
        return ", ".join(str(x) for x in v) if len(v) != 1 else f"[{v[0]}]"
    if isinstance(v, float):
        return repr(v)
    return json.dumps(v)


def _suggest(key):
    close = difflib.get_close_matches(key, list(SCHEMA), n=1, cutoff=0.6)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _split_line(line):
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    if "=" not in body:
        raise ValueError("expected 'section.key = value'")
    key, value = body.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError("missing key")
    return key, _parse_value(value)


def parse_text(text, source="<config>", overrides=()):
    """Parse a config document plus ``key=value`` overrides into a validated RunConfig."""
    raw, origin, ci = {}, {}, {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        try:
            parsed = _split_line(line)
        except ValueError as e:
            problems.append(f"{where}: {e}")
            continue
        if parsed is None:
            continue
        key, value = parsed
        target = raw
        if key.startswith("ci."):
            key, target = key[3:], ci
        if key not in SCHEMA:
            problems.append(f"{where}: unknown key {key!r}{_suggest(key)}")
            continue
        target[key] = value
        origin[key if target is raw else "ci." + key] = where
    for item in overrides:
        if "=" not in item:
            problems.append(f"--set {item!r}: expected key=value")
            continue
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            problems.append(f"--set {key!r}: unknown key{_suggest(key)}")
            continue
        raw[key] = _parse_value(value)
        origin[key] = f"--set {key}"
    if problems:
        raise ConfigError(problems)
    scale = raw.get("scale", SCHEMA["scale"][1])
    if scale == "ci":
        for key, value in ci.items():
            if origin.get(key, "").startswith("--set"):
                continue
            raw[key] = value
            origin[key] = origin["ci." + key]
    values = {}
    for key, (conv, default) in SCHEMA.items():
        if key not in raw:
            values[key] = list(default) if isinstance(default, list) else default
            continue
        try:
            values[key] = conv(raw[key])
        except TypeError as e:
            problems.append(f"{origin.get(key, key)}: {key}: {e}, got {raw[key]!r}")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(values, origin, ci)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    problems = []

    def where(key):
        return cfg.origin.get(key, "default")

    if cfg["scale"] not in SCALES:
        problems.append(f"{where('scale')}: scale must be one of {SCALES}, got {cfg['scale']!r}")
    for d in ("X", "Y"):
        if cfg[f"env.{d}.family"] is None:
            problems.append(f"env.{d}.family is required")
            continue
        try:
            cfg.env_spec(d)
        except (ValueError, TypeError) as e:
            problems.append(f"{where(f'env.{d}.family')}: env.{d}: {e}")
    for key in ("data.mode_x", "data.mode_y"):
        if cfg[key] not in DATA_MODES:
            problems.append(f"{where(key)}: {key} must be one of {DATA_MODES}")
    for key in ("data.triples_x", "data.triples_y", "data.horizon", "forward.epochs", "forward.batch",
                "forward.halve_every", "eval.episodes", "eval.horizon", "eval.paired_count"):
        if cfg[key] < 1:
            problems.append(f"{where(key)}: {key} must be >= 1")
    if not cfg["forward.lr"] > 0:
        problems.append(f"{where('forward.lr')}: forward.lr must be positive")
    if not cfg["eval.seeds"]:
        problems.append(f"{where('eval.seeds')}: eval.seeds must be nonempty")
    for b in cfg["eval.baselines"]:
        if b not in transfer.BASELINES:
            problems.append(f"{where('eval.baselines')}: unknown baseline {b!r}")
    try:
        cfg.train_config().validate()
    except align.ConfigError as e:
        problems.append(f"{where('align.mode')}: {e}")
    if not problems:
        try:
            cfg.joint_map()
        except ValueError as e:
            problems.append(str(e))
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path=None, overrides=(), text=None):
    """Read a config file (or ``text``) and apply ``--set`` style overrides."""
    if text is None:
        if path is None:
            raise ConfigError("no config given")
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        source = str(path)
    else:
        source = "<text>"
    return parse_text(text, source, overrides)


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("cyclealign.presets").iterdir()
                  if p.name.endswith(".cfg"))


def preset_text(name):
    f = resources.files("cyclealign.presets") / f"{name}.cfg"
    if not f.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return f.read_text()


def load_preset(name, overrides=()):
    return parse_text(preset_text(name), f"preset:{name}", overrides)
