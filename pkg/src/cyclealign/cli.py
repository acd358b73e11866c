"""Command-line driver: collect, train-forward, train-align, eval, report.

Exit codes: 0 success, 1 configuration error, 2 missing prerequisite,
3 numerical failure (non-finite loss).
"""

from __future__ import annotations

import os

if os.environ.get("CYCLEALIGN_THREADS"):
    # must precede the first numpy import to cap BLAS worker threads
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CYCLEALIGN_THREADS"])

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from cyclealign import align, config, data, envs, plots, transfer
from cyclealign import forward_model as fm

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

DATASET_X = "dataset_X.cyds"
DATASET_Y = "dataset_Y.cyds"
FORWARD = "forward.cyfm"
MODEL = "align.cyam"
MANIFEST = "manifest.json"


class MissingPrerequisite(Exception):
    def __init__(self, path, stage):
        self.path = Path(path)
        super().__init__(f"missing prerequisite {self.path} (run `cyclealign {stage}` first)")


class ExistingArtifact(Exception):
    pass


def tool_version():
    try:
        return version("cyclealign")
    except PackageNotFoundError:
        return "unknown"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(run_dir, name, stage):
    p = Path(run_dir) / name
    if not p.exists():
        raise MissingPrerequisite(p, stage)
    return p


def _fresh(run_dir, name):
    """Path for a new artifact; existing datasets and checkpoints are never replaced."""
    p = Path(run_dir) / name
    if p.exists():
        raise ExistingArtifact(f"{p} already exists; artifacts are never overwritten (use a new --out)")
    return p


def _write_text_atomic(path, text):
    data.write_atomic(path, text.encode())


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _update_manifest(run_dir, cfg, stage, seconds, artifacts):
    path = Path(run_dir) / MANIFEST
    m = json.loads(path.read_text()) if path.exists() else {}
    m["tool_version"] = tool_version()
    m["config"] = cfg.snapshot()
    m.setdefault("digests", {})
    for name in artifacts:
        m["digests"][name] = _sha256(Path(run_dir) / name)
    m.setdefault("timings", {})[stage] = round(seconds, 3)
    _write_text_atomic(path, json.dumps(m, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages


def cmd_collect(cfg, run_dir):
    px, py = _fresh(run_dir, DATASET_X), _fresh(run_dir, DATASET_Y)
    h = cfg["data.horizon"]
    sx, sy, _, _ = transfer.dataset_seeds(cfg["data.seed"])
    dx = data.collect(cfg.env_spec("X"), cfg["data.mode_x"], max(1, cfg["data.triples_x"] // h), h, sx)
    dy = data.collect(cfg.env_spec("Y"), cfg["data.mode_y"], max(1, cfg["data.triples_y"] // h), h, sy)
    data.save(dx, px)
    data.save(dy, py)
    print(f"collected {len(dx)} X triples -> {px}")
    print(f"collected {len(dy)} Y triples -> {py}")
    return [DATASET_X, DATASET_Y]


def cmd_train_forward(cfg, run_dir):
    dy = data.load(_require(run_dir, DATASET_Y, "collect"))
    out = _fresh(run_dir, FORWARD)
    loss_csv = _fresh(run_dir, "forward_loss.csv")
    F = fm.train_forward(dy, cfg.forward_config(),
                         on_epoch=lambda e, v: print(f"epoch {e + 1}: L1 {v:.6f}"))
    fm.save(F, out)
    _write_text_atomic(loss_csv, _csv_text(["epoch", "l1"], [(i + 1, v) for i, v in enumerate(F.loss_trace)]))
    return [FORWARD, "forward_loss.csv"]


def _load_forward(run_dir):
    F = fm.load(_require(run_dir, FORWARD, "train-forward"))
    if not F.frozen:
        raise fm.FrozenModelError(f"{Path(run_dir) / FORWARD} is not a frozen forward model")
    return F


def _trace_rows(trace):
    cols = ["step", "total"] + [t for t in align.TERMS if any(t in r for r in trace)]
    return cols, [[r.get(c, "") for c in cols] for r in trace]


def _obs_map(cfg):
    x, y = cfg.env_spec("X"), cfg.env_spec("Y")
    jm = cfg.joint_map()
    if jm is None:
        return None
    return transfer.state_correspondence(x, y, jm)


def cmd_train_align(cfg, run_dir):
    dx = data.load(_require(run_dir, DATASET_X, "collect"))
    dy = data.load(_require(run_dir, DATASET_Y, "collect"))
    F = _load_forward(run_dir)
    out = _fresh(run_dir, MODEL)
    tc = cfg.train_config()
    res = align.train_alternating(dx, dy, F, tc, joint_correspondence=cfg.joint_map(),
                                  obs_correspondence=_obs_map(cfg),
                                  on_log=lambda p, r: print(f"phase {p} step {r['step']}: {r['total']:.6f}"))
    align.save_model(res.model, out, tc)
    written = [MODEL]
    for phase, trace in res.traces.items():
        if not trace:
            continue
        name = f"align_loss_{phase}.csv"
        cols, rows = _trace_rows(trace)
        _write_text_atomic(_fresh(run_dir, name), _csv_text(cols, rows))
        written.append(name)
    return written


def _write_report(run_dir, stem, report):
    _write_text_atomic(Path(run_dir) / f"{stem}.json", report.to_json())
    _write_text_atomic(Path(run_dir) / f"{stem}.csv", report.to_csv())
    return [f"{stem}.json", f"{stem}.csv"]


def cmd_eval(cfg, run_dir):
    dx = data.load(_require(run_dir, DATASET_X, "collect"))
    dy = data.load(_require(run_dir, DATASET_Y, "collect"))
    F = _load_forward(run_dir)
    model, _ = align.load_model(_require(run_dir, MODEL, "train-align"))
    spec_x, spec_y = cfg.env_spec("X"), cfg.env_spec("Y")
    policy = envs.reference_policy_for(spec_y)
    seeds = cfg["eval.seeds"]
    ep, hz = cfg["eval.episodes"], cfg["eval.horizon"]
    scale = data.standardization(dy)[1]
    paired = None
    if not model.identity_G and spec_x.state_dim == spec_y.state_dim:
        # one held-out paired split per evaluation seed
        paired = [data.build_paired_eval(spec_x, spec_y, cfg["eval.paired_count"],
                                         transfer.dataset_seeds(s)[2]) for s in seeds]

    def score(m):
        rep = transfer.evaluate_transfer(spec_x, m, policy, ep, hz, seeds, spec_y)
        if paired is not None:
            rep.state_l1 = [transfer.evaluate_state_estimation(m, p, scale) for p in paired]
        return rep

    written = _write_report(run_dir, "report", score(model))
    tc = cfg.train_config()
    for kind in cfg["eval.baselines"]:
        if kind in ("random_G", "init_only", "direct"):
            m = align.build_model(tc.mode, dx, dy, cfg.joint_map(), tc.seed, _obs_map(cfg))
        else:
            m = align.train_alternating(dx, dy, F, transfer.baseline_config(kind, tc),
                                        joint_correspondence=cfg.joint_map(),
                                        obs_correspondence=_obs_map(cfg)).model
        rep = score(m)
        if kind == "direct":
            rep.returns["transferred"] = list(rep.returns["direct"])
        written += _write_report(run_dir, f"report_{kind}", rep)
    sizes = cfg["eval.dataset_sizes"]
    if sizes:
        if paired is None:
            raise config.ConfigError("eval.dataset_sizes needs a learned observation map with paired states")
        rows = []
        for n in sizes:
            sub_x, sub_y = dx.head(n), dy.head(n)
            F_n = fm.train_forward(sub_y, cfg.forward_config())
            m = align.train_alternating(sub_x, sub_y, F_n, tc).model
            rows.append((n, transfer.evaluate_state_estimation(m, paired[0], scale)))
            print(f"{n} triples: state L1 {rows[-1][1]:.4f}")
        _write_text_atomic(Path(run_dir) / "l1_vs_size.csv", _csv_text(["triples", "state_l1"], rows))
        written.append("l1_vs_size.csv")
    return written


def summary_rows(run_dir):
    rows = []
    for path in sorted(Path(run_dir).glob("report*.json")):
        rep = transfer.TransferReport.from_json(path.read_text())
        label = path.stem
        for cond, values in sorted(rep.returns.items()):
            rows.append((label, cond, float(np.mean(values)), float(np.std(values)), len(values)))
        if rep.state_l1 is not None:
            rows.append((label, "state_l1", float(np.mean(rep.state_l1)), float(np.std(rep.state_l1)),
                         len(rep.state_l1)))
    return rows


def cmd_report(cfg, run_dir):
    rows = summary_rows(run_dir)
    if not rows:
        raise MissingPrerequisite(Path(run_dir) / "report.json", "eval")
    _write_text_atomic(Path(run_dir) / "summary.csv",
                       _csv_text(["report", "condition", "mean", "std", "n"], rows))
    width = max(len(r[0]) for r in rows)
    lines = [f"{'report'.ljust(width)}  {'condition':<12} {'mean':>12} {'std':>10} {'n':>3}"]
    lines += [f"{r[0].ljust(width)}  {r[1]:<12} {r[2]:>12.4f} {r[3]:>10.4f} {r[4]:>3}" for r in rows]
    _write_text_atomic(Path(run_dir) / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    svgs = plots.emit_plots(run_dir)
    return ["summary.csv", "summary.txt"] + [str(p.relative_to(run_dir)) for p in svgs]


COMMANDS = {
    "collect": cmd_collect,
    "train-forward": cmd_train_forward,
    "train-align": cmd_train_align,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="cyclealign", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="path to a config file")
    src.add_argument("--preset", help=f"shipped preset name ({', '.join(config.preset_names())})")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", help="run directory (overrides out_dir)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.preset:
            cfg = config.load_preset(args.preset, args.overrides)
        else:
            cfg = config.parse_config(args.config, args.overrides)
    except config.ConfigError as e:
        print(f"config error:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    run_dir = Path(args.out or cfg["out_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        written = COMMANDS[args.command](cfg, run_dir)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (config.ConfigError, ExistingArtifact, align.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    _update_manifest(run_dir, cfg, args.command, time.perf_counter() - started, written)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
