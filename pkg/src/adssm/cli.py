"""Command-line front end: ``adssm <subcommand> [options]``.

Subcommands: gen-data, train, eval, sweep, bench, plot.  Every run writes
``config.resolved.json`` next to its outputs; wall-clock timestamps go only
to ``run.log`` so the other artifacts are byte-reproducible.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.  On
failure exactly one line ``adssm-error[<code>:<kind>] <message>`` goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import distill as X
from . import envs, source_rl
from .tensor import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        super().__init__(msg)
        self.code, self.kind = code, kind


def config_error(msg: str) -> CliError:
    return CliError(EXIT_CONFIG, "config", msg)


# -------------------------------------------------------------------- config


@dataclasses.dataclass
class DatasetSection:
    dir: str | None = None
    tasks: int = 32
    episodes: int = 400
    seed: int = 7
    learner: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class EnvSection:
    num_test_tasks: int = 10
    eval_seed: int = 0
    seeds: list = dataclasses.field(default_factory=lambda: [0, 1, 2])
    contexts: list = dataclasses.field(default_factory=lambda: [20, 80, "full"])


def _section(cls, d: dict, name: str):
    if not isinstance(d, dict):
        raise config_error(f"section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise config_error(f"unknown keys in '{name}': {extra}")
    return cls(**d)


@dataclasses.dataclass
class Bundle:
    run: X.RunConfig
    dataset: DatasetSection
    env: EnvSection

    def resolved(self) -> dict:
        return {**self.run.resolved(),
                "dataset": {**dataclasses.asdict(self.dataset),
                            "learner": dataclasses.asdict(self.learner())},
                "env": dataclasses.asdict(self.env)}

    def learner(self) -> source_rl.LearnerConfig:
        try:
            return source_rl.LearnerConfig(**self.dataset.learner)
        except TypeError as exc:
            raise config_error(f"dataset.learner: {exc}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_bundle(path: str | None, overrides: list[str]) -> Bundle:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise config_error(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise config_error(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise config_error(f"{path}: top level must be an object")
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise config_error(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise config_error(f"override {key!r} walks into a non-object")
        node[parts[-1]] = _parse_value(val)
    ds = _section(DatasetSection, raw.pop("dataset", {}), "dataset")
    ev = _section(EnvSection, raw.pop("env", {}), "env")
    try:
        run = X.RunConfig.from_dict(raw)
    except X.ConfigError as exc:
        raise config_error(str(exc)) from None
    except TypeError as exc:
        raise config_error(str(exc)) from None
    return Bundle(run, ds, ev)


def _write_snapshot(out: Path, bundle: Bundle | dict, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = bundle.resolved() if isinstance(bundle, Bundle) else bundle
    (out / "config.resolved.json").write_text(
        json.dumps({"command": command, "config": body}, indent=1, sort_keys=True) + "\n")


def _setup_log(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger("adssm")
    for h in list(root.handlers):
        if getattr(h, "_adssm", False):
            root.removeHandler(h)
            h.close()
    h = logging.FileHandler(out / "run.log")
    h._adssm = True
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root.addHandler(h)
    root.setLevel(logging.INFO)


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise config_error(f"expected comma-separated integers, got {text!r}") from None


def _contexts(text: str) -> list:
    out = []
    for x in text.split(","):
        x = x.strip()
        out.append("full" if x == "full" else int(x) if x.isdigit() else None)
        if out[-1] is None:
            raise config_error(f"bad context length {x!r}")
    return out


# --------------------------------------------------------------- subcommands


def cmd_gen_data(a) -> None:
    bundle = load_bundle(a.config, a.set)
    env_id = a.env or bundle.run.env_id
    if env_id not in envs.ENV_IDS:
        raise config_error(f"unknown env {env_id!r}")
    ds = bundle.dataset
    ds.tasks = a.tasks if a.tasks is not None else ds.tasks
    ds.episodes = a.episodes if a.episodes is not None else ds.episodes
    ds.seed = a.seed if a.seed is not None else ds.seed
    if ds.tasks < 1 or ds.episodes < 1:
        raise config_error("tasks and episodes must be >= 1")
    bundle.run = dataclasses.replace(bundle.run, env_id=env_id)
    out = Path(a.out)
    ds.dir = str(out)
    _setup_log(out)
    _write_snapshot(out, bundle, "gen-data")
    man = source_rl.generate_dataset(env_id, ds.tasks, ds.episodes, ds.seed, out, bundle.learner())
    if man["failures"]:
        raise CliError(EXIT_DATA, "data", f"{len(man['failures'])} trajectory files failed to write")
    print(f"wrote {len(man['tasks'])} trajectory files to {out}")


def _dataset_for(bundle: Bundle, override: str | None) -> D.Dataset:
    path = override or bundle.dataset.dir
    if not path:
        raise config_error("no dataset directory (use --data or dataset.dir)")
    ds = D.load_dataset(path, k=bundle.run.downsample_k)
    if ds.env_id != bundle.run.env_id:
        raise config_error(f"dataset env {ds.env_id!r} differs from config env_id "
                           f"{bundle.run.env_id!r}")
    return ds


def _apply_run_flags(bundle: Bundle, a) -> None:
    upd = {}
    if getattr(a, "model", None):
        upd["model"] = a.model
    if getattr(a, "max_steps", None) is not None:
        upd["max_steps"] = a.max_steps
    if getattr(a, "context", None) is not None:
        upd["context"] = _contexts(a.context)[0]
    if upd:
        try:
            bundle.run = dataclasses.replace(bundle.run, **upd)
        except X.ConfigError as exc:
            raise config_error(str(exc)) from None
    if getattr(a, "seeds", None):
        bundle.env.seeds = _ints(a.seeds)
    if getattr(a, "data", None):
        bundle.dataset.dir = a.data


def cmd_train(a) -> None:
    bundle = load_bundle(a.config, a.set)
    _apply_run_flags(bundle, a)
    out = Path(a.out)
    _setup_log(out)
    ds = _dataset_for(bundle, None)
    _write_snapshot(out, bundle, "train")
    log = logging.getLogger("adssm.cli")
    for s in bundle.env.seeds:
        cfg = dataclasses.replace(bundle.run, seed=int(s))
        ck = out / f"{cfg.model}_seed{s}.adckpt"
        res = X.train_for_eval(ds, cfg, ck, progress=lambda st, l: log.info("seed %s step %d mse %.5f", s, st, l))
        (out / f"loss_{cfg.model}_seed{s}.csv").write_text(res.loss_csv())
        print(f"seed {s}: {ck} (final mse {res.losses[-1][2]:.5f})")


def cmd_eval(a) -> None:
    ckpts = [X.Checkpoint.load(p) if Path(p).exists() else p for p in a.checkpoints]
    missing = [f"seed index {i}: {p}" for i, p in enumerate(ckpts) if not isinstance(p, X.Checkpoint)]
    if missing:
        raise CliError(EXIT_DATA, "data", "missing checkpoints: " + "; ".join(missing))
    env_id = a.env or ckpts[0].config["env_id"]
    out = Path(a.out)
    _setup_log(out)
    snap = {"checkpoints": [str(p) for p in a.checkpoints], "env_id": env_id,
            "num_test_tasks": a.tasks, "episodes": a.episodes, "eval_seed": a.seed,
            "checkpoint_configs": [c.config for c in ckpts]}
    _write_snapshot(out, snap, "eval")
    rep = X.evaluate(ckpts, env_id, a.tasks, a.episodes, a.seed)
    rep.write(out, "report")
    s = rep.summary()
    print(f"{s['num_rollouts']} rollouts; first10 {s['first10_mean']:.3f} final10 "
          f"{s['final10_mean']:.3f} normalized {s['final10_normalized']:.3f}")


def cmd_sweep(a) -> None:
    bundle = load_bundle(a.config, a.set)
    _apply_run_flags(bundle, a)
    if a.contexts:
        bundle.env.contexts = _contexts(a.contexts)
    out = Path(a.out)
    _setup_log(out)
    ds = _dataset_for(bundle, None)
    _write_snapshot(out, bundle, "sweep")
    reps = X.context_sweep(ds, bundle.env.contexts, bundle.run, bundle.env.seeds,
                           bundle.env.num_test_tasks, bundle.env.eval_seed)
    rows = []
    for c, rep in reps.items():
        rep.write(out, f"report_context_{c}")
        rows.append(f"{c},{rep.final_mean():.6f},{rep.normalized_final():.6f}")
    (out / "sweep.csv").write_text("context,final10_mean,final10_normalized\n" + "\n".join(rows) + "\n")
    print("\n".join(rows))


def cmd_bench(a) -> None:
    lengths = _ints(a.lengths)
    if lengths != sorted(lengths) or not lengths or min(lengths) < 1:
        raise config_error("--lengths must be ascending positive integers")
    out = Path(a.out)
    _setup_log(out)
    _write_snapshot(out, {"lengths": lengths, "reps": a.reps, "seed": a.seed}, "bench")
    rows = X.benchmark_inference(lengths, reps=a.reps, seed=a.seed)
    # timings vary run to run, so they are reported but kept out of the reproducible set
    (out / "bench.csv").write_text(X.benchmark_csv(rows))
    print(X.benchmark_csv(rows), end="")


def _read_report(path: Path) -> tuple[np.ndarray, dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise CliError(EXIT_DATA, "data", f"report not found: {path}") from None
    if not rows or not {"seed", "task", "episode", "return"} <= set(rows[0]):
        raise CliError(EXIT_DATA, "data", f"{path}: not a report CSV")
    seeds = sorted({r["seed"] for r in rows}, key=int)
    tasks = sorted({r["task"] for r in rows}, key=int)
    E = max(int(r["episode"]) for r in rows)
    arr = np.full((len(seeds), len(tasks), E), np.nan)
    for r in rows:
        arr[seeds.index(r["seed"]), tasks.index(r["task"]), int(r["episode"]) - 1] = float(r["return"])
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arr, meta


def render_svg(curves: list[tuple[str, np.ndarray, np.ndarray]], oracle: float | None,
               random: float | None, title: str = "") -> str:
    W, H, m = 640, 400, 50
    ys = [v for _, mu, sd in curves for v in np.concatenate([mu - sd, mu + sd])]
    ys += [v for v in (oracle, random) if v is not None]
    lo, hi = float(np.nanmin(ys)), float(np.nanmax(ys))
    if hi - lo < 1e-9:
        hi, lo = hi + 1, lo - 1
    E = max(len(mu) for _, mu, _ in curves)

    def px(i):
        return m + (W - 2 * m) * (i / max(1, E - 1))

    def py(v):
        return H - m - (H - 2 * m) * (v - lo) / (hi - lo)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">episode</text>',
             f'<text x="14" y="{H / 2}" font-size="12" transform="rotate(-90 14 {H / 2})" '
             f'text-anchor="middle">return</text>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{m - 4}" y="{py(hi):.1f}" text-anchor="end" font-size="10">{hi:.2f}</text>',
             f'<text x="{m - 4}" y="{py(lo):.1f}" text-anchor="end" font-size="10">{lo:.2f}</text>']
    for name, val, dash in (("oracle", oracle, "6,4"), ("random", random, "2,3")):
        if val is not None:
            parts.append(f'<line x1="{m}" y1="{py(val):.1f}" x2="{W - m}" y2="{py(val):.1f}" '
                         f'stroke="gray" stroke-dasharray="{dash}"/>')
            parts.append(f'<text x="{W - m + 2}" y="{py(val):.1f}" font-size="10">{name}</text>')
    for k, (name, mu, sd) in enumerate(curves):
        col = colors[k % len(colors)]
        upper = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(mu + sd))
        lower = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in reversed(list(enumerate(mu - sd))))
        parts.append(f'<polygon points="{upper} {lower}" fill="{col}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(mu))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{col}" stroke-width="2"/>')
        parts.append(f'<text x="{m + 8}" y="{m + 14 * (k + 1)}" font-size="11" fill="{col}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(a) -> None:
    curves, oracle, random = [], None, None
    for p in a.reports:
        arr, meta = _read_report(Path(p))
        per_seed = np.nanmean(arr, axis=1)
        curves.append((meta.get("label") or Path(p).stem, per_seed.mean(0), per_seed.std(0)))
        oracle = meta.get("oracle", oracle)
        random = meta.get("random", random)
    out = Path(a.out) if a.out else Path(a.reports[0]).with_suffix(".svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(curves, oracle, random, a.title or ""))
    print(f"wrote {out}")


# ---------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise config_error(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adssm", description="Algorithm distillation with a selective SSM backbone")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config key (dotted for sections); repeatable")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="train source learners and write trajectory files")
    common(g)
    g.add_argument("--env")
    g.add_argument("--tasks", type=int)
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="pre-train one checkpoint per seed")
    common(t)
    t.add_argument("--model", choices=["ssm", "transformer"])
    t.add_argument("--data")
    t.add_argument("--seeds", help="comma-separated pre-training seeds")
    t.add_argument("--context")
    t.add_argument("--max-steps", type=int, dest="max_steps")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="in-context rollouts on held-out tasks")
    common(e, config=False)
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--env")
    e.add_argument("--tasks", type=int, default=10)
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate one variant per context length")
    common(s)
    s.add_argument("--model", choices=["ssm", "transformer"])
    s.add_argument("--data")
    s.add_argument("--seeds")
    s.add_argument("--contexts", help="comma-separated lengths, 'full' allowed")
    s.add_argument("--max-steps", type=int, dest="max_steps")
    s.set_defaults(fn=cmd_sweep)

    b = sub.add_parser("bench", help="per-token inference latency versus context length")
    common(b, config=False)
    b.add_argument("--lengths", default="128,256,512,1024,2048")
    b.add_argument("--reps", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)

    pl = sub.add_parser("plot", help="SVG learning curves from report CSVs")
    pl.add_argument("reports", nargs="+")
    pl.add_argument("--out")
    pl.add_argument("--title")
    pl.set_defaults(fn=cmd_plot)
    return p


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, (X.ConfigError, envs.EnvError)):
        return CliError(EXIT_CONFIG, "config", str(exc))
    if isinstance(exc, (D.DataError, D.TrajectoryFormatError, D.DimensionError,
                        X.CheckpointError, FileNotFoundError, source_rl.SourceRLError)):
        return CliError(EXIT_DATA, "data", str(exc))
    if isinstance(exc, (X.TrainingDiverged, NonFiniteError, FloatingPointError)):
        return CliError(EXIT_NUMERIC, "numeric", str(exc))
    if isinstance(exc, OSError):
        return CliError(EXIT_DATA, "data", f"{type(exc).__name__}: {exc}")
    raise exc


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        err = _classify(exc)
        msg = " ".join(str(err).split())
        print(f"adssm-error[{err.code}:{err.kind}] {msg}", file=sys.stderr)
        return err.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
