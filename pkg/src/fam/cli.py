"""Command-line driver: ``fam {train,eval,export-traj,export-emb,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from fam.config import RunConfig, canonical_key, parse_kv_text
from fam.errors import ConfigError, InputError, LoadError, RunError

log = logging.getLogger("fam")


def _default_out() -> Path:
    return Path(os.environ.get("FAM_OUT_DIR", "runs"))


def _parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _layer(values: dict[str, str], layer: dict[str, str]) -> None:
    """Merge ``layer`` into ``values``; spellings of the same field collapse so the later value wins."""
    for key, val in layer.items():
        key = canonical_key(key)
        values.pop(key, None)
        values[key] = val


def resolve_config(config_path: str | None, overrides: list[str], seed: int | None = None) -> RunConfig:
    """Config file values, then ``--override`` pairs, then ``--seed`` (later wins)."""
    values: dict[str, str] = {}
    if config_path:
        _layer(values, parse_kv_text(Path(config_path).read_text()))
    _layer(values, _parse_overrides(overrides))
    if seed is not None:
        _layer(values, {"train.seed": str(seed)})
    return RunConfig().with_overrides(values)


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.override, args.seed)
    out = Path(args.out) if args.out else _default_out()
    run_dir = out / f"{config.algorithm}-{config.env.task}-seed{config.seed}"
    from fam.trainer import run

    art = run(config, run_dir, resume=args.resume)
    print(f"run directory: {art.out_dir}")
    print(f"metric log: {art.metrics_path}")
    return 0


def _checkpoint(args) -> Path:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    return path


def cmd_eval(args) -> int:
    from fam.evaluate import evaluate

    report = evaluate(_checkpoint(args), args.episodes, args.deterministic, args.seed)
    out = Path(args.out) if args.out else _default_out()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval_report.json"
    path.write_text(report.to_json())
    print(
        f"episodes={report.episodes} avg_return={report.avg_return:.3f} "
        f"avg_final_reward={report.avg_final_reward:.3f} avg_occupied={report.avg_occupied} "
        f"avg_distance={report.avg_distance:.3f}"
    )
    print(f"report: {path}")
    return 0


def cmd_export(args) -> int:
    from fam.evaluate import export_embeddings, export_trajectories

    out = Path(args.out) if args.out else _default_out()
    if args.verb == "export-traj":
        path = export_trajectories(_checkpoint(args), args.episodes, out / "trajectories.tsv", args.deterministic, args.seed)
    else:
        path = export_embeddings(_checkpoint(args), args.episodes, out / "embeddings.tsv", args.deterministic, args.seed)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# plotting


def _label_for(log_path: Path) -> str:
    cfg = log_path.parent / "config.cfg"
    if cfg.is_file():
        values = parse_kv_text(cfg.read_text())
        if "algo.algorithm" in values:
            return values["algo.algorithm"]
    return log_path.parent.name or log_path.stem


def quartile_curves(logs: list[Path], key: str) -> dict[str, dict[str, np.ndarray]]:
    """Per label: common steps, mean, 25th and 75th percentile of ``key`` across logs."""
    from fam.trainer import read_table

    groups: dict[str, list[dict[int, float]]] = {}
    for path in logs:
        header, rows = read_table(path)
        if key not in header or "step" not in header:
            raise InputError(f"{path} has no column {key!r}")
        series = {int(r["step"]): float(r[key]) for r in rows if r.get(key, "") != ""}
        groups.setdefault(_label_for(Path(path)), []).append(series)
    curves = {}
    for label, series in groups.items():
        steps = sorted(set.intersection(*(set(s) for s in series)))
        values = np.array([[s[t] for t in steps] for s in series])
        curves[label] = {
            "step": np.array(steps),
            "mean": values.mean(0),
            "q25": np.percentile(values, 25, axis=0),
            "q75": np.percentile(values, 75, axis=0),
        }
    return curves


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = [Path(p) for p in args.logs]
    for p in logs:
        if not p.is_file():
            raise InputError(f"metric log not found: {p}")
    out = Path(args.out) if args.out else _default_out()
    out.mkdir(parents=True, exist_ok=True)
    for key in args.keys:
        curves = quartile_curves(logs, key)
        fig, ax = plt.subplots(figsize=(6, 4))
        lines = ["label\tstep\tmean\tq25\tq75"]
        for label, c in sorted(curves.items()):
            ax.plot(c["step"], c["mean"], label=label)
            ax.fill_between(c["step"], c["q25"], c["q75"], alpha=0.25)
            for i, s in enumerate(c["step"]):
                lines.append(f"{label}\t{s}\t{c['mean'][i]!r}\t{c['q25'][i]!r}\t{c['q75'][i]!r}")
        ax.set_xlabel("environment steps")
        ax.set_ylabel(key)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"{key}.png", dpi=120)
        plt.close(fig)
        (out / f"{key}.tsv").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / (key + '.png')}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run a training job")
    p.add_argument("--config")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for verb, func, default_eps in (
        ("eval", cmd_eval, 100),
        ("export-traj", cmd_export, 1),
        ("export-emb", cmd_export, 1),
    ):
        p = sub.add_parser(verb)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--episodes", type=int, default=default_eps)
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="mean and inter-quartile curves from metric logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--keys", nargs="+", default=["mean_episode_return"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LoadError, RunError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
