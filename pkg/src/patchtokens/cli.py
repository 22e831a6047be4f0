"""Command-line entry point: gen-data, train, eval, ablate, demo.

Outputs go under ``$PATCHTOKENS_OUTPUT`` (default ``./runs``) unless
``--out`` is given.  Every subcommand that produces numbers prints them as a
single JSON document on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .sequencing import ALL


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == ALL:
        return ALL
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _overrides(pairs: list[str]) -> dict:
    """``key=value`` pairs; dotted keys (``model.d=64``) set nested dicts."""
    out: dict = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for k, v in extra.items():
        merged[k] = _merge(merged.get(k, {}), v) if isinstance(v, dict) else v
    return merged


def _run_config(args):
    from .harness import RunConfig

    base = RunConfig.from_file(args.config).to_dict() if args.config else {}
    return RunConfig.from_dict(_merge(base, _overrides(args.set)))


def _out_dir(args, kind: str) -> Path:
    from .harness import output_root

    if args.out:
        return Path(args.out)
    return output_root() / kind / time.strftime("%Y%m%d-%H%M%S")


def _emit(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=str)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    print(text)


def cmd_gen_data(args) -> int:
    from .data import write_manifest

    out = _out_dir(args, "data")
    seeds = range(args.seed_start, args.seed_start + args.n)
    manifest = write_manifest(out, seeds, args.profile, images=not args.no_images)
    _emit({"manifest": str(manifest), "scenes": args.n, "profile": args.profile})
    return 0


def cmd_train(args) -> int:
    from .harness import train

    cfg = _run_config(args)
    out = Path(cfg.output_dir) if cfg.output_dir and not args.out else _out_dir(args, "train")
    _, report = train(cfg, out, progress=not args.quiet)
    _emit({"out": str(out), "train_seconds": report["train_seconds"], "metrics": report.get("metrics", {})})
    return 0


def cmd_eval(args) -> int:
    from .harness import evaluate_checkpoint

    metrics = evaluate_checkpoint(args.checkpoint, task=args.task, n_scenes=args.n)
    _emit(metrics, Path(args.json_out) if args.json_out else None)
    return 0


def cmd_ablate(args) -> int:
    from .harness import ablate, ablation_grid

    base = _run_config(args)
    grid = {}
    for spec in args.axis or []:
        key, _, vals = spec.partition("=")
        grid[key] = [_parse_value(v) for v in vals.split(",") if v]
    configs = ablation_grid(base, grid)
    out = _out_dir(args, "ablate")
    rows = ablate(configs, tuple(args.metrics.split(",")), out)
    _emit({"out": str(out), "rows": rows})
    return 0


def cmd_demo(args) -> int:
    from .checkpoint import load_checkpoint
    from .demo import run_demo
    from .harness import RunConfig

    model, meta = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(meta.get("run", {}))
    out = _out_dir(args, "demo")
    seeds = args.seeds or [0]
    records = run_demo(model, cfg, seeds, out, task=args.task)
    _emit({"out": str(out), "scenes": records})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchtokens", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="materialise synthetic scenes as a JSON-lines manifest")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--seed-start", type=int, default=0)
    g.add_argument("--profile", default="toy")
    g.add_argument("--no-images", action="store_true", help="annotations only; images regenerate from seeds")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_data)

    def run_args(sp):
        sp.add_argument("--config", help="JSON or YAML RunConfig file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--out")

    t = sub.add_parser("train", help="train and evaluate one configuration")
    run_args(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    e.add_argument("checkpoint")
    e.add_argument("--task")
    e.add_argument("--n", type=int)
    e.add_argument("--json-out")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train a grid of configurations and tabulate metrics")
    run_args(a)
    a.add_argument("--axis", action="append", metavar="KEY=V1,V2", help="e.g. n_vrt=1,3,5,all")
    a.add_argument("--metrics", default="acc50,acc75,ciou")
    a.set_defaults(fn=cmd_ablate)

    d = sub.add_parser("demo", help="predict single scenes and write overlay PNGs")
    d.add_argument("checkpoint")
    d.add_argument("--seeds", type=int, nargs="*")
    d.add_argument("--task")
    d.add_argument("--out")
    d.set_defaults(fn=cmd_demo)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command in ("train", "ablate") else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
