"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ablate as ablate_mod
from .bench import bench
from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .data import generate_dataset, load_dataset
from .encoder import ConfigError
from .gradcheck import run_suite
from .metrics import PROTOCOLS, canonical_protocol, evaluate_embeddings
from .numeric_core import NumericalError
from .objectives import SamplingError
from .pnm import read_pnm
from .tps import ControlPointSet, control_grid, export_warp_demo
from .train import FINAL_CKPT, NanLossError, load_state, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parse_set(values: List[str]):
    pairs = []
    for item in values or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def _config(args) -> RunConfig:
    pairs = _parse_set(args.set)
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return load_config(args.config, pairs)


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def _ensure_dataset(args, cfg: RunConfig):
    if args.data is not None:
        return load_dataset(args.data)
    root = _out(args, "run") / "data"
    if not (root / "manifest.csv").exists():
        generate_dataset(cfg.data, root)
    return load_dataset(root)


def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    manifest = generate_dataset(cfg.data, _out(args, "data"))
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _ensure_dataset(args, cfg)
    out = _out(args, "run")

    def log(step, bd, lr):
        if args.verbose:
            print(f"step {step} lr {lr:.3e} total {bd.total:.5f}", flush=True)

    result = train(cfg, ds, out, max_steps=args.steps, resume=args.resume, log=log)
    print(f"trained {result.state.step} steps; checkpoint {out / FINAL_CKPT}")
    return EXIT_OK


def _metrics_dict(m):
    return {"protocol": m.protocol, "rank1": m.rank1, "mAP": m.mAP, "mINP": m.mINP,
            "num_query": m.num_query, "num_gallery": m.num_gallery}


def cmd_eval(args) -> int:
    state = load_state(args.checkpoint)
    ds = load_dataset(args.data).subset(args.split)
    emb = state.encoder.embed(ds.images, ds.views)
    protocols = PROTOCOLS if args.protocol == "all" else (canonical_protocol(args.protocol),)
    results = [evaluate_embeddings(emb, ds.identities, ds.views, p) for p in protocols]
    for m in results:
        print(f"{m.protocol:6s} Rank1 {m.rank1:6.2f}  mAP {m.mAP:6.2f}  mINP {m.mINP:6.2f}")
    if args.out is not None:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        (path / "eval.json").write_text(json.dumps([_metrics_dict(m) for m in results], indent=2) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _config(args)
    out = _out(args, "ablation")
    cache = {}

    def dataset_for(seed):
        if seed not in cache:
            root = out / f"data_seed{seed}"
            if not (root / "manifest.csv").exists():
                spec = base.data
                spec = type(spec)(**{**spec.__dict__, "seed": seed})
                generate_dataset(spec, root)
            cache[seed] = load_dataset(root)
        return cache[seed]

    axes = ablate_mod.MAIN_AXES if args.axis == "all" else (args.axis,)
    seeds = [int(s) for s in args.seeds.split(",")]
    log = lambda axis, row: print(f"{axis}: {row.setting}  AG_Rank1 {row.values['AG_Rank1']:.2f}", flush=True)
    for axis in axes:
        path = out / f"{axis}.csv"
        ablate_mod.ablate(axis, base, seeds, dataset_for, path, log)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(range(args.seeds))
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_bench(args) -> int:
    if args.checkpoint is not None:
        state = load_state(args.checkpoint)
        config, params = state.encoder.config, state.encoder.params
    else:
        config, params = _config(args).encoder, None
    report = bench(config, params, passes=args.passes, batch=args.batch)
    print(report)
    if args.out is not None:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        (path / "bench.json").write_text(report.to_json() + "\n")
    return EXIT_OK


def checkerboard(h: int = 64, w: int = 64, cell: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (((yy // cell) + (xx // cell)) % 2).astype(np.float64) * 0.8 + 0.1


def cmd_warp_demo(args) -> int:
    out = _out(args, "warp_demo")
    if args.image:
        image = read_pnm(args.image)
    else:
        image = checkerboard()
    source = control_grid(args.k)
    if args.jitter > 0:
        rng = np.random.default_rng(args.seed or 0)
        source = source + rng.uniform(-args.jitter, args.jitter, size=source.shape)
    cps = ControlPointSet(source, control_grid(args.k))
    export_warp_demo(image, cps, float(np.deg2rad(args.angle)), out)
    print(f"wrote {out}")
    return EXIT_OK


def _global_flags(default) -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default, help="plain-text key=value config file")
    g.add_argument("--seed", type=int, default=default, help="overrides the config seed")
    g.add_argument("--out", default=default, help="output directory")
    g.add_argument("--set", action="append", default=default, metavar="KEY=VALUE",
                   help="config override (repeatable)")
    return g


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = _global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="crossview-align", parents=[_global_flags(None)])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset directory (generated under --out when omitted)")
    t.add_argument("--steps", type=int, help="stop after this many steps")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--verbose", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="retrieval metrics for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--protocol", default="all", help="ALL, G<->G, A<->A, A<->G or all")

    a = sub.add_parser("ablate", parents=[common], help="run an ablation axis")
    a.add_argument("--axis", default="all", choices=sorted(ablate_mod.AXES) + ["all"])
    a.add_argument("--seeds", default="1,2,3")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=5)

    b = sub.add_parser("bench", parents=[common], help="LTPS forward overhead")
    b.add_argument("checkpoint", nargs="?")
    b.add_argument("--passes", type=int, default=100)
    b.add_argument("--batch", type=int, default=32)

    w = sub.add_parser("warp-demo", parents=[common], help="warp an image and export PPM + grid CSV")
    w.add_argument("--image", help="PGM/PPM input (a checkerboard when omitted)")
    w.add_argument("--angle", type=float, default=30.0, help="rotation in degrees")
    w.add_argument("--k", type=int, default=4)
    w.add_argument("--jitter", type=float, default=0.0, help="random source-point offset")
    return p


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck, "bench": cmd_bench, "warp-demo": cmd_warp_demo,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NanLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, SamplingError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
