"""fedvit command line: gen-data, run, sweep, inspect.

Exit codes: 0 ok, 2 usage/config, 3 I/O or file format, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as D
from .config import ConfigError, RunConfig, load_config
from .fed import TrainingAbort, run_federation
from .metrics import write_metrics_csv
from .partition import CheckpointFormatError, ParamRole, load_checkpoint, save_checkpoint

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _positive_int(name):
    def conv(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name} must be an integer, got {s!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"--{name} must be positive, got {v}")
        return v
    return conv


def _positive_float(name):
    def conv(s):
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name} must be a number, got {s!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"--{name} must be > 0, got {v}")
        return v
    return conv


def _ratio_list(s):
    try:
        ps = [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--p expects comma-separated numbers, got {s!r}") from None
    if not ps or any(not 0 <= p <= 1 for p in ps):
        raise argparse.ArgumentTypeError(f"--p values must lie in [0, 1], got {s!r}")
    return ps


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    skew = D.SkewSpec(alpha=args.alpha, feature_shift=args.feature_shift, seed=args.seed)
    shards = D.generate_synthetic(args.clients, args.n, args.image_size, args.classes, skew,
                                  class_sep=args.class_sep, min_per_class=args.min_per_class)
    images, labels, sidecar = D.shards_to_dataset(shards)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        D.save_dataset(out / "dataset.fvd", images, labels, args.classes)
        (out / "shards.json").write_text(D.sidecar_json(sidecar))
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write dataset: {e}") from None
    print(f"wrote {len(labels)} samples for {args.clients} clients to {out / 'dataset.fvd'}")
    print("client  " + "  ".join(f"class{c}" for c in range(args.classes)))
    for s in shards:
        print(f"{s.client_id:>6}  " + "  ".join(f"{n:>6}" for n in s.class_histogram(args.classes)))
    return 0


# ---------------------------------------------------------------------------
# run / sweep


def build_shards(cfg: RunConfig):
    d = cfg.data
    if d.is_synthetic:
        shards = D.generate_synthetic(cfg.fed.num_clients, d.per_client_n, cfg.model.image_size,
                                      cfg.model.num_classes, cfg.skew(), channels=cfg.model.channels,
                                      class_sep=d.class_sep, min_per_class=d.min_per_class)
    else:
        path = Path(d.source)
        try:
            images, labels = D.load_dataset(path)
        except OSError as e:
            raise CliError(EXIT_IO, f"cannot read dataset {path}: {e}") from None
        except D.DatasetFormatError as e:
            raise CliError(EXIT_IO, f"{path}: {e}") from None
        if images.shape[1:] != (cfg.model.image_size, cfg.model.image_size, cfg.model.channels):
            raise CliError(EXIT_USAGE, f"dataset images {images.shape[1:]} do not match the model config")
        sidecar = path.with_name("shards.json")
        if sidecar.exists():
            shards = D.shards_from_sidecar(images, labels, json.loads(sidecar.read_text()), str(path))
            if len(shards) != cfg.fed.num_clients:
                raise CliError(EXIT_USAGE, f"{sidecar} has {len(shards)} clients, config wants {cfg.fed.num_clients}")
        else:
            shards = D.partition_dataset(images, labels, cfg.fed.num_clients, cfg.skew(), d.min_per_class)
    return D.reserve_holdout(shards, d.holdout_frac, cfg.fed.seed)


def execute(cfg: RunConfig, out: Path, parallel_clients: int = 1):
    """Run one federation and write metrics.csv, client checkpoints and summary.txt."""
    shards, hx, hy = build_shards(cfg)
    try:
        result = run_federation(cfg.fed, shards, cfg.model, (hx, hy), parallel_clients=parallel_clients)
    except TrainingAbort as e:
        raise CliError(EXIT_NUMERIC, f"training aborted: {e}") from None
    last = result.reports[-1]
    summary = f"final local-test AUC mean={last.mean_local_auc:.6f}, new-test AUC={last.new_auc:.6f}"
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", result.reports)
        for c in result.clients:
            save_checkpoint(c.store, out / f"client{c.client_id}.fvt")
        (out / "summary.txt").write_text(summary + "\n")
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write outputs: {e}") from None
    return result, summary


def _load(path) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as e:
        raise CliError(EXIT_USAGE, f"invalid config: {e}") from None


def cmd_run(args) -> int:
    cfg = _load(args.config)
    out = Path(args.out or cfg.out)
    _, summary = execute(cfg, out, args.parallel_clients)
    print(summary)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args.config)
    out = Path(args.out or cfg.out)
    rows = []
    for p in args.p:
        run_cfg = dataclasses.replace(cfg, fed=dataclasses.replace(cfg.fed, ratio=p))
        result, summary = execute(run_cfg, out / f"p{p:g}", args.parallel_clients)
        last = result.reports[-1]
        rows.append((p, last.mean_local_auc, last.new_auc))
        print(f"p={p:g}: {summary}")
    try:
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("p", "mean_local_auc", "new_auc"))
            for p, a, n in rows:
                w.writerow((f"{p:g}", f"{a:.6f}", f"{n:.6f}"))
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write sweep.csv: {e}") from None
    return 0


# ---------------------------------------------------------------------------
# inspect


def inspect_report(path) -> str:
    store = load_checkpoint(path)
    lines = [f"checkpoint {Path(path).name}: {len(store)} tensors"]
    for name, t, role in store.items():
        crc = "BAD" if name in store.checksum_failures else "ok"
        shape = "x".join(str(s) for s in t.shape) or "scalar"
        lines.append(f"  {name:<24} {shape:<12} {role.name.lower():<12} crc={crc}")
    total = store.count()
    pers = store.count(ParamRole.PERSONALIZED)
    frac = pers / total if total else 0.0
    lines.append(f"parameters: {total}, personalized: {pers} ({100 * frac:.4f}%)")
    status = "OK" if not store.checksum_failures else f"{len(store.checksum_failures)} MISMATCH"
    lines.append(f"checksums: {status}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    try:
        print(inspect_report(args.checkpoint))
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read {args.checkpoint}: {e}") from None
    except CheckpointFormatError as e:
        raise CliError(EXIT_IO, f"{args.checkpoint}: {e}") from None
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedvit", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic non-IID dataset (FVD1) and shard sidecar")
    g.add_argument("--clients", type=_positive_int("clients"), default=6, help="number of clients (default 6)")
    g.add_argument("--n", type=_positive_int("n"), default=600, help="samples per client (default 600)")
    g.add_argument("--alpha", type=_positive_float("alpha"), default=0.5, help="Dirichlet label-skew concentration")
    g.add_argument("--feature-shift", type=float, default=0.3, help="per-client affine intensity shift strength in [0,1)")
    g.add_argument("--class-sep", type=float, default=0.12, help="class template strength (noise std is 0.3)")
    g.add_argument("--min-per-class", type=int, default=5, help="redraw label mixes giving a client fewer samples of a class")
    g.add_argument("--image-size", type=_positive_int("image-size"), default=16, help="square image side in pixels")
    g.add_argument("--classes", type=_positive_int("classes"), default=2, help="number of classes")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--out", default="data", help="output directory (default ./data)")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run a federation from a config file")
    r.add_argument("config", help="INI config with [model], [fed], [data], [output] sections")
    r.add_argument("--out", help="output directory (overrides [output] dir)")
    r.add_argument("--parallel-clients", type=_positive_int("parallel-clients"), default=1,
                   help="train up to N clients concurrently; results are unchanged")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="repeat a run over personalization ratios")
    s.add_argument("config", help="INI config file")
    s.add_argument("--p", type=_ratio_list, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
                   help="comma-separated ratios in [0,1] (default 0,0.2,0.4,0.6,0.8,1)")
    s.add_argument("--out", help="output directory (overrides [output] dir)")
    s.add_argument("--parallel-clients", type=_positive_int("parallel-clients"), default=1,
                   help="train up to N clients concurrently")
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect", help="describe an FVT1 checkpoint")
    i.add_argument("checkpoint", help="path to a .fvt file")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"fedvit: error: {e}", file=sys.stderr)
        return e.code
    except (D.StarvationError, ValueError) as e:
        print(f"fedvit: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
