"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace

import numpy as np

from .arith import MBM_CORRECTION, MulKind, MultiplierSpec, calibrate_correction, characterize_error
from .config import ConfigError, RunConfig, load_config
from .datasets import DatasetError
from .partition import PartitionError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def cmd_run(args) -> int:
    from .runner import run_experiment
    cfg = _load(args)
    summary = run_experiment(cfg, args.out)
    print(json.dumps({"top1": summary["top1"], "variance": summary["variance"],
                      "energy_reduction_vs_c1": summary["energy_reduction_vs_c1"]}, indent=2))
    return EXIT_OK


def cmd_breakdown(args) -> int:
    from .accel import EnergyTable
    from .runner import format_table, report_energy_breakdown
    table = EnergyTable.load(args.energy_table) if args.energy_table else None
    cfg = _load(args) if args.config else None
    rows = report_energy_breakdown(cfg, args.batch, table)
    print(format_table(rows))
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    out = {}
    for m in args.bits:
        c, stats = calibrate_correction(m, args.c_max)
        out[str(m)] = {"correction": c, "frozen": MBM_CORRECTION.get(m), **asdict(stats),
                       "mitchell": asdict(characterize_error(MultiplierSpec.mitchell(m)))}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_characterize(args) -> int:
    kind = MulKind(args.kind)
    if kind is MulKind.MBM:
        spec = MultiplierSpec.mbm(args.bits, args.correction)
    else:
        spec = MultiplierSpec(kind, args.bits)
    stats = characterize_error(spec, stage=args.stage)
    print(json.dumps({"multiplier": spec.to_dict(), "stage": args.stage, **asdict(stats)}, indent=2))
    return EXIT_OK


def cmd_partition_preview(args) -> int:
    from .fl import load_data
    from .partition import PartitionSpec, assign_groups, manifest, partition
    cfg = _load(args)
    train, _ = load_data(cfg)
    seed = cfg.seeds[0]
    groups = assign_groups(cfg.devices, [(g.label, g.fraction) for g in cfg.groups])
    spec = PartitionSpec(cfg.partition, cfg.devices, seed, cfg.alpha, len(cfg.groups))
    shards = partition(train.y, spec, groups if cfg.partition == "rc" else None)
    k = train.num_classes
    print("device group  n  " + " ".join(f"c{j:<3d}" for j in range(k)))
    for d, s in enumerate(shards):
        hist = np.bincount(train.y[s], minlength=k)
        print(f"{d:6d} {groups.labels[groups.device_group[d]]:>5s} {len(s):3d}  " + " ".join(f"{v:<4d}" for v in hist))
    if args.manifest:
        with open(args.manifest, "w") as f:
            f.write(manifest(shards))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="approxfl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a federated experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    r.add_argument("--threads", type=int, help="clients trained concurrently")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("breakdown", help="per-component energy of one mini-batch for C1-C5 and S1-S4")
    b.add_argument("--config", help="take model, input shape and batch size from a config")
    b.add_argument("--batch", type=int)
    b.add_argument("--energy-table")
    b.add_argument("--out", help="also write the table as CSV")
    b.set_defaults(func=cmd_breakdown)

    c = sub.add_parser("calibrate-mbm", help="grid-search the MBM correction constant")
    c.add_argument("--bits", type=int, nargs="+", default=[1, 3, 7])
    c.add_argument("--c-max", type=float, default=0.25)
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("characterize-multiplier", help="exhaustive error statistics of a multiplier")
    e.add_argument("--kind", choices=[k.value for k in MulKind], default="mbm")
    e.add_argument("--bits", type=int, default=7)
    e.add_argument("--correction", type=float)
    e.add_argument("--stage", choices=["datapath", "output"], default="datapath")
    e.set_defaults(func=cmd_characterize)

    pp = sub.add_parser("partition-preview", help="per-device class histograms of a config's partition")
    pp.add_argument("--config", required=True)
    pp.add_argument("--seed", type=int)
    pp.add_argument("--manifest", help="write the device -> indices manifest as JSON")
    pp.set_defaults(func=cmd_partition_preview)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, PartitionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - map everything else to the runtime exit code
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
