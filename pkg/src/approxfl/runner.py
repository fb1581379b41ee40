"""Experiment execution and report files.

Outputs of ``run_experiment`` in ``<output_dir>``:

* ``seed<N>.csv``: one row per participating device per round (columns from
  ``device_columns``), including its energy ledger and the round's metrics.
* ``summary.json``: configuration, per-seed final metrics, mean and std over
  seeds, and per-group energy figures. ``energy_reduction_vs_c1`` is the
  exact C1 full-model mini-batch energy divided by the mean batch-fraction
  weighted mini-batch energy of the constrained groups (all groups after the
  first; the first group when every other group drops out).
* ``pareto.csv``: accuracy against energy reduction for the run (one row per
  run, the shape of an accuracy-vs-energy scatter).
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .accel import BUFFERS, EnergyTable, accelerator, minibatch_energy
from .baselines import SCALES, StrategyKind, apply_strategy, extract_submodel
from .config import RunConfig
from .fl import Federation, load_data
from .models import build_model

log = logging.getLogger(__name__)

LEDGER_COLUMNS = (["e_sa", "e_simd"] + [f"e_sram_{b}" for b in BUFFERS]
                  + ["e_dram", "e_total", "sa_ops", "padded_macs", "simd_ops"]
                  + [f"sram_bits_{b}" for b in BUFFERS] + ["dram_bits"])


def device_columns(group_labels) -> list[str]:
    return (["seed", "round", "device", "group", "strategy", "accelerator", "samples", "batches", "lr", "loss"]
            + LEDGER_COLUMNS + ["cumulative_energy", "top1", "variance"]
            + [f"group_acc_{g}" for g in group_labels])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_seed_csv(path, fed: Federation, seed: int) -> None:
    labels = list(fed.groups.labels)
    cols = device_columns(labels)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for rec in fed.state.history:
            m = rec.metrics
            gacc = dict(zip(_present_groups(fed), m.group_accuracy))
            for dr in rec.devices:
                row = {"seed": seed, "round": rec.round, "device": dr.device, "group": dr.group,
                       "strategy": dr.strategy, "accelerator": dr.accelerator, "samples": dr.samples,
                       "batches": dr.batches, "lr": rec.lr, "loss": dr.loss,
                       "cumulative_energy": dr.cumulative_energy, "top1": m.top1, "variance": m.variance}
                row.update(dr.ledger.row())
                row.update({f"group_acc_{g}": gacc.get(g, "") for g in labels})
                w.writerow([_fmt(row[c]) for c in cols])


def _present_groups(fed: Federation) -> list[str]:
    return [fed.groups.labels[g] for g, c in enumerate(fed.group_counts) if np.sum(c) > 0]


def _mean_std(values) -> dict:
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std())}


def group_minibatch_energy(cfg: RunConfig, model, table: EnergyTable) -> dict:
    """Per-group energy of one mini-batch of the model each group trains."""
    out = {}
    for g in cfg.groups:
        s = g.strategy
        if s.kind is StrategyKind.DROP:
            out[g.label] = 0.0
            continue
        plan = apply_strategy(0, s, model, 0)
        m = extract_submodel(model, plan.mask) if plan.mask is not None else model
        e = minibatch_energy(m, plan.accelerator, cfg.batch_size, table).total
        out[g.label] = e
    return out


def run_experiment(cfg: RunConfig, output_dir: str | None = None) -> dict:
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    table = cfg.load_energy_table()
    per_seed = []
    for seed in cfg.seeds:
        fed = Federation(cfg, seed, train, test, table)
        fed.run()
        write_seed_csv(out / f"seed{seed}.csv", fed, seed)
        last = fed.state.history[-1].metrics
        energy = {}
        for label in fed.groups.labels:
            devs = [d for d in range(cfg.devices) if fed.groups.labels[fed.groups.device_group[d]] == label]
            energy[label] = float(fed.cumulative[devs].sum())
        per_seed.append({"seed": seed, "top1": last.top1, "group_accuracy": dict(zip(_present_groups(fed), last.group_accuracy)),
                         "variance": last.variance, "energy_by_group": energy,
                         "accuracy_curve": [r.metrics.top1 for r in fed.state.history]})
    ref_model = build_model(cfg.model, train.shape, cfg.num_classes or train.num_classes, width=cfg.model_width)
    mb = group_minibatch_energy(cfg, ref_model, table)
    full = build_model(cfg.model, train.shape, cfg.num_classes or train.num_classes)
    c1 = minibatch_energy(full, accelerator("C1"), cfg.batch_size, table).total
    # per-epoch work relative to a full epoch: FedProx-style groups run a fraction of their batches
    work = {g.label: mb[g.label] * g.strategy.batch_fraction for g in cfg.groups}
    constrained = [work[g.label] for g in cfg.groups[1:] if work[g.label] > 0] or [work[cfg.groups[0].label]]
    reduction = c1 / float(np.mean(constrained)) if np.mean(constrained) > 0 else float("inf")
    groups = sorted({g for s in per_seed for g in s["group_accuracy"]})
    summary = {
        "config": cfg.to_dict(),
        "seeds": per_seed,
        "top1": _mean_std([s["top1"] for s in per_seed]),
        "variance": _mean_std([s["variance"] for s in per_seed]),
        "group_accuracy": {g: _mean_std([s["group_accuracy"][g] for s in per_seed if g in s["group_accuracy"]]) for g in groups},
        "minibatch_energy_j": mb,
        "epoch_work_j": work,
        "c1_minibatch_energy_j": c1,
        "energy_reduction_vs_c1": reduction,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "pareto.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "experiment", "energy_reduction_vs_c1", "top1_mean", "top1_std", "variance_mean"])
        w.writerow([cfg.name, cfg.experiment or "custom", _fmt(reduction), _fmt(summary["top1"]["mean"]),
                    _fmt(summary["top1"]["std"]), _fmt(summary["variance"]["mean"])])
    return summary


# ---------------------------------------------------------------------------
# breakdown

def breakdown_rows(model_spec: dict | None = None, in_shape=(3, 32, 32), num_classes: int = 10,
                   batch_size: int = 32, table: EnergyTable | None = None,
                   presets=("C1", "C2", "C3", "C4", "C5", "S1", "S2", "S3", "S4")) -> list[dict]:
    """One-mini-batch energy per preset with component shares and ratio to C1."""
    table = table or EnergyTable()
    spec = model_spec or {"arch": "resnet", "depth": 20}
    full = build_model(spec, in_shape, num_classes)
    base = minibatch_energy(full, accelerator("C1"), batch_size, table).total
    rows = []
    for name in presets:
        if name in SCALES:
            model = build_model(spec, in_shape, num_classes, width=SCALES[name]) if SCALES[name] < 1 else full
            led = minibatch_energy(model, accelerator("C1"), batch_size, table)
        else:
            led = minibatch_energy(full, accelerator(name), batch_size, table)
        sh = led.shares()
        rows.append({"preset": name, "e_total_j": led.total, "e_sa_j": led.e_sa, "e_simd_j": led.e_simd,
                     "e_sram_j": led.e_sram_total, "e_dram_j": led.e_dram,
                     "share_sa": sh["sa"], "share_simd": sh["simd"], "share_sram": sh["sram"],
                     "share_dram": sh["dram"], "ratio_vs_c1": base / led.total})
    return rows


def report_energy_breakdown(cfg: RunConfig | None = None, batch_size: int | None = None,
                            table: EnergyTable | None = None) -> list[dict]:
    if cfg is None:
        return breakdown_rows(batch_size=batch_size or 32, table=table)
    in_shape = cfg.input_shape
    classes = cfg.num_classes
    if in_shape is None or classes is None:
        train, _ = load_data(cfg)
        in_shape = in_shape or train.shape
        classes = classes or train.num_classes
    return breakdown_rows(cfg.model, in_shape, classes, batch_size or cfg.batch_size,
                          table or cfg.load_energy_table())


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[c] + [f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for r in rows] for c in cols]
    widths = [max(len(x) for x in col) for col in cells]
    lines = []
    for i in range(len(rows) + 1):
        lines.append("  ".join(cells[j][i].rjust(widths[j]) for j in range(len(cols))))
    return "\n".join(lines)
