"""Both arms over several seeds, aggregated into the comparison table and gate plot."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .ctab import read_gate_csv
from .data import scene_config
from .metrics import table_columns, write_comparison_csv
from .report import gate_svg
from .train import RunDirExists, prepare_run_dir, train

ARMS = ("baseline", "ctab")


@dataclass
class AblationResult:
    out_dir: Path
    table: dict[str, dict[str, float]]
    per_seed: dict[int, dict[str, dict[str, float]]]
    gate_csv: Path
    gate_svg: Path


def _nanmean(values) -> float:
    finite = [v for v in values if not np.isnan(v)]
    return float(np.mean(finite)) if finite else float("nan")


def mean_gate_curve(paths: Sequence[Path]) -> list[tuple[int, float, float]]:
    runs = [read_gate_csv(p) for p in paths]
    n = min(len(r) for r in runs)
    out = []
    for k in range(n):
        out.append((runs[0][k].step,
                    float(np.mean([r[k].sigma_g_det for r in runs])),
                    float(np.mean([r[k].sigma_g_seg for r in runs]))))
    return out


def run_ablation(cfg: TrainConfig, seeds: Sequence[int], out_dir, force: bool = False,
                 log: Callable[[str], None] | None = None) -> AblationResult:
    if not seeds:
        raise ValueError("need at least one seed")
    out_dir = Path(out_dir)
    table_path = out_dir / "ablation.csv"
    if table_path.exists() and not force:
        raise RunDirExists(f"{out_dir} already holds an ablation; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    class_names = scene_config(cfg.dims).class_names
    cols = table_columns(class_names)[1:]

    per_seed: dict[int, dict[str, dict[str, float]]] = {}
    gate_files = []
    for seed in seeds:
        rows = {}
        for arm in ARMS:
            run_cfg = replace(cfg, seed=seed, arm=arm)
            run_dir = prepare_run_dir(out_dir / "runs", run_cfg, force=force)
            if log:
                log(f"== seed {seed} arm {arm} -> {run_dir}")
            report = train(run_cfg, run_dir, log=log)
            rows[arm] = report.metrics["eval"]["iou"]
            if arm == "ctab":
                gate_files.append(run_dir / "gates.csv")
        per_seed[seed] = rows
        write_comparison_csv(out_dir / f"ablation_seed{seed}.csv", rows, class_names)

    table = {arm: {c: _nanmean([per_seed[s][arm][c] for s in seeds]) for c in cols} for arm in ARMS}
    write_comparison_csv(table_path, table, class_names)

    curve = mean_gate_curve(gate_files)
    gate_csv = out_dir / "gates.csv"
    with open(gate_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "sigma_g_det", "sigma_g_seg"))
        for step, a, b in curve:
            w.writerow((step, repr(a), repr(b)))
    svg_path = out_dir / "gates.svg"
    svg_path.write_text(gate_svg({
        "sigma(g_det)": [(s, a) for s, a, _ in curve],
        "sigma(g_seg)": [(s, b) for s, _, b in curve],
    }, title=f"gate evolution, mean over seeds {list(seeds)}"))
    (out_dir / "seeds.json").write_text(json.dumps({"seeds": list(seeds), "config": cfg.to_dict()}, indent=2))
    return AblationResult(out_dir, table, per_seed, gate_csv, svg_path)
