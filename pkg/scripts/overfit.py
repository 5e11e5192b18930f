"""Overfit the bridge arm on a handful of fixed scenes and report train-set recovery.

    python3 scripts/overfit.py --out runs/overfit --steps 500
"""
import argparse
import json
from dataclasses import replace

from bevbridge.config import TrainConfig
from bevbridge.data import TrainData, scene_config
from bevbridge.metrics import unrecovered
from bevbridge.train import evaluate, load_checkpoint, model_from_checkpoint, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arm", choices=("baseline", "ctab"), default="ctab")
    args = p.parse_args()

    cfg = TrainConfig(arm=args.arm, seed=args.seed, steps=args.steps, peak_lr=args.lr,
                      warmup_iters=min(50, args.steps // 10), batch_size=args.scenes, num_scenes=args.scenes,
                      augment=False, eval_scenes=8)
    report = train(cfg, args.out, log=print)
    model = model_from_checkpoint(load_checkpoint(f"{args.out}/checkpoint.npz"))
    res = evaluate(model, TrainData(cfg).pool, cfg, cfg.seed)
    cell = scene_config(cfg.dims).cell_size
    missed = unrecovered(res.predictions, res.ground_truth, cell)
    print(json.dumps({
        "train_miou": res.miou,
        "train_iou": dict(zip(res.class_names, map(float, res.iou))),
        "vehicles": res.detection.num_gt,
        "missed_within_one_cell": len(missed),
        "gates": report.metrics.get("gates"),
        "held_out": report.metrics["eval"]["iou"],
        "seconds": round(report.seconds, 1),
    }, indent=2))


if __name__ == "__main__":
    main()
