"""Both arms over several seeds on fresh synthetic scenes; prints the comparison table.

    python3 scripts/ablate.py --seeds 0 1 2 --steps 500 --out ablation
"""
import argparse

from bevbridge.ablation import run_ablation
from bevbridge.config import TrainConfig
from bevbridge.metrics import DELTA_ROW


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--out", default="ablation")
    p.add_argument("--force", action="store_true")
    args = p.parse_args()

    cfg = TrainConfig(steps=args.steps, peak_lr=args.lr, warmup_iters=min(50, args.steps // 10))
    res = run_ablation(cfg, args.seeds, args.out, force=args.force, log=print)
    print((res.out_dir / "ablation.csv").read_text())
    delta = res.table["ctab"]["mIoU"] - res.table["baseline"]["mIoU"]
    print(f"{DELTA_ROW}: mIoU {delta:+.4f} over {len(args.seeds)} seed(s)")
    print(f"gate plot: {res.gate_svg}")


if __name__ == "__main__":
    main()
