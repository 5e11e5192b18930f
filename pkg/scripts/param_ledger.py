"""Parameter counts of the added components for every dims preset, plus full-model totals."""
from bevbridge.config import DIMS_PRESETS
from bevbridge.model import build_model, param_ledger


def main():
    print(f"{'preset':<7} {'decoder':>10} {'upsampler':>10} {'bridge':>10} {'total':>10} "
          f"{'baseline':>10} {'with bridge':>12}")
    for name, dims in DIMS_PRESETS.items():
        led = param_ledger(dims)
        base = build_model(dims, "baseline", 0).num_parameters()
        full = build_model(dims, "ctab", 0).num_parameters()
        assert full - base == led.ctab
        print(f"{name:<7} {led.decoder:>10,d} {led.upsampler:>10,d} {led.ctab:>10,d} {led.total:>10,d} "
              f"{base:>10,d} {full:>12,d}")


if __name__ == "__main__":
    main()
