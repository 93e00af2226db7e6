"""Parameter and FLOP counts of the four ablation cells, at desk width and at the
published backbone widths. No training, runs in a few seconds."""

from mams import ModelConfig, full_width_config
from mams.training import structural_counts


def show(title, cfg):
    counts = structural_counts(cfg)
    print(title)
    for cell, c in counts.items():
        print(f"  {cell:<14} params {c['params']:>12,}  FLOPs {c['flops']:>16,}")
    d_mom = counts["momentum-only"]["params"] - counts["baseline"]["params"]
    d_fus = counts["fusion-only"]["params"] - counts["baseline"]["params"]
    print(f"  momentum adds {d_mom:,} params, fusion adds {d_fus:,}\n")


show("desk model, 32x32 input", ModelConfig())
show("published widths (1280 channels), 224x224 input", full_width_config())
