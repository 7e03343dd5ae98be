"""
What the two fusion modules cost
================================

Count MACs and parameters for the four module toggles at the default input
size and see how much the cross-resolution and phase-selection modules add.
"""

from sdrformer import analysis
from sdrformer.siamese import SDRFormerConfig

###############################################################################
# Default configuration, three phases, 14 x 112 x 112 crops. Counting runs on
# the meta device, so nothing is allocated.
cfg = SDRFormerConfig()
report = analysis.profile(cfg, (14, 112, 112))
print(f"{report.flops_g:.2f} GFLOPs, {report.params_m:.2f} M parameters")

###############################################################################
# Per-module breakdown, largest first.
top = sorted(report.breakdown.items(), key=lambda kv: kv[1]["macs"], reverse=True)[:8]
for name, row in top:
    print(f"{name:40s} {row['macs'] / 1e9:8.2f} GMACs {row['params']:>10d} params")

###############################################################################
# The ablation grid relative to the baseline.
for name, row in analysis.overhead_table(cfg, (14, 112, 112)).items():
    print(f"{name:12s} {row['flops_g']:8.2f} G  {row['params_m']:6.2f} M  "
          f"+{100 * row['flops_overhead']:.2f}% FLOPs  +{100 * row['params_overhead']:.2f}% params")

###############################################################################
# Phase count only touches the fusion modules.
for n in (1, 3, 8):
    cfg.n_phases = n
    print(n, "phases:", round(analysis.profile(cfg, (14, 112, 112)).params_m, 3), "M params")
