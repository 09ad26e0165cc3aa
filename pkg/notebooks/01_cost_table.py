"""Mult-Adds of MobileNetV2, static versus dynamic, for several widths and K."""

# %%
from dyconv.cost import format_grid, madds_grid, mobilenet_v2_spec, network_madds

grid = madds_grid()
print(format_grid(grid))

# %% where does the extra cost go?
net = mobilenet_v2_spec(1.0)
dyn = network_madds(net, dynamic=True, k=4)
print(f"conv {dyn.conv_total / 1e6:.1f}M  attention {dyn.attention_total / 1e6:.2f}M  "
      f"aggregation {dyn.aggregation_total / 1e6:.2f}M")

# the costliest dynamic layers, by extra work relative to their convolution
worst = sorted((l for l in dyn.layers if l.constraint_ratio), key=lambda l: -l.constraint_ratio)[:5]
for l in worst:
    print(f"{l.name:22s} {l.constraint_ratio:.3f}")
