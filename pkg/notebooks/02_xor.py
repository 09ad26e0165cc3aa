"""One dynamic layer is enough for XOR; a static one is not."""

# %%
from dyconv.dynamic import XOR_POINTS, dynamic_xor, static_perceptron_xor, xor_attention
from dyconv.train import solve_xor

for x in XOR_POINTS:
    pi = xor_attention(x)
    print(x.astype(int), "attention", pi.round(2), "->", dynamic_xor(x), "| two-layer static ->", static_perceptron_xor(x))

# %% learn it from scratch
for seed in range(5):
    _, step = solve_xor(seed=seed)
    print(f"seed {seed}: solved after {step} steps")

# %% K=1 collapses to a single linear unit and cannot get there
_, step = solve_xor(seed=0, k=1)
print("K=1 solved at step:", step)
