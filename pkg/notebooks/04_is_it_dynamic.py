"""Is the trained network really using input-dependent kernels?

On digits the attention stays nearly uniform, so swapping it for the
kernel average costs almost nothing.  The pairs task is built so that the
same stroke orientation means different classes depending on how the two
strokes are arranged, and there the learned attention matters.
"""

# %%
from dyconv.data import load_dataset
from dyconv.inspection import (
    ablate_modes,
    ablate_stages,
    attention_stats,
    modes_report,
    nested_stage_masks,
    stages_report,
    stats_report,
)
from dyconv.train import TrainConfig, train

thin = dict(stem_channels=4, blocks=[[8, 2], [8, 2], [8, 1]], tau_schedule={"kind": "constant", "tau": 1.0})

# %% pairs
train_set, test_set = load_dataset("pairs")
model = train(TrainConfig(dataset="pairs", epochs=40, seed=1, **thin), datasets=(train_set, test_set)).model
print(modes_report(ablate_modes(model, test_set))[0])
print()
rows = [(m, ablate_stages(model, test_set, m)) for m in nested_stage_masks(model.num_stages)]
print(stages_report(model, rows)[0])
print()
print(stats_report(attention_stats(model, test_set))[0])

# %% digits, for contrast
digits = load_dataset("digits")
model = train(TrainConfig(epochs=15, seed=0), datasets=digits).model
print(modes_report(ablate_modes(model, digits[1]))[0])
print(stats_report(attention_stats(model, digits[1]))[0])
