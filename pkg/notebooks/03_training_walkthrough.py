#!/usr/bin/env python3
# %% [markdown]
# # Training with learnable scales
#
# A short Adam run on the synthetic two-period data. With the learnable
# strategy every block's step-size multiplier is a trained scalar; its
# trajectory is logged once per optimizer step.

# %%
import tempfile
from pathlib import Path

import numpy as np

from msmamba import (
    ForecastModel,
    ModelConfig,
    SynthSpec,
    TrainConfig,
    chronological_split,
    evaluate,
    log_scale_trajectory,
    standardize,
    synth_multiscale,
    train,
)

ds = standardize(chronological_split(synth_multiscale(SynthSpec(length=3000, n_variates=4))))
config = ModelConfig(lookback=32, horizon=16, n_variates=4, d_model=16, n_scales=4, strategy="learnable")
model = ForecastModel.init(config, 0)
print("initial multipliers:", np.round(model.scale_values(), 3))

# %%
model, history = train(model, ds, TrainConfig(lr=1e-3, batch_size=32, max_epochs=100, patience=100, max_steps=300))
print("steps:", history.steps, "best epoch:", history.best_epoch + 1)
for epoch, (tr, va) in enumerate(zip(history.train_mse, history.val_mse), start=1):
    print(f"epoch {epoch}: train {tr:.4f}  val {va:.4f}")

# %% [markdown]
# How far the multipliers move, in 50-step chunks. How much they settle
# depends on the seed and the learning rate; longer runs flatten out.

# %%
values = np.array(history.scale_values)
for start in range(0, len(values), 50):
    chunk = values[start : start + 50]
    print(f"steps {start + 1:>3}-{start + len(chunk):<3}  mean {np.round(chunk.mean(0), 3)}  std {np.round(chunk.std(0), 4)}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "scales.csv"
    log_scale_trajectory(history, path)
    print(path.read_text().splitlines()[:3])

# %% [markdown]
# ## Test metrics
#
# Metrics are in standardized units by default; the de-normalized numbers
# use the train-range statistics stored with the dataset.

# %%
metrics = evaluate(model, ds, "test", denormalized=True)
print({k: round(v, 4) for k, v in metrics.items()})
