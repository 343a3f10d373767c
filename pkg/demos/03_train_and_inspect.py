# %% [markdown]
# # Training a small classifier and reading its attention
#
# A generated corpus of four algorithm families (brute force, dynamic
# programming, sorting, string handling) is enough to watch the whole
# pipeline learn.  The model here is narrower than the default so the
# script finishes in seconds; `sacc train` with no overrides uses the full
# 128-wide, two-layer setup.

# %%
import numpy as np

from sacc.attention import ModelConfig
from sacc.corpus import generate_corpus
from sacc.model import attention_export
from sacc.train import TrainConfig, build_dataset, evaluate, predict_source, train
from sacc.treesplit import adjacency

records = generate_corpus(80, seed=1)
ds = build_dataset(records, seed=1)
print(ds.label_names)
print({s: len(ds.subset(s)) for s in ("train", "val", "test")})
print(records[0]["source"])

# %% [markdown]
# ## Training
#
# Adamax, batches of 16, the best epoch by validation accuracy is kept.

# %%
model_cfg = ModelConfig(d_model=32, d_embed=32, d_k=16, d_ff=64)
result = train(ds, model_cfg, TrainConfig(epochs=10, seed=1),
               on_epoch=lambda r: print(f"epoch {r.epoch:2d}  loss {r.train_loss:.4f}  val {r.val_accuracy:.3f}"))
print("best epoch", result.best_epoch)

# %%
m = evaluate(result.best, ds.subset("test"))
print(f"test accuracy {m.accuracy:.3f}  macro F1 {m.f1:.3f}")
print(np.array(m.confusion))

# %% [markdown]
# ## One prediction

# %%
probe = generate_corpus(4, seed=99)[2]
probs = predict_source(result.best, probe["source"])
print("true:", probe["label"])
for name, p in sorted(zip(result.best.label_names, probs), key=lambda kv: -kv[1]):
    print(f"  {name:<20} {p:.3f}")

# %% [markdown]
# ## Where one head looks
#
# The export holds the full weight matrix with exact zeros outside the mask,
# plus the statement labels for the axes.  A plotting library can draw it
# directly; here it is printed as shaded text.

# %%
sample = ds.subset("test")[0]
ckpt = result.best
exp = attention_export(ckpt.params, ckpt.config, ckpt.vocab, sample.seq,
                       adjacency(sample.seq), layer=1, head=0)
w = np.array(exp["weights"])
shades = " .:-=+*#%@"
for label, row in zip(exp["labels"], w):
    cells = "".join(shades[min(9, int(x * 10))] if x > 0 else " " for x in row)
    print(f"{label[:18]:>18} |{cells}|")
