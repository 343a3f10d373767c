# %% [markdown]
# # Sparse attention masks
#
# Attention between statement trees is restricted to a union of patterns:
# a sliding window, a few global positions, and the parent/child links of
# the statement nesting.  Each allowed pair remembers which patterns let it
# through, which makes the masks easy to inspect.

# %%
import numpy as np

from sacc import tensor as T
from sacc.attention import (ModelConfig, ast_mask, build_mask, dilated_mask, global_mask, local_mask,
                            masked_attention, random_mask, union)
from sacc.bench import random_tree_adjacency


def show(mask):
    for row in mask.to_dense():
        print(" ".join("#" if a else "." for a in row))
    print(f"{mask.pairs} of {mask.N * mask.N} pairs\n")


# %% [markdown]
# ## The individual patterns on eight positions

# %%
n = 8
for name, m in [("local w=3", local_mask(n, 3)), ("dilated w=3 gap=2", dilated_mask(n, 3, 2)),
                ("global {0}", global_mask(n, {0})), ("random 1/row", random_mask(n, 1, seed=0))]:
    print(name)
    show(m)

# %% [markdown]
# ## The AST pattern and the default union
#
# A random recursive tree stands in for the statement nesting of a program.

# %%
rng = np.random.default_rng(4)
adj = random_tree_adjacency(n, rng)
print("ast")
show(ast_mask(adj))
combined = build_mask(n, ModelConfig(), adj)
print("local | global | ast")
show(combined)

# %% [markdown]
# Provenance of a few cells: which patterns admitted them.

# %%
for i, j in [(0, 0), (3, 0), (3, 4), (5, 2)]:
    prov = combined.provenance(i, j)
    print((i, j), "disallowed" if prov is None else sorted(prov))

# %% [markdown]
# ## The union grows linearly
#
# Window 3, one global position and the tree links together stay under
# eight pairs per position however long the sequence gets.

# %%
for n in (16, 256, 4096):
    m = build_mask(n, ModelConfig(), random_tree_adjacency(n, rng))
    print(f"N={n:5d}  pairs={m.pairs:6d}  pairs/N={m.pairs / n:.2f}  dense={n * n}")

# %% [markdown]
# ## Two kernels, one answer
#
# The sparse kernel scores only the allowed pairs; the dense one scores all
# of them and excludes the rest from the softmax.  Outputs and gradients
# agree to rounding.

# %%
n = 40
mask = build_mask(n, ModelConfig(), random_tree_adjacency(n, rng))
q, k, v = (rng.standard_normal((n, 16)) for _ in range(3))
res = {}
for path in ("sparse", "dense"):
    ts = [T.Tensor(a, requires_grad=True) for a in (q, k, v)]
    out, w = masked_attention(*ts, mask, path)
    T.sum_all(out).backward()
    res[path] = (out.data, w, ts[1].grad)
for label, a, b in zip(("output", "weights", "dK"), res["sparse"], res["dense"]):
    print(f"{label:8s} max |sparse - dense| = {np.max(np.abs(a - b)):.1e}")
print("weight on disallowed pairs:", res["sparse"][1][~mask.to_dense()].max())
