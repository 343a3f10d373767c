# %% [markdown]
# # From C source to a sequence of statement trees
#
# The classifier never looks at raw tokens. A program is parsed into an AST,
# the AST is cut into one small tree per statement, and the nesting of those
# statements becomes a second, coarser tree.  This walk-through does that for
# the multiplication-table program bundled with the package.

# %%
from sacc.cfront import parse_source, unparse
from sacc.corpus import bundled_records
from sacc.treesplit import adjacency, split, tree_tokens

source = next(r["source"] for r in bundled_records() if r["id"].startswith("alg1"))
print(source)

# %% [markdown]
# ## Parsing
#
# `parse_source` strips comments, expands object-like `#define`s and runs a
# recursive-descent parser.  Pretty-printing the tree back gives normalized C.

# %%
root = parse_source(source)
print(unparse(root))

# %% [markdown]
# ## Splitting
#
# Every statement becomes its own tree.  Compound bodies are cut away from
# their headers, so the `for` tree holds only the loop header and the inner
# statements hang below it.  Tree 0 is a synthetic root for the whole file.

# %%
seq = split(root)


def depth(i):
    d = 0
    while seq.parent[i] is not None:
        i, d = seq.parent[i], d + 1
    return d


for i, tree in enumerate(seq.trees):
    label = "  " * depth(i) + tree.label
    print(f"{i}  parent={seq.parent[i]!s:>4}  {label:<22} {' '.join(tree_tokens(tree))}")

# %% [markdown]
# The parent links give the adjacency used by the AST attention pattern:
# a statement may attend to its enclosing statement and to the statements
# directly inside it.

# %%
adj = adjacency(seq)
for row in adj:
    print("".join("#" if a else "." for a in row))
print("allowed entries:", int(adj.sum()))
