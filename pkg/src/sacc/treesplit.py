"""Statement-level splitting of an AST into a sequence of statement trees.

Compound statements (FuncDef, If, While, For, DoWhile) keep their header
(condition, init/update, signature) as one tree; their block bodies are split
further and the resulting trees are parented to the header.  The parent
links form a tree of trees whose adjacency drives the AST attention pattern.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .cfront import AstNode
from .errors import EmptyProgram


@dataclass
class StatementTree:
    index: int
    header_kind: str
    nodes: AstNode

    @property
    def label(self):
        if self.header_kind == "FuncDef" and self.nodes.lexeme:
            return f"FuncDef:{self.nodes.lexeme}"
        return self.header_kind


@dataclass
class StatementSequence:
    trees: List[StatementTree]
    parent: List[Optional[int]]

    @property
    def N(self):
        return len(self.trees)

    def __len__(self):
        return len(self.trees)


def _header(node):
    """Return (header node, list of body statements) for a statement."""
    k = node.kind
    if k in ("FuncDef", "For", "While"):
        head, body = node.children[:-1], node.children[-1:]
    elif k == "If":
        head, body = node.children[:1], node.children[1:]
    elif k == "DoWhile":
        head, body = node.children[1:], node.children[:1]
    else:
        return node, []
    return AstNode(k, node.lexeme, list(head), node.span), body


def split(root):
    """Split a TranslationUnit into a pre-ordered StatementSequence."""
    if root.kind != "TranslationUnit":
        raise ValueError(f"expected TranslationUnit, got {root.kind}")
    if not root.children:
        raise EmptyProgram("translation unit has no declarations")
    trees = [StatementTree(0, "TranslationUnit", AstNode("TranslationUnit", None, [], root.span))]
    parent = [None]

    # explicit stack instead of recursion: deeply nested code should not hit
    # the interpreter recursion limit
    stack = [(item, 0) for item in reversed(root.children)]
    while stack:
        node, par = stack.pop()
        if node.kind == "Compound":
            stack.extend((c, par) for c in reversed(node.children))
            continue
        head, bodies = _header(node)
        idx = len(trees)
        trees.append(StatementTree(idx, node.kind, head))
        parent.append(par)
        stack.extend((b, idx) for b in reversed(bodies))
    return StatementSequence(trees, parent)


def adjacency(seq, closure=False):
    """Boolean N x N matrix of parent-child links plus self-loops.

    With ``closure=True`` every ancestor/descendant pair is linked instead of
    only direct parent/child pairs.
    """
    n = seq.N
    adj = np.eye(n, dtype=bool)
    for i, p in enumerate(seq.parent):
        if p is None:
            continue
        if closure:
            a = p
            while a is not None:
                adj[i, a] = adj[a, i] = True
                a = seq.parent[a]
        else:
            adj[i, p] = adj[p, i] = True
    return adj


def adjacency_edges(adj):
    """Off-diagonal allowed pairs as a sorted list of [i, j]."""
    ii, jj = np.nonzero(adj)
    return [[int(i), int(j)] for i, j in zip(ii, jj) if i != j]


_OPERATOR_KINDS = ("BinaryOp", "UnaryOp")


def node_token(node):
    k = node.kind
    if k == "ID":
        return node.lexeme
    if k in ("Constant", "TypeName"):
        return f"{k}:{node.lexeme}"
    if k in _OPERATOR_KINDS:
        return f"{k}:{node.lexeme}"
    if k == "Assign":
        return "Assign" if node.lexeme == "=" else f"Assign:{node.lexeme}"
    return k


def tree_tokens(tree):
    """Pre-order token list of one statement tree."""
    root = tree.nodes if isinstance(tree, StatementTree) else tree
    return [node_token(n) for n in root.walk()]


def split_to_dict(seq, closure=False):
    adj = adjacency(seq, closure=closure)
    return {
        "trees": [
            {"index": t.index, "header_kind": t.header_kind, "tokens": tree_tokens(t)}
            for t in seq.trees
        ],
        "parent": list(seq.parent),
        "adj_edges": adjacency_edges(adj),
    }
