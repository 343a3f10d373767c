"""Bundled sample programs and a templated synthetic corpus.

``bundled_records`` returns seven labelled OJ-style programs, one per
algorithm category.  ``generate_corpus`` produces a balanced four-class
corpus (brute force, dynamic programming, sorting, string) whose programs
vary identifiers, constants, loop bounds and a few optional statements.
"""

import json
from importlib import resources
from pathlib import Path

import numpy as np

BUNDLED_DIR = Path(str(resources.files("sacc") / "data" / "bundled"))
BUNDLED_MANIFEST = BUNDLED_DIR / "manifest.jsonl"


def bundled_records():
    out = []
    for line in BUNDLED_MANIFEST.read_text().splitlines():
        entry = json.loads(line)
        out.append({"id": entry["path"], "label": entry["label"],
                    "source": (BUNDLED_DIR / entry["path"]).read_text()})
    return out


_NAMES = ["a", "b", "c", "i", "j", "k", "m", "n", "p", "q", "r", "s", "t", "x", "y", "z",
          "idx", "cnt", "num", "tmp", "val", "len", "pos", "row", "col", "sum", "res", "cur"]


def _names(rng, count):
    return list(rng.choice(_NAMES, size=count, replace=False))


def _brute_force(rng):
    i, j, res = _names(rng, 3)
    lo = int(rng.integers(0, 3))
    hi1, hi2 = int(rng.integers(5, 20)), int(rng.integers(5, 20))
    op = rng.choice(["*", "+"])
    body = f'printf("%d %d %d\\n", {i}, {j}, {i} {op} {j});'
    if rng.random() < 0.5:
        body = f"{res} = {i} {op} {j};\n            " + f'printf("%d\\n", {res});'
    lines = [
        "int main(){",
        f"    int {i}, {j}, {res};",
        f"    for({i} = {lo}; {i} < {hi1}; {i}++){{",
        f"        for({j} = {lo}; {j} < {hi2}; {j}++){{",
        f"            {body}",
        "        }",
        "    }",
    ]
    if rng.random() < 0.3:
        lines.append('    printf("\\n");')
    lines += ["    return 0;", "}"]
    return "\n".join(lines) + "\n"


def _dynamic_programming(rng):
    arr, i, n = _names(rng, 3)
    size = int(rng.integers(20, 60))
    k = int(rng.integers(2, 4))
    base = [f"    {arr}[{t}] = {int(rng.integers(1, 5))};" for t in range(k)]
    terms = " + ".join(f"{arr}[{i} - {t}]" for t in range(1, k + 1))
    fn = rng.choice(["dp", "solve", "calc", "f"])
    lines = [f"int {fn}(int {n}) {{", f"    int {arr}[{size}];", f"    int {i};"] + base
    if rng.random() < 0.5:
        lines.append(f"    for ({i} = {k}; {i} < {size}; {i}++)")
        lines.append(f"        {arr}[{i}] = {terms};")
    else:
        lines.append(f"    for ({i} = {k}; {i} < {size}; {i}++) {{")
        lines.append(f"        {arr}[{i}] = {terms};")
        lines.append(f"        {arr}[{i}] = {arr}[{i}] % {int(rng.integers(100, 100000))};")
        lines.append("    }")
    lines += [f"    return {arr}[{n}];", "}"]
    if rng.random() < 0.5:
        lines += ["int main() {", f"    int {i};", f'    scanf("%d", &{i});',
                  f'    printf("%d\\n", {fn}({i}));', "    return 0;", "}"]
    return "\n".join(lines) + "\n"


def _sorting(rng):
    a, b, n, arr, i, ans = _names(rng, 6)
    cmp = rng.choice(["cmp", "cmpint", "compare", "less"])
    size = int(rng.integers(50, 500))
    mult = int(rng.integers(1, 3))
    bound = f"{mult} * {n}" if mult > 1 else n
    sign = rng.choice(["-", ""])
    lines = [
        f"int {cmp}(const void *{a}, const void *{b}) {{",
        f"    return *(int *){a} - *(int *){b};" if sign == "-" else f"    return *(int *){b} - *(int *){a};",
        "}",
        "int main() {",
        f"    int {n}, {arr}[{size}];",
        f'    scanf("%d", &{n});',
        f"    for (int {i} = 0; {i} < {bound}; {i}++) {{",
        f'        scanf("%d", &{arr}[{i}]);',
        "    }",
        f"    qsort({arr}, {bound}, sizeof(int), {cmp});",
        f"    int {ans} = 0;",
        f"    for (int {i} = 0; {i} < {n}; {i}++) {{",
        f"        {ans} += {arr}[{mult} * {i}];",
        "    }",
        f'    printf("%d\\n", {ans});',
        "    return 0;",
        "}",
    ]
    return "\n".join(lines) + "\n"


def _string(rng):
    i, s = _names(rng, 2)
    size = int(rng.integers(20, 200))
    lines = [f"int {i};", f"char {s}[{size}];", "int main(){", f'    scanf("%s", {s});']
    if rng.random() < 0.5:
        lines += [f"    for({i} = 0; {i} < strlen({s}); {i}++)",
                  f'        printf("%c", {s}[strlen({s}) - {i} - 1]);']
    else:
        lines += [f"    for({i} = strlen({s}) - 1; {i} >= 0; {i}--)",
                  f'        printf("%c", {s}[{i}]);']
    if rng.random() < 0.5:
        lines.append('    printf("\\n");')
    lines += ["    return 0;", "}"]
    return "\n".join(lines) + "\n"


TEMPLATES = {
    "Brute Force": _brute_force,
    "Dynamic Programming": _dynamic_programming,
    "Sorting": _sorting,
    "String": _string,
}


def generate_corpus(n=200, seed=0):
    """Balanced records ``{"id", "source", "label"}`` cycling through the templates."""
    rng = np.random.default_rng(seed)
    labels = list(TEMPLATES)
    records = []
    for k in range(n):
        label = labels[k % len(labels)]
        records.append({"id": f"synth_{k:04d}.c", "label": label, "source": TEMPLATES[label](rng)})
    return records


def write_corpus(records, out_dir):
    """Write records as files plus a manifest.jsonl; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        (out / r["id"]).write_text(r["source"])
        entry = {"path": r["id"], "label": r["label"]}
        if "split" in r:
            entry["split"] = r["split"]
        lines.append(json.dumps(entry))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
