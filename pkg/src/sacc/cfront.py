"""Preprocessor, lexer and recursive-descent parser for a small C subset.

The subset is what online-judge style solutions typically use: function
definitions, scalar and array declarations, the usual statements and C
expression precedence.  There is no symbol table; calls to undeclared names
such as ``printf`` are fine.
"""

import json
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import CSyntaxError, FunctionLikeMacro, UnknownCharacter, UnterminatedComment

NODE_KINDS = (
    "TranslationUnit", "FuncDef", "Decl", "If", "While", "For", "DoWhile",
    "Return", "Break", "Continue", "ExprStmt", "Compound", "BinaryOp",
    "UnaryOp", "Assign", "Call", "ArrayRef", "Cast", "ID", "Constant",
    "TypeName", "ParamList", "InitList", "Ternary",
)

STATEMENT_KINDS = frozenset({
    "FuncDef", "Decl", "If", "While", "For", "DoWhile", "Return", "Break",
    "Continue", "ExprStmt", "Compound",
})

KEYWORDS = frozenset("""
auto break case char const continue default do double else enum extern float
for goto if inline int long register restrict return short signed sizeof static
struct switch typedef union unsigned void volatile while
""".split())

TYPE_KEYWORDS = frozenset("""
void char short int long float double signed unsigned const volatile static
extern register auto inline restrict struct union enum
""".split())


@dataclass
class Token:
    kind: str
    lexeme: str
    line: int
    col: int


@dataclass(eq=False)
class AstNode:
    kind: str
    lexeme: Optional[str] = None
    children: List["AstNode"] = field(default_factory=list)
    span: Tuple[int, int] = (0, 0)

    def walk(self):
        """Yield nodes in pre-order."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def __repr__(self):
        lex = f" {self.lexeme!r}" if self.lexeme is not None else ""
        return f"AstNode({self.kind}{lex}, {len(self.children)} children)"


# ---------------------------------------------------------------------------
# preprocessing

_DIRECTIVE = re.compile(r"^\s*#\s*(\w*)(.*)$")
_DEFINE = re.compile(r"^\s*([A-Za-z_]\w*)(\(?)(.*)$")
_SUBST_TOKEN = re.compile(r'"(?:\\.|[^"\\\n])*"|\'(?:\\.|[^\'\\\n])*\'|[A-Za-z_]\w*')


def _blank_comments(source):
    out = []
    i, n = 0, len(source)
    line = 1
    while i < n:
        c = source[i]
        if c == "/" and i + 1 < n and source[i + 1] == "/":
            while i < n and source[i] != "\n":
                out.append(" ")
                i += 1
        elif c == "/" and i + 1 < n and source[i + 1] == "*":
            start_line = line
            out.append("  ")
            i += 2
            while True:
                if i >= n:
                    raise UnterminatedComment("unterminated /* comment", start_line, None)
                if source[i] == "*" and i + 1 < n and source[i + 1] == "/":
                    out.append("  ")
                    i += 2
                    break
                if source[i] == "\n":
                    out.append("\n")
                    line += 1
                else:
                    out.append(" ")
                i += 1
        elif c in "\"'":
            # copy the literal verbatim so comment markers inside it survive
            j = i + 1
            while j < n and source[j] != c and source[j] != "\n":
                j += 2 if source[j] == "\\" else 1
            j = min(j + 1, n)
            out.append(source[i:j])
            line += source.count("\n", i, j)
            i = j
        else:
            if c == "\n":
                line += 1
            out.append(c)
            i += 1
    return "".join(out)


def _substitute(line, macros):
    if not macros:
        return line

    def repl(m):
        tok = m.group(0)
        if tok[0] in "\"'":
            return tok
        return macros.get(tok, tok)

    return _SUBST_TOKEN.sub(repl, line)


def preprocess(source):
    """Blank comments, drop directives and expand object-like ``#define``s.

    Comment characters become spaces so that line and column numbers of the
    remaining tokens match the original file.  Directive lines are emptied
    but keep their newline.
    """
    text = _blank_comments(source)
    macros = {}
    out_lines = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        m = _DIRECTIVE.match(line)
        if not m:
            out_lines.append(_substitute(line, macros))
            continue
        if m.group(1) == "define":
            d = _DEFINE.match(m.group(2))
            if d:
                name, paren, value = d.groups()
                if paren:
                    raise FunctionLikeMacro(name, lineno)
                macros[name] = _substitute(value.strip(), macros)
        out_lines.append("")
    return "\n".join(out_lines)


# ---------------------------------------------------------------------------
# lexing

_OPERATORS = sorted("""
<<= >>= ... -> ++ -- << >> <= >= == != && || += -= *= /= %= &= |= ^=
+ - * / % < > = ! ~ & | ^ ? : .
""".split(), key=len, reverse=True)

_TOKEN_SPEC = [
    ("newline", r"\n"),
    ("space", r"[ \t\r\f\v]+"),
    ("float-literal", r"(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?[fFlL]?|\d+[eE][+-]?\d+[fFlL]?"),
    ("int-literal", r"0[xX][0-9a-fA-F]+[uUlL]*|\d+[uUlL]*"),
    ("char-literal", r"'(?:\\.|[^'\\\n])+'"),
    ("string-literal", r'"(?:\\.|[^"\\\n])*"'),
    ("identifier", r"[A-Za-z_]\w*"),
    ("operator", "|".join(re.escape(op) for op in _OPERATORS)),
    ("punctuation", r"[()\[\]{};,]"),
    ("mismatch", r"."),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{name.replace('-', '_')}>{pat})" for name, pat in _TOKEN_SPEC))


def lex(text):
    """Tokenize preprocessed text by maximal munch."""
    tokens = []
    line, line_start = 1, 0
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup.replace("_", "-")
        value = m.group()
        col = m.start() - line_start + 1
        if kind == "newline":
            line += 1
            line_start = m.end()
            continue
        if kind == "space":
            continue
        if kind == "mismatch":
            raise UnknownCharacter(value, line, col)
        if kind == "identifier" and value in KEYWORDS:
            kind = "keyword"
        tokens.append(Token(kind, value, line, col))
    return tokens


# ---------------------------------------------------------------------------
# parsing

_ASSIGN_OPS = frozenset({"=", "+=", "-=", "*=", "/=", "%=", "<<=", ">>=", "&=", "|=", "^="})

# lowest to highest precedence
_BINARY_LEVELS = [
    ("||",),
    ("&&",),
    ("|",),
    ("^",),
    ("&",),
    ("==", "!="),
    ("<", ">", "<=", ">="),
    ("<<", ">>"),
    ("+", "-"),
    ("*", "/", "%"),
]

_PREFIX_OPS = {"-": "-", "+": "+", "!": "!", "~": "~", "*": "*", "&": "&", "++": "pre++", "--": "pre--"}


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    # -- token helpers
    def peek(self, offset=0):
        i = self.pos + offset
        return self.tokens[i] if i < len(self.tokens) else None

    def at(self, lexeme, offset=0):
        tok = self.peek(offset)
        return tok is not None and tok.lexeme == lexeme and tok.kind not in (
            "string-literal", "char-literal")

    def error(self, expected):
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else None
            line = last.line if last else 1
            col = last.col + len(last.lexeme) if last else 1
            raise CSyntaxError(expected, "<end of input>", line, col)
        raise CSyntaxError(expected, tok.lexeme, tok.line, tok.col)

    def expect(self, lexeme):
        if not self.at(lexeme):
            self.error(repr(lexeme))
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def accept(self, lexeme):
        if self.at(lexeme):
            self.pos += 1
            return True
        return False

    def node(self, kind, lexeme=None, children=None, start=None):
        return AstNode(kind, lexeme, children or [], (self.pos if start is None else start, self.pos))

    def starts_type(self, offset=0):
        tok = self.peek(offset)
        return tok is not None and tok.kind == "keyword" and tok.lexeme in TYPE_KEYWORDS

    # -- declarations
    def type_specifiers(self):
        words = []
        while self.starts_type():
            tok = self.tokens[self.pos]
            self.pos += 1
            if tok.lexeme in ("struct", "union", "enum"):
                tag = self.peek()
                if tag is None or tag.kind != "identifier":
                    self.error("tag name")
                self.pos += 1
                words.append(f"{tok.lexeme} {tag.lexeme}")
            else:
                words.append(tok.lexeme)
        if not words:
            self.error("type specifier")
        return " ".join(words)

    def declarator(self, allow_abstract=False):
        """Parse ``*... name [dim]...``; returns (node or None, star count)."""
        stars = 0
        while self.accept("*"):
            stars += 1
        tok = self.peek()
        if tok is None or tok.kind != "identifier":
            if allow_abstract:
                return None, stars
            self.error("identifier")
        start = self.pos
        self.pos += 1
        node = AstNode("ID", tok.lexeme, [], (start, self.pos))
        while self.at("["):
            self.pos += 1
            if self.at("]"):
                children = [node]
            else:
                children = [node, self.assignment()]
            self.expect("]")
            node = self.node("ArrayRef", None, children, start)
        for _ in range(stars):
            node = self.node("UnaryOp", "*", [node], start)
        return node, 0

    def initializer(self):
        if self.at("{"):
            start = self.pos
            self.pos += 1
            items = []
            while not self.at("}"):
                items.append(self.initializer())
                if not self.accept(","):
                    break
            self.expect("}")
            return self.node("InitList", None, items, start)
        return self.assignment()

    def param_list(self):
        start = self.pos
        self.expect("(")
        params = []
        if self.at("void") and self.at(")", 1):
            self.pos += 1
        elif not self.at(")"):
            while True:
                pstart = self.pos
                tname = self.type_specifiers()
                tstart = self.pos
                decl, stars = self.declarator(allow_abstract=True)
                if decl is None:
                    tname += " " + "*" * stars if stars else ""
                    params.append(self.node("Decl", None, [AstNode("TypeName", tname, [], (pstart, tstart))], pstart))
                else:
                    params.append(self.node("Decl", None, [AstNode("TypeName", tname, [], (pstart, tstart)), decl], pstart))
                if not self.accept(","):
                    break
        self.expect(")")
        return self.node("ParamList", None, params, start)

    def external(self):
        start = self.pos
        tname = self.type_specifiers()
        type_end = self.pos
        if self.accept(";"):
            # bare "struct X;" style declaration
            return self.node("Decl", None, [AstNode("TypeName", tname, [], (start, type_end))], start)
        save = self.pos
        stars = 0
        while self.accept("*"):
            stars += 1
        tok = self.peek()
        if tok is not None and tok.kind == "identifier" and self.at("(", 1):
            self.pos += 1
            ret = AstNode("TypeName", tname + (" " + "*" * stars if stars else ""), [], (start, type_end))
            name = AstNode("ID", tok.lexeme, [], (self.pos - 1, self.pos))
            params = self.param_list()
            if self.accept(";"):
                return self.node("Decl", None, [ret, name, params], start)
            body = self.compound()
            return self.node("FuncDef", tok.lexeme, [ret, name, params, body], start)
        self.pos = save
        return self.declaration_rest(tname, start, type_end)

    def declaration_rest(self, tname, start, type_end):
        children = [AstNode("TypeName", tname, [], (start, type_end))]
        while True:
            dstart = self.pos
            decl, _ = self.declarator()
            if self.accept("="):
                decl = self.node("Assign", "=", [decl, self.initializer()], dstart)
            children.append(decl)
            if not self.accept(","):
                break
        self.expect(";")
        return self.node("Decl", None, children, start)

    def declaration(self):
        start = self.pos
        tname = self.type_specifiers()
        return self.declaration_rest(tname, start, self.pos)

    # -- statements
    def compound(self):
        start = self.pos
        self.expect("{")
        items = []
        while not self.at("}"):
            if self.peek() is None:
                self.error("'}'")
            items.append(self.statement())
        self.expect("}")
        return self.node("Compound", None, items, start)

    def statement(self):
        tok = self.peek()
        if tok is None:
            self.error("statement")
        start = self.pos
        lx = tok.lexeme if tok.kind in ("keyword", "punctuation") else None
        if lx == "{":
            return self.compound()
        if lx == "if":
            self.pos += 1
            self.expect("(")
            cond = self.expression()
            self.expect(")")
            children = [cond, self.statement()]
            if self.accept("else"):
                children.append(self.statement())
            return self.node("If", None, children, start)
        if lx == "while":
            self.pos += 1
            self.expect("(")
            cond = self.expression()
            self.expect(")")
            return self.node("While", None, [cond, self.statement()], start)
        if lx == "do":
            self.pos += 1
            body = self.statement()
            self.expect("while")
            self.expect("(")
            cond = self.expression()
            self.expect(")")
            self.expect(";")
            return self.node("DoWhile", None, [body, cond], start)
        if lx == "for":
            return self.for_statement()
        if lx == "return":
            self.pos += 1
            children = [] if self.at(";") else [self.expression()]
            self.expect(";")
            return self.node("Return", None, children, start)
        if lx in ("break", "continue"):
            self.pos += 1
            self.expect(";")
            return self.node(lx.capitalize(), None, [], start)
        if lx == ";":
            self.pos += 1
            return self.node("ExprStmt", None, [], start)
        if self.starts_type():
            return self.declaration()
        expr = self.expression()
        self.expect(";")
        return self.node("ExprStmt", None, [expr], start)

    def for_statement(self):
        start = self.pos
        self.pos += 1
        self.expect("(")
        children = []
        present = ""
        if self.starts_type():
            children.append(self.declaration())
            present += "i"
        else:
            if not self.at(";"):
                children.append(self.expression())
                present += "i"
            self.expect(";")
        if not self.at(";"):
            children.append(self.expression())
            present += "c"
        self.expect(";")
        if not self.at(")"):
            children.append(self.expression())
            present += "n"
        self.expect(")")
        children.append(self.statement())
        # lexeme records which header parts exist, only when some are missing
        return self.node("For", None if present == "icn" else present or "-", children, start)

    # -- expressions
    def expression(self):
        start = self.pos
        node = self.assignment()
        while self.accept(","):
            node = self.node("BinaryOp", ",", [node, self.assignment()], start)
        return node

    def assignment(self):
        start = self.pos
        lhs = self.conditional()
        tok = self.peek()
        if tok is not None and tok.kind == "operator" and tok.lexeme in _ASSIGN_OPS:
            self.pos += 1
            rhs = self.assignment()
            return self.node("Assign", tok.lexeme, [lhs, rhs], start)
        return lhs

    def conditional(self):
        start = self.pos
        cond = self.binary(0)
        if not self.accept("?"):
            return cond
        then = self.expression()
        self.expect(":")
        return self.node("Ternary", None, [cond, then, self.conditional()], start)

    def binary(self, level):
        if level == len(_BINARY_LEVELS):
            return self.unary()
        start = self.pos
        node = self.binary(level + 1)
        ops = _BINARY_LEVELS[level]
        while True:
            tok = self.peek()
            if tok is None or tok.kind != "operator" or tok.lexeme not in ops:
                return node
            self.pos += 1
            node = self.node("BinaryOp", tok.lexeme, [node, self.binary(level + 1)], start)

    def type_name(self):
        start = self.pos
        tname = self.type_specifiers()
        stars = 0
        while self.accept("*"):
            stars += 1
        if stars:
            tname += " " + "*" * stars
        return AstNode("TypeName", tname, [], (start, self.pos))

    def unary(self):
        tok = self.peek()
        start = self.pos
        if tok is None:
            self.error("expression")
        if tok.kind == "operator" and tok.lexeme in _PREFIX_OPS:
            self.pos += 1
            return self.node("UnaryOp", _PREFIX_OPS[tok.lexeme], [self.unary()], start)
        if tok.kind == "keyword" and tok.lexeme == "sizeof":
            self.pos += 1
            if self.at("(") and self.starts_type(1):
                self.pos += 1
                operand = self.type_name()
                self.expect(")")
            else:
                operand = self.unary()
            return self.node("UnaryOp", "sizeof", [operand], start)
        if self.at("(") and self.starts_type(1):
            self.pos += 1
            tname = self.type_name()
            self.expect(")")
            return self.node("Cast", None, [tname, self.unary()], start)
        return self.postfix()

    def postfix(self):
        start = self.pos
        node = self.primary()
        while True:
            if self.accept("("):
                args = []
                if not self.at(")"):
                    args.append(self.assignment())
                    while self.accept(","):
                        args.append(self.assignment())
                self.expect(")")
                node = self.node("Call", None, [node] + args, start)
            elif self.accept("["):
                index = self.expression()
                self.expect("]")
                node = self.node("ArrayRef", None, [node, index], start)
            elif self.at("++") or self.at("--"):
                op = self.tokens[self.pos].lexeme
                self.pos += 1
                node = self.node("UnaryOp", op, [node], start)
            else:
                return node

    def primary(self):
        tok = self.peek()
        start = self.pos
        if tok is None:
            self.error("expression")
        if tok.kind == "identifier":
            self.pos += 1
            return self.node("ID", tok.lexeme, [], start)
        if tok.kind.endswith("-literal"):
            self.pos += 1
            lexeme = tok.lexeme
            # adjacent string literals concatenate
            while tok.kind == "string-literal" and self.peek() is not None and self.peek().kind == "string-literal":
                lexeme = lexeme[:-1] + self.tokens[self.pos].lexeme[1:]
                self.pos += 1
            return self.node("Constant", lexeme, [], start)
        if self.accept("("):
            node = self.expression()
            self.expect(")")
            return node
        self.error("expression")


def parse(tokens):
    """Parse a token list into a ``TranslationUnit`` tree."""
    p = _Parser(tokens)
    items = []
    while p.peek() is not None:
        if p.accept(";"):
            continue
        items.append(p.external())
    return AstNode("TranslationUnit", None, items, (0, len(tokens)))


def parse_source(source):
    """Convenience: preprocess, lex and parse C source text."""
    return parse(lex(preprocess(source)))


# ---------------------------------------------------------------------------
# serialization

def ast_to_dict(node):
    return {"kind": node.kind, "lexeme": node.lexeme, "children": [ast_to_dict(c) for c in node.children]}


def ast_from_dict(d):
    return AstNode(d["kind"], d.get("lexeme"), [ast_from_dict(c) for c in d.get("children", [])])


def ast_to_json(root):
    return json.dumps(ast_to_dict(root), ensure_ascii=False, separators=(",", ":"))


def ast_from_json(text):
    return ast_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# pretty printing

def _declarator_str(node):
    if node.kind == "ID":
        return node.lexeme
    if node.kind == "ArrayRef":
        inner = _declarator_str(node.children[0])
        dim = _expr_str(node.children[1]) if len(node.children) > 1 else ""
        return f"{inner}[{dim}]"
    if node.kind == "UnaryOp" and node.lexeme == "*":
        return "*" + _declarator_str(node.children[0])
    if node.kind == "Assign":
        return f"{_declarator_str(node.children[0])} = {_init_str(node.children[1])}"
    raise ValueError(f"not a declarator: {node.kind}")


def _init_str(node):
    if node.kind == "InitList":
        return "{" + ", ".join(_init_str(c) for c in node.children) + "}"
    return _expr_str(node)


def _decl_str(node):
    tname = node.children[0].lexeme
    decls = [_declarator_str(c) for c in node.children[1:]]
    if len(node.children) == 3 and node.children[2].kind == "ParamList":
        # prototype
        return f"{tname} {node.children[1].lexeme}({_params_str(node.children[2])})"
    return tname + (" " + ", ".join(decls) if decls else "")


def _params_str(plist):
    return ", ".join(_decl_str(p) for p in plist.children) or "void"


def _expr_str(node):
    k = node.kind
    if k in ("ID", "Constant"):
        return node.lexeme
    if k == "BinaryOp":
        a, b = node.children
        return f"({_expr_str(a)} {node.lexeme} {_expr_str(b)})"
    if k == "Assign":
        a, b = node.children
        return f"({_expr_str(a)} {node.lexeme} {_expr_str(b)})"
    if k == "UnaryOp":
        (a,) = node.children
        op = node.lexeme
        if op == "sizeof":
            inner = f"({a.lexeme})" if a.kind == "TypeName" else f"({_expr_str(a)})"
            return "sizeof" + inner
        if op in ("++", "--"):
            return f"({_expr_str(a)}{op})"
        if op.startswith("pre"):
            return f"({op[3:]}{_expr_str(a)})"
        return f"({op}{_expr_str(a)})"
    if k == "Call":
        fn, *args = node.children
        return f"{_expr_str(fn)}({', '.join(_expr_str(a) for a in args)})"
    if k == "ArrayRef":
        a, idx = node.children
        return f"{_expr_str(a)}[{_expr_str(idx)}]"
    if k == "Cast":
        t, a = node.children
        return f"(({t.lexeme}){_expr_str(a)})"
    if k == "Ternary":
        c, a, b = node.children
        return f"({_expr_str(c)} ? {_expr_str(a)} : {_expr_str(b)})"
    raise ValueError(f"not an expression: {k}")


def _body_lines(node, indent):
    # braces line up with the header; a bare statement is indented one level
    return _stmt_lines(node, indent if node.kind == "Compound" else indent + 1)


def _stmt_lines(node, indent):
    pad = "    " * indent
    k = node.kind
    if k == "Compound":
        lines = [pad + "{"]
        for c in node.children:
            lines += _stmt_lines(c, indent + 1)
        return lines + [pad + "}"]
    if k == "Decl":
        return [pad + _decl_str(node) + ";"]
    if k == "ExprStmt":
        return [pad + (_expr_str(node.children[0]) if node.children else "") + ";"]
    if k == "Return":
        return [pad + "return" + (" " + _expr_str(node.children[0]) if node.children else "") + ";"]
    if k in ("Break", "Continue"):
        return [pad + k.lower() + ";"]
    if k == "If":
        lines = [pad + f"if ({_expr_str(node.children[0])})"] + _body_lines(node.children[1], indent)
        if len(node.children) > 2:
            lines += [pad + "else"] + _body_lines(node.children[2], indent)
        return lines
    if k == "While":
        return [pad + f"while ({_expr_str(node.children[0])})"] + _body_lines(node.children[1], indent)
    if k == "DoWhile":
        return [pad + "do"] + _body_lines(node.children[0], indent) + [
            pad + f"while ({_expr_str(node.children[1])});"]
    if k == "For":
        present = node.lexeme or "icn"
        parts = dict(zip(present.replace("-", ""), node.children[:-1]))
        init = parts.get("i")
        if init is None:
            init_s = ""
        elif init.kind == "Decl":
            init_s = _decl_str(init)
        else:
            init_s = _expr_str(init)
        cond_s = _expr_str(parts["c"]) if "c" in parts else ""
        next_s = _expr_str(parts["n"]) if "n" in parts else ""
        return [pad + f"for ({init_s}; {cond_s}; {next_s})"] + _body_lines(node.children[-1], indent)
    if k == "FuncDef":
        ret, _, params, body = node.children
        return [pad + f"{ret.lexeme} {node.lexeme}({_params_str(params)})"] + _stmt_lines(body, indent)
    raise ValueError(f"not a statement: {k}")


def unparse(root):
    """Render an AST back to compilable-looking C text (fully parenthesized)."""
    lines = []
    for item in root.children:
        lines += _stmt_lines(item, 0)
    return "\n".join(lines) + "\n"
