"""Sparse multivariate polynomials over named variables.

Terms are stored as a map from exponent tuples to float coefficients;
zero coefficients are dropped.  Monomial orderings are graded
lexicographic throughout for reproducibility.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np

__all__ = [
    "Polynomial",
    "monomial_basis",
    "parse_polynomial",
]

_COEFF_EPS = 0.0  # exact arithmetic on floats; only exact zeros are dropped


@dataclass(frozen=True)
class Polynomial:
    """Polynomial in the ordered variables ``vars``."""

    vars: tuple[str, ...]
    terms: dict[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for e, c in self.terms.items():
            if len(e) != len(self.vars):
                raise ValueError("exponent vector length mismatch")
            c = float(c)
            if c != 0.0:
                clean[tuple(int(k) for k in e)] = c
        object.__setattr__(self, "terms", clean)

    # -- constructors -----------------------------------------------------

    @staticmethod
    def zero(vars: tuple[str, ...] | list[str]) -> "Polynomial":
        return Polynomial(tuple(vars), {})

    @staticmethod
    def constant(vars, c: float) -> "Polynomial":
        vars = tuple(vars)
        return Polynomial(vars, {tuple([0] * len(vars)): float(c)})

    @staticmethod
    def variable(vars, name: str) -> "Polynomial":
        vars = tuple(vars)
        e = [0] * len(vars)
        e[vars.index(name)] = 1
        return Polynomial(vars, {tuple(e): 1.0})

    # -- basics ------------------------------------------------------------

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, expt: tuple[int, ...]) -> float:
        return self.terms.get(tuple(expt), 0.0)

    def on_vars(self, new_vars) -> "Polynomial":
        """Re-express over a superset of variables."""
        new_vars = tuple(new_vars)
        pos = [new_vars.index(v) for v in self.vars]
        terms = {}
        for e, c in self.terms.items():
            ne = [0] * len(new_vars)
            for p, k in zip(pos, e):
                ne[p] = k
            terms[tuple(ne)] = terms.get(tuple(ne), 0.0) + c
        return Polynomial(new_vars, terms)

    @staticmethod
    def align(*polys: "Polynomial") -> list["Polynomial"]:
        """Bring polynomials onto the union of their variables (in first-seen order)."""
        seen: list[str] = []
        for p in polys:
            for v in p.vars:
                if v not in seen:
                    seen.append(v)
        return [p.on_vars(tuple(seen)) for p in polys]

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.vars, other)
        a, b = Polynomial.align(self, other)
        terms = dict(a.terms)
        for e, c in b.terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return Polynomial(a.vars, terms)

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Polynomial(self.vars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.vars, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        a, b = Polynomial.align(self, other)
        terms: dict[tuple[int, ...], float] = {}
        for e1, c1 in a.terms.items():
            for e2, c2 in b.terms.items():
                e = tuple(i + j for i, j in zip(e1, e2))
                terms[e] = terms.get(e, 0.0) + c1 * c2
        return Polynomial(a.vars, terms)

    def __rmul__(self, other):
        return self.__mul__(other)

    def scale(self, c: float) -> "Polynomial":
        return Polynomial(self.vars, {e: c * v for e, v in self.terms.items()})

    def grad(self) -> list["Polynomial"]:
        """Vector of partial derivatives, one per variable."""
        out = []
        for i in range(len(self.vars)):
            terms = {}
            for e, c in self.terms.items():
                if e[i] == 0:
                    continue
                ne = list(e)
                ne[i] -= 1
                terms[tuple(ne)] = terms.get(tuple(ne), 0.0) + c * e[i]
            out.append(Polynomial(self.vars, terms))
        return out

    def substitute(self, mapping: dict[str, "Polynomial"]) -> "Polynomial":
        """Substitute polynomials for variables (others kept)."""
        remaining = tuple(v for v in self.vars if v not in mapping)
        all_vars = list(remaining)
        for sub in mapping.values():
            for v in sub.vars:
                if v not in all_vars:
                    all_vars.append(v)
        result = Polynomial.zero(tuple(all_vars))
        for e, c in self.terms.items():
            term = Polynomial.constant(tuple(all_vars), c)
            for v, k in zip(self.vars, e):
                if k == 0:
                    continue
                base = mapping.get(v, Polynomial.variable(tuple(all_vars), v) if v in all_vars else None)
                if base is None:
                    base = Polynomial.variable(tuple(all_vars), v)
                for _ in range(k):
                    term = term * base
            result = result + term
        return result

    def __call__(self, **values: float) -> float:
        out = 0.0
        for e, c in self.terms.items():
            prod = c
            for v, k in zip(self.vars, e):
                if k:
                    prod *= values[v] ** k
            out += prod
        return out

    def eval_array(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at points given as rows (columns ordered like ``vars``)."""
        points = np.atleast_2d(points)
        out = np.zeros(points.shape[0])
        for e, c in self.terms.items():
            out += c * np.prod(points ** np.array(e), axis=1)
        return out

    # -- formatting / serialization -----------------------------------------

    def sorted_terms(self) -> list[tuple[tuple[int, ...], float]]:
        return sorted(self.terms.items(), key=lambda ec: (sum(ec[0]), tuple(-k for k in ec[0])))

    def __str__(self):
        if not self.terms:
            return "0"
        parts = []
        for e, c in self.sorted_terms():
            mono = "*".join(
                f"{v}^{k}" if k > 1 else v for v, k in zip(self.vars, e) if k > 0
            )
            if mono:
                parts.append(f"{c:g}*{mono}")
            else:
                parts.append(f"{c:g}")
        return " + ".join(parts).replace("+ -", "- ")

    def to_json_dict(self) -> dict:
        return {
            "vars": list(self.vars),
            "terms": [[list(e), c] for e, c in self.sorted_terms()],
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "Polynomial":
        return Polynomial(tuple(doc["vars"]), {tuple(e): float(c) for e, c in doc["terms"]})

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Polynomial":
        return Polynomial.from_json_dict(json.loads(text))


def monomial_basis(vars: tuple[str, ...] | list[str], max_deg: int) -> list[tuple[int, ...]]:
    """All exponent tuples of total degree <= max_deg, graded-lex ordered.

    The count is C(len(vars) + max_deg, max_deg).
    """
    if max_deg < 0:
        raise ValueError("max_deg must be >= 0")
    n = len(vars)
    out: list[tuple[int, ...]] = []
    for d in range(max_deg + 1):
        level = []
        for combo in combinations_with_replacement(range(n), d):
            e = [0] * n
            for i in combo:
                e[i] += 1
            level.append(tuple(e))
        # graded-lex: higher exponent on earlier variables first
        level.sort(key=lambda e: tuple(-k for k in e))
        out.extend(level)
    assert len(out) == comb(n + max_deg, max_deg)
    return out


_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z_0-9]*|\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|[*^+()-])")


def parse_polynomial(text: str, vars: tuple[str, ...] | list[str] | None = None) -> Polynomial:
    """Parse expressions like ``0.5*x1^2*v - 3 + x2*v``.

    Grammar: sum of terms; each term a product of a float coefficient and
    variable powers.  Parentheses are not supported; exponents are nonneg
    integers.  If ``vars`` is omitted, variables are collected in order of
    first appearance.
    """
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ValueError(f"cannot tokenize polynomial at: {text[pos:pos+20]!r}")
        tokens.append(m.group(1))
        pos = m.end()

    # First pass: find variables in order of appearance.
    found: list[str] = []
    for t in tokens:
        if re.match(r"[A-Za-z_]", t) and t not in found:
            found.append(t)
    if vars is None:
        var_list = tuple(found)
    else:
        var_list = tuple(vars)
        unknown = [v for v in found if v not in var_list]
        if unknown:
            raise ValueError(f"unknown variables {unknown} in polynomial")

    terms: dict[tuple[int, ...], float] = {}
    i = 0
    sign = 1.0

    def flush(coeff, expts):
        e = tuple(expts)
        terms[e] = terms.get(e, 0.0) + coeff

    while i < len(tokens):
        tok = tokens[i]
        if tok == "+":
            sign = 1.0
            i += 1
            continue
        if tok == "-":
            sign = -1.0
            i += 1
            continue
        # parse one term
        coeff = sign
        expts = [0] * len(var_list)
        expecting_factor = True
        while i < len(tokens):
            tok = tokens[i]
            if tok in ("+", "-"):
                break
            if tok == "*":
                i += 1
                expecting_factor = True
                continue
            if not expecting_factor:
                raise ValueError(f"unexpected token {tok!r} (missing '*'?)")
            if re.match(r"[A-Za-z_]", tok):
                k = 1
                if i + 2 < len(tokens) and tokens[i + 1] == "^":
                    k = int(tokens[i + 2])
                    i += 2
                expts[var_list.index(tok)] += k
            else:
                coeff *= float(tok)
            i += 1
            expecting_factor = False
        flush(coeff, expts)
        sign = 1.0
    return Polynomial(var_list, terms)
