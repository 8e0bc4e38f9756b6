"""Problem/expression data model, tokenization, and corpus I/O.

A problem is a token sequence in which each numeric literal has been
abstracted to an order-indexed slot marker (NUM1, NUM2, ...), paired with
the extracted values, a gold expression in prefix form, and the gold
answer.  Expressions are evaluated exactly (rational arithmetic) whenever
all inputs are rational.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

OPERATORS = ("+", "-", "*", "/")
CONSTANTS = ("1", "pi")
_CONSTANT_VALUES = {"1": Fraction(1), "pi": math.pi}

PAD = "<pad>"
UNK = "<unk>"

_SLOT_RE = re.compile(r"NUM(\d+)$")
_TOKEN_RE = re.compile(r"NUM\d+|\d+\.\d+|\d+|[A-Za-z]+|[+\-*/]")

ANSWER_REL_TOL = 1e-4


class CorpusError(ValueError):
    """Malformed corpus content."""


class ExpressionError(ValueError):
    """Base for prefix-expression failures."""


class UnderflowError(ExpressionError):
    """An operator ran out of operands."""


class LeftoverTokensError(ExpressionError):
    """Tokens remained after a complete expression was parsed."""


class UnknownSymbolError(ExpressionError):
    """A token is neither an operator, constant, nor valid slot."""


class SlotRangeError(ExpressionError):
    """A slot marker references a number the problem does not have."""


class EvaluationError(ExpressionError):
    """The expression cannot be evaluated (division by zero)."""


def slot_index(token: str) -> int | None:
    """1-based slot number for a NUMi marker, else None."""
    m = _SLOT_RE.match(token)
    return int(m.group(1)) if m else None


def tokenize(raw_text: str) -> tuple[list[str], list[float]]:
    """Lowercased word tokens with numbers abstracted to slot markers.

    Punctuation separates tokens and is dropped.  Each maximal numeric
    literal becomes the next NUMi marker (repeated values get distinct
    slots).  Existing NUMi markers pass through untouched, which makes the
    token stream a fixed point of tokenization.
    """
    if not raw_text or not raw_text.strip():
        raise CorpusError("cannot tokenize empty text")
    tokens: list[str] = []
    values: list[float] = []
    for piece in _TOKEN_RE.findall(raw_text):
        if slot_index(piece) is not None:
            tokens.append(piece)
        elif piece[0].isdigit():
            values.append(float(piece))
            tokens.append(f"NUM{len(values)}")
        elif piece in OPERATORS:
            tokens.append(piece)
        else:
            tokens.append(piece.lower())
    return tokens, values


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpressionTree:
    """Binary expression node: operator with two children, or a leaf.

    Leaves carry either a constant name from CONSTANTS or a 1-based slot
    reference.
    """

    kind: str                      # "op" | "const" | "slot"
    op: str | None = None
    left: "ExpressionTree | None" = None
    right: "ExpressionTree | None" = None
    const: str | None = None
    slot: int | None = None

    def serialize(self) -> list[str]:
        """Prefix token list; parse_prefix(serialize(t)) round-trips."""
        if self.kind == "op":
            return [self.op] + self.left.serialize() + self.right.serialize()
        if self.kind == "const":
            return [self.const]
        return [f"NUM{self.slot}"]


def parse_prefix(tokens: Sequence[str], k: int) -> ExpressionTree:
    """Parse a prefix token list over operators, constants, and k slots."""
    tokens = list(tokens)
    pos = 0

    def parse() -> ExpressionTree:
        nonlocal pos
        if pos >= len(tokens):
            raise UnderflowError(
                f"operator is missing an operand in {tokens!r}")
        tok = tokens[pos]
        pos += 1
        if tok in OPERATORS:
            left = parse()
            right = parse()
            return ExpressionTree("op", op=tok, left=left, right=right)
        if tok in CONSTANTS:
            return ExpressionTree("const", const=tok)
        idx = slot_index(tok)
        if idx is not None:
            if not 1 <= idx <= k:
                raise SlotRangeError(
                    f"slot {tok} out of range for a problem with {k} numbers")
            return ExpressionTree("slot", slot=idx)
        raise UnknownSymbolError(f"unknown symbol {tok!r}")

    tree = parse()
    if pos != len(tokens):
        raise LeftoverTokensError(
            f"{len(tokens) - pos} token(s) left over after parsing {tokens!r}")
    return tree


def evaluate_expression(tree: ExpressionTree, number_values: Sequence[float]):
    """Evaluate with exact rational arithmetic when all inputs allow it.

    Returns a Fraction for all-rational inputs, else a float.  Division by
    zero raises EvaluationError (callers count it as a wrong answer).
    """
    if tree.kind == "const":
        return _CONSTANT_VALUES[tree.const]
    if tree.kind == "slot":
        if tree.slot > len(number_values):
            raise SlotRangeError(
                f"slot NUM{tree.slot} unbound; only {len(number_values)} values")
        v = number_values[tree.slot - 1]
        if isinstance(v, Fraction):
            return v
        if isinstance(v, int) or (isinstance(v, float) and float(v).is_integer()):
            return Fraction(int(v))
        return Fraction(str(v)) if isinstance(v, float) else v
    a = evaluate_expression(tree.left, number_values)
    b = evaluate_expression(tree.right, number_values)
    if isinstance(a, float) or isinstance(b, float):
        a, b = float(a), float(b)
    if tree.op == "+":
        return a + b
    if tree.op == "-":
        return a - b
    if tree.op == "*":
        return a * b
    if b == 0:
        raise EvaluationError("division by zero (invalid expression)")
    return a / b


def answers_match(a: float, b: float) -> bool:
    """Relative tolerance comparison: |a-b| <= 1e-4 * max(1, |b|)."""
    a, b = float(a), float(b)
    if not (math.isfinite(a) and math.isfinite(b)):
        return False
    return abs(a - b) <= ANSWER_REL_TOL * max(1.0, abs(b))


# ---------------------------------------------------------------------------
# Problems
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    id: str
    tokens: list[str]
    number_values: list[float]
    gold_expression: list[str]
    gold_answer: float

    def slot_count(self) -> int:
        return len(self.number_values)

    def validate(self) -> None:
        """Check slot references and that the gold expression reproduces
        the gold answer."""
        k = self.slot_count()
        tree = parse_prefix(self.gold_expression, k)
        value = evaluate_expression(tree, self.number_values)
        if not answers_match(float(value), self.gold_answer):
            raise CorpusError(
                f"problem {self.id}: expression evaluates to {float(value)} "
                f"but gold answer is {self.gold_answer}")


@dataclass
class Vocabulary:
    """Index-stable word list with counts plus operator/constant inventories."""

    words: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    operators: tuple[str, ...] = OPERATORS
    constants: tuple[str, ...] = CONSTANTS

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    def index(self, word: str) -> int:
        return self._index.get(word, self._index[UNK])

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def to_dict(self) -> dict:
        return {"words": list(self.words),
                "counts": {w: self.counts.get(w, 0) for w in self.words},
                "operators": list(self.operators),
                "constants": list(self.constants)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(words=list(d["words"]), counts=dict(d["counts"]),
                   operators=tuple(d["operators"]),
                   constants=tuple(d["constants"]))


def build_vocabulary(problems: Iterable[Problem], min_count: int = 5) -> Vocabulary:
    """Count word tokens and keep those seen at least ``min_count`` times.

    Slot markers and operators never enter the word list; dropped words
    encode as UNK.  Index order is (count desc, word asc) after the PAD and
    UNK specials, so identical corpora always produce identical indices.
    """
    problems = list(problems)
    if not problems:
        raise CorpusError("cannot build a vocabulary from zero problems")
    counts: dict[str, int] = {}
    for p in problems:
        for tok in p.tokens:
            if slot_index(tok) is not None or tok in OPERATORS:
                continue
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((w for w, c in counts.items() if c >= min_count),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(words=[PAD, UNK] + kept, counts=counts)


# ---------------------------------------------------------------------------
# JSONL corpus I/O
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "tokens", "number_values", "prefix", "answer")


def write_corpus(path, problems: Iterable[Problem]) -> None:
    """One problem per line, fixed field order, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            record = {
                "id": p.id,
                "tokens": p.tokens,
                "number_values": [float(v) for v in p.number_values],
                "prefix": p.gold_expression,
                "answer": float(p.gold_answer),
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_corpus(path) -> list[Problem]:
    """Read and validate a JSONL corpus; empty files load as empty corpora."""
    problems: list[Problem] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc})")
            for fieldname in _REQUIRED_FIELDS:
                if fieldname not in record:
                    raise CorpusError(
                        f"{path}: line {lineno}: missing field {fieldname!r}")
            problem = Problem(
                id=str(record["id"]),
                tokens=[str(t) for t in record["tokens"]],
                number_values=[float(v) for v in record["number_values"]],
                gold_expression=[str(t) for t in record["prefix"]],
                gold_answer=float(record["answer"]),
            )
            try:
                problem.validate()
            except (ExpressionError, CorpusError) as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}")
            problems.append(problem)
    return problems
