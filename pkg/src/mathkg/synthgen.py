"""Synthetic corpus generation driven by a planted knowledge graph.

The generator plants two kinds of ground-truth knowledge and then writes
problems whose solutions depend on it:

  * word-operator edges: each operator owns a small set of trigger words,
    and a problem's expression uses an operator only if one of its triggers
    appears in the text.  All other surface words are shared evenly across
    operators, so the triggers are the only reliable operator cues.
  * word-word edges: objects belong to categories ("apples" are "fruits"),
    and category questions ask for a quantity that only some of the
    mentioned objects contribute to, so answering requires the
    object-category membership.

One object per category and one trigger per operator are sampled rarely in
the training split (but uniformly in validation/test), which leaves
headroom that explicit knowledge can close: a single learned edge
generalizes from a handful of examples where a full embedding cannot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Sequence

import numpy as np

from .corpus import Problem, evaluate_expression, parse_prefix
from .diffcore import RunRng

ALL_OPERATORS = ("+", "-", "*", "/")

_TRIGGER_LEXICON = {
    "+": ["altogether", "total", "combined"],
    "-": ["gave", "lost", "dropped"],
    "*": ["times", "each", "apiece"],
    "/": ["split", "shared", "evenly"],
}

_CATEGORY_LEXICON = [
    ("fruits", ["apples", "pears", "plums", "melons", "kiwis"]),
    ("tools", ["hammers", "wrenches", "drills", "saws", "chisels"]),
    ("animals", ["cows", "ducks", "goats", "rabbits", "llamas"]),
    ("books", ["novels", "comics", "atlases", "manuals", "diaries"]),
    ("toys", ["kites", "dolls", "puzzles", "marbles", "yoyos"]),
    ("clothes", ["shirts", "scarves", "gloves", "jackets", "vests"]),
    ("flowers", ["roses", "tulips", "daisies", "lilies", "orchids"]),
    ("vehicles", ["cars", "trucks", "bikes", "wagons", "scooters"]),
]

_NAMES = ["amy", "bob", "carl", "dana", "eric", "fay", "gus", "hana"]


class GenerationError(ValueError):
    """Infeasible generator configuration."""


@dataclass
class GenConfig:
    words: int = 60
    operators: int = 4
    triggers_per_operator: int = 3
    ww_edges: int = 40
    train: int = 2000
    validation: int = 200
    test: int = 400
    number_min: int = 2
    number_max: int = 20
    rare_object_weight: float = 0.08
    rare_trigger_weight: float = 0.05
    min_occurrences: int = 6


@dataclass
class PlantedKG:
    """Ground-truth knowledge: vertex lists and true edge sets.

    ``ww_edges`` holds symmetric word pairs as sorted tuples;
    ``wo_edges`` holds (word, operator) pairs.  The role structure
    (categories, triggers, rarity marks) drives generation and is kept so
    experiments can pick rare/common words apart, but only the vertex and
    edge sets are exported.
    """

    words: list[str]
    operators: list[str]
    ww_edges: set[tuple[str, str]]
    wo_edges: set[tuple[str, str]]
    categories: dict[str, list[str]] = field(default_factory=dict)
    triggers: dict[str, list[str]] = field(default_factory=dict)
    fillers: list[str] = field(default_factory=list)
    rare_objects: set[str] = field(default_factory=set)
    rare_triggers: set[str] = field(default_factory=set)

    def to_json_dict(self) -> dict:
        return {
            "words": list(self.words),
            "operators": list(self.operators),
            "ww_edges": sorted([list(e) for e in self.ww_edges]),
            "wo_edges": sorted([list(e) for e in self.wo_edges]),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "PlantedKG":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return PlantedKG(words=list(d["words"]), operators=list(d["operators"]),
                         ww_edges={tuple(e) for e in d["ww_edges"]},
                         wo_edges={tuple(e) for e in d["wo_edges"]})


def _ww_pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def plant_knowledge_graph(config: GenConfig, seed: int) -> PlantedKG:
    """Build the planted graph: triggers per operator plus object-category
    membership edges, padded with edgeless filler words.

    Deterministic for a seed; the seed only picks which words are rare.
    """
    n_ops = config.operators
    if not 1 <= n_ops <= len(ALL_OPERATORS):
        raise GenerationError(f"operator count must be 1..4, got {n_ops}")
    operators = list(ALL_OPERATORS[:n_ops])

    n_trig = n_ops * config.triggers_per_operator
    n_cat = max(2, math.ceil(config.ww_edges / 5))
    n_obj = config.ww_edges
    needed = n_trig + n_cat + n_obj
    if needed > config.words:
        raise GenerationError(
            f"{config.words} words cannot hold {n_trig} triggers, "
            f"{n_cat} categories and {n_obj} objects ({needed} needed)")
    if config.ww_edges > config.words * (config.words - 1) // 2:
        raise GenerationError(
            f"{config.ww_edges} word-word edges exceed the number of pairs "
            f"over {config.words} words")

    triggers: dict[str, list[str]] = {}
    for op in operators:
        pool = list(_TRIGGER_LEXICON[op])
        while len(pool) < config.triggers_per_operator:
            pool.append(f"{_op_name(op)}cue{len(pool)}")
        triggers[op] = pool[: config.triggers_per_operator]

    cat_names = [name for name, _ in _CATEGORY_LEXICON]
    while len(cat_names) < n_cat:
        cat_names.append(f"group{len(cat_names)}")
    cat_names = cat_names[:n_cat]

    object_pool: list[str] = []
    for _, objs in _CATEGORY_LEXICON:
        object_pool.extend(objs)
    while len(object_pool) < n_obj:
        object_pool.append(f"items{len(object_pool)}")

    # contiguous blocks keep curated members with their curated category
    categories: dict[str, list[str]] = {}
    idx = 0
    for j, c in enumerate(cat_names):
        take = n_obj // n_cat + (1 if j < n_obj % n_cat else 0)
        categories[c] = object_pool[idx:idx + take]
        idx += take
    for c, objs in categories.items():
        if len(objs) < 2:
            raise GenerationError(
                f"category {c!r} would hold {len(objs)} object(s); "
                f"need at least 2 (raise ww_edges or lower the word count)")

    n_filler = config.words - needed
    fillers = [f"things{i}" for i in range(n_filler)]

    words: list[str] = []
    for op in operators:
        words.extend(triggers[op])
    words.extend(cat_names)
    for c in cat_names:
        words.extend(categories[c])
    words.extend(fillers)

    ww_edges = {_ww_pair(obj, c) for c, objs in categories.items() for obj in objs}
    wo_edges = {(t, op) for op, ts in triggers.items() for t in ts}

    rng = RunRng(seed).stream("kg")
    rare_objects = {objs[int(rng.integers(len(objs)))]
                    for objs in categories.values()}
    rare_triggers = {ts[int(rng.integers(len(ts)))] for ts in triggers.values()}

    return PlantedKG(words=words, operators=operators, ww_edges=ww_edges,
                     wo_edges=wo_edges, categories=categories,
                     triggers=triggers, fillers=fillers,
                     rare_objects=rare_objects, rare_triggers=rare_triggers)


def _op_name(op: str) -> str:
    return {"+": "add", "-": "sub", "*": "mul", "/": "div"}[op]


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    """Declarative surface/expression pattern.

    Token atoms: literal words, ``{name*}``, ``{num*}``, ``{obj*}`` (free
    object), ``{in*}``/``{out*}`` (category members and distractors),
    ``{cat}`` (the question's category word), and ``{trig:op1}`` style
    trigger slots bound to the expression's operator placeholders.
    Expression atoms: ``NUM*``, literal operators, or ``{op*}``
    placeholders filled at instantiation.
    """

    name: str
    tokens: tuple[str, ...]
    expr: tuple[str, ...]
    op_choices: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def operator_slots(self) -> list[str]:
        return [a for a in self.expr if a.startswith("{op") or a in ALL_OPERATORS]


def build_templates(operators: Sequence[str]) -> list[Template]:
    """The ~15 surface patterns; scaffold words recur across operators so
    triggers stay the only operator-specific vocabulary."""
    ops = tuple(operators)
    plus = ("+",) if "+" in ops else ops[:1]
    minus_plus = tuple(o for o in ops if o in "+-") or ops[:1]
    mul_div = tuple(o for o in ops if o in "*/") or ops[:1]

    t = []
    t.append(Template(
        "pair", ("{name1}", "and", "{name2}", "have", "{num1}", "and",
                 "{num2}", "{obj1}", "{trig:op1}", "how", "many", "{obj1}"),
        ("{op1}", "NUM1", "NUM2"), {"op1": ops}))
    t.append(Template(
        "pair_with", ("{name1}", "with", "{num1}", "{obj1}", "and",
                      "{name2}", "with", "{num2}", "{obj1}", "{trig:op1}",
                      "how", "many", "{obj1}"),
        ("{op1}", "NUM1", "NUM2"), {"op1": ops}))
    t.append(Template(
        "owners", ("{name1}", "has", "{num1}", "{obj1}", "and", "{name2}",
                   "has", "{num2}", "{obj1}", "{trig:op1}", "how", "many",
                   "{obj1}"),
        ("{op1}", "NUM1", "NUM2"), {"op1": ops}))
    # category selection: expression is the slot of the in-category object
    t.append(Template(
        "pick_a", ("{name1}", "has", "{num1}", "{in1}", "and", "{num2}",
                   "{out1}", "how", "many", "{cat}"),
        ("NUM1",)))
    t.append(Template(
        "pick_b", ("{name1}", "has", "{num1}", "{out1}", "and", "{num2}",
                   "{in1}", "how", "many", "{cat}"),
        ("NUM2",)))
    t.append(Template(
        "pick_q_a", ("how", "many", "{cat}", "does", "{name1}", "have",
                     "with", "{num1}", "{in1}", "and", "{num2}", "{out1}"),
        ("NUM1",)))
    t.append(Template(
        "pick_q_b", ("how", "many", "{cat}", "does", "{name1}", "have",
                     "with", "{num1}", "{out1}", "and", "{num2}", "{in1}"),
        ("NUM2",)))
    # category combination with a distractor at each position
    cat_tail = ("how", "many", "{cat}", "{trig:op1}")
    t.append(Template(
        "three_a", ("{name1}", "has", "{num1}", "{out1}", "{name2}", "has",
                    "{num2}", "{in1}", "and", "{name3}", "has", "{num3}",
                    "{in2}") + cat_tail,
        ("{op1}", "NUM2", "NUM3"), {"op1": ops}))
    t.append(Template(
        "three_b", ("{name1}", "has", "{num1}", "{in1}", "{name2}", "has",
                    "{num2}", "{out1}", "and", "{name3}", "has", "{num3}",
                    "{in2}") + cat_tail,
        ("{op1}", "NUM1", "NUM3"), {"op1": ops}))
    t.append(Template(
        "three_c", ("{name1}", "has", "{num1}", "{in1}", "{name2}", "has",
                    "{num2}", "{in2}", "and", "{name3}", "has", "{num3}",
                    "{out1}") + cat_tail,
        ("{op1}", "NUM1", "NUM2"), {"op1": ops}))
    t.append(Template(
        "three_all", ("{name1}", "has", "{num1}", "{in1}", "{name2}", "has",
                      "{num2}", "{in2}", "and", "{name3}", "has", "{num3}",
                      "{in3}") + cat_tail,
        ("+", "+", "NUM1", "NUM2", "NUM3"), {"op1": plus}))
    # two-step chains; both triggers present, order carried by the text
    t.append(Template(
        "chain", ("{name1}", "had", "{num1}", "{obj1}", "then", "{trig:op1}",
                  "{num2}", "and", "then", "{trig:op2}", "{num3}", "how",
                  "many", "{obj1}"),
        ("{op2}", "{op1}", "NUM1", "NUM2", "NUM3"),
        {"op1": ops, "op2": ops}))
    t.append(Template(
        "chain_start", ("{name1}", "started", "with", "{num1}", "{obj1}",
                        "then", "{trig:op1}", "{num2}", "then", "{trig:op2}",
                        "{num3}", "how", "many", "now"),
        ("{op2}", "{op1}", "NUM1", "NUM2", "NUM3"),
        {"op1": ops, "op2": ops}))
    t.append(Template(
        "scale_cat", ("{name1}", "has", "{num1}", "{in1}", "{trig:op1}",
                      "{num2}", "and", "{num3}", "{in2}", "how", "many",
                      "{cat}", "{trig:op2}"),
        ("{op2}", "{op1}", "NUM1", "NUM2", "NUM3"),
        {"op1": mul_div, "op2": minus_plus}))
    return t


# ---------------------------------------------------------------------------
# Instantiation
# ---------------------------------------------------------------------------

def _weighted_choice(rng: np.random.Generator, items: Sequence[str],
                     weights: Sequence[float]) -> str:
    w = np.asarray(weights, dtype=float)
    return items[int(rng.choice(len(items), p=w / w.sum()))]


def _object_weights(objs: Sequence[str], kg: PlantedKG, weighted: bool,
                    rare_weight: float) -> list[float]:
    if not weighted:
        return [1.0] * len(objs)
    return [rare_weight if o in kg.rare_objects else 1.0 for o in objs]


def _check_expression(tree, values: list[int]) -> bool:
    """Accept only expressions whose every step stays a positive integer."""

    def walk(node) -> Fraction | None:
        if node.kind == "slot":
            return Fraction(values[node.slot - 1])
        if node.kind == "const":
            return Fraction(1)
        a = walk(node.left)
        b = walk(node.right)
        if a is None or b is None:
            return None
        if node.op == "+":
            r = a + b
        elif node.op == "-":
            r = a - b
        elif node.op == "*":
            r = a * b
        else:
            if b == 0:
                return None
            r = a / b
        if r.denominator != 1 or r < 1 or r > 10000:
            return None
        return r

    return walk(tree) is not None


def instantiate_problem(template: Template, kg: PlantedKG,
                        rng: np.random.Generator, config: GenConfig,
                        weighted: bool = True,
                        force_trigger: str | None = None,
                        force_object: str | None = None,
                        pid: str = "p") -> Problem:
    """Sample one problem from a template.

    The draw order is fixed (operators, names, category words, objects,
    triggers, then numbers), so identical rng states produce identical
    problems.
    """
    # operator placeholders
    op_map: dict[str, str] = {}
    for slot, choices in template.op_choices.items():
        if force_trigger is not None and slot == "op1":
            forced_op = next(op for op, ts in kg.triggers.items()
                             if force_trigger in ts)
            op_map[slot] = forced_op if forced_op in choices else choices[0]
        else:
            op_map[slot] = choices[int(rng.integers(len(choices)))]

    names = list(_NAMES)
    n_names = sum(1 for a in template.tokens if a.startswith("{name"))
    picked_names = {}
    for i in range(n_names):
        j = int(rng.integers(len(names)))
        picked_names[f"{{name{i + 1}}}"] = names.pop(j)

    needs_cat = any(a.startswith("{in") or a == "{cat}" for a in template.tokens)
    cat_word = None
    in_objs: list[str] = []
    out_objs: list[str] = []
    if needs_cat:
        cats = sorted(kg.categories)
        if force_object is not None:
            cat_word = next(c for c, objs in kg.categories.items()
                            if force_object in objs)
        else:
            cat_word = cats[int(rng.integers(len(cats)))]
        pool = list(kg.categories[cat_word])
        n_in = sum(1 for a in template.tokens if a.startswith("{in"))
        for i in range(n_in):
            if i == 0 and force_object is not None:
                choice = force_object
            else:
                w = _object_weights(pool, kg, weighted, config.rare_object_weight)
                choice = _weighted_choice(rng, pool, w)
            in_objs.append(choice)
            pool.remove(choice)
        # distractors: objects of other categories plus edgeless fillers
        out_pool = sorted(
            [o for c2, objs in kg.categories.items() if c2 != cat_word
             for o in objs] + list(kg.fillers))
        n_out = sum(1 for a in template.tokens if a.startswith("{out"))
        for _ in range(n_out):
            w = _object_weights(out_pool, kg, weighted, config.rare_object_weight)
            choice = _weighted_choice(rng, out_pool, w)
            out_objs.append(choice)
            out_pool.remove(choice)

    free_objs: dict[str, str] = {}
    all_objects = [o for objs in kg.categories.values() for o in objs] + list(kg.fillers)
    for atom in template.tokens:
        if atom.startswith("{obj") and atom not in free_objs:
            w = _object_weights(all_objects, kg, weighted,
                                config.rare_object_weight)
            free_objs[atom] = _weighted_choice(rng, all_objects, w)

    trig_map: dict[str, str] = {}
    for atom in template.tokens:
        if atom.startswith("{trig:") and atom not in trig_map:
            slot = atom[len("{trig:"):-1]
            op = op_map[slot] if slot.startswith("op") else slot
            ts = kg.triggers[op]
            if force_trigger is not None and force_trigger in ts:
                trig_map[atom] = force_trigger
            else:
                if weighted:
                    w = [config.rare_trigger_weight if t in kg.rare_triggers
                         else 1.0 for t in ts]
                else:
                    w = [1.0] * len(ts)
                trig_map[atom] = _weighted_choice(rng, ts, w)

    expr = [op_map.get(a[1:-1], a) if a.startswith("{op") else a
            for a in template.expr]
    k = sum(1 for a in template.tokens if a.startswith("{num"))
    tree = parse_prefix(expr, k)
    for _ in range(2000):
        values = [int(rng.integers(config.number_min, config.number_max + 1))
                  for _ in range(k)]
        if _check_expression(tree, values):
            break
    else:
        raise GenerationError(
            f"could not satisfy number constraints for template {template.name}")

    tokens: list[str] = []
    num_i = 0
    for atom in template.tokens:
        if atom.startswith("{name"):
            tokens.append(picked_names[atom])
        elif atom.startswith("{num"):
            num_i += 1
            tokens.append(f"NUM{num_i}")
        elif atom.startswith("{in"):
            tokens.append(in_objs[int(atom[3:-1]) - 1])
        elif atom.startswith("{out"):
            tokens.append(out_objs[int(atom[4:-1]) - 1])
        elif atom == "{cat}":
            tokens.append(cat_word)
        elif atom.startswith("{obj"):
            tokens.append(free_objs[atom])
        elif atom.startswith("{trig:"):
            tokens.append(trig_map[atom])
        else:
            tokens.append(atom)

    answer = float(evaluate_expression(tree, values))
    return Problem(id=pid, tokens=tokens, number_values=[float(v) for v in values],
                   gold_expression=expr, gold_answer=answer)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

def _coverage_tasks(kg: PlantedKG, templates: list[Template],
                    config: GenConfig) -> list[tuple[int, dict]]:
    """Forced instantiations guaranteeing every planted word clears the
    vocabulary threshold in the training split."""
    pair_idx = next(i for i, t in enumerate(templates) if t.name == "pair")
    pick_idx = [i for i, t in enumerate(templates)
                if t.name in ("pick_a", "pick_b")]
    per_word = config.min_occurrences
    rounds: list[list[tuple[int, dict]]] = []
    for r in range(per_word):
        tasks = []
        for op in kg.operators:
            for trig in kg.triggers[op]:
                tasks.append((pair_idx, {"force_trigger": trig}))
        for c in sorted(kg.categories):
            for obj in kg.categories[c]:
                tasks.append((pick_idx[r % len(pick_idx)], {"force_object": obj}))
        rounds.append(tasks)
    return [task for round_tasks in rounds for task in round_tasks]


def generate_corpus(config: GenConfig, seed: int
                    ) -> tuple[list[Problem], list[Problem], list[Problem], PlantedKG]:
    """Generate disjoint train/validation/test splits plus the planted graph.

    Training samples rare words at a reduced rate; validation and test
    sample uniformly, which concentrates the generalization pressure on
    words the model saw only a few times.
    """
    kg = plant_knowledge_graph(config, seed)
    min_cat = min(len(objs) for objs in kg.categories.values())
    templates = [t for t in build_templates(kg.operators)
                 if sum(1 for a in t.tokens if a.startswith("{in")) <= min_cat]
    run = RunRng(seed)

    def make_split(name: str, size: int, weighted: bool,
                   tasks: list[tuple[int, dict]]) -> list[Problem]:
        rng = run.stream(name)
        problems = []
        for i in range(size):
            if i < len(tasks):
                t_idx, force = tasks[i]
            else:
                t_idx, force = int(rng.integers(len(templates))), {}
            problems.append(instantiate_problem(
                templates[t_idx], kg, rng, config, weighted=weighted,
                pid=f"{name}-{i:05d}", **force))
        return problems

    tasks = _coverage_tasks(kg, templates, config)
    if len(tasks) > config.train:
        tasks = tasks[: config.train // 2]
    train = make_split("train", config.train, True, tasks)
    validation = make_split("validation", config.validation, False, [])
    test = make_split("test", config.test, False, [])
    return train, validation, test, kg


def config_to_dict(config: GenConfig) -> dict:
    return asdict(config)
