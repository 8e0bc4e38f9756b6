"""Generator invariants: determinism, trigger discipline, planted structure."""

import numpy as np
import pytest

from mathkg.corpus import build_vocabulary, slot_index, write_corpus
from mathkg.diffcore import RunRng
from mathkg.synthgen import (
    GenConfig, GenerationError, PlantedKG, build_templates, generate_corpus,
    instantiate_problem, plant_knowledge_graph,
)

SMALL = GenConfig(train=120, validation=20, test=30)


def test_planted_kg_is_deterministic_for_a_seed():
    a = plant_knowledge_graph(GenConfig(), 7)
    b = plant_knowledge_graph(GenConfig(), 7)
    assert a.words == b.words
    assert a.ww_edges == b.ww_edges
    assert a.wo_edges == b.wo_edges
    assert a.rare_objects == b.rare_objects


def test_default_kg_dimensions():
    kg = plant_knowledge_graph(GenConfig(), 0)
    assert len(kg.words) == 60
    assert len(kg.wo_edges) == 4 * 3
    assert len(kg.ww_edges) == 40
    # trigger sets disjoint across operators
    seen = set()
    for op, ts in kg.triggers.items():
        assert not (set(ts) & seen)
        seen |= set(ts)
    # no self loops, endpoints exist
    for a, b in kg.ww_edges:
        assert a != b
        assert a in kg.words and b in kg.words


def test_infeasible_edge_count_is_an_error():
    with pytest.raises(GenerationError):
        plant_knowledge_graph(GenConfig(words=10, ww_edges=60), 0)
    with pytest.raises(GenerationError):
        plant_knowledge_graph(GenConfig(words=20, ww_edges=40), 0)


def test_kg_json_roundtrip(tmp_path):
    kg = plant_knowledge_graph(GenConfig(), 3)
    path = tmp_path / "kg.json"
    kg.save(path)
    loaded = PlantedKG.load(path)
    assert loaded.words == kg.words
    assert loaded.ww_edges == kg.ww_edges
    assert loaded.wo_edges == kg.wo_edges
    kg.save(tmp_path / "kg2.json")
    assert (tmp_path / "kg.json").read_bytes() == (tmp_path / "kg2.json").read_bytes()


def test_same_rng_state_gives_identical_problem():
    kg = plant_knowledge_graph(GenConfig(), 1)
    templates = build_templates(kg.operators)
    p1 = instantiate_problem(templates[0], kg, RunRng(5).stream("x"), GenConfig())
    p2 = instantiate_problem(templates[0], kg, RunRng(5).stream("x"), GenConfig())
    assert p1.tokens == p2.tokens
    assert p1.number_values == p2.number_values
    assert p1.gold_expression == p2.gold_expression


def test_every_problem_validates_and_has_triggers():
    train, val, test, kg = generate_corpus(SMALL, 11)
    trigger_of = {t: op for op, ts in kg.triggers.items() for t in ts}
    for p in train + val + test:
        p.validate()  # also proves no division-by-zero in gold expressions
        ops_used = {t for t in p.gold_expression if t in kg.operators}
        text_triggers = {trigger_of[t] for t in p.tokens if t in trigger_of}
        for op in ops_used:
            assert op in text_triggers, (p.id, p.tokens, p.gold_expression)
        # and no trigger appears without its operator
        for op in text_triggers:
            assert op in ops_used


def test_corpus_regeneration_is_byte_identical(tmp_path):
    for run in ("a", "b"):
        train, val, test, kg = generate_corpus(SMALL, 21)
        write_corpus(tmp_path / f"train_{run}.jsonl", train)
        write_corpus(tmp_path / f"test_{run}.jsonl", test)
        kg.save(tmp_path / f"kg_{run}.json")
    assert (tmp_path / "train_a.jsonl").read_bytes() == (tmp_path / "train_b.jsonl").read_bytes()
    assert (tmp_path / "test_a.jsonl").read_bytes() == (tmp_path / "test_b.jsonl").read_bytes()
    assert (tmp_path / "kg_a.json").read_bytes() == (tmp_path / "kg_b.json").read_bytes()


def test_seed_changes_corpus_but_not_kg_shape():
    t1, _, _, kg1 = generate_corpus(SMALL, 1)
    t2, _, _, kg2 = generate_corpus(SMALL, 2)
    assert len(kg1.ww_edges) == len(kg2.ww_edges)
    assert [p.tokens for p in t1] != [p.tokens for p in t2]


def test_default_sizes_and_disjoint_ids():
    cfg = GenConfig(train=300, validation=40, test=60)
    train, val, test, _ = generate_corpus(cfg, 9)
    assert (len(train), len(val), len(test)) == (300, 40, 60)
    ids = [p.id for p in train + val + test]
    assert len(set(ids)) == len(ids)


def test_empty_validation_split_is_valid():
    cfg = GenConfig(train=50, validation=0, test=10)
    _, val, _, _ = generate_corpus(cfg, 3)
    assert val == []


def test_planted_words_clear_the_vocabulary_threshold():
    train, _, _, kg = generate_corpus(GenConfig(), 13)
    vocab = build_vocabulary(train, min_count=5)
    for word in kg.words:
        assert word in vocab, word


def test_rare_words_are_rare_in_train_but_not_test():
    train, _, test, kg = generate_corpus(GenConfig(), 17)

    def rate(problems, words):
        hits = sum(1 for p in problems for t in p.tokens if t in words)
        total = sum(len(p.tokens) for p in problems)
        return hits / total

    assert rate(train, kg.rare_objects) < rate(test, kg.rare_objects)
    assert rate(train, kg.rare_triggers) < rate(test, kg.rare_triggers)


def test_two_operator_expressions_have_five_tokens():
    train, _, _, kg = generate_corpus(SMALL, 5)
    lengths = {len(p.gold_expression) for p in train}
    assert lengths <= {1, 3, 5}
    assert 5 in lengths and 3 in lengths
    for p in train:
        n_ops = sum(1 for t in p.gold_expression if t in kg.operators)
        n_leaves = sum(1 for t in p.gold_expression if slot_index(t) or t in ("1", "pi"))
        assert n_leaves == n_ops + 1


def test_numbers_stay_in_configured_range():
    train, _, _, _ = generate_corpus(SMALL, 8)
    for p in train:
        for v in p.number_values:
            assert 2 <= v <= 20
            assert float(v).is_integer()
