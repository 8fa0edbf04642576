"""Metric oracles: DP Levenshtein, corpus CER/WER, exact GED, LOER, mAPCER."""

import itertools
from functools import lru_cache

import numpy as np
import pytest

from docttt.metrics import (
    EvalPair,
    GedSizeError,
    MapCerConfig,
    cer,
    ged,
    levenshtein,
    loer,
    loer_from_graphs,
    map_cer,
    wer,
    word_tokens,
)
from docttt.tokens import Dictionary, DocNode, LayoutGraph, serialize

D = Dictionary()


def page(*paragraph_texts: str) -> DocNode:
    return DocNode(
        "page",
        [DocNode("section", [DocNode("paragraph", [t]) for t in paragraph_texts])],
    )


def pair(pred_tree: DocNode, gt_tree: DocNode, pid: str = "") -> EvalPair:
    return EvalPair(serialize(pred_tree, D), serialize(gt_tree, D), pid)


def oracle_levenshtein(a, b) -> int:
    """Independent recursive-memoized edit distance."""

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            go(i - 1, j) + 1,
            go(i, j - 1) + 1,
            go(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
        )

    return go(len(a), len(b))


class TestLevenshtein:
    def test_insertions(self):
        assert levenshtein("", "abc") == 3

    def test_identity(self):
        assert levenshtein("same", "same") == 0

    def test_kitten_sitting(self):
        assert levenshtein("kitten", "sitting") == 3
        assert oracle_levenshtein("kitten", "sitting") == 3

    def test_against_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        alphabet = "abcde"
        for _ in range(1000):
            a = "".join(rng.choice(list(alphabet), size=rng.integers(0, 13)))
            b = "".join(rng.choice(list(alphabet), size=rng.integers(0, 13)))
            assert levenshtein(a, b) == oracle_levenshtein(a, b)


class TestCer:
    def test_identical_corpora(self):
        pairs = [pair(page("abc"), page("abc"))]
        assert cer(pairs, D) == 0.0

    def test_worked_example_ratio_of_sums(self):
        pairs = [pair(page("abd"), page("abc")), pair(page("xy"), page("xy"))]
        assert cer(pairs, D) == pytest.approx(20.0)
        # ratio of sums, not mean of per-pair rates (which would be 16.67)
        per_pair_mean = (100 * 1 / 3 + 0.0) / 2
        assert per_pair_mean == pytest.approx(16.6667, abs=1e-3)
        assert cer(pairs, D) != pytest.approx(per_pair_mean)

    def test_zero_length_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            cer([pair(DocNode("page"), DocNode("page"))], D)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        pairs = []
        for _ in range(10):
            gt = "".join(rng.choice(list("abc "), size=8)).strip() or "a"
            pr = "".join(rng.choice(list("abc "), size=8)).strip() or "b"
            pairs.append(pair(page(pr), page(gt)))
        assert cer(pairs, D) == cer(list(reversed(pairs)), D)


class TestWer:
    def test_identical(self):
        assert wer([pair(page("hi there"), page("hi there"))], D) == 0.0

    def test_punctuation_as_own_word(self):
        d = Dictionary(alphabet="abcdefghijklmnopqrstuvwxyz ,")
        gt = DocNode("page", [DocNode("paragraph", ["hi, there"])])
        pr = DocNode("page", [DocNode("paragraph", ["hi there"])])
        pairs = [EvalPair(serialize(pr, d), serialize(gt, d))]
        # gt words [hi][,][there]; pred [hi][there] -> 1 deletion / 3
        assert wer(pairs, d) == pytest.approx(100 / 3)

    def test_single_word_substitution(self):
        assert wer([pair(page("cat"), page("dog"))], D) == pytest.approx(100.0)

    def test_word_tokenizer(self):
        assert word_tokens("hi, there") == ["hi", ",", "there"]
        assert word_tokens("  a  b ") == ["a", "b"]


def graph(labels, edges):
    return LayoutGraph(labels=list(labels), edges=[(u, v, "contain") for u, v in edges])


def oracle_ged(g1: LayoutGraph, g2: LayoutGraph) -> int:
    """Exhaustive enumeration over all injective partial node mappings."""
    n1, n2 = g1.n_nodes, g2.n_nodes
    e1, e2 = g1.edge_pairs(), g2.edge_pairs()
    best = None
    nodes2 = list(range(n2))
    for k in range(0, min(n1, n2) + 1):
        for kept in itertools.combinations(range(n1), k):
            for image in itertools.permutations(nodes2, k):
                m = dict(zip(kept, image))
                cost = (n1 - k) + (n2 - k)  # node deletions + insertions
                cost += sum(1 for u in kept if g1.labels[u] != g2.labels[m[u]])
                preserved = sum(
                    1 for (a, b) in e1 if a in m and b in m and (m[a], m[b]) in e2
                )
                cost += (len(e1) - preserved) + (len(e2) - preserved)
                if best is None or cost < best:
                    best = cost
    return best


def random_graph(rng) -> LayoutGraph:
    """Small random tree-with-siblings graph, <= 6 nodes."""
    n = int(rng.integers(1, 7))
    labels = ["root"] + [
        str(rng.choice(["page", "section", "paragraph"])) for _ in range(n - 1)
    ]
    edges = []
    for v in range(1, n):
        edges.append((int(rng.integers(0, v)), v))
    # a few sibling-style extra edges
    for _ in range(int(rng.integers(0, 2))):
        u, v = rng.integers(0, n, size=2)
        if u != v and (u, v) not in edges:
            edges.append((int(u), int(v)))
    return graph(labels, edges)


class TestGed:
    def test_identical_graphs(self):
        g = graph(["root", "section", "section"], [(0, 1), (0, 2), (1, 2)])
        assert ged(g, g) == 0

    def test_deletion_worked_example(self):
        gt = graph(["root", "section", "section"], [(0, 1), (0, 2), (1, 2)])
        pred = graph(["root", "section"], [(0, 1)])
        assert ged(gt, pred) == 3  # node + 2 incident edges

    def test_relabel_one_node(self):
        g1 = graph(["root", "section", "section"], [(0, 1), (0, 2), (1, 2)])
        g2 = graph(["root", "section", "paragraph"], [(0, 1), (0, 2), (1, 2)])
        assert ged(g1, g2) == 1

    def test_against_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(60):
            g1, g2 = random_graph(rng), random_graph(rng)
            assert ged(g1, g2) == oracle_ged(g1, g2)

    def test_identity_of_indiscernibles_and_triangle(self):
        rng = np.random.default_rng(6)
        graphs = [random_graph(rng) for _ in range(12)]
        for g in graphs:
            assert ged(g, g) == 0
        for _ in range(40):
            a, b, c = rng.integers(0, len(graphs), size=3)
            ab = ged(graphs[a], graphs[b])
            bc = ged(graphs[b], graphs[c])
            ac = ged(graphs[a], graphs[c])
            assert ac <= ab + bc

    def test_size_bound_error(self):
        big = graph(["root"] * 13, [])
        with pytest.raises(GedSizeError, match="max_nodes"):
            ged(big, big)


class TestLoer:
    def test_identical(self):
        pairs = [pair(page("ab"), page("ab"))]
        assert loer(pairs, D) == 0.0

    def test_worked_example_50_percent(self):
        gt = graph(["root", "section", "section"], [(0, 1), (0, 2), (1, 2)])
        pred = graph(["root", "section"], [(0, 1)])
        assert loer_from_graphs([(gt, pred)]) == pytest.approx(50.0)

    def test_doubling_corpus_invariance(self):
        gt = page("abc", "de")
        pred = page("abc")
        pairs = [pair(pred, gt)]
        assert loer(pairs, D) == pytest.approx(loer(pairs * 2, D))

    def test_structure_only(self):
        # identical trees, different text: LOER stays 0
        pairs = [pair(page("abc"), page("xyz"))]
        assert loer(pairs, D) == 0.0


class TestMapCer:
    def test_perfect_prediction(self):
        pairs = [pair(page("hello", "world"), page("hello", "world"))]
        assert map_cer(pairs, D) == pytest.approx(100.0)

    def test_single_region_seven_percent(self):
        gt_text = "a" * 100
        pred_text = "a" * 93 + "b" * 7  # region CER = 7%
        pairs = [pair(page(pred_text), page(gt_text))]
        assert map_cer(pairs, D) == pytest.approx(90.0)

    def test_zero_matches(self):
        pairs = [pair(DocNode("page"), page("hello"))]
        assert map_cer(pairs, D) == pytest.approx(0.0)

    def test_monotone_in_match_cer(self):
        def score(errors: int) -> float:
            gt_text = "a" * 20
            pred_text = "a" * (20 - errors) + "b" * errors
            return map_cer([pair(page(pred_text), page(gt_text))], D)

        values = [score(e) for e in (0, 2, 5, 9, 11)]
        assert all(x >= y for x, y in zip(values, values[1:]))

    def test_no_text_bearing_entities_rejected(self):
        with pytest.raises(ValueError):
            map_cer([pair(DocNode("page"), DocNode("page"))], D)

    def test_threshold_count(self):
        assert len(MapCerConfig().thresholds()) == 10
