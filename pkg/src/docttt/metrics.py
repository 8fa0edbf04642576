"""Evaluation metrics: corpus CER/WER, layout-graph LOER, and mAPCER.

CER and WER are ratios of summed Levenshtein distances to summed
ground-truth lengths (corpus level, not a mean of per-document rates).
LOER normalizes an exact graph edit distance between layout graphs by the
size of the ground-truth graph.  mAPCER scores per-entity text regions with
average precision over a sweep of CER thresholds.
"""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass, field

from .tokens import Dictionary, LayoutGraph, TokenSequence, parse, strip_layout, to_layout_graph


@dataclass
class EvalPair:
    """One scored example; ground truth must parse strictly."""

    prediction: TokenSequence
    ground_truth: TokenSequence
    id: str = ""


class GedSizeError(ValueError):
    """Graph too large for exact search; raise the bound to proceed."""


def levenshtein(a, b) -> int:
    """Minimal insert/delete/substitute count between two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def cer(pairs: list[EvalPair], dictionary: Dictionary) -> float:
    """Corpus character error rate in percent, layout markers excluded."""
    total_dist = 0
    total_len = 0
    for p in pairs:
        gt = strip_layout(p.ground_truth, dictionary)
        pred = strip_layout(p.prediction, dictionary)
        total_dist += levenshtein(pred, gt)
        total_len += len(gt)
    if total_len == 0:
        raise ValueError("corpus ground truth has zero total text length")
    return 100.0 * total_dist / total_len


def word_tokens(text: str) -> list[str]:
    """Split into words; punctuation characters count as their own words."""
    out: list[str] = []
    run = ""
    for ch in text:
        if ch.isalnum():
            run += ch
            continue
        if run:
            out.append(run)
            run = ""
        if ch != " ":
            out.append(ch)
    if run:
        out.append(run)
    return out


def wer(pairs: list[EvalPair], dictionary: Dictionary) -> float:
    """Corpus word error rate in percent."""
    total_dist = 0
    total_len = 0
    for p in pairs:
        gt = word_tokens(strip_layout(p.ground_truth, dictionary))
        pred = word_tokens(strip_layout(p.prediction, dictionary))
        total_dist += levenshtein(pred, gt)
        total_len += len(gt)
    if total_len == 0:
        raise ValueError("corpus ground truth has zero total word count")
    return 100.0 * total_dist / total_len


# -- graph edit distance -------------------------------------------------------


def _mapping_cost(
    labels1: list[str],
    labels2: list[str],
    edges1: set[tuple[int, int]],
    edges2: set[tuple[int, int]],
    mapping: dict[int, int | None],
) -> int:
    """Total edit cost of a complete node mapping (unit costs throughout)."""
    cost = 0
    image = {v for v in mapping.values() if v is not None}
    for u, v in mapping.items():
        if v is None:
            cost += 1  # delete node
        elif labels1[u] != labels2[v]:
            cost += 1  # relabel
    cost += len(labels2) - len(image)  # insert remaining nodes
    preserved = 0
    for a, b in edges1:
        ma, mb = mapping.get(a), mapping.get(b)
        if ma is not None and mb is not None and (ma, mb) in edges2:
            preserved += 1
    cost += (len(edges1) - preserved) + (len(edges2) - preserved)
    return cost


def ged(g1: LayoutGraph, g2: LayoutGraph, max_nodes: int = 12) -> int:
    """Exact graph edit distance under unit costs.

    Best-first search over assignments of g1 nodes (in id order) to g2 nodes
    or deletion, with an admissible label-multiset bound on the remaining
    node costs.  Intended for the small ordered-tree graphs produced by
    to_layout_graph; refuses larger inputs rather than silently approximating.
    """
    n1, n2 = g1.n_nodes, g2.n_nodes
    if n1 > max_nodes or n2 > max_nodes:
        raise GedSizeError(
            f"graph has {max(n1, n2)} nodes, exact search bound is {max_nodes}; "
            f"pass a larger max_nodes"
        )
    labels1, labels2 = g1.labels, g2.labels
    edges1, edges2 = g1.edge_pairs(), g2.edge_pairs()
    if n1 == 0:
        return n2 + len(edges2)

    def heuristic(k: int, used: frozenset[int]) -> int:
        """Admissible lower bound: label-multiset matching of remaining nodes."""
        rem1 = Counter(labels1[k:])
        rem2 = Counter(labels2[v] for v in range(n2) if v not in used)
        r1, r2 = sum(rem1.values()), sum(rem2.values())
        common = sum(min(rem1[l], rem2[l]) for l in rem1)
        matched = min(r1, r2)
        return max(matched - common, 0) + (r1 - matched) + (r2 - matched)

    def completion_cost(used: frozenset[int]) -> int:
        """Insert the g2 nodes never mapped to, plus their incident edges."""
        inserted_nodes = n2 - len(used)
        inserted_edges = sum(1 for a, b in edges2 if a not in used or b not in used)
        return inserted_nodes + inserted_edges

    # State: (f, g_cost, k, mapping tuple, used frozenset); mapping[u] is the
    # assigned g2 node or -1 for deletion.  Complete states (k == n1) carry
    # their exact total cost in g_cost, so the first one popped is optimal.
    heap: list[tuple] = [(heuristic(0, frozenset()), 0, 0, (), frozenset())]
    best_seen: dict[tuple, int] = {}
    while heap:
        _, g_cost, k, mapping, used = heapq.heappop(heap)
        if k == n1:
            return g_cost
        state_key = (k, mapping)
        if best_seen.get(state_key, g_cost + 1) <= g_cost:
            continue
        best_seen[state_key] = g_cost
        for v in [v for v in range(n2) if v not in used] + [-1]:
            if v == -1:
                step = 1  # delete the g1 node
            else:
                step = int(labels1[k] != labels2[v])
            # Edge costs newly decided by this assignment: g1 edges between k
            # and earlier nodes, and g2 edges between v and the image so far.
            for j in range(k):
                mj = mapping[j]
                for src, dst in ((j, k), (k, j)):
                    has1 = (src, dst) in edges1
                    if v >= 0 and mj >= 0:
                        pair = (mj, v) if src == j else (v, mj)
                        has2 = pair in edges2
                    else:
                        has2 = False
                    if has1 and not has2:
                        step += 1  # g1 edge lost
                    elif has2 and not has1:
                        step += 1  # g2 edge has no counterpart
            new_used = used | {v} if v >= 0 else used
            new_cost = g_cost + step
            if k + 1 == n1:
                new_cost += completion_cost(new_used)
                f = new_cost
            else:
                f = new_cost + heuristic(k + 1, new_used)
            heapq.heappush(heap, (f, new_cost, k + 1, mapping + (v,), new_used))
    raise RuntimeError("graph edit distance search exhausted without a solution")


def _layout_graphs(pair: EvalPair, dictionary: Dictionary) -> tuple[LayoutGraph, LayoutGraph]:
    gt_tree, _ = parse(pair.ground_truth, dictionary, lenient=False)
    pred_tree, _ = parse(pair.prediction, dictionary, lenient=True)
    return to_layout_graph(gt_tree), to_layout_graph(pred_tree)


def loer_from_graphs(
    graph_pairs: list[tuple[LayoutGraph, LayoutGraph]], max_nodes: int = 12
) -> float:
    """LOER over (ground-truth, prediction) layout-graph pairs."""
    total_ged = 0
    total_size = 0
    for gt_graph, pred_graph in graph_pairs:
        total_ged += ged(gt_graph, pred_graph, max_nodes=max_nodes)
        total_size += gt_graph.n_nodes + gt_graph.n_edges
    if total_size == 0:
        raise ValueError("corpus ground truth has zero total graph size")
    return 100.0 * total_ged / total_size


def loer(pairs: list[EvalPair], dictionary: Dictionary, max_nodes: int = 12) -> float:
    """Layout ordering error rate: summed GED over summed ground-truth size."""
    return loer_from_graphs(
        [_layout_graphs(p, dictionary) for p in pairs], max_nodes=max_nodes
    )


@dataclass
class MapCerConfig:
    """Threshold sweep and text-bearing classes for mAPCER."""

    theta_min: float = 0.05
    theta_max: float = 0.50
    theta_step: float = 0.05
    classes: tuple[str, ...] = ("paragraph",)

    def thresholds(self) -> list[float]:
        out = []
        t = self.theta_min
        while t <= self.theta_max + 1e-9:
            out.append(round(t, 10))
            t += self.theta_step
        if len(out) < 2 or any(b <= a for a, b in zip(out, out[1:])):
            raise ValueError("mAPCER thresholds must be strictly increasing")
        return out


def _class_regions(tree, cls: str) -> list[str]:
    """Text of each entity of class ``cls`` in reading (pre-order) order."""
    out: list[str] = []

    def visit(node) -> None:
        if node.cls == cls:
            out.append(node.all_text())
        for child in node.child_entities():
            visit(child)

    visit(tree)
    return out


def _region_cer(pred: str, gt: str) -> float:
    if not gt:
        return 0.0 if not pred else float("inf")
    return levenshtein(pred, gt) / len(gt)


def map_cer(
    pairs: list[EvalPair], dictionary: Dictionary, cfg: MapCerConfig | None = None
) -> float:
    """Mean average precision over CER thresholds, weighted by class size.

    Within each document, predicted regions (reading order) greedily match
    the unmatched ground-truth region of the same class with the lowest CER.
    Matches pool across the corpus per class; ranking for average precision
    is by ascending CER (there are no confidence scores to rank by).
    """
    cfg = cfg or MapCerConfig()
    thresholds = cfg.thresholds()
    total_weight = 0
    weighted_ap = 0.0
    any_regions = False
    for cls in cfg.classes:
        match_cers: list[float] = []  # one entry per predicted region
        n_gt = 0
        char_count = 0
        for pair in pairs:
            gt_tree, _ = parse(pair.ground_truth, dictionary, lenient=False)
            pred_tree, _ = parse(pair.prediction, dictionary, lenient=True)
            gt_regions = _class_regions(gt_tree, cls)
            pred_regions = _class_regions(pred_tree, cls)
            n_gt += len(gt_regions)
            char_count += sum(len(r) for r in gt_regions)
            unmatched = list(range(len(gt_regions)))
            for pred_text in pred_regions:
                if unmatched:
                    best = min(
                        unmatched, key=lambda gi: (_region_cer(pred_text, gt_regions[gi]), gi)
                    )
                    match_cers.append(_region_cer(pred_text, gt_regions[best]))
                    unmatched.remove(best)
                else:
                    match_cers.append(float("inf"))
        if n_gt == 0:
            continue  # class absent from ground truth
        any_regions = True
        ranked = sorted(match_cers)
        ap_sum = 0.0
        for theta in thresholds:
            tp = 0
            precision_sum = 0.0
            for rank, c in enumerate(ranked, start=1):
                if c < theta:
                    tp += 1
                    precision_sum += tp / rank
            ap_sum += precision_sum / n_gt
        weighted_ap += (ap_sum / len(thresholds)) * char_count
        total_weight += char_count
    if not any_regions or total_weight == 0:
        raise ValueError("ground truth contains no text-bearing entities")
    return 100.0 * weighted_ap / total_weight
