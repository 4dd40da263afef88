"""Recall/precision metrics and the OPCls, CGCls and CGGen harnesses."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .core import BoundingBox, DomainPartition, ObjectVocabulary, ScoredRelation, filter_civic_relations

OPCLS_K = (1, 5, 10, 20)
CG_K = (1, 3, 5)
REPORT_VERSION = 1


def iou(box1: BoundingBox, box2: BoundingBox) -> float:
    """Intersection over union of two centre-convention boxes."""
    ax1, ay1, ax2, ay2 = box1.corners()
    bx1, by1, bx2, by2 = box2.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic, so identical boxes give exactly 1
    a1 = (ax2 - ax1) * (ay2 - ay1)
    a2 = (bx2 - bx1) * (by2 - by1)
    return min(1.0, inter / (a1 + a2 - inter))


def hits_at_k(gold: set, ranked: Sequence[Hashable], k: int) -> int:
    return len(gold.intersection(ranked[:k]))


def recall_at_k(gold: set, ranked: Sequence[Hashable], k: int) -> float | None:
    """|gold ∩ top-k| / |gold|; None for an empty gold set (image skipped)."""
    if not gold:
        return None
    return hits_at_k(gold, ranked, k) / len(gold)


def precision_at_k(gold: set, ranked: Sequence[Hashable], k: int) -> float:
    if not ranked:
        return 0.0
    return hits_at_k(gold, ranked, k) / min(k, len(ranked))


@dataclass
class EvalReport:
    task: str
    ks: tuple[int, ...]
    recall: dict[int, float]
    precision: dict[int, float]
    num_images: int
    per_image: dict[str, dict] = field(default_factory=dict)
    subsets: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "task": self.task,
            "ks": list(self.ks),
            "num_images": self.num_images,
            "recall": {f"R@{k}": v for k, v in self.recall.items()},
            "precision": {f"P@{k}": v for k, v in self.precision.items()},
            "subsets": self.subsets,
            "per_image": self.per_image,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _mean(vals):
    # fsum is exactly rounded, so the mean does not depend on image order
    return math.fsum(vals) / len(vals) if vals else 0.0


def _aggregate(task, ks, rows: dict[str, dict]) -> tuple[dict, dict, int]:
    """rows: image_id -> {"hits": {k: int}, "num_gold": int, "num_ranked": int}."""
    recall, precision = {}, {}
    used = [r for r in rows.values() if r["num_gold"] > 0]
    for k in ks:
        recall[k] = _mean([r["hits"][k] / r["num_gold"] for r in used])
        precision[k] = _mean(
            [r["hits"][k] / min(k, r["num_ranked"]) if r["num_ranked"] else 0.0 for r in used]
        )
    return recall, precision, len(used)


def _row(gold: set, ranked: Sequence, ks) -> dict:
    return {"hits": {k: hits_at_k(gold, ranked, k) for k in ks}, "num_gold": len(gold), "num_ranked": len(ranked)}


def _json_rows(rows):
    return {
        iid: {"num_gold": r["num_gold"], "num_ranked": r["num_ranked"], "hits": {str(k): v for k, v in r["hits"].items()}}
        for iid, r in sorted(rows.items())
    }


def _subset_summary(ks, rows) -> dict:
    rec, prec, n = _aggregate("", ks, rows)
    return {
        "num_images": n,
        "recall": {f"R@{k}": v for k, v in rec.items()},
        "precision": {f"P@{k}": v for k, v in prec.items()},
    }


def opcls_from_rankings(
    rankings: dict[str, Sequence[tuple[int, int]]],
    gold_pairs: dict[str, set[tuple[int, int]]],
    partition: DomainPartition | None = None,
    ks: Sequence[int] = OPCLS_K,
) -> EvalReport:
    """Image-wise R@k over class pairs, plus seen/unseen subsets.

    A subset keeps only the gold pairs of that domain; images without any
    such pair are skipped for that subset.
    """
    if not any(gold_pairs.get(i) for i in rankings):
        raise ValueError("no gold civic pairs in the evaluation set")
    ks = tuple(ks)
    rows = {iid: _row(set(gold_pairs.get(iid, ())), list(r), ks) for iid, r in rankings.items()}
    recall, precision, n = _aggregate("opcls", ks, rows)
    subsets = {}
    if partition is not None:
        for name, members in (("seen", partition.seen_pairs), ("unseen", partition.unseen_pairs)):
            sub = {
                iid: _row(set(gold_pairs.get(iid, ())) & members, list(r), ks) for iid, r in rankings.items()
            }
            subsets[name] = _subset_summary(ks, sub)
    return EvalReport("opcls", ks, recall, precision, n, _json_rows(rows), subsets)


def opcls_eval(
    model, test_dataset, partition: DomainPartition | None = None, ks=OPCLS_K, vocab: ObjectVocabulary | None = None
) -> EvalReport:
    """OPCls over detected class pairs; with ``vocab`` only essential/context
    pairs are ranked."""
    from .relmodel import forward_many

    keep = vocab.is_civic_pair if vocab is not None else None
    results = forward_many(test_dataset, model)
    rankings = {im.image_id: res.ranked_class_pairs(keep) for im, res in zip(test_dataset, results)}
    gold = {im.image_id: im.gold_class_pairs() for im in test_dataset}
    return opcls_from_rankings(rankings, gold, partition, ks)


def cg_generate(model, image, vocab: ObjectVocabulary, k: int = 5) -> list[ScoredRelation]:
    """Civic Issue Graph: ranked relations filtered to essential/context pairs."""
    from .relmodel import forward

    return filter_civic_relations(forward(image, model).relations, vocab, k)


def relation_matches(pred: ScoredRelation, gold: ScoredRelation, iou_threshold: float | None) -> bool:
    """Triple equality, and, when a threshold is given, both boxes grounded."""
    if pred.triple != gold.triple:
        return False
    if iou_threshold is None:
        return True
    return iou(pred.subject_box, gold.subject_box) >= iou_threshold and iou(pred.object_box, gold.object_box) >= iou_threshold


def count_correct(
    ranked: Sequence[ScoredRelation], gold: Sequence[ScoredRelation], k: int, iou_threshold: float | None
) -> tuple[int, int]:
    """(#correct predictions in top-k, #gold relations recalled by top-k).

    Predictions and gold relations are paired one-to-one by a maximum
    bipartite matching, so both counts are the matching size.
    """
    top = list(ranked[:k])
    if not top or not gold:
        return 0, 0
    adj = np.array([[relation_matches(p, g, iou_threshold) for g in gold] for p in top], dtype=np.int8)
    if not adj.any():
        return 0, 0
    matched = int((maximum_bipartite_matching(csr_matrix(adj), perm_type="column") >= 0).sum())
    return matched, matched


def cg_relation_report(
    predictions: dict[str, Sequence[ScoredRelation]],
    gold: dict[str, Sequence[ScoredRelation]],
    iou_threshold: float | None,
    ks: Sequence[int] = CG_K,
    task: str = "cggen",
) -> EvalReport:
    ks = tuple(ks)
    rows = {}
    for iid, ranked in predictions.items():
        g = list(gold.get(iid, ()))
        hits, recalled = {}, {}
        for k in ks:
            hits[k], recalled[k] = count_correct(ranked, g, k, iou_threshold)
        rows[iid] = {"hits": hits, "recalled": recalled, "num_gold": len(g), "num_ranked": len(ranked)}
    used = [r for r in rows.values() if r["num_gold"] > 0]
    recall = {k: _mean([r["recalled"][k] / r["num_gold"] for r in used]) for k in ks}
    precision = {
        k: _mean([r["hits"][k] / min(k, r["num_ranked"]) if r["num_ranked"] else 0.0 for r in used]) for k in ks
    }
    per_image = {
        iid: {
            "num_gold": r["num_gold"], "num_ranked": r["num_ranked"],
            "hits": {str(k): v for k, v in r["hits"].items()},
        }
        for iid, r in sorted(rows.items())
    }
    return EvalReport(task, ks, recall, precision, len(used), per_image, {})


def _require_boxes(dataset):
    for im in dataset:
        for r in im.gold_relations:
            if r.subject_box is None or r.object_box is None:
                raise ValueError(f"{im.image_id}: gold relation without grounding boxes")


def cgcls_eval(model, test_dataset, vocab: ObjectVocabulary, ks=CG_K) -> EvalReport:
    preds = {im.image_id: cg_generate(model, im, vocab, max(ks)) for im in test_dataset}
    gold = {im.image_id: list(im.gold_relations) for im in test_dataset}
    return cg_relation_report(preds, gold, None, ks, task="cgcls")


def cggen_eval(model, test_dataset, vocab: ObjectVocabulary, iou_threshold: float = 0.5, ks=CG_K) -> EvalReport:
    _require_boxes(test_dataset)
    preds = {im.image_id: cg_generate(model, im, vocab, max(ks)) for im in test_dataset}
    gold = {im.image_id: list(im.gold_relations) for im in test_dataset}
    return cg_relation_report(preds, gold, iou_threshold, ks, task="cggen")
