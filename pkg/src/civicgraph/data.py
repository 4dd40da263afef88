"""Region-proposal records, their on-disk format, class balancing and the
seeded synthetic two-domain generator."""
from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, NamedTuple, Sequence, TypeVar

import numpy as np

from .core import (
    BoundingBox,
    DomainPartition,
    ObjectVocabulary,
    PredicateVocabulary,
    ScoredRelation,
    atomic_open,
    partition_triples,
)

PROB_TOL = 1e-6
FORMAT_VERSION = 1


class RecordFormatError(ValueError):
    """A malformed or invalid image-record line."""


@dataclass(frozen=True, eq=False)
class RegionProposal:
    box: BoundingBox
    feature: np.ndarray
    label_probs: np.ndarray  # index 0 = background

    def __post_init__(self):
        f = np.asarray(self.feature, dtype=np.float64)
        p = np.asarray(self.label_probs, dtype=np.float64)
        if f.ndim != 1 or not np.all(np.isfinite(f)):
            raise ValueError("feature must be a finite 1-D vector")
        if p.ndim != 1 or p.size < 2:
            raise ValueError("label_probs must be a 1-D vector over background + classes")
        if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"label_probs must be non-negative and sum to 1 (sum={p.sum():.9f})")
        object.__setattr__(self, "feature", f)
        object.__setattr__(self, "label_probs", p)

    def __eq__(self, other):
        if not isinstance(other, RegionProposal):
            return NotImplemented
        return (
            self.box == other.box
            and np.array_equal(self.feature, other.feature)
            and np.array_equal(self.label_probs, other.label_probs)
        )

    @property
    def detected_class(self) -> int:
        """Class index of the most probable non-background label (lowest index on ties)."""
        return int(np.argmax(self.label_probs[1:]))


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    proposals: tuple[RegionProposal, ...]
    union_features: dict[tuple[int, int], np.ndarray]
    gold_relations: tuple[ScoredRelation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        object.__setattr__(self, "gold_relations", tuple(self.gold_relations))
        n = len(self.proposals)
        uf = {}
        for key, vec in self.union_features.items():
            i, j = int(key[0]), int(key[1])
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"union feature keyed by invalid pair {key} for {n} proposals")
            uf[(i, j)] = np.asarray(vec, dtype=np.float64)
        object.__setattr__(self, "union_features", uf)

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.proposals == other.proposals
            and self.gold_relations == other.gold_relations
            and self.union_features.keys() == other.union_features.keys()
            and all(np.array_equal(v, other.union_features[k]) for k, v in self.union_features.items())
        )

    @property
    def feature_dim(self) -> int:
        return self.proposals[0].feature.size if self.proposals else 0

    def union_feature(self, i: int, j: int) -> np.ndarray:
        return self.union_features[(i, j)]

    def gold_pair_relations(self, min_iou: float = 0.5) -> dict[tuple[int, int], ScoredRelation]:
        """Map gold relations onto proposal index pairs by best box overlap.

        Relations whose subject or object matches no proposal at ``min_iou``
        are dropped. Later relations on the same pair win.
        """
        from .evaluation import iou  # local: evaluation imports relmodel

        out = {}
        for rel in self.gold_relations:
            si = _best_match(self.proposals, rel.subject_box, iou, min_iou)
            oi = _best_match(self.proposals, rel.object_box, iou, min_iou)
            if si is None or oi is None or si == oi:
                continue
            out[(si, oi)] = rel
        return out

    def gold_pair_labels(self, min_iou: float = 0.5) -> dict[tuple[int, int], int]:
        return {k: r.predicate for k, r in self.gold_pair_relations(min_iou).items()}

    def gold_class_pairs(self) -> set[tuple[int, int]]:
        return {r.pair for r in self.gold_relations}


def _best_match(proposals, box, iou_fn, min_iou):
    best, best_v = None, min_iou
    for k, p in enumerate(proposals):
        v = iou_fn(p.box, box)
        if v >= best_v and (best is None or v > best_v):
            best, best_v = k, v
    return best


# ---------------------------------------------------------------------------
# serialization: one JSON object per line

def _relation_to_json(r: ScoredRelation) -> dict:
    return {
        "subject": r.subject,
        "subject_box": list(r.subject_box.as_tuple()),
        "predicate": r.predicate,
        "object": r.object,
        "object_box": list(r.object_box.as_tuple()),
        "score": r.score,
    }


def record_to_json(rec: ImageRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "boxes": [list(p.box.as_tuple()) for p in rec.proposals],
        "features": [p.feature.tolist() for p in rec.proposals],
        "label_probs": [p.label_probs.tolist() for p in rec.proposals],
        "union_features": [[i, j, v.tolist()] for (i, j), v in sorted(rec.union_features.items())],
        "gold_relations": [_relation_to_json(r) for r in rec.gold_relations],
    }


def record_from_json(obj: dict, where: str = "") -> ImageRecord:
    def fail(fieldname, msg):
        raise RecordFormatError(f"{where}field {fieldname!r}: {msg}")

    for key in ("image_id", "boxes", "features", "label_probs"):
        if key not in obj:
            fail(key, "missing")
    boxes, feats, probs = obj["boxes"], obj["features"], obj["label_probs"]
    if not (len(boxes) == len(feats) == len(probs)):
        fail("boxes", "boxes, features and label_probs differ in length")
    proposals = []
    for k, (b, f, p) in enumerate(zip(boxes, feats, probs)):
        try:
            box = BoundingBox(*map(float, b))
        except (TypeError, ValueError) as exc:
            fail("boxes", f"proposal {k}: {exc}")
        try:
            proposals.append(RegionProposal(box, np.asarray(f, dtype=np.float64), np.asarray(p, dtype=np.float64)))
        except ValueError as exc:
            name = "label_probs" if "label_probs" in str(exc) else "features"
            fail(name, f"proposal {k}: {exc}")
    union = {}
    for entry in obj.get("union_features", []):
        try:
            i, j, vec = entry
            union[(int(i), int(j))] = np.asarray(vec, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            fail("union_features", str(exc))
    rels = []
    for k, r in enumerate(obj.get("gold_relations", [])):
        try:
            rels.append(
                ScoredRelation(
                    int(r["subject"]),
                    BoundingBox(*map(float, r["subject_box"])),
                    int(r["predicate"]),
                    int(r["object"]),
                    BoundingBox(*map(float, r["object_box"])),
                    float(r.get("score", 1.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            fail("gold_relations", f"relation {k}: {exc}")
    try:
        return ImageRecord(str(obj["image_id"]), tuple(proposals), union, tuple(rels))
    except ValueError as exc:
        fail("union_features", str(exc))


def dumps_records(records: Iterable[ImageRecord]) -> str:
    return "".join(json.dumps(record_to_json(r), separators=(",", ":")) + "\n" for r in records)


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    with atomic_open(path) as fh:
        fh.write(text)


def save_image_records(path, records: Iterable[ImageRecord]) -> None:
    atomic_write_text(path, dumps_records(records))


def load_image_records(path) -> list[ImageRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            out.append(record_from_json(obj, where=f"{path}:{lineno}: "))
    return out


def records_digest(records: Iterable[ImageRecord]) -> str:
    return hashlib.sha256(dumps_records(records).encode()).hexdigest()


def write_manifest(path, splits: dict[str, Sequence[str]], extra: dict | None = None) -> None:
    """Split manifest: ``{"format_version", "splits": {name: file}, ...}``."""
    doc = {"format_version": FORMAT_VERSION, "splits": dict(splits)}
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def train_test_split(records: Sequence[ImageRecord], train_fraction: float = 0.9):
    """Deterministic head/tail split (90/10 by default)."""
    n_train = int(round(train_fraction * len(records)))
    return list(records[:n_train]), list(records[n_train:])


# ---------------------------------------------------------------------------
# class balancing

T = TypeVar("T")


def object_samples(records: Iterable[ImageRecord]) -> list[tuple[str, int, BoundingBox]]:
    """Annotated object instances ``(image_id, class, box)``, deduplicated per image."""
    out = []
    for rec in records:
        seen = set()
        for r in rec.gold_relations:
            for cls, box in ((r.subject, r.subject_box), (r.object, r.object_box)):
                if (cls, box) not in seen:
                    seen.add((cls, box))
                    out.append((rec.image_id, cls, box))
    return out


def balance_class_samples(
    records: Sequence[T],
    lower: int = 3000,
    upper: int = 8000,
    seed: int = 0,
    class_of: Callable[[T], Hashable] = lambda s: s[1],
) -> list[T]:
    """Clamp every class's sample count into ``[lower, upper]``.

    Classes above ``upper`` are undersampled uniformly without replacement,
    classes below ``lower`` are topped up by uniform sampling with
    replacement. The output is grouped by class in first-appearance order.
    """
    if lower > upper:
        raise ValueError(f"lower ({lower}) exceeds upper ({upper})")
    groups: dict[Hashable, list[T]] = defaultdict(list)
    order = []
    for s in records:
        c = class_of(s)
        if c not in groups:
            order.append(c)
        groups[c].append(s)
    rng = np.random.default_rng(seed)
    out: list[T] = []
    for c in order:
        items = groups[c]
        n = len(items)
        if n == 0:
            raise ValueError(f"class {c!r} has no samples")
        if n > upper:
            idx = np.sort(rng.choice(n, size=upper, replace=False))
            out.extend(items[i] for i in idx)
        elif n < lower:
            extra = rng.integers(0, n, size=lower - n)
            out.extend(items)
            out.extend(items[i] for i in extra)
        else:
            out.extend(items)
    return out


def class_counts(samples: Iterable[T], class_of: Callable[[T], Hashable] = lambda s: s[1]) -> dict:
    counts: dict = defaultdict(int)
    for s in samples:
        counts[class_of(s)] += 1
    return dict(counts)


# ---------------------------------------------------------------------------
# synthetic two-domain benchmark

@dataclass(frozen=True)
class TargetShift:
    """Affine appearance map ``x -> scale * ((1 - mix) x + mix R x) + offset * u``
    with ``R`` a random rotation and ``u`` a random unit vector (both drawn
    from the dataset seed)."""

    mix: float = 0.0
    scale: float = 1.0
    offset: float = 0.0

    @classmethod
    def identity(cls) -> "TargetShift":
        return cls(0.0, 1.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return self.mix == 0.0 and self.scale == 1.0 and self.offset == 0.0


@dataclass(frozen=True)
class SyntheticDomainConfig:
    seed: int = 0
    num_source_images: int = 600
    num_target_images: int = 600
    num_essential: int = 4  # essential classes present in the source domain
    num_context: int = 5
    num_new: int = 3  # civic-only classes, each a shifted twin of an essential class
    num_predicates: int = 6
    feature_dim: int = 64
    relations_per_source_image: tuple[int, int] = (1, 3)
    distractors_per_image: tuple[int, int] = (1, 3)
    decoys_per_image: tuple[int, int] = (1, 2)
    target_decoys_per_image: tuple[int, int] = (0, 0)
    appearance_noise: float = 0.3
    label_confidence: float = 4.0
    box_jitter: float = 0.03
    union_appearance_mix: float = 0.2
    target_shift: TargetShift = field(default_factory=lambda: TargetShift(0.8, 1.0, 1.5))

    def validate(self) -> None:
        if self.num_source_images <= 0 or self.num_target_images <= 0:
            raise ValueError("need at least one source and one target image")
        if self.num_context < 2 or self.num_essential < 1:
            raise ValueError("need at least one essential and two context classes")
        if self.num_new < 1 or self.num_new > self.num_essential:
            raise ValueError("num_new must be in [1, num_essential]")
        if self.num_predicates < 3:
            raise ValueError("need at least 3 predicates")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")

    @property
    def num_classes(self) -> int:
        return self.num_essential + self.num_context + self.num_new

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["target_shift"] = dict(self.target_shift.__dict__)
        d["relations_per_source_image"] = list(self.relations_per_source_image)
        d["distractors_per_image"] = list(self.distractors_per_image)
        d["decoys_per_image"] = list(self.decoys_per_image)
        d["target_decoys_per_image"] = list(self.target_decoys_per_image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDomainConfig":
        d = dict(d)
        if "target_shift" in d:
            d["target_shift"] = TargetShift(**d["target_shift"])
        for k in ("relations_per_source_image", "distractors_per_image", "decoys_per_image", "target_decoys_per_image"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class SyntheticDomains(NamedTuple):
    source: list[ImageRecord]
    target: list[ImageRecord]
    partition: DomainPartition
    objects: ObjectVocabulary
    predicates: PredicateVocabulary
    civic_triples: list[tuple[str, str, str]]
    source_pairs: list[tuple[str, str]]


class _World:
    """Class prototypes, predicate geometry and pair semantics for one seed."""

    def __init__(self, cfg: SyntheticDomainConfig, rng: np.random.Generator):
        self.cfg = cfg
        E, K, N, F = cfg.num_essential, cfg.num_context, cfg.num_new, cfg.feature_dim
        self.essential = list(range(E))
        self.context = list(range(E, E + K))
        self.new = list(range(E + K, E + K + N))
        self.twin = {n: self.essential[k] for k, n in enumerate(self.new)}
        names = [f"item{k}" for k in range(E)] + [f"place{k}" for k in range(K)] + [f"civic{k}" for k in range(N)]
        self.objects = ObjectVocabulary(
            tuple(names), frozenset(self.essential + self.new), frozenset(self.context)
        )
        P = cfg.num_predicates
        self.predicates = PredicateVocabulary(tuple(f"rel{k}" for k in range(P)))

        self.prototypes = rng.normal(size=(E + K + N, F))
        # relative placement of the subject w.r.t. the object, per predicate
        angles = 2 * np.pi * (np.arange(P) + rng.uniform(-0.15, 0.15, size=P)) / P
        self.offsets = 0.55 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        self.scale_ratio = rng.uniform(-0.6, 0.6, size=P)
        self.union_proj = rng.normal(size=(F, 6)) * 1.2
        self.union_bias = rng.normal(size=F) * 0.3
        self.union_app = rng.normal(size=(F, F)) / np.sqrt(F)

        ts = cfg.target_shift
        q, _ = np.linalg.qr(rng.normal(size=(F, F)))
        u = rng.normal(size=F)
        self.shift_matrix = ts.scale * ((1 - ts.mix) * np.eye(F) + ts.mix * q)
        self.shift_offset = ts.offset * u / np.linalg.norm(u)

        # every (essential, context) pair is related in the source, with one
        # or two admissible predicates
        self.pair_predicates = {}
        for a in self.essential:
            for b in self.context:
                k = int(rng.integers(1, 3))
                self.pair_predicates[(a, b)] = sorted(int(p) + 1 for p in rng.choice(P, size=k, replace=False))
        self.source_pairs = sorted(self.pair_predicates)
        for n, t in self.twin.items():
            for b in self.context:
                self.pair_predicates[(n, b)] = self.pair_predicates[(t, b)]

    # civic triples: the twins' triples are seen, the mirrored new-class ones unseen
    def civic_triples(self) -> list[tuple[int, int, int]]:
        seen, unseen = [], []
        for n, t in self.twin.items():
            for b in self.context:
                for p in self.pair_predicates[(t, b)]:
                    seen.append((t, p, b))
                    unseen.append((n, p, b))
        return seen + unseen

    def appearance(self, cls: int, rng) -> np.ndarray:
        base = self.twin.get(cls, cls)
        x = self.prototypes[base] + self.cfg.appearance_noise * rng.normal(size=self.cfg.feature_dim)
        if cls in self.twin:
            x = self.shift_matrix @ x + self.shift_offset
        return x

    def label_probs(self, cls: int, rng) -> np.ndarray:
        C = self.objects.__len__()
        logits = rng.normal(scale=0.5, size=C + 1)
        logits[cls + 1] += self.cfg.label_confidence
        logits[0] += 0.5
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        return _renormalize(p)

    def union_feature(self, bi: BoundingBox, bj: BoundingBox, fi, fj) -> np.ndarray:
        dx = (bj.x - bi.x) / bi.w
        dy = (bj.y - bi.y) / bi.h
        rel = np.array([dx, dy, math.log(bj.w / bi.w), math.log(bj.h / bi.h),
                        math.exp(-(dx * dx + dy * dy)), math.tanh(dx * dy)])
        app = self.union_app @ (fi + fj) / 2.0
        return np.tanh(self.union_proj @ rel + self.union_bias + self.cfg.union_appearance_mix * app)


def _renormalize(p: np.ndarray) -> np.ndarray:
    # decimal round-trips are exact, but keep the sum tight for strict loaders
    p = np.maximum(p, 0.0)
    return p / p.sum()


def _random_box(rng) -> BoundingBox:
    w, h = rng.uniform(0.1, 0.25, size=2)
    x, y = rng.uniform(0.15, 0.85, size=2)
    return BoundingBox(float(x), float(y), float(w), float(h))


def _related_box(world: _World, obj_box: BoundingBox, predicate: int, rng) -> BoundingBox:
    off = world.offsets[predicate - 1] + rng.normal(scale=0.05, size=2)
    s = math.exp(world.scale_ratio[predicate - 1] + rng.normal(scale=0.05))
    return BoundingBox(
        float(obj_box.x + off[0] * obj_box.w * 2), float(obj_box.y + off[1] * obj_box.h * 2),
        float(obj_box.w * s), float(obj_box.h * s),
    )


def _far_box(existing: Sequence[BoundingBox], rng, tries: int = 50) -> BoundingBox:
    """A random box not adjacent to any existing box (best effort)."""
    best, best_d = None, -1.0
    for _ in range(tries):
        b = _random_box(rng)
        d = min((abs(b.x - e.x) / e.w + abs(b.y - e.y) / e.h for e in existing), default=10.0)
        if d > 3.0:
            return b
        if d > best_d:
            best, best_d = b, d
    return best


def _jitter(box: BoundingBox, scale: float, rng) -> BoundingBox:
    dx, dy = rng.normal(scale=scale, size=2)
    sw, sh = np.exp(rng.normal(scale=scale, size=2))
    return BoundingBox(float(box.x + dx * box.w), float(box.y + dy * box.h), float(box.w * sw), float(box.h * sh))


def _make_image(world: _World, image_id: str, objects: list[tuple[int, BoundingBox]],
                relations: list[tuple[int, int, int]], rng) -> ImageRecord:
    """objects: (class, true box); relations: (subject idx, predicate, object idx)."""
    cfg = world.cfg
    proposals = []
    for cls, box in objects:
        proposals.append(
            RegionProposal(_jitter(box, cfg.box_jitter, rng), world.appearance(cls, rng), world.label_probs(cls, rng))
        )
    union = {}
    for i, pi in enumerate(proposals):
        for j, pj in enumerate(proposals):
            if i != j:
                union[(i, j)] = world.union_feature(pi.box, pj.box, pi.feature, pj.feature)
    gold = tuple(
        ScoredRelation(objects[s][0], objects[s][1], p, objects[o][0], objects[o][1], 1.0) for s, p, o in relations
    )
    return ImageRecord(image_id, tuple(proposals), union, gold)


def _decoys(world: _World, rng, objects: list, subjects: Sequence[int], count: tuple[int, int]) -> None:
    """Append pairs placed like some predicate the pair does not admit; they
    carry no gold relation."""
    lo, hi = count
    P = world.cfg.num_predicates
    for _ in range(int(rng.integers(lo, hi + 1))):
        a = int(rng.choice(subjects))
        b = int(rng.choice(world.context))
        bad = [q for q in range(1, P + 1) if q not in world.pair_predicates[(a, b)]]
        q = int(rng.choice(bad))
        ob = _far_box([x[1] for x in objects], rng)
        objects.append((b, ob))
        objects.append((a, _related_box(world, ob, q, rng)))


def _distractors(world: _World, rng, boxes, allowed: Sequence[int]) -> list[tuple[int, BoundingBox]]:
    lo, hi = world.cfg.distractors_per_image
    out = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        b = _far_box(boxes + [x[1] for x in out], rng)
        out.append((int(rng.choice(allowed)), b))
    return out


def generate_synthetic_domains(config: SyntheticDomainConfig) -> SyntheticDomains:
    """Build a source domain (relations over seen pairs only) and a civic
    target domain whose images each show one civic relation, seen or unseen.

    Unseen pairs mirror seen ones: each civic-only class looks like its twin
    essential class passed through ``target_shift`` and takes part in the
    same relations. Identical configs give byte-identical datasets.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    world_ss, src_ss, tgt_ss = root.spawn(3)
    world = _World(config, np.random.default_rng(world_ss))
    names = world.objects.classes
    pnames = world.predicates.predicates

    rng = np.random.default_rng(src_ss)
    source = []
    base_classes = world.essential + world.context
    for k in range(config.num_source_images):
        lo, hi = config.relations_per_source_image
        objects, rels = [], []
        for _ in range(int(rng.integers(lo, hi + 1))):
            a, b = world.source_pairs[int(rng.integers(len(world.source_pairs)))]
            p = int(rng.choice(world.pair_predicates[(a, b)]))
            ob = _far_box([x[1] for x in objects], rng)
            objects.append((b, ob))
            objects.append((a, _related_box(world, ob, p, rng)))
            rels.append((len(objects) - 1, p, len(objects) - 2))
        _decoys(world, rng, objects, world.essential, config.decoys_per_image)
        objects += _distractors(world, rng, [x[1] for x in objects], base_classes)
        source.append(_make_image(world, f"src{k:05d}", objects, rels, rng))

    triples = world.civic_triples()
    rng = np.random.default_rng(tgt_ss)
    target = []
    twins = sorted(world.twin.values())
    for k in range(config.num_target_images):
        a, p, b = triples[int(rng.integers(len(triples)))]
        # decoys and distractors come from the same side of the partition as
        # the civic relation, so seen and unseen images mirror each other
        group = world.new if a in world.twin else twins
        ob = _random_box(rng)
        objects = [(b, ob), (a, _related_box(world, ob, p, rng))]
        _decoys(world, rng, objects, group, config.target_decoys_per_image)
        objects += _distractors(world, rng, [x[1] for x in objects], group + world.context)
        target.append(_make_image(world, f"tgt{k:05d}", objects, [(1, p, 0)], rng))

    civic = [(names[a], pnames[p], names[b]) for a, p, b in triples]
    src_pairs = [(names[a], names[b]) for a, b in world.source_pairs]
    partition = partition_triples(civic, src_pairs, world.objects, world.predicates)
    if not partition.seen_pairs or not partition.unseen_pairs:
        raise ValueError("degenerate synthetic configuration: empty seen or unseen pair set")
    return SyntheticDomains(source, target, partition, world.objects, world.predicates, civic, src_pairs)
