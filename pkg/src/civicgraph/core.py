"""Domain types for Civic Issue Graphs and the rules shared across modules.

Class indices refer to positions in :class:`ObjectVocabulary.classes`
(0-based, no background). Predicate index 0 is always the background label.
"""
from __future__ import annotations

import math
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

BACKGROUND = "__background__"
SIMILARITY_THRESHOLD = 0.4

Pair = tuple[int, int]
Triple = tuple[str, str, str]


class VocabularyError(ValueError):
    """Raised when a name or index is not part of a vocabulary."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in centre convention: (x, y) is the centre."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width/height must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2)"""
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class ObjectVocabulary:
    classes: tuple[str, ...]
    essential_set: frozenset[int]
    context_set: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "essential_set", frozenset(self.essential_set))
        object.__setattr__(self, "context_set", frozenset(self.context_set))
        if len(set(self.classes)) != len(self.classes):
            raise VocabularyError("duplicate class names")
        if BACKGROUND in self.classes:
            raise VocabularyError("the background label is not an object class")
        if self.essential_set & self.context_set:
            raise VocabularyError(
                f"classes in both essential and context sets: {sorted(self.essential_set & self.context_set)}"
            )
        if self.essential_set | self.context_set != set(range(len(self.classes))):
            raise VocabularyError("essential and context sets must cover every class exactly once")

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise VocabularyError(f"unknown object class {name!r}") from None

    def is_civic_pair(self, a: int, b: int) -> bool:
        """True if the unordered pair has one essential and one context member."""
        return (a in self.essential_set and b in self.context_set) or (
            a in self.context_set and b in self.essential_set
        )


@dataclass(frozen=True)
class PredicateVocabulary:
    """Predicate names; index 0 is reserved for background."""

    predicates: tuple[str, ...]

    def __post_init__(self):
        preds = tuple(self.predicates)
        if not preds or preds[0] != BACKGROUND:
            preds = (BACKGROUND,) + preds
        if len(set(preds)) != len(preds):
            raise VocabularyError("duplicate predicate names")
        object.__setattr__(self, "predicates", preds)

    def __len__(self) -> int:
        return len(self.predicates)

    @property
    def num_relations(self) -> int:
        """Number of non-background predicates."""
        return len(self.predicates) - 1

    def index(self, name: str) -> int:
        if name == BACKGROUND:
            raise VocabularyError("background is not a valid relation predicate")
        try:
            return self.predicates.index(name)
        except ValueError:
            raise VocabularyError(f"unknown predicate {name!r}") from None


@dataclass(frozen=True)
class ScoredRelation:
    subject: int
    subject_box: BoundingBox
    predicate: int
    object: int
    object_box: BoundingBox
    score: float = 1.0

    def __post_init__(self):
        if self.predicate == 0:
            raise ValueError("a relation cannot carry the background predicate")
        if self.predicate < 0 or self.subject < 0 or self.object < 0:
            raise ValueError("negative class or predicate index")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite relation score {self.score}")

    @property
    def pair(self) -> Pair:
        return (self.subject, self.object)

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.subject, self.predicate, self.object)

    def sort_key(self):
        return (-self.score, self.subject, self.object, self.predicate)


def rank_relations(relations: Iterable[ScoredRelation]) -> list[ScoredRelation]:
    """Descending score, then ascending (subject, object, predicate)."""
    return sorted(relations, key=ScoredRelation.sort_key)


@dataclass(frozen=True)
class DomainPartition:
    """Seen (Y_s) and unseen (Y_n) ordered class pairs.

    ``seen_triples`` / ``unseen_triples`` keep the triple-level split the
    pairs were derived from, when known.
    """

    seen_pairs: frozenset[Pair]
    unseen_pairs: frozenset[Pair]
    seen_triples: tuple[tuple[int, int, int], ...] = ()
    unseen_triples: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "seen_pairs", frozenset(tuple(p) for p in self.seen_pairs))
        object.__setattr__(self, "unseen_pairs", frozenset(tuple(p) for p in self.unseen_pairs))
        overlap = self.seen_pairs & self.unseen_pairs
        if overlap:
            raise ValueError(f"pairs marked both seen and unseen: {sorted(overlap)}")

    def label(self, pair: Pair) -> int | None:
        """Domain label of an ordered pair: SEEN, UNSEEN, or None if in neither set."""
        if pair in self.seen_pairs:
            return SEEN
        if pair in self.unseen_pairs:
            return UNSEEN
        return None

    @property
    def triples(self) -> tuple[tuple[int, int, int], ...]:
        return self.seen_triples + self.unseen_triples


# discriminator output order is (seen, unseen)
SEEN = 0
UNSEEN = 1


def partition_triples(
    civic_triples: Sequence[Triple],
    source_pair_vocab: Iterable[tuple[str, str]],
    vocab: ObjectVocabulary,
    predicates: PredicateVocabulary | None = None,
) -> DomainPartition:
    """Split civic triples into seen/unseen by whether their ordered object
    pair occurs in the source domain."""
    source = {(vocab.index(a), vocab.index(b)) for a, b in source_pair_vocab}
    seen, unseen = set(), set()
    seen_t, unseen_t = [], []
    for n, triple in enumerate(civic_triples):
        subj, pred, obj = triple
        try:
            pair = (vocab.index(subj), vocab.index(obj))
        except VocabularyError as exc:
            raise VocabularyError(f"triple #{n} {list(triple)}: {exc}") from None
        p = predicates.index(pred) if predicates is not None else -1
        if pair in source:
            seen.add(pair)
            seen_t.append((pair[0], p, pair[1]))
        else:
            unseen.add(pair)
            unseen_t.append((pair[0], p, pair[1]))
    return DomainPartition(frozenset(seen), frozenset(unseen), tuple(seen_t), tuple(unseen_t))


def map_to_target_class(
    label: str, vocab: ObjectVocabulary, similarity: Callable[[str, str], float]
) -> int | None:
    """Map a free-text object label onto the closest vocabulary class.

    Returns None unless the best similarity is strictly above 0.4.
    """
    best, best_sim = None, -math.inf
    for idx, name in enumerate(vocab.classes):
        s = similarity(label, name)
        if s > best_sim:  # strict: earlier index wins ties
            best, best_sim = idx, s
    if best is None or not best_sim > SIMILARITY_THRESHOLD:
        return None
    return best


def filter_civic_relations(
    ranked: Sequence[ScoredRelation], vocab: ObjectVocabulary, k: int = 5
) -> list[ScoredRelation]:
    kept = [r for r in ranked if r.predicate != 0 and vocab.is_civic_pair(r.subject, r.object)]
    return kept[:k]


# ---------------------------------------------------------------------------
# line-oriented files

@contextmanager
def atomic_open(path):
    """Text handle on a temp file beside ``path``, renamed over it on success."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, [f.strip() for f in line.split("\t")]


def read_triples(path) -> list[Triple]:
    """Read ``object1<TAB>predicate<TAB>object2[<TAB>image_id]`` records.

    The optional image id is dropped; use :func:`read_triple_records` to keep it.
    """
    return [(a, p, b) for a, p, b, _ in read_triple_records(path)]


def read_triple_records(path) -> list[tuple[str, str, str, str | None]]:
    out = []
    for lineno, fields in _data_lines(path):
        if len(fields) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(fields)}")
        if not all(fields[:3]):
            raise ValueError(f"{path}:{lineno}: empty object or predicate field")
        out.append((fields[0], fields[1], fields[2], fields[3] if len(fields) == 4 else None))
    return out


def write_triples(path, triples: Iterable[Sequence[str]]) -> None:
    with atomic_open(path) as fh:
        fh.write("# object1\tpredicate\tobject2[\timage_id]\n")
        for t in triples:
            fh.write("\t".join(str(x) for x in t if x is not None) + "\n")


def read_pairs(path) -> list[tuple[str, str]]:
    out = []
    for lineno, fields in _data_lines(path):
        if len(fields) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 tab-separated fields")
        out.append((fields[0], fields[1]))
    return out


def write_pairs(path, pairs: Iterable[tuple[str, str]]) -> None:
    with atomic_open(path) as fh:
        fh.write("# object1\tobject2\n")
        for a, b in pairs:
            fh.write(f"{a}\t{b}\n")


def read_object_vocabulary(path) -> ObjectVocabulary:
    """Each line: ``class_name<TAB>essential|context``."""
    names, essential, context = [], set(), set()
    for lineno, fields in _data_lines(path):
        if len(fields) != 2 or fields[1] not in ("essential", "context"):
            raise ValueError(f"{path}:{lineno}: expected 'name<TAB>essential|context'")
        (essential if fields[1] == "essential" else context).add(len(names))
        names.append(fields[0])
    return ObjectVocabulary(tuple(names), frozenset(essential), frozenset(context))


def write_object_vocabulary(path, vocab: ObjectVocabulary) -> None:
    with atomic_open(path) as fh:
        fh.write("# class\trole\n")
        for i, name in enumerate(vocab.classes):
            fh.write(f"{name}\t{'essential' if i in vocab.essential_set else 'context'}\n")


def read_predicate_vocabulary(path) -> PredicateVocabulary:
    return PredicateVocabulary(tuple(fields[0] for _, fields in _data_lines(path)))


def write_predicate_vocabulary(path, preds: PredicateVocabulary) -> None:
    with atomic_open(path) as fh:
        fh.write("# predicate (background is implicit at index 0)\n")
        for name in preds.predicates[1:]:
            fh.write(name + "\n")


def write_partition(path, partition: DomainPartition, vocab: ObjectVocabulary) -> None:
    """``seen|unseen<TAB>object1<TAB>object2`` per line, sorted."""
    with atomic_open(path) as fh:
        fh.write("# domain\tobject1\tobject2\n")
        for tag, pairs in (("seen", partition.seen_pairs), ("unseen", partition.unseen_pairs)):
            for a, b in sorted(pairs):
                fh.write(f"{tag}\t{vocab.classes[a]}\t{vocab.classes[b]}\n")


def read_partition(path, vocab: ObjectVocabulary) -> DomainPartition:
    seen, unseen = set(), set()
    for lineno, fields in _data_lines(path):
        if len(fields) != 3 or fields[0] not in ("seen", "unseen"):
            raise ValueError(f"{path}:{lineno}: expected 'seen|unseen<TAB>object1<TAB>object2'")
        pair = (vocab.index(fields[1]), vocab.index(fields[2]))
        (seen if fields[0] == "seen" else unseen).add(pair)
    return DomainPartition(frozenset(seen), frozenset(unseen))


@dataclass(frozen=True)
class CivicResources:
    objects: ObjectVocabulary
    predicates: PredicateVocabulary
    civic_triples: list[Triple] = field(default_factory=list)
    source_pairs: list[tuple[str, str]] = field(default_factory=list)


def resource_path(name: str) -> Path:
    return Path(str(resources.files("civicgraph") / "resources" / name))


def load_reference_resources() -> CivicResources:
    """The bundled 19-class / 32-predicate configuration, 130 civic triples
    and the reference source-domain pair vocabulary."""
    return CivicResources(
        objects=read_object_vocabulary(resource_path("objects.tsv")),
        predicates=read_predicate_vocabulary(resource_path("predicates.tsv")),
        civic_triples=read_triples(resource_path("civic_triples.tsv")),
        source_pairs=read_pairs(resource_path("source_pairs.tsv")),
    )
