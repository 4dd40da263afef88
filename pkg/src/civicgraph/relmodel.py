"""MotifNet-style relation head.

Object context, optional object decoder, edge context, pair representation
and predicate classification, computed in float64 with PyTorch.
Label one-hots live in the detector's label space (index 0 = background,
class ``k`` at index ``k + 1``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_sequence, pad_packed_sequence

from .checkpoint import CheckpointError, ModelCheckpoint
from .core import ScoredRelation, rank_relations
from .data import ImageRecord, RegionProposal

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class ContractError(RuntimeError):
    """An operation was called in a configuration that does not support it."""


@dataclass(frozen=True)
class RelationHeadConfig:
    num_classes: int
    num_predicates: int  # without background
    feature_dim: int
    embed_dim: int = 100
    object_hidden: int = 512
    edge_hidden: int = 512
    decoder_hidden: int = 512
    use_decoder: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RelationHeadConfig":
        return cls(**d)


@dataclass
class ContextualizedSequence:
    """Per-image contexts, in the record's original proposal order."""

    object_context: torch.Tensor  # (n, 2 * object_hidden)
    labels: torch.Tensor  # (n, C + 1) one-hot
    edge_context: torch.Tensor  # (n, 2 * edge_hidden)
    decoder_hidden: torch.Tensor | None = None
    decoder_logits: torch.Tensor | None = None

    @property
    def classes(self) -> torch.Tensor:
        """Class index per proposal, -1 where the label is background."""
        return self.labels.argmax(dim=1) - 1


def _uniform_(t: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 * bound - bound)


class RelationHead(nn.Module):
    def __init__(self, config: RelationHeadConfig, seed: int = 0):
        super().__init__()
        self.config = config
        C, P, F, E = config.num_classes, config.num_predicates, config.feature_dim, config.embed_dim
        H, He, Hd = config.object_hidden, config.edge_hidden, config.decoder_hidden
        kw = dict(dtype=DTYPE)
        self.W_1 = nn.Parameter(torch.empty(E, C + 1, **kw))
        self.object_context = nn.LSTM(F + E, H, batch_first=True, bidirectional=True, **kw)
        if config.use_decoder:
            self.decoder = nn.LSTMCell(2 * H + C + 1, Hd, **kw)
            self.W_o = nn.Parameter(torch.empty(C + 1, Hd, **kw))
        self.W_2 = nn.Parameter(torch.empty(E, C + 1, **kw))
        self.edge_context = nn.LSTM(2 * H + E, He, batch_first=True, bidirectional=True, **kw)
        self.W_h = nn.Parameter(torch.empty(F, 2 * He, **kw))
        self.W_t = nn.Parameter(torch.empty(F, 2 * He, **kw))
        self.W_r = nn.Parameter(torch.empty(P + 1, F, **kw))
        self.bias_table = nn.Parameter(torch.zeros(C, C, P + 1, **kw))
        self.register_buffer("bias_mask", torch.zeros(C, C, **kw))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name == "bias_table":
                continue
            fan_in = p.shape[-1] if p.dim() > 1 else p.shape[0]
            if ".weight_" in name or ".bias_" in name:  # recurrent weights
                hidden = (p.shape[0] // 4)
                _uniform_(p, 1.0 / math.sqrt(hidden), gen)
            else:
                _uniform_(p, 1.0 / math.sqrt(fan_in), gen)
        with torch.no_grad():
            self.bias_table.zero_()
            self.bias_mask.zero_()

    # -- checkpoints ---------------------------------------------------
    def checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint.from_module("relation_head", asdict(self.config), self)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "RelationHead":
        if ckpt.kind != "relation_head":
            raise CheckpointError(f"expected a relation_head checkpoint, got {ckpt.kind!r}")
        model = cls(RelationHeadConfig.from_dict(ckpt.config))
        ckpt.load_into(model)
        return model

    # -- encoding ------------------------------------------------------
    def _check_dims(self, feats: torch.Tensor, probs: torch.Tensor) -> None:
        c = self.config
        if feats.shape[-1] != c.feature_dim:
            raise ValueError(f"proposal feature dim {feats.shape[-1]} != model feature_dim {c.feature_dim}")
        if probs.shape[-1] != c.num_classes + 1:
            raise ValueError(f"label_probs dim {probs.shape[-1]} != num_classes + 1 = {c.num_classes + 1}")

    def _bilstm(self, lstm: nn.LSTM, seqs: list[torch.Tensor]) -> list[torch.Tensor]:
        packed = pack_sequence(seqs, enforce_sorted=False)
        out, _ = lstm(packed)
        padded, lengths = pad_packed_sequence(out, batch_first=True)
        return [padded[k, : int(lengths[k])] for k in range(len(seqs))]

    def encode_tensors(
        self,
        feats: list[torch.Tensor],
        probs: list[torch.Tensor],
        teacher: list[torch.Tensor] | None = None,
    ) -> list[ContextualizedSequence]:
        """Encode already-ordered proposal sequences (one tensor pair per image)."""
        for f, p in zip(feats, probs):
            self._check_dims(f, p)
        obj_in = [torch.cat([f, p @ self.W_1.T], dim=1) for f, p in zip(feats, probs)]
        ctx = self._bilstm(self.object_context, obj_in)
        hidden = logits = None
        if self.config.use_decoder:
            labels, hidden, logits = self._decode_batch(ctx, teacher)
        else:
            labels = [_onehot_detector(p) for p in probs]
        edge_in = [torch.cat([c, l @ self.W_2.T], dim=1) for c, l in zip(ctx, labels)]
        edge = self._bilstm(self.edge_context, edge_in)
        return [
            ContextualizedSequence(
                ctx[k], labels[k], edge[k],
                None if hidden is None else hidden[k], None if logits is None else logits[k],
            )
            for k in range(len(feats))
        ]

    def _decode_batch(self, ctx: list[torch.Tensor], teacher=None):
        C1 = self.config.num_classes + 1
        B = len(ctx)
        lengths = [c.shape[0] for c in ctx]
        T = max(lengths)
        Hd = self.config.decoder_hidden
        h = torch.zeros(B, Hd, dtype=DTYPE)
        cell = torch.zeros(B, Hd, dtype=DTYPE)
        prev = torch.zeros(B, C1, dtype=DTYPE)
        padded = torch.zeros(B, T, ctx[0].shape[1], dtype=DTYPE)
        for k, c in enumerate(ctx):
            padded[k, : lengths[k]] = c
        hs, ls, os_ = [], [], []
        for t in range(T):
            h, cell = self.decoder(torch.cat([padded[:, t], prev], dim=1), (h, cell))
            logit = h @ self.W_o.T
            lab = torch.zeros(B, C1, dtype=DTYPE)
            lab[torch.arange(B), _argmax_first(logit.detach())] = 1.0
            hs.append(h)
            os_.append(logit)
            ls.append(lab)
            feed = lab
            if teacher is not None:
                gold = torch.stack([
                    tch[t] if t < tch.shape[0] else torch.tensor(-1) for tch in teacher
                ])
                known = gold >= 0
                if bool(known.any()):
                    feed = lab.clone()
                    feed[known] = 0.0
                    feed[known, gold[known]] = 1.0
            prev = feed
        H_ = torch.stack(hs, dim=1)
        L_ = torch.stack(ls, dim=1)
        O_ = torch.stack(os_, dim=1)
        return (
            [L_[k, : lengths[k]] for k in range(B)],
            [H_[k, : lengths[k]] for k in range(B)],
            [O_[k, : lengths[k]] for k in range(B)],
        )

    def encode(self, images: Sequence[ImageRecord], teacher=None) -> list[ContextualizedSequence]:
        """Contexts for each image, returned in the record's proposal order."""
        orders = [proposal_order(img.proposals) for img in images]
        feats, probs = [], []
        for img, order in zip(images, orders):
            f, p = proposal_tensors(img.proposals)
            feats.append(f[order])
            probs.append(p[order])
        t_ord = None
        if teacher is not None:
            t_ord = [t[order] for t, order in zip(teacher, orders)]
        seqs = self.encode_tensors(feats, probs, t_ord)
        out = []
        for s, order in zip(seqs, orders):
            inv = torch.empty_like(order)
            inv[order] = torch.arange(order.numel())
            out.append(
                ContextualizedSequence(
                    s.object_context[inv], s.labels[inv], s.edge_context[inv],
                    None if s.decoder_hidden is None else s.decoder_hidden[inv],
                    None if s.decoder_logits is None else s.decoder_logits[inv],
                )
            )
        return out

    # -- pairs ---------------------------------------------------------
    def contextual_pair(self, d_i: torch.Tensor, d_j: torch.Tensor) -> torch.Tensor:
        """(W_h d_i) * (W_t d_j), the pair representation before visual features."""
        return (d_i @ self.W_h.T) * (d_j @ self.W_t.T)

    def pair_bias(self, subj: torch.Tensor, obj: torch.Tensor) -> torch.Tensor:
        valid = (subj >= 0) & (obj >= 0)
        s, o = subj.clamp(min=0), obj.clamp(min=0)
        w = self.bias_mask[s, o] * valid.to(DTYPE)
        return self.bias_table[s, o] * w[:, None]

    def pair_logits(self, d_i, d_j, f_ij, subj, obj) -> torch.Tensor:
        g = self.contextual_pair(d_i, d_j) * f_ij
        return g @ self.W_r.T + self.pair_bias(subj, obj)

    def image_pairs(self, image: ImageRecord, seq: ContextualizedSequence, pairs=None):
        """Stack the per-pair inputs for ``pairs`` (default: all ordered pairs)."""
        n = len(image.proposals)
        if pairs is None:
            pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        if not pairs:
            e = torch.zeros(0, dtype=torch.long)
            return pairs, seq.edge_context[e], seq.edge_context[e], torch.zeros(0, self.config.feature_dim, dtype=DTYPE), e, e
        ii = torch.tensor([p[0] for p in pairs])
        jj = torch.tensor([p[1] for p in pairs])
        f = torch.from_numpy(np.stack([image.union_feature(i, j) for i, j in pairs]))
        if f.shape[1] != self.config.feature_dim:
            raise ValueError(f"union feature dim {f.shape[1]} != model feature_dim {self.config.feature_dim}")
        cls = seq.classes
        return pairs, seq.edge_context[ii], seq.edge_context[jj], f, cls[ii], cls[jj]

    @torch.no_grad()
    def init_frequency_bias(self, images: Sequence[ImageRecord], smoothing: float = 1.0) -> None:
        """Initialise the pair bias from log empirical predicate frequencies.

        Every ordered detected-class pair that co-occurs in ``images`` enters
        the table; all other pairs keep a zero bias.
        """
        C, P1 = self.config.num_classes, self.config.num_predicates + 1
        counts = np.zeros((C, C, P1))
        for img in images:
            cls = [p.detected_class for p in img.proposals]
            gold = img.gold_pair_labels()
            n = len(cls)
            for i in range(n):
                for j in range(n):
                    if i != j:
                        counts[cls[i], cls[j], gold.get((i, j), 0)] += 1
        present = counts.sum(axis=2) > 0
        logp = np.log((counts + smoothing) / (counts.sum(axis=2, keepdims=True) + smoothing * P1))
        self.bias_table.copy_(torch.from_numpy(np.where(present[..., None], logp, 0.0)))
        self.bias_mask.copy_(torch.from_numpy(present.astype(np.float64)))


def _argmax_first(x: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax returning the lowest index among ties."""
    m = x.max(dim=-1, keepdim=True).values
    idx = torch.arange(x.shape[-1]).expand_as(x)
    return torch.where(x == m, idx, x.shape[-1]).min(dim=-1).values


def _onehot_detector(probs: torch.Tensor) -> torch.Tensor:
    out = torch.zeros_like(probs)
    out[torch.arange(probs.shape[0]), _argmax_first(probs[:, 1:]) + 1] = 1.0
    return out


def proposal_tensors(proposals: Sequence[RegionProposal]) -> tuple[torch.Tensor, torch.Tensor]:
    f = torch.from_numpy(np.stack([p.feature for p in proposals]))
    p = torch.from_numpy(np.stack([p.label_probs for p in proposals]))
    return f, p


def proposal_order(proposals: Sequence[RegionProposal]) -> torch.Tensor:
    """Sequence order: descending max class probability, then leftmost x, then index."""
    keys = [(-float(p.label_probs[1:].max()), p.box.x, k) for k, p in enumerate(proposals)]
    return torch.tensor([k for *_, k in sorted(keys)], dtype=torch.long)


# ---------------------------------------------------------------------------
# single-image operations

def object_context(proposals: Sequence[RegionProposal], model: RelationHead) -> torch.Tensor:
    """c_i for each proposal, in the given order."""
    if not proposals:
        raise ValueError("object_context needs at least one proposal")
    f, p = proposal_tensors(proposals)
    model._check_dims(f, p)
    return model._bilstm(model.object_context, [torch.cat([f, p @ model.W_1.T], dim=1)])[0]


def decode_labels(context: torch.Tensor, model: RelationHead) -> torch.Tensor:
    """Sequentially decoded one-hot labels; requires ``use_decoder``."""
    if not model.config.use_decoder:
        raise ContractError("decode_labels called on a model built without the object decoder")
    labels, _, _ = model._decode_batch([context])
    return labels[0]


def labels_without_decoder(proposals: Sequence[RegionProposal]) -> torch.Tensor:
    """One-hot of the detector's most probable non-background class."""
    _, p = proposal_tensors(proposals)
    return _onehot_detector(p)


def edge_context(context: torch.Tensor, labels: torch.Tensor, model: RelationHead) -> torch.Tensor:
    if context.shape[0] != labels.shape[0]:
        raise ValueError(f"{context.shape[0]} object contexts but {labels.shape[0]} labels")
    return model._bilstm(model.edge_context, [torch.cat([context, labels @ model.W_2.T], dim=1)])[0]


def pair_representation(d_i, d_j, f_ij, model: RelationHead) -> torch.Tensor:
    f_ij = torch.as_tensor(f_ij, dtype=DTYPE)
    if f_ij.shape[-1] != model.config.feature_dim:
        raise ValueError(f"union feature dim {f_ij.shape[-1]} != {model.config.feature_dim}")
    return model.contextual_pair(d_i, d_j) * f_ij


def predicate_distribution(g_ij, subject: int, obj: int, model: RelationHead) -> torch.Tensor:
    g = torch.as_tensor(g_ij, dtype=DTYPE).reshape(1, -1)
    logits = g @ model.W_r.T + model.pair_bias(torch.tensor([subject]), torch.tensor([obj]))
    return torch.softmax(logits, dim=-1)[0]


@dataclass
class ForwardResult:
    pairs: list[tuple[int, int]]
    distributions: torch.Tensor  # (n(n-1), P + 1)
    relations: list[ScoredRelation]  # non-background argmax pairs, ranked
    pair_scores: list[tuple[float, int, int, int, int]] = field(default_factory=list)

    def ranked_class_pairs(self, keep=None) -> list[tuple[int, int]]:
        """Distinct detected class pairs, by best non-background probability.

        ``keep(s, o)`` restricts the ranking to admissible pairs.
        """
        out, seen = [], set()
        for score, si, oi, s, o in sorted(self.pair_scores, key=lambda t: (-t[0], t[3], t[4], t[1], t[2])):
            if s < 0 or o < 0 or (s, o) in seen or (keep is not None and not keep(s, o)):
                continue
            seen.add((s, o))
            out.append((s, o))
        return out


@torch.no_grad()
def forward(image: ImageRecord, model: RelationHead, seq: ContextualizedSequence | None = None) -> ForwardResult:
    """Score every ordered proposal pair of one image."""
    n = len(image.proposals)
    if n < 2:
        return ForwardResult([], torch.zeros(0, model.config.num_predicates + 1, dtype=DTYPE), [], [])
    if seq is None:
        seq = model.encode([image])[0]
    pairs, di, dj, f, s, o = model.image_pairs(image, seq)
    dist = torch.softmax(model.pair_logits(di, dj, f, s, o), dim=-1)
    rels, scores = [], []
    best = dist[:, 1:].max(dim=1)
    for k, (i, j) in enumerate(pairs):
        si, oi = int(s[k]), int(o[k])
        p = int(best.indices[k]) + 1
        sc = float(best.values[k])
        scores.append((sc, i, j, si, oi))
        if si < 0 or oi < 0 or int(_argmax_first(dist[k : k + 1])[0]) == 0:
            continue
        rels.append(ScoredRelation(si, image.proposals[i].box, p, oi, image.proposals[j].box, sc))
    return ForwardResult(pairs, dist, rank_relations(rels), scores)


def forward_many(images: Sequence[ImageRecord], model: RelationHead, batch_size: int = 64) -> list[ForwardResult]:
    out = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = [im for im in images[start : start + batch_size]]
            enc = [im for im in chunk if len(im.proposals) >= 1]
            seqs = iter(model.encode(enc)) if enc else iter(())
            for im in chunk:
                seq = next(seqs) if len(im.proposals) >= 1 else None
                out.append(forward(im, model, seq) if seq is not None else forward(im, model))
    return out


# ---------------------------------------------------------------------------
# supervised pre-training

def training_pairs(image: ImageRecord, rng: np.random.Generator, neg_ratio: int = 3):
    """Gold pairs with their predicates plus up to ``neg_ratio`` background
    pairs per positive, sampled without replacement."""
    gold = image.gold_pair_labels()
    n = len(image.proposals)
    others = [(i, j) for i in range(n) for j in range(n) if i != j and (i, j) not in gold]
    k = min(len(others), neg_ratio * max(len(gold), 1))
    neg = [others[t] for t in sorted(rng.choice(len(others), size=k, replace=False))] if k else []
    pairs = sorted(gold) + neg
    labels = [gold[p] for p in sorted(gold)] + [0] * len(neg)
    return pairs, labels


def gold_proposal_classes(image: ImageRecord) -> torch.Tensor:
    """Gold class per proposal (label-space index), -1 when unannotated."""
    from .evaluation import iou

    out = torch.full((len(image.proposals),), -1, dtype=torch.long)
    for rel in image.gold_relations:
        for cls, box in ((rel.subject, rel.subject_box), (rel.object, rel.object_box)):
            vals = [iou(p.box, box) for p in image.proposals]
            k = int(np.argmax(vals))
            if vals[k] >= 0.5:
                out[k] = cls + 1
    return out


def relation_loss(model: RelationHead, batch: Sequence[tuple[ImageRecord, list, list]], reduction: str = "mean"):
    """Cross-entropy of the predicate distribution on explicit (pairs, labels).

    With the object decoder enabled the decoder's label cross-entropy on
    annotated proposals is added.
    """
    images = [b[0] for b in batch]
    teacher = [gold_proposal_classes(im) for im in images] if model.config.use_decoder else None
    seqs = model.encode(images, teacher)
    logits, targets = [], []
    dec_loss = torch.zeros((), dtype=DTYPE)
    for (img, pairs, labels), seq in zip(batch, seqs):
        if pairs:
            _, di, dj, f, s, o = model.image_pairs(img, seq, pairs)
            logits.append(model.pair_logits(di, dj, f, s, o))
            targets.extend(labels)
        if teacher is not None:
            gold = gold_proposal_classes(img)
            known = gold >= 0
            if bool(known.any()):
                dec_loss = dec_loss + nn.functional.cross_entropy(
                    seq.decoder_logits[known], gold[known], reduction="sum"
                )
    if not logits:
        raise ValueError("batch has no scorable pairs")
    lg = torch.cat(logits)
    tg = torch.tensor(targets, dtype=torch.long)
    loss = nn.functional.cross_entropy(lg, tg, reduction=reduction)
    if teacher is not None:
        loss = loss + (dec_loss / lg.shape[0] if reduction == "mean" else dec_loss)
    return loss


@dataclass
class PretrainResult:
    checkpoint: ModelCheckpoint
    epoch_losses: list[float]
    initial_loss: float | None = None


def pretrain(
    model: RelationHead,
    dataset: Sequence[ImageRecord],
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    neg_ratio: int = 3,
    seed: int = 0,
) -> PretrainResult:
    """Adam on the mean predicate cross-entropy over gold and sampled
    background pairs of the source domain."""
    if not any(img.gold_relations for img in dataset):
        raise ValueError("pretraining data has no gold relations")
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam([p for n, p in model.named_parameters()], lr=lr)
    usable = [im for im in dataset if len(im.proposals) >= 2]
    losses = []
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(usable))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = []
            for idx in order[start : start + batch_size]:
                img = usable[int(idx)]
                pairs, labels = training_pairs(img, rng, neg_ratio)
                batch.append((img, pairs, labels))
            opt.zero_grad()
            loss = relation_loss(model, batch)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        losses.append(total / max(count, 1))
        logger.info("pretrain epoch %d loss %.5f", epoch + 1, losses[-1])
    model.eval()
    return PretrainResult(model.checkpoint(), losses)
