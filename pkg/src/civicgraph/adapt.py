"""Adversarial alignment of unseen-pair representations, and the
predicate fine-tuning baseline.

The discriminator separates seen from unseen object pairs; the relation head
is updated with inverted labels so that unseen pairs are classified as seen.
Only ``W_h`` and ``W_t`` move during adaptation, only ``W_r`` and
``bias_table`` during fine-tuning.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import CheckpointError, ModelCheckpoint
from .core import SEEN, UNSEEN, DomainPartition
from .data import ImageRecord
from .relmodel import DTYPE, RelationHead

logger = logging.getLogger(__name__)

VARIANTS = ("concatenated", "g_only")
ADAPTED_TENSORS = frozenset({"W_h", "W_t"})
FINETUNED_TENSORS = frozenset({"W_r", "bias_table"})


@dataclass(frozen=True)
class AdaptConfig:
    N_m: int = 50
    N_d: int = 150
    epochs: int = 12
    disc_lr: float = 1.2e-2
    model_lr: float = 1.2e-3
    input_variant: str = "concatenated"
    batch_size: int = 64
    probe_size: int = 512
    anchor_seen: bool = True

    def __post_init__(self):
        if not self.N_m < self.N_d:
            raise ValueError(f"the discriminator must be updated more often (N_m={self.N_m}, N_d={self.N_d})")
        if self.N_m <= 0 or self.disc_lr <= 0 or self.model_lr <= 0:
            raise ValueError("step counts and learning rates must be positive")
        if self.input_variant not in VARIANTS:
            raise ValueError(f"unknown discriminator input variant {self.input_variant!r}")


class Discriminator(nn.Module):
    """Two hidden layers (affine, batch norm, leaky ReLU 0.2, dropout), then a
    2-way softmax over (seen, unseen)."""

    def __init__(self, in_dim: int, hidden: int = 4096, keep_prob: float = 0.5, seed: int = 0):
        super().__init__()
        self.in_dim, self.hidden, self.keep_prob = in_dim, hidden, keep_prob
        self.hidden1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.bn1 = nn.BatchNorm1d(hidden, dtype=DTYPE)
        self.hidden2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.bn2 = nn.BatchNorm1d(hidden, dtype=DTYPE)
        self.W_d = nn.Parameter(torch.empty(2, hidden, dtype=DTYPE))
        self.b_d = nn.Parameter(torch.zeros(2, dtype=DTYPE))
        self.act = nn.LeakyReLU(0.2)
        self.drop = nn.Dropout(1.0 - keep_prob)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in (self.hidden1, self.hidden2):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                lin.bias.copy_(torch.rand(lin.bias.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
            bound = 1.0 / math.sqrt(hidden)
            self.W_d.copy_(torch.rand(self.W_d.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"discriminator input dim {x.shape[-1]} != {self.in_dim}")
        h = self.drop(self.act(self.bn1(self.hidden1(x))))
        return self.drop(self.act(self.bn2(self.hidden2(h))))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x) @ self.W_d.T + self.b_d

    def log_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.logits(x), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=-1)

    def checkpoint(self) -> ModelCheckpoint:
        cfg = {"in_dim": self.in_dim, "hidden": self.hidden, "keep_prob": self.keep_prob}
        return ModelCheckpoint.from_module("discriminator", cfg, self)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "Discriminator":
        if ckpt.kind != "discriminator":
            raise CheckpointError(f"expected a discriminator checkpoint, got {ckpt.kind!r}")
        disc = cls(**ckpt.config)
        ckpt.load_into(disc)
        return disc


def discriminator_input(g_ij, d_i, d_j, model: RelationHead, variant: str = "concatenated") -> torch.Tensor:
    """``[g; (W_h d_i)*(W_t d_j)]`` (2F) or ``g`` alone (F)."""
    if variant == "concatenated":
        return torch.cat([g_ij, model.contextual_pair(d_i, d_j)], dim=-1)
    if variant == "g_only":
        return g_ij
    raise ValueError(f"unknown discriminator input variant {variant!r}")


def discriminator_input_dim(feature_dim: int, variant: str) -> int:
    if variant not in VARIANTS:
        raise ValueError(f"unknown discriminator input variant {variant!r}")
    return 2 * feature_dim if variant == "concatenated" else feature_dim


def discriminator_forward(x: torch.Tensor, disc: Discriminator, mode: str = "eval") -> torch.Tensor:
    """(seen, unseen) probabilities; ``mode`` is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    disc.train(mode == "train")
    squeeze = x.dim() == 1
    out = disc(x.reshape(1, -1) if squeeze else x)
    return out[0] if squeeze else out


def discriminator_loss(log_probs: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """``-sum log C_d(true label)`` over the batch (or its mean)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        raise ValueError("empty discriminator batch")
    nll = -log_probs.gather(1, labels.reshape(-1, 1)).squeeze(1)
    return nll.sum() if reduction == "sum" else nll.mean()


def adversarial_model_loss(log_probs: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Inverted-label loss over unseen pairs: ``-sum log C_d(seen | y)``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        raise ValueError("empty adversarial batch")
    if bool((labels != UNSEEN).any()):
        raise ValueError("adversarial model loss takes unseen pairs only")
    return discriminator_loss(log_probs, torch.full_like(labels, SEEN), reduction)


# ---------------------------------------------------------------------------
# pair pools

@dataclass
class PairPool:
    """Frozen edge contexts and union features of labelled pairs."""

    d_i: torch.Tensor
    d_j: torch.Tensor
    f_ij: torch.Tensor
    labels: torch.Tensor  # SEEN / UNSEEN
    class_pairs: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return self.labels.numel()

    def subset(self, idx) -> "PairPool":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PairPool(self.d_i[idx], self.d_j[idx], self.f_ij[idx], self.labels[idx],
                        [self.class_pairs[int(k)] for k in idx])

    def inputs(self, model: RelationHead, variant: str, anchor=None) -> torch.Tensor:
        """Discriminator inputs; with ``anchor = (W_h, W_t)`` seen pairs are
        projected by those fixed weights instead of the model's."""
        ctx = model.contextual_pair(self.d_i, self.d_j)
        if anchor is not None:
            fixed = (self.d_i @ anchor[0].T) * (self.d_j @ anchor[1].T)
            ctx = torch.where((self.labels == SEEN)[:, None], fixed, ctx)
        g = ctx * self.f_ij
        return torch.cat([g, ctx], dim=1) if variant == "concatenated" else g


@torch.no_grad()
def build_pair_pool(model: RelationHead, images: Sequence[ImageRecord], partition: DomainPartition,
                    batch_size: int = 64) -> PairPool:
    """All ordered proposal pairs whose predicted class pair is seen or unseen.
    Pairs in neither set are left out."""
    model.eval()
    di, dj, fs, labels, cps = [], [], [], [], []
    usable = [im for im in images if len(im.proposals) >= 2]
    for start in range(0, len(usable), batch_size):
        chunk = usable[start : start + batch_size]
        for img, seq in zip(chunk, model.encode(chunk)):
            pairs, a, b, f, s, o = model.image_pairs(img, seq)
            for k in range(len(pairs)):
                lab = partition.label((int(s[k]), int(o[k])))
                if lab is None:
                    continue
                di.append(a[k])
                dj.append(b[k])
                fs.append(f[k])
                labels.append(lab)
                cps.append((int(s[k]), int(o[k])))
    if not labels:
        e = torch.zeros(0, model.config.feature_dim, dtype=DTYPE)
        h = torch.zeros(0, 2 * model.config.edge_hidden, dtype=DTYPE)
        return PairPool(h, h, e, torch.zeros(0, dtype=torch.long), [])
    return PairPool(torch.stack(di), torch.stack(dj), torch.stack(fs), torch.tensor(labels), cps)


class _Stream:
    """Endless shuffled index stream over a fixed index set."""

    def __init__(self, idx: np.ndarray, rng: np.random.Generator):
        self.idx, self.rng = np.asarray(idx), rng
        self.buf, self.pos = self.rng.permutation(self.idx), 0

    def take(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self.pos >= len(self.buf):
                self.buf, self.pos = self.rng.permutation(self.idx), 0
            chunk = self.buf[self.pos : self.pos + n]
            out.append(chunk)
            self.pos += len(chunk)
            n -= len(chunk)
        return np.concatenate(out)


def freeze_for_adaptation(model: RelationHead) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(name in ADAPTED_TENSORS)


def freeze_for_finetuning(model: RelationHead) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(name in FINETUNED_TENSORS)


def unfreeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(True)


@torch.no_grad()
def probe_accuracy(model: RelationHead, disc: Discriminator, probe: PairPool, variant: str, anchor=None) -> float:
    if len(probe) == 0:
        return float("nan")
    was = disc.training
    disc.eval()
    pred = disc.logits(probe.inputs(model, variant, anchor)).argmax(dim=1)
    disc.train(was)
    return float((pred == probe.labels).to(DTYPE).mean())


def balanced_probe(pool: PairPool, size: int, rng: np.random.Generator) -> PairPool:
    seen = np.flatnonzero(pool.labels.numpy() == SEEN)
    unseen = np.flatnonzero(pool.labels.numpy() == UNSEEN)
    half = min(size // 2, len(seen), len(unseen))
    idx = np.concatenate([rng.choice(seen, half, replace=False), rng.choice(unseen, half, replace=False)])
    return pool.subset(np.sort(idx))


@dataclass
class AdaptResult:
    checkpoint: ModelCheckpoint
    discriminator: ModelCheckpoint
    log: list[dict]
    timing: list[dict] = field(default_factory=list)

    def accuracy_after_first_disc_block(self) -> float:
        disc = [r for r in self.log if r["phase"] == "disc"]
        first_model = next((r["step"] for r in self.log if r["phase"] == "model"), None)
        block = [r for r in disc if first_model is None or r["step"] < first_model]
        return block[-1]["disc_accuracy"]

    def final_accuracy(self) -> float:
        return self.log[-1]["disc_accuracy"]


def adversarial_train(
    model: RelationHead,
    disc: Discriminator,
    target: Sequence[ImageRecord],
    partition: DomainPartition,
    config: AdaptConfig = AdaptConfig(),
    probe: Sequence[ImageRecord] | None = None,
    seed: int = 0,
    on_epoch=None,
) -> AdaptResult:
    """Alternate N_d discriminator steps and N_m model steps for ``epochs``
    rounds, discriminator first.

    One epoch is one full (N_d + N_m) round. Discriminator batches are half
    seen, half unseen pairs; model batches are unseen pairs only. The
    accuracy logged at each step is the current discriminator's (eval mode)
    on a balanced probe set drawn from ``probe`` images, or from the
    training pool when no probe images are given. ``on_epoch(epoch, model,
    disc)`` is called after every round.
    """
    if not partition.unseen_pairs:
        raise ValueError("empty unseen partition: nothing to adapt")
    if not partition.seen_pairs:
        raise ValueError("empty seen partition")
    rng = np.random.default_rng(seed)
    ss = np.random.SeedSequence(seed).spawn(3)
    torch_gen_seed = int(ss[2].generate_state(1)[0])
    pool = build_pair_pool(model, target, partition)
    seen_idx = np.flatnonzero(pool.labels.numpy() == SEEN)
    unseen_idx = np.flatnonzero(pool.labels.numpy() == UNSEEN)
    if len(unseen_idx) == 0 or len(seen_idx) == 0:
        raise ValueError("target images contain no pairs from one side of the partition")
    probe_pool = build_pair_pool(model, probe, partition) if probe is not None else pool
    probe_set = balanced_probe(probe_pool, config.probe_size, np.random.default_rng(ss[0]))

    variant = config.input_variant
    anchor = (model.W_h.detach().clone(), model.W_t.detach().clone()) if config.anchor_seen else None
    freeze_for_adaptation(model)
    model_params = [model.W_h, model.W_t]
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.disc_lr)
    opt_m = torch.optim.Adam(model_params, lr=config.model_lr)
    seen_stream = _Stream(seen_idx, np.random.default_rng(ss[1]))
    unseen_stream = _Stream(unseen_idx, rng)
    half = max(config.batch_size // 2, 1)

    log, timing = [], []
    step = 0
    t0 = time.perf_counter()
    torch.manual_seed(torch_gen_seed)  # dropout masks
    try:
        for epoch in range(config.epochs):
            # discriminator block, model frozen
            disc.train()
            unfreeze(disc)
            for _ in range(config.N_d):
                idx = np.concatenate([seen_stream.take(half), unseen_stream.take(half)])
                batch = pool.subset(idx)
                with torch.no_grad():
                    x = batch.inputs(model, variant, anchor)
                lp = disc.log_probs(x)
                opt_d.zero_grad()
                discriminator_loss(lp, batch.labels, "mean").backward()
                opt_d.step()
                l_sum = float(discriminator_loss(lp.detach(), batch.labels, "sum"))
                log.append({"step": step, "epoch": epoch, "phase": "disc", "loss": l_sum,
                            "disc_accuracy": probe_accuracy(model, disc, probe_set, variant, anchor)})
                step += 1
            # model block, discriminator frozen in eval mode
            disc.eval()
            for p in disc.parameters():
                p.requires_grad_(False)
            for _ in range(config.N_m):
                batch = pool.subset(unseen_stream.take(config.batch_size))
                lp = disc.log_probs(batch.inputs(model, variant))
                opt_m.zero_grad()
                adversarial_model_loss(lp, batch.labels, "mean").backward()
                opt_m.step()
                l_sum = float(adversarial_model_loss(lp.detach(), batch.labels, "sum"))
                log.append({"step": step, "epoch": epoch, "phase": "model", "loss": l_sum,
                            "disc_accuracy": probe_accuracy(model, disc, probe_set, variant, anchor)})
                step += 1
            timing.append({"epoch": epoch, "wall_time": time.perf_counter() - t0})
            logger.info("adapt epoch %d: disc acc %.3f", epoch + 1, log[-1]["disc_accuracy"])
            if on_epoch is not None:
                on_epoch(epoch, model, disc)
    finally:
        unfreeze(model)
        unfreeze(disc)
    model.eval()
    disc.eval()
    return AdaptResult(model.checkpoint(), disc.checkpoint(), log, timing)


# ---------------------------------------------------------------------------
# fine-tuning baseline

def finetune_pairs(images: Sequence[ImageRecord], civic_triples) -> list[tuple[ImageRecord, list, list]]:
    """Per image, the gold-matched proposal pairs whose gold triple is civic."""
    allowed = {tuple(t) for t in civic_triples}
    out = []
    for img in images:
        pairs, labels = [], []
        for (i, j), rel in sorted(img.gold_pair_relations().items()):
            if rel.triple in allowed:
                pairs.append((i, j))
                labels.append(rel.predicate)
        if pairs:
            out.append((img, pairs, labels))
    return out


def finetune_loss(model: RelationHead, batch, seqs=None, reduction: str = "sum") -> torch.Tensor:
    """``-sum log P(p | pair)`` over pairs whose gold triple is civic."""
    if seqs is None:
        seqs = model.encode([b[0] for b in batch])
    logits, targets = [], []
    for (img, pairs, labels), seq in zip(batch, seqs):
        _, di, dj, f, s, o = model.image_pairs(img, seq, pairs)
        logits.append(model.pair_logits(di, dj, f, s, o))
        targets.extend(labels)
    lg = torch.cat(logits)
    return nn.functional.cross_entropy(lg, torch.tensor(targets, dtype=torch.long), reduction=reduction)


@dataclass
class FinetuneResult:
    checkpoint: ModelCheckpoint
    epoch_losses: list[float]


def finetune_predicates(
    model: RelationHead,
    civic_dataset: Sequence[ImageRecord],
    civic_triples,
    epochs: int = 6,
    lr: float = 1.2e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> FinetuneResult:
    """Update only ``W_r`` and ``bias_table`` on civic-triple pairs."""
    civic_triples = [tuple(t) for t in civic_triples]
    if not civic_triples:
        raise ValueError("empty civic relation set")
    data = finetune_pairs(civic_dataset, civic_triples)
    if not data:
        raise ValueError("no image carries a gold relation from the civic relation set")
    rng = np.random.default_rng(seed)
    model.eval()
    with torch.no_grad():
        seqs = model.encode([d[0] for d in data])
    freeze_for_finetuning(model)
    opt = torch.optim.Adam([model.W_r, model.bias_table], lr=lr)
    losses = []
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(data))
            total = 0.0
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                batch = [data[int(k)] for k in idx]
                loss_sum = finetune_loss(model, batch, [seqs[int(k)] for k in idx], "sum")
                n = sum(len(b[1]) for b in batch)
                opt.zero_grad()
                (loss_sum / n).backward()
                opt.step()
                total += float(loss_sum.detach())
            losses.append(total)
            logger.info("finetune epoch %d L_f %.4f", epoch + 1, total)
    finally:
        unfreeze(model)
    return FinetuneResult(model.checkpoint(), losses)


# ---------------------------------------------------------------------------
# representation shift

@torch.no_grad()
def _contextual_reps(model: RelationHead, pool: PairPool) -> torch.Tensor:
    return model.contextual_pair(pool.d_i, pool.d_j)


def representation_shift_report(
    before: ModelCheckpoint, after: ModelCheckpoint, target: Sequence[ImageRecord], partition: DomainPartition
) -> dict:
    """Seen/unseen centroid distance of ``(W_h d_i)*(W_t d_j)`` under each
    checkpoint, and the mean displacement per class pair.

    ``anchored_distance_after`` compares unseen pairs under ``after`` with
    seen pairs under ``before``, the target the anchored discriminator sees.
    """
    if not partition.seen_pairs or not partition.unseen_pairs:
        raise ValueError("representation shift needs both seen and unseen pairs")
    m0 = RelationHead.from_checkpoint(before)
    m1 = RelationHead.from_checkpoint(after)
    if before.config != after.config:
        raise CheckpointError("checkpoints do not share an architecture")
    pool0 = build_pair_pool(m0, target, partition)
    pool1 = build_pair_pool(m1, target, partition)
    if len(pool0) == 0:
        raise ValueError("no labelled pairs in the target images")
    out = {}
    reps, centroids = {}, {}
    for name, m, pool in (("before", m0, pool0), ("after", m1, pool1)):
        r = _contextual_reps(m, pool)
        reps[name] = r
        seen = r[pool.labels == SEEN]
        unseen = r[pool.labels == UNSEEN]
        if len(seen) == 0 or len(unseen) == 0:
            raise ValueError("target images lack seen or unseen pairs")
        centroids[name] = (seen.mean(0), unseen.mean(0))
        out[f"centroid_distance_{name}"] = float(torch.linalg.norm(seen.mean(0) - unseen.mean(0)))
    out["anchored_distance_after"] = float(torch.linalg.norm(centroids["before"][0] - centroids["after"][1]))
    disp = {}
    if pool0.class_pairs == pool1.class_pairs:
        delta = torch.linalg.norm(reps["after"] - reps["before"], dim=1)
        acc: dict[tuple[int, int], list[float]] = {}
        for cp, v in zip(pool0.class_pairs, delta.tolist()):
            acc.setdefault(cp, []).append(v)
        disp = {f"{a},{b}": float(np.mean(v)) for (a, b), v in sorted(acc.items())}
    out["mean_displacement"] = disp
    return out
