"""Command-line driver: synth, pretrain, adapt, finetune, eval, generate.

Every command reads a flat JSON config (unknown keys are rejected), writes
its outputs atomically into ``out_dir`` and echoes the fully resolved config
next to them as ``<command>.config.json``.

Exit status: 0 success, 1 unexpected failure, 2 invalid config or usage,
3 missing input file, 4 checkpoint/architecture mismatch, 5 invalid data.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import adapt as adapt_mod
from .checkpoint import CheckpointError, ModelCheckpoint
from .core import (
    ObjectVocabulary,
    PredicateVocabulary,
    VocabularyError,
    partition_triples,
    read_object_vocabulary,
    read_pairs,
    read_predicate_vocabulary,
    read_triples,
    write_object_vocabulary,
    write_pairs,
    write_partition,
    write_predicate_vocabulary,
    write_triples,
)
from .data import (
    RecordFormatError,
    SyntheticDomainConfig,
    TargetShift,
    atomic_write_text,
    generate_synthetic_domains,
    load_image_records,
    records_digest,
    save_image_records,
    train_test_split,
    write_manifest,
)
from .evaluation import cg_generate, cgcls_eval, cggen_eval, opcls_eval
from .relmodel import ContractError, RelationHead, RelationHeadConfig, pretrain

logger = logging.getLogger("civicgraph")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_CHECKPOINT, EXIT_DATA = 0, 1, 2, 3, 4, 5

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "run",
    "data_dir": "",  # empty: same as out_dir
    "objects_path": "",
    "predicates_path": "",
    "civic_triples_path": "",
    "source_pairs_path": "",
    # synthetic benchmark
    "synth_num_source_images": 600,
    "synth_num_target_images": 600,
    "synth_num_essential": 4,
    "synth_num_context": 5,
    "synth_num_new": 3,
    "synth_num_predicates": 6,
    "synth_feature_dim": 64,
    "synth_decoys_per_image": [1, 2],
    "synth_target_decoys_per_image": [0, 0],
    "synth_distractors_per_image": [1, 3],
    "synth_shift_mix": 0.8,
    "synth_shift_scale": 1.0,
    "synth_shift_offset": 1.5,
    "train_fraction": 0.9,
    # relation head
    "embed_dim": 16,
    "object_hidden": 32,
    "edge_hidden": 32,
    "decoder_hidden": 32,
    "use_decoder": False,
    "pretrain_epochs": 8,
    "pretrain_lr": 3e-3,
    "pretrain_batch_size": 16,
    "neg_ratio": 3,
    # adversarial adaptation
    "N_m": 50,
    "N_d": 150,
    "adapt_epochs": 12,
    "disc_lr": 1.2e-2,
    "model_lr": 1.2e-3,
    "input_variant": "concatenated",
    "disc_hidden": 0,  # 0: same as the feature dimension
    "adapt_batch_size": 64,
    "probe_size": 512,
    "anchor_seen": True,
    # fine-tuning
    "finetune_epochs": 6,
    "finetune_lr": 1.2e-3,
    "finetune_batch_size": 16,
    # evaluation
    "iou_threshold": 0.5,
    "cg_top_k": 5,
}

TABLE_ROWS = (
    ("base", "pretrained_dec"),
    ("adv", "adapted_dec"),
    ("wd", "pretrained"),
    ("wd+adv", "adapted"),
    ("wd+fine", "pretrained_fine"),
    ("wd+adv+fine", "adapted_fine"),
)


class ConfigError(ValueError):
    pass


def bundled_config_path() -> Path:
    from .core import resource_path

    return resource_path("synthetic.json")


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and len(value) == len(default) and all(isinstance(v, int) for v in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
    return value


def resolve_config(overrides: dict | None = None) -> dict:
    """Defaults updated with ``overrides``; unknown keys and wrong types raise."""
    cfg = dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _check_type(key, value, DEFAULTS[key])
    if cfg["input_variant"] not in adapt_mod.VARIANTS:
        raise ConfigError(f"input_variant must be one of {adapt_mod.VARIANTS}")
    if not 0 < cfg["train_fraction"] < 1:
        raise ConfigError("train_fraction must be in (0, 1)")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return resolve_config(raw)


def component_seeds(seed: int) -> dict[str, int]:
    """One named stream per component, forked from the run seed."""
    names = ("data", "init", "pretrain", "discriminator", "adapt", "finetune")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


# ---------------------------------------------------------------------------
# run layout

class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out_dir"])
        self.data = Path(cfg["data_dir"] or cfg["out_dir"])
        self.seeds = component_seeds(cfg["seed"])

    def echo_config(self, command: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out / f"{command}.config.json", _json(self.cfg))

    def _path(self, key: str, name: str) -> Path:
        return Path(self.cfg[key]) if self.cfg[key] else self.data / name

    def vocabularies(self) -> tuple[ObjectVocabulary, PredicateVocabulary]:
        return (
            read_object_vocabulary(self._path("objects_path", "objects.tsv")),
            read_predicate_vocabulary(self._path("predicates_path", "predicates.tsv")),
        )

    def partition(self, objects, predicates):
        triples = read_triples(self._path("civic_triples_path", "civic_triples.tsv"))
        pairs = read_pairs(self._path("source_pairs_path", "source_pairs.tsv"))
        return triples, partition_triples(triples, pairs, objects, predicates)

    def records(self, split: str):
        return load_image_records(self.data / f"{split}.jsonl")

    def target_splits(self):
        test = self.data / "target_test.jsonl"
        if test.exists():
            return self.records("target_train"), self.records("target_test")
        return train_test_split(self.records("target"), self.cfg["train_fraction"])

    def checkpoint(self, path) -> ModelCheckpoint:
        return ModelCheckpoint.load(path)


def _model_config(cfg, objects, predicates, feature_dim) -> RelationHeadConfig:
    return RelationHeadConfig(
        num_classes=len(objects),
        num_predicates=predicates.num_relations,
        feature_dim=feature_dim,
        embed_dim=cfg["embed_dim"],
        object_hidden=cfg["object_hidden"],
        edge_hidden=cfg["edge_hidden"],
        decoder_hidden=cfg["decoder_hidden"],
        use_decoder=cfg["use_decoder"],
    )


def _suffix(ckpt: ModelCheckpoint) -> str:
    return "_dec" if ckpt.config.get("use_decoder") else ""


# ---------------------------------------------------------------------------
# commands

def cmd_synth(run: Run, args) -> None:
    c = run.cfg
    sc = SyntheticDomainConfig(
        seed=run.seeds["data"],
        num_source_images=c["synth_num_source_images"],
        num_target_images=c["synth_num_target_images"],
        num_essential=c["synth_num_essential"],
        num_context=c["synth_num_context"],
        num_new=c["synth_num_new"],
        num_predicates=c["synth_num_predicates"],
        feature_dim=c["synth_feature_dim"],
        decoys_per_image=tuple(c["synth_decoys_per_image"]),
        target_decoys_per_image=tuple(c["synth_target_decoys_per_image"]),
        distractors_per_image=tuple(c["synth_distractors_per_image"]),
        target_shift=TargetShift(c["synth_shift_mix"], c["synth_shift_scale"], c["synth_shift_offset"]),
    )
    dom = generate_synthetic_domains(sc)
    out = run.data
    out.mkdir(parents=True, exist_ok=True)
    train, test = train_test_split(dom.target, c["train_fraction"])
    splits = {"source": dom.source, "target_train": train, "target_test": test}
    for name, recs in splits.items():
        save_image_records(out / f"{name}.jsonl", recs)
    write_object_vocabulary(out / "objects.tsv", dom.objects)
    write_predicate_vocabulary(out / "predicates.tsv", dom.predicates)
    write_triples(out / "civic_triples.tsv", dom.civic_triples)
    write_pairs(out / "source_pairs.tsv", dom.source_pairs)
    write_partition(out / "partition.tsv", dom.partition, dom.objects)
    write_manifest(
        out / "manifest.json",
        {k: f"{k}.jsonl" for k in splits},
        {"digests": {k: records_digest(v) for k, v in splits.items()}, "synthetic_config": sc.to_dict()},
    )
    run.echo_config("synth")
    print(f"synth: {len(dom.source)} source / {len(train)}+{len(test)} target images -> {out}")


def cmd_pretrain(run: Run, args) -> None:
    objects, predicates = run.vocabularies()
    source = run.records("source")
    if not source:
        raise ValueError("empty source dataset")
    mc = _model_config(run.cfg, objects, predicates, source[0].feature_dim)
    model = RelationHead(mc, seed=run.seeds["init"])
    model.init_frequency_bias(source)
    res = pretrain(
        model, source, run.cfg["pretrain_epochs"], lr=run.cfg["pretrain_lr"],
        batch_size=run.cfg["pretrain_batch_size"], neg_ratio=run.cfg["neg_ratio"], seed=run.seeds["pretrain"],
    )
    name = "pretrained" + _suffix(res.checkpoint)
    res.checkpoint.save(run.out / name)
    atomic_write_text(run.out / f"{name}.log.json", _json({"epoch_losses": res.epoch_losses}))
    run.echo_config("pretrain")
    print(f"pretrain: final loss {res.epoch_losses[-1]:.4f} -> {run.out / name}" if res.epoch_losses else
          f"pretrain: 0 epochs -> {run.out / name}")


def _adapt_config(cfg) -> adapt_mod.AdaptConfig:
    try:
        return adapt_mod.AdaptConfig(
            N_m=cfg["N_m"], N_d=cfg["N_d"], epochs=cfg["adapt_epochs"], disc_lr=cfg["disc_lr"],
            model_lr=cfg["model_lr"], input_variant=cfg["input_variant"], batch_size=cfg["adapt_batch_size"],
            probe_size=cfg["probe_size"], anchor_seen=cfg["anchor_seen"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_adapt(run: Run, args) -> None:
    ac = _adapt_config(run.cfg)
    src = args.checkpoint or run.out / "pretrained"
    before = run.checkpoint(src)
    model = RelationHead.from_checkpoint(before)
    objects, predicates = run.vocabularies()
    _, partition = run.partition(objects, predicates)
    train, test = run.target_splits()
    F = model.config.feature_dim
    disc = adapt_mod.Discriminator(
        adapt_mod.discriminator_input_dim(F, ac.input_variant),
        hidden=run.cfg["disc_hidden"] or F,
        seed=run.seeds["discriminator"],
    )
    res = adapt_mod.adversarial_train(model, disc, train, partition, ac, probe=test, seed=run.seeds["adapt"])
    name = "adapted" + _suffix(before)
    res.checkpoint.save(run.out / name)
    res.discriminator.save(run.out / f"{name}.discriminator")
    atomic_write_text(run.out / f"{name}.log.jsonl", _jsonl(res.log))
    atomic_write_text(run.out / f"{name}.timing.jsonl", _jsonl(res.timing))
    shift = adapt_mod.representation_shift_report(before, res.checkpoint, test, partition)
    atomic_write_text(run.out / f"{name}.shift.json", _json(shift))
    run.echo_config("adapt")
    print(
        f"adapt: disc accuracy {res.accuracy_after_first_disc_block():.3f} -> {res.final_accuracy():.3f}; "
        f"centroid distance {shift['centroid_distance_before']:.3f} -> {shift['centroid_distance_after']:.3f} "
        f"-> {run.out / name}"
    )


def cmd_finetune(run: Run, args) -> None:
    src = Path(args.checkpoint or run.out / "pretrained")
    model = RelationHead.from_checkpoint(run.checkpoint(src))
    objects, predicates = run.vocabularies()
    _, partition = run.partition(objects, predicates)
    train, _ = run.target_splits()
    res = adapt_mod.finetune_predicates(
        model, train, partition.triples, epochs=run.cfg["finetune_epochs"], lr=run.cfg["finetune_lr"],
        batch_size=run.cfg["finetune_batch_size"], seed=run.seeds["finetune"],
    )
    name = f"{src.name}_fine"
    res.checkpoint.save(run.out / name)
    atomic_write_text(run.out / f"{name}.log.json", _json({"epoch_losses": res.epoch_losses}))
    run.echo_config("finetune")
    print(f"finetune: -> {run.out / name}")


def evaluate_checkpoint(ckpt: ModelCheckpoint, test, partition, objects, cfg) -> dict:
    model = RelationHead.from_checkpoint(ckpt)
    k = cfg["cg_top_k"]
    ks = tuple(sorted({1, 3, 5, k}))
    return {
        "checkpoint_digest": ckpt.digest(),
        "opcls": opcls_eval(model, test, partition, vocab=objects).to_dict(),
        "cgcls": cgcls_eval(model, test, objects, ks=ks).to_dict(),
        "cggen": cggen_eval(model, test, objects, cfg["iou_threshold"], ks=ks).to_dict(),
    }


def _summary_row(rep: dict) -> dict:
    op = rep["opcls"]
    row = {"all": op["recall"]}
    for sub in ("seen", "unseen"):
        if sub in op["subsets"]:
            row[sub] = op["subsets"][sub]["recall"]
    return row


def cmd_eval(run: Run, args) -> None:
    objects, predicates = run.vocabularies()
    _, partition = run.partition(objects, predicates)
    _, test = run.target_splits()
    if args.checkpoint:
        path = Path(args.checkpoint)
        rep = evaluate_checkpoint(run.checkpoint(path), test, partition, objects, run.cfg)
        out = run.out / f"eval.{path.name}.json"
        atomic_write_text(out, _json(rep))
        row = _summary_row(rep)
        print(f"eval {path.name}: OPCls R@1 all {row['all']['R@1']:.3f} unseen {row['unseen']['R@1']:.3f} -> {out}")
    else:
        table = {}
        for row_name, ck_name in TABLE_ROWS:
            path = run.out / ck_name
            if not (path / "manifest.json").is_file():
                continue
            rep = evaluate_checkpoint(run.checkpoint(path), test, partition, objects, run.cfg)
            atomic_write_text(run.out / f"eval.{ck_name}.json", _json(rep))
            table[row_name] = {"checkpoint": ck_name, **_summary_row(rep)}
        if not table:
            raise FileNotFoundError(f"no checkpoints to evaluate under {run.out}")
        atomic_write_text(run.out / "table.json", _json({"rows": [r for r, _ in TABLE_ROWS if r in table], "table": table}))
        for r, _ in TABLE_ROWS:
            if r in table:
                rec = table[r]
                print(f"{r:<12} " + " ".join(f"R@{k}={rec['all'][f'R@{k}']:.3f}" for k in (1, 5, 10, 20))
                      + f"  unseen R@1={rec['unseen']['R@1']:.3f}")
    run.echo_config("eval")


def cmd_generate(run: Run, args) -> None:
    if not args.checkpoint:
        raise ConfigError("generate needs --checkpoint")
    if not args.images:
        raise ConfigError("generate needs --images")
    objects, predicates = run.vocabularies()
    model = RelationHead.from_checkpoint(run.checkpoint(args.checkpoint))
    images = load_image_records(args.images)
    rows = []
    for im in images:
        graph = cg_generate(model, im, objects, run.cfg["cg_top_k"]) if len(im.proposals) >= 2 else []
        rows.append({
            "image_id": im.image_id,
            "relations": [
                {
                    "subject": objects.classes[r.subject],
                    "predicate": predicates.predicates[r.predicate],
                    "object": objects.classes[r.object],
                    "score": r.score,
                    "subject_box": list(r.subject_box.as_tuple()),
                    "object_box": list(r.object_box.as_tuple()),
                }
                for r in graph
            ],
        })
    run.out.mkdir(parents=True, exist_ok=True)
    out = run.out / f"{Path(args.images).stem}.graphs.jsonl"
    atomic_write_text(out, _jsonl(rows))
    run.echo_config("generate")
    print(f"generate: {len(rows)} civic issue graphs -> {out}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "generate": cmd_generate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="civicgraph", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file (flat keys)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--checkpoint", help="input checkpoint directory")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--variant", choices=adapt_mod.VARIANTS, help="discriminator input")
    p.add_argument("--no-decoder", action="store_true", help="predict labels straight from the detector")
    p.add_argument("--images", help="image-record file for generate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else resolve_config()
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            if cfg["data_dir"] in ("", cfg["out_dir"]):
                cfg["data_dir"] = args.out
            cfg["out_dir"] = args.out
        if args.variant:
            cfg["input_variant"] = args.variant
        if args.no_decoder:
            cfg["use_decoder"] = False
        torch.set_num_threads(1)
        COMMANDS[args.command](Run(cfg), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, ContractError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (RecordFormatError, VocabularyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
