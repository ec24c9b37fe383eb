"""Command-line front door.

Commands: ingest, train-knowledge, train-reason, build-index, evaluate,
recommend, stats, selftest. Each reads a RunConfig (file plus flag
overrides, flags win), writes artifacts under the workdir, and exits 0
on success or nonzero with a one-line machine-parsable error category.
The workdir default comes from $LANCER_WORKDIR.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .checkpoint import Checkpoint, file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ItemCatalog, build_dataset, dataset_stats, load_dataset, save_dataset, stats_from_counts
from .errors import (
    BudgetError,
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateInputError,
    LancerError,
)
from .generate import ItemIndex, RecommenderStack, TableScorer, beam_search, build_index, recommend
from .knowledge import KnowledgePrompt, encode_item, read_item_vectors, train_stage1, write_item_vectors
from .metrics import evaluate, write_detail_tsv
from .model import BackboneConfig, TransformerLM
from .reasoning import DomainMemory, ReasoningModule, train_stage2
from .tensor import get_default_dtype, set_default_dtype
from .text import Vocab

ARTIFACTS = {
    "vocab": "vocab.tsv",
    "dataset": "dataset.json",
    "stats": "stats.json",
    "stage1": "stage1.ckpt",
    "item_vecs": "item_vecs.tsv",
    "stage2": "stage2.ckpt",
    "index": "index.bin",
    "metrics": "metrics.json",
}


class WorkdirLock:
    """Single-writer lock on the workdir; stale locks from dead pids are reclaimed."""

    def __init__(self, workdir: str):
        self.path = os.path.join(workdir, ".lock")

    def __enter__(self):
        if os.path.exists(self.path):
            try:
                pid = int(open(self.path).read().strip())
            except ValueError:
                pid = -1
            if pid > 0 and _pid_alive(pid):
                raise LancerError(f"workdir is locked by running pid {pid}")
            os.unlink(self.path)
        fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _artifact(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.workdir, ARTIFACTS[name])


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing {path}; run `{hint}` first")
    return path


def _check_config_hash(stored: str, cfg: RunConfig, force: bool, what: str) -> None:
    if stored and stored != cfg.config_hash() and not force:
        raise ConfigError(
            f"{what} was produced under config hash {stored}, current is "
            f"{cfg.config_hash()}; rerun upstream or pass --force"
        )


def _backbone_config(cfg: RunConfig, vocab_size: int) -> BackboneConfig:
    return BackboneConfig(
        vocab_size=vocab_size,
        n_layers=cfg.n_layers,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        max_context=cfg.max_context,
    )


def _model_from_checkpoint(ckpt: Checkpoint, prefix: str = "backbone.") -> TransformerLM:
    bc = BackboneConfig(**ckpt.config["backbone"])
    model = TransformerLM(bc, np.random.default_rng(0))
    dtype = get_default_dtype()
    for name, t in model.params.items():
        t.data = np.ascontiguousarray(ckpt.tensors[prefix + name], dtype=dtype)
    return model


def _prompt_from_checkpoint(ckpt: Checkpoint) -> KnowledgePrompt:
    meta = ckpt.config["knowledge"]
    prompt = KnowledgePrompt(
        meta["n_tokens"], meta["n_layers"], meta["d_model"],
        np.random.default_rng(0), d_embed=meta["d_embed"],
    )
    dtype = get_default_dtype()
    for name, t in prompt.params.items():
        t.data = np.ascontiguousarray(ckpt.tensors["prompt." + name], dtype=dtype)
    return prompt


# -- commands --------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args) -> int:
    catalog = ItemCatalog.from_jsonl(_require(cfg.catalog, "provide catalog="))
    vocab = Vocab.build(catalog.corpus(), min_freq=cfg.min_freq)
    dataset = build_dataset(_require(cfg.interactions, "provide interactions="), catalog)
    if not dataset:
        raise DataError("no user kept a sequence of 5 or more interactions")
    os.makedirs(cfg.workdir, exist_ok=True)
    with WorkdirLock(cfg.workdir):
        vocab.save(_artifact(cfg, "vocab"))
        save_dataset(_artifact(cfg, "dataset"), dataset, cfg.config_hash())
        stats = dataset_stats(dataset, catalog)
        with open(_artifact(cfg, "stats"), "w", encoding="utf-8") as fh:
            json.dump(stats, fh, sort_keys=True)
    print(json.dumps({"users": stats["users"], "items": stats["items"],
                      "vocab": len(vocab)}, sort_keys=True))
    return 0


def cmd_train_knowledge(cfg: RunConfig, args) -> int:
    catalog = ItemCatalog.from_jsonl(cfg.catalog)
    vocab = Vocab.load(_require(_artifact(cfg, "vocab"), "lancer ingest"))
    rng = np.random.default_rng(cfg.seed)
    model = TransformerLM(_backbone_config(cfg, len(vocab)), rng)
    model.set_trainable(False)
    prompt = KnowledgePrompt(
        cfg.knowledge_tokens, cfg.n_layers, cfg.d_model, rng,
        d_embed=cfg.knowledge_dim or None,
    )
    before = model.checksum()
    report = train_stage1(
        catalog, model, prompt, vocab,
        epochs=cfg.stage1_epochs, lr=cfg.stage1_lr, rng=rng,
        batch_size=cfg.batch_size, max_tokens=cfg.max_context,
    )
    after = model.checksum()
    if before != after:
        raise LancerError("backbone changed during stage-1 training; frozen contract broken")

    with WorkdirLock(cfg.workdir):
        ckpt_path = _artifact(cfg, "stage1")
        tensors = {f"backbone.{k}": v.data for k, v in model.params.items()}
        tensors.update({f"prompt.{k}": v.data for k, v in prompt.params.items()})
        save_checkpoint(ckpt_path, Checkpoint(
            kind="stage1",
            config={
                "backbone": model.config.to_dict(),
                "knowledge": {"n_tokens": prompt.n_tokens, "n_layers": prompt.n_layers,
                              "d_model": prompt.d_model, "d_embed": prompt.d_embed},
                "run": cfg.to_dict(),
            },
            tensors=tensors,
            config_hash=cfg.config_hash(),
            extra={"report": report, "backbone_checksum": after,
                   "prompt_checksum": prompt.checksum()},
        ))
        cfg.to_file(ckpt_path + ".config")
        _write_item_vector_cache(cfg, catalog, vocab, model, prompt, ckpt_path)
    print(json.dumps({"stage1_loss": report["epoch_losses"][-1] if report["epoch_losses"] else None,
                      "skipped": report["skipped"]}, sort_keys=True))
    return 0


def _write_item_vector_cache(cfg, catalog, vocab, model, prompt, ckpt_path) -> None:
    cache = prompt.expand()
    vectors = {}
    for rec in catalog.items():
        vectors[rec.item_id] = encode_item(model, cache, vocab, rec.content,
                                           max_tokens=cfg.max_context)
    write_item_vectors(_artifact(cfg, "item_vecs"), vectors, file_hash(ckpt_path))


def cmd_train_reason(cfg: RunConfig, args) -> int:
    catalog = ItemCatalog.from_jsonl(cfg.catalog)
    vocab = Vocab.load(_require(_artifact(cfg, "vocab"), "lancer ingest"))
    dataset, ds_hash = load_dataset(_require(_artifact(cfg, "dataset"), "lancer ingest"))
    _check_config_hash(ds_hash, cfg, args.force, "dataset")
    stage1_path = _require(_artifact(cfg, "stage1"), "lancer train-knowledge")
    ckpt = load_checkpoint(stage1_path)
    _check_config_hash(ckpt.config_hash, cfg, args.force, "stage-1 checkpoint")

    frozen = _model_from_checkpoint(ckpt)
    frozen.set_trainable(False)
    prompt = _prompt_from_checkpoint(ckpt)
    prompt_before = prompt.checksum()

    vec_path = _artifact(cfg, "item_vecs")
    item_vectors, source = (read_item_vectors(vec_path) if os.path.exists(vec_path)
                            else ({}, ""))
    if source != file_hash(stage1_path):
        item_vectors = None  # stale cache: rebuild below
    if not item_vectors:
        with WorkdirLock(cfg.workdir):
            _write_item_vector_cache(cfg, catalog, vocab, frozen, prompt, stage1_path)
        item_vectors, _ = read_item_vectors(vec_path)

    rng = np.random.default_rng(cfg.seed)
    generator = frozen.clone()  # theta starts as a copy of the frozen backbone
    generator.set_trainable(True)
    memory = DomainMemory(cfg.memory_rows, cfg.d_model, rng,
                          seed_rows=prompt.params["emb"].data)
    module = ReasoningModule(cfg.d_model, cfg.reasoning_tokens, rng)

    report = train_stage2(
        dataset, catalog, item_vectors, generator, memory, module, vocab,
        epochs=cfg.stage2_epochs, lr=cfg.stage2_lr, rng=rng,
        batch_size=cfg.batch_size, history_len=cfg.history_len,
        max_item_tokens=cfg.item_max_tokens, max_context_tokens=cfg.max_context,
        pairs=cfg.train_pairs,
    )
    if prompt.checksum() != prompt_before:
        raise LancerError("knowledge prompt changed during stage-2; staging contract broken")

    with WorkdirLock(cfg.workdir):
        ckpt_path = _artifact(cfg, "stage2")
        tensors = {f"backbone.{k}": v.data for k, v in generator.params.items()}
        tensors.update({f"memory.{k}": v.data for k, v in memory.params.items()})
        tensors.update({f"module.{k}": v.data for k, v in module.params.items()})
        save_checkpoint(ckpt_path, Checkpoint(
            kind="stage2",
            config={
                "backbone": generator.config.to_dict(),
                "reasoning": {"memory_rows": cfg.memory_rows,
                              "n_virtual": cfg.reasoning_tokens, "d_model": cfg.d_model},
                "run": cfg.to_dict(),
            },
            tensors=tensors,
            config_hash=cfg.config_hash(),
            extra={"report": report, "stage1_hash": file_hash(stage1_path)},
        ))
        cfg.to_file(ckpt_path + ".config")
    print(json.dumps({"stage2_loss": report["epoch_losses"][-1] if report["epoch_losses"] else None,
                      "skipped": report["skipped"]}, sort_keys=True))
    return 0


def _load_stack(cfg: RunConfig, force: bool) -> tuple[RecommenderStack, str]:
    catalog = ItemCatalog.from_jsonl(cfg.catalog)
    vocab = Vocab.load(_require(_artifact(cfg, "vocab"), "lancer ingest"))
    stage2_path = _require(_artifact(cfg, "stage2"), "lancer train-reason")
    ckpt = load_checkpoint(stage2_path)
    _check_config_hash(ckpt.config_hash, cfg, force, "stage-2 checkpoint")
    model = _model_from_checkpoint(ckpt)
    model.set_trainable(False)

    meta = ckpt.config["reasoning"]
    rng = np.random.default_rng(0)
    memory = DomainMemory(meta["memory_rows"], meta["d_model"], rng)
    module = ReasoningModule(meta["d_model"], meta["n_virtual"], rng)
    dtype = get_default_dtype()
    for name, t in memory.params.items():
        t.data = np.ascontiguousarray(ckpt.tensors["memory." + name], dtype=dtype)
        t.requires_grad = False
    for name, t in module.params.items():
        t.data = np.ascontiguousarray(ckpt.tensors["module." + name], dtype=dtype)
        t.requires_grad = False

    item_vectors, _ = read_item_vectors(_require(_artifact(cfg, "item_vecs"),
                                                 "lancer train-knowledge"))
    index_path = _artifact(cfg, "index")
    index = ItemIndex.load(_require(index_path, "lancer build-index"))
    stage2_hash = file_hash(stage2_path)
    if index.source_hash != stage2_hash and not force:
        raise ConfigError("item index is stale for the current stage-2 checkpoint; "
                          "rerun `lancer build-index` or pass --force")
    stack = RecommenderStack(
        model=model, memory=memory, module=module, item_vectors=item_vectors,
        vocab=vocab, catalog=catalog, index=index,
        history_len=cfg.history_len, max_item_tokens=cfg.item_max_tokens,
        max_context_tokens=cfg.max_context, max_gen_steps=cfg.max_gen_steps,
    )
    return stack, stage2_hash


def cmd_build_index(cfg: RunConfig, args) -> int:
    catalog = ItemCatalog.from_jsonl(cfg.catalog)
    vocab = Vocab.load(_require(_artifact(cfg, "vocab"), "lancer ingest"))
    stage2_path = _require(_artifact(cfg, "stage2"), "lancer train-reason")
    ckpt = load_checkpoint(stage2_path)
    _check_config_hash(ckpt.config_hash, cfg, args.force, "stage-2 checkpoint")
    table = ckpt.tensors["backbone.wte"]
    index = build_index(catalog, table, vocab, source_hash=file_hash(stage2_path),
                        max_item_tokens=cfg.item_max_tokens)
    with WorkdirLock(cfg.workdir):
        index.save(_artifact(cfg, "index"))
    print(json.dumps({"items": len(index)}, sort_keys=True))
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    stack, stage2_hash = _load_stack(cfg, args.force)
    dataset, ds_hash = load_dataset(_require(_artifact(cfg, "dataset"), "lancer ingest"))
    _check_config_hash(ds_hash, cfg, args.force, "dataset")
    ks = cfg.ks()
    rng = np.random.default_rng(cfg.seed)

    def rec_fn(history, k):
        width = cfg.beam_width if cfg.beam_width > 0 else None
        return recommend(stack, history, k, width=width, decoder=cfg.decoder, rng=rng)

    report = evaluate(rec_fn, dataset, ks=ks)
    details = report.pop("details")
    report["seed"] = cfg.seed
    report["checkpoint_hash"] = stage2_hash
    with WorkdirLock(cfg.workdir):
        with open(_artifact(cfg, "metrics"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True)
        if args.detail:
            write_detail_tsv(os.path.join(cfg.workdir, "metrics_detail.tsv"), details, ks)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_recommend(cfg: RunConfig, args) -> int:
    if not args.user_history:
        raise DataError("--user-history is required (comma-separated item ids)")
    history = [x for x in args.user_history.split(",") if x]
    stack, _ = _load_stack(cfg, args.force)
    rng = np.random.default_rng(cfg.seed)
    width = cfg.beam_width if cfg.beam_width > 0 else None
    recs = recommend(stack, history, args.k, width=width, decoder=cfg.decoder, rng=rng)
    for r in recs:
        print(f"{r.rank}\t{r.item_id}\t{r.score}\t{r.text}")
    return 0


def cmd_stats(cfg: RunConfig, args) -> int:
    if args.counts:
        try:
            users, items, inter = (int(x) for x in args.counts.split(","))
        except ValueError:
            raise DataError("--counts expects users,items,interactions")
        stats = stats_from_counts(users, items, inter)
    else:
        catalog = ItemCatalog.from_jsonl(_require(cfg.catalog, "provide catalog="))
        dataset = build_dataset(_require(cfg.interactions, "provide interactions="), catalog)
        stats = dataset_stats(dataset, catalog)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_selftest(cfg: RunConfig, args) -> int:
    set_default_dtype(np.float64)  # gradient checks are unreliable at float32
    failures = []
    t0 = time.time()
    bad = _selftest_gradients()
    if bad:
        failures.append(f"gradient-check: {bad}")
    print(f"selftest gradient-check: {'ok' if not bad else 'FAIL'} "
          f"({time.time() - t0:.1f}s)")
    t0 = time.time()
    bad = _selftest_beam()
    if bad:
        failures.append(f"beam-oracle: {bad}")
    print(f"selftest beam-oracle: {'ok' if not bad else 'FAIL'} ({time.time() - t0:.1f}s)")
    if failures:
        raise LancerError("; ".join(failures))
    return 0


def _selftest_gradients(n_checks: int = 24) -> str:
    from .tensor import Tensor, cross_entropy

    rng = np.random.default_rng(7)
    bc = BackboneConfig(vocab_size=23, n_layers=2, d_model=16, n_heads=2, d_ff=32,
                        max_context=64)
    model = TransformerLM(bc, rng)
    prompt = KnowledgePrompt(4, bc.n_layers, bc.d_model, rng)
    tokens = rng.integers(0, bc.vocab_size, 9)

    def loss_fn():
        out = model.forward(tokens[:-1], prefix=prompt.expand())
        return cross_entropy(out.logits, tokens[1:])

    model.set_trainable(True)
    params = list(model.params.values()) + list(prompt.params.values())
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for _ in range(n_checks):
        p = params[int(rng.integers(0, len(params)))]
        if p.size == 0 or p.grad is None:
            continue
        flat = p.data.reshape(-1)
        i = int(rng.integers(0, flat.size))
        h = 1e-5
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        dn = loss_fn().item()
        flat[i] = orig
        fd = (up - dn) / (2 * h)
        an = p.grad.reshape(-1)[i]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
    for p in params:
        p.zero_grad()
    return "" if worst < 1e-3 else f"worst relative error {worst:.2e}"


def _selftest_beam() -> str:
    rng = np.random.default_rng(11)
    for trial in range(10):
        depth, v, w = 3, 6, 3
        table = rng.normal(0.0, 2.0, (depth, v))
        scorer = TableScorer(table)
        got = beam_search(scorer, w, depth, stop_ids=())
        lp = scorer.logprobs
        scored = []
        for a in range(v):
            for b in range(v):
                for c in range(v):
                    scored.append(((a, b, c), lp[0][a] + lp[1][b] + lp[2][c]))
        scored.sort(key=lambda s: (-s[1], s[0]))
        want = [s[0] for s in scored[:w]]
        if [h.tokens for h in got] != want:
            return f"trial {trial}: beam != enumeration"
    return ""


# -- argument parsing --------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lancer",
                                     description="content-enriched sequential recommender")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--workdir", help="artifact directory (default $LANCER_WORKDIR or .)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--force", action="store_true",
                       help="ignore config-hash mismatches on artifacts")

    for name, fn in (
        ("ingest", cmd_ingest),
        ("train-knowledge", cmd_train_knowledge),
        ("train-reason", cmd_train_reason),
        ("build-index", cmd_build_index),
        ("evaluate", cmd_evaluate),
        ("recommend", cmd_recommend),
        ("stats", cmd_stats),
        ("selftest", cmd_selftest),
    ):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)
        if name == "evaluate":
            p.add_argument("--detail", action="store_true", help="write per-user TSV")
        if name == "recommend":
            p.add_argument("--user-history", help="comma-separated item ids")
            p.add_argument("--k", type=int, default=5)
        if name == "stats":
            p.add_argument("--counts", help="users,items,interactions (skip file IO)")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.workdir:
        overrides["workdir"] = args.workdir
    elif not args.config and os.environ.get("LANCER_WORKDIR"):
        overrides["workdir"] = os.environ["LANCER_WORKDIR"]
    cfg.apply_overrides(overrides)
    cfg.validate()
    return cfg


_EXIT_CODES = {
    ConfigError: (3, "config"),
    DataError: (1, "data"),
    CheckpointError: (1, "checkpoint"),
    BudgetError: (1, "budget"),
    DegenerateInputError: (1, "degenerate"),
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        set_default_dtype(np.float64 if cfg.precision == "float64" else np.float32)
        return args.fn(cfg, args)
    except LancerError as exc:
        code, category = 1, "internal"
        for klass, (c, cat) in _EXIT_CODES.items():
            if isinstance(exc, klass):
                code, category = c, cat
                break
        print(f"error:{category}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
