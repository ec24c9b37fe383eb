"""Stage 2: per-user reasoning prompts and generator training.

The user's history vectors act as attention queries over a learnable
domain memory (keys and values); the pooled result is mapped through a
tanh layer into rho virtual-token rows that condition the generator.
Training teacher-forces the next item's title followed by SEP, with the
loss restricted to those target positions.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .data import render_context
from .errors import DataError, ShapeError
from .knowledge import HistoryMatrix
from .model import TransformerLM
from .optim import Adam, LinearDecay
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    get_default_dtype,
    matmul,
    mean_axis,
    mul,
    reshape,
    softmax,
    tanh,
    transpose,
)
from .text import SEP_ID, Vocab


def _normal(rng, std, *shape):
    return Tensor(rng.normal(0.0, std, shape).astype(get_default_dtype()), requires_grad=True)


class DomainMemory:
    """Learnable m x d memory rows plus key/value projections."""

    def __init__(self, n_rows: int, d_model: int, rng: np.random.Generator,
                 seed_rows: np.ndarray | None = None, init_std: float = 0.02):
        if n_rows < 1:
            raise ShapeError("memory needs at least one row")
        self.n_rows = n_rows
        self.d_model = d_model
        if seed_rows is None:
            mem = rng.normal(0.0, init_std, (n_rows, d_model))
        else:
            mem = _tile_rows(seed_rows, n_rows, d_model, rng)
        self.params = {
            "mem": Tensor(mem.astype(get_default_dtype()), requires_grad=True),
            "wk": _normal(rng, init_std, d_model, d_model),
            "wv": _normal(rng, init_std, d_model, d_model),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def _tile_rows(seed: np.ndarray, n_rows: int, d_model: int, rng) -> np.ndarray:
    """Seed the memory from stage-1 knowledge embeddings: project if the
    widths differ, then tile or truncate to n_rows."""
    seed = np.asarray(seed, dtype=get_default_dtype())
    if seed.size == 0:
        return rng.normal(0.0, 0.02, (n_rows, d_model))
    if seed.shape[1] != d_model:
        proj = rng.normal(0.0, 1.0 / math.sqrt(seed.shape[1]), (seed.shape[1], d_model))
        seed = seed @ proj
    reps = -(-n_rows // seed.shape[0])
    return np.tile(seed, (reps, 1))[:n_rows]


class ReasoningModule:
    """Query projection plus the tanh map from pooled attention to rho rows."""

    def __init__(self, d_model: int, n_virtual: int, rng: np.random.Generator, init_std: float = 0.02):
        if n_virtual < 1:
            raise ShapeError("reasoning prompt needs at least one virtual token")
        self.d_model = d_model
        self.n_virtual = n_virtual
        self.params = {
            "wq": _normal(rng, init_std, d_model, d_model),
            "wr": _normal(rng, init_std, d_model, n_virtual * d_model),
            "br": Tensor(np.zeros(n_virtual * d_model, dtype=get_default_dtype()), requires_grad=True),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def stage2_checksum(memory: DomainMemory, module: ReasoningModule) -> str:
    h = hashlib.blake2b(digest_size=8)
    for bag in (memory.parameters(), module.parameters()):
        for name, t in bag.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def attend(history: HistoryMatrix, memory: DomainMemory, module: ReasoningModule) -> Tensor:
    """Scaled dot-product attention of real history rows over the memory,
    mean-pooled into a single d-vector."""
    n_real = history.n_real
    if n_real == 0:
        raise ShapeError("history has no real rows to attend with")
    d = memory.d_model
    q = matmul(Tensor(history.real_rows()), module.params["wq"])  # (n, d)
    k = matmul(memory.params["mem"], memory.params["wk"])  # (m, d)
    v = matmul(memory.params["mem"], memory.params["wv"])
    scores = mul(matmul(q, transpose(k, (1, 0))), 1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)  # rows sum to 1
    pooled = matmul(weights, v)  # (n, d)
    return mean_axis(pooled, 0)


def build_reasoning_prompt(history: HistoryMatrix, memory: DomainMemory,
                           module: ReasoningModule) -> Tensor:
    """tanh(W_r A + b_r) reshaped to rho virtual-token rows."""
    a = attend(history, memory, module)
    rho, d = module.n_virtual, module.d_model
    flat = tanh(add(matmul(reshape(a, (1, d)), module.params["wr"]),
                    reshape(module.params["br"], (1, rho * d))))
    return reshape(flat, (rho, d))


def target_token_ids(vocab: Vocab, title: str, max_item_tokens: int = 32) -> list[int]:
    """Title tokens followed by the item delimiter."""
    return vocab.encode(title, max_len=max_item_tokens) + [SEP_ID]


def train_stage2(
    dataset,
    catalog,
    item_vectors: dict[str, np.ndarray],
    model: TransformerLM,
    memory: DomainMemory,
    module: ReasoningModule,
    vocab: Vocab,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 16,
    history_len: int = 10,
    max_item_tokens: int = 32,
    max_context_tokens: int = 512,
    pairs: str = "all",
) -> dict:
    """Train the generator, memory, and reasoning module jointly.

    History vectors come from the frozen stage-1 cache; the knowledge
    prompt itself is untouched. ``pairs`` selects every next-item pair in
    each training prefix ("all") or only the final one ("last").
    """
    sequences = list(dataset)
    if not sequences:
        raise DataError("stage-2 training needs a non-empty dataset")

    examples = []  # (history ids, target item id)
    skipped = 0
    for seq in sequences:
        prefix = seq.train_prefix
        pair_list = (
            [(prefix[:k], prefix[k]) for k in range(1, len(prefix))]
            if pairs == "all"
            else [(prefix[:-1], prefix[-1])]
        )
        for hist, target in pair_list:
            if not hist:
                continue
            title_ids = vocab.encode(catalog.get(target).title, max_len=max_item_tokens)
            if not title_ids:
                skipped += 1
                continue
            examples.append((hist, target))
    if not examples:
        raise DataError("no usable training pairs")

    model.set_trainable(True)
    trainable = list(model.parameters().values())
    trainable += list(memory.parameters().values()) + list(module.parameters().values())
    opt = Adam(trainable, lr=lr)
    steps_per_epoch = max(1, (len(examples) + batch_size - 1) // batch_size)
    sched = LinearDecay(opt, total_steps=max(1, epochs * steps_per_epoch))

    epoch_losses = []
    order = np.arange(len(examples))
    for _ in range(epochs):
        rng.shuffle(order)
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            group = order[start : start + batch_size]
            opt.zero_grad()
            for idx in group:
                hist, target = examples[idx]
                loss = stage2_example_loss(
                    hist, target, catalog, item_vectors, model, memory, module, vocab,
                    history_len=history_len, max_item_tokens=max_item_tokens,
                    max_context_tokens=max_context_tokens,
                )
                total += loss.item()
                count += 1
                mul(loss, 1.0 / len(group)).backward()
            opt.step()
            sched.step()
        epoch_losses.append(total / count)
    return {"epoch_losses": epoch_losses, "skipped": skipped, "examples": len(examples)}


def stage2_example_loss(
    history_ids,
    target_id: str,
    catalog,
    item_vectors: dict[str, np.ndarray],
    model: TransformerLM,
    memory: DomainMemory,
    module: ReasoningModule,
    vocab: Vocab,
    history_len: int = 10,
    max_item_tokens: int = 32,
    max_context_tokens: int = 512,
) -> Tensor:
    """Teacher-forced NLL over the target title tokens plus SEP."""
    hist = history_matrix_from_cache(history_ids, item_vectors, history_len)
    prompt = build_reasoning_prompt(hist, memory, module)
    ctx = render_context(history_ids, catalog, vocab,
                         max_total=max_context_tokens, max_item=max_item_tokens)
    target = target_token_ids(vocab, catalog.get(target_id).title, max_item_tokens)
    tokens = np.asarray(ctx.tokens + target)
    out = model.forward(tokens[:-1], virtual_prefix=prompt)
    labels = np.full(tokens.size - 1, -1, dtype=np.int64)
    c = len(ctx.tokens)
    labels[c - 1 :] = tokens[c:]
    return cross_entropy(out.logits, labels, ignore_id=-1)


def history_matrix_from_cache(history_ids, item_vectors: dict[str, np.ndarray],
                              history_len: int = 10) -> HistoryMatrix:
    ids = list(history_ids)
    if not 1 <= len(ids) <= history_len:
        raise ShapeError(f"history must hold 1..{history_len} items, got {len(ids)}")
    first = item_vectors[ids[0]]
    rows = np.zeros((history_len, first.shape[0]), dtype=get_default_dtype())
    for i, item_id in enumerate(ids):
        vec = item_vectors.get(item_id)
        if vec is None:
            raise DataError(f"no cached vector for item {item_id!r}")
        rows[i] = vec
    mask = np.zeros(history_len, dtype=bool)
    mask[: len(ids)] = True
    return HistoryMatrix(rows, mask)
