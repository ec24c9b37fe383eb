"""Beam-search generation, max-pool text embedding, and catalog mapping.

Beam search is length-synchronous: every live hypothesis expands over
the whole vocabulary each step and the top w candidates survive by
cumulative log-probability, with ties broken by smaller token ids then
shorter length. Hypotheses stop at the first SEP/EOS (one item of text);
that text is max-pooled over the generator's input embedding table and
matched to the catalog by cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ItemCatalog, render_context
from .errors import DataError, DegenerateInputError, ShapeError
from .model import TransformerLM
from .reasoning import build_reasoning_prompt, history_matrix_from_cache
from .text import EOS_ID, SEP_ID, Vocab

STOP_IDS = (SEP_ID, EOS_ID)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # includes the stop token when one was generated
    logprob: float  # sum of chosen per-step log-softmax values
    finished: bool

    def item_tokens(self, stop_ids=STOP_IDS) -> tuple[int, ...]:
        """Tokens of the first generated item: everything before the stop."""
        out = []
        for t in self.tokens:
            if t in stop_ids:
                break
            out.append(t)
        return tuple(out)

    def sort_key(self):
        return (-self.logprob, self.tokens)


class TableScorer:
    """Step scorer backed by a fixed per-step logit table (depth x V)."""

    def __init__(self, logits: np.ndarray):
        logits = np.asarray(logits, dtype=np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        self.logprobs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self.depth, self.vocab_size = self.logprobs.shape

    def initial(self):
        return 0, self.logprobs[0]

    def advance(self, state, token):
        step = state + 1
        if step >= self.depth:
            return step, np.zeros(self.vocab_size)
        return step, self.logprobs[step]


class ModelScorer:
    """Step scorer over an incremental transformer decode."""

    def __init__(self, model: TransformerLM, context_tokens, virtual_prefix=None):
        self.model = model
        self.vocab_size = model.config.vocab_size
        self._context = np.asarray(context_tokens, dtype=np.int64)
        self._virtual = virtual_prefix

    def initial(self):
        state = self.model.init_decode(self._context, virtual_prefix=self._virtual)
        return state, _log_softmax(state.last_logits)

    def advance(self, state, token):
        branch = state.copy()
        logits = self.model.generate_step(branch, int(token))
        return branch, _log_softmax(logits)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def beam_search(
    scorer,
    width: int,
    max_steps: int,
    stop_ids=STOP_IDS,
) -> list[Hypothesis]:
    """Top-w generations by cumulative log-probability, score-descending."""
    if width < 1:
        raise ShapeError("beam width must be >= 1")
    if max_steps < 1:
        raise ShapeError("max_steps must be >= 1")
    if width > scorer.vocab_size:
        raise ShapeError(f"beam width {width} exceeds vocabulary size {scorer.vocab_size}")

    state0, logprobs0 = scorer.initial()
    live = [((), 0.0, state0, logprobs0)]  # tokens, logprob, state, next logprobs
    finished: list[Hypothesis] = []

    for _ in range(max_steps):
        if not live:
            break
        candidates = [(h.sort_key(), None, None, h.logprob) for h in finished]
        for idx, (tokens, lp, _, logprobs) in enumerate(live):
            for tok in range(scorer.vocab_size):
                new_lp = lp + logprobs[tok]
                key = (-new_lp, tokens + (tok,))
                candidates.append((key, idx, tok, new_lp))
        candidates.sort(key=lambda c: c[0])
        kept = candidates[:width]

        new_live = []
        new_finished = []
        for key, idx, tok, lp in kept:
            if idx is None:  # an already-finished hypothesis survived
                new_finished.append(Hypothesis(key[1], lp, True))
                continue
            tokens = key[1]
            if tok in stop_ids:
                new_finished.append(Hypothesis(tokens, lp, True))
                continue
            parent = live[idx]
            state, logprobs = scorer.advance(parent[2], tok)
            new_live.append((tokens, lp, state, logprobs))
        finished = new_finished
        live = new_live

    out = finished + [Hypothesis(tokens, lp, True) for tokens, lp, _, _ in live]
    out.sort(key=Hypothesis.sort_key)
    return out[:width]


def sample_search(scorer, n: int, max_steps: int, rng: np.random.Generator,
                  temperature: float = 1.0, stop_ids=STOP_IDS) -> list[Hypothesis]:
    """Debug decoder: n independent ancestral samples, score-descending."""
    out = []
    for _ in range(n):
        state, logprobs = scorer.initial()
        tokens: tuple[int, ...] = ()
        lp = 0.0
        for _ in range(max_steps):
            if temperature != 1.0:
                z = logprobs / temperature
                p = np.exp(z - z.max())
            else:
                p = np.exp(logprobs)
            p = p / p.sum()
            tok = int(rng.choice(p.size, p=p))
            lp += float(logprobs[tok])
            tokens = tokens + (tok,)
            if tok in stop_ids:
                break
            state, logprobs = scorer.advance(state, tok)
        out.append(Hypothesis(tokens, lp, True))
    out.sort(key=Hypothesis.sort_key)
    return out


# -- pooled embeddings and the item index ---------------------------------------


@dataclass
class PooledEmbedding:
    gamma: np.ndarray  # (d,)
    n_tokens: int


def pool(embedding_table: np.ndarray, token_ids) -> PooledEmbedding:
    """Per-dimension maximum over the tokens' embedding rows."""
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.size == 0:
        raise DegenerateInputError("cannot pool an empty token sequence")
    rows = embedding_table[ids]
    return PooledEmbedding(rows.max(axis=0), int(ids.size))


@dataclass
class ItemIndex:
    item_ids: list[str]
    vectors: np.ndarray  # (n_items, d)
    source_hash: str = ""

    def __len__(self) -> int:
        return len(self.item_ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#index v1 source_hash={self.source_hash} "
                     f"d={self.vectors.shape[1]} items={len(self.item_ids)}\n")
            for item_id, vec in zip(self.item_ids, self.vectors):
                floats = "\t".join(repr(float(x)) for x in vec)
                fh.write(f"{item_id}\t{floats}\n")

    @classmethod
    def load(cls, path) -> "ItemIndex":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header.startswith("#index v1"):
                raise DataError(f"{path}: not an item index file")
            source_hash = ""
            for part in header.split():
                if part.startswith("source_hash="):
                    source_hash = part.split("=", 1)[1]
            ids, rows = [], []
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                ids.append(parts[0])
                rows.append([float(x) for x in parts[1:]])
        return cls(ids, np.asarray(rows), source_hash)


def build_index(catalog: ItemCatalog, embedding_table: np.ndarray, vocab: Vocab,
                source_hash: str = "", max_item_tokens: int = 32) -> ItemIndex:
    """One pooled title vector per catalog item; computed once per checkpoint."""
    empty = [rec.item_id for rec in catalog.items() if not vocab.encode(rec.title)]
    if empty:
        raise DataError(f"items with empty-title tokenization: {empty}")
    ids, rows = [], []
    for rec in catalog.items():
        token_ids = vocab.encode(rec.title, max_len=max_item_tokens)
        ids.append(rec.item_id)
        rows.append(pool(embedding_table, token_ids).gamma)
    return ItemIndex(ids, np.stack(rows), source_hash)


def map_to_item(gamma, index: ItemIndex) -> tuple[str, float]:
    """Catalog item with the highest cosine similarity to gamma.

    Zero-norm catalog vectors score 0; exact similarity ties go to the
    smallest item id.
    """
    g = gamma.gamma if isinstance(gamma, PooledEmbedding) else np.asarray(gamma)
    gn = np.linalg.norm(g)
    if gn == 0.0:
        raise DegenerateInputError("query vector has zero norm")
    norms = np.linalg.norm(index.vectors, axis=1)
    sims = np.zeros(len(index.item_ids))
    nz = norms > 0.0
    sims[nz] = (index.vectors[nz] @ g) / (norms[nz] * gn)
    best = sims.max()
    best_id = min(index.item_ids[i] for i in np.nonzero(sims == best)[0])
    return best_id, float(best)


# -- end-to-end recommendation ---------------------------------------------------


@dataclass
class Recommendation:
    rank: int
    item_id: str
    score: float  # beam log-probability, or cosine similarity for backfill
    text: str  # generated item text ("" for backfill entries)
    source: str  # "beam" or "backfill"


@dataclass
class RecommenderStack:
    """Everything a recommend call needs, loaded once and shared read-only."""

    model: TransformerLM
    memory: object
    module: object
    item_vectors: dict[str, np.ndarray]
    vocab: Vocab
    catalog: ItemCatalog
    index: ItemIndex
    history_len: int = 10
    max_item_tokens: int = 32
    max_context_tokens: int = 512
    max_gen_steps: int = 34


def recommend(stack: RecommenderStack, history_ids, k: int, width: int | None = None,
              decoder: str = "beam", rng: np.random.Generator | None = None) -> list[Recommendation]:
    """Beam-generate next-item texts, map them to catalog items, dedupe,
    rank by beam score, and backfill by cosine similarity up to k items."""
    history_ids = list(history_ids)
    if not history_ids:
        raise DataError("recommend needs a non-empty history")
    if k < 1:
        raise DataError("k must be >= 1")
    if width is None:
        width = k + 5

    hist = history_matrix_from_cache(history_ids[-stack.history_len:],
                                     stack.item_vectors, stack.history_len)
    prompt = build_reasoning_prompt(hist, stack.memory, stack.module)
    ctx = render_context(history_ids, stack.catalog, stack.vocab,
                         max_total=stack.max_context_tokens, max_item=stack.max_item_tokens)
    scorer = ModelScorer(stack.model, ctx.tokens, virtual_prefix=prompt.data)
    if decoder == "beam":
        hyps = beam_search(scorer, width, stack.max_gen_steps)
    elif decoder == "greedy":
        hyps = beam_search(scorer, 1, stack.max_gen_steps)
    elif decoder == "sample":
        if rng is None:
            raise DataError("sample decoding needs a seeded rng")
        hyps = sample_search(scorer, width, stack.max_gen_steps, rng)
    else:
        raise DataError(f"unknown decoder {decoder!r}")

    emb = stack.model.embedding_table
    best_by_item: dict[str, tuple[float, str]] = {}
    top_gamma = None
    for hyp in hyps:
        item_toks = hyp.item_tokens()
        if not item_toks:
            continue
        gamma = pool(emb, item_toks)
        if top_gamma is None:
            top_gamma = gamma
        item_id, _ = map_to_item(gamma, stack.index)
        text = stack.vocab.decode(item_toks)
        prev = best_by_item.get(item_id)
        if prev is None or hyp.logprob > prev[0]:
            best_by_item[item_id] = (hyp.logprob, text)
    if not best_by_item:
        raise DegenerateInputError("all beams were empty after truncation")

    ranked = sorted(best_by_item.items(), key=lambda kv: (-kv[1][0], kv[0]))
    out = [
        Recommendation(i + 1, item_id, lp, text, "beam")
        for i, (item_id, (lp, text)) in enumerate(ranked[:k])
    ]

    if len(out) < k:
        used = {r.item_id for r in out}
        norms = np.linalg.norm(stack.index.vectors, axis=1)
        g = top_gamma.gamma
        gn = np.linalg.norm(g)
        sims = np.zeros(len(stack.index.item_ids))
        nz = norms > 0.0
        sims[nz] = (stack.index.vectors[nz] @ g) / (norms[nz] * gn)
        order = sorted(
            (i for i, iid in enumerate(stack.index.item_ids) if iid not in used),
            key=lambda i: (-sims[i], stack.index.item_ids[i]),
        )
        for i in order[: k - len(out)]:
            out.append(Recommendation(len(out) + 1, stack.index.item_ids[i],
                                      float(sims[i]), "", "backfill"))
    return out
