"""Word-level vocabulary with reversible encode/decode.

Tokens are lowercased words and single punctuation marks. Ids 0..4 are
reserved for PAD/BOS/EOS/SEP/UNK and never reassigned; SEP delimits
items in rendered contexts and stops generation.
"""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable

from .errors import DataError

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
RESERVED = (PAD, BOS, EOS, SEP, UNK)
PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = range(5)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: list[str], freqs: list[int], min_freq: int = 1):
        self.min_freq = min_freq
        self._id_to_token = list(RESERVED) + list(tokens)
        self._freqs = [0] * len(RESERVED) + list(freqs)
        self._token_to_id = {tok: i for i, tok in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, corpus: Iterable[str], min_freq: int = 1) -> "Vocab":
        """Count tokens over the corpus; keep those with freq >= min_freq.

        Ids are assigned in descending-frequency order, ties broken
        lexicographically, starting after the reserved block.
        """
        counts: Counter[str] = Counter()
        n_texts = 0
        for text in corpus:
            n_texts += 1
            counts.update(tokenize(text))
        if n_texts == 0:
            raise DataError("cannot build a vocabulary from an empty corpus")
        kept = sorted(
            ((tok, freq) for tok, freq in counts.items() if freq >= min_freq),
            key=lambda kv: (-kv[1], kv[0]),
        )
        return cls([t for t, _ in kept], [f for _, f in kept], min_freq)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise DataError(f"token id {idx} outside vocabulary of size {len(self)}")
        return self._id_to_token[idx]

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """Tokenize and map to ids, truncating to max_len tokens."""
        if max_len is not None and max_len < 1:
            raise DataError("max_len must be >= 1")
        toks = tokenize(text)
        if max_len is not None:
            toks = toks[:max_len]
        return [self._token_to_id.get(t, UNK_ID) for t in toks]

    def decode(self, ids: Iterable[int], strip_special: bool = False) -> str:
        toks = [self.token_of(i) for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in RESERVED]
        return " ".join(toks)

    def save(self, path) -> None:
        """One line per token: id<TAB>token<TAB>frequency, ids ascending."""
        with open(path, "w", encoding="utf-8") as fh:
            for i, (tok, freq) in enumerate(zip(self._id_to_token, self._freqs)):
                fh.write(f"{i}\t{tok}\t{freq}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens, freqs = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno + 1}: malformed vocab line")
                idx, tok, freq = int(parts[0]), parts[1], int(parts[2])
                if idx != lineno:
                    raise DataError(f"{path}:{lineno + 1}: ids must ascend densely")
                if lineno < len(RESERVED):
                    if tok != RESERVED[lineno]:
                        raise DataError(f"{path}:{lineno + 1}: reserved token mismatch")
                    continue
                tokens.append(tok)
                freqs.append(freq)
        return cls(tokens, freqs)
