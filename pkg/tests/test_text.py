from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lancer.errors import DataError
from lancer.text import RESERVED, SEP_ID, UNK_ID, Vocab, tokenize


def test_build_small_corpus():
    v = Vocab.build(["a a b"], min_freq=1)
    assert len(v) == 5 + 2
    assert "a" in v and "b" in v
    assert v.id_of("a") == 5  # higher frequency first


def test_min_freq_cutoff():
    v = Vocab.build(["a a b"], min_freq=2)
    assert v.encode("b") == [UNK_ID]
    assert "b" not in v


def test_empty_corpus():
    with pytest.raises(DataError):
        Vocab.build([], min_freq=1)


def test_id_order_matches_independent_recount():
    rng_words = ["w%03d" % (i % 97) for i in range(3000)]
    docs = [" ".join(rng_words[i : i + 3]) for i in range(0, 3000, 3)]
    v = Vocab.build(docs, min_freq=1)
    # independent recount
    counts = Counter()
    for d in docs:
        counts.update(d.lower().split())
    expected = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    got = [v.token_of(i) for i in range(5, len(v))]
    assert got == [t for t, _ in expected]


def test_truncation_to_max_len():
    words = [f"word{i}" for i in range(40)]
    v = Vocab.build([" ".join(words)])
    ids = v.encode(" ".join(words), max_len=32)
    assert len(ids) == 32
    assert [v.token_of(i) for i in ids] == words[:32]


def test_unseen_token_is_unk():
    v = Vocab.build(["plain words here"])
    assert v.encode("Zyzzyva") == [UNK_ID]


def test_decode_basics():
    v = Vocab.build(["the matrix"])
    assert v.decode(v.encode("the matrix")) == "the matrix"
    assert v.decode([]) == ""


def test_decode_strip_special():
    v = Vocab.build(["alpha beta"])
    seq = v.encode("alpha") + [SEP_ID] + v.encode("beta")
    assert v.decode(seq, strip_special=True) == "alpha beta"
    assert "<sep>" in v.decode(seq)


def test_decode_invalid_id():
    v = Vocab.build(["abc"])
    with pytest.raises(DataError):
        v.decode([len(v)])


def test_punctuation_separation():
    assert tokenize("Hello, World!") == ["hello", ",", "world", "!"]


@given(st.lists(st.sampled_from(["red", "blue", "fox", "jumps", ",", "."]),
                min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_roundtrip_in_vocab(tokens):
    v = Vocab.build(["red blue fox jumps , ."])
    ids = v.encode(" ".join(tokens))
    assert v.encode(v.decode(ids)) == ids


def test_vocab_file_deterministic(tmp_path):
    docs = ["some words repeat words", "words and more words ."]
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    Vocab.build(docs).save(a)
    Vocab.build(docs).save(b)
    assert a.read_bytes() == b.read_bytes()


def test_vocab_save_load_roundtrip(tmp_path):
    v = Vocab.build(["alpha beta beta gamma !"], min_freq=1)
    path = tmp_path / "v.tsv"
    v.save(path)
    loaded = Vocab.load(path)
    assert len(loaded) == len(v)
    for i in range(len(v)):
        assert loaded.token_of(i) == v.token_of(i)
    first = path.read_text(encoding="utf-8").splitlines()[0].split("\t")
    assert first[0] == "0" and first[1] == RESERVED[0]
