import numpy as np
import pytest

from lancer.errors import BudgetError, ShapeError
from lancer.knowledge import KnowledgePrompt
from lancer.model import BackboneConfig, PrefixCache, TransformerLM
from lancer.tensor import Tensor

from conftest import TINY


def rng():
    return np.random.default_rng(0)


def test_empty_prefix_is_vanilla(tiny_model):
    tokens = [1, 2, 3, 4, 5]
    plain = tiny_model.forward(tokens)
    empty = tiny_model.forward(tokens, prefix=PrefixCache.empty(2, 16))
    assert np.array_equal(plain.logits.data, empty.logits.data)  # bit-for-bit


def test_prefix_key_length(tiny_model):
    prompt = KnowledgePrompt(4, 2, 16, rng())
    out = tiny_model.forward(np.arange(1, 11), prefix=prompt.expand())
    assert out.attn_key_len == (14, 14)  # theta + M


def test_virtual_rows_add_to_key_length(tiny_model):
    virt = Tensor(rng().normal(0, 0.02, (3, 16)))
    out = tiny_model.forward([1, 2, 3, 4], virtual_prefix=virt)
    assert out.attn_key_len == (7, 7)  # rho + T keys, no prefix
    assert out.logits.shape == (4, TINY["vocab_size"])  # virtual rows emit no logits


def test_causality(tiny_model):
    r = np.random.default_rng(5)
    for _ in range(10):
        T = int(r.integers(4, 12))
        toks = r.integers(0, TINY["vocab_size"], T)
        q = int(r.integers(1, T))
        base = tiny_model.forward(toks).logits.data
        changed = toks.copy()
        changed[q] = (changed[q] + 1) % TINY["vocab_size"]
        pert = tiny_model.forward(changed).logits.data
        assert np.max(np.abs(base[:q] - pert[:q])) <= 1e-9
        assert np.max(np.abs(base[q:] - pert[q:])) > 0  # perturbation is real


def test_causality_with_prompts(tiny_model):
    prompt = KnowledgePrompt(4, 2, 16, rng())
    virt = Tensor(rng().normal(0, 0.02, (2, 16)))
    toks = np.array([3, 1, 4, 1, 5, 9, 2, 6])
    base = tiny_model.forward(toks, prefix=prompt.expand(), virtual_prefix=virt).logits.data
    changed = toks.copy()
    changed[6] = 7
    pert = tiny_model.forward(changed, prefix=prompt.expand(), virtual_prefix=virt).logits.data
    assert np.max(np.abs(base[:6] - pert[:6])) <= 1e-9


def test_context_budget(tiny_model):
    with pytest.raises(BudgetError, match="48"):
        tiny_model.forward(np.zeros(49, dtype=int))
    virt = Tensor(np.zeros((4, 16)))
    with pytest.raises(BudgetError):
        tiny_model.forward(np.zeros(45, dtype=int), virtual_prefix=virt)


def test_empty_tokens_rejected(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.forward(np.zeros(0, dtype=int))


def test_prefix_layer_mismatch(tiny_model):
    prompt = KnowledgePrompt(4, 3, 16, rng())  # 3 layers vs model's 2
    with pytest.raises(ShapeError):
        tiny_model.forward([1, 2, 3], prefix=prompt.expand())


class TestIncrementalDecode:
    def test_incremental_matches_full_recompute(self, tiny_model):
        r = np.random.default_rng(1)
        context = r.integers(0, TINY["vocab_size"], 20)
        state = tiny_model.init_decode(context)
        steps = r.integers(0, TINY["vocab_size"], 6)
        seq = list(context)
        for tok in steps:
            inc = tiny_model.generate_step(state, int(tok))
            seq.append(int(tok))
            full = tiny_model.forward(np.asarray(seq)).logits.data[-1]
            assert np.max(np.abs(inc - full)) <= 1e-5

    def test_first_step_equals_last_forward_row(self, tiny_model):
        context = np.array([2, 7, 1, 8, 2, 8])
        full = tiny_model.forward(context).logits.data[-1]
        state = tiny_model.init_decode(context)
        assert np.max(np.abs(state.last_logits - full)) <= 1e-9

    def test_incremental_with_prompts(self, tiny_model):
        prompt = KnowledgePrompt(4, 2, 16, rng())
        virt = Tensor(rng().normal(0, 0.02, (2, 16)))
        context = np.array([5, 3, 6, 2])
        cache = prompt.expand()
        full = tiny_model.forward(context, prefix=cache, virtual_prefix=virt)
        state = tiny_model.init_decode(context, prefix=cache, virtual_prefix=virt)
        assert np.max(np.abs(state.last_logits - full.logits.data[-1])) <= 1e-5

    def test_step_beyond_budget(self, tiny_model):
        context = np.zeros(TINY["max_context"], dtype=int)
        state = tiny_model.init_decode(context)
        with pytest.raises(BudgetError):
            tiny_model.generate_step(state, 1)

    def test_state_model_mismatch(self, tiny_model):
        other = TransformerLM(BackboneConfig(**TINY), np.random.default_rng(3))
        state = tiny_model.init_decode([1, 2, 3])
        with pytest.raises(ShapeError):
            other.generate_step(state, 1)

    def test_branching_states_are_independent(self, tiny_model):
        state = tiny_model.init_decode([1, 2, 3])
        a, b = state.copy(), state.copy()
        la = tiny_model.generate_step(a, 4)
        lb = tiny_model.generate_step(b, 5)
        assert a.n_real == b.n_real == 4
        assert not np.array_equal(la, lb)


def test_checksum_tracks_parameters(tiny_model):
    before = tiny_model.checksum()
    assert before == tiny_model.checksum()
    tiny_model.params["wte"].data[0, 0] += 1.0
    assert tiny_model.checksum() != before


def test_clone_is_deep(tiny_model):
    twin = tiny_model.clone()
    assert twin.checksum() == tiny_model.checksum()
    twin.params["wte"].data[0, 0] += 1.0
    assert twin.checksum() != tiny_model.checksum()


def test_config_validation():
    with pytest.raises(Exception):
        BackboneConfig(vocab_size=10, d_model=30, n_heads=4)


def test_prefix_cache_invariants():
    k = [Tensor(np.zeros((4, 8))), Tensor(np.zeros((4, 8)))]
    v = [Tensor(np.zeros((4, 8))), Tensor(np.zeros((3, 8)))]
    with pytest.raises(ShapeError):
        PrefixCache(k, v)
