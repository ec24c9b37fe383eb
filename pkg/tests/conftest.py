import numpy as np
import pytest

from lancer import tensor as tz
from lancer.data import ItemCatalog, ItemRecord
from lancer.generate import ItemIndex, RecommenderStack
from lancer.model import BackboneConfig, TransformerLM
from lancer.reasoning import DomainMemory, ReasoningModule
from lancer.text import Vocab


@pytest.fixture(autouse=True)
def _restore_dtype():
    """Tests default to float64; anything that switches must not leak."""
    before = tz.get_default_dtype()
    tz.set_default_dtype(np.float64)
    yield
    tz.set_default_dtype(before)


def fd_grad(loss_fn, tensor, flat_index: int, h: float = 1e-5) -> float:
    """Central finite difference of a scalar loss wrt one coordinate."""
    flat = tensor.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    up = loss_fn().item()
    flat[flat_index] = orig - h
    dn = loss_fn().item()
    flat[flat_index] = orig
    return (up - dn) / (2.0 * h)


def rel_err(a: float, b: float, clamp: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), clamp)


def check_gradients(loss_fn, named_params, rng, per_tensor=4, h=1e-5):
    """Spot-check analytic grads vs central differences; returns worst (err, name)."""
    for p in named_params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = (0.0, None)
    for name, p in named_params.items():
        if p.size == 0:
            continue
        assert p.grad is not None, f"no gradient reached {name}"
        n = min(per_tensor, p.size)
        for i in rng.choice(p.size, size=n, replace=False):
            fd = fd_grad(loss_fn, p, int(i), h)
            an = float(p.grad.reshape(-1)[int(i)])
            e = rel_err(an, fd)
            if e > worst[0]:
                worst = (e, f"{name}[{i}]")
    for p in named_params.values():
        p.zero_grad()
    return worst


TINY = dict(vocab_size=19, n_layers=2, d_model=16, n_heads=2, d_ff=32, max_context=48)


@pytest.fixture
def tiny_model():
    return TransformerLM(BackboneConfig(**TINY), np.random.default_rng(0))


def toy_catalog(n=6):
    words = ["arbor", "basil", "cedar", "dahlia", "elm", "fennel", "garnet", "hazel"]
    tags = ["creek", "knoll", "marsh", "ridge", "shoal", "tarn", "vale", "weir"]
    recs = [
        ItemRecord(f"t{i}", f"{words[i]} {tags[i]}", f"{words[i]} {tags[i]} story")
        for i in range(n)
    ]
    return ItemCatalog(recs)


@pytest.fixture
def toy_stack():
    """An untrained but fully wired recommender over a 6-item catalog."""
    catalog = toy_catalog()
    vocab = Vocab.build(catalog.corpus())
    rng = np.random.default_rng(9)
    model = TransformerLM(
        BackboneConfig(vocab_size=len(vocab), n_layers=2, d_model=16, n_heads=2,
                       d_ff=32, max_context=128),
        rng,
    )
    model.set_trainable(False)
    memory = DomainMemory(4, 16, rng)
    module = ReasoningModule(16, 2, rng)
    for bag in (memory.params, module.params):
        for t in bag.values():
            t.requires_grad = False
    item_vectors = {rec.item_id: rng.normal(0, 1, 16) for rec in catalog.items()}
    from lancer.generate import build_index

    index = build_index(catalog, model.embedding_table, vocab)
    return RecommenderStack(
        model=model, memory=memory, module=module, item_vectors=item_vectors,
        vocab=vocab, catalog=catalog, index=index, history_len=10,
        max_item_tokens=32, max_context_tokens=128, max_gen_steps=8,
    )
