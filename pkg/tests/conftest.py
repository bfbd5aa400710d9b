import numpy as np
import pytest

from atmlab.corpus import gen_dataset, gen_world
from atmlab.model import Dims, TokenSeq, init_params
from atmlab.retrieval import Retriever
from atmlab.vocab import VOCAB_SIZE


@pytest.fixture(scope="session")
def small_world():
    return gen_world(7, 12, 3)


@pytest.fixture(scope="session")
def small_corpus(small_world):
    instances, docs = gen_dataset(small_world, 30, 4, 7)
    return instances, docs


@pytest.fixture(scope="session")
def small_retriever(small_corpus):
    _, docs = small_corpus
    return Retriever(docs)


@pytest.fixture(scope="session")
def tiny_dims():
    return Dims(vocab_size=64, d_model=16, n_heads=2, context_len=32)


@pytest.fixture(scope="session")
def tiny_params(tiny_dims):
    return init_params(5, tiny_dims)


@pytest.fixture(scope="session")
def full_dims():
    return Dims(vocab_size=VOCAB_SIZE, d_model=64, n_heads=2, context_len=256)


def random_seq(rng: np.random.Generator, vocab: int, length: int, span: int,
               n_pad: int = 0) -> TokenSeq:
    """Sequence with span loss-masked tail tokens and n_pad masked lead positions."""
    ids = rng.integers(0, vocab, size=length)
    attn = np.ones(length, dtype=np.int64)
    attn[:n_pad] = 0
    loss = np.zeros(length, dtype=np.int64)
    loss[length - span:] = 1
    return TokenSeq(ids, attn, loss)
