import numpy as np
import pytest

from anchored_decoding import ToyBackend, ToyModelConfig, VocabSpec


def make_backend(seed=7, vocab_size=16, embed_dim=16, n_layers=2, n_heads=2, max_positions=64):
    return ToyBackend(
        ToyModelConfig(
            seed=seed,
            vocab=VocabSpec.toy(vocab_size),
            embed_dim=embed_dim,
            n_layers=n_layers,
            n_heads=n_heads,
            max_positions=max_positions,
        )
    )


def random_marked_prompt(rng, vocab, plain_len=3, anchored_len=3):
    """Prompt text with a trailing anchored span, drawn from the toy alphabet."""
    chars = [vocab.token_strings[i] for i in range(2, vocab.size)]
    plain = "".join(rng.choice(chars, plain_len))
    anchored = "".join(rng.choice(chars, anchored_len))
    return f"{plain}⟦{anchored}⟧"


@pytest.fixture
def backend():
    return make_backend()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
