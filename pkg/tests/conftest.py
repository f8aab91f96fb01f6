import pytest

from sparselab.model import ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_layers=1, d_ff=32, max_seq_len=8, seed=3)
