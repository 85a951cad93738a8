import pytest

from srnet.config import RunConfig

TINY_OVERRIDES = dict(
    n_train=96, n_dev=32, n_ood=32, n_ood_train=32, n_layers=1, d_model=8, d_ffn=16, n_heads=2,
    pretrain_steps=3, pretrain_corpus=64, epochs=1, batch_size=16, eval_interval=2, threshold_interval=2,
    bias_steps=20, seeds=(0, 1), sparsities=(0.2, 0.5),
)


def tiny_config(**changes) -> RunConfig:
    return RunConfig().replace(**{**TINY_OVERRIDES, **changes})


@pytest.fixture
def tiny_cfg():
    return tiny_config()
