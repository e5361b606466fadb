import numpy as np
import pytest

from fusionrank import ModelConfig, SeededRng, init_params


@pytest.fixture
def rng():
    return SeededRng(12345)


def make_branch(seed=0, d_raw=4, d=4, d_fused=4, rank=2, output_bias=False):
    cfg = ModelConfig(d_raw_img=d_raw, d_raw_txt=d_raw, d_img=d, d_txt=d,
                      d_fused=d_fused, rank=rank, output_bias=output_bias)
    return init_params(cfg, SeededRng(seed)).image_text


def random_scores(gen, rows, cols):
    """Score matrix on a coarse grid so ties and near-ties are controlled."""
    return np.round(gen.uniform(0.0, 1.0, size=(rows, cols)), 4)
