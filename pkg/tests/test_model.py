import numpy as np
import pytest

from hiendmae import autodiff as ad
from hiendmae.errors import ConfigError

import toys


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_toy_gradients_sampled(seed):
    assert toys.toy_grad_check(seed, coords_per_param=6) < 1e-5


def test_baseline_variant_gradients():
    model, tokens, plan, grid = toys.toy_instance(seed=4, variant="mae")
    err = ad.grad_check(lambda: model.forward(tokens, plan, grid).loss, model.parameters(), coords_per_param=6)
    assert err < 1e-5


def test_toy_is_small():
    model, _, _, grid = toys.toy_instance()
    assert model.num_parameters() <= 5000 and grid.n_tokens == 27


def test_forward_shapes_and_names():
    model, tokens, plan, grid = toys.toy_instance()
    res = model.forward(tokens, plan, grid)
    assert res.pred.shape == tokens.shape and res.loss.shape == ()
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names)) and "decoder.mask_token" in names


def test_batch_loss_is_mean_of_samples():
    model, tokens, plan, grid = toys.toy_instance()
    other = np.random.default_rng(9).random(tokens.shape).astype(tokens.dtype)
    a = model.forward(tokens, plan, grid).loss.item()
    b = model.forward(other, plan, grid).loss.item()
    assert model.batch_loss([(tokens, plan, grid), (other, plan, grid)]).item() == pytest.approx((a + b) / 2)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        toys.toy_instance(variant="unet")
