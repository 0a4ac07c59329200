import numpy as np
import pytest

from vlmdrive import tensor as T
from vlmdrive.attention import cross_attention, self_attention
from vlmdrive.config import BDD_OIA, ModelConfig
from vlmdrive.errors import ConfigError, ShapeError
from vlmdrive.gradcheck import gradcheck, random_batch
from vlmdrive.model import FusionModel
from vlmdrive.tensor import Tensor


def _permuted(batch, perm):
    out = batch.subset(np.arange(len(batch)))
    out.local = batch.local[:, perm]
    out.local_mask = batch.local_mask[:, perm]
    return out


def test_paper_shapes(rng):
    cfg = ModelConfig(**BDD_OIA)
    model = FusionModel(cfg)
    batch = random_batch(cfg, 1, rng)
    res = model.forward(batch)
    assert res.z_v.shape == (1, 80, 256) and res.z_l.shape == (1, 20, 256)
    assert res.cam_v.values.shape == (1, 80, 4) and res.cam_l.values.shape == (1, 20, 4)
    assert res.logits.shape == (1, 4)


def test_local_permutation_permutes_cam_and_keeps_prediction(tiny_config, rng):
    model = FusionModel(tiny_config, seed=3)
    batch = random_batch(tiny_config, 3, rng)
    base = model.forward(batch)
    perm = rng.permutation(tiny_config.n)
    res = model.forward(_permuted(batch, perm))
    assert np.array_equal(res.cam_v.values, base.cam_v.values[:, perm])
    assert np.array_equal(res.z_v.data, base.z_v.data[:, perm])
    assert np.array_equal(res.logits.data, base.logits.data)


def test_masked_rows_never_matter(tiny_config, rng):
    model = FusionModel(tiny_config, seed=3)
    batch = random_batch(tiny_config, 3, rng)
    base = model.forward(batch).logits.data
    noisy = batch.subset(np.arange(3))
    noisy.local = np.where(batch.local_mask[..., None], batch.local, 99.0)
    noisy.text = np.where(batch.text_mask[..., None], batch.text, -7.0)
    assert np.array_equal(model.forward(noisy).logits.data, base)


def test_single_valid_instance_reduction(tiny_config, rng):
    model = FusionModel(tiny_config, seed=1)
    batch = random_batch(tiny_config, 1, rng)
    batch.local_mask[:] = False
    batch.local_mask[0, 2] = True
    batch.local = batch.local * batch.local_mask[..., None]
    res = model.forward(batch)
    xg = model.encode_global(batch)
    row = model.local_proj(Tensor(batch.local[:, 2:3]))
    want = cross_attention(self_attention(row, model.self_attn), xg, model.vision_attn).data
    assert np.allclose(res.z_v.data[:, 2:3], want, atol=1e-12)


def test_vision_only_equals_lambda_one(tiny_config, rng):
    model = FusionModel(tiny_config, seed=2)
    batch = random_batch(tiny_config, 4, rng)
    vis_only = model.ablation_forward(batch, True, False).logits.data
    model.config.lam = 1.0
    assert np.array_equal(model.forward(batch).logits.data, vis_only)
    model.config.lam = 0.0
    assert np.array_equal(model.forward(batch).logits.data, model.ablation_forward(batch, False, True).logits.data)


def test_ablation_configurations(tiny_config, rng):
    model = FusionModel(tiny_config, seed=2)
    batch = random_batch(tiny_config, 2, rng)
    g = model.ablation_forward(batch, False, False)
    assert g.logits.shape == (2, 4) and g.cam_v is None and g.cam_l is None
    assert model.ablation_forward(batch, True, False).cam_l is None
    assert model.ablation_forward(batch, False, True).cam_v is None
    full = set(model.parameters())
    model.config.global_only = True
    assert set(model.parameters()) == {k for k in model.all_parameters() if k.startswith(("global_proj", "global_cls"))}
    assert set(model.parameters()) != full


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(k=0)
    with pytest.raises(ConfigError):
        ModelConfig(lam=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(use_vision=False, use_text=False)


def test_shape_check(tiny_config, rng):
    model = FusionModel(tiny_config)
    batch = random_batch(tiny_config, 1, rng)
    batch.text = batch.text[..., :-1]
    with pytest.raises(ShapeError):
        model.forward(batch)


def test_dropout_only_in_training(rng):
    cfg = ModelConfig(num_classes=4, dim=16, heads=4, hidden=24, t=3, n=6, s=5,
                      d_global=10, d_local=12, d_text=9, k=2, dropout=0.5)
    model = FusionModel(cfg)
    batch = random_batch(cfg, 2, rng)
    assert np.array_equal(model.forward(batch).logits.data, model.forward(batch).logits.data)
    a = model.forward(batch, training=True, rng=np.random.default_rng(0)).logits.data
    assert not np.array_equal(a, model.forward(batch).logits.data)


@pytest.mark.parametrize("flags", [{}, {"use_text": False}, {"use_vision": False}, {"global_only": True},
                                   {"multi_label": False}])
def test_gradcheck_small_configs(tiny_config, flags):
    cfg = ModelConfig(**{**tiny_config.to_dict(), **flags})
    rep = gradcheck(cfg, seed=5, num_params=20)
    assert rep.checked >= 20
    assert rep.max_rel_error < 1e-6
