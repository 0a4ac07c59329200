import math

import numpy as np
import pytest

from vlmdrive import refinement as R
from vlmdrive import tensor as T
from vlmdrive.config import BDD_OIA, ModelConfig
from vlmdrive.errors import DataError, UsageError
from vlmdrive.gradcheck import random_batch
from vlmdrive.mil import Cam, ClassifierParams, compute_cam
from vlmdrive.model import FusionModel
from vlmdrive.refinement import SurrogateParams, refine_cam, refinement_loss, surrogate_forward
from vlmdrive.tensor import Tensor


def test_surrogate_shape(rng):
    cfg = ModelConfig(**BDD_OIA)
    sur = SurrogateParams.init(cfg.d_text, cfg.hidden, cfg.dim, rng)
    cls = ClassifierParams.init(cfg.dim, 4, rng)
    cam = surrogate_forward(rng.standard_normal((20, 1024)), np.ones(20, bool), sur, cls)
    assert cam.values.shape == (20, 4)


def test_zero_surrogate_is_constant_map(rng):
    sur = SurrogateParams.init(9, 12, 8, rng)
    for t in sur.proj.weights + sur.proj.biases:
        t.data[...] = 0
    cls = ClassifierParams.init(8, 4, rng, dropout=0.7)
    cam = surrogate_forward(rng.standard_normal((5, 9)), np.ones(5, bool), sur, cls).values
    at_zero = compute_cam(Tensor(np.zeros((1, 8))), np.ones(1, bool), cls).values[0]
    assert np.array_equal(cam, np.broadcast_to(at_zero, cam.shape))


def test_gradient_reaches_only_surrogate(rng):
    sur = SurrogateParams.init(9, 12, 8, rng)
    cls = ClassifierParams.init(8, 4, rng, dropout=0.0)
    pseudo = (rng.random((2, 5, 4)) < 0.3).astype(float)
    with T.Tape() as tape:
        loss = refinement_loss(surrogate_forward(rng.standard_normal((2, 5, 9)), np.ones((2, 5), bool), sur, cls),
                               pseudo)
        tape.backward(loss)
    assert all(p.grad is not None and np.any(p.grad != 0) for p in sur.named().values())
    assert all(p.grad is None or not np.any(p.grad) for p in cls.weights + cls.biases)


def test_missing_surrogate():
    with pytest.raises(UsageError):
        surrogate_forward(np.ones((2, 3)), np.ones(2, bool), None, None)


def test_refinement_loss_cases(rng):
    mask = np.array([[True, True, False]])
    pseudo = np.array([[[1, 0], [0, 1], [0, 0]]], dtype=float)
    strong = np.where(pseudo > 0, 20.0, -20.0)
    assert float(refinement_loss(Cam(Tensor(strong), mask), pseudo).data) < 1e-6
    assert abs(float(refinement_loss(Cam(Tensor(np.zeros((1, 3, 2))), mask), pseudo).data) - math.log(2)) < 1e-15
    z = rng.standard_normal((1, 3, 2)) * 2
    want = 0.0
    for r in range(2):
        for c in range(2):
            p = 1 / (1 + math.exp(-z[0, r, c]))
            want -= math.log(p) if pseudo[0, r, c] else math.log(1 - p)
    assert abs(float(refinement_loss(Cam(Tensor(z), mask), pseudo).data) - want / 4) < 1e-12
    with pytest.raises(DataError):
        refinement_loss(Cam(Tensor(z), mask), np.ones((1, 3, 2)))
    with pytest.raises(DataError):
        refinement_loss(Cam(Tensor(z), mask), np.zeros((1, 2, 2)))


def test_refine_cam_average(rng):
    mask = np.ones((1, 4), bool)
    a = rng.standard_normal((1, 4, 3))
    b = rng.standard_normal((1, 4, 3))
    assert np.array_equal(refine_cam(Cam(Tensor(a), mask), Cam(Tensor(a), mask)).values, a)
    assert np.array_equal(refine_cam(Cam(Tensor(a), mask), Cam(Tensor(np.zeros_like(a)), mask)).values, a / 2)
    assert np.array_equal(refine_cam(Cam(Tensor(a), mask), Cam(Tensor(b), mask)).values, (a + b) * 0.5)


def _setup(tiny_config, rng):
    model = FusionModel(tiny_config, seed=9)
    batch = random_batch(tiny_config, 6, rng)
    sur = SurrogateParams.init(tiny_config.d_text, tiny_config.hidden, tiny_config.dim, rng)
    return model, batch, sur


def test_surrogate_equal_to_text_cam_changes_nothing(tiny_config, rng, monkeypatch):
    model, batch, sur = _setup(tiny_config, rng)
    res = model.forward(batch)
    monkeypatch.setattr(R, "surrogate_forward", lambda *a: res.cam_l)
    outs = R.predict_refined(batch, model, sur)
    assert np.array_equal(np.stack([o.logits for o in outs]), res.logits.data)


def test_lambda_one_makes_refinement_inert(tiny_config, rng):
    model, batch, sur = _setup(tiny_config, rng)
    model.config.lam = 1.0
    plain = model.forward(batch).logits.data
    refined = np.stack([o.logits for o in R.predict_refined(batch, model, sur)])
    assert np.array_equal(plain, refined)


def test_refinement_changes_text_explanations_only_via_cam(tiny_config, rng):
    model, batch, sur = _setup(tiny_config, rng)
    outs = R.predict_refined(batch, model, sur)
    assert all(not o.warnings for o in outs)
    for o in outs:
        assert set(o.text_explanation) == set(np.flatnonzero(o.decisions))
        assert all(len(v) == tiny_config.k_hat for v in o.text_explanation.values())


def test_no_surrogate_falls_back_with_warning(tiny_config, rng):
    model, batch, _ = _setup(tiny_config, rng)
    outs = R.predict_refined(batch, model, None)
    assert all(o.warnings for o in outs)
    assert np.array_equal(np.stack([o.logits for o in outs]), model.forward(batch).logits.data)
