"""Post-hoc text-branch refinement with a surrogate model.

The surrogate maps raw text features into the input space of the frozen text
classifier. It is fitted to binary pseudo CAMs (which descriptions support
which decision); at inference the text CAM is averaged with the surrogate CAM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Batch
from .errors import DataError, ShapeError, UsageError
from .mil import Cam, ClassifierParams, DecisionOutput, compute_cam, decide, explain, fuse, probabilities, topk_avg_pool
from .model import FusionModel, Projector
from .tensor import Tensor


@dataclass
class SurrogateParams:
    proj: Projector

    @classmethod
    def init(cls, d_text: int, hidden: int, dim: int, rng: np.random.Generator) -> "SurrogateParams":
        return cls(Projector.init([d_text, hidden, dim, dim], rng))

    def named(self, prefix: str = "surrogate") -> dict[str, Tensor]:
        return self.proj.named(prefix)


def frozen(classifier: ClassifierParams) -> ClassifierParams:
    """Copy of ``classifier`` whose tensors never receive gradients."""
    return ClassifierParams([Tensor(w.data) for w in classifier.weights],
                            [Tensor(b.data) for b in classifier.biases], classifier.dropout)


def surrogate_forward(x_text, mask: np.ndarray, surrogate: SurrogateParams | None,
                      classifier: ClassifierParams) -> Cam:
    if surrogate is None:
        raise UsageError("surrogate_forward needs trained surrogate parameters")
    x_text = T.as_tensor(x_text)
    if x_text.shape[-1] != surrogate.proj.weights[0].shape[0]:
        raise ShapeError(f"surrogate expects width {surrogate.proj.weights[0].shape[0]}, got {x_text.shape}")
    h = surrogate.proj(x_text, relu_last=False)
    return compute_cam(h, mask, frozen(classifier), training=False)


def refinement_loss(cam: Cam, pseudo: np.ndarray, pseudo_mask: np.ndarray | None = None) -> Tensor:
    """Mean elementwise BCE-with-logits over valid description rows."""
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if cam.scores.shape != pseudo.shape:
        raise DataError(f"pseudo CAM shape {pseudo.shape} vs CAM {cam.scores.shape}")
    if pseudo_mask is not None and not np.array_equal(np.asarray(pseudo_mask, dtype=bool), cam.mask):
        raise DataError("pseudo CAM mask disagrees with the description mask")
    if np.any(pseudo[~cam.mask] != 0):
        raise DataError("pseudo CAM has nonzero entries on padded rows")
    weights = np.broadcast_to(cam.mask[..., None], pseudo.shape).astype(np.float64)
    return T.bce_with_logits(cam.scores, pseudo, weights)


def refine_cam(cam_l: Cam, cam_l_prime: Cam) -> Cam:
    if cam_l.scores.shape != cam_l_prime.scores.shape:
        raise DataError(f"CAM shapes differ: {cam_l.scores.shape} vs {cam_l_prime.scores.shape}")
    if not np.array_equal(cam_l.mask, cam_l_prime.mask):
        raise DataError("CAM masks differ")
    return Cam(T.scale(T.add(cam_l.scores, cam_l_prime.scores), 0.5), cam_l.mask)


def predict_refined(batch: Batch, model: FusionModel, surrogate: SurrogateParams | None) -> list[DecisionOutput]:
    """Decisions with the refined text CAM; falls back (with a warning) when no surrogate exists."""
    c = model.config
    res = model.forward(batch)
    warnings = []
    cam_l = res.cam_l
    logits = res.logits
    if c.global_only or not c.use_text:
        pass
    elif surrogate is None:
        warnings.append("no surrogate available: using unrefined text CAM")
    else:
        prime = surrogate_forward(batch.text, batch.text_mask, surrogate, model.text_cls)
        cam_l = refine_cam(res.cam_l, prime)
        p_l = topk_avg_pool(cam_l, c.k_hat)
        logits = p_l if res.p_v is None else fuse(res.p_v, p_l, c.branch_lambda)
    z = logits.data
    dec = decide(z, c.multi_label, c.threshold)
    vis, txt = explain(res.cam_v, cam_l, dec, c.k, c.k_hat)
    probs = probabilities(z, c.multi_label)
    return [DecisionOutput(z[i], probs[i], dec[i], vis[i], txt[i], list(warnings)) for i in range(len(batch))]
