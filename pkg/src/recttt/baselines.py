"""Reference adaptation methods: source-only, test-batch normalization and a SimSiam-style TTT."""
from __future__ import annotations

from enum import Enum

import numpy as np

from . import losses, ops
from .autodiff import SGD, Graph, Var, stop_gradient
from .data import hflip
from .model import Phase, Prediction, TTTModel, argmax_lowest, copy_state
from .nn import BatchNorm, ClassifierHead, Encoder, Linear, Module
from .tensor import Rng


class BaselineKind(str, Enum):
    SOURCE = "source"
    PTBN = "ptbn"
    SIMSIAM_TTT = "simsiam_ttt"


def predict_source(model: TTTModel, x: np.ndarray) -> Prediction:
    """No adaptation: the trained model with running statistics."""
    return model.predict(x, bn_mode="eval")


def predict_ptbn(model: TTTModel, x: np.ndarray) -> Prediction:
    """Normalize every layer with the test batch's own statistics; nothing is stored."""
    if x.shape[0] < 2:
        raise ValueError("test-batch normalization needs batch size >= 2")
    return model.predict(x, bn_mode="batch")


class MLP(Module):
    """Linear - ReLU - Linear."""

    def __init__(self, in_f: int, hidden: int, out_f: int, rng: Rng):
        self.fc1 = Linear(in_f, hidden, rng)
        self.fc2 = Linear(hidden, out_f, rng)

    def __call__(self, g: Graph, x: Var) -> Var:
        return self.fc2(g, ops.relu(self.fc1(g, x)))


class SimSiamModel(TTTModel):
    """Single encoder whose pooled deepest feature feeds a classifier, a projector and a predictor.

    The auxiliary loss is the negative cosine between the projection of the
    image and the prediction for its flipped copy, with the stop-gradient on
    the predictor side by default (``stop_grad="projector"`` gives the
    classic arrangement).
    """

    def __init__(self, channels, n_classes: int, rng: Rng, proj_hidden: int = 128,
                 proj_out: int = 64, pred_hidden: int = 64, stop_grad: str = "predictor",
                 adapt_depth: int | None = None, weight: float = 1.0, bn_momentum: float = 0.1):
        channels = list(channels)
        if stop_grad not in ("predictor", "projector"):
            raise ValueError("stop_grad must be 'predictor' or 'projector'")
        self.encoder = Encoder(channels, rng.spawn("encoder"))
        self.head = ClassifierHead(channels[-1], n_classes, rng.spawn("head"))
        self.projector = MLP(channels[-1], proj_hidden, proj_out, rng.spawn("projector"))
        self.predictor = MLP(proj_out, pred_hidden, proj_out, rng.spawn("predictor"))
        self.channels = channels
        self.n_classes = n_classes
        self.depth = len(channels) - 1
        self.adapt_depth = self.depth if adapt_depth is None else adapt_depth
        self.stop_grad = stop_grad
        self.weight = weight
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.momentum = bn_momentum
        self.name_parameters()
        self.theta0 = None
        self.set_phase(Phase.TRAIN)

    def adapted_encoders(self) -> list[Encoder]:
        return [self.encoder]

    def train_modules(self) -> list[Module]:
        return [self.encoder, self.head, self.projector, self.predictor]

    def init_from_pretrained(self, encoder: Encoder, head: ClassifierHead | None = None) -> None:
        copy_state(encoder, self.encoder)
        if head is not None:
            copy_state(head, self.head)

    def _views(self, g: Graph, x: np.ndarray) -> tuple[list[Var], list[Var]]:
        return self.encoder(g, g.var(x)), self.encoder(g, g.var(hflip(x)))

    def simsiam_loss(self, g: Graph, feats: list[Var], feats_flip: list[Var]) -> Var:
        z = self.projector(g, ops.global_avgpool(feats[-1]))
        p = self.predictor(g, self.projector(g, ops.global_avgpool(feats_flip[-1])))
        if self.stop_grad == "predictor":
            return losses.negative_cosine(z, stop_gradient(p))
        return losses.negative_cosine(p, stop_gradient(z))

    def adapt_loss(self, g: Graph, x: np.ndarray, cache=None) -> Var:
        return self.simsiam_loss(g, *self._views(g, x))

    def train_step(self, x: np.ndarray, labels: np.ndarray, opt: SGD) -> dict[str, float]:
        self._require(Phase.TRAIN)
        g = Graph()
        feats, feats_flip = self._views(g, x)
        ce = losses.cross_entropy(self.head(g, feats[-1]), labels)
        aux = self.simsiam_loss(g, feats, feats_flip)
        total = losses.train_loss(ce, None, aux, None, aux_weight=self.weight)
        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite training loss {value}")
        opt.step(g.param_grads(g.backward(total)))
        return {"loss": value, "ce1": ce.item(), "ce2": 0.0, "aux": aux.item(), "kl": 0.0}

    def predict(self, x: np.ndarray, bn_mode: str = "eval", single: bool | None = None) -> Prediction:
        with self.bn_modes(bn_mode):
            g = Graph()
            probs = ops.softmax(self.head(g, self.encoder(g, g.var(x))[-1])).value
        return Prediction(probs, argmax_lowest(probs), (probs,))

    def predict_ensemble(self, x: np.ndarray, bn_mode: str = "eval") -> Prediction:
        return self.predict(x, bn_mode)

    def pooled_features(self, x: np.ndarray) -> np.ndarray:
        with self.bn_modes("eval"):
            g = Graph()
            return ops.global_avgpool(self.encoder(g, g.var(x))[-1]).value
