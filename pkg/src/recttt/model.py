"""Cross-reconstruction test-time training model.

A frozen reference encoder, two trainable encoders (the second sees the
horizontally flipped image), a shared bottleneck + decoder and one
classifier head per trainable encoder.  The decoder reconstructs the frozen
encoder's feature pyramid from a trainable encoder's deepest feature and vice
versa; at test time that reconstruction loss alone adapts the shallow blocks
of the trainable encoders, one batch at a time with a reset in between.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterator

import numpy as np

from . import losses, ops
from .autodiff import SGD, Graph, Var
from .data import hflip
from .nn import BatchNorm, Bottleneck, ClassifierHead, Decoder, Encoder, Module, check_mirror
from .tensor import Rng, ShapeError


class Phase(str, Enum):
    TRAIN = "train"
    ADAPT = "adapt"
    INFER = "infer"


class PhaseError(RuntimeError):
    pass


@dataclass
class Snapshot:
    """Frozen copies of a set of live arrays; ``restore`` writes them back in place."""

    arrays: dict[str, np.ndarray]

    @classmethod
    def capture(cls, state: dict[str, np.ndarray]) -> "Snapshot":
        return cls({k: v.copy() for k, v in state.items()})

    def restore(self, state: dict[str, np.ndarray]) -> None:
        if state.keys() != self.arrays.keys():
            raise KeyError("snapshot does not match the model state")
        for k, v in self.arrays.items():
            np.copyto(state[k], v)

    def equals(self, state: dict[str, np.ndarray]) -> bool:
        return all(np.array_equal(state[k], v) for k, v in self.arrays.items())


@dataclass
class Prediction:
    probs: np.ndarray
    labels: np.ndarray
    # per-head probabilities before averaging
    parts: tuple[np.ndarray, ...] = ()


@dataclass
class AdaptResult:
    prediction: Prediction
    aux_before: float | None = None
    aux_after: float | None = None
    losses: list[float] = field(default_factory=list)
    # whatever the ``hook`` passed to adapt_batch returned for the adapted weights
    extra: Any = None


def copy_state(src: Module, dst: Module) -> None:
    """Copy every parameter and buffer of ``src`` into the matching arrays of ``dst``."""
    a, b = src.state(), dst.state()
    if list(a) != list(b):
        raise ShapeError("modules have different layouts")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeError(f"{k}: {a[k].shape} vs {b[k].shape}")
        np.copyto(b[k], a[k])


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs, axis=-1)


class TTTModel(Module):
    """Shared machinery for models adapted batch-by-batch with an auxiliary loss.

    Subclasses provide ``adapted_encoders``, ``adapt_loss`` and ``predict``.
    The per-batch discipline is fixed here: restore the post-training
    weights, take ``T`` SGD steps on the auxiliary loss, predict with the
    adapted weights, restore again.
    """

    adapt_depth: int
    phase: Phase
    theta0: Snapshot | None

    # -- hooks ------------------------------------------------------------------
    def adapted_encoders(self) -> list[Encoder]:
        raise NotImplementedError

    def train_modules(self) -> list[Module]:
        raise NotImplementedError

    def frozen_modules(self) -> list[Module]:
        return []

    def adapt_cache(self, x: np.ndarray) -> Any:
        return None

    def adapt_loss(self, g: Graph, x: np.ndarray, cache: Any) -> Var:
        raise NotImplementedError

    def predict(self, x: np.ndarray, bn_mode: str = "eval") -> Prediction:
        raise NotImplementedError

    # -- phases -----------------------------------------------------------------
    def adapt_modules(self) -> list[Module]:
        return [m for enc in self.adapted_encoders() for m in enc.adapt_modules(self.adapt_depth)]

    def adapt_state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, enc in enumerate(self.adapted_encoders()):
            out.update(enc.state(f"enc{i}."))
        return out

    def set_phase(self, phase: Phase | str) -> None:
        """Apply the freeze mask and batch-norm modes of a phase.

        Entering ``ADAPT`` captures the post-training snapshot that every
        adapted batch starts from.
        """
        phase = Phase(phase)
        self.set_trainable(False)
        self.set_bn_mode("eval")
        if phase is Phase.TRAIN:
            for m in self.train_modules():
                m.set_trainable(True)
                m.set_bn_mode("train")
            self.theta0 = None
        elif phase is Phase.ADAPT:
            for m in self.adapt_modules():
                m.set_trainable(True)
                m.set_bn_mode("train")
            self.theta0 = Snapshot.capture(self.adapt_state())
        self.phase = phase

    def _require(self, phase: Phase) -> None:
        if self.phase is not phase:
            raise PhaseError(f"operation needs phase {phase.value}, model is in {self.phase.value}")

    @contextlib.contextmanager
    def bn_modes(self, mode: str, modules: list[Module] | None = None) -> Iterator[None]:
        """Temporarily switch batch-norm layers (all, or those inside ``modules``)."""
        targets = [m for root in (modules or [self]) for m in root.modules() if isinstance(m, BatchNorm)]
        saved = [m.mode for m in targets]
        for m in targets:
            m.mode = mode
        try:
            yield
        finally:
            for m, s in zip(targets, saved):
                m.mode = s

    # -- per-batch adaptation ---------------------------------------------------
    def restore_theta0(self) -> None:
        if self.theta0 is None:
            raise PhaseError("no post-training snapshot; call set_phase('adapt') first")
        self.theta0.restore(self.adapt_state())

    def aux_value(self, x: np.ndarray, cache: Any = None) -> float:
        """Auxiliary loss at the current weights with batch statistics, no running-stat update."""
        with self.bn_modes("batch", self.adapt_modules()):
            return self.adapt_loss(Graph(), x, cache).item()

    def adapt_step(self, x: np.ndarray, opt: SGD, cache: Any = None) -> float:
        g = Graph()
        loss = self.adapt_loss(g, x, cache)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite auxiliary loss {value}")
        opt.step(g.param_grads(g.backward(loss)))
        return value

    def adapt_batch(self, x: np.ndarray, T: int, lr: float, momentum: float = 0.0,
                    measure_aux: bool = True, hook: Callable[["TTTModel"], Any] | None = None) -> AdaptResult:
        """Adapt to one unlabeled batch and predict with the adapted weights.

        The weights are reset to the post-training snapshot before and after,
        so batches never influence each other.  ``hook`` is called on the
        adapted model just before the reset.
        """
        self._require(Phase.ADAPT)
        if T < 0:
            raise ValueError("T must be >= 0")
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[0] == 0:
            raise ValueError("adapt_batch needs a non-empty NCHW batch")
        self.restore_theta0()
        try:
            cache = self.adapt_cache(x)
            before = self.aux_value(x, cache) if measure_aux else None
            opt = SGD(lr, momentum=momentum)
            history = [self.adapt_step(x, opt, cache) for _ in range(T)]
            after = self.aux_value(x, cache) if measure_aux else None
            pred = self.predict(x)
            extra = hook(self) if hook is not None else None
        finally:
            self.restore_theta0()
        return AdaptResult(pred, before, after, history, extra)


class RecTTTModel(TTTModel):
    def __init__(self, channels, n_classes: int, rng: Rng, two_encoders: bool = True,
                 adapt_depth: int | None = None, bn_momentum: float = 0.1,
                 kl_symmetric: bool = True, ce_weight: float = 1.0, aux_weight: float = 1.0,
                 kl_weight: float = 1.0):
        channels = list(channels)
        self.frozen_encoder = Encoder(channels, rng.spawn("frozen"))
        self.enc1 = Encoder(channels, rng.spawn("enc1"))
        self.enc2 = Encoder(channels, rng.spawn("enc2")) if two_encoders else None
        self.bottleneck = Bottleneck(channels[-1], rng.spawn("bottleneck"))
        self.decoder = Decoder(channels, rng.spawn("decoder"))
        self.head1 = ClassifierHead(channels[-1], n_classes, rng.spawn("head1"))
        self.head2 = ClassifierHead(channels[-1], n_classes, rng.spawn("head2")) if two_encoders else None
        self.channels = channels
        self.n_classes = n_classes
        self.two_encoders = two_encoders
        self.depth = len(channels) - 1
        self.adapt_depth = self.depth if adapt_depth is None else adapt_depth
        if not 1 <= self.adapt_depth <= self.depth:
            raise ValueError(f"adapt_depth must be in 1..{self.depth}")
        self.kl_symmetric = kl_symmetric
        self.single_inference = False
        self.ce_weight, self.aux_weight, self.kl_weight = ce_weight, aux_weight, kl_weight
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.momentum = bn_momentum
        self.name_parameters()
        self.theta0 = None
        self.set_phase(Phase.TRAIN)
        self._check_mirror()

    def _check_mirror(self) -> None:
        size = 2 ** self.depth
        x = np.zeros((2, 3, size, size), np.float32)
        g = Graph()
        with self.bn_modes("eval"):
            feats = self.frozen_encoder(g, g.var(x))
            check_mirror(feats, self.decode(g, feats[-1]))

    # -- structure ---------------------------------------------------------------
    def encoders(self) -> list[Encoder]:
        return [self.enc1] + ([self.enc2] if self.two_encoders else [])

    def heads(self) -> list[ClassifierHead]:
        return [self.head1] + ([self.head2] if self.two_encoders else [])

    def adapted_encoders(self) -> list[Encoder]:
        return self.encoders()

    def train_modules(self) -> list[Module]:
        return [*self.encoders(), self.bottleneck, self.decoder, *self.heads()]

    def frozen_modules(self) -> list[Module]:
        return [self.frozen_encoder]

    def init_from_pretrained(self, encoder: Encoder, head: ClassifierHead | None = None) -> None:
        """Load a supervised source encoder into the frozen slot and seed the trainable ones from it."""
        for enc in [self.frozen_encoder, *self.encoders()]:
            copy_state(encoder, enc)
        if head is not None:
            for h in self.heads():
                copy_state(head, h)

    # -- forward pieces ------------------------------------------------------------
    def decode(self, g: Graph, deepest: Var) -> list[Var]:
        return self.decoder(g, self.bottleneck(g, deepest))

    def _streams(self, g: Graph, trainable: list[Var], frozen: list[Var],
                 frozen_decoded: list[Var] | None) -> tuple[Var, Var]:
        """The two cross-reconstruction streams for one (trainable, frozen) pyramid pair."""
        to_frozen = losses.global_cosine_loss(frozen, self.decode(g, trainable[-1]), block_enc_grad=True)
        if frozen_decoded is None:
            frozen_decoded = self.decode(g, frozen[-1])
        to_trainable = losses.global_cosine_loss(trainable, frozen_decoded, block_enc_grad=True)
        return to_frozen, to_trainable

    def aux_forward(self, g: Graph, x: np.ndarray, cache: dict | None = None) -> tuple[Var, dict]:
        """Sum of the four reconstruction streams; also returns the pyramids and per-stream values.

        ``cache`` (adaptation only) holds the frozen encoder's pyramids and
        their decoded reconstructions, which are constant while the decoder
        is frozen.
        """
        xv = g.var(x)
        views = [(self.enc1, xv, "x")]
        if self.two_encoders:
            views.append((self.enc2, g.var(hflip(x)), "x_flip"))
        if cache is None:
            cache = {}
            for _, v, key in views:
                cache[key] = ([f.value for f in self.frozen_encoder(g, v)], None)
        streams, pyramids = [], {}
        for enc, v, key in views:
            feats = enc(g, v)
            frozen_vals, decoded_vals = cache[key]
            frozen = [g.var(f) for f in frozen_vals]
            decoded = None if decoded_vals is None else [g.var(d) for d in decoded_vals]
            streams.extend(self._streams(g, feats, frozen, decoded))
            pyramids[key] = feats
        total = streams[0]
        for s in streams[1:]:
            total = ops.add(total, s)
        return total, {"streams": [s.item() for s in streams], "pyramids": pyramids}

    def adapt_cache(self, x: np.ndarray) -> dict:
        g = Graph()
        out = {}
        views = [("x", x)] + ([("x_flip", hflip(x))] if self.two_encoders else [])
        for key, img in views:
            feats = self.frozen_encoder(g, g.var(img))
            decoded = self.decode(g, feats[-1])
            out[key] = ([f.value for f in feats], [d.value for d in decoded])
        return out

    def adapt_loss(self, g: Graph, x: np.ndarray, cache: Any) -> Var:
        return self.aux_forward(g, x, cache)[0]

    # -- training -----------------------------------------------------------------
    def train_step(self, x: np.ndarray, labels: np.ndarray, opt: SGD, use_aux: bool = True,
                   use_kl: bool = True) -> dict[str, float]:
        self._require(Phase.TRAIN)
        g = Graph()
        if use_aux and self.aux_weight != 0.0:
            aux, info = self.aux_forward(g, x)
            feats = info["pyramids"]
        else:
            aux = None
            feats = {"x": self.enc1(g, g.var(x))}
            if self.two_encoders:
                feats["x_flip"] = self.enc2(g, g.var(hflip(x)))
        logits1 = self.head1(g, feats["x"][-1])
        ce1 = losses.cross_entropy(logits1, labels)
        ce2 = kl = None
        if self.two_encoders:
            logits2 = self.head2(g, feats["x_flip"][-1])
            ce2 = losses.cross_entropy(logits2, labels)
            if use_kl and self.kl_weight != 0.0:
                p, q = ops.softmax(logits1), ops.softmax(logits2)
                kl = losses.symmetric_kl(p, q) if self.kl_symmetric else losses.kl_divergence(p, q)
        total = losses.train_loss(ce1, ce2, aux, kl, self.ce_weight, self.aux_weight, self.kl_weight)
        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite training loss {value}")
        opt.step(g.param_grads(g.backward(total)))
        return {
            "loss": value,
            "ce1": ce1.item(),
            "ce2": ce2.item() if ce2 is not None else 0.0,
            "aux": aux.item() if aux is not None else 0.0,
            "kl": kl.item() if kl is not None else 0.0,
        }

    # -- inference ------------------------------------------------------------------
    def _head_probs(self, g: Graph, enc: Encoder, head: ClassifierHead, x: np.ndarray) -> np.ndarray:
        return ops.softmax(head(g, enc(g, g.var(x))[-1])).value

    def predict(self, x: np.ndarray, bn_mode: str = "eval", single: bool | None = None) -> Prediction:
        """Averaged softmax of both heads (second head on the flipped image); no state changes.

        ``single`` (default: the ``single_inference`` attribute) keeps the first head only.
        """
        single = self.single_inference if single is None else single
        with self.bn_modes(bn_mode):
            g = Graph()
            p1 = self._head_probs(g, self.enc1, self.head1, x)
            if single or not self.two_encoders:
                return Prediction(p1, argmax_lowest(p1), (p1,))
            p2 = self._head_probs(g, self.enc2, self.head2, hflip(x))
        probs = (p1 + p2) / 2
        return Prediction(probs, argmax_lowest(probs), (p1, p2))

    def predict_ensemble(self, x: np.ndarray, bn_mode: str = "eval") -> Prediction:
        return self.predict(x, bn_mode)

    def predict_single(self, x: np.ndarray, bn_mode: str = "eval") -> Prediction:
        return self.predict(x, bn_mode, single=True)

    def pooled_features(self, x: np.ndarray) -> np.ndarray:
        """Globally pooled deepest feature of the first trainable encoder."""
        with self.bn_modes("eval"):
            g = Graph()
            return ops.global_avgpool(self.enc1(g, g.var(x))[-1]).value
