"""Reconstruction, classification and consistency losses."""
from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from . import ops
from .autodiff import Var, stop_gradient
from .tensor import ShapeError

NORM_EPS = 1e-8
PROB_EPS = 1e-8

# incremented whenever a reconstruction layer has zero norm
diagnostics: Counter = Counter()


def global_cosine_loss(enc: Sequence[Var], dec: Sequence[Var], block_enc_grad: bool = True) -> Var:
    """Sum over layers of ``1 - cos(sg(enc_l), dec_l)``.

    Each layer is flattened per sample (everything after the batch axis) and
    the per-sample cosine is averaged over the batch; a 1-D layer is treated as
    a single flattened sample.  With ``block_enc_grad`` the encoder side
    (including its norm) is behind a stop-gradient.
    """
    if len(enc) != len(dec):
        raise ShapeError(f"pyramids have {len(enc)} and {len(dec)} layers")
    if not enc:
        raise ShapeError("empty pyramid")
    g = enc[0].graph
    cos_total = None
    for layer, (e, d) in enumerate(zip(enc, dec)):
        if e.shape != d.shape:
            raise ShapeError(f"layer {layer}: {e.shape} vs {d.shape}")
        if block_enc_grad:
            e = stop_gradient(e)
        rowwise = e.value.ndim > 1
        num = ops.dot(e, d, rowwise=rowwise)
        ne, nd = ops.norm2(e, rowwise=rowwise), ops.norm2(d, rowwise=rowwise)
        if np.any(ne.value == 0) or np.any(nd.value == 0):
            diagnostics["zero_norm"] += 1
        cos = ops.div(num, ops.clamp_min(ops.mul(ne, nd), NORM_EPS))
        cos = ops.mean(cos)
        cos_total = cos if cos_total is None else ops.add(cos_total, cos)
    return ops.sub(g.var(np.asarray(float(len(enc)))), cos_total)


def cross_entropy(logits: Var, labels) -> Var:
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels {labels.shape} for logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ops.sum(ops.mul(ops.log_softmax(logits), logits.graph.var(onehot)))
    return ops.scale(picked, -1.0 / n)


def _check_dist(p: Var, tol: float) -> None:
    rows = p.value.sum(axis=-1, dtype=np.float64)
    if np.any(np.abs(rows - 1.0) > tol) or np.any(p.value < 0):
        raise ValueError("rows must be non-negative and sum to 1")


def kl_divergence(p: Var, q: Var, tol: float = 1e-5) -> Var:
    """Batch mean of ``sum_k p_k log(p_k / q_k)``; both sides clamped at PROB_EPS inside the log."""
    if p.shape != q.shape:
        raise ShapeError(f"{p.shape} vs {q.shape}")
    _check_dist(p, tol)
    _check_dist(q, tol)
    logp = ops.log(ops.clamp_min(p, PROB_EPS))
    logq = ops.log(ops.clamp_min(q, PROB_EPS))
    total = ops.sum(ops.mul(p, ops.sub(logp, logq)))
    return ops.scale(total, 1.0 / p.shape[0])


def symmetric_kl(p: Var, q: Var) -> Var:
    return ops.scale(ops.add(kl_divergence(p, q), kl_divergence(q, p)), 0.5)


def train_loss(ce1: Var, ce2: Var | None, aux_total: Var | None, kl: Var | None,
               ce_weight: float = 1.0, aux_weight: float = 1.0, kl_weight: float = 1.0) -> Var:
    """Weighted sum of the classification, reconstruction and consistency terms."""
    ce = ce1 if ce2 is None else ops.add(ce1, ce2)
    total = ops.scale(ce, ce_weight) if ce_weight != 1.0 else ce
    for term, w in ((aux_total, aux_weight), (kl, kl_weight)):
        if term is None or w == 0.0:
            continue
        total = ops.add(total, term if w == 1.0 else ops.scale(term, w))
    return total


def negative_cosine(a: Var, b: Var) -> Var:
    """Batch mean of ``-cos(a_i, b_i)`` over rows; no stop-gradient is applied here."""
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    num = ops.dot(a, b, rowwise=True)
    den = ops.clamp_min(ops.mul(ops.norm2(a, rowwise=True), ops.norm2(b, rowwise=True)), NORM_EPS)
    return ops.scale(ops.mean(ops.div(num, den)), -1.0)
