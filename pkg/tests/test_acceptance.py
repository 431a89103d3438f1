"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 6-10 share one session of trained models (acceptance preset, 3
seeds).  Run ``pytest tests/test_acceptance.py`` to get the per-criterion
summary at the end of the output.
"""
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from recttt import checkpoint as ck
from recttt import gradcheck, harness, losses, ops
from recttt.autodiff import SGD, Graph, stop_gradient
from recttt.cli import EXIT_IO, main
from recttt.config import load_config
from recttt.data import CorruptionSpec, corrupt, gen_dataset
from recttt.harness import ModelStore, Setting, aggregate, make_test_suite, run_setting, strip_timing
from recttt.model import Phase, RecTTTModel, Snapshot, copy_state
from recttt.nn import Decoder, Encoder
from recttt.tensor import Rng

ROOT = Path(__file__).resolve().parents[1]
NOISE_FAMILY = ("gaussian_noise", "impulse_noise")


def _detail(request, text: str) -> None:
    request.node.user_properties.append(("detail", text))
    print(text)


# -- 1-5: contracts ------------------------------------------------------------------------

def test_criterion_01_gradients(request):
    start = time.perf_counter()
    results = gradcheck.run_gradcheck(seed=0, instances=20)
    seconds = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel for r in results)
    _detail(request, f"{len(results)} ops x 20 instances, worst rel err {worst:.2e}, {seconds:.1f}s, failed {failed}")
    names = {r.name for r in results}
    assert {"global_cosine_loss", "cross_entropy", "kl_divergence"} <= names
    assert not failed
    assert seconds < 30


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_criterion_02_loss_oracles(request):
    rng = np.random.default_rng(2)
    worst = {"cosine": 0.0, "ce": 0.0, "kl": 0.0}
    for _ in range(100):
        enc = [rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((3, 7))]
        dec = [rng.standard_normal(e.shape) for e in enc]
        g = Graph()
        got = losses.global_cosine_loss([g.var(e) for e in enc], [g.var(d) for d in dec]).item()
        ref = 0.0
        for e, d in zip(enc, dec):
            e2 = e.astype(np.float32).astype(np.float64).reshape(3, -1)
            d2 = d.astype(np.float32).astype(np.float64).reshape(3, -1)
            cos = [float(a @ b) / math.sqrt(float(a @ a) * float(b @ b)) for a, b in zip(e2, d2)]
            ref += 1.0 - sum(cos) / 3
        worst["cosine"] = max(worst["cosine"], abs(got - ref))

        logits = rng.standard_normal((6, 4)) * 2
        labels = rng.integers(0, 4, 6)
        got = losses.cross_entropy(g.var(logits), labels).item()
        l32 = logits.astype(np.float32).astype(np.float64)
        ref = sum(math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(l32, labels)) / 6
        worst["ce"] = max(worst["ce"], abs(got - ref))

        p, q = _softmax(rng.standard_normal((5, 4))), _softmax(rng.standard_normal((5, 4)))
        got = losses.kl_divergence(g.var(p), g.var(q)).item()
        p32, q32 = p.astype(np.float32).astype(np.float64), q.astype(np.float32).astype(np.float64)
        ref = sum(a * math.log(a / b) for pr, qr in zip(p32, q32) for a, b in zip(pr, qr)) / 5
        worst["kl"] = max(worst["kl"], abs(got - ref))

    g = Graph()
    pyr = [g.var(rng.standard_normal((2, 3, 4, 4))), g.var(rng.standard_normal((2, 5)))]
    same = losses.global_cosine_loss(pyr, pyr).item()
    p = g.var(_softmax(rng.standard_normal((3, 4))))
    pq = losses.kl_divergence(p, p).item()
    ln4 = losses.cross_entropy(g.var(np.zeros((4, 4))), [0, 1, 2, 3]).item()
    _detail(request, f"max |diff| cosine {worst['cosine']:.1e} ce {worst['ce']:.1e} kl {worst['kl']:.1e}; "
                     f"anchors {same:.1e} {pq:.1e} {ln4 - math.log(4):.1e}")
    assert max(worst.values()) <= 1e-5
    assert abs(same) <= 1e-6 and pq == 0.0 and abs(ln4 - math.log(4)) <= 1e-6


def test_criterion_03_stop_gradient(request):
    rng = Rng(3)
    enc, dec = Encoder([4, 8, 8], rng.spawn("enc")), Decoder([4, 8, 8], rng.spawn("dec"))
    x = gen_dataset(Rng(4), 4, size=8).images
    z = np.random.default_rng(5).standard_normal((4, 8, 2, 2)).astype(np.float32)

    def enc_grads(block: bool):
        g = Graph()
        target = enc(g, g.var(x))
        loss = losses.global_cosine_loss(target, dec(g, g.var(z)), block_enc_grad=block)
        grads = {id(p): gp for p, gp in g.param_grads(g.backward(loss))}
        return [grads[id(p)] for p in enc.parameters()]

    blocked = enc_grads(True)
    free = enc_grads(False)
    zero = all(np.array_equal(gp, np.zeros_like(gp)) for gp in blocked)
    nonzero = any(np.abs(gp).max() > 0 for gp in free)

    # inside the model: the stream that reconstructs a trainable encoder's pyramid sends it nothing
    m = RecTTTModel([4, 8, 8], 4, Rng(6))
    g = Graph()
    feats = m.enc1(g, g.var(x))
    frozen = [g.var(f.value) for f in m.frozen_encoder(g, g.var(x))]
    loss = losses.global_cosine_loss(feats, m.decode(g, frozen[-1]))
    grads = {id(p): gp for p, gp in g.param_grads(g.backward(loss))}
    model_zero = all(np.array_equal(grads[id(p)], np.zeros_like(p.value)) for p in m.enc1.parameters())
    _detail(request, f"sg branch all-zero {zero}; without sg nonzero {nonzero}; model stream zero {model_zero}")
    assert zero and nonzero and model_zero


@pytest.fixture(scope="module")
def small_trained():
    cfg = load_config(ROOT / "configs" / "smoke.json")
    return cfg, ModelStore(cfg).get("recttt", 0)


def test_criterion_04_algorithm1(request, small_trained):
    cfg, model = small_trained
    test = gen_dataset(Rng(0).spawn("data"), 120, "test")
    x = corrupt(test.images, CorruptionSpec("gaussian_noise"), Rng(7))
    model.set_phase(Phase.INFER)
    source = model.predict(x[:24])
    model.set_phase(Phase.ADAPT)
    trainable = {n: p.value.copy() for n, p in model.named_parameters() if p.trainable}
    t0 = model.adapt_batch(x[:24], 0, cfg.adapt.lr)
    a = np.array_equal(t0.prediction.probs, source.probs)

    model.adapt_batch(x[:24], 5, 0.05, momentum=0.9)
    b = all(np.array_equal(trainable[n], p.value) for n, p in model.named_parameters() if p.trainable)
    b = b and model.theta0.equals(model.adapt_state())

    batches = [x[i:i + 12] for i in range(0, 120, 12)]
    forward = [model.adapt_batch(xb, 3, 0.05, measure_aux=False).prediction.probs for xb in batches]
    perm = Rng(8).permutation(10)
    permuted = {int(i): model.adapt_batch(batches[i], 3, 0.05, measure_aux=False).prediction.probs for i in perm}
    c = all(np.array_equal(forward[i], permuted[i]) for i in range(10))
    model.set_phase(Phase.INFER)
    _detail(request, f"(a) T=0 == source {a}; (b) weights == theta0 {b}; (c) permutation-invariant {c}")
    assert a and b and c


def test_criterion_05_phase_freeze(request, small_trained):
    cfg, trained = small_trained
    model = RecTTTModel(cfg.model.channels, cfg.model.n_classes, Rng(9))
    copy_state(trained, model)
    x = gen_dataset(Rng(10), 16).images
    y = gen_dataset(Rng(10), 16).labels
    names = [n for n, _ in model.named_parameters()]

    def changed(step):
        before = Snapshot.capture({n: p.value for n, p in model.named_parameters()})
        step()
        return {n for n, p in model.named_parameters() if not np.array_equal(before.arrays[n], p.value)}

    model.set_phase(Phase.TRAIN)
    train = changed(lambda: model.train_step(x, y, SGD(0.1, momentum=0.9)))
    ok_train = train == {n for n in names if not n.startswith("frozen_encoder.")}

    ok_adapt = True
    for depth in (1, 2, 3):
        model.adapt_depth = depth
        model.set_phase(Phase.ADAPT)
        allowed = {n for n in names if n.split(".")[0] in ("enc1", "enc2")
                   and (n.split(".")[1] == "stem" or (n.split(".")[1] == "blocks" and int(n.split(".")[2]) < depth))}

        def adapt_steps():
            opt = SGD(0.1)
            for _ in range(2):
                model.adapt_step(x, opt, model.adapt_cache(x))
        ok_adapt = ok_adapt and changed(adapt_steps) == allowed
        model.restore_theta0()

    model.set_phase(Phase.INFER)

    def infer_step():
        g = Graph()
        SGD(1.0).step(g.param_grads(g.backward(model.aux_forward(g, x)[0])))
        model.predict(x)
    ok_infer = changed(infer_step) == set()
    _detail(request, f"train {ok_train}, adapt(depth 1-3) {ok_adapt}, infer {ok_infer}")
    assert ok_train and ok_adapt and ok_infer


# -- 6-10: measured effects ---------------------------------------------------------------------

@dataclass
class Session:
    cfg: object
    store: ModelStore
    suites: dict
    cache: dict = field(default_factory=dict)
    train_seconds: dict = field(default_factory=dict)

    def model(self, kind: str, seed: int):
        if (kind, seed) not in self.store.models:
            start = time.perf_counter()
            self.store.get(kind, seed)
            self.train_seconds[(kind, seed)] = time.perf_counter() - start
        return self.store.models[(kind, seed)]

    def rows(self, setting: Setting) -> list[dict]:
        key = (setting.method, setting.label, setting.kind)
        if key not in self.cache:
            kind = setting.kind or harness.method_kind(setting.method)
            for s in self.cfg.seeds:
                self.model(kind, s)
            self.cache[key] = aggregate(run_setting(self.cfg, self.store, setting, self.cfg.seeds, self.suites))
        return self.cache[key]

    def mean(self, setting: Setting, corruption: str = "average") -> float:
        return next(r["accuracy"] for r in self.rows(setting)
                    if r["seed"] == "mean" and r["corruption"] == corruption)


@pytest.fixture(scope="module")
def session():
    cfg = load_config(ROOT / "configs" / "acceptance.json")
    suites = {s: make_test_suite(cfg, s) for s in cfg.seeds}
    return Session(cfg, ModelStore(cfg), suites)


SOURCE = Setting("source")
RECTTT = Setting("recttt")


def test_criterion_06_headline(request, session):
    start = time.perf_counter()
    rec = session.rows(RECTTT)
    src_mean, rec_mean = session.mean(SOURCE), session.mean(RECTTT)
    seconds = time.perf_counter() - start
    per_seed = [r for r in rec if r["seed"] != "mean" and r["corruption"] != "average"]
    batches = sum(r["n_batches"] for r in per_seed)
    descended = sum(r["aux_descent_frac"] * r["n_batches"] for r in per_seed)
    frac = descended / batches
    _detail(request, f"recttt {rec_mean:.2f} vs source {src_mean:.2f} (gain {rec_mean - src_mean:+.2f}); "
                     f"aux descent on {frac:.1%} of {batches} batches; {seconds / 60:.1f} min")
    assert rec_mean - src_mean >= 5.0
    assert frac >= 0.9
    assert seconds <= 15 * 60


def test_criterion_07_iterations(request, session):
    t1, t20, t50 = (Setting("recttt", f"T={t}", T=t) for t in (1, 20, 50))
    noise = {c: (session.mean(t1, c), session.mean(RECTTT, c)) for c in NOISE_FAMILY}
    avg20, avg50 = session.mean(RECTTT), session.mean(t50)
    text = ", ".join(f"{c} T1 {a:.2f} T20 {b:.2f}" for c, (a, b) in noise.items())
    _detail(request, f"{text}; average T20 {avg20:.2f} T50 {avg50:.2f}")
    assert all(b >= a for a, b in noise.values())
    assert abs(avg50 - avg20) <= 2.0


def test_criterion_08_batch_size(request, session):
    bs64 = session.mean(Setting("recttt", "bs=64", batch_size=64))
    bs8 = session.mean(Setting("recttt", "bs=8", batch_size=8))
    ptbn8 = session.mean(Setting("ptbn", "bs=8", batch_size=8))
    _detail(request, f"recttt bs64 {bs64:.2f} bs8 {bs8:.2f} (drop {bs64 - bs8:.2f}); ptbn bs8 {ptbn8:.2f}")
    assert bs64 - bs8 <= 4.0
    assert bs8 > ptbn8


def test_criterion_09_ensemble(request, session):
    two = session.mean(Setting("recttt", "two", kind="recttt", single=False))
    one_train = session.mean(Setting("recttt", "one_train", kind="recttt_single"))
    one_infer = session.mean(Setting("recttt", "one_infer", kind="recttt", single=True))
    between = min(two, one_train) <= one_infer <= max(two, one_train)
    _detail(request, f"two {two:.2f}, one_train {one_train:.2f}, one_infer {one_infer:.2f}")
    assert two >= one_train
    assert between or abs(one_infer - two) <= 1.0


def test_criterion_10_simsiam(request, session):
    rec, sim = session.mean(RECTTT), session.mean(Setting("simsiam_ttt"))
    _detail(request, f"recttt {rec:.2f} vs simsiam-ttt {sim:.2f}")
    assert rec >= sim


# -- 11: reproducibility and formats -------------------------------------------------------------

def test_criterion_11_reproducibility(request, tmp_path, monkeypatch):
    smoke = ROOT / "configs" / "smoke.json"
    blobs, reports = [], []
    for run in ("a", "b"):
        monkeypatch.setattr(harness, "_PRETRAIN_CACHE", {})
        out = tmp_path / run
        assert main(["train", "--config", str(smoke), "--out", str(out)]) == 0
        assert main(["eval", "--ckpt", str(out), "--config", str(smoke), "--method", "recttt",
                     "--out", str(out)]) == 0
        blobs.append((out / "model_recttt_seed0.rctt").read_bytes())
        reports.append(json.loads((out / "report.json").read_text()))
    same_ckpt = blobs[0] == blobs[1]
    same_report = strip_timing(reports[0]) == strip_timing(reports[1])

    loaded = ck.load_checkpoint(tmp_path / "a" / "model_recttt_seed0.rctt")
    resaved = ck.save_checkpoint(tmp_path / "resaved.rctt", loaded)
    round_trip = resaved.read_bytes() == blobs[0]

    codes = {}
    bad = tmp_path / "bad"
    bad.mkdir()
    damaged = {"magic": b"ZZZZ" + blobs[0][4:], "version": blobs[0][:4] + (7).to_bytes(4, "little") + blobs[0][8:],
               "truncated": blobs[0][:-10]}
    expected = {"magic": ck.BadMagicError, "version": ck.BadVersionError, "truncated": ck.TruncatedError}
    for name, raw in damaged.items():
        path = bad / f"{name}.rctt"
        path.write_bytes(raw)
        codes[name] = main(["eval", "--ckpt", str(path), "--config", str(smoke), "--out", str(tmp_path / "e")])
        with pytest.raises(expected[name]):
            ck.load_checkpoint(path)
    _detail(request, f"checkpoints identical {same_ckpt}, reports identical {same_report}, "
                     f"round trip {round_trip}, exit codes {codes}")
    assert same_ckpt and same_report and round_trip
    assert all(code == EXIT_IO for code in codes.values())
