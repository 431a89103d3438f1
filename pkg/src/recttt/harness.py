"""Experiment orchestration: training, evaluation grids, sweeps and reports.

Every random stream is derived from ``Rng(seed)`` by a fixed key path
(``data``, ``pretrain``, ``model/<kind>``, ``epoch/<e>``, ``corrupt/<kind>/<severity>``),
so a (config, seed) pair fully determines every weight and every pixel.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import SGD, Graph
from .baselines import SimSiamModel, predict_ptbn, predict_source
from .config import ExperimentConfig
from .data import CorruptionSpec, Dataset, batch_iter, corrupt, gen_dataset
from .losses import cross_entropy
from .model import Phase, RecTTTModel, TTTModel
from .nn import ClassifierHead, Encoder, Module
from .tensor import Rng

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
REPORT_COLUMNS = (
    "schema_version", "method", "setting", "corruption", "severity", "seed",
    "accuracy", "accuracy_std", "aux_before", "aux_after", "aux_descent_frac",
    "n_samples", "n_batches", "wall_time_s",
)
TIMING_FIELDS = ("wall_time_s",)
MODEL_KINDS = ("recttt", "recttt_single", "simsiam")
TRAIN_LOG_COLUMNS = ("stage", "epoch", "lr", "loss", "ce1", "ce2", "aux", "kl")


class NumericalError(RuntimeError):
    pass


def lr_at(epoch: int, base: float, milestones: Iterable[int], decay: float) -> float:
    """Multi-step schedule: multiply by ``decay`` at every milestone already reached."""
    return base * decay ** sum(epoch >= m for m in milestones)


def method_kind(method: str) -> str:
    return "simsiam" if method == "simsiam_ttt" else "recttt"


# -- training ---------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, stage: str, epoch: int, lr: float, parts: list[dict]) -> None:
        row = {"stage": stage, "epoch": epoch, "lr": lr}
        for key in TRAIN_LOG_COLUMNS[3:]:
            row[key] = float(np.mean([p.get(key, 0.0) for p in parts])) if parts else 0.0
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRAIN_LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
        return path


class _SourceNet(Module):
    def __init__(self, channels, n_classes, rng: Rng):
        self.encoder = Encoder(channels, rng.spawn("encoder"))
        self.head = ClassifierHead(channels[-1], n_classes, rng.spawn("head"))
        self.name_parameters()


def _train_batches(ds: Dataset, batch_size: int, rng: Rng):
    # a trailing single sample cannot be batch-normalized; drop it for that epoch
    for x, y in batch_iter(ds, batch_size, rng, shuffle=True):
        if len(y) >= 2:
            yield x, y


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what}: {value}")


_PRETRAIN_CACHE: dict[tuple, dict[str, np.ndarray]] = {}


def pretrain_source(cfg: ExperimentConfig, seed: int, ds: Dataset,
                    train_log: TrainLog | None = None) -> tuple[Encoder, ClassifierHead]:
    """Supervised training of the reference encoder on clean source data.

    Results are memoized per (seed, data/model/train settings) within the process.
    """
    key = (seed, json.dumps([asdict(cfg.data), asdict(cfg.model), asdict(cfg.train)], sort_keys=True))
    net = _SourceNet(cfg.model.channels, cfg.model.n_classes, Rng(seed).spawn("pretrain"))
    state = net.state()
    if key in _PRETRAIN_CACHE:
        for k, v in _PRETRAIN_CACHE[key].items():
            np.copyto(state[k], v)
        return net.encoder, net.head
    tc = cfg.train
    opt = SGD(tc.lr, tc.momentum, tc.weight_decay)
    rng = Rng(seed).spawn("pretrain", "order")
    for epoch in range(tc.pretrain_epochs):
        opt.lr = lr_at(epoch, tc.lr, tc.pretrain_milestones, tc.lr_decay)
        parts = []
        for x, y in _train_batches(ds, tc.batch_size, rng.spawn(epoch)):
            g = Graph()
            loss = cross_entropy(net.head(g, net.encoder(g, g.var(x))[-1]), y)
            _check_finite(loss.item(), "pretraining loss")
            opt.step(g.param_grads(g.backward(loss)))
            parts.append({"loss": loss.item(), "ce1": loss.item()})
        if train_log is not None:
            train_log.add("pretrain", epoch, opt.lr, parts)
    _PRETRAIN_CACHE[key] = {k: v.copy() for k, v in state.items()}
    return net.encoder, net.head


def build_model(cfg: ExperimentConfig, kind: str, seed: int) -> TTTModel:
    rng = Rng(seed).spawn("model", kind)
    mc, tc = cfg.model, cfg.train
    if kind in ("recttt", "recttt_single"):
        model = RecTTTModel(
            mc.channels, mc.n_classes, rng, two_encoders=(kind == "recttt"),
            adapt_depth=cfg.adapt.depth, bn_momentum=mc.bn_momentum, kl_symmetric=tc.kl_symmetric,
            ce_weight=tc.ce_weight, aux_weight=tc.aux_weight, kl_weight=tc.kl_weight)
        model.single_inference = cfg.ablation.single_encoder_inference
        return model
    if kind == "simsiam":
        sc = cfg.simsiam
        return SimSiamModel(mc.channels, mc.n_classes, rng, sc.proj_hidden, sc.proj_out, sc.pred_hidden,
                            sc.stop_grad, cfg.adapt.depth, sc.weight, mc.bn_momentum)
    raise ValueError(f"unknown model kind {kind!r}")


def train_model(cfg: ExperimentConfig, seed: int, kind: str = "recttt",
                train_log: TrainLog | None = None) -> TTTModel:
    """Pretrain the source encoder, then train the full model jointly on clean data."""
    train_log = train_log if train_log is not None else TrainLog()
    ds = gen_dataset(Rng(seed).spawn("data"), cfg.data.n_train, "train")
    encoder, head = pretrain_source(cfg, seed, ds, train_log)
    model = build_model(cfg, kind, seed)
    model.init_from_pretrained(encoder, head)
    model.set_phase(Phase.TRAIN)
    tc = cfg.train
    opt = SGD(tc.lr, tc.momentum, tc.weight_decay)
    order = Rng(seed).spawn("train", kind)
    use_aux = not cfg.ablation.aux_off
    use_kl = not cfg.ablation.kl_off
    for epoch in range(tc.epochs):
        opt.lr = lr_at(epoch, tc.lr, tc.milestones, tc.lr_decay)
        parts = []
        for x, y in _train_batches(ds, tc.batch_size, order.spawn(epoch)):
            try:
                if isinstance(model, RecTTTModel):
                    parts.append(model.train_step(x, y, opt, use_aux=use_aux, use_kl=use_kl))
                else:
                    parts.append(model.train_step(x, y, opt))
            except FloatingPointError as exc:
                raise NumericalError(str(exc)) from exc
        train_log.add(kind, epoch, opt.lr, parts)
        log.info("seed %d %s epoch %d: %s", seed, kind, epoch, train_log.rows[-1])
    model.set_phase(Phase.INFER)
    return model


# -- checkpoints ----------------------------------------------------------------------

def model_to_checkpoint(model: TTTModel, cfg: ExperimentConfig, kind: str, seed: int) -> ckpt_io.CheckpointFile:
    meta = {"kind": kind, "seed": seed, "epoch": cfg.train.epochs,
            "config_hash": cfg.hash(), "config": cfg.content_dict()}
    return ckpt_io.CheckpointFile(meta, {k: v.copy() for k, v in model.state().items()})


def model_from_checkpoint(ck: ckpt_io.CheckpointFile, cfg: ExperimentConfig | None = None) -> TTTModel:
    """Rebuild the architecture from ``cfg`` (default: the config stored in the file) and load weights."""
    from .config import from_dict

    if cfg is None:
        cfg = from_dict(ck.metadata["config"])
    model = build_model(cfg, ck.metadata["kind"], int(ck.metadata["seed"]))
    ckpt_io.load_into(model.state(), ck.tensors)
    model.set_phase(Phase.INFER)
    return model


def checkpoint_name(kind: str, seed: int) -> str:
    return f"model_{kind}_seed{seed}.rctt"


class ModelStore:
    """Trained models by (kind, seed): memory first, then ``ckpt_dir``, then training on demand."""

    def __init__(self, cfg: ExperimentConfig, ckpt_dir: str | Path | None = None,
                 train_missing: bool = True, save: bool = True):
        self.cfg = cfg
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
        self.train_missing = train_missing
        self.save = save
        self.models: dict[tuple[str, int], TTTModel] = {}
        self.logs: dict[tuple[str, int], TrainLog] = {}

    def put(self, kind: str, seed: int, model: TTTModel) -> None:
        self.models[(kind, seed)] = model

    def get(self, kind: str, seed: int) -> TTTModel:
        key = (kind, seed)
        if key in self.models:
            return self.models[key]
        path = self.ckpt_dir / checkpoint_name(kind, seed) if self.ckpt_dir else None
        if path is not None and path.exists():
            model = model_from_checkpoint(ckpt_io.load_checkpoint(path), self.cfg)
        elif self.train_missing:
            self.logs[key] = TrainLog()
            model = train_model(self.cfg, seed, kind, self.logs[key])
            if path is not None and self.save:
                ckpt_io.save_checkpoint(path, model_to_checkpoint(model, self.cfg, kind, seed))
                self.logs[key].write_csv(path.with_suffix(".train.csv"))
        else:
            raise FileNotFoundError(f"no checkpoint for {kind} seed {seed} in {self.ckpt_dir}")
        self.models[key] = model
        return model


# -- evaluation ----------------------------------------------------------------------

def make_test_suite(cfg: ExperimentConfig, seed: int, include_clean: bool = False,
                    severity: int | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Corrupted copies of the seed's test split, keyed by corruption kind."""
    rng = Rng(seed)
    test = gen_dataset(rng.spawn("data"), cfg.data.n_test, "test")
    sev = cfg.data.severity if severity is None else severity
    suite = {"clean": (test.images, test.labels)} if include_clean else {}
    for kind in cfg.data.corruptions:
        spec = CorruptionSpec(kind, sev)
        suite[kind] = (corrupt(test.images, spec, rng.spawn("corrupt", kind, sev)), test.labels)
    return suite


def split_batches(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing batch of one sample is merged into the previous one."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray
    aux_before: float | None = None
    aux_after: float | None = None
    aux_descent_frac: float | None = None
    n_batches: int = 0
    wall_time_s: float = 0.0


ADAPTIVE_METHODS = ("recttt", "simsiam_ttt")


def evaluate(model: TTTModel, method: str, x: np.ndarray, y: np.ndarray, batch_size: int,
             T: int = 0, lr: float = 0.0, momentum: float = 0.0, measure_aux: bool = True,
             single: bool | None = None, hook: Callable | None = None) -> EvalResult:
    """Run one method over a stream of test batches (in order, reset between batches)."""
    start = time.perf_counter()
    preds, before, after = [], [], []
    saved_single = getattr(model, "single_inference", None)
    if single is not None and saved_single is not None:
        model.single_inference = single
    try:
        if method in ADAPTIVE_METHODS:
            model.set_phase(Phase.ADAPT)
        for sl in split_batches(len(y), batch_size):
            xb = x[sl]
            if method == "source":
                p = predict_source(model, xb)
            elif method == "ptbn":
                p = predict_ptbn(model, xb)
            elif method in ADAPTIVE_METHODS:
                res = model.adapt_batch(xb, T, lr, momentum, measure_aux=measure_aux,
                                        hook=(lambda m, s=sl: hook(m, s)) if hook else None)
                p = res.prediction
                if measure_aux:
                    before.append(res.aux_before)
                    after.append(res.aux_after)
            else:
                raise ValueError(f"unknown method {method!r}")
            preds.append(p.labels)
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from exc
    finally:
        if method in ADAPTIVE_METHODS:
            model.set_phase(Phase.INFER)
        if saved_single is not None:
            model.single_inference = saved_single
    labels = np.concatenate(preds)
    acc = float(100.0 * np.mean(labels == y))
    res = EvalResult(acc, labels, n_batches=len(preds), wall_time_s=time.perf_counter() - start)
    if before:
        b, a = np.array(before), np.array(after)
        res.aux_before, res.aux_after = float(b.mean()), float(a.mean())
        res.aux_descent_frac = float(np.mean(a < b))
    return res


@dataclass
class Setting:
    """One evaluation cell: method plus the knobs a sweep may vary."""

    method: str
    label: str = ""
    T: int | None = None
    batch_size: int | None = None
    depth: int | None = None
    kind: str | None = None
    single: bool | None = None


def run_setting(cfg: ExperimentConfig, store: ModelStore, setting: Setting, seeds: Iterable[int],
                suites: dict[int, dict] | None = None) -> list[dict]:
    rows = []
    for seed in seeds:
        kind = setting.kind or method_kind(setting.method)
        model = store.get(kind, seed)
        saved_depth = model.adapt_depth
        if setting.depth is not None:
            model.adapt_depth = setting.depth
        suite = suites[seed] if suites and seed in suites else make_test_suite(cfg, seed)
        T = cfg.adapt.iterations if setting.T is None else setting.T
        bs = cfg.adapt.batch_size if setting.batch_size is None else setting.batch_size
        try:
            for corruption, (x, y) in suite.items():
                r = evaluate(model, setting.method, x, y, bs, T, cfg.adapt.lr, cfg.adapt.momentum,
                             single=setting.single)
                rows.append({
                    "schema_version": REPORT_SCHEMA_VERSION, "method": setting.method,
                    "setting": setting.label, "corruption": corruption, "severity": cfg.data.severity,
                    "seed": seed, "accuracy": r.accuracy, "accuracy_std": None,
                    "aux_before": r.aux_before, "aux_after": r.aux_after,
                    "aux_descent_frac": r.aux_descent_frac, "n_samples": int(len(y)),
                    "n_batches": r.n_batches, "wall_time_s": r.wall_time_s,
                })
                log.info("%s %s seed %d %s: %.2f%%", setting.method, setting.label, seed, corruption, r.accuracy)
        finally:
            model.adapt_depth = saved_depth
    return rows


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows: list[dict]) -> list[dict]:
    """Add per-seed corruption averages and mean/std-over-seeds rows."""
    out = list(rows)
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["setting"], r["seed"]), []).append(r)
    for (method, setting, seed), rs in groups.items():
        out.append({
            **{k: None for k in REPORT_COLUMNS}, "schema_version": REPORT_SCHEMA_VERSION,
            "method": method, "setting": setting, "corruption": "average",
            "severity": rs[0]["severity"], "seed": seed,
            "accuracy": _mean(r["accuracy"] for r in rs),
            "aux_before": _mean(r["aux_before"] for r in rs),
            "aux_after": _mean(r["aux_after"] for r in rs),
            "aux_descent_frac": _mean(r["aux_descent_frac"] for r in rs),
            "n_samples": sum(r["n_samples"] for r in rs), "n_batches": sum(r["n_batches"] for r in rs),
            "wall_time_s": float(sum(r["wall_time_s"] for r in rs)),
        })
    cells: dict[tuple, list[dict]] = {}
    for r in out:
        cells.setdefault((r["method"], r["setting"], r["corruption"]), []).append(r)
    for (method, setting, corruption), rs in cells.items():
        accs = np.array([r["accuracy"] for r in rs])
        out.append({
            **{k: None for k in REPORT_COLUMNS}, "schema_version": REPORT_SCHEMA_VERSION,
            "method": method, "setting": setting, "corruption": corruption,
            "severity": rs[0]["severity"], "seed": "mean",
            "accuracy": float(accs.mean()),
            "accuracy_std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
            "aux_before": _mean(r["aux_before"] for r in rs),
            "aux_after": _mean(r["aux_after"] for r in rs),
            "aux_descent_frac": _mean(r["aux_descent_frac"] for r in rs),
            "n_samples": sum(r["n_samples"] for r in rs), "n_batches": sum(r["n_batches"] for r in rs),
            "wall_time_s": float(sum(r["wall_time_s"] for r in rs)),
        })
    return out


def summary(rows: list[dict]) -> dict[str, dict[str, dict[str, float]]]:
    """``{method/setting: {corruption: {"mean": .., "std": ..}}}`` from aggregated rows."""
    out: dict = {}
    for r in rows:
        if r["seed"] != "mean":
            continue
        key = r["method"] + (f"/{r['setting']}" if r["setting"] else "")
        out.setdefault(key, {})[r["corruption"]] = {"mean": r["accuracy"], "std": r["accuracy_std"]}
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_report(rows: list[dict], cfg: ExperimentConfig, out_dir: str | Path,
                 stem: str = "report", extra: dict | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in REPORT_COLUMNS])
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "config": cfg.content_dict(),
        "rows": rows,
        "summary": summary(rows),
        **(extra or {}),
    }
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return csv_path, json_path


def strip_timing(doc):
    """Copy of a report document without wall-time fields (for reproducibility comparisons)."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k not in TIMING_FIELDS}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc


# -- sweeps ---------------------------------------------------------------------------

def sweep_settings(cfg: ExperimentConfig, axis: str) -> list[Setting]:
    sc = cfg.sweep
    if axis == "iterations":
        return [Setting("recttt", f"T={t}", T=t) for t in sc.iterations]
    if axis == "batch_size":
        return [Setting(m, f"bs={b}", batch_size=b) for b in sc.batch_sizes for m in ("recttt", "ptbn")]
    if axis == "depth":
        return [Setting("recttt", f"depth={d}", depth=d) for d in sc.depths]
    if axis == "ensemble":
        table = {
            "two": Setting("recttt", "two", kind="recttt", single=False),
            "one_train": Setting("recttt", "one_train", kind="recttt_single"),
            "one_infer": Setting("recttt", "one_infer", kind="recttt", single=True),
        }
        return [table[m] for m in sc.ensemble]
    raise ValueError(f"unknown sweep axis {axis!r}")


def run_sweep(cfg: ExperimentConfig, store: ModelStore, axis: str,
              seeds: Iterable[int] | None = None) -> list[dict]:
    seeds = list(cfg.seeds if seeds is None else seeds)
    suites = {s: make_test_suite(cfg, s) for s in seeds}
    rows = []
    for setting in sweep_settings(cfg, axis):
        rows.extend(run_setting(cfg, store, setting, seeds, suites))
    return aggregate(rows)


# -- feature dump ------------------------------------------------------------------------

def dump_features(model: TTTModel, x: np.ndarray, y: np.ndarray, out_path: str | Path,
                  T: int, lr: float, batch_size: int, momentum: float = 0.0,
                  id_prefix: str = "test") -> Path:
    """Pooled deepest features per sample before (iteration 0) and after T adaptation steps."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    model.set_phase(Phase.ADAPT)
    try:
        for sl in split_batches(len(y), batch_size):
            xb = x[sl]
            ids = [f"{id_prefix}-{i}" for i in range(sl.start, sl.stop)]
            before = model.pooled_features(xb)
            res = model.adapt_batch(xb, T, lr, momentum, measure_aux=False, hook=lambda m: m.pooled_features(xb))
            for it, feats in ((0, before), (T, res.extra)):
                for sid, label, f in zip(ids, y[sl], feats):
                    rows.append([sid, int(label), it, *(f"{v:.6g}" for v in f)])
    finally:
        model.set_phase(Phase.INFER)
    width = len(rows[0]) - 3 if rows else 0
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "iteration", *(f"f{i}" for i in range(width))])
        w.writerows(rows)
    return out_path
