"""Adam + cosine schedule + early stopping, the component ablation grid, and diagnostics."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core.tensor import Tensor, backward, no_grad
from .data import Sample, augment, stack
from .losses import LossConfig, total_loss
from .metrics import clf_metrics, seg_metrics
from .network import N_LEVELS, ModelConfig, MultiTaskNet, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "loss_total", "loss_ft", "loss_boundary", "loss_texture", "loss_clf",
                   "val_iou", "val_dice", "val_acc", "val_f1", "val_auc")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr0: float = 3e-4
    lr_min: float = 1.5e-6
    patience: int = 10
    seed: int = 0
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.lr_min < self.lr0:
            raise ValueError(f"need 0 < lr_min < lr0, got lr_min={self.lr_min}, lr0={self.lr0}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        self.loss.validate()
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Per-epoch cosine annealing from ``lr0`` (first epoch) to ``lr_min`` (last epoch)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr0
    c = 0.5 * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    span = cfg.lr0 - cfg.lr_min
    # anchor each half at its own endpoint so both ends are exact in floating point
    return cfg.lr0 - span * (1.0 - c) if c >= 0.5 else cfg.lr_min + span * c


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        for i, g in enumerate(grads):
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient in parameter #{i} (shape {g.shape}); step rejected")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ evaluation

def predict(model: MultiTaskNet, images: np.ndarray, batch_size: int = 16):
    """Sigmoid masks ``(N, H, W, 1)`` and softmax class probabilities ``(N, C)``."""
    was_training = model.training
    model.eval()
    seg, clf = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = model(images[i:i + batch_size])
            seg.append(1.0 / (1.0 + np.exp(-out.seg_logits.data)))
            z = out.clf_logits.data
            e = np.exp(z - z.max(axis=1, keepdims=True))
            clf.append(e / e.sum(axis=1, keepdims=True))
    model.train(was_training)
    return np.concatenate(seg), np.concatenate(clf)


def evaluate(model: MultiTaskNet, samples: Sequence[Sample], batch_size: int = 16):
    images, masks, labels = stack(samples)
    seg, probs = predict(model, images, batch_size)
    with warnings.catch_warnings():
        # small validation splits may miss a class; macro averages then skip it
        warnings.simplefilter("ignore", UserWarning)
        cm = clf_metrics(probs, labels, model.config.num_classes)
    return seg_metrics(seg, masks), cm


def metric_dict(sm, cm) -> dict:
    return {"iou": sm.iou, "dice": sm.dice, "sens": sm.sensitivity, "seg_prec": sm.precision,
            "acc": cm.accuracy, "f1": cm.macro_f1, "auc": cm.macro_auc, "clf_prec": cm.macro_precision}


def selection_score(metrics: dict) -> float:
    return 0.5 * (metrics["dice"] + metrics["acc"])


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: MultiTaskNet
    history: list
    best_epoch: int
    best_score: float
    best_metrics: dict
    epochs_run: int
    checkpoint: Optional[Path] = None


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # a single-sample batch has degenerate batch statistics; fold it into the previous one
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _fmt(v) -> str:
    return repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v))


def write_history(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in HISTORY_COLUMNS])
    return path


def train(model: MultiTaskNet, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          cfg: TrainConfig, out_dir=None,
          evaluator: Optional[Callable[[MultiTaskNet, int], dict]] = None,
          stop_when: Optional[Callable[[dict], bool]] = None) -> TrainResult:
    """Optimize ``model`` in place and restore the best validation weights.

    ``evaluator(model, epoch)`` returns a dict with at least ``dice`` and
    ``acc``; by default the validation samples are scored.  ``stop_when``
    ends training early once it returns True for an epoch's metrics.
    """
    cfg.validate()
    if not train_samples:
        raise ValueError("train: empty training split")
    if evaluator is None:
        if not val_samples:
            raise ValueError("train: empty validation split")

        def evaluator(m, epoch):
            return metric_dict(*evaluate(m, val_samples, max(cfg.batch_size, 16)))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    images, masks, labels = stack(train_samples)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    aug_rng = np.random.default_rng([cfg.seed, 3])
    opt = Adam(model.parameters())
    history: list = []
    best_state, best_score, best_epoch, best_metrics = None, -math.inf, -1, {}
    since_best = 0
    epoch = -1
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        model.train()
        sums = dict.fromkeys(("total", "ft", "boundary", "texture", "clf"), 0.0)
        for idx in _batches(len(train_samples), cfg.batch_size, shuffle_rng):
            if cfg.augment:
                batch = [augment(train_samples[i], aug_rng) for i in idx]
                x, y_mask, y = stack(batch)
            else:
                x, y_mask, y = images[idx], masks[idx], labels[idx]
            out = model(x)
            loss, parts = total_loss(out.seg_logits, out.clf_logits, y_mask, y, cfg.loss)
            if not math.isfinite(parts["total"]):
                _abort(model, best_state, out_dir, f"loss became {parts['total']} at epoch {epoch}")
            model.zero_grad()
            backward(loss)
            try:
                opt.step(lr)
            except NonFiniteGradient as exc:
                _abort(model, best_state, out_dir, f"{exc} at epoch {epoch}")
            for k in sums:
                sums[k] += parts[k] * len(idx)
        n = len(train_samples)
        metrics = evaluator(model, epoch)
        row = {"epoch": epoch, "lr": lr, "loss_total": sums["total"] / n, "loss_ft": sums["ft"] / n,
               "loss_boundary": sums["boundary"] / n, "loss_texture": sums["texture"] / n,
               "loss_clf": sums["clf"] / n, "val_iou": metrics.get("iou", math.nan),
               "val_dice": metrics["dice"], "val_acc": metrics["acc"], "val_f1": metrics.get("f1", math.nan),
               "val_auc": metrics.get("auc", math.nan)}
        history.append(row)
        score = selection_score(metrics)
        log.info("epoch %d lr %.3g loss %.4f dice %.4f acc %.4f", epoch, lr, row["loss_total"],
                 metrics["dice"], metrics["acc"])
        if score > best_score:
            best_state, best_score, best_epoch, best_metrics = model.state_dict(), score, epoch, dict(metrics)
            since_best = 0
        else:
            since_best += 1
        if out_dir is not None:
            write_history(out_dir / "history.csv", history)
        if stop_when is not None and stop_when(metrics):
            break
        if since_best >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, out_dir / "best.ckpt", {"best_epoch": best_epoch})
    return TrainResult(model, history, best_epoch, best_score, best_metrics, epoch + 1, ckpt)


def _abort(model, best_state, out_dir, reason: str):
    if best_state is not None and out_dir is not None:
        model.load_state_dict(best_state)
        save_checkpoint(model, Path(out_dir) / "best.ckpt")
        reason += f"; last good checkpoint kept at {Path(out_dir) / 'best.ckpt'}"
    raise TrainingDiverged(reason)


# ------------------------------------------------------------------ ablation

ABLATION_ROWS = (
    ("none", False, False, False),
    ("hmsf", True, False, False),
    ("tim", False, True, False),
    ("tim_upa", False, True, True),
    ("full", True, True, True),
)
ABLATION_METRICS = ("iou", "dice", "sens", "seg_prec", "acc", "f1", "auc", "clf_prec")


def row_config(cfg: TrainConfig, hmsf: bool, tim: bool, upa: bool, seed: int) -> TrainConfig:
    model = replace(cfg.model, use_hmsf=hmsf, use_tim=tim, use_upa=upa, seed=seed)
    return replace(cfg, model=model, seed=seed)


def run_single(cfg: TrainConfig, train_samples, val_samples, eval_samples, out_dir=None) -> dict:
    model = MultiTaskNet(cfg.model)
    res = train(model, train_samples, val_samples, cfg, out_dir)
    metrics = metric_dict(*evaluate(model, eval_samples))
    return {"metrics": metrics, "params": model.num_parameters(), "best_epoch": res.best_epoch,
            "epochs_run": res.epochs_run}


def ablation_run(cfg: TrainConfig, train_samples, val_samples, eval_samples, out_dir,
                 seeds: Sequence[int] = (0,), rows=ABLATION_ROWS) -> list:
    """Train every component combination for every seed; write ``ablation.csv``.

    Rows hold seed-averaged metrics on ``eval_samples``.  Invalid combinations
    (uncertainty weighting without interaction) are skipped with a warning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, per_seed = [], []
    for name, hmsf, tim, upa in rows:
        if upa and not tim:
            warnings.warn(f"ablation row {name!r}: use_upa without use_tim is invalid; skipped", stacklevel=2)
            continue
        runs = []
        for seed in seeds:
            rcfg = row_config(cfg, hmsf, tim, upa, seed)
            sub = out_dir / name / f"seed{seed}"
            r = run_single(rcfg, train_samples, val_samples, eval_samples, sub)
            runs.append(r)
            per_seed.append({"row": name, "seed": seed, **r["metrics"], "params": r["params"],
                             "best_epoch": r["best_epoch"]})
        mean = {k: float(np.mean([r["metrics"][k] for r in runs])) for k in ABLATION_METRICS}
        table.append({"row": name, "hmsf": int(hmsf), "tim": int(tim), "upa": int(upa), **mean,
                      "params": runs[0]["params"], "n_seeds": len(runs)})
    _write_rows(out_dir / "ablation.csv", table,
                ("row", "hmsf", "tim", "upa") + ABLATION_METRICS + ("params", "n_seeds"))
    _write_rows(out_dir / "ablation_runs.csv", per_seed,
                ("row", "seed") + ABLATION_METRICS + ("params", "best_epoch"))
    return table


def _write_rows(path, rows, columns) -> Path:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else _fmt(r[c]) for c in columns])
    return Path(path)


# ------------------------------------------------------------------ diagnostics

DIAG_COLUMNS = ("level", "sample", "disp_seg2clf", "disp_clf2seg", "omega_seg", "omega_clf")
SUMMARY_COLUMNS = ("level", "mean_disp_seg2clf", "mean_disp_clf2seg", "mean_omega_seg", "mean_omega_clf")


def _rel_change(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, old.ndim))
    num = np.sqrt(np.sum((new - old) ** 2, axis=axes))
    den = np.sqrt(np.sum(old ** 2, axis=axes))
    return num / np.maximum(den, 1e-12)


def diagnose(model: MultiTaskNet, samples: Sequence[Sample], out_dir=None, batch_size: int = 16) -> list:
    """Per level and sample: normalized displacement both ways and the task weights.

    Levels are numbered 1..4 from the deepest decoder level.  Weight columns
    are empty when the model has no uncertainty weighting.
    """
    if not model.config.use_tim:
        raise ValueError("diagnose: model has task interaction disabled; nothing to measure")
    images = stack(samples)[0]
    records = []
    was_training = model.training
    model.eval()
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images[start:start + batch_size], want_diagnostics=True)
            for level, d in enumerate(out.diagnostics, start=1):
                s2c = _rel_change(d.f_enh, d.f)
                c2s = _rel_change(d.D_enh, d.D)
                for i in range(d.D.shape[0]):
                    rec = {"level": level, "sample": start + i, "disp_seg2clf": float(s2c[i]),
                           "disp_clf2seg": float(c2s[i])}
                    if model.config.use_upa:
                        rec.update(omega_seg=float(d.omega[i, 0]), omega_clf=float(d.omega[i, 1]))
                    else:
                        rec.update(omega_seg="", omega_clf="")
                    records.append(rec)
    model.train(was_training)
    records.sort(key=lambda r: (r["level"], r["sample"]))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_rows(out_dir / "diagnostics.csv", records, DIAG_COLUMNS)
        _write_rows(out_dir / "diagnostics_summary.csv", summarize(records), SUMMARY_COLUMNS)
    return records


def summarize(records: Sequence[dict]) -> list:
    rows = []
    for level in range(1, N_LEVELS + 1):
        rs = [r for r in records if r["level"] == level]
        row = {"level": level,
               "mean_disp_seg2clf": float(np.mean([r["disp_seg2clf"] for r in rs])),
               "mean_disp_clf2seg": float(np.mean([r["disp_clf2seg"] for r in rs]))}
        if rs and rs[0]["omega_seg"] != "":
            row["mean_omega_seg"] = float(np.mean([r["omega_seg"] for r in rs]))
            row["mean_omega_clf"] = float(np.mean([r["omega_clf"] for r in rs]))
        else:
            row["mean_omega_seg"] = row["mean_omega_clf"] = ""
        rows.append(row)
    return rows
