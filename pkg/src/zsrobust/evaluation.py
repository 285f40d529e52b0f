"""Zero-shot prediction, clean/robust accuracy, interpolation sweeps, reports."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import PIXEL, AttackConfig, pgd_attack
from .losses import DEFAULT_TAU, ce_terms, contrastive_terms, similarity_logits
from .models import interpolate_models

REPORT_COLUMNS = ("dataset", "clean", "robust", "n")
FRONTIER_COLUMNS = ("w", "clean", "robust")
_LINF_SLACK = 1e-7


def _params(model):
    return [t for _, t in model.named_parameters()]


def embed_images(model, images, batch_size=256):
    """Embeddings for a batch of images without recording gradients."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    with T.frozen(_params(model)):
        for s in range(0, images.shape[0], batch_size):
            out.append(model.encode(images[s:s + batch_size]).data)
    if not out:
        return np.zeros((0, model.arch.embed_dim), np.float32)
    return np.concatenate(out)


def cosine_scores(embeddings, bank):
    """cos(z_i, t_j) with the same normalisation the losses use."""
    rows = getattr(bank, "embeddings", bank)
    return T.cosine_similarity_matrix(T.Tensor(embeddings), T.Tensor(rows)).data


def _predict(embeddings, bank, tau):
    if len(getattr(bank, "names", bank)) == 0:
        raise ValueError("empty text bank")
    if not tau > 0:
        raise ValueError(f"tau (τ) must be > 0, got {tau}")
    # scores/τ has the same argmax for every τ > 0; np.argmax breaks ties low
    return np.argmax(cosine_scores(embeddings, bank), axis=1)


def zero_shot_classify(model, images, bank, tau=DEFAULT_TAU, batch_size=256):
    """argmax_j cos(F(x), t_j) / tau, ties resolved to the lowest class index."""
    if len(bank) == 0:
        raise ValueError("empty text bank")
    return _predict(embed_images(model, images, batch_size), bank, tau)


def pseudo_label(model, images, bank, tau=DEFAULT_TAU, batch_size=256):
    """Label each clean image with the class whose text row is nearest.

    The minimiser over labels of the contrastive loss is the row of maximal
    cosine similarity, so this shares the zero-shot prediction rule.
    """
    if len(bank) == 0:
        raise ValueError("empty text bank")
    return _predict(embed_images(model, images, batch_size), bank, tau)


def accuracy(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels)) if labels.size else 0.0


def eval_objective(model, bank, labels, tau, kind="ce"):
    """Per-example attack objective: CE over cosine logits, or the contrastive terms."""
    columns = T.Tensor(bank.embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    if kind == "ce":
        return lambda images: ce_terms(similarity_logits(model.encode(images), columns, tau), labels)
    if kind == "contrastive":
        return lambda images: contrastive_terms(model.encode(images), columns, labels, tau)
    raise ValueError(f"unknown evaluation objective {kind!r}")


@dataclass
class EvalResult:
    clean: float
    robust: float | None
    n: int
    clean_pred: np.ndarray = field(repr=False, default=None)
    robust_pred: np.ndarray = field(repr=False, default=None)


def evaluate(model, dataset, bank, attack=None, objective="ce", tau=DEFAULT_TAU, seed=0, batch_size=128):
    """Clean and robust zero-shot accuracy of ``model`` on ``dataset``.

    The attacker sees ground-truth labels.  An example counts as robust only
    if it is classified correctly both at the attacked point and at δ = 0
    (δ = 0 is itself a feasible perturbation).
    """
    if dataset.labels is None:
        raise ValueError("evaluation needs labels")
    if tuple(dataset.classes) != tuple(bank.names):
        raise ValueError("dataset classes do not match bank rows")
    if attack is not None and not isinstance(attack, AttackConfig):
        raise TypeError("attack must be an AttackConfig")
    imgs = dataset.images
    if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
        raise ValueError("images outside the [0, 1] pixel range the attack assumes")
    labels = dataset.labels.astype(np.int64)
    clean_pred = zero_shot_classify(model, imgs, bank, tau, batch_size)
    if attack is None:
        return EvalResult(accuracy(clean_pred, labels), None, len(labels), clean_pred)
    adv = np.empty_like(imgs)
    with T.frozen(_params(model)):
        for b, s in enumerate(range(0, len(labels), batch_size)):
            sl = slice(s, s + batch_size)
            fn = eval_objective(model, bank, labels[sl], tau, objective)
            out = pgd_attack(fn, imgs[sl], attack, seed + b)
            delta = np.abs(out.x_adv.astype(np.float64) - imgs[sl])
            if delta.size and (delta.max() > attack.eps + _LINF_SLACK or out.x_adv.min() < 0 or out.x_adv.max() > 1):
                raise AssertionError(f"attacked batch {b} violates the ε-ball or pixel box")
            adv[sl] = out.x_adv
    adv_pred = zero_shot_classify(model, adv, bank, tau, batch_size)
    robust = (adv_pred == labels) & (clean_pred == labels)
    return EvalResult(accuracy(clean_pred, labels), float(robust.mean()), len(labels), clean_pred, adv_pred)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    records: list
    config_hash: str = ""
    seed: int = 0

    @property
    def average(self):
        out = {"dataset": "average", "n": sum(r["n"] for r in self.records)}
        for key in ("clean", "robust"):
            vals = [r[key] for r in self.records if r.get(key) is not None]
            out[key] = float(np.mean(vals)) if vals and len(vals) == len(self.records) else None
        return out

    def to_dict(self):
        return {
            "records": self.records,
            "average": self.average,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


def evaluate_sets(model, eval_sets, attack=None, objective="ce", tau=DEFAULT_TAU, seed=0, batch_size=128):
    """Evaluate on several (name, dataset, bank) tasks; per-task seeds are seed + 1000·k."""
    records = []
    for k, (name, ds, bank) in enumerate(eval_sets):
        res = evaluate(model, ds, bank, attack, objective, tau, seed + 1000 * k, batch_size)
        records.append({
            "dataset": name,
            "clean": res.clean,
            "robust": res.robust,
            "n": res.n,
            "attack": None if attack is None else attack.to_dict(),
        })
    return records


def _fmt(v):
    return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for rec in list(report.records) + [report.average]:
        writer.writerow([rec["dataset"], _fmt(rec["clean"]), _fmt(rec["robust"]), str(int(rec["n"]))])
    return buf.getvalue()


def emit_report(report, json_path=None, csv_path=None):
    """Write the report as JSON and/or CSV (columns dataset, clean, robust, n; average row last)."""
    if not report.records:
        raise ValueError("report needs at least one record")
    for path in (json_path, csv_path):
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            fh.write(report_csv(report))


def load_report_csv(path):
    """Parse a report CSV back into (records, average)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    parsed = [
        {"dataset": r[0], "clean": float(r[1]) if r[1] else None,
         "robust": float(r[2]) if r[2] else None, "n": int(r[3])}
        for r in rows[1:]
    ]
    if not parsed or parsed[-1]["dataset"] != "average":
        raise ValueError(f"{path}: missing trailing average row")
    return parsed[:-1], parsed[-1]


def load_report_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    return EvalReport(doc["records"], doc.get("config_hash", ""), doc.get("seed", 0))


# ---------------------------------------------------------------- interpolation


def interpolation_sweep(model_vanilla, model_adapted, w_grid, eval_sets, attack=None,
                        objective="ce", tau=DEFAULT_TAU, seed=0, batch_size=128):
    """Clean/robust accuracy of (1 - w)·vanilla + w·adapted for each w in ``w_grid``.

    Each row averages over ``eval_sets`` and keeps the per-task records.
    """
    rows = []
    for w in w_grid:
        model = interpolate_models(model_vanilla, model_adapted, float(w))
        records = evaluate_sets(model, eval_sets, attack, objective, tau, seed, batch_size)
        report = EvalReport(records)
        avg = report.average
        rows.append({"w": float(w), "clean": avg["clean"], "robust": avg["robust"], "records": records})
    return rows


def write_frontier_csv(rows, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FRONTIER_COLUMNS)
        for r in rows:
            writer.writerow([repr(r["w"]), _fmt(r["clean"]), _fmt(r["robust"])])


def load_frontier_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != FRONTIER_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [{"w": float(r[0]), "clean": float(r[1]), "robust": float(r[2]) if r[2] else None} for r in rows[1:]]


def default_eval_attack(eps=PIXEL):
    return AttackConfig.evaluation(eps)
