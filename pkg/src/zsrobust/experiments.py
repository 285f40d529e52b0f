"""Named experiment recipes on the toy zero-shot task.

Every recipe follows the same protocol.  A vanilla encoder is pretrained
with the clean contrastive loss on all classes, which stands in for a
pretrained dual encoder.  It is then adapted on the train-class split and
evaluated zero-shot on the held-out groups with a 100-step PGD attack.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .attacks import PIXEL, AttackConfig
from .config import TrainConfig, config_hash
from .data import SynthSpec, gen_synthetic
from .evaluation import EvalReport, emit_report, evaluate_sets, interpolation_sweep, write_frontier_csv
from .models import ArchConfig, freeze_mask
from .training import prepare_model, run_training

# A tiny encoder is far less fragile than a web-scale one: at 1/255 the
# attack barely moves it, so the toy recipes default to a larger radius.
TOY_EPS = 8 * PIXEL
TOY_IMAGE_SIZE = 16
PRETRAIN_EPOCHS = 15
PRETRAIN_LR = 1e-2
ADAPT_EPOCHS = 5


def toy_spec(seed=0, image_size=TOY_IMAGE_SIZE, per_class=100, test_per_class=25):
    return SynthSpec(
        image_size=image_size, pretrain_per_class=per_class, train_per_class=per_class,
        test_per_class=test_per_class, seed=seed,
    )


def toy_arch(image_size=TOY_IMAGE_SIZE):
    return ArchConfig(image_shape=(3, image_size, image_size))


@dataclass
class ToyContext:
    """Data, banks and the vanilla encoder for one seed."""

    seed: int
    bundle: object
    vanilla: object
    eps: float = TOY_EPS

    @property
    def arch(self):
        return self.vanilla.arch

    def eval_attack(self, eps=None):
        return AttackConfig.evaluation(self.eps if eps is None else eps)

    def train_config(self, loss_variant="tecoa", adaptation="full_ft", eps=None, **changes):
        eps = self.eps if eps is None else eps
        base = dict(
            loss_variant=loss_variant, adaptation=adaptation, epochs=ADAPT_EPOCHS, seed=self.seed,
            attack=AttackConfig.training(eps), arch=self.arch,
        )
        base.update(changes)
        return TrainConfig(**base)


def pretrain_vanilla(bundle, seed=0, epochs=PRETRAIN_EPOCHS, lr=PRETRAIN_LR):
    """Clean contrastive pretraining on every class."""
    size = bundle.spec.image_size
    cfg = TrainConfig("tecoa", "full_ft", lr=lr, epochs=epochs, seed=seed, attack=None, arch=toy_arch(size))
    return run_training(cfg, bundle.pretrain, bundle.banks["pretrain"]).model


def toy_context(seed=0, bundle=None, vanilla=None, eps=TOY_EPS):
    """Context for ``seed``; generates the data and pretrains unless they are given."""
    bundle = bundle or gen_synthetic(toy_spec(seed))
    if vanilla is None:
        vanilla = pretrain_vanilla(bundle, seed)
    return ToyContext(seed, bundle, vanilla, eps)


def adapt(ctx, cfg):
    return run_training(cfg, ctx.bundle.train, ctx.bundle.banks["train"], model=ctx.vanilla).model


def heldout_report(ctx, model, eps=None, cfg=None):
    records = evaluate_sets(model, ctx.bundle.heldout_sets(), ctx.eval_attack(eps), seed=ctx.seed)
    return EvalReport(records, config_hash(cfg) if cfg is not None else "", ctx.seed)


def _summary(report, **extra):
    avg = report.average
    return {**extra, "clean": avg["clean"], "robust": avg["robust"], "report": report}


def _emit(out_dir, recipe, point, report):
    if out_dir is None:
        return
    path = os.path.join(out_dir, recipe, point)
    os.makedirs(path, exist_ok=True)
    emit_report(report, os.path.join(path, "report.json"), os.path.join(path, "report.csv"))


# ---------------------------------------------------------------- recipes


def table1_toy(ctx, out_dir=None, variants=("tecoa", "adv", "imgcoadv")):
    """Held-out clean/robust accuracy of the vanilla model and of full finetuning per loss.

    Rows are keyed by method; adapted rows also carry the trained ``model``.
    """
    rows = {}
    report = heldout_report(ctx, ctx.vanilla)
    _emit(out_dir, "table1-toy", "vanilla", report)
    rows["vanilla"] = _summary(report, method="vanilla")
    for v in variants:
        cfg = ctx.train_config(v)
        model = adapt(ctx, cfg)
        report = heldout_report(ctx, model, cfg=cfg)
        _emit(out_dir, "table1-toy", f"ft_{v}", report)
        rows[v] = _summary(report, method=f"ft_{v}", model=model)
    return rows


def fig4(ctx, out_dir=None, shots=(1, 5, 50)):
    """TeCoA with a per-class training budget of ``shots`` examples."""
    rows = []
    for s in shots:
        cfg = ctx.train_config("tecoa", shots=int(s))
        report = heldout_report(ctx, adapt(ctx, cfg), cfg=cfg)
        _emit(out_dir, "fig4", f"shots_{s}", report)
        rows.append(_summary(report, shots=int(s)))
    return rows


def fig5(ctx, out_dir=None, eps_units=(1, 2, 4)):
    """Train and evaluate TeCoA at several radii ε = units/255."""
    rows = []
    for u in eps_units:
        eps = u * PIXEL
        cfg = ctx.train_config("tecoa", eps=eps)
        model = adapt(ctx, cfg)
        report = heldout_report(ctx, model, eps=eps, cfg=cfg)
        base = heldout_report(ctx, ctx.vanilla, eps=eps)
        _emit(out_dir, "fig5", f"eps_{u}", report)
        _emit(out_dir, "fig5", f"eps_{u}_vanilla", base)
        rows.append(_summary(report, eps_units=u, vanilla_robust=base.average["robust"]))
    return rows


def fig5a(ctx, out_dir=None):
    """Token prompts appended to the sequence against an additive pixel prompt."""
    rows = []
    for adaptation in ("vpt_token", "vpt_pixel"):
        cfg = ctx.train_config("tecoa", adaptation)
        report = heldout_report(ctx, adapt(ctx, cfg), cfg=cfg)
        _emit(out_dir, "fig5a", adaptation, report)
        rows.append(_summary(report, adaptation=adaptation))
    return rows


def fig5b(ctx, out_dir=None, ft_blocks=(1, 2), prompt_tokens=(5, 20)):
    """Accuracy against trainable-parameter count for partial finetuning and token prompts."""
    rows = []
    points = [("partial_ft", {"ft_blocks": k}) for k in ft_blocks]
    points += [("vpt_token", {"prompt_tokens": k}) for k in prompt_tokens]
    for adaptation, extra in points:
        cfg = ctx.train_config("tecoa", adaptation, **extra)
        model = adapt(ctx, cfg)
        policy = ("last_k_blocks", cfg.ft_blocks) if adaptation == "partial_ft" else ("prompt_only", None)
        count = freeze_mask(prepare_model(cfg, ctx.vanilla, len(ctx.bundle.train.classes)), *policy).trainable_count
        report = heldout_report(ctx, model, cfg=cfg)
        key = next(iter(extra.values()))
        _emit(out_dir, "fig5b", f"{adaptation}_{key}", report)
        rows.append(_summary(report, adaptation=adaptation, setting=key, trainable=int(count)))
    return rows


def fig6(ctx, out_dir=None, w_grid=(0.0, 0.25, 0.5, 0.75, 1.0), adapted=None):
    """Frontier of (1 - w)·vanilla + w·TeCoA-finetuned weights."""
    if adapted is None:
        adapted = adapt(ctx, ctx.train_config("tecoa"))
    rows = interpolation_sweep(ctx.vanilla, adapted, w_grid, ctx.bundle.heldout_sets(), ctx.eval_attack(), seed=ctx.seed)
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "fig6"), exist_ok=True)
        write_frontier_csv(rows, os.path.join(out_dir, "fig6", "frontier.csv"))
        for r in rows:
            _emit(out_dir, "fig6", f"w_{r['w']:g}", EvalReport(r["records"], seed=ctx.seed))
    return rows


RECIPES = {
    "table1-toy": table1_toy,
    "fig4": fig4,
    "fig5": fig5,
    "fig5a": fig5a,
    "fig5b": fig5b,
    "fig6": fig6,
}


def _plain(rows):
    if isinstance(rows, dict):
        return {k: _plain(v) for k, v in rows.items() if k not in ("report", "model")}
    if isinstance(rows, list):
        return [_plain(r) for r in rows]
    if isinstance(rows, (np.floating, np.integer)):
        return rows.item()
    return rows


def run_recipe(name, seeds=(0,), out_dir=None, contexts=None, **kwargs):
    """Run recipe ``name`` once per seed; returns {seed: rows} and writes summary.json."""
    if name not in RECIPES:
        raise ValueError(f"unknown experiment {name!r}; choose from {sorted(RECIPES)}")
    results = {}
    for seed in seeds:
        ctx = (contexts or {}).get(seed) or toy_context(seed)
        sub = None if out_dir is None else os.path.join(out_dir, f"seed_{seed}")
        results[seed] = RECIPES[name](ctx, sub, **kwargs)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump({"experiment": name, "results": {str(k): _plain(v) for k, v in results.items()}},
                      fh, indent=1, sort_keys=True)
    return results
