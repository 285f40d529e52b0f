"""One adversarial training loop covering every loss variant and adaptation method.

Per minibatch the loop first attacks the current parameters with the
variant's own objective, then takes one SGD-momentum step on the attacked
batch.  Every variant is expressed as "logits and targets": the per-example
objective is the negative log-softmax of the target column, so the attack
objective and the training loss are always the same function.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import pgd_attack
from .config import TrainConfig, parse_config
from .evaluation import pseudo_label
from .losses import EmbeddingDictionary, ce_terms, similarity_logits
from .models import (
    LinearHead,
    Model,
    PromptParams,
    VisionEncoder,
    freeze_mask,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor

HEAD_NAMES = ("head.weight", "head.bias")


class TrainingError(ValueError):
    pass


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    model: Model
    velocities: dict
    epoch: int = 0
    warmed_up: bool = False
    log: list = field(default_factory=list)
    dictionary: EmbeddingDictionary | None = None


@dataclass
class TrainResult:
    model: Model
    log: list
    state: TrainState


# ---------------------------------------------------------------- helpers


def few_shot_subset(data, shots, seed=0):
    """Keep at most ``shots`` uniformly drawn examples per class, in original order."""
    if shots is None or shots <= 0:
        raise ValueError(f"shots must be a positive integer, got {shots}")
    if data.labels is None:
        raise ValueError("few-shot subsetting needs labels")
    rng = np.random.default_rng([seed, 0x5407])
    keep = []
    for c in range(len(data.classes)):
        idx = np.flatnonzero(data.labels == c)
        if idx.size > shots:
            idx = np.sort(rng.choice(idx, size=shots, replace=False))
        keep.append(idx)
    return data.subset(np.sort(np.concatenate(keep)))


def augment(images, rng, max_shift=2, noise=0.02):
    """Random flip (p=0.5), edge-padded shift up to ``max_shift`` px, uniform noise."""
    n, _, h, w = images.shape
    out = np.empty_like(images)
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    padded = np.pad(images, ((0, 0), (0, 0), (max_shift, max_shift), (max_shift, max_shift)), mode="edge")
    for i in range(n):
        dy, dx = shifts[i] + max_shift
        img = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    out += rng.uniform(-noise, noise, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def batch_seed(seed, epoch, batch):
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def prepare_model(cfg, model, num_classes):
    """Copy ``model`` (or initialise one) and attach the prompt/head the run needs."""
    if model is None:
        model = Model(VisionEncoder.init(cfg.arch, cfg.seed))
    else:
        model = model.copy()
        if cfg.arch is not None and cfg.arch != model.arch:
            raise TrainingError("config arch differs from the initial checkpoint")
    if cfg.adaptation == "vpt_token" and (model.prompt is None or model.prompt.variant != "token"):
        model.prompt = PromptParams.init(model.arch, "token", cfg.prompt_tokens, cfg.seed + 1)
    if cfg.adaptation == "vpt_pixel" and (model.prompt is None or model.prompt.variant != "pixel"):
        model.prompt = PromptParams.init(model.arch, "pixel")
    if cfg.loss_variant in ("ce", "adv"):
        if model.head is None or model.head.num_classes != num_classes:
            model.head = LinearHead.init(model.arch.embed_dim, num_classes, cfg.seed + 2)
    return model


def trainable_names(model, cfg):
    policy = {
        "full_ft": ("full", None),
        "partial_ft": ("last_k_blocks", cfg.ft_blocks),
        "linear_probe": ("head_only", None),
        "vpt_token": ("prompt_only", None),
        "vpt_pixel": ("prompt_only", None),
    }[cfg.adaptation]
    names = set(freeze_mask(model, *policy).trainable)
    if cfg.loss_variant in ("ce", "adv"):
        if not cfg.freeze_head or cfg.adaptation == "linear_probe":
            names |= set(HEAD_NAMES)
    else:
        names -= set(HEAD_NAMES)
    return [n for n, _ in model.named_parameters() if n in names]


class Objective:
    """Logits and per-example targets for one loss variant on one minibatch."""

    def __init__(self, cfg, model, bank, dictionary, targets, view_b=None):
        self.cfg, self.model, self.bank = cfg, model, bank
        self.dictionary, self.targets, self.view_b = dictionary, targets, view_b
        self.columns = None
        if cfg.loss_variant == "imgcoadv":
            self.targets = np.arange(view_b.shape[0])
        elif cfg.loss_variant == "tecoa":
            self.columns = Tensor(bank.embeddings)
        elif cfg.loss_variant == "coadv":
            self.columns = dictionary.codes

    def logits(self, images, z_b=None):
        z = self.model.encode(images)
        v = self.cfg.loss_variant
        if v in ("ce", "adv"):
            return self.model.head(z)
        if v == "imgcoadv":
            return similarity_logits(z, self.model.encode(self.view_b) if z_b is None else z_b, self.cfg.tau)
        return similarity_logits(z, self.columns, self.cfg.tau)

    def terms(self, images, z_b=None):
        return ce_terms(self.logits(images, z_b), self.targets)

    def attack_fn(self):
        z_b = None
        if self.cfg.loss_variant == "imgcoadv":
            z_b = self.model.encode(self.view_b).detach()
        return lambda images: self.terms(images, z_b)


def _step(objective, images, trainable, velocities, cfg):
    logits = objective.logits(Tensor(images))
    loss = T.mean(ce_terms(logits, objective.targets))
    loss.backward()
    T.sgd_momentum_step(trainable, velocities, cfg.learning_rate, cfg.momentum)
    wrong = np.argmax(logits.data, axis=1) != objective.targets
    return float(loss.data), int(wrong.sum())


def _run_epochs(cfg, model, data, labels_fn, bank, dictionary, names, velocities, epochs, phase, state):
    params = dict(model.named_parameters())
    trainable = [params[n] for n in names]
    if cfg.train_dictionary and dictionary is not None and phase == "train":
        trainable = trainable + [dictionary.codes]
    vel = [velocities[n] for n in names] + ([velocities["dictionary"]] if len(trainable) > len(names) else [])
    fixed = [t for n, t in params.items() if n not in names]
    if dictionary is not None and not (cfg.train_dictionary and phase == "train"):
        fixed.append(dictionary.codes)
    attack = cfg.attack if (phase == "train" and cfg.adversarial) else None
    variant_cfg = cfg if phase == "train" else cfg.replace(loss_variant="ce")

    for epoch in epochs:
        rng = np.random.default_rng([cfg.seed, epoch, 0 if phase == "train" else 1])
        labels = labels_fn(model)
        order = rng.permutation(len(data))
        total_loss = total_wrong = 0.0
        seen = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = data.images[idx]
            view_b = augment(x, rng) if variant_cfg.loss_variant == "imgcoadv" else None
            targets = None if labels is None else labels[idx].astype(np.int64)
            objective = Objective(variant_cfg, model, bank, dictionary, targets, view_b)
            if attack is not None:
                with T.frozen(list(params.values()) + ([dictionary.codes] if dictionary else [])):
                    x = pgd_attack(objective.attack_fn(), x, attack, batch_seed(cfg.seed, epoch, b)).x_adv
            with T.frozen(fixed):
                loss, wrong = _step(objective, x, trainable, vel, cfg)
            total_loss += loss * len(idx)
            total_wrong += wrong
            seen += len(idx)
        record = {
            "epoch": epoch,
            "phase": phase,
            "loss": total_loss / max(seen, 1),
            "attack_success": (total_wrong / max(seen, 1)) if attack is not None else None,
            "train_error": total_wrong / max(seen, 1),
            "examples": seen,
        }
        state.log.append(record)
        if phase == "train":
            state.epoch = epoch + 1


def run_training(cfg, data, bank, model=None, state=None, stop_after=None):
    """Adapt ``model`` on ``data`` and return the trained copy plus the metric log.

    ``state`` resumes an interrupted run; ``stop_after`` ends the run after
    that many total epochs (for checkpoint/resume).
    """
    if not isinstance(cfg, TrainConfig):
        raise TypeError("cfg must be a TrainConfig")
    if not cfg.unlabeled:
        if data.labels is None:
            raise TrainingError("labelled training needs labels; set unlabeled=true for pseudo-labels")
        if tuple(data.classes) != tuple(bank.names) and cfg.loss_variant in ("tecoa",):
            raise TrainingError("dataset classes do not match the text bank rows")
    if model is not None and model.arch.image_shape != data.image_shape:
        raise TrainingError(f"image shape {data.image_shape} does not match model {model.arch.image_shape}")
    if cfg.shots is not None:
        data = few_shot_subset(data, cfg.shots, cfg.seed)
    num_classes = len(bank) if cfg.unlabeled else len(data.classes)

    if state is None:
        model = prepare_model(cfg, model, num_classes)
        dictionary = None
        if cfg.loss_variant == "coadv":
            dictionary = EmbeddingDictionary.random(num_classes, model.arch.embed_dim, cfg.seed + 3, cfg.train_dictionary)
        state = TrainState(model, {}, dictionary=dictionary)
    model, dictionary = state.model, state.dictionary
    if model.arch.image_shape != data.image_shape:
        raise TrainingError(f"image shape {data.image_shape} does not match model {model.arch.image_shape}")

    names = trainable_names(model, cfg)
    params = dict(model.named_parameters())
    for n in names:
        state.velocities.setdefault(n, np.zeros_like(params[n].data))
    if dictionary is not None and cfg.train_dictionary:
        state.velocities.setdefault("dictionary", np.zeros_like(dictionary.codes.data))

    if cfg.unlabeled:
        def labels_fn(m):
            return pseudo_label(m, data.images, bank, cfg.tau)
    else:
        def labels_fn(m):
            return data.labels

    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    if cfg.loss_variant == "adv" and cfg.adversarial and not state.warmed_up and end > state.epoch:
        head_vel = {n: np.zeros_like(params[n].data) for n in HEAD_NAMES}
        _run_epochs(cfg, model, data, labels_fn, bank, None, list(HEAD_NAMES), head_vel,
                    range(cfg.head_warmup_epochs), "head_warmup", state)
        state.warmed_up = True
    _run_epochs(cfg, model, data, labels_fn, bank, dictionary, names, state.velocities,
                range(state.epoch, end), "train", state)
    return TrainResult(model, state.log, state)


# ---------------------------------------------------------------- persistence


def save_train_state(state, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(state.model, os.path.join(out_dir, "model.ckpt"))
    arrays = {f"v:{k}": v for k, v in state.velocities.items()}
    if state.dictionary is not None:
        arrays["dictionary"] = state.dictionary.codes.data
    np.savez(os.path.join(out_dir, "state.npz"), **arrays)
    meta = {"epoch": state.epoch, "warmed_up": state.warmed_up, "log": state.log, "config": cfg.to_dict()}
    with open(os.path.join(out_dir, "state.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def load_train_state(out_dir):
    with open(os.path.join(out_dir, "state.json")) as fh:
        meta = json.load(fh)
    cfg_doc = dict(meta["config"])
    cfg = parse_config(cfg_doc, "train")
    model = load_checkpoint(os.path.join(out_dir, "model.ckpt"))
    with np.load(os.path.join(out_dir, "state.npz")) as z:
        velocities = {k[2:]: z[k].copy() for k in z.files if k.startswith("v:")}
        dictionary = None
        if "dictionary" in z.files:
            dictionary = EmbeddingDictionary(
                Tensor(z["dictionary"].copy(), requires_grad=cfg.train_dictionary), cfg.train_dictionary, cfg.seed + 3
            )
    state = TrainState(model, velocities, meta["epoch"], meta["warmed_up"], meta["log"], dictionary)
    return state, cfg
