"""Training objectives: CE, adversarial CE, and the three contrastive variants.

All contrastive losses share one shape: per-anchor softmax cross-entropy over
cosine similarities divided by a temperature.  Each loss has a ``*_terms``
form returning one value per example (used as a per-image attack objective)
and a scalar form that averages the terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TAU = 0.07
VARIANTS = ("ce", "adv", "coadv", "imgcoadv", "tecoa")


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"tau (τ) must be > 0, got {tau}")


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"label out of range [0, {num_classes})")
    return labels


def pair_indicator(labels, num_columns):
    """N×M binary matrix with y[i, labels[i]] = 1."""
    labels = _check_labels(labels, num_columns)
    y = np.zeros((labels.size, num_columns), dtype=np.float32)
    y[np.arange(labels.size), labels] = 1.0
    return y


def _picked_nll(logits, labels):
    n, c = logits.shape
    labels = _check_labels(labels, c)
    logp = T.reshape(T.log_softmax(logits), (n * c,))
    return T.scalar_mul(T.gather_rows(logp, np.arange(n) * c + labels), -1.0)


def ce_terms(logits, labels):
    return _picked_nll(T._as_tensor(logits), labels)


def ce_loss(logits, labels):
    """Mean negative log-softmax at the true class."""
    return T.mean(ce_terms(logits, labels))


def similarity_logits(z, columns, tau):
    """cos(z_i, c_j) / tau for every anchor row and column row."""
    _check_tau(tau)
    return T.scalar_mul(T.cosine_similarity_matrix(z, columns), 1.0 / tau)


def _columns(bank_or_rows):
    if isinstance(bank_or_rows, Tensor):
        return bank_or_rows
    rows = getattr(bank_or_rows, "embeddings", bank_or_rows)
    return Tensor(rows)


def contrastive_terms(z_img, columns, labels, tau=DEFAULT_TAU):
    return _picked_nll(similarity_logits(z_img, _columns(columns), tau), labels)


def contrastive_image_text(z_img, bank, labels, tau=DEFAULT_TAU):
    """Image-to-text contrastive loss; the softmax runs over every bank row."""
    return T.mean(contrastive_terms(z_img, bank, labels, tau))


@dataclass
class EmbeddingDictionary:
    """Random per-class code vectors standing in for text embeddings."""

    codes: Tensor
    trainable: bool = False
    seed: int = 0

    @classmethod
    def random(cls, num_classes, dim, seed=0, trainable=False):
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((num_classes, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(Tensor(rows.astype(np.float32), requires_grad=trainable), trainable, seed)

    def __len__(self):
        return self.codes.shape[0]


def coadv_loss(z_img, dictionary, labels, tau=DEFAULT_TAU):
    """Contrastive loss against a code dictionary instead of text rows."""
    codes = dictionary.codes if isinstance(dictionary, EmbeddingDictionary) else dictionary
    return contrastive_image_text(z_img, codes, labels, tau)


def imgcoadv_terms(z_view_a, z_view_b, tau=DEFAULT_TAU):
    za, zb = T._as_tensor(z_view_a), T._as_tensor(z_view_b)
    if za.shape[0] != zb.shape[0]:
        raise T.ShapeError("imgcoadv_loss", za.shape, zb.shape)
    # anchors from view a, candidates are all rows of view b, positives on the diagonal
    return _picked_nll(similarity_logits(za, zb, tau), np.arange(za.shape[0]))


def imgcoadv_loss(z_view_a, z_view_b, tau=DEFAULT_TAU):
    return T.mean(imgcoadv_terms(z_view_a, z_view_b, tau))
