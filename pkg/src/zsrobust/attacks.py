"""L∞ projected gradient ascent against any per-example differentiable objective."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor

PIXEL = 1.0 / 255.0
STEP_MODES = ("fractional", "pixel-grid")
_GRID_TOL = 1e-6


class AttackError(FloatingPointError):
    def __init__(self, message, step):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings.  ``eps`` and ``alpha`` are in [0, 1] pixel units."""

    eps: float = PIXEL
    alpha: float = PIXEL
    steps: int = 2
    norm: str = "inf"
    random_start: bool = False
    best_iterate: bool = False
    step_mode: str = "fractional"
    restarts: int = 1

    def __post_init__(self):
        if self.norm != "inf":
            raise ValueError(f"norm: only 'inf' is supported, got {self.norm!r}")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError(f"eps must lie in [0, 1] (pixel range), got {self.eps}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if int(self.restarts) != self.restarts or self.restarts < 1:
            raise ValueError(f"restarts must be a positive integer, got {self.restarts}")
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}, got {self.step_mode!r}")
        if self.step_mode == "pixel-grid":
            units = self.alpha * 255.0
            if round(units) < 1 or abs(units - round(units)) > _GRID_TOL:
                raise ValueError("pixel-grid mode needs alpha to be a whole multiple of 1/255")

    @classmethod
    def training(cls, eps=PIXEL):
        # α = ε: two steps can reach any vertex of the ball
        return cls(eps=eps, alpha=eps if eps > 0 else PIXEL, steps=2)

    @classmethod
    def evaluation(cls, eps=PIXEL):
        return cls(eps=eps, alpha=PIXEL, steps=100, best_iterate=True)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdversarialBatch:
    x: np.ndarray
    x_adv: np.ndarray
    objective: np.ndarray

    @property
    def delta(self):
        return self.x_adv - self.x


def _value_and_grad(objective, x_adv, step, need_grad):
    xt = Tensor(x_adv, requires_grad=need_grad, dtype=np.float32)
    out = objective(xt)
    vals = np.asarray(out.data, dtype=np.float64).reshape(-1)
    if vals.shape[0] != x_adv.shape[0]:
        raise ValueError(f"objective must return one value per example, got shape {out.shape}")
    if not np.all(np.isfinite(vals)):
        raise AttackError("objective returned a non-finite value", step)
    if not need_grad:
        return vals, None
    if not out.requires_grad:
        return vals, np.zeros_like(x_adv)
    out.sum().backward()
    grad = xt.grad if xt.grad is not None else np.zeros_like(x_adv)
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite input gradient", step)
    return vals, grad


class _Fractional:
    def __init__(self, x, cfg):
        self.x = x.astype(np.float64)
        self.cfg = cfg

    def start(self, rng):
        if self.cfg.random_start:
            return rng.uniform(-self.cfg.eps, self.cfg.eps, self.x.shape)
        return np.zeros_like(self.x)

    def compose(self, delta):
        return np.clip(self.x + delta, 0.0, 1.0).astype(np.float32)

    def step(self, delta, x_adv, grad):
        moved = x_adv.astype(np.float64) + self.cfg.alpha * np.sign(grad)
        return np.clip(moved - self.x, -self.cfg.eps, self.cfg.eps)


class _PixelGrid:
    """Perturbations held as integer counts of 1/255."""

    def __init__(self, x, cfg):
        self.x = x.astype(np.float64)
        self.cfg = cfg
        self.limit = int(np.floor(cfg.eps * 255.0 + _GRID_TOL))
        self.unit = int(round(cfg.alpha * 255.0))
        self.lo = np.ceil(-self.x * 255.0 - _GRID_TOL).astype(np.int64)
        self.hi = np.floor((1.0 - self.x) * 255.0 + _GRID_TOL).astype(np.int64)

    def _project(self, k):
        k = np.clip(k, -self.limit, self.limit)
        return np.clip(k, self.lo, self.hi)

    def start(self, rng):
        if self.cfg.random_start:
            return self._project(rng.integers(-self.limit, self.limit + 1, self.x.shape))
        return np.zeros(self.x.shape, dtype=np.int64)

    def compose(self, k):
        return np.clip(self.x + k * PIXEL, 0.0, 1.0).astype(np.float32)

    def step(self, k, x_adv, grad):
        return self._project(k + self.unit * np.sign(grad).astype(np.int64))


def pgd_attack(objective, x, cfg, seed=0):
    """Maximise ``objective`` over the L∞ ball of radius ``cfg.eps`` around ``x``.

    ``objective`` maps an N×... image tensor to N per-example values; the
    ascent direction is the sign of the gradient of their sum.  Each step
    moves by ``alpha``, projects onto the ball, then clamps to [0, 1].  With
    ``best_iterate`` every visited point (start and clean input included)
    competes per example; otherwise the final iterate of each restart does.  Across
    restarts the per-example maximum wins; ties keep the earlier candidate.
    """
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(seed)
    space = _PixelGrid(x, cfg) if cfg.step_mode == "pixel-grid" else _Fractional(x, cfg)
    n = x.shape[0]
    best_x = x.copy()
    best_val = np.full(n, -np.inf)

    def offer(candidate, vals):
        better = vals > best_val
        if np.any(better):
            best_x[better] = candidate[better]
            best_val[better] = vals[better]

    if cfg.best_iterate and cfg.random_start:
        # δ = 0 is always feasible, so the clean input competes too
        offer(x, _value_and_grad(objective, x, -1, need_grad=False)[0])
    for _ in range(cfg.restarts):
        state = space.start(rng)
        x_adv = space.compose(state)
        for step in range(cfg.steps):
            vals, grad = _value_and_grad(objective, x_adv, step, need_grad=True)
            if cfg.best_iterate:
                offer(x_adv, vals)
            state = space.step(state, x_adv, grad)
            x_adv = space.compose(state)
        vals, _ = _value_and_grad(objective, x_adv, cfg.steps, need_grad=False)
        offer(x_adv, vals)
    return AdversarialBatch(x, best_x, best_val)


def save_adversarial_batch(batch, out_dir, cfg=None, seed=None, labels=None):
    """Write meta.json plus little-endian f32 payloads x.bin and x_adv.bin."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "shape": list(batch.x.shape),
        "dtype": "f32le",
        "attack": None if cfg is None else cfg.to_dict(),
        "seed": seed,
        "objective": [float(v) for v in batch.objective],
        "linf": float(np.max(np.abs(batch.delta))) if batch.x.size else 0.0,
    }
    if labels is not None:
        meta["labels"] = [int(v) for v in labels]
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    batch.x.astype("<f4").tofile(os.path.join(out_dir, "x.bin"))
    batch.x_adv.astype("<f4").tofile(os.path.join(out_dir, "x_adv.bin"))


def load_adversarial_batch(out_dir):
    with open(os.path.join(out_dir, "meta.json")) as fh:
        meta = json.load(fh)
    shape = tuple(meta["shape"])
    count = int(np.prod(shape))
    arrays = []
    for name in ("x.bin", "x_adv.bin"):
        arr = np.fromfile(os.path.join(out_dir, name), dtype="<f4")
        if arr.size != count:
            raise ValueError(f"{name}: expected {count} floats, found {arr.size}")
        arrays.append(arr.astype(np.float32).reshape(shape))
    return AdversarialBatch(arrays[0], arrays[1], np.asarray(meta["objective"])), meta
