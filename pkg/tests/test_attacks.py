import numpy as np
import pytest

from zsrobust import tensor as T
from zsrobust.attacks import (
    PIXEL,
    AttackConfig,
    AttackError,
    load_adversarial_batch,
    pgd_attack,
    save_adversarial_batch,
)
from zsrobust.tensor import Tensor

from .oracles import grid_maximum, random_objective, two_pixel_objective


def _linear(weights):
    w = Tensor(np.asarray(weights, np.float32).ravel())

    def f(images):
        n = images.shape[0]
        flat = T.reshape(images, (n, int(np.prod(images.shape[1:]))))
        return T.tsum(T.mul(flat, T.broadcast_rows(w, n)), axis=1)
    return f


class TestExamples:
    def test_positive_gradient_two_steps(self):
        x = np.full((2, 3, 2, 2), 0.5, np.float32)
        cfg = AttackConfig(eps=2 * PIXEL, alpha=PIXEL, steps=2)
        out = pgd_attack(_linear(np.ones(12)), x, cfg)
        np.testing.assert_allclose(out.delta, 2 * PIXEL, atol=1e-7)

    def test_zero_gradient_leaves_input(self):
        x = np.random.default_rng(0).random((3, 4)).astype(np.float32)
        out = pgd_attack(_linear(np.zeros(4)), x, AttackConfig(eps=4 * PIXEL, alpha=PIXEL, steps=5))
        np.testing.assert_array_equal(out.x_adv, x)

    def test_box_clamp(self):
        x = np.full((1, 1), 0.999, np.float32)
        out = pgd_attack(_linear([1.0]), x, AttackConfig(eps=4 * PIXEL, alpha=4 * PIXEL, steps=1))
        assert out.x_adv[0, 0] == 1.0

    def test_pixel_grid_respects_box(self):
        x = np.full((1, 1), 0.999, np.float32)
        cfg = AttackConfig(eps=4 * PIXEL, alpha=PIXEL, steps=3, step_mode="pixel-grid")
        out = pgd_attack(_linear([1.0]), x, cfg)
        assert out.x_adv[0, 0] <= 1.0

    def test_negative_gradient(self):
        x = np.full((1, 2), 0.5, np.float32)
        out = pgd_attack(_linear([-1.0, 2.0]), x, AttackConfig(eps=3 * PIXEL, alpha=PIXEL, steps=5))
        np.testing.assert_allclose(out.delta[0], [-3 * PIXEL, 3 * PIXEL], atol=1e-7)

    def test_eps_zero_is_identity(self):
        x = np.random.default_rng(1).random((2, 5)).astype(np.float32)
        out = pgd_attack(_linear(np.ones(5)), x, AttackConfig(eps=0.0, alpha=PIXEL, steps=3, random_start=True))
        np.testing.assert_array_equal(out.x_adv, x)


class TestContract:
    @pytest.mark.parametrize("seed", range(40))
    def test_random_trials(self, seed):
        rng = np.random.default_rng(seed)
        shape = (3, 2, 2, 2)
        x = rng.random(shape).astype(np.float32)
        x[0, 0, 0] = [0.0, 1.0]  # pixels on the box boundary
        grid = bool(seed % 2)
        cfg = AttackConfig(
            eps=int(rng.integers(0, 9)) * PIXEL, alpha=int(rng.integers(1, 4)) * PIXEL,
            steps=int(rng.integers(1, 6)), random_start=bool(rng.integers(2)), best_iterate=bool(rng.integers(2)),
            step_mode="pixel-grid" if grid else "fractional", restarts=int(rng.integers(1, 3)),
        )
        f = random_objective(rng, shape[1:])
        out = pgd_attack(f, x, cfg, seed)
        delta = out.x_adv.astype(np.float64) - x
        assert np.abs(delta).max() <= cfg.eps + 1e-7
        assert out.x_adv.min() >= 0.0 and out.x_adv.max() <= 1.0
        if grid:
            units = delta * 255.0
            assert np.abs(units - np.round(units)).max() < 1e-4
        if cfg.best_iterate:
            assert np.all(f(Tensor(out.x_adv)).data >= f(Tensor(x)).data)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.random((4, 8)).astype(np.float32)
        f = random_objective(rng, (8,))
        cfg = AttackConfig(eps=8 * PIXEL, alpha=2 * PIXEL, steps=5, random_start=True)
        a, b = pgd_attack(f, x, cfg, 11), pgd_attack(f, x, cfg, 11)
        assert a.x_adv.tobytes() == b.x_adv.tobytes()

    def test_best_iterate_not_worse_than_final(self):
        rng = np.random.default_rng(3)
        x = rng.random((6, 8)).astype(np.float32)
        f = random_objective(rng, (8,))
        base = dict(eps=8 * PIXEL, alpha=3 * PIXEL, steps=6)
        last = pgd_attack(f, x, AttackConfig(**base), 0)
        best = pgd_attack(f, x, AttackConfig(**base, best_iterate=True), 0)
        assert np.all(best.objective >= last.objective)

    def test_two_pixel_grid_optimum(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x0 = np.array([0.5, 0.25], np.float32)
            f = two_pixel_objective(rng, x0)
            cfg = AttackConfig(eps=PIXEL, alpha=PIXEL, steps=9, random_start=True, best_iterate=True,
                               step_mode="pixel-grid", restarts=100)
            out = pgd_attack(f, x0[None, :], cfg, seed)
            assert out.objective[0] == grid_maximum(f, x0)[0]


class TestConfig:
    def test_defaults(self):
        t, e = AttackConfig.training(), AttackConfig.evaluation()
        assert (t.eps, t.alpha, t.steps, t.random_start, t.best_iterate) == (PIXEL, PIXEL, 2, False, False)
        assert (e.eps, e.alpha, e.steps, e.random_start, e.best_iterate) == (PIXEL, PIXEL, 100, False, True)

    @pytest.mark.parametrize("kwargs", [
        {"eps": -0.1}, {"eps": 1.5}, {"alpha": 0.0}, {"steps": 0}, {"norm": "2"},
        {"step_mode": "pixel-grid", "alpha": 0.5 * PIXEL}, {"step_mode": "nope"}, {"restarts": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)


class TestErrorsAndIO:
    def test_nonfinite_objective_reports_step(self):
        calls = {"n": 0}

        def f(images):
            calls["n"] += 1
            scale = np.nan if calls["n"] == 3 else 1.0
            return T.scalar_mul(T.tsum(images, axis=1), scale)
        with pytest.raises(AttackError) as err:
            pgd_attack(f, np.full((1, 2), 0.5, np.float32), AttackConfig(eps=4 * PIXEL, steps=5))
        assert err.value.step == 2

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.random((3, 2, 2)).astype(np.float32)
        cfg = AttackConfig(eps=2 * PIXEL, steps=3)
        batch = pgd_attack(random_objective(rng, (2, 2)), x, cfg, 4)
        save_adversarial_batch(batch, tmp_path / "adv", cfg, 4, labels=[0, 1, 2])
        back, meta = load_adversarial_batch(tmp_path / "adv")
        assert back.x.tobytes() == batch.x.tobytes()
        assert back.x_adv.tobytes() == batch.x_adv.tobytes()
        assert meta["attack"] == cfg.to_dict() and meta["labels"] == [0, 1, 2]
        raw = np.fromfile(tmp_path / "adv" / "x_adv.bin", dtype="<f4")
        np.testing.assert_array_equal(raw, batch.x_adv.ravel())
