import json
import struct

import numpy as np
import pytest

from zsrobust import tensor as T
from zsrobust.models import (
    ArchConfig,
    LinearHead,
    Model,
    PromptParams,
    TextBank,
    VisionEncoder,
    build_text_bank,
    flatten_params,
    freeze_mask,
    interpolate_models,
    interpolate_params,
    load_checkpoint,
    load_text_bank,
    read_checkpoint_header,
    save_checkpoint,
    save_text_bank,
    sequence_length,
)

SMALL = ArchConfig(image_shape=(3, 8, 8), patch=4, width=8, depth=2, heads=2, embed_dim=4)


def _images(n, arch=SMALL, seed=0):
    return np.random.default_rng(seed).random((n,) + arch.image_shape).astype(np.float32)


def _model(arch=SMALL, seed=0, prompt=None, head=None):
    m = Model(VisionEncoder.init(arch, seed))
    if prompt:
        m.prompt = PromptParams.init(arch, prompt, k=5, seed=seed + 1)
    if head:
        m.head = LinearHead.init(arch.embed_dim, head, seed + 2)
    return m


class TestArchitecture:
    def test_default_toy_arch(self):
        a = ArchConfig()
        assert (a.image_shape, a.patch, a.width, a.depth, a.heads, a.embed_dim) == ((3, 32, 32), 4, 64, 4, 4, 32)

    def test_param_count_matches_tensors(self):
        for arch in (SMALL, ArchConfig()):
            enc = VisionEncoder.init(arch, 0)
            assert sum(t.size for _, t in enc.named_parameters()) == arch.param_count()

    def test_block_formula(self):
        # 12 d^2 + 13 d for an MLP ratio of 4
        d = ArchConfig().width
        assert ArchConfig().block_param_count() == 12 * d * d + 13 * d

    def test_patch_mismatch(self):
        with pytest.raises(ValueError, match="patch"):
            ArchConfig(image_shape=(3, 10, 10), patch=4)

    def test_wrong_image_shape(self):
        with pytest.raises(T.ShapeError):
            _model().encode(np.zeros((2, 3, 12, 12), np.float32))

    def test_output_shape(self):
        assert _model().encode(_images(5)).shape == (5, SMALL.embed_dim)


class TestPrompts:
    def test_zero_pixel_prompt_is_identity(self):
        base = _model()
        prompted = base.copy()
        prompted.prompt = PromptParams.init(SMALL, "pixel")
        x = _images(3)
        np.testing.assert_array_equal(base.encode(x).data, prompted.encode(x).data)

    def test_token_sequence_length(self):
        m = _model(arch=ArchConfig(), prompt="token")
        assert sequence_length(m.arch, m.prompt) == (32 // 4) * (32 // 4) + 1 + 5

    def test_pixel_prompt_shape(self):
        assert PromptParams.init(SMALL, "pixel").values.shape == SMALL.image_shape

    def test_token_prompt_changes_output(self):
        base = _model()
        m = base.copy()
        m.prompt = PromptParams.init(SMALL, "token", k=3, seed=4)
        x = _images(2)
        assert not np.array_equal(base.encode(x).data, m.encode(x).data)

    def test_encode_is_deterministic(self):
        x = _images(4)
        a = _model(seed=3).encode(x).data
        b = _model(seed=3).encode(x).data
        np.testing.assert_array_equal(a, b)


class TestFreezeMask:
    def test_full(self):
        m = _model()
        mask = freeze_mask(m, "full")
        assert mask.fraction == 1.0

    def test_head_only(self):
        m = _model(head=3)
        mask = freeze_mask(m, "head_only")
        assert mask.trainable == frozenset({"head.weight", "head.bias"})
        assert mask.trainable_count == SMALL.embed_dim * 3 + 3

    def test_last_block_count_matches_formula(self):
        for arch in (SMALL, ArchConfig()):
            assert freeze_mask(_model(arch), "last_k_blocks", 1).trainable_count == arch.block_param_count()

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            freeze_mask(_model(), "last_k_blocks", SMALL.depth + 1)

    def test_prompt_only(self):
        m = _model(prompt="token")
        assert freeze_mask(m, "prompt_only").trainable == frozenset({"prompt.token"})

    def test_gradients_only_reach_trainable(self):
        m = _model(prompt="token")
        mask = freeze_mask(m, "prompt_only")
        T.tsum(m.encode(_images(2), freeze_mask=mask)).backward()
        for name, t in m.named_parameters():
            if name == "prompt.token":
                assert t.grad is not None and np.any(t.grad)
            else:
                assert t.grad is None or not np.any(t.grad), name


class TestInterpolation:
    def test_endpoints_exact(self):
        a, b = _model(seed=0), _model(seed=1)
        _, va = flatten_params(a)
        _, vb = flatten_params(b)
        np.testing.assert_array_equal(interpolate_params(va, vb, 0.0), va)
        np.testing.assert_array_equal(interpolate_params(va, vb, 1.0), vb)
        np.testing.assert_array_equal(flatten_params(interpolate_models(a, b, 1.0))[1], vb)

    def test_midpoint(self):
        np.testing.assert_array_equal(interpolate_params(np.zeros(3), np.full(3, 2.0), 0.5), np.ones(3))

    def test_affine_identity(self):
        _, v = flatten_params(_model())
        for w in (0.0, 0.3, 0.77, 1.0):
            np.testing.assert_allclose(interpolate_params(v, v, w), v, rtol=0, atol=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interpolate_params(np.zeros(3), np.zeros(4), 0.5)
        with pytest.raises(ValueError):
            interpolate_models(_model(), _model(prompt="token"), 0.5)

    def test_manifest_lists_each_tensor_once(self):
        manifest, vec = flatten_params(_model(prompt="pixel", head=3))
        names = [n for n, _ in manifest]
        assert len(names) == len(set(names))
        assert vec.size == sum(int(np.prod(s)) for _, s in manifest)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = _model(prompt="token", head=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path, extra={"note": 1})
        back = load_checkpoint(path)
        assert back.arch == m.arch
        for (n1, t1), (n2, t2) in zip(m.named_parameters(), back.named_parameters()):
            assert n1 == n2
            assert t1.data.tobytes() == t2.data.tobytes()

    def test_layout_little_endian(self, tmp_path):
        m = _model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        header, start = read_checkpoint_header(path)
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[8:16])
        assert start == 16 + hlen
        first = header["tensors"][0]
        assert first["name"] == "patch_embed.weight"
        value = struct.unpack("<f", raw[start:start + 4])[0]
        assert value == float(m.encoder["patch_embed.weight"].data.ravel()[0])

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(_model(), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)


class TestTextBank:
    NAMES = ["red circle", "red square", "blue circle", "blue square", "green cross"]

    def test_unit_rows(self):
        for mode in ("compositional", "hashed"):
            bank = build_text_bank(self.NAMES, 32, mode, seed=3)
            np.testing.assert_allclose(np.linalg.norm(bank.embeddings.astype(np.float64), axis=1), 1.0, atol=1e-6)

    def test_hashed_deterministic(self):
        a = build_text_bank(self.NAMES, 16, "hashed", seed=1)
        b = build_text_bank(self.NAMES, 16, "hashed", seed=1)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()

    def test_shared_attribute_closer_over_100_seeds(self):
        names = [f"{c} {s}" for s in ("circle", "square", "triangle", "cross")
                 for c in ("red", "green", "blue", "yellow")]
        attrs = [set(n.split()) for n in names]
        for seed in range(100):
            e = build_text_bank(names, 32, "compositional", seed, sigma=0.1).embeddings.astype(np.float64)
            sims = e @ e.T
            shared, disjoint = [], []
            for i in range(len(names)):
                for j in range(i + 1, len(names)):
                    (shared if attrs[i] & attrs[j] else disjoint).append(sims[i, j])
            assert np.mean(shared) > np.mean(disjoint) + 0.25, seed

    def test_codes_independent_of_class_list(self):
        full = build_text_bank(self.NAMES, 32, "compositional", seed=2)
        part = build_text_bank(self.NAMES[2:4], 32, "compositional", seed=2)
        np.testing.assert_array_equal(full.embeddings[2:4], part.embeddings)

    def test_errors(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_text_bank(["red circle", "red circle"])
        with pytest.raises(ValueError, match="two attributes"):
            build_text_bank(["circle"])
        with pytest.raises(ValueError):
            TextBank(("a",), np.array([[2.0, 0.0]]))

    def test_read_only(self):
        bank = build_text_bank(self.NAMES)
        with pytest.raises(ValueError):
            bank.embeddings[0, 0] = 1.0

    def test_file_round_trip(self, tmp_path):
        bank = build_text_bank(self.NAMES, 32, "compositional", seed=5)
        path = tmp_path / "bank.json"
        save_text_bank(bank, path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"d_e", "names", "rows"} and doc["d_e"] == 32
        back = load_text_bank(path)
        assert back.names == bank.names
        assert back.embeddings.tobytes() == bank.embeddings.tobytes()
        again = build_text_bank(None, mode="file", path=path)
        assert again.embeddings.tobytes() == bank.embeddings.tobytes()

    def test_file_mode_renormalises(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text(json.dumps({"d_e": 2, "names": ["a b", "c d"], "rows": [[3.0, 4.0], [0.0, 2.0]]}))
        bank = load_text_bank(path)
        np.testing.assert_allclose(bank.embeddings, [[0.6, 0.8], [0.0, 1.0]], rtol=1e-6)
