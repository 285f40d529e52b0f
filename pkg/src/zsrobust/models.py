"""Tiny vision transformer, its adaptation wrappers, and the frozen text bank."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

POLICIES = ("full", "last_k_blocks", "head_only", "prompt_only")
PROMPT_TOKEN_STD = 0.02
CKPT_MAGIC = b"ZSRBCKPT"
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class ArchConfig:
    image_shape: tuple = (3, 32, 32)
    patch: int = 4
    width: int = 64
    depth: int = 4
    heads: int = 4
    embed_dim: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        c, h, w = self.image_shape
        if h % self.patch or w % self.patch:
            raise ValueError(f"image {h}x{w} not divisible by patch size {self.patch}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def num_patches(self):
        _, h, w = self.image_shape
        return (h // self.patch) * (w // self.patch)

    @property
    def patch_dim(self):
        return self.image_shape[0] * self.patch * self.patch

    def block_param_count(self):
        d, hidden = self.width, self.width * self.mlp_ratio
        # two layer norms, qkv, attention output, mlp up and down
        return 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)

    def param_count(self):
        d = self.width
        return (
            self.patch_dim * d
            + d
            + (self.num_patches + 1) * d
            + self.depth * self.block_param_count()
            + 2 * d
            + d * self.embed_dim
        )

    def to_dict(self):
        out = asdict(self)
        out["image_shape"] = list(self.image_shape)
        return out


def _param_shapes(arch):
    d, hidden = arch.width, arch.width * arch.mlp_ratio
    shapes = OrderedDict()
    shapes["patch_embed.weight"] = (arch.patch_dim, d)
    shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (arch.num_patches + 1, d)
    for i in range(arch.depth):
        b = f"blocks.{i}."
        shapes[b + "ln1.weight"] = (d,)
        shapes[b + "ln1.bias"] = (d,)
        shapes[b + "attn.qkv.weight"] = (d, 3 * d)
        shapes[b + "attn.qkv.bias"] = (3 * d,)
        shapes[b + "attn.out.weight"] = (d, d)
        shapes[b + "attn.out.bias"] = (d,)
        shapes[b + "ln2.weight"] = (d,)
        shapes[b + "ln2.bias"] = (d,)
        shapes[b + "mlp.up.weight"] = (d, hidden)
        shapes[b + "mlp.up.bias"] = (hidden,)
        shapes[b + "mlp.down.weight"] = (hidden, d)
        shapes[b + "mlp.down.bias"] = (d,)
    shapes["ln_post.weight"] = (d,)
    shapes["ln_post.bias"] = (d,)
    shapes["proj"] = (d, arch.embed_dim)
    return shapes


class VisionEncoder:
    """Parameters of the image encoder, keyed by name in a fixed order."""

    def __init__(self, arch, params):
        self.arch = arch
        expected = _param_shapes(arch)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise T.ShapeError(f"param {name}", params[name].shape, shape)
        self.params = OrderedDict(params)

    @classmethod
    def init(cls, arch=None, seed=0):
        arch = arch or ArchConfig()
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        for name, shape in _param_shapes(arch).items():
            if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "ln_post.weight":
                value = np.ones(shape)
            elif name.endswith("bias"):
                value = np.zeros(shape)
            elif name in ("cls_token", "pos_embed"):
                value = rng.normal(0.0, arch.width**-0.5, shape)
            else:
                # fan-in scaling; residual branch outputs shrink with depth
                std = shape[0] ** -0.5
                if name.endswith("attn.out.weight") or name.endswith("mlp.down.weight"):
                    std *= (2 * arch.depth) ** -0.5
                value = rng.normal(0.0, std, shape)
            params[name] = Tensor(value.astype(np.float32), requires_grad=True)
        return cls(arch, params)

    def named_parameters(self):
        return list(self.params.items())

    def __getitem__(self, name):
        return self.params[name]


@dataclass
class PromptParams:
    """Learnable visual prompt: ``k`` appended tokens or an additive pixel pattern."""

    variant: str
    values: Tensor

    def __post_init__(self):
        if self.variant not in ("token", "pixel"):
            raise ValueError(f"unknown prompt variant {self.variant!r}")

    @classmethod
    def init(cls, arch, variant, k=5, seed=0):
        if variant == "token":
            rng = np.random.default_rng(seed)
            values = rng.normal(0.0, PROMPT_TOKEN_STD, (k, arch.width))
        elif variant == "pixel":
            values = np.zeros(arch.image_shape)
        else:
            raise ValueError(f"unknown prompt variant {variant!r}")
        return cls(variant, Tensor(values.astype(np.float32), requires_grad=True))

    @property
    def num_tokens(self):
        return self.values.shape[0] if self.variant == "token" else 0


@dataclass
class LinearHead:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, embed_dim, num_classes, seed=0):
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, embed_dim**-0.5, (embed_dim, num_classes)).astype(np.float32)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes, np.float32), requires_grad=True))

    @property
    def num_classes(self):
        return self.weight.shape[1]

    def __call__(self, z):
        return T.add(T.matmul(z, self.weight), self.bias)


@dataclass
class Model:
    """An encoder together with its optional prompt and linear head."""

    encoder: VisionEncoder
    prompt: PromptParams | None = None
    head: LinearHead | None = None

    @property
    def arch(self):
        return self.encoder.arch

    def named_parameters(self):
        out = [(n, t) for n, t in self.encoder.named_parameters()]
        if self.prompt is not None:
            out.append((f"prompt.{self.prompt.variant}", self.prompt.values))
        if self.head is not None:
            out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def state(self):
        return OrderedDict((n, t.data) for n, t in self.named_parameters())

    def copy(self):
        enc = VisionEncoder(
            self.arch, OrderedDict((n, Tensor(t.data.copy(), requires_grad=True)) for n, t in self.encoder.params.items())
        )
        prompt = head = None
        if self.prompt is not None:
            prompt = PromptParams(self.prompt.variant, Tensor(self.prompt.values.data.copy(), requires_grad=True))
        if self.head is not None:
            head = LinearHead(
                Tensor(self.head.weight.data.copy(), requires_grad=True),
                Tensor(self.head.bias.data.copy(), requires_grad=True),
            )
        return Model(enc, prompt, head)

    def astype(self, dtype):
        """Copy with every parameter cast to ``dtype`` (used by gradient checks)."""
        out = self.copy()
        for _, t in out.named_parameters():
            t.data = t.data.astype(dtype)
        return out

    def encode(self, images, freeze_mask=None):
        return encode_image(self.encoder, images, self.prompt, freeze_mask)


def _attention(x, qkv_w, qkv_b, out_w, out_b, heads):
    n, t, d = x.shape
    dh = d // heads
    qkv = T.add(T.matmul(x, qkv_w), qkv_b)
    qkv = T.transpose(T.reshape(qkv, (n, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh**-0.5)
    ctx = T.matmul(T.softmax(scores), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    return T.add(T.matmul(ctx, out_w), out_b)


def _tokens(encoder, images, prompt):
    arch = encoder.arch
    p = encoder.params
    c, h, w = arch.image_shape
    if tuple(images.shape[1:]) != arch.image_shape:
        raise T.ShapeError("encode_image", images.shape, (None,) + arch.image_shape)
    n, s = images.shape[0], arch.patch
    x = images
    if prompt is not None and prompt.variant == "pixel":
        x = T.clamp(T.add(x, prompt.values), 0.0, 1.0)
    x = T.scalar_mul(T.add(x, Tensor(np.full(x.shape[1:], -PIXEL_MEAN, dtype=x.dtype))), 1.0 / PIXEL_STD)
    patches = T.reshape(x, (n, c, h // s, s, w // s, s))
    patches = T.reshape(T.transpose(patches, (0, 2, 4, 1, 3, 5)), (n, arch.num_patches, arch.patch_dim))
    emb = T.matmul(patches, p["patch_embed.weight"])
    cls = T.broadcast_rows(p["cls_token"], n)
    seq = T.add(T.concat([cls, emb], axis=1), p["pos_embed"])
    if prompt is not None and prompt.variant == "token":
        seq = T.concat([seq, T.broadcast_rows(prompt.values, n)], axis=1)
    return seq


def encode_image(encoder, images, prompt=None, freeze_mask=None):
    """Embed a batch of N×C×H×W images in [0, 1] into N×embed_dim features.

    Token prompts are appended after the class and patch tokens; a pixel
    prompt is added to the image and the sum clamped back to [0, 1].
    Tensors excluded by ``freeze_mask`` receive no gradient.
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    frozen = []
    if freeze_mask is not None:
        named = dict(encoder.named_parameters())
        if prompt is not None:
            named[f"prompt.{prompt.variant}"] = prompt.values
        frozen = [t for n, t in named.items() if n not in freeze_mask.trainable]
    with T.frozen(frozen):
        p = encoder.params
        x = _tokens(encoder, images, prompt)
        for i in range(encoder.arch.depth):
            b = f"blocks.{i}."
            h = T.layer_norm(x, p[b + "ln1.weight"], p[b + "ln1.bias"])
            x = T.add(
                x,
                _attention(
                    h, p[b + "attn.qkv.weight"], p[b + "attn.qkv.bias"],
                    p[b + "attn.out.weight"], p[b + "attn.out.bias"], encoder.arch.heads,
                ),
            )
            h = T.layer_norm(x, p[b + "ln2.weight"], p[b + "ln2.bias"])
            h = T.gelu(T.add(T.matmul(h, p[b + "mlp.up.weight"]), p[b + "mlp.up.bias"]))
            x = T.add(x, T.add(T.matmul(h, p[b + "mlp.down.weight"]), p[b + "mlp.down.bias"]))
        cls = T.layer_norm(x[:, 0, :], p["ln_post.weight"], p["ln_post.bias"])
        return T.matmul(cls, p["proj"])


def sequence_length(arch, prompt=None):
    return arch.num_patches + 1 + (prompt.num_tokens if prompt is not None else 0)


# ---------------------------------------------------------------- freezing


@dataclass(frozen=True)
class FreezeMask:
    trainable: frozenset
    trainable_count: int
    total_count: int

    @property
    def fraction(self):
        return self.trainable_count / self.total_count if self.total_count else 0.0


def freeze_mask(model, policy, k=None):
    """Select trainable tensors by policy: full, last_k_blocks, head_only, prompt_only."""
    if policy not in POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}")
    named = model.named_parameters()
    depth = model.arch.depth
    if policy == "full":
        chosen = {n for n, _ in named}
    elif policy == "last_k_blocks":
        if k is None or k < 0 or k > depth:
            raise ValueError(f"last_k_blocks: k={k} outside [0, {depth}]")
        keep = {f"blocks.{i}." for i in range(depth - k, depth)}
        chosen = {n for n, _ in named if any(n.startswith(b) for b in keep)}
    elif policy == "head_only":
        if model.head is None:
            raise ValueError("head_only policy needs a linear head")
        chosen = {"head.weight", "head.bias"}
    else:
        if model.prompt is None:
            raise ValueError("prompt_only policy needs a prompt")
        chosen = {f"prompt.{model.prompt.variant}"}
    count = sum(t.size for n, t in named if n in chosen)
    return FreezeMask(frozenset(chosen), count, sum(t.size for _, t in named))


# ---------------------------------------------------------------- interpolation


def flatten_params(model):
    """Return (manifest, vector); manifest lists (name, shape) in parameter order."""
    named = model.named_parameters()
    manifest = [(n, tuple(t.shape)) for n, t in named]
    vec = np.concatenate([t.data.ravel() for _, t in named]) if named else np.zeros(0, np.float32)
    return manifest, vec


def unflatten_params(model, vector):
    """Copy of ``model`` with parameters replaced from a flat vector."""
    out = model.copy()
    offset = 0
    for _, t in out.named_parameters():
        n = t.size
        t.data = np.asarray(vector[offset:offset + n], dtype=t.data.dtype).reshape(t.shape).copy()
        offset += n
    if offset != len(vector):
        raise T.ShapeError("unflatten_params", (offset,), (len(vector),))
    return out


def interpolate_params(theta_a, theta_b, w):
    """(1 - w) * theta_a + w * theta_b, elementwise."""
    a, b = np.asarray(theta_a), np.asarray(theta_b)
    if a.shape != b.shape:
        raise T.ShapeError("interpolate_params", a.shape, b.shape)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"interpolation weight {w} outside [0, 1]")
    return ((1.0 - w) * a + w * b).astype(a.dtype)


def interpolate_models(model_a, model_b, w):
    man_a, va = flatten_params(model_a)
    man_b, vb = flatten_params(model_b)
    if man_a != man_b:
        raise ValueError("parameter manifests differ")
    return unflatten_params(model_a, interpolate_params(va, vb, w))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model, path, extra=None):
    """Header JSON (arch + tensor manifest) followed by a little-endian f32 payload."""
    manifest, offset = [], 0
    chunks = []
    for name, t in model.named_parameters():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    header = {
        "format": "zsrobust-checkpoint",
        "version": 1,
        "arch": model.arch.to_dict(),
        "prompt": None if model.prompt is None else {"variant": model.prompt.variant, "shape": list(model.prompt.values.shape)},
        "head": None if model.head is None else {"num_classes": model.head.num_classes},
        "tensors": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n)), 16 + n


def load_checkpoint(path):
    header, start = read_checkpoint_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    arrays = OrderedDict()
    for entry in header["tensors"]:
        end = entry["offset"] + 4 * entry["count"]
        if end > len(payload):
            raise ValueError(f"{path}: payload truncated at tensor {entry['name']}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype="<f4").astype(np.float32)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    arch = ArchConfig(**header["arch"])
    enc = OrderedDict((n, Tensor(arrays.pop(n), requires_grad=True)) for n in _param_shapes(arch))
    prompt = head = None
    if header["prompt"] is not None:
        variant = header["prompt"]["variant"]
        prompt = PromptParams(variant, Tensor(arrays.pop(f"prompt.{variant}"), requires_grad=True))
    if header["head"] is not None:
        head = LinearHead(Tensor(arrays.pop("head.weight"), requires_grad=True), Tensor(arrays.pop("head.bias"), requires_grad=True))
    if arrays:
        raise ValueError(f"{path}: unexpected tensors {sorted(arrays)}")
    return Model(VisionEncoder(arch, enc), prompt, head)


# ---------------------------------------------------------------- text bank


@dataclass(frozen=True)
class TextBank:
    """Frozen class-name embeddings; every row has unit L2 norm."""

    names: tuple
    embeddings: np.ndarray = field(repr=False)
    provenance: str = "generated"

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names in text bank")
        emb = np.array(self.embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] != len(names):
            raise T.ShapeError("TextBank", emb.shape, (len(names), None))
        norms = np.linalg.norm(emb.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("text bank rows must have unit norm")
        emb.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self):
        return len(self.names)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def subset(self, names):
        idx = [self.names.index(n) for n in names]
        return TextBank(tuple(names), self.embeddings[idx], self.provenance)

    def tensor(self):
        return Tensor(self.embeddings)

    def fingerprint(self):
        return hashlib.sha256(self.embeddings.tobytes() + "\x00".join(self.names).encode()).hexdigest()


def _name_rng(seed, *parts):
    digest = hashlib.sha256("\x1f".join(parts).encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _normalize_rows(rows):
    return _unit(np.asarray(rows, dtype=np.float64)).astype(np.float32)


def build_text_bank(class_names, embed_dim=32, mode="compositional", seed=0, sigma=0.05, path=None):
    """Build a frozen bank of class embeddings.

    compositional: each name is "<attr1> <attr2>"; the row is the normalised
    concatenation of one code per attribute plus ``sigma`` noise.  Codes
    depend only on (seed, slot, attribute) so banks built from different
    class lists agree on shared attributes.
    hashed: an independent seeded unit vector per full name.
    file: load rows from ``path`` and re-normalise them.
    """
    if mode == "file":
        bank = load_text_bank(path)
        if class_names is not None and list(class_names) != list(bank.names):
            bank = bank.subset(class_names)
        return bank
    names = list(class_names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    if not names:
        raise ValueError("empty class list")
    if mode == "hashed":
        rows = [_name_rng(seed, "hashed", n).standard_normal(embed_dim) for n in names]
    elif mode == "compositional":
        if embed_dim % 2:
            raise ValueError("compositional mode needs an even embedding dimension")
        half = embed_dim // 2
        rows = []
        for n in names:
            attrs = n.split()
            if len(attrs) != 2:
                raise ValueError(f"compositional class name {n!r} must have exactly two attributes")
            codes = [_unit(_name_rng(seed, "attr", str(slot), a).standard_normal(half)) for slot, a in enumerate(attrs)]
            noise = _name_rng(seed, "noise", n).standard_normal(embed_dim)
            rows.append(np.concatenate(codes) + sigma * noise)
    else:
        raise ValueError(f"unknown text bank mode {mode!r}")
    return TextBank(tuple(names), _normalize_rows(rows), "generated")


def save_text_bank(bank, path):
    doc = {"d_e": bank.dim, "names": list(bank.names), "rows": [[float(v) for v in row] for row in bank.embeddings]}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_text_bank(path):
    with open(path) as fh:
        doc = json.load(fh)
    rows = np.asarray(doc["rows"], dtype=np.float32)
    if rows.ndim != 2 or rows.shape[1] != doc["d_e"]:
        raise T.ShapeError("load_text_bank", rows.shape, (len(doc["names"]), doc["d_e"]))
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    # rows already unit-norm are kept verbatim so save/load is bit-exact
    drift = np.abs(norms - 1.0) > 1e-6
    if np.any(drift):
        rows[drift] = _normalize_rows(rows[drift])
    return TextBank(tuple(doc["names"]), rows, "loaded")
