"""Model architectures: gated multi-branch network, static-fusion and
single-backbone baselines, plus checkpoint I/O and transfer of pretrained
backbone weights.

Parameter naming convention (load-bearing for optimizer groups and transfer):

    branch{i}.conv1.w / .b     first conv block of branch i (1-based)
    branch{i}.conv2.w / .b     second conv block
    branch{i}.head.w / .b      dense projection to the latent width
    policy.conv.w / .b         policy backbone conv block
    policy.head.w / .b         policy logits head
    classifier.w / .b          final linear classifier
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CompatibilityError, FormatError, ShapeError, UsageError

CKPT_MAGIC = b"AMFCKPT1"


@dataclass
class ForwardResult:
    """Everything the monitors need from one forward pass."""

    probs: Tensor
    logits: Tensor
    fused: Tensor
    weights: Tensor | None = None  # [N, n] softmaxed policy output (gated arch only)
    latents: list[Tensor] = field(default_factory=list)


def _gaussian(shape, std, seed, requires_grad=True) -> Tensor:
    return ad.tensor_create(shape, fill="gaussian", mean=0.0, std=std, seed=seed, requires_grad=requires_grad)


def _zeros(shape, requires_grad=True) -> Tensor:
    return ad.tensor_create(shape, fill="zeros", requires_grad=requires_grad)


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


class Model:
    """Base: a named, ordered parameter dict plus architecture metadata."""

    arch: str

    def __init__(self, n: int, d: int, num_classes: int, in_channels: int, image_hw: int):
        if n < 1:
            raise UsageError(f"branch count must be >= 1, got {n}")
        if num_classes < 2:
            raise UsageError(f"need >= 2 classes, got {num_classes}")
        if image_hw % 4:
            raise ShapeError(f"image size must be divisible by 4, got {image_hw}")
        self.n = n
        self.d = d
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.image_hw = image_hw
        self.params: dict[str, Tensor] = {}

    def _init_branch(self, prefix: str, rng_seed: int) -> None:
        c, hw, d = self.in_channels, self.image_hw, self.d
        flat = 16 * (hw // 4) * (hw // 4)
        self.params[f"{prefix}.conv1.w"] = _gaussian((8, c, 3, 3), _he_std(c * 9), rng_seed)
        self.params[f"{prefix}.conv1.b"] = _zeros((8,))
        self.params[f"{prefix}.conv2.w"] = _gaussian((16, 8, 3, 3), _he_std(8 * 9), rng_seed + 1)
        self.params[f"{prefix}.conv2.b"] = _zeros((16,))
        self.params[f"{prefix}.head.w"] = _gaussian((flat, d), _he_std(flat), rng_seed + 2)
        self.params[f"{prefix}.head.b"] = _zeros((d,))

    def _branch_forward(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = ad.maxpool2(ad.relu(ad.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])))
        h = ad.maxpool2(ad.relu(ad.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])))
        return ad.relu(ad.add_bias(ad.matmul(ad.flatten(h), p[f"{prefix}.head.w"]), p[f"{prefix}.head.b"]))

    def _init_classifier(self, in_width: int, seed: int) -> None:
        self.params["classifier.w"] = _gaussian((in_width, self.num_classes), 0.1, seed)
        self.params["classifier.b"] = _zeros((self.num_classes,))

    def _classify(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        logits = ad.add_bias(ad.matmul(fused, self.params["classifier.w"]), self.params["classifier.b"])
        return logits, ad.softmax(logits)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def forward(self, x: Tensor) -> ForwardResult:
        raise NotImplementedError


class SingleModel(Model):
    """Standard fine-tune baseline: one backbone, one classifier."""

    arch = "single"

    def __init__(self, d: int, num_classes: int, in_channels: int = 1, image_hw: int = 16, seed: int = 0):
        super().__init__(1, d, num_classes, in_channels, image_hw)
        self._init_branch("branch1", seed * 1000 + 1)
        self._init_classifier(d, seed * 1000 + 900)

    def forward(self, x: Tensor) -> ForwardResult:
        m = self._branch_forward("branch1", x)
        logits, probs = self._classify(m)
        return ForwardResult(probs=probs, logits=logits, fused=m, latents=[m])


class MultiTuneModel(Model):
    """Static concatenation fusion of n branches (no gating)."""

    arch = "multitune"

    def __init__(self, n: int, d: int, num_classes: int, in_channels: int = 1, image_hw: int = 16, seed: int = 0):
        super().__init__(n, d, num_classes, in_channels, image_hw)
        for i in range(1, n + 1):
            self._init_branch(f"branch{i}", seed * 1000 + i * 10)
        self._init_classifier(n * d, seed * 1000 + 900)

    def forward(self, x: Tensor) -> ForwardResult:
        latents = [self._branch_forward(f"branch{i}", x) for i in range(1, self.n + 1)]
        fused = ad.concat(latents)
        logits, probs = self._classify(fused)
        return ForwardResult(probs=probs, logits=logits, fused=fused, latents=latents)


class AMFModel(Model):
    """n parallel branches gated per sample by a softmaxed policy network,
    concatenated into one linear classifier."""

    arch = "amf"

    def __init__(self, n: int, d: int, num_classes: int, in_channels: int = 1, image_hw: int = 16, seed: int = 0):
        super().__init__(n, d, num_classes, in_channels, image_hw)
        c, hw = in_channels, image_hw
        for i in range(1, n + 1):
            self._init_branch(f"branch{i}", seed * 1000 + i * 10)
        pol_flat = 4 * (hw // 2) * (hw // 2)
        self.params["policy.conv.w"] = _gaussian((4, c, 3, 3), _he_std(c * 9), seed * 1000 + 800)
        self.params["policy.conv.b"] = _zeros((4,))
        # zero head: every sample starts at the uniform weighting 1/n, so early
        # routing reflects accumulated gradient signal rather than init noise
        self.params["policy.head.w"] = _zeros((pol_flat, n))
        self.params["policy.head.b"] = _zeros((n,))
        self._init_classifier(n * d, seed * 1000 + 900)
        assert self.policy_param_count() < self.branch_param_count("branch1")

    def branch_param_count(self, prefix: str) -> int:
        return sum(t.data.size for k, t in self.params.items() if k.startswith(prefix + "."))

    def policy_param_count(self) -> int:
        return self.branch_param_count("policy")

    def policy_logits(self, x: Tensor) -> Tensor:
        p = self.params
        h = ad.maxpool2(ad.relu(ad.conv2d(x, p["policy.conv.w"], p["policy.conv.b"])))
        return ad.add_bias(ad.matmul(ad.flatten(h), p["policy.head.w"]), p["policy.head.b"])

    def forward(self, x: Tensor) -> ForwardResult:
        weights = ad.softmax(self.policy_logits(x))
        latents = [self._branch_forward(f"branch{i}", x) for i in range(1, self.n + 1)]
        scaled = [ad.scale_rows(m, ad.slice_cols(weights, i, i + 1)) for i, m in enumerate(latents)]
        fused = ad.concat(scaled)
        logits, probs = self._classify(fused)
        return ForwardResult(probs=probs, logits=logits, fused=fused, weights=weights, latents=latents)


def init_model(arch: str, seed: int, num_classes: int, n: int = 2, d: int = 64,
               in_channels: int = 1, image_hw: int = 16) -> Model:
    """Deterministic model factory. Classifier weights ~ N(0, 0.1), bias 0;
    backbone weights use fan-in-scaled gaussians."""
    if arch == "amf":
        return AMFModel(n, d, num_classes, in_channels, image_hw, seed)
    if arch == "multitune":
        return MultiTuneModel(n, d, num_classes, in_channels, image_hw, seed)
    if arch == "single":
        return SingleModel(d, num_classes, in_channels, image_hw, seed)
    raise UsageError(f"unknown arch {arch!r}")


# ---------------------------------------------------------------------------
# Checkpoint format:
#   "AMFCKPT1" | u32 param count | per param:
#     u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload
# All integers little-endian.
# ---------------------------------------------------------------------------

def serialize_params(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def deserialize_params(blob: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(blob)

    def read(n: int) -> bytes:
        b = buf.read(n)
        if len(b) != n:
            raise FormatError("truncated checkpoint")
        return b

    if read(8) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    count = struct.unpack("<I", read(4))[0]
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = struct.unpack("<H", read(2))[0]
        name = read(nlen).decode("utf-8")
        rank = struct.unpack("<B", read(1))[0]
        dims = struct.unpack(f"<{rank}I", read(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(read(4 * size), dtype="<f4").reshape(dims).copy()
        out[name] = arr
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return out


def checkpoint_save(model_or_params, path: str) -> None:
    params = model_or_params.params if isinstance(model_or_params, Model) else model_or_params
    arrays = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    blob = serialize_params(arrays)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def checkpoint_load(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return deserialize_params(f.read())


def load_params_into(model: Model, params: dict[str, np.ndarray]) -> None:
    """Load a full checkpoint into a model; all names and shapes must match."""
    bad = sorted(set(params) ^ set(model.params))
    if bad:
        raise CompatibilityError(f"parameter name mismatch: {bad}")
    _copy_checked(model, params)


def _copy_checked(model: Model, params: dict[str, np.ndarray]) -> None:
    bad = [k for k, v in params.items() if model.params[k].shape != v.shape]
    if bad:
        raise CompatibilityError(f"shape mismatch for: {sorted(bad)}")
    for k, v in params.items():
        model.params[k].data = v.astype(model.params[k].dtype)


def transfer_init(target: Model, source: dict[str, np.ndarray], mapping: dict[str, str]) -> Model:
    """Copy pretrained weights into ``target`` by name-prefix mapping.

    ``mapping`` maps target prefixes to source prefixes; parameters not
    covered by any mapping (e.g. the freshly initialized classifier) are
    left untouched.
    """
    updates: dict[str, np.ndarray] = {}
    for tgt_prefix, src_prefix in mapping.items():
        hit = False
        for name in target.params:
            if name.startswith(tgt_prefix):
                src_name = src_prefix + name[len(tgt_prefix):]
                if src_name in source:
                    updates[name] = source[src_name]
                    hit = True
        if not hit:
            raise CompatibilityError(f"mapping {tgt_prefix!r} -> {src_prefix!r} matched nothing")
    _copy_checked(target, updates)
    return target
