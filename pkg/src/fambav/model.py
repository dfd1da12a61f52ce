"""Patch-token image classifier built from bidirectional SSM blocks.

Images are cut into non-overlapping P x P patches, flattened row-major as
(P, P, C) blocks, linearly embedded, and prepended with a learned class
token pinned at index 0 so token fusion can never touch it. Position
embeddings are added once at embed time. Each layer optionally fuses r
token pairs (both scan directions then see the shrunk sequence), applies
the block with a residual connection, and the classifier head reads the
final class token through a norm and a linear map.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import fusion, ssm
from . import tensor as tn
from .errors import ConfigError, FormatError, IndexRangeError, PlanError
from .scheduler import FusionPlan, validate_plan
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FAMBAV1"


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 64  # D, token width
    e_dim: int = 128  # E, expanded width inside blocks
    n_state: int = 8  # N, state size per channel
    l_total: int = 8
    n_classes: int = 4
    k_conv: int = 4
    use_skip: bool = True
    head_hidden: int = 0  # 0 = plain linear head
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.l_total < 1:
            raise ConfigError("need at least one layer")

    @property
    def n_patches(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class PatchEmbedConfig:
    """Embedding parameters: patch projection, positions, class token."""

    proj: Tensor  # (P*P*C, D)
    pos_embed: Tensor  # (J+1, D)
    cls_token: Tensor  # (D,)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.proj", self.proj
        yield f"{prefix}.pos_embed", self.pos_embed
        yield f"{prefix}.cls_token", self.cls_token


@dataclass
class TokenSequence:
    """(B, L, D) hidden states; the class token lives at index 0 for the
    whole lifetime of the sequence. `sizes` tracks merged multiplicities."""

    values: Tensor
    sizes: np.ndarray | None = None

    cls_index = 0

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class VimModel:
    config: ModelConfig
    embed_params: PatchEmbedConfig
    layers: list[ssm.SsmParams]
    head_norm_gain: Tensor
    head_norm_bias: Tensor
    head_w: Tensor  # (D, n_classes) or (D, hidden) when head_hidden > 0
    head_b: Tensor
    head2_w: Tensor | None = None
    head2_b: Tensor | None = None
    fusion_weighted: bool = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.embed_params.named_parameters("embed"))
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"layer{i}"))
        out.append(("head.norm_gain", self.head_norm_gain))
        out.append(("head.norm_bias", self.head_norm_bias))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        if self.head2_w is not None:
            out.append(("head.w2", self.head2_w))
            out.append(("head.b2", self.head2_b))
        return out

    # ----- forward surfaces -------------------------------------------------

    def forward_tokens(self, images, plan: FusionPlan, trace: list | None = None,
                       ) -> tuple[TokenSequence, list[int]]:
        """Run the layer stack; returns the final sequence and the per-layer
        lengths each layer actually processed (after its fusion step)."""
        if plan.l_total != self.config.l_total:
            raise PlanError(
                f"plan covers {plan.l_total} layers, model has {self.config.l_total}")
        patches = patchify(images, self.config)
        seq = embed(patches, self.embed_params)
        validate_plan(plan.r, seq.length)
        lengths: list[int] = []
        for i, layer in enumerate(self.layers):
            r = plan.r[i]
            if r > 0:
                fused, sizes, _ = fusion.fuse_layer(
                    seq.values, r, sizes=seq.sizes, weighted=self.fusion_weighted,
                    trace=trace, layer_index=i + 1)
                seq = TokenSequence(values=fused, sizes=sizes)
            lengths.append(seq.length)
            block_out = ssm.mamba_block(seq.values, layer)
            seq = TokenSequence(values=tn.add(block_out, seq.values), sizes=seq.sizes)
        return seq, lengths

    def forward(self, images, plan: FusionPlan, trace: list | None = None,
                ) -> tuple[Tensor, list[int]]:
        """Class logits (B, n_classes) plus per-layer processed lengths."""
        seq, lengths = self.forward_tokens(images, plan, trace=trace)
        bsz = seq.values.shape[0]
        cls = tn.reshape(tn.slice_axis(seq.values, 1, 0, 1), (bsz, self.config.dim))
        feat = tn.layernorm(cls, self.head_norm_gain, self.head_norm_bias)
        logits = tn.add(tn.matmul(feat, self.head_w), self.head_b)
        if self.head2_w is not None:
            logits = tn.add(tn.matmul(tn.silu(logits), self.head2_w), self.head2_b)
        return logits, lengths


def init_model(config: ModelConfig, seed: int) -> VimModel:
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    param = lambda arr: Tensor(np.asarray(arr, dtype=dt), requires_grad=True)
    embed_params = PatchEmbedConfig(
        proj=param(rng.normal(0.0, 1.0 / np.sqrt(config.patch_dim),
                              size=(config.patch_dim, config.dim))),
        pos_embed=param(rng.normal(0.0, 0.02, size=(config.seq_len, config.dim))),
        cls_token=param(rng.normal(0.0, 0.02, size=(config.dim,))),
    )
    layers = [
        ssm.init_ssm_params(rng, config.dim, config.e_dim, config.n_state,
                            k_conv=config.k_conv, dtype=dt, use_skip=config.use_skip)
        for _ in range(config.l_total)
    ]
    hidden = config.head_hidden
    if hidden > 0:
        head_w = param(rng.normal(0.0, 1.0 / np.sqrt(config.dim), size=(config.dim, hidden)))
        head_b = param(np.zeros(hidden))
        head2_w = param(np.zeros((hidden, config.n_classes)))
        head2_b = param(np.zeros(config.n_classes))
    else:
        head_w = param(np.zeros((config.dim, config.n_classes)))
        head_b = param(np.zeros(config.n_classes))
        head2_w = head2_b = None
    return VimModel(
        config=config,
        embed_params=embed_params,
        layers=layers,
        head_norm_gain=param(np.ones(config.dim)),
        head_norm_bias=param(np.zeros(config.dim)),
        head_w=head_w,
        head_b=head_b,
        head2_w=head2_w,
        head2_b=head2_b,
    )


def patchify(images, config: ModelConfig) -> Tensor:
    """(B, C, H, W) -> (B, J, P*P*C); patch j holds the row-major flattening
    of its (P, P, C) block, patches ordered row-major over the grid."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    bsz, c, h, w = data.shape
    p = config.patch
    if c != config.channels or h != config.image_h or w != config.image_w:
        raise ConfigError(
            f"image shape {data.shape[1:]} does not match configured "
            f"({config.channels}, {config.image_h}, {config.image_w})")
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    # (B,C,H,W) -> (B, gh, gw, p, p, C) -> flatten each block as (p, p, C).
    blocks = data.reshape(bsz, c, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1)
    return Tensor(np.ascontiguousarray(blocks.reshape(bsz, gh * gw, p * p * c)))


def unpatchify(patches: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Inverse of patchify, for round-trip checks."""
    bsz = patches.shape[0]
    p, c = config.patch, config.channels
    gh, gw = config.image_h // p, config.image_w // p
    blocks = patches.reshape(bsz, gh, gw, p, p, c).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(blocks.reshape(bsz, c, config.image_h, config.image_w))


def embed(patches: Tensor, params: PatchEmbedConfig) -> TokenSequence:
    """Project patches to width D, prepend the class token, add positions."""
    bsz, n_patches, _ = patches.shape
    dim = params.cls_token.shape[0]
    projected = tn.matmul(patches, params.proj)
    cls = tn.broadcast_to(tn.reshape(params.cls_token, (1, 1, dim)), (bsz, 1, dim))
    tokens = tn.concat([cls, projected], axis=1)
    tokens = tn.add(tokens, params.pos_embed)
    return TokenSequence(values=tokens, sizes=None)


def classify_loss(logits: Tensor, targets: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross entropy, averaged over the batch."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    bsz, n_classes = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.min() < 0 or targets.max() >= n_classes:
        bad = targets[(targets < 0) | (targets >= n_classes)][0]
        raise IndexRangeError(f"target class {bad} out of range [0, {n_classes})")
    q = np.full((bsz, n_classes), smoothing / n_classes, dtype=logits.data.dtype)
    q[np.arange(bsz), targets] += 1.0 - smoothing
    logp = tn.log_softmax_lastaxis(logits)
    return tn.neg(tn.mean(tn.tsum(tn.mul(logp, Tensor(q)), axis=-1)))


# ---------------------------------------------------------------------------
# Checkpoint container: magic, JSON config record, then named float32
# little-endian parameter blobs in declaration order (layout in README).


def save_checkpoint(model: VimModel, path: str) -> None:
    payload = io.BytesIO()
    payload.write(CHECKPOINT_MAGIC)
    record = {
        "config": {k: getattr(model.config, k) for k in model.config.__dataclass_fields__},
        "fusion_weighted": model.fusion_weighted,
    }
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    payload.write(struct.pack("<I", len(blob)))
    payload.write(blob)
    for name, tensor in model.named_parameters():
        nbytes = name.encode("utf-8")
        payload.write(struct.pack("<H", len(nbytes)))
        payload.write(nbytes)
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        payload.write(struct.pack("<B", arr.ndim))
        payload.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(payload.getvalue())


def load_checkpoint(path: str) -> VimModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    record = json.loads(raw[off: off + blob_len].decode("utf-8"))
    off += blob_len
    config = ModelConfig(**record["config"])
    model = init_model(config, seed=0)
    model.fusion_weighted = bool(record.get("fusion_weighted", False))
    for name, tensor in model.named_parameters():
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        got = raw[off: off + name_len].decode("utf-8")
        off += name_len
        if got != name:
            raise FormatError(f"{path}: expected parameter {name!r}, found {got!r}")
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        if arr.shape != tensor.data.shape:
            raise FormatError(f"{path}: parameter {name} shape {arr.shape} != "
                              f"{tensor.data.shape}")
        tensor.data = arr.astype(config.np_dtype)
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return model
