"""A small pixel-space U-Net noise predictor with hookable attention.

The network follows the usual diffusion layout: residual blocks with group
normalization and SiLU, self- plus cross-attention at the 16x16 and 8x8
feature maps, sinusoidal timestep embeddings, and a learned token-embedding
table standing in for a text encoder. Every attention layer carries a stable
global index assigned encoder-first, then middle, then decoder, in forward
order; hooks installed on ``predict_noise`` receive (site, Q, K, V) and must
return the attention output, which makes the attention computation fully
interceptable for capture and editing.

Activations are NHWC float32 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import numerics as nm
from .numerics import DTYPE, Tensor
from .schedule import NoiseSchedule
from .serialization import load_tensor_map, save_tensor_map

TEMPLATE_LEN = 8          # "a photo of a [cls] with a [anomaly]"
ANOMALY_TOKEN_INDEX = 7   # position of the anomaly-type token in the template
NULL_TOKEN = "<null>"
PAD_TOKEN = "<pad>"

DEFAULT_CLASS_TOKENS = ("grid", "stripes", "speckle")
DEFAULT_ANOMALY_TOKENS = ("hole", "scratch", "color-patch")
DEFAULT_EXTRA_TOKENS = ("no", "intact", "smooth", "clean", "surface")

# trained normal-appearance markers; negative prompts built on these tokens
# carry meaning the guided difference can actually cancel against
NEGATIVE_MARKERS = {"hole": "intact", "scratch": "smooth", "color-patch": "clean"}


class Vocabulary:
    """Fixed word list plus class/anomaly tokens; ids index the embedding table."""

    FIXED = ("a", "photo", "of", "with")

    def __init__(self, class_tokens=DEFAULT_CLASS_TOKENS,
                 anomaly_tokens=DEFAULT_ANOMALY_TOKENS,
                 extra_tokens=DEFAULT_EXTRA_TOKENS):
        self.class_tokens = tuple(class_tokens)
        self.anomaly_tokens = tuple(anomaly_tokens)
        self.extra_tokens = tuple(extra_tokens)
        self.tokens = ((NULL_TOKEN, PAD_TOKEN) + self.FIXED + self.class_tokens
                       + self.anomaly_tokens + self.extra_tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        tid = self.index.get(token.lower())
        if tid is None:
            raise KeyError(f"unknown token {token!r}")
        return tid

    def tokenize(self, text: str) -> list[int]:
        return [self.token_id(w) for w in text.lower().split()]

    def template_ids(self, cls: str, anomaly: Optional[str] = None) -> list[int]:
        """Token ids for the prompt template, padded to the fixed length.

        With an anomaly: "a photo of a [cls] with a [anomaly]" (the anomaly
        token sits at index 7). Without: "a photo of a [cls]" plus padding.
        """
        if cls not in self.class_tokens:
            raise KeyError(f"unknown class token {cls!r}")
        if anomaly is None:
            words = ["a", "photo", "of", "a", cls]
            ids = [self.token_id(w) for w in words]
            ids += [self.token_id(PAD_TOKEN)] * (TEMPLATE_LEN - len(ids))
            return ids
        if anomaly not in self.anomaly_tokens:
            raise KeyError(f"unknown anomaly token {anomaly!r}")
        words = ["a", "photo", "of", "a", cls, "with", "a", anomaly]
        ids = [self.token_id(w) for w in words]
        assert len(ids) == TEMPLATE_LEN and words[ANOMALY_TOKEN_INDEX] == anomaly
        return ids

    def negative_template_ids(self, cls: str, marker: str) -> list[int]:
        """Normal-appearance prompt: the template with a marker in the anomaly slot."""
        if cls not in self.class_tokens:
            raise KeyError(f"unknown class token {cls!r}")
        if marker not in self.extra_tokens:
            raise KeyError(f"unknown marker token {marker!r}")
        words = ["a", "photo", "of", "a", cls, "with", "a", marker]
        return [self.token_id(w) for w in words]

    def null_ids(self) -> list[int]:
        return [self.token_id(NULL_TOKEN)] * TEMPLATE_LEN

    def header_string(self) -> str:
        return ",".join(self.tokens)


@dataclass
class PromptEmbedding:
    """Token embedding matrix (TEMPLATE_LEN x d_tau) with its provenance."""

    e: Tensor
    provenance: str = "original"

    @property
    def data(self) -> np.ndarray:
        return self.e.data


def stack_embeddings(embeddings) -> PromptEmbedding:
    arrs = [emb.e.data if emb.e.data.ndim == 2 else emb.e.data[0] for emb in embeddings]
    return PromptEmbedding(Tensor(np.stack(arrs)), provenance="batch")


@dataclass(frozen=True)
class AttentionSite:
    """Identity of one attention layer evaluation."""

    layer: int
    kind: str            # "self" | "cross"
    resolution: int
    t: int = -1          # denoising timestep of the call, -1 outside sampling


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    channels: tuple = (16, 32, 64)
    attn_resolutions: tuple = (16, 8)
    heads: int = 1
    d_tau: int = 64
    time_dim: int = 128
    groups: int = 8

    def validate(self):
        if len(self.channels) != 3:
            raise ValueError("expected three resolution levels")
        for c in self.channels:
            if c % self.groups or c % self.heads:
                raise ValueError(f"channel width {c} must divide groups and heads")
        if tuple(self.attn_resolutions) != (self.image_size // 2, self.image_size // 4):
            raise ValueError("attention expected at the two downsampled resolutions")


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(DTYPE)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, *, bias: bool = True,
                 scale: Optional[float] = None, zero: bool = False):
        std = scale if scale is not None else 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.w = Tensor(w.astype(DTYPE))
        self.b = Tensor(np.zeros(d_out, dtype=DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nm.matmul(x, self.w)
        return nm.add(y, self.b) if self.b is not None else y

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Conv:
    def __init__(self, rng, c_in: int, c_out: int, *, k: int = 3, stride: int = 1,
                 zero: bool = False):
        fan_in = k * k * c_in
        w = np.zeros((k, k, c_in, c_out)) if zero else \
            rng.normal(0.0, math.sqrt(2.0 / fan_in), (k, k, c_in, c_out))
        self.w = Tensor(w.astype(DTYPE))
        self.b = Tensor(np.zeros(c_out, dtype=DTYPE))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return nm.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class GroupNorm:
    def __init__(self, channels: int, groups: int):
        self.groups = groups
        self.gamma = Tensor(np.ones(channels, dtype=DTYPE))
        self.beta = Tensor(np.zeros(channels, dtype=DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return nm.group_norm(x, self.groups, self.gamma, self.beta)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


def standard_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    scale = Tensor(DTYPE(1.0 / math.sqrt(q.shape[-1])))
    logits = nm.mul(nm.matmul(q, nm.transpose_last2(k)), scale)
    return nm.matmul(nm.softmax_lastdim(logits), v)


class AttentionBlock:
    """Pre-normalized multi-head attention over spatial tokens.

    Self-attention projects K and V from the spatial features; cross-attention
    projects them from the prompt embedding, so K/V depend only on the text
    there and only on the features here.
    """

    def __init__(self, rng, channels: int, heads: int, groups: int,
                 kind: str, d_context: Optional[int] = None):
        self.kind = kind
        self.heads = heads
        self.channels = channels
        d_kv = channels if kind == "self" else d_context
        self.norm = GroupNorm(channels, groups)
        self.wq = Linear(rng, channels, channels, bias=False)
        self.wk = Linear(rng, d_kv, channels, bias=False)
        self.wv = Linear(rng, d_kv, channels, bias=False)
        self.wo = Linear(rng, channels, channels, zero=True)

    def _split(self, x: Tensor, batch: int, tokens: int) -> Tensor:
        x = nm.reshape(x, (batch, tokens, self.heads, self.channels // self.heads))
        return nm.permute(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, site: AttentionSite,
                 hook: Optional[Callable], context: Optional[Tensor] = None) -> Tensor:
        b, h, w, c = x.shape
        tokens = h * w
        hn = nm.reshape(self.norm(x), (b, tokens, c))
        source = hn if self.kind == "self" else context
        q = self._split(self.wq(hn), b, tokens)
        k = self._split(self.wk(source), b, source.shape[1])
        v = self._split(self.wv(source), b, source.shape[1])
        if hook is None:
            out = standard_attention(q, k, v)
        else:
            out = hook(site, q, k, v)
            if not isinstance(out, Tensor) or out.shape != q.shape:
                got = tuple(out.shape) if hasattr(out, "shape") else type(out)
                raise ValueError(f"hook at {site} returned bad output {got}, "
                                 f"expected {tuple(q.shape)}")
        out = nm.reshape(nm.permute(out, (0, 2, 1, 3)), (b, tokens, c))
        out = nm.reshape(self.wo(out), (b, h, w, c))
        return nm.add(x, out)

    def params(self, prefix: str) -> dict:
        out = {}
        out.update(self.norm.params(f"{prefix}.norm"))
        out.update(self.wq.params(f"{prefix}.wq"))
        out.update(self.wk.params(f"{prefix}.wk"))
        out.update(self.wv.params(f"{prefix}.wv"))
        out.update(self.wo.params(f"{prefix}.wo"))
        return out


class ResBlock:
    def __init__(self, rng, c_in: int, c_out: int, time_dim: int, groups: int):
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv(rng, c_in, c_out)
        self.temb = Linear(rng, time_dim, c_out)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv(rng, c_out, c_out, zero=True)
        self.skip = Conv(rng, c_in, c_out, k=1) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(nm.silu(self.norm1(x)))
        t = self.temb(nm.silu(temb))  # (B, C)
        h = nm.add(h, nm.reshape(t, (t.shape[0], 1, 1, t.shape[1])))
        h = self.conv2(nm.silu(self.norm2(h)))
        sk = self.skip(x) if self.skip is not None else x
        return nm.add(sk, h)

    def params(self, prefix: str) -> dict:
        out = {}
        out.update(self.norm1.params(f"{prefix}.norm1"))
        out.update(self.conv1.params(f"{prefix}.conv1"))
        out.update(self.temb.params(f"{prefix}.temb"))
        out.update(self.norm2.params(f"{prefix}.norm2"))
        out.update(self.conv2.params(f"{prefix}.conv2"))
        if self.skip is not None:
            out.update(self.skip.params(f"{prefix}.skip"))
        return out


class UNetDenoiser:
    """Noise predictor eps(z_t, t, e) with indexed, hookable attention layers."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig(),
                 vocab: Optional[Vocabulary] = None, seed: int = 0):
        config.validate()
        self.config = config
        self.vocab = vocab if vocab is not None else Vocabulary()
        rng = np.random.default_rng(seed)
        c0, c1, c2 = config.channels
        td, gr, hd, dt = config.time_dim, config.groups, config.heads, config.d_tau

        self.token_table = Tensor(rng.normal(0.0, 0.02, (len(self.vocab), dt)).astype(DTYPE))
        self.time_mlp1 = Linear(rng, td, td)
        self.time_mlp2 = Linear(rng, td, td)

        self.stem = Conv(rng, config.in_channels, c0)
        self.enc0 = ResBlock(rng, c0, c0, td, gr)
        self.down0 = Conv(rng, c0, c1, stride=2)
        self.enc1 = ResBlock(rng, c1, c1, td, gr)
        self.enc1_self = AttentionBlock(rng, c1, hd, gr, "self")
        self.enc1_cross = AttentionBlock(rng, c1, hd, gr, "cross", dt)
        self.down1 = Conv(rng, c1, c2, stride=2)
        self.enc2 = ResBlock(rng, c2, c2, td, gr)
        self.enc2_self = AttentionBlock(rng, c2, hd, gr, "self")
        self.enc2_cross = AttentionBlock(rng, c2, hd, gr, "cross", dt)
        self.mid1 = ResBlock(rng, c2, c2, td, gr)
        self.mid_self = AttentionBlock(rng, c2, hd, gr, "self")
        self.mid_cross = AttentionBlock(rng, c2, hd, gr, "cross", dt)
        self.mid2 = ResBlock(rng, c2, c2, td, gr)
        self.dec2 = ResBlock(rng, c2 + c2, c2, td, gr)
        self.dec2_self = AttentionBlock(rng, c2, hd, gr, "self")
        self.dec2_cross = AttentionBlock(rng, c2, hd, gr, "cross", dt)
        self.up1 = Conv(rng, c2, c1)
        self.dec1 = ResBlock(rng, c1 + c1, c1, td, gr)
        self.dec1_self = AttentionBlock(rng, c1, hd, gr, "self")
        self.dec1_cross = AttentionBlock(rng, c1, hd, gr, "cross", dt)
        self.up0 = Conv(rng, c1, c0)
        self.dec0 = ResBlock(rng, c0 + c0, c0, td, gr)
        self.out_norm = GroupNorm(c0, gr)
        self.out_conv = Conv(rng, c0, config.in_channels, zero=True)

        r1, r2 = config.attn_resolutions
        # global attention indices: encoder, middle, decoder, in forward order
        self._sites = (
            AttentionSite(0, "self", r1), AttentionSite(1, "cross", r1),
            AttentionSite(2, "self", r2), AttentionSite(3, "cross", r2),
            AttentionSite(4, "self", r2), AttentionSite(5, "cross", r2),
            AttentionSite(6, "self", r2), AttentionSite(7, "cross", r2),
            AttentionSite(8, "self", r1), AttentionSite(9, "cross", r1),
        )
        self._blocks = (
            self.enc1_self, self.enc1_cross, self.enc2_self, self.enc2_cross,
            self.mid_self, self.mid_cross, self.dec2_self, self.dec2_cross,
            self.dec1_self, self.dec1_cross,
        )

    # ---- attention layout ------------------------------------------------

    def attention_sites(self) -> tuple[AttentionSite, ...]:
        return self._sites

    def self_attention_layers(self) -> list[int]:
        return [s.layer for s in self._sites if s.kind == "self"]

    def decoder_self_attention_layers(self) -> list[int]:
        # decoder starts after the middle block (layer indices 6 and up)
        return [s.layer for s in self._sites if s.kind == "self" and s.layer >= 6]

    # ---- parameters -------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = {"token_table": self.token_table}
        out.update(self.time_mlp1.params("time_mlp1"))
        out.update(self.time_mlp2.params("time_mlp2"))
        named = [
            ("stem", self.stem), ("enc0", self.enc0), ("down0", self.down0),
            ("enc1", self.enc1), ("enc1_self", self.enc1_self),
            ("enc1_cross", self.enc1_cross), ("down1", self.down1),
            ("enc2", self.enc2), ("enc2_self", self.enc2_self),
            ("enc2_cross", self.enc2_cross), ("mid1", self.mid1),
            ("mid_self", self.mid_self), ("mid_cross", self.mid_cross),
            ("mid2", self.mid2), ("dec2", self.dec2),
            ("dec2_self", self.dec2_self), ("dec2_cross", self.dec2_cross),
            ("up1", self.up1), ("dec1", self.dec1),
            ("dec1_self", self.dec1_self), ("dec1_cross", self.dec1_cross),
            ("up0", self.up0), ("dec0", self.dec0),
            ("out_norm", self.out_norm), ("out_conv", self.out_conv),
        ]
        for prefix, module in named:
            out.update(module.params(prefix))
        return out

    def set_trainable(self, flag: bool):
        for p in self.params().values():
            p.requires_grad = flag

    # ---- prompt encoding ---------------------------------------------------

    def encode_prompt(self, ids) -> PromptEmbedding:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.vocab)):
            raise KeyError(f"token id outside vocabulary of size {len(self.vocab)}")
        if ids.size == 0:
            return PromptEmbedding(Tensor(np.zeros((0, self.config.d_tau), dtype=DTYPE)))
        return PromptEmbedding(nm.gather_rows(self.token_table, ids))

    def encode_template(self, cls: str, anomaly: Optional[str] = None) -> PromptEmbedding:
        return self.encode_prompt(self.vocab.template_ids(cls, anomaly))

    def null_embedding(self) -> PromptEmbedding:
        return self.encode_prompt(self.vocab.null_ids())

    # ---- forward ------------------------------------------------------------

    def forward(self, x: Tensor, t, e: Tensor, hooks=None) -> Tensor:
        """Batched noise prediction; t is scalar or per-sample, e is (B, m, d_tau)."""
        t_arr = np.atleast_1d(np.asarray(t))
        t_site = int(t_arr[0]) if t_arr.size == 1 else -1
        temb = Tensor(timestep_embedding(t_arr if t_arr.size > 1 else t_arr.repeat(x.shape[0]),
                                         self.config.time_dim))
        temb = self.time_mlp2(nm.silu(self.time_mlp1(temb)))

        def attend(index: int, h: Tensor, ctx: Optional[Tensor] = None) -> Tensor:
            site = self._sites[index]
            site = replace(site, t=t_site)
            return self._blocks[index](h, site, hooks, context=ctx)

        h = self.stem(x)
        s0 = self.enc0(h, temb)
        h = self.down0(s0)
        h = self.enc1(h, temb)
        h = attend(0, h)
        h = attend(1, h, e)
        s1 = h
        h = self.down1(s1)
        h = self.enc2(h, temb)
        h = attend(2, h)
        h = attend(3, h, e)
        s2 = h
        h = self.mid1(s2, temb)
        h = attend(4, h)
        h = attend(5, h, e)
        h = self.mid2(h, temb)
        h = self.dec2(nm.concat([h, s2], axis=3), temb)
        h = attend(6, h)
        h = attend(7, h, e)
        h = self.up1(nm.upsample_nearest2x(h))
        h = self.dec1(nm.concat([h, s1], axis=3), temb)
        h = attend(8, h)
        h = attend(9, h, e)
        h = self.up0(nm.upsample_nearest2x(h))
        h = self.dec0(nm.concat([h, s0], axis=3), temb)
        return self.out_conv(nm.silu(self.out_norm(h)))

    def predict_noise(self, z_t: Tensor, t: int, e, hooks=None) -> Tensor:
        """Single-image (or stacked-batch) prediction with optional attention hooks."""
        x = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        squeeze = x.ndim == 3
        if squeeze:
            x = nm.reshape(x, (1,) + tuple(x.shape))
        emb = e.e if isinstance(e, PromptEmbedding) else e
        if emb.ndim == 2:
            emb = nm.reshape(emb, (1,) + tuple(emb.shape))
        if emb.shape[0] != x.shape[0]:
            raise ValueError("embedding batch does not match latent batch")
        size = self.config.image_size
        if x.shape[1] != size or x.shape[2] != size or x.shape[3] != self.config.in_channels:
            raise ValueError(f"latent shape {tuple(x.shape)} does not match config")
        out = self.forward(x, int(t), emb, hooks=hooks)
        return nm.reshape(out, tuple(out.shape[1:])) if squeeze else out

    # ---- checkpointing -------------------------------------------------------

    def save(self, path):
        cfg = self.config
        header = {
            "kind": "denoiser-checkpoint",
            "image_size": cfg.image_size,
            "in_channels": cfg.in_channels,
            "channels": ",".join(str(c) for c in cfg.channels),
            "attn_resolutions": ",".join(str(r) for r in cfg.attn_resolutions),
            "heads": cfg.heads,
            "d_tau": cfg.d_tau,
            "time_dim": cfg.time_dim,
            "groups": cfg.groups,
            "vocab": self.vocab.header_string(),
            "vocab_classes": ",".join(self.vocab.class_tokens),
            "vocab_anomalies": ",".join(self.vocab.anomaly_tokens),
        }
        save_tensor_map(path, header, {k: v.data for k, v in self.params().items()})

    @classmethod
    def load(cls, path) -> "UNetDenoiser":
        header, tensors = load_tensor_map(path)
        if header.get("kind") != "denoiser-checkpoint":
            raise ValueError(f"{path}: not a denoiser checkpoint")
        config = DenoiserConfig(
            image_size=int(header["image_size"]),
            in_channels=int(header["in_channels"]),
            channels=tuple(int(c) for c in header["channels"].split(",")),
            attn_resolutions=tuple(int(r) for r in header["attn_resolutions"].split(",")),
            heads=int(header["heads"]),
            d_tau=int(header["d_tau"]),
            time_dim=int(header["time_dim"]),
            groups=int(header["groups"]),
        )
        tokens = header["vocab"].split(",")
        classes = tuple(header["vocab_classes"].split(","))
        anomalies = tuple(header["vocab_anomalies"].split(","))
        specials_fixed = 2 + len(Vocabulary.FIXED)
        extras = tuple(tokens[specials_fixed + len(classes) + len(anomalies):])
        vocab = Vocabulary(classes, anomalies, extras)
        if vocab.tokens != tuple(tokens):
            raise ValueError("vocabulary listing does not match the expected layout")
        model = cls(config, vocab, seed=0)
        params = model.params()
        if set(params) != set(tensors):
            missing = set(params) ^ set(tensors)
            raise ValueError(f"checkpoint parameter mismatch: {sorted(missing)[:5]}")
        for name, tensor in params.items():
            if tensor.data.shape != tensors[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data = tensors[name].astype(DTYPE)
        return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class DenoiserTrainingSet:
    """Images in [-1, 1] paired with prompt token ids, plus optional augmentation.

    ``prompt_variants`` optionally lists alternative token-id rows per image
    (e.g., normal images phrased with different appearance markers); the
    trainer draws one variant per use.
    """

    def __init__(self, images: np.ndarray, prompt_ids: np.ndarray, augment=None,
                 prompt_variants: Optional[list] = None):
        if len(images) != len(prompt_ids):
            raise ValueError("images and prompts must align")
        if prompt_variants is not None and len(prompt_variants) != len(images):
            raise ValueError("prompt variants must align with images")
        self.images = np.asarray(images, dtype=DTYPE)
        self.prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
        self.prompt_variants = prompt_variants
        self.augment = augment

    def draw_prompt(self, rng, idx: int) -> np.ndarray:
        if self.prompt_variants is None:
            return self.prompt_ids[idx]
        variants = self.prompt_variants[idx]
        if len(variants) == 1:
            return variants[0]
        return variants[rng.integers(0, len(variants))]

    def __len__(self):
        return len(self.images)


def train_denoiser(data: DenoiserTrainingSet, config: DenoiserConfig, steps: int,
                   seed: int, *, vocab: Optional[Vocabulary] = None,
                   sched: Optional[NoiseSchedule] = None, batch_size: int = 16,
                   lr: float = 1e-3, null_fraction: float = 0.1,
                   log_every: int = 200, progress=None):
    """Noise-prediction training: sample t and eps, minimize the squared error.

    A tenth of the batches are conditioned on the learned null prompt so that
    guided sampling has an unconditional direction to extrapolate from.
    Deterministic for a fixed seed. Returns (model, loss trace).
    """
    if sched is None:
        sched = NoiseSchedule()
    model = UNetDenoiser(config, vocab, seed=seed)
    model.set_trainable(True)
    params = model.params()
    state = nm.AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    null_ids = np.asarray(model.vocab.null_ids(), dtype=np.int64)
    trace: list[float] = []
    running = None
    initial = None
    bad_streak = 0
    for step in range(steps):
        idx = rng.integers(0, len(data), size=batch_size)
        if data.augment is not None:
            imgs = np.stack([data.augment(rng, int(i)) for i in idx])
        else:
            imgs = data.images[idx]
        ids = np.stack([data.draw_prompt(rng, int(i)) for i in idx])
        if rng.random() < null_fraction:
            ids = np.broadcast_to(null_ids, ids.shape)
        t = rng.integers(1, sched.train_steps + 1, size=batch_size)
        eps = rng.standard_normal(imgs.shape).astype(DTYPE)
        x_t = sched.add_noise(imgs, t, eps)
        e = nm.reshape(nm.gather_rows(model.token_table, ids.reshape(-1)),
                       (batch_size, TEMPLATE_LEN, config.d_tau))
        with nm.Tape() as tape:
            pred = model.forward(Tensor(x_t), t, e)
            loss = nm.mse(Tensor(eps), pred)
        grads = nm.backward(tape, loss)
        named_grads = {name: grads[p] for name, p in params.items() if p in grads}
        for name, p in params.items():
            if name not in named_grads:
                named_grads[name] = Tensor(np.zeros_like(p.data))
        nm.adam_step(params, named_grads, state)
        value = loss.item()
        if initial is None:
            initial = value
        running = value if running is None else 0.99 * running + 0.01 * value
        bad_streak = bad_streak + 1 if value > 10.0 * initial else 0
        if bad_streak >= 500:
            raise FloatingPointError(f"training diverged at step {step}: "
                                     f"loss {value:.4f} vs initial {initial:.4f}")
        if step % log_every == 0:
            trace.append(running)
            if progress is not None:
                progress(step, running)
    model.set_trainable(False)
    return model, {"trace": trace, "final_running_loss": running}
