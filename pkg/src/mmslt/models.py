"""Sub-networks of the translation model.

Naming follows the pipeline roles: ``vis`` (frame encoder), ``de``
(frozen description encoder, run offline), ``dm`` (description mapper),
``ma`` (modality adapter), ``enc`` (multimodal encoder, frozen base + LoRA),
``te`` (frozen text encoder) and ``dec`` (autoregressive decoder, LoRA).
"""

from __future__ import annotations

import copy
import hashlib
import math
import re
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ROLES = ("V", "D", "D_hat", "SE", "M", "L_text")


@dataclass
class ModelProfile:
    name: str = "toy"
    visual_dim: int = 64        # C
    desc_dim: int = 32          # C-bar
    model_dim: int = 64         # C'
    enc_layers: int = 2
    dec_layers: int = 2
    text_layers: int = 2
    desc_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    desc_heads: int = 4
    desc_ffn_dim: int = 64
    dm_hidden: Optional[int] = None     # defaults to desc_dim
    ma_hidden: Optional[int] = None     # defaults to model_dim
    conv_kernel: int = 5
    conv_stride: int = 1
    pool_kernel: int = 2
    image_size: int = 32
    crop_size: int = 32
    in_channels: int = 1
    visual_backbone: str = "toy_cnn"    # or "resnet18"
    pretrained_visual: bool = False
    desc_encoder: str = "toy"           # or a Hugging Face BERT name
    desc_buckets: int = 2048
    desc_max_tokens: int = 64
    max_positions: int = 512
    lora_rank: int = 16
    lora_alpha: float = 32.0
    dropout: float = 0.0

    def __post_init__(self):
        for k in ("visual_dim", "desc_dim", "model_dim", "enc_layers", "dec_layers", "text_layers",
                  "desc_layers", "heads", "ffn_dim", "image_size", "crop_size", "in_channels"):
            if getattr(self, k) <= 0:
                raise ValueError(f"profile.{k} must be positive")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.crop_size > self.image_size:
            raise ValueError("crop_size must not exceed image_size")
        self.dm_hidden = self.dm_hidden or self.desc_dim
        self.ma_hidden = self.ma_hidden or self.model_dim

    @classmethod
    def toy(cls, **kw) -> "ModelProfile":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "ModelProfile":
        base = dict(name="full", visual_dim=512, desc_dim=768, model_dim=1024, enc_layers=12,
                    dec_layers=12, text_layers=12, desc_layers=12, heads=16, ffn_dim=4096,
                    desc_heads=12, desc_ffn_dim=3072, image_size=256, crop_size=224, in_channels=3,
                    visual_backbone="resnet18", pretrained_visual=True,
                    desc_encoder="bert-base-uncased", max_positions=1024, dropout=0.1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelProfile":
        d = dict(d)
        name = d.get("name", "toy")
        return cls.full(**d) if name == "full" else cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureSeq:
    values: torch.Tensor     # B x L x d
    mask: torch.Tensor       # B x L bool
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown feature role {self.role!r}")
        if self.values.shape[:2] != self.mask.shape:
            raise ValueError(f"values {tuple(self.values.shape)} and mask {tuple(self.mask.shape)} disagree")

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def expect(self, role: str) -> "FeatureSeq":
        if self.role != role:
            raise ValueError(f"expected a {role} feature sequence, got {self.role}")
        return self


def _zero_pad(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x * mask.unsqueeze(-1).to(x.dtype)


# ---------------------------------------------------------------------------
# LoRA

class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank update (alpha / r) * B A."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, target: str = ""):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        self.target = target
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def A(self) -> torch.Tensor:
        return self.lora_A

    @property
    def B(self) -> torch.Tensor:
        return self.lora_B

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lora_forward(self.base.weight, self, x, self.base.bias)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * self.lora_B @ self.lora_A


def lora_forward(base_weight: torch.Tensor, adapter, x: torch.Tensor,
                 bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """y = W x + (alpha/r) B (A x), applied to the last axis of ``x``."""
    A, B = adapter.A, adapter.B
    if A.shape[1] != x.shape[-1] or base_weight.shape[1] != x.shape[-1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {tuple(base_weight.shape)}")
    if B.shape[0] != base_weight.shape[0] or B.shape[1] != A.shape[0]:
        raise ValueError("LoRA factor shapes do not conform to the base weight")
    return F.linear(x, base_weight, bias) + adapter.scaling * F.linear(F.linear(x, A), B)


# ---------------------------------------------------------------------------
# transformer blocks

class Attention(nn.Module):
    def __init__(self, d: int, heads: int, lora_rank: int = 0, lora_alpha: float = 1.0,
                 dropout: float = 0.0, name: str = "attn"):
        super().__init__()
        self.heads = heads
        self.dropout = dropout

        def proj(tag, lora):
            lin = nn.Linear(d, d)
            return LoRALinear(lin, lora_rank, lora_alpha, f"{name}.{tag}") if lora else lin

        # LoRA on query and value projections only
        self.q = proj("q", lora_rank > 0)
        self.k = proj("k", False)
        self.v = proj("v", lora_rank > 0)
        self.o = proj("o", False)

    def forward(self, x, kv=None, key_mask=None, causal=False):
        kv = x if kv is None else kv
        B, Lq, d = x.shape
        Lk = kv.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(kv).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v(kv).view(B, Lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = F.dropout(scores.softmax(-1), self.dropout, self.training)
        out = (attn @ v).transpose(1, 2).reshape(B, Lq, d)
        return self.o(out)


class FeedForward(nn.Sequential):
    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__(nn.Linear(d, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout=0.0, lora_rank=0, lora_alpha=1.0, name="layer"):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads, lora_rank, lora_alpha, dropout, f"{name}.attn")
        self.ln2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.ln1(x), key_mask=mask))
        return x + self.drop(self.ffn(self.ln2(x)))


class TransformerEncoder(nn.Module):
    """Pre-LN encoder stack with a final layer norm."""

    def __init__(self, d, layers, heads, ffn, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d, heads, ffn, dropout, name=f"layers.{i}")
                                    for i in range(layers))
        self.ln = nn.LayerNorm(d)

    def forward(self, x, mask):
        for layer in self.layers:
            x = layer(x, mask)
        return _zero_pad(self.ln(x), mask)


@torch.no_grad()
def sinusoid_(weight: torch.Tensor) -> torch.Tensor:
    """Fill an (n, d) position table with a sine/cosine pattern.

    Tables stay trainable; the pattern only sets a strong initial position
    signal, which the small toy models need to learn monotone alignments.
    The fastest component has period 2, so the parity of a position is a
    linear feature (useful after stride-2 pooling).
    """
    n, d = weight.shape
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = math.pi * torch.pow(10000.0, -torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return weight.copy_(table.to(weight.dtype))


def add_lora(module: nn.Module, rank: int, alpha: float, prefix: str = "") -> nn.Module:
    """Replace query/value projections of every Attention in ``module`` with LoRA layers."""
    for name, sub in module.named_modules():
        if isinstance(sub, Attention):
            for tag in ("q", "v"):
                lin = getattr(sub, tag)
                if isinstance(lin, nn.Linear):
                    setattr(sub, tag, LoRALinear(lin, rank, alpha, f"{prefix}{name}.{tag}"))
    return module


# ---------------------------------------------------------------------------
# encoders

class ToyFrameCNN(nn.Module):
    """Three strided convs; the spatial map is flattened, not averaged, since
    glyph identity lives in the layout."""

    def __init__(self, in_channels: int, out_dim: int, crop_size: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, 2, 1), nn.BatchNorm2d(32), nn.GELU(),
            nn.Conv2d(32, 64, 3, 2, 1), nn.BatchNorm2d(64), nn.GELU(),
            nn.Conv2d(64, 64, 3, 2, 1), nn.BatchNorm2d(64), nn.GELU(),
            nn.Flatten(),
        )
        side = crop_size
        for _ in range(3):
            side = (side + 1) // 2
        self.proj = nn.Linear(64 * side * side, out_dim)

    def forward(self, x):
        return self.proj(self.body(x))


def _resnet18(pretrained: bool) -> nn.Module:
    import torchvision

    weights = torchvision.models.ResNet18_Weights.IMAGENET1K_V1 if pretrained else None
    net = torchvision.models.resnet18(weights=weights)
    net.fc = nn.Identity()
    return net


class VisualEncoder(nn.Module):
    """Frame-wise image encoder; no temporal mixing."""

    def __init__(self, profile: ModelProfile):
        super().__init__()
        if profile.visual_backbone == "toy_cnn":
            self.net = ToyFrameCNN(profile.in_channels, profile.visual_dim, profile.crop_size)
        elif profile.visual_backbone == "resnet18":
            if profile.visual_dim != 512:
                raise ValueError("resnet18 backbone produces 512-d features")
            self.net = _resnet18(profile.pretrained_visual)
        else:
            raise ValueError(f"unknown visual backbone {profile.visual_backbone!r}")
        self.out_dim = profile.visual_dim

    def forward(self, frames: torch.Tensor, mask: torch.Tensor) -> FeatureSeq:
        if frames.ndim != 5:
            raise ValueError("frames must be B x T x C x H x W")
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every video needs at least one frame")
        B, T = mask.shape
        feats = self.net(frames[mask])
        out = feats.new_zeros(B, T, feats.shape[-1])
        out[mask] = feats
        return FeatureSeq(out, mask, "V")


_WORD = re.compile(r"\w+")


class ToyDescriptionEncoder(nn.Module):
    """Frozen, seeded tiny transformer producing a [CLS] sentence embedding.

    Words are hashed into buckets, so no vocabulary is needed.
    """

    def __init__(self, profile: ModelProfile, seed: int = 0):
        super().__init__()
        self.buckets = profile.desc_buckets
        self.max_tokens = profile.desc_max_tokens
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.embed = nn.Embedding(self.buckets + 1, profile.desc_dim)   # last id is [CLS]
            self.pos = nn.Embedding(self.max_tokens + 1, profile.desc_dim)
            # small [CLS] and position vectors, so the pooled state is driven by the words
            nn.init.normal_(self.pos.weight, std=0.02)
            with torch.no_grad():
                self.embed.weight[-1].mul_(0.1)
            self.body = TransformerEncoder(profile.desc_dim, profile.desc_layers, profile.desc_heads,
                                           profile.desc_ffn_dim)
        self.requires_grad_(False)
        self.eval()

    def word_ids(self, text: str) -> list[int]:
        words = _WORD.findall(text.lower())[: self.max_tokens]
        return [zlib.crc32(w.encode()) % self.buckets for w in words]

    @torch.no_grad()
    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        ids = [[self.buckets] + self.word_ids(t) for t in texts]
        L = max(len(s) for s in ids)
        tok = torch.zeros(len(ids), L, dtype=torch.long)
        mask = torch.zeros(len(ids), L, dtype=torch.bool)
        for i, s in enumerate(ids):
            tok[i, : len(s)] = torch.tensor(s)
            mask[i, : len(s)] = True
        x = self.embed(tok) + self.pos(torch.arange(L))[None]
        return self.body(x, mask)[:, 0]


class BertDescriptionEncoder(nn.Module):
    """Pretrained BERT from Hugging Face; [CLS] of the last layer."""

    def __init__(self, name: str = "bert-base-uncased"):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(name)
        self.model = AutoModel.from_pretrained(name)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        enc = self.tokenizer(list(texts), padding=True, truncation=True, max_length=512,
                             return_tensors="pt")
        return self.model(**enc).last_hidden_state[:, 0]


def build_description_encoder(profile: ModelProfile, seed: int = 0) -> nn.Module:
    if profile.desc_encoder == "toy":
        return ToyDescriptionEncoder(profile, seed)
    return BertDescriptionEncoder(profile.desc_encoder)


def describe_encode(encoder: nn.Module, texts: Sequence[str]) -> np.ndarray:
    """One sentence embedding per frame description, T x C-bar."""
    if not texts:
        raise ValueError("no descriptions to encode")
    if any(t is None or not str(t).strip() for t in texts):
        raise ValueError("missing frame description")
    return encoder(list(texts)).float().numpy()


class DescriptionMapper(nn.Module):
    """Two-layer MLP predicting description embeddings from visual features."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, V: FeatureSeq) -> FeatureSeq:
        V.expect("V")
        y = self.fc2(F.gelu(self.fc1(V.values)))
        return FeatureSeq(_zero_pad(y, V.mask), V.mask, "D_hat")


def masked_max_pool(x: torch.Tensor, mask: torch.Tensor, kernel: int = 2):
    """Temporal max-pool with stride = kernel over real positions only.

    A ragged tail is padded, so T' = ceil(T / kernel) and never 0. A pooled
    position is real iff any of its source positions is real.
    """
    B, T, C = x.shape
    pad = (-T) % kernel
    if pad:
        x = torch.cat([x, x.new_zeros(B, pad, C)], 1)
        mask = torch.cat([mask, mask.new_zeros(B, pad)], 1)
    x = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    Tp = x.shape[1] // kernel
    pooled = x.view(B, Tp, kernel, C).amax(2)
    pmask = mask.view(B, Tp, kernel).any(2)
    pooled = torch.where(pmask.unsqueeze(-1), pooled, torch.zeros_like(pooled))
    return pooled, pmask


class ModalityAdapter(nn.Module):
    """Temporal conv -> max-pool -> two-layer MLP on concatenated features."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int, kernel: int = 5, stride: int = 1,
                 pool: int = 2):
        super().__init__()
        if stride != 1:
            raise ValueError("only stride-1 convolution keeps the frame mask aligned")
        self.in_dim = in_dim
        self.conv = nn.Conv1d(in_dim, hidden, kernel, stride, padding=kernel // 2)
        self.pool = pool
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, V: FeatureSeq, D: Optional[FeatureSeq] = None) -> FeatureSeq:
        V.expect("V")
        if D is not None:
            if D.role not in ("D", "D_hat"):
                raise ValueError(f"expected a description feature sequence, got {D.role}")
            if D.values.shape[:2] != V.values.shape[:2] or not torch.equal(D.mask, V.mask):
                raise ValueError("visual and description features differ in length or mask")
            x = torch.cat([V.values, D.values], -1)
        else:
            x = V.values
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"adapter expects width {self.in_dim}, got {x.shape[-1]}")
        x = _zero_pad(x, V.mask)
        h = self.conv(x.transpose(1, 2)).transpose(1, 2)
        h, mask = masked_max_pool(h, V.mask, self.pool)
        y = self.fc2(F.gelu(self.fc1(h)))
        return FeatureSeq(_zero_pad(y, mask), mask, "SE")


class MultimodalEncoder(nn.Module):
    """Transformer encoder over sign-element features: frozen base + LoRA."""

    def __init__(self, base: TransformerEncoder, profile: ModelProfile):
        super().__init__()
        self.pos = nn.Embedding(profile.max_positions, profile.model_dim)
        sinusoid_(self.pos.weight)
        self.body = add_lora(base, profile.lora_rank, profile.lora_alpha, "enc.body.")

    def forward(self, SE: FeatureSeq) -> FeatureSeq:
        SE.expect("SE")
        L = SE.values.shape[1]
        x = _zero_pad(SE.values + self.pos(torch.arange(L, device=SE.values.device))[None], SE.mask)
        return FeatureSeq(self.body(x, SE.mask), SE.mask, "M")


class TextEncoder(nn.Module):
    """Frozen sentence encoder over target-vocabulary token ids."""

    def __init__(self, vocab_size: int, profile: ModelProfile):
        super().__init__()
        d = profile.model_dim
        self.embed = nn.Embedding(vocab_size, d, padding_idx=0)
        nn.init.normal_(self.embed.weight, std=d ** -0.5)
        with torch.no_grad():
            self.embed.weight[0].zero_()
        # content-dominant input: pooled sentence embeddings must differ by their words
        self.scale = math.sqrt(d)
        self.pos = nn.Embedding(profile.max_positions, d)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.body = TransformerEncoder(d, profile.text_layers, profile.heads, profile.ffn_dim,
                                       profile.dropout)
        self.requires_grad_(False)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> FeatureSeq:
        if tokens.shape[1] == 0 or not bool(mask.any(dim=1).all()):
            raise ValueError("empty token sequence")
        L = tokens.shape[1]
        x = self.embed(tokens) * self.scale + self.pos(torch.arange(L, device=tokens.device))[None]
        return FeatureSeq(self.body(x, mask), mask, "L_text")


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout=0.0, name="layer"):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads, dropout=dropout, name=f"{name}.self_attn")
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, heads, dropout=dropout, name=f"{name}.cross_attn")
        self.ln3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask, memory, memory_mask):
        x = x + self.drop(self.self_attn(self.ln1(x), key_mask=mask, causal=True))
        x = x + self.drop(self.cross_attn(self.ln2(x), kv=memory, key_mask=memory_mask))
        return x + self.drop(self.ffn(self.ln3(x)))


class Decoder(nn.Module):
    """Autoregressive transformer decoder with tied output projection and LoRA."""

    def __init__(self, vocab_size: int, profile: ModelProfile, embed: Optional[nn.Embedding] = None):
        super().__init__()
        d = profile.model_dim
        self.embed = copy.deepcopy(embed) if embed is not None else nn.Embedding(vocab_size, d)
        self.pos = nn.Embedding(profile.max_positions, d)
        sinusoid_(self.pos.weight)
        self.layers = nn.ModuleList(DecoderLayer(d, profile.heads, profile.ffn_dim, profile.dropout,
                                                 f"layers.{i}") for i in range(profile.dec_layers))
        self.ln = nn.LayerNorm(d)
        add_lora(self, profile.lora_rank, profile.lora_alpha, "dec.")

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor, memory: FeatureSeq) -> torch.Tensor:
        """Logits B x L x |vocab| for every prefix position."""
        L = tokens.shape[1]
        x = self.embed(tokens) + self.pos(torch.arange(L, device=tokens.device))[None]
        for layer in self.layers:
            x = layer(x, mask, memory.values, memory.mask)
        return F.linear(self.ln(x), self.embed.weight)

    def log_probs(self, memory: FeatureSeq, prefixes: torch.Tensor) -> torch.Tensor:
        """Next-token log-probabilities n x |vocab| for n equal-length prefixes.

        ``memory`` has batch 1 and is broadcast over the prefixes.
        """
        n = prefixes.shape[0]
        mem = FeatureSeq(memory.values.expand(n, -1, -1), memory.mask.expand(n, -1), memory.role)
        mask = torch.ones_like(prefixes, dtype=torch.bool)
        return self.forward(prefixes, mask, mem)[:, -1].log_softmax(-1)


# ---------------------------------------------------------------------------
# assembled model

DESC_MODES = ("none", "direct", "mapped")


class MMSLT(nn.Module):
    """All trainable sub-networks plus the frozen text encoder.

    ``desc_mode`` selects what is fused with the visual features:
    ``mapped`` (predicted description embeddings), ``direct`` (embeddings of
    real descriptions, needed at inference too) or ``none`` (frames only).
    """

    def __init__(self, profile: ModelProfile, vocab_size: int, desc_mode: str = "mapped",
                 seed: int = 0):
        super().__init__()
        if desc_mode not in DESC_MODES:
            raise ValueError(f"desc_mode must be one of {DESC_MODES}")
        self.profile = profile
        self.desc_mode = desc_mode
        self.vocab_size = vocab_size
        p = profile
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.te = TextEncoder(vocab_size, p)
            # multimodal encoder and decoder start from the text encoder's "pretrained" weights
            enc_base = copy.deepcopy(self.te.body)
            enc_base.requires_grad_(True)
            self.vis = VisualEncoder(p)
            self.dm = DescriptionMapper(p.visual_dim, p.dm_hidden, p.desc_dim) if desc_mode == "mapped" else None
            in_dim = p.visual_dim + (p.desc_dim if desc_mode != "none" else 0)
            self.ma = ModalityAdapter(in_dim, p.model_dim, p.ma_hidden, p.conv_kernel, p.conv_stride,
                                      p.pool_kernel)
            self.enc = MultimodalEncoder(enc_base, p)
            self.dec = Decoder(vocab_size, p, embed=self.te.embed)
        self.te.requires_grad_(False)

    def visual_encode(self, frames, frame_mask) -> FeatureSeq:
        return self.vis(frames, frame_mask)

    def map_descriptions(self, V: FeatureSeq) -> FeatureSeq:
        if self.dm is None:
            raise RuntimeError("model has no description mapper (desc_mode != 'mapped')")
        return self.dm(V)

    def adapt_modalities(self, V: FeatureSeq, D: Optional[FeatureSeq]) -> FeatureSeq:
        return self.ma(V, D)

    def encode_multimodal(self, SE: FeatureSeq) -> FeatureSeq:
        return self.enc(SE)

    def text_encode(self, tokens, token_mask) -> FeatureSeq:
        return self.te(tokens, token_mask)

    def encode_video(self, frames, frame_mask, descriptions: Optional[torch.Tensor] = None,
                     dm_grad_to_visual: bool = True):
        """Frames -> multimodal features. Returns (M, V, D_hat or None)."""
        V = self.visual_encode(frames, frame_mask)
        D_hat = None
        if self.desc_mode == "mapped":
            src = V if dm_grad_to_visual else FeatureSeq(V.values.detach(), V.mask, "V")
            D_hat = self.map_descriptions(src)
            D_in = D_hat
        elif self.desc_mode == "direct":
            if descriptions is None:
                raise ValueError("desc_mode 'direct' requires description features for every frame")
            D_in = FeatureSeq(_zero_pad(descriptions.to(V.values.dtype), frame_mask), frame_mask, "D")
        else:
            D_in = None
        SE = self.adapt_modalities(V, D_in)
        return self.encode_multimodal(SE), V, D_hat

    # -- parameter groups -------------------------------------------------

    def subnetworks(self) -> dict[str, nn.Module]:
        nets = {"vis": self.vis, "ma": self.ma, "enc": self.enc, "te": self.te, "dec": self.dec}
        if self.dm is not None:
            nets["dm"] = self.dm
        return nets

    def configure_trainable(self, stage: str, enc_layernorm: bool = True,
                            dec_layernorm: bool = True, dec_base: bool = False) -> None:
        """Set requires_grad per stage.

        mmlp: vis, dm, ma, encoder LoRA (+ layer norms) and positions.
        slt: as mmlp but dm frozen, plus decoder LoRA (+ layer norms).
        Frozen bases (text encoder, encoder base weights) never train.
        """
        if stage not in ("mmlp", "slt"):
            raise ValueError(f"unknown stage {stage!r}")
        self.requires_grad_(False)
        self.vis.requires_grad_(True)
        self.ma.requires_grad_(True)
        self.enc.pos.requires_grad_(True)
        _enable_lora(self.enc, enc_layernorm)
        if stage == "mmlp" and self.dm is not None:
            self.dm.requires_grad_(True)
        if stage == "slt":
            if dec_base:
                self.dec.requires_grad_(True)
            else:
                _enable_lora(self.dec, dec_layernorm)

    def frozen_base_parameters(self) -> dict[str, torch.Tensor]:
        """Encoder base weights (everything in enc.body except LoRA factors and layer norms)."""
        out = {}
        for name, p in self.enc.body.named_parameters():
            if "lora_" in name or _is_layernorm_param(self.enc.body, name):
                continue
            out[name] = p
        return out


def _is_layernorm_param(root: nn.Module, pname: str) -> bool:
    mod_name = pname.rsplit(".", 1)[0]
    return isinstance(root.get_submodule(mod_name), nn.LayerNorm)


def _enable_lora(module: nn.Module, layernorm: bool) -> None:
    for name, p in module.named_parameters():
        if "lora_" in name:
            p.requires_grad_(True)
    if layernorm:
        for m in module.modules():
            if isinstance(m, nn.LayerNorm):
                m.requires_grad_(True)


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def checksum(tensors) -> str:
    """sha256 over named tensors (module, dict or iterable of pairs)."""
    if isinstance(tensors, nn.Module):
        items = list(tensors.state_dict().items())
    elif isinstance(tensors, dict):
        items = list(tensors.items())
    else:
        items = list(tensors)
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
