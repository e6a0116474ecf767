"""Class-token transformer bag encoder with exact or Nystrom self-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

ATTENTION_MODES = ("nystrom", "exact")


@dataclass
class EncoderConfig:
    input_dim: int = 1024
    dim: int = 512
    depth: int = 2
    heads: int = 8
    landmarks: int = 64
    attn_dropout: float = 0.2
    attention: str = "nystrom"
    n_classes: int = 2
    pinv_iterations: int = 16

    def validate(self):
        if self.input_dim < 1 or self.dim < 1:
            raise ValueError("input_dim and dim must be positive")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.landmarks < 1:
            raise ValueError("landmarks must be >= 1")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError("attn_dropout must lie in [0, 1)")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.pinv_iterations < 1:
            raise ValueError("pinv_iterations must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    z_cls: torch.Tensor
    instances: torch.Tensor
    alpha: torch.Tensor


@dataclass
class ModelOutput:
    p: torch.Tensor
    b: torch.Tensor
    alpha: torch.Tensor
    logits: torch.Tensor


# --- attention primitives ---------------------------------------------------


def exact_attention(q, k, v, scale):
    """Softmax attention. Returns ``(outputs, attention)``; rows of attention sum to 1."""
    attn = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
    return attn @ v, attn


def segment_landmarks(x, landmarks):
    """Means over contiguous segments of the sequence axis (dim -2).

    The sequence is zero-padded to a multiple of the segment length; a padded
    tail only counts its real rows. With ``landmarks >= len`` every token is its
    own landmark.
    """
    s = x.shape[-2]
    seg = math.ceil(s / min(landmarks, s))
    n_land = math.ceil(s / seg)
    pad = n_land * seg - s
    if pad:
        x = F.pad(x, (0, 0, 0, pad))
    sums = x.reshape(*x.shape[:-2], n_land, seg, x.shape[-1]).sum(dim=-2)
    counts = torch.full((n_land, 1), float(seg), dtype=x.dtype)
    counts[-1] = seg - pad
    return sums / counts


def newton_schulz_pinv(a, iterations):
    """Iterative pseudo-inverse of a batch of softmax matrices."""
    eye = torch.eye(a.shape[-1], dtype=a.dtype)
    row = a.abs().sum(dim=-1).amax(dim=-1)
    col = a.abs().sum(dim=-2).amax(dim=-1)
    z = a.transpose(-1, -2) / (row * col)[..., None, None]
    for _ in range(iterations):
        az = a @ z
        z = 0.25 * z @ (13 * eye - az @ (15 * eye - az @ (7 * eye - az)))
    return z


def nystrom_attention(q, k, v, landmarks, scale, iterations=16, dropout=None):
    """Nystrom-approximated softmax attention.

    Returns ``(outputs, factors)`` where ``factors = (kernel_1, kernel_2_pinv,
    kernel_3)`` and ``kernel_1 @ kernel_2_pinv @ kernel_3`` approximates the
    full attention matrix. ``dropout`` (a callable) is applied to ``kernel_1``.
    """
    q_l = segment_landmarks(q, landmarks)
    k_l = segment_landmarks(k, landmarks)
    k1 = torch.softmax(q @ k_l.transpose(-1, -2) * scale, dim=-1)
    k2 = torch.softmax(q_l @ k_l.transpose(-1, -2) * scale, dim=-1)
    k3 = torch.softmax(q_l @ k.transpose(-1, -2) * scale, dim=-1)
    k2_inv = newton_schulz_pinv(k2, iterations)
    k1_used = dropout(k1) if dropout is not None else k1
    out = k1_used @ (k2_inv @ (k3 @ v))
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite Nystrom attention output; check the logit scale")
    return out, (k1, k2_inv, k3)


def class_token_row(factors, mode):
    """Class-token row of the (possibly factorized) attention matrix, per head."""
    if mode == "exact":
        return factors[..., 0, :]
    k1, k2_inv, k3 = factors
    return (k1[..., :1, :] @ k2_inv @ k3)[..., 0, :]


def extract_attention(factors, mode):
    """Head-averaged class-token attention over instances, renormalized to sum 1."""
    row = class_token_row(factors, mode)
    if row.dim() > 1:
        row = row.mean(dim=0)
    alpha = row[1:].clamp(min=0)
    total = alpha.sum()
    if total <= 0:
        return torch.full_like(alpha, 1.0 / alpha.numel())
    return alpha / total


def pool_bag_embedding(z):
    return z.mean(dim=0)


def classify(z_cls, weight, bias):
    return torch.softmax(z_cls @ weight.T + bias, dim=-1)


# --- model ----------------------------------------------------------------


def _dropout_fn(p, generator):
    if generator is None or p == 0:
        return None

    def apply(x):
        keep = torch.rand(x.shape, generator=generator) >= p
        return x * keep.to(x.dtype) / (1 - p)

    return apply


class Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, dim)
        self.ff2 = nn.Linear(dim, dim)

    def attend(self, x, config, generator=None):
        s, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(s, 3, h, d // h).permute(1, 2, 0, 3)
        scale = (d // h) ** -0.5
        drop = _dropout_fn(config.attn_dropout, generator)
        if config.attention == "exact":
            out, attn = exact_attention(q, k, v, scale)
            if drop is not None:
                out = drop(attn) @ v
            factors = attn
        else:
            out, factors = nystrom_attention(q, k, v, config.landmarks, scale, config.pinv_iterations, drop)
        return self.out(out.transpose(0, 1).reshape(s, d)), factors

    def forward(self, x, config, generator=None):
        a, factors = self.attend(x, config, generator)
        x = x + a
        x = x + self.ff2(F.gelu(self.ff1(self.norm2(x))))
        return x, factors


class TransMIL(nn.Module):
    """Input projection, class token, attention blocks, final norm and linear head.

    Parameter declaration order (used by checkpoints): ``proj``, ``cls_token``,
    ``blocks``, ``norm``, ``head``.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.proj = nn.Linear(config.input_dim, config.dim)
        self.cls_token = nn.Parameter(torch.zeros(config.dim))
        self.blocks = nn.ModuleList(Block(config.dim, config.heads) for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, config.n_classes)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed):
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) / math.sqrt(m.in_features))
                m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
        self.cls_token.copy_(0.02 * torch.randn(self.cls_token.shape, generator=g))
        # fan-in scaling here would give unit-variance logits; keep initial predictions near uniform
        self.head.weight.copy_(0.02 * torch.randn(self.head.weight.shape, generator=g))

    @property
    def dtype(self):
        return self.cls_token.dtype

    def encode(self, x, generator=None) -> EncoderOutput:
        x = torch.as_tensor(x, dtype=self.dtype)
        if x.dim() != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected (N, {self.config.input_dim}) features, got {tuple(x.shape)}")
        h = torch.cat([self.cls_token[None], self.proj(x)], dim=0)
        factors = None
        for block in self.blocks:
            h, factors = block(h, self.config, generator)
        h = self.norm(h)
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite encoder activations")
        with torch.no_grad():
            alpha = extract_attention(factors, self.config.attention)
        return EncoderOutput(h[0], h[1:], alpha)

    def forward(self, x, generator=None) -> ModelOutput:
        enc = self.encode(x, generator)
        logits = self.head(enc.z_cls)
        return ModelOutput(torch.softmax(logits, dim=-1), pool_bag_embedding(enc.instances), enc.alpha, logits)
