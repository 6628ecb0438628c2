"""Factorized transformer decoder over composite text queries.

Each query instance is a row of T positional sub-queries tied to sampled
curve points, plus a content embedding per position. A decoder layer runs:

  1. intra-relation self-attention across the T positions of one instance,
  2. inter-relation self-attention across instances on mean-pooled rows,
     under the group-isolation mask,
  3. cross-attention from every position to the projected feature map,
  4. a position-wise feed-forward block,

all with residual connections and LayerNorm. Heads read the final states:
a sigmoid instance score from the pooled row, per-position character
logits, and zero-initialized offset heads that refine the reference points
into center and boundary predictions (so predictions start exactly at the
positional prior).

Denoising queries get their points and characters from a DnQueryBatch; the
matching queries own learnable anchor control points and a shared learnable
content table. Rows are laid out [denoising | matching], matching the
isolation mask.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attn_mask import AttentionMask, build_mask
from .dn_queries import DnQueryBatch
from .losses import PredictionSet

__all__ = [
    "DecoderConfig",
    "MultiheadAttention",
    "SpotDecoder",
    "sinusoidal_embed",
    "flatten_dn_batch",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
SCORE_EPS = 1e-6


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    T: int = 25
    alphabet_size: int = 37
    num_matching: int = 100  # K: matching-part query instances
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0:
            raise ValueError("dim must be divisible by 4 for the 2-axis embedding")
        if min(self.layers, self.T, self.alphabet_size, self.num_matching) < 1:
            raise ValueError("layers, T, alphabet_size, num_matching must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def sinusoidal_embed(points: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed 2-axis sine/cosine embedding of (..., 2) points into (..., dim)."""
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")
    quarter = dim // 4
    freqs = 10000.0 ** (torch.arange(quarter, dtype=points.dtype) / quarter)
    x = 2.0 * math.pi * points[..., 0:1] / freqs
    y = 2.0 * math.pi * points[..., 1:2] / freqs
    return torch.cat([x.sin(), x.cos(), y.sin(), y.cos()], dim=-1)


class MultiheadAttention(nn.Module):
    """Plain multi-head attention; returns outputs and per-head weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, q, k, v, additive_mask=None):
        # q: (B, Lq, D), k/v: (B, Lk, D), additive_mask: (Lq, Lk) or None
        B, Lq, D = q.shape
        dh = D // self.heads
        Q = self.wq(q).view(B, Lq, self.heads, dh).transpose(1, 2)
        K = self.wk(k).view(B, k.shape[1], self.heads, dh).transpose(1, 2)
        V = self.wv(v).view(B, v.shape[1], self.heads, dh).transpose(1, 2)
        att = Q @ K.transpose(-2, -1) / math.sqrt(dh)
        if additive_mask is not None:
            att = att + additive_mask
        weights = att.softmax(dim=-1)  # (B, h, Lq, Lk)
        out = (weights @ V).transpose(1, 2).reshape(B, Lq, D)
        return self.wo(out), weights


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.intra = MultiheadAttention(cfg.dim, cfg.heads)
        self.inter = MultiheadAttention(cfg.dim, cfg.heads)
        self.cross = MultiheadAttention(cfg.dim, cfg.heads)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.dim, cfg.ffn_dim), nn.ReLU(), nn.Linear(cfg.ffn_dim, cfg.dim)
        )
        self.ln_intra = nn.LayerNorm(cfg.dim)
        self.ln_inter = nn.LayerNorm(cfg.dim)
        self.ln_cross = nn.LayerNorm(cfg.dim)
        self.ln_ffn = nn.LayerNorm(cfg.dim)

    def forward(self, x, memory, additive_mask):
        # x: (I, T, D) query states, memory: (L, D) feature tokens
        I, T, D = x.shape
        out, _ = self.intra(x, x, x)
        x = self.ln_intra(x + out)

        pooled = x.mean(dim=1, keepdim=False).unsqueeze(0)  # (1, I, D)
        out, _ = self.inter(pooled, pooled, pooled, additive_mask=additive_mask)
        x = self.ln_inter(x + out.squeeze(0).unsqueeze(1))  # broadcast over T

        mem = memory.unsqueeze(0)  # (1, L, D)
        out, _ = self.cross(x.reshape(1, I * T, D), mem, mem)
        x = self.ln_cross(x + out.reshape(I, T, D))

        x = self.ln_ffn(x + self.ffn(x))
        return x


def _bernstein_matrix(T: int, dtype: torch.dtype) -> torch.Tensor:
    t = torch.linspace(0.0, 1.0, T, dtype=dtype)
    s = 1.0 - t
    return torch.stack([s**3, 3.0 * s**2 * t, 3.0 * s * t**2, t**3], dim=1)  # (T, 4)


def flatten_dn_batch(batch: DnQueryBatch):
    """Stack a denoising batch into (R, T, 2) points and (R, T) chars.

    Row order is group-major, positive block before negative block inside
    each group, the layout the isolation mask and dn_loss assume.
    """
    points = np.concatenate(
        [np.concatenate([grp.positive_points, grp.negative_points]) for grp in batch.groups]
    )
    chars = np.concatenate(
        [np.concatenate([grp.positive_chars, grp.negative_chars]) for grp in batch.groups]
    )
    return points, chars


class SpotDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        torch.manual_seed(cfg.init_seed)
        self.cfg = cfg
        D, C = cfg.dim, cfg.alphabet_size

        self.char_embed = nn.Embedding(C + 1, D)  # class C = background
        self.match_content = nn.Parameter(0.02 * torch.randn(cfg.T, D))
        self.anchor_raw = nn.Parameter(torch.empty(cfg.num_matching, 4, 2).uniform_(-2.0, 2.0))
        self.point_mlp = nn.Sequential(nn.Linear(D, D), nn.ReLU(), nn.Linear(D, D))
        self.feature_proj = nn.Linear(C + 2, D)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))

        self.score_head = nn.Linear(D, 1)
        self.char_head = nn.Linear(D, C + 1)
        self.center_off = nn.Linear(D, 2)
        self.top_off = nn.Linear(D, 2)
        self.bot_off = nn.Linear(D, 2)
        for head in (self.center_off, self.top_off, self.bot_off):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

        self.register_buffer("bernstein", _bernstein_matrix(cfg.T, torch.float32))
        self.to(cfg.torch_dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.cfg.torch_dtype

    def anchor_points(self) -> torch.Tensor:
        """Sampled reference points of the matching queries, (K, T, 2)."""
        ctrl = torch.sigmoid(self.anchor_raw)  # (K, 4, 2) in the unit square
        return torch.einsum("tk,nkc->ntc", self.bernstein, ctrl)

    def _memory(self, raster) -> torch.Tensor:
        # raster: (C+2, G, G) array -> (G*G, D) tokens with fixed position embedding
        raster = torch.as_tensor(raster, dtype=self.dtype)
        channels, G, G2 = raster.shape
        if G != G2 or channels != self.cfg.alphabet_size + 2:
            raise ValueError(
                f"raster must be ({self.cfg.alphabet_size + 2}, G, G), got {tuple(raster.shape)}"
            )
        tokens = raster.reshape(channels, G * G).T  # (L, C+2)
        grid = (torch.arange(G, dtype=self.dtype) + 0.5) / G
        yy, xx = torch.meshgrid(grid, grid, indexing="ij")
        cells = torch.stack([xx, yy], dim=-1).reshape(G * G, 2)
        return self.feature_proj(tokens) + sinusoidal_embed(cells, self.cfg.dim)

    def forward(
        self,
        raster: torch.Tensor,
        dn_batch: DnQueryBatch | None = None,
        mask: AttentionMask | None = None,
    ) -> PredictionSet:
        """Decode one scene; rows are [denoising queries | matching queries]."""
        cfg = self.cfg
        memory = self._memory(raster)

        refs = [self.anchor_points()]
        contents = [self.match_content.unsqueeze(0).expand(cfg.num_matching, -1, -1)]
        if dn_batch is not None:
            points, chars = flatten_dn_batch(dn_batch)
            if points.shape[1] != cfg.T:
                raise ValueError(f"dn batch sampled {points.shape[1]} points, decoder expects {cfg.T}")
            dn_refs = torch.as_tensor(points, dtype=self.dtype)
            refs.insert(0, dn_refs)
            contents.insert(0, self.char_embed(torch.as_tensor(chars, dtype=torch.long)))
            if mask is None:
                mask = build_mask(dn_batch.g, dn_batch.n, cfg.num_matching)
        if mask is None:
            # matching-only forward: nothing to isolate
            mask = AttentionMask(blocked=np.zeros((cfg.num_matching,) * 2, dtype=bool))

        ref = torch.cat(refs)  # (I, T, 2)
        x = torch.cat(contents) + self.point_mlp(sinusoidal_embed(ref, cfg.dim))
        if mask.size != x.shape[0]:
            raise ValueError(f"mask covers {mask.size} rows, forward has {x.shape[0]}")
        additive = torch.where(
            torch.as_tensor(mask.blocked),
            torch.tensor(-torch.inf, dtype=self.dtype),
            torch.tensor(0.0, dtype=self.dtype),
        )

        for li, layer in enumerate(self.layers):
            x = layer(x, memory, additive)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after decoder layer {li}")

        pooled = x.mean(dim=1)
        scores = torch.sigmoid(self.score_head(pooled).squeeze(-1))
        scores = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
        return PredictionSet(
            instance_scores=scores,
            char_logits=self.char_head(x),
            center_points=ref + self.center_off(x),
            boundary_top=ref + self.top_off(x),
            boundary_bot=ref + self.bot_off(x),
        )


def save_checkpoint(model: SpotDecoder, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> SpotDecoder:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format_version {version!r}, expected {CHECKPOINT_VERSION}")
    model = SpotDecoder(DecoderConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model
