"""Inference network: per-frame CNN -> transformer over all (t, i, j) tokens
-> strided sum pool to K slots per frame -> second transformer -> axis-wise
aggregation into K object posteriors and T frame posteriors.

The factorization bottleneck lives in the aggregation step: object parameters
come from temporal means of the slot grid (time-invariant by construction),
frame parameters from per-frame means across slots. The network therefore
emits exactly K + T posterior parameter sets, never K*T.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .configs import ModelConfig

LOG_SCALE_MIN = -8.0
LOG_SCALE_MAX = 8.0


@dataclass
class PosteriorParams:
    """Gaussian posterior parameters: K object sets and T frame sets (frame
    sets absent in vs_mode). log_scale is pre-clamped to [-8, 8]."""

    object_mean: torch.Tensor        # (B, K, D)
    object_log_scale: torch.Tensor   # (B, K, D)
    frame_mean: Optional[torch.Tensor] = None       # (B, T, D)
    frame_log_scale: Optional[torch.Tensor] = None  # (B, T, D)

    @property
    def num_sets(self) -> int:
        n = self.object_mean.shape[1]
        if self.frame_mean is not None:
            n += self.frame_mean.shape[1]
        return n


@dataclass
class LatentSamples:
    """Per-decode-position latent samples (multisampling: independent draws
    for every decoded (t, pixel) position)."""

    objects: torch.Tensor            # (B, K, T_d, P_d, D)
    frames: Optional[torch.Tensor]   # (B, K, T_d, P_d, D); None in vs_mode


class ConvFrontend(nn.Module):
    """Per-frame CNN: ``layers`` strided convolutions with ReLU after each."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        convs = []
        in_ch = 3
        for _ in range(config.cnn_layers):
            convs.append(nn.Conv2d(in_ch, config.cnn_channels, config.cnn_kernel,
                                   stride=config.cnn_stride,
                                   padding=(config.cnn_kernel - config.cnn_stride) // 2))
            in_ch = config.cnn_channels
        self.convs = nn.ModuleList(convs)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, 3, H, W) -> (B, T, I*J, C); frames processed independently."""
        b, t = frames.shape[:2]
        x = frames.reshape(b * t, *frames.shape[2:])
        for conv in self.convs:
            x = F.relu(conv(x))
        c, i, j = x.shape[1:]
        return x.reshape(b, t, c, i * j).transpose(2, 3)


class PositionalEmbedding3D(nn.Module):
    """Learned absolute embeddings for the (t, i, j) position of each slot,
    parameterized as the sum of three per-axis tables."""

    def __init__(self, t: int, i: int, j: int, dim: int):
        super().__init__()
        self.t_table = nn.Parameter(torch.zeros(t, dim))
        self.i_table = nn.Parameter(torch.zeros(i, dim))
        self.j_table = nn.Parameter(torch.zeros(j, dim))
        self.shape = (t, i, j)

    def table(self) -> torch.Tensor:
        """Full (t, i, j, dim) embedding grid."""
        t, i, j = self.shape
        return (self.t_table[:, None, None, :] + self.i_table[None, :, None, :]
                + self.j_table[None, None, :, :])

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, t, i*j, dim) -> same, with the positional table added."""
        t, i, j = self.shape
        if grid.shape[1] != t or grid.shape[2] != i * j:
            raise ValueError(f"grid shape {tuple(grid.shape)} does not match ({t}, {i * j})")
        return grid + self.table().reshape(1, t, i * j, -1)


class SelfAttention(nn.Module):
    """Full (non-causal) multi-head self-attention over all slots."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, use_fused: bool = True) -> torch.Tensor:
        b, s, e = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = k.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)
        v = v.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)
        if use_fused:
            y = F.scaled_dot_product_attention(q, k, v)
        else:
            y = torch.matmul(self.attention_weights_from_qk(q, k), v)
        y = y.transpose(1, 2).reshape(b, s, e)
        return self.out(y)

    @staticmethod
    def attention_weights_from_qk(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        return torch.softmax(scores, dim=-1)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(B, S, E) -> (B, heads, S, S) softmax-normalized attention."""
        b, s, _ = x.shape
        q, k, _ = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = k.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)
        return self.attention_weights_from_qk(q, k)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x)). No dropout."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.ln_attn = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_hidden), nn.ReLU(),
                                 nn.Linear(mlp_hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_attn(x))
        x = x + self.mlp(self.ln_mlp(x))
        return x


class Transformer(nn.Module):
    def __init__(self, layers: int, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, mlp_hidden) for _ in range(layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for idx, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after transformer block {idx}")
        return x


def spatial_pool(grid: torch.Tensor, rows: int, cols: int, num_slots: int) -> torch.Tensor:
    """Strided sum pool (B, T, rows*cols, E) -> (B, T, K, E), scaled by sqrt(K / (rows*cols)).

    Kernel and stride are both [rows/sqrt(K), cols/sqrt(K)]; the scale makes the
    pooled values variance-preserving for i.i.d. unit-variance inputs.
    """
    side = int(round(num_slots ** 0.5))
    if side * side != num_slots:
        raise ValueError(f"num_slots {num_slots} is not a perfect square")
    if rows % side != 0 or cols % side != 0:
        raise ValueError(f"pool kernel [{rows}/{side}, {cols}/{side}] is not integral")
    kr, kc = rows // side, cols // side
    b, t, s, e = grid.shape
    if s != rows * cols:
        raise ValueError(f"grid has {s} slots, expected {rows * cols}")
    x = grid.reshape(b, t, side, kr, side, kc, e)
    pooled = x.sum(dim=(3, 5)) * math.sqrt(num_slots / (rows * cols))
    return pooled.reshape(b, t, num_slots, e)


class PosteriorHead(nn.Module):
    """Single-hidden-layer MLP emitting (mean, log_scale) pairs."""

    def __init__(self, in_dim: int, hidden: int, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 2 * latent_dim))
        self.latent_dim = latent_dim

    def forward(self, x: torch.Tensor):
        out = self.net(x)
        mean, log_scale = out.split(self.latent_dim, dim=-1)
        return mean, log_scale.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)


class PoseEmbedding(nn.Module):
    """Small MLP embedding of the camera pose vector (vs_mode conditioning)."""

    def __init__(self, pose_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(pose_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, out_dim))

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        return self.net(pose)


class SceneEncoder(nn.Module):
    """frames (B, T, 3, H, W) [+ poses (B, T, 2) in vs_mode] -> PosteriorParams."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        e = config.embed_dim
        t, i, j = config.frames, config.grid_rows, config.grid_cols
        side = config.pooled_side

        self.cnn = ConvFrontend(config)
        in_ch = config.cnn_channels
        if config.vs_mode:
            self.pose_embed = PoseEmbedding(config.pose_dim, config.pose_mlp_hidden,
                                            config.pose_embed_dim)
            in_ch += config.pose_embed_dim
        self.input_proj = nn.Linear(in_ch, e)
        self.pos1 = PositionalEmbedding3D(t, i, j, e)
        self.t1 = Transformer(config.tr_layers, e, config.tr_heads, config.tr_mlp_hidden)
        self.pos2 = PositionalEmbedding3D(t, side, side, e)
        self.t2 = Transformer(config.tr_layers, e, config.tr_heads, config.tr_mlp_hidden)
        self.object_head = PosteriorHead(e, config.agg_mlp_hidden, config.latent_dim)
        if not config.vs_mode:
            self.frame_head = PosteriorHead(e, config.agg_mlp_hidden, config.latent_dim)

    def slot_grid(self, frames: torch.Tensor,
                  poses: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Run CNN, transformers, and pooling; returns the T2 output (B, T, K, E)."""
        cfg = self.config
        b, t = frames.shape[:2]
        if t != cfg.frames or frames.shape[2:] != (3, cfg.height, cfg.width):
            raise ValueError(f"frames shape {tuple(frames.shape)} does not match config "
                             f"(T={cfg.frames}, H={cfg.height}, W={cfg.width})")
        grid = self.cnn(frames)                       # (B, T, I*J, C)
        if cfg.vs_mode:
            if poses is None:
                raise ValueError("vs_mode encoder requires camera poses")
            emb = self.pose_embed(poses)              # (B, T, pose_embed_dim)
            emb = emb[:, :, None, :].expand(-1, -1, grid.shape[2], -1)
            grid = torch.cat([grid, emb], dim=-1)
        elif poses is not None:
            raise ValueError("poses supplied to a non-vs_mode encoder")
        x = self.input_proj(grid)
        x = self.pos1(x)
        x = self.t1(x.reshape(b, t * cfg.grid_rows * cfg.grid_cols, -1))
        x = x.reshape(b, t, cfg.grid_rows * cfg.grid_cols, -1)
        x = spatial_pool(x, cfg.grid_rows, cfg.grid_cols, cfg.num_slots)
        x = self.pos2(x)
        x = self.t2(x.reshape(b, t * cfg.num_slots, -1))
        return x.reshape(b, t, cfg.num_slots, -1)

    def forward(self, frames: torch.Tensor,
                poses: Optional[torch.Tensor] = None) -> PosteriorParams:
        grid = self.slot_grid(frames, poses)
        object_mean, object_log_scale = self.object_head(grid.mean(dim=1))  # (B, K, D)
        if self.config.vs_mode:
            return PosteriorParams(object_mean, object_log_scale)
        frame_mean, frame_log_scale = self.frame_head(grid.mean(dim=2))     # (B, T, D)
        return PosteriorParams(object_mean, object_log_scale, frame_mean, frame_log_scale)


def sample_latents(params: PosteriorParams, frame_indices: torch.Tensor,
                   num_pixels: int, generator: Optional[torch.Generator] = None,
                   mean_only: bool = False) -> LatentSamples:
    """Reparameterized multisampling: independent draws per decode position.

    Object latents are sampled i.i.d. for every decoded (frame, pixel); frame
    latents i.i.d. for every (component, pixel), with frame t's posterior
    feeding all positions of decoded frame t. ``mean_only`` suppresses the
    noise (used for reconstructions and analyses).
    """
    if not torch.isfinite(params.object_mean).all():
        raise FloatingPointError("non-finite posterior parameters")
    b, k, d = params.object_mean.shape
    t_d = int(frame_indices.shape[0])
    shape = (b, k, t_d, num_pixels, d)

    def draw(mean, log_scale):
        if mean_only:
            return mean.expand(shape).clone()
        eps = torch.empty(shape, dtype=mean.dtype, device=mean.device)
        eps.normal_(generator=generator)
        return mean + torch.exp(log_scale) * eps

    o = draw(params.object_mean[:, :, None, None, :],
             params.object_log_scale[:, :, None, None, :])
    if params.frame_mean is None:
        return LatentSamples(objects=o, frames=None)
    fm = params.frame_mean[:, frame_indices]            # (B, T_d, D)
    fs = params.frame_log_scale[:, frame_indices]
    f = draw(fm[:, None, :, None, :], fs[:, None, :, None, :])
    return LatentSamples(objects=o, frames=f)
