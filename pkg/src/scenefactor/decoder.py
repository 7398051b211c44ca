"""Pixel-wise mixture decoder.

One MLP maps [object latent  ||  frame latent (or pose embedding)  ||  pixel
coordinate l in [-1,1]^2  ||  normalized timestep t in [0,1)] to 4 channels:
an RGB mean (sigmoid-bounded) and a pre-norm mixture logit. The same network
is applied independently at every (component, frame, pixel) position. Mixture
weights come from layer-norming the logits jointly over all (k, t, i)
positions of one sequence (single scalar gain and bias), then a softmax over
the K components at each (t, i).
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .configs import ModelConfig
from .encoder import LatentSamples

LN_EPS = 1e-5


@dataclass
class PixelQueries:
    """Decode targets: pixel coordinates and normalized timesteps."""

    coords: torch.Tensor   # (P_d, 2) in [-1, 1]^2
    t_norm: torch.Tensor   # (T_d,) in [0, 1)

    def validate(self) -> None:
        if self.coords.ndim != 2 or self.coords.shape[-1] != 2:
            raise ValueError(f"coords shape {tuple(self.coords.shape)} is not (P, 2)")
        if torch.any(self.coords.abs() > 1.0):
            raise ValueError("pixel coordinates outside [-1, 1]^2")
        if torch.any(self.t_norm < 0.0) or torch.any(self.t_norm >= 1.0):
            raise ValueError("t_norm outside [0, 1)")


@dataclass
class DecodedMixture:
    """Per-(component, frame, pixel) decoder outputs for one batch."""

    rgb: torch.Tensor               # (B, K, T_d, P_d, 3), means in [0, 1]
    pre_norm_logits: torch.Tensor   # (B, K, T_d, P_d)
    post_norm_logits: torch.Tensor  # (B, K, T_d, P_d), after the joint layer norm
    weights: torch.Tensor           # (B, K, T_d, P_d), simplex over K
    log_weights: torch.Tensor       # (B, K, T_d, P_d), log softmax over K


def pixel_coords(height: int, width: int, rows: Optional[torch.Tensor] = None,
                 cols: Optional[torch.Tensor] = None,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Pixel-center coordinates in [-1, 1]^2 for a (sub)grid of an H x W image.

    Returns (len(rows)*len(cols), 2) as (x, y) = (column, row) coordinates.
    """
    if rows is None:
        rows = torch.arange(height)
    if cols is None:
        cols = torch.arange(width)
    ys = -1.0 + (rows.to(dtype) + 0.5) * (2.0 / height)
    xs = -1.0 + (cols.to(dtype) + 0.5) * (2.0 / width)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def normalized_timesteps(frame_indices: torch.Tensor, total_frames: int,
                         dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """t_norm = frame_index / T for 0-indexed frames, exactly in [0, 1)."""
    return frame_indices.to(dtype) / total_frames


def softmax_over_components(logits: torch.Tensor):
    """Softmax and log-softmax over the component axis (dim 1)."""
    return torch.softmax(logits, dim=1), torch.log_softmax(logits, dim=1)


class JointLogitNorm(nn.Module):
    """Layer norm over all (k, t, i) positions of one sequence jointly,
    with a single learned scalar gain and bias."""

    def __init__(self):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(()))
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(self, logits: torch.Tensor) -> torch.Tensor:
        """(B, K, T_d, P_d) -> same, normalized per batch element."""
        flat = logits.reshape(logits.shape[0], -1)
        mean = flat.mean(dim=1)
        var = flat.var(dim=1, unbiased=False)
        denom = torch.sqrt(var + LN_EPS)
        normed = (logits - mean.reshape(-1, 1, 1, 1)) / denom.reshape(-1, 1, 1, 1)
        return normed * self.gain + self.bias


class PixelDecoder(nn.Module):
    """The decoder MLP plus mixture-weight normalization."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        frame_dim = config.pose_embed_dim if config.vs_mode else config.latent_dim
        in_dim = config.latent_dim + frame_dim + 3
        layers = []
        width = in_dim
        for _ in range(config.decoder_layers):
            layers += [nn.Linear(width, config.decoder_channels), nn.ReLU()]
            width = config.decoder_channels
        layers.append(nn.Linear(width, 4))
        self.net = nn.Sequential(*layers)
        self.logit_norm = JointLogitNorm()
        self.in_dim = in_dim

    def decode_pixels(self, latents: LatentSamples, queries: PixelQueries,
                      frame_conditioning: Optional[torch.Tensor] = None) -> DecodedMixture:
        """Apply the MLP at every (k, t, i) and normalize mixture weights.

        ``frame_conditioning`` replaces the frame-latent slot of the input in
        vs_mode: (B, T_d, pose_embed_dim), broadcast over components/pixels.
        """
        queries.validate()
        o = latents.objects                                  # (B, K, T_d, P_d, D)
        b, k, t_d, p_d, _ = o.shape
        if latents.frames is not None:
            f = latents.frames
        elif frame_conditioning is not None:
            f = frame_conditioning[:, None, :, None, :].expand(b, k, t_d, p_d, -1)
        else:
            raise ValueError("no frame latents and no frame conditioning supplied")
        coords = queries.coords.to(o.dtype)[None, None, None, :, :].expand(b, k, t_d, p_d, 2)
        ts = queries.t_norm.to(o.dtype)[None, None, :, None, None].expand(b, k, t_d, p_d, 1)
        x = torch.cat([o, f, coords, ts], dim=-1)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"decoder input dim {x.shape[-1]} != expected {self.in_dim}")
        out = self.net(x)
        rgb = torch.sigmoid(out[..., :3])
        pre_norm = out[..., 3]
        post_norm = self.logit_norm(pre_norm)
        weights, log_weights = softmax_over_components(post_norm)
        return DecodedMixture(rgb=rgb, pre_norm_logits=pre_norm,
                              post_norm_logits=post_norm, weights=weights,
                              log_weights=log_weights)

    forward = decode_pixels


def slice_mixture(mix: DecodedMixture, pixel_index: torch.Tensor) -> DecodedMixture:
    """Restrict a decoded mixture to a subset of its pixel positions.

    The joint layer norm's statistics are those of the original decode; only
    the pixel axis is sliced, so weights stay exactly as decoded.
    """
    return DecodedMixture(
        rgb=mix.rgb[:, :, :, pixel_index],
        pre_norm_logits=mix.pre_norm_logits[:, :, :, pixel_index],
        post_norm_logits=mix.post_norm_logits[:, :, :, pixel_index],
        weights=mix.weights[:, :, :, pixel_index],
        log_weights=mix.log_weights[:, :, :, pixel_index])


def compose_reconstruction(mix: DecodedMixture):
    """Expected image, hard segmentation, and per-component contributions.

    Returns (reconstruction (B, T_d, P_d, 3), segmentation (B, T_d, P_d) int64
    argmax over components, components (B, K, T_d, P_d, 3) = weight * rgb).
    """
    weights = mix.weights[..., None]
    reconstruction = (weights * mix.rgb).sum(dim=1)
    segmentation = mix.weights.argmax(dim=1)
    components = weights * mix.rgb
    return reconstruction, segmentation, components
