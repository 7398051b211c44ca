"""Full model: encoder + pixel-wise decoder, with convenience paths for
training-time subsampled decoding and evaluation-time full decoding at
posterior means."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .configs import ModelConfig
from .decoder import (DecodedMixture, PixelDecoder, PixelQueries,
                      compose_reconstruction, normalized_timesteps, pixel_coords)
from .encoder import (LatentSamples, PoseEmbedding, PosteriorParams,
                      SceneEncoder, sample_latents)


@dataclass
class ForwardResult:
    posteriors: PosteriorParams
    mixture: DecodedMixture
    targets: torch.Tensor           # (B, T_d, P_d, 3) pixels the decode is scored on


class SceneModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = SceneEncoder(config)
        self.decoder = PixelDecoder(config)
        if config.vs_mode:
            self.decoder_pose_embed = PoseEmbedding(
                config.pose_dim, config.pose_mlp_hidden, config.pose_embed_dim)

    def encode(self, frames: torch.Tensor,
               poses: Optional[torch.Tensor] = None) -> PosteriorParams:
        return self.encoder(frames, poses)

    def decode(self, posteriors: PosteriorParams, frame_indices: torch.Tensor,
               rows: torch.Tensor, cols: torch.Tensor,
               generator: Optional[torch.Generator] = None, mean_only: bool = False,
               poses: Optional[torch.Tensor] = None,
               latents: Optional[LatentSamples] = None) -> DecodedMixture:
        """Decode the (frame_indices x rows x cols) sub-grid.

        ``poses`` (B, T, pose_dim) supplies vs_mode conditioning; the slice at
        ``frame_indices`` is embedded and fed in place of frame latents.
        ``latents`` overrides sampling (used by analyses that edit latents).
        """
        cfg = self.config
        dtype = next(self.parameters()).dtype
        coords = pixel_coords(cfg.height, cfg.width, rows, cols, dtype=dtype)
        t_norm = normalized_timesteps(frame_indices, cfg.frames, dtype=dtype)
        queries = PixelQueries(coords=coords, t_norm=t_norm)
        if latents is None:
            latents = sample_latents(posteriors, frame_indices,
                                     coords.shape[0], generator=generator,
                                     mean_only=mean_only)
        conditioning = None
        if cfg.vs_mode:
            if poses is None:
                raise ValueError("vs_mode decode requires poses")
            conditioning = self.decoder_pose_embed(poses[:, frame_indices])
        return self.decoder.decode_pixels(latents, queries, conditioning)

    def forward(self, frames: torch.Tensor, frame_indices: torch.Tensor,
                rows: torch.Tensor, cols: torch.Tensor,
                generator: Optional[torch.Generator] = None,
                poses: Optional[torch.Tensor] = None) -> ForwardResult:
        """Training path: encode, sample latents per decode position, decode."""
        posteriors = self.encode(frames, poses if self.config.vs_mode else None)
        mixture = self.decode(posteriors, frame_indices, rows, cols,
                              generator=generator, poses=poses)
        # frames is (B, T, 3, H, W); gather the decoded sub-grid as (B, T_d, P_d, 3).
        sub = frames[:, frame_indices][:, :, :, rows][:, :, :, :, cols]
        targets = sub.permute(0, 1, 3, 4, 2).reshape(
            frames.shape[0], len(frame_indices), -1, 3)
        return ForwardResult(posteriors=posteriors, mixture=mixture, targets=targets)

    def reconstruct(self, frames: Optional[torch.Tensor] = None,
                    poses: Optional[torch.Tensor] = None,
                    posteriors: Optional[PosteriorParams] = None,
                    latents: Optional[LatentSamples] = None):
        """Full-grid decode at posterior means (no sampling noise).

        Encodes ``frames`` unless ``posteriors`` is supplied directly.
        Returns (posteriors, mixture, reconstruction (B, T, H, W, 3),
        segmentation (B, T, H, W), weights (B, K, T, H, W)).
        """
        cfg = self.config
        if posteriors is None:
            if frames is None:
                raise ValueError("reconstruct needs frames or posteriors")
            posteriors = self.encode(frames, poses if cfg.vs_mode else None)
        frame_indices = torch.arange(cfg.frames)
        rows = torch.arange(cfg.height)
        cols = torch.arange(cfg.width)
        mixture = self.decode(posteriors, frame_indices, rows, cols,
                              mean_only=True, poses=poses, latents=latents)
        recon, seg, _ = compose_reconstruction(mixture)
        b = recon.shape[0]
        recon = recon.reshape(b, cfg.frames, cfg.height, cfg.width, 3)
        seg = seg.reshape(b, cfg.frames, cfg.height, cfg.width)
        weights = mixture.weights.reshape(b, cfg.num_slots, cfg.frames,
                                          cfg.height, cfg.width)
        return posteriors, mixture, recon, seg, weights


def init_parameters(model: nn.Module, generator: torch.Generator) -> None:
    """Deterministically (re)initialize every parameter from one generator.

    Linear/Conv weights and biases: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
    positional tables: normal(0, 0.02); norm gains 1, biases 0. Iteration
    order is the module tree order, so a fixed seed fixes all weights.
    """
    from .decoder import JointLogitNorm
    from .encoder import PositionalEmbedding3D

    for module in model.modules():
        if isinstance(module, nn.Linear):
            bound = 1.0 / np.sqrt(module.in_features)
            module.weight.data.uniform_(-bound, bound, generator=generator)
            if module.bias is not None:
                module.bias.data.uniform_(-bound, bound, generator=generator)
        elif isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = 1.0 / np.sqrt(fan_in)
            module.weight.data.uniform_(-bound, bound, generator=generator)
            if module.bias is not None:
                module.bias.data.uniform_(-bound, bound, generator=generator)
        elif isinstance(module, PositionalEmbedding3D):
            for table in (module.t_table, module.i_table, module.j_table):
                table.data.normal_(0.0, 0.02, generator=generator)
        elif isinstance(module, nn.LayerNorm):
            module.weight.data.fill_(1.0)
            module.bias.data.fill_(0.0)
        elif isinstance(module, JointLogitNorm):
            module.gain.data.fill_(1.0)
            module.bias.data.fill_(0.0)


def frames_to_tensor(sequences: list, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack VideoSequence frames into a (N, T, 3, H, W) tensor."""
    arr = np.stack([seq.frames for seq in sequences])
    return torch.from_numpy(arr).to(dtype).permute(0, 1, 4, 2, 3).contiguous()


def cameras_to_tensor(sequences: list, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack camera offsets into (N, T, 2); raises if any sequence lacks them."""
    if any(seq.camera is None for seq in sequences):
        raise ValueError("sequence without camera ground truth")
    arr = np.stack([seq.camera for seq in sequences])
    return torch.from_numpy(arr).to(dtype)
