"""Training objective: subsampled, normalized negative log-likelihood under
the pixel-wise Gaussian mixture, plus weighted KL terms against the unit
spherical Gaussian prior.

    loss = -alpha / (T_d * H_d * W_d) * sum log p(x_{t,i} | ...)
           + beta_o / K * sum_k KL(q(o_k | X) || N(0, 1))
           + beta_f / T * sum_t KL(q(f_t | X) || N(0, 1))

The likelihood normalizer is the number of decoded pixels, so decoding fewer
pixels leaves the loss scale unchanged. All terms are averaged over the batch.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .configs import DecodeConfig, LossConfig
from .decoder import DecodedMixture
from .encoder import PosteriorParams

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DecodeTargetSpec:
    """Which (frames, pixel grid) a training step decodes."""

    frame_indices: torch.Tensor   # (T_d,) distinct, sorted
    rows: torch.Tensor            # (H_d,) strided row indices
    cols: torch.Tensor            # (W_d,) strided col indices

    @property
    def num_pixels(self) -> int:
        return len(self.rows) * len(self.cols)


def choose_decode_targets(total_frames: int, height: int, width: int,
                          decode: DecodeConfig,
                          generator: Optional[torch.Generator] = None) -> DecodeTargetSpec:
    """Sample a decode target: T_d frames uniformly without replacement and a
    strided pixel slice with a uniformly random offset per axis."""
    perm = torch.randperm(total_frames, generator=generator)
    frame_indices = perm[:decode.frames_decoded].sort().values
    row_stride = height // decode.height_decoded
    col_stride = width // decode.width_decoded
    row_offset = int(torch.randint(row_stride, (1,), generator=generator))
    col_offset = int(torch.randint(col_stride, (1,), generator=generator))
    rows = torch.arange(decode.height_decoded) * row_stride + row_offset
    cols = torch.arange(decode.width_decoded) * col_stride + col_offset
    return DecodeTargetSpec(frame_indices=frame_indices, rows=rows, cols=cols)


def all_decode_offsets(height: int, width: int, decode: DecodeConfig):
    """Enumerate every stride-offset DecodeTargetSpec (full frame set).

    The returned specs partition the pixel grid: each pixel appears in
    exactly one spec.
    """
    row_stride = height // decode.height_decoded
    col_stride = width // decode.width_decoded
    frame_indices = torch.arange(decode.frames_decoded)
    specs = []
    for ro in range(row_stride):
        for co in range(col_stride):
            rows = torch.arange(decode.height_decoded) * row_stride + ro
            cols = torch.arange(decode.width_decoded) * col_stride + co
            specs.append(DecodeTargetSpec(frame_indices=frame_indices,
                                          rows=rows, cols=cols))
    return specs


def pixel_log_likelihood(mix: DecodedMixture, targets: torch.Tensor, sigma_x: float):
    """Log-likelihood of target pixels under the decoded mixture.

    Per pixel: log sum_k m_k * prod_c N(x_c | mu_{k,c}, sigma_x^2), computed
    via log-sum-exp over components with independent per-channel Gaussians.
    Returns (per_pixel (B, T_d, P_d), total scalar = sum over decoded pixels,
    averaged over the batch).
    """
    if sigma_x <= 0:
        raise ValueError(f"sigma_x must be positive, got {sigma_x}")
    x = targets[:, None]                                   # (B, 1, T_d, P_d, 3)
    z = (x - mix.rgb) / sigma_x
    log_norm = -math.log(sigma_x) - 0.5 * LOG_2PI
    comp_logp = (-0.5 * z * z + log_norm).sum(dim=-1)      # (B, K, T_d, P_d)
    per_pixel = torch.logsumexp(mix.log_weights + comp_logp, dim=1)
    total = per_pixel.sum(dim=(1, 2)).mean()
    return per_pixel, total


def gaussian_kl_per_dim(mean: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """Marginal KL to N(0,1) per latent dimension:
    0.5 * (mu_d^2 + sigma_d^2 - 1 - 2 log sigma_d)."""
    var = torch.exp(2.0 * log_scale)
    return 0.5 * (mean * mean + var - 1.0) - log_scale


def gaussian_kl(mean: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, diag(exp(log_scale)^2)) || N(0, 1)), summed over the last dim."""
    return gaussian_kl_per_dim(mean, log_scale).sum(dim=-1)


def negative_elbo(mix: DecodedMixture, targets: torch.Tensor,
                  posteriors: PosteriorParams, loss_config: LossConfig,
                  step: int = 0):
    """Total training loss and its logged parts.

    Returns (total, parts) where parts has float entries nll, kl_o, kl_f,
    beta_o, total. kl_f is 0.0 when the posterior carries no frame latents.
    """
    num_pixels = targets.shape[1] * targets.shape[2]
    _, logp_total = pixel_log_likelihood(mix, targets, loss_config.sigma_x)
    nll = -loss_config.alpha / num_pixels * logp_total

    beta_o = loss_config.beta_o_at(step)
    k = posteriors.object_mean.shape[1]
    kl_o_sum = gaussian_kl(posteriors.object_mean,
                           posteriors.object_log_scale).sum(dim=1).mean()
    kl_o = beta_o / k * kl_o_sum

    if posteriors.frame_mean is not None:
        t = posteriors.frame_mean.shape[1]
        kl_f_sum = gaussian_kl(posteriors.frame_mean,
                               posteriors.frame_log_scale).sum(dim=1).mean()
        kl_f = loss_config.beta_f / t * kl_f_sum
    else:
        kl_f = torch.zeros((), dtype=nll.dtype)

    total = nll + kl_o + kl_f
    parts = {"nll": float(nll.detach()), "kl_o": float(kl_o.detach()),
             "kl_f": float(kl_f.detach()), "beta_o": beta_o,
             "total": float(total.detach())}
    return total, parts
