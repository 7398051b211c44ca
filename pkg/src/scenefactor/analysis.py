"""Figure-grade analyses on trained checkpoints: latent traversals, object/
frame cross-overs, scene composition from object-latent subsets, view sweeps
for pose-conditioned models, and lossless image-grid emission with a fixed
segmentation palette.

Every analysis decodes at posterior means (no sampling noise), so results are
deterministic functions of (checkpoint, inputs).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .encoder import PosteriorParams
from .model import SceneModel, frames_to_tensor
from .objective import gaussian_kl_per_dim
from .synth import VideoSequence

# Fixed component-indexed palette (RGB in [0,1]); component k always renders
# as PALETTE[k % 16], so segment colors are stable across frames and runs.
PALETTE = np.array([
    [0.894, 0.102, 0.110], [0.216, 0.494, 0.722], [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639], [1.000, 0.498, 0.000], [1.000, 1.000, 0.200],
    [0.651, 0.337, 0.157], [0.969, 0.506, 0.749], [0.600, 0.600, 0.600],
    [0.090, 0.745, 0.812], [0.737, 0.741, 0.133], [0.122, 0.467, 0.706],
    [0.682, 0.780, 0.910], [0.090, 0.365, 0.161], [0.984, 0.604, 0.600],
    [0.580, 0.404, 0.741],
])


class AnalysisError(ValueError):
    """Invalid analysis request (bad indices, wrong checkpoint kind, ...)."""


@dataclass
class LatentEdit:
    """Additive edit of one latent dimension, applied at several offsets."""

    slot: int
    dim: int
    offsets: list
    scope: str = "object"   # object | frame

    def validate(self, num_slots: int, num_frames: int, latent_dim: int) -> None:
        if self.scope not in ("object", "frame"):
            raise AnalysisError(f"unknown edit scope '{self.scope}'")
        limit = num_slots if self.scope == "object" else num_frames
        if not 0 <= self.slot < limit:
            raise AnalysisError(f"edit slot {self.slot} outside [0, {limit})")
        if not 0 <= self.dim < latent_dim:
            raise AnalysisError(f"edit dim {self.dim} outside [0, {latent_dim})")
        if not all(np.isfinite(self.offsets)):
            raise AnalysisError("edit offsets must be finite")


DEFAULT_OFFSETS = (-3.0, -1.5, 0.0, 1.5, 3.0)


def _tensorize(model: SceneModel, sequence: VideoSequence):
    dtype = next(model.parameters()).dtype
    frames = frames_to_tensor([sequence], dtype)
    poses = None
    if model.config.vs_mode:
        if sequence.camera is None:
            raise AnalysisError("vs_mode analysis requires camera ground truth")
        poses = torch.as_tensor(np.asarray(sequence.camera), dtype=dtype)[None]
    return frames, poses


def encode_means(model: SceneModel, sequence: VideoSequence):
    """Posterior parameters for one sequence (batch dim of 1 kept)."""
    frames, poses = _tensorize(model, sequence)
    with torch.no_grad():
        return model.encode(frames, poses), frames, poses


def segmentation_image(weights: np.ndarray) -> np.ndarray:
    """(K, H, W) soft weights -> (H, W, 3) palette blend sum_k m_k * palette[k]."""
    k = weights.shape[0]
    palette = PALETTE[np.arange(k) % len(PALETTE)]
    return np.tensordot(np.asarray(weights), palette, axes=(0, 0))


def rank_dims_by_kl(mean: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Latent dims sorted by decreasing marginal KL (candidates for traversal).

    ``mean``/``log_scale`` may carry any leading axes (scenes, slots); the KL
    is averaged over all of them.
    """
    kl = gaussian_kl_per_dim(torch.as_tensor(mean), torch.as_tensor(log_scale))
    per_dim = kl.reshape(-1, kl.shape[-1]).mean(dim=0).numpy()
    return np.argsort(-per_dim)


@dataclass
class ImageGridResult:
    grid: np.ndarray          # (H_out, W_out, 3) in [0, 1]
    rows: int
    cols: int
    panels: np.ndarray        # (rows*cols, h, w, 3) the individual panels


def emit_grid(images, rows: int, cols: int, path: Optional[str] = None,
              gutter: int = 2, gutter_value: float = 1.0) -> ImageGridResult:
    """Tile images row-major into a grid with fixed-width gutters.

    Output dims: (rows*h + (rows-1)*gutter, cols*w + (cols-1)*gutter).
    ``path`` (if given) receives a lossless PNG.
    """
    panels = np.asarray([np.asarray(im, dtype=np.float64) for im in images])
    if panels.ndim != 4 or panels.shape[-1] != 3:
        raise AnalysisError(f"expected (N, h, w, 3) images, got {panels.shape}")
    if panels.shape[0] != rows * cols:
        raise AnalysisError(f"{panels.shape[0]} images do not fill a {rows}x{cols} grid")
    h, w = panels.shape[1:3]
    out_h = rows * h + (rows - 1) * gutter
    out_w = cols * w + (cols - 1) * gutter
    grid = np.full((out_h, out_w, 3), gutter_value, dtype=np.float64)
    for idx in range(rows * cols):
        r, c = divmod(idx, cols)
        top, left = r * (h + gutter), c * (w + gutter)
        grid[top:top + h, left:left + w] = panels[idx]
    grid = np.clip(grid, 0.0, 1.0)
    if path is not None:
        save_png(grid, path)
    return ImageGridResult(grid=grid, rows=rows, cols=cols, panels=panels)


def save_png(image: np.ndarray, path: str) -> None:
    """Write a [0,1] float image as an 8-bit lossless PNG."""
    from PIL import Image
    arr = (np.clip(np.asarray(image), 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _decode_full(model: SceneModel, posteriors: PosteriorParams,
                 poses: Optional[torch.Tensor]):
    with torch.no_grad():
        _, mixture, recon, seg, weights = model.reconstruct(
            posteriors=posteriors, poses=poses)
    return (recon[0].numpy(), seg[0].numpy(), weights[0].numpy(), mixture)


@dataclass
class TraversalResult:
    offsets: list
    frames: np.ndarray      # (num_offsets, T, H, W, 3) decoded images
    weights: np.ndarray     # (num_offsets, K, T, H, W)
    grid: ImageGridResult   # rows = offsets, cols = frames


def traverse(model: SceneModel, sequence: VideoSequence, edit: LatentEdit,
             path: Optional[str] = None) -> TraversalResult:
    """Decode the sequence with one latent dimension shifted by each offset.

    Offsets are in posterior-scale units: the applied shift is
    offset * exp(log_scale[slot, dim]).
    """
    cfg = model.config
    edit.validate(cfg.num_slots, cfg.frames, cfg.latent_dim)
    if edit.scope == "frame" and cfg.vs_mode:
        raise AnalysisError("vs_mode model has no frame latents to traverse")
    posteriors, _, poses = encode_means(model, sequence)
    decoded, weight_maps, panels = [], [], []
    for offset in edit.offsets:
        om = posteriors.object_mean.clone()
        fm = posteriors.frame_mean.clone() if posteriors.frame_mean is not None else None
        if edit.scope == "object":
            scale = torch.exp(posteriors.object_log_scale[0, edit.slot, edit.dim])
            om[0, edit.slot, edit.dim] += float(offset) * scale
        else:
            scale = torch.exp(posteriors.frame_log_scale[0, edit.slot, edit.dim])
            fm[0, edit.slot, edit.dim] += float(offset) * scale
        edited = PosteriorParams(om, posteriors.object_log_scale, fm,
                                 posteriors.frame_log_scale)
        recon, _, weights, _ = _decode_full(model, edited, poses)
        decoded.append(recon)
        weight_maps.append(weights)
        panels.extend(recon)
    grid = emit_grid(panels, rows=len(edit.offsets), cols=cfg.frames, path=path)
    return TraversalResult(offsets=list(edit.offsets), frames=np.stack(decoded),
                           weights=np.stack(weight_maps), grid=grid)


@dataclass
class CrossoverResult:
    reconstruction_a: np.ndarray    # (T, H, W, 3) plain reconstruction of A
    crossover: np.ndarray           # (T, H, W, 3) o_A with f_B
    crossover_weights: np.ndarray   # (K, T, H, W)
    grid: ImageGridResult           # rows: recon A, crossover, crossover seg


def crossover(model: SceneModel, seq_a: VideoSequence, seq_b: VideoSequence,
              path: Optional[str] = None) -> CrossoverResult:
    """Decode object latents of A under the frame latents (or poses) of B."""
    cfg = model.config
    post_a, _, poses_a = encode_means(model, seq_a)
    post_b, _, poses_b = encode_means(model, seq_b)
    recon_a, _, _, _ = _decode_full(model, post_a, poses_a)
    if cfg.vs_mode:
        mixed = PosteriorParams(post_a.object_mean, post_a.object_log_scale)
        cross, _, weights, _ = _decode_full(model, mixed, poses_b)
    else:
        mixed = PosteriorParams(post_a.object_mean, post_a.object_log_scale,
                                post_b.frame_mean, post_b.frame_log_scale)
        cross, _, weights, _ = _decode_full(model, mixed, None)
    seg_row = [segmentation_image(weights[:, t]) for t in range(cfg.frames)]
    panels = list(recon_a) + list(cross) + seg_row
    grid = emit_grid(panels, rows=3, cols=cfg.frames, path=path)
    return CrossoverResult(reconstruction_a=recon_a, crossover=cross,
                           crossover_weights=weights, grid=grid)


@dataclass
class ComposeResult:
    reconstruction: np.ndarray     # (T, H, W, 3)
    segmentation: np.ndarray       # (T, H, W) argmax components
    weights: np.ndarray            # (K, T, H, W)
    slot_sources: list             # per final slot: (selection index, source slot) or None
    grid: ImageGridResult


def compose_scene(model: SceneModel, selections: list,
                  frame_source: VideoSequence, seed: int = 0,
                  path: Optional[str] = None) -> ComposeResult:
    """Assemble object latents from several sequences and decode them together.

    ``selections`` is a list of (sequence, slot_indices). Unfilled slots are
    padded with near-zero draws (mean 0, scale 1e-3) so they decode as empty.
    Frame latents (or poses) come from ``frame_source``.
    """
    cfg = model.config
    total = sum(len(slots) for _, slots in selections)
    if total > cfg.num_slots:
        raise AnalysisError(f"{total} selected slots exceed capacity K={cfg.num_slots}")
    dtype = next(model.parameters()).dtype
    om = torch.empty((1, cfg.num_slots, cfg.latent_dim), dtype=dtype)
    ols = torch.full((1, cfg.num_slots, cfg.latent_dim), -8.0, dtype=dtype)
    generator = torch.Generator().manual_seed(seed)
    om.normal_(generator=generator)
    om *= 1e-3   # padding slots: near-zero prior draws
    sources = [None] * cfg.num_slots
    cursor = 0
    for sel_idx, (seq, slots) in enumerate(selections):
        post, _, _ = encode_means(model, seq)
        for s in slots:
            if not 0 <= s < cfg.num_slots:
                raise AnalysisError(f"selection slot {s} outside [0, {cfg.num_slots})")
            om[0, cursor] = post.object_mean[0, s]
            ols[0, cursor] = post.object_log_scale[0, s]
            sources[cursor] = (sel_idx, s)
            cursor += 1
    post_f, _, poses_f = encode_means(model, frame_source)
    if cfg.vs_mode:
        assembled = PosteriorParams(om, ols)
    else:
        assembled = PosteriorParams(om, ols, post_f.frame_mean, post_f.frame_log_scale)
    recon, seg, weights, _ = _decode_full(model, assembled, poses_f)
    seg_row = [segmentation_image(weights[:, t]) for t in range(cfg.frames)]
    grid = emit_grid(list(recon) + seg_row, rows=2, cols=cfg.frames, path=path)
    return ComposeResult(reconstruction=recon, segmentation=seg, weights=weights,
                         slot_sources=sources, grid=grid)


@dataclass
class ViewSweepResult:
    poses: np.ndarray             # (P, 2) queried camera offsets
    frames: np.ndarray            # (P, H, W, 3) decodes at each pose
    weights: np.ndarray           # (P, K, H, W)
    grid: ImageGridResult


def view_sweep_vs(model: SceneModel, context: VideoSequence, pose_list,
                  path: Optional[str] = None) -> ViewSweepResult:
    """Encode a context sequence with its true poses, then decode one image
    per queried pose (timestep fixed to 0)."""
    cfg = model.config
    if not cfg.vs_mode:
        raise AnalysisError("view sweep requires a model trained in vs mode")
    poses = np.asarray(pose_list, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[1] != cfg.pose_dim or not np.isfinite(poses).all():
        raise AnalysisError(f"pose list must be finite with shape (P, {cfg.pose_dim})")
    posteriors, _, _ = encode_means(model, context)
    dtype = next(model.parameters()).dtype
    frame_indices = torch.zeros(1, dtype=torch.long)
    rows = torch.arange(cfg.height)
    cols = torch.arange(cfg.width)
    images, weight_maps = [], []
    with torch.no_grad():
        for pose in poses:
            pose_t = torch.zeros((1, cfg.frames, cfg.pose_dim), dtype=dtype)
            pose_t[0, 0] = torch.as_tensor(pose, dtype=dtype)
            mixture = model.decode(posteriors, frame_indices, rows, cols,
                                   mean_only=True, poses=pose_t)
            from .decoder import compose_reconstruction
            recon, _, _ = compose_reconstruction(mixture)
            images.append(recon[0, 0].reshape(cfg.height, cfg.width, 3).numpy())
            weight_maps.append(mixture.weights[0, :, 0].reshape(
                cfg.num_slots, cfg.height, cfg.width).numpy())
    frames = np.stack(images)
    weights = np.stack(weight_maps)
    seg_row = [segmentation_image(w) for w in weights]
    grid = emit_grid(list(frames) + seg_row, rows=2, cols=len(poses), path=path)
    return ViewSweepResult(poses=poses, frames=frames, weights=weights, grid=grid)


def mask_centroid(weight_map: np.ndarray):
    """Weight-weighted centroid of one component's mask, as (x, y) pixels.

    Returns (nan, nan) when the component has (near) zero total weight.
    """
    w = np.asarray(weight_map, dtype=np.float64)
    total = w.sum()
    if total < 1e-9:
        return float("nan"), float("nan")
    ys, xs = np.mgrid[0:w.shape[0], 0:w.shape[1]]
    return float((xs * w).sum() / total), float((ys * w).sum() / total)
