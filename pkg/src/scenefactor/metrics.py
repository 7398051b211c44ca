"""Quantitative evaluation: adjusted Rand index over foreground pixels
(static and video protocols), Hungarian alignment of predicted components to
ground-truth objects, and probe regressions with held-out R^2."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .model import SceneModel, cameras_to_tensor, frames_to_tensor
from .synth import SceneSpec


def ari(true_labels, pred_labels) -> float:
    """Adjusted Rand index between two labelings of the same elements.

    Computed from the contingency table with exact integer pair counts:
    (Index - ExpectedIndex) / (MaxIndex - ExpectedIndex). Identical
    partitions (up to relabeling) give 1.0; the degenerate case where the
    denominator vanishes (both partitions trivial) returns 1.0 by convention.
    """
    true_labels = np.asarray(true_labels).reshape(-1)
    pred_labels = np.asarray(pred_labels).reshape(-1)
    if true_labels.size == 0:
        raise ValueError("ari: empty labelings")
    if true_labels.shape != pred_labels.shape:
        raise ValueError("ari: label arrays differ in length")
    n = true_labels.size
    _, t_inv = np.unique(true_labels, return_inverse=True)
    _, p_inv = np.unique(pred_labels, return_inverse=True)
    n_true = int(t_inv.max()) + 1
    n_pred = int(p_inv.max()) + 1
    contingency = np.bincount(t_inv * n_pred + p_inv,
                              minlength=n_true * n_pred).reshape(n_true, n_pred)
    row = contingency.sum(axis=1)
    col = contingency.sum(axis=0)

    def pairs(counts) -> int:
        total = 0
        for c in counts.reshape(-1).tolist():
            total += c * (c - 1) // 2
        return total

    index = pairs(contingency)
    a = pairs(row)
    b = pairs(col)
    total_pairs = n * (n - 1) // 2
    expected = a * b / total_pairs
    maximum = (a + b) / 2
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


@dataclass
class AriResult:
    score: float                 # mean over evaluated units
    per_frame: Optional[list]    # static mode: one score per evaluated frame
    skipped_frames: int          # frames with no foreground (static mode)


def ari_f(true_masks: np.ndarray, pred_labels: np.ndarray, mode: str) -> AriResult:
    """Foreground ARI for one sequence.

    ``true_masks`` (T, H, W) ground-truth instance ids with 0 = background;
    ``pred_labels`` (T, H, W) predicted component indices. Both labelings are
    restricted to ground-truth foreground pixels. ``static`` scores each frame
    separately (all-background frames are skipped and counted); ``video``
    flattens all frames into one labeling, so a true object's trajectory is a
    single class and unstable component assignments are penalized.
    """
    true_masks = np.asarray(true_masks)
    pred_labels = np.asarray(pred_labels)
    if true_masks.shape != pred_labels.shape:
        raise ValueError(f"shape mismatch {true_masks.shape} vs {pred_labels.shape}")
    if mode == "static":
        scores = []
        skipped = 0
        for t in range(true_masks.shape[0]):
            fg = true_masks[t] != 0
            if not fg.any():
                skipped += 1
                continue
            scores.append(ari(true_masks[t][fg], pred_labels[t][fg]))
        if not scores:
            raise ValueError("ari_f static: every frame is background-only")
        return AriResult(score=float(np.mean(scores)), per_frame=scores,
                         skipped_frames=skipped)
    if mode == "video":
        fg = true_masks != 0
        if not fg.any():
            raise ValueError("ari_f video: no foreground pixels")
        return AriResult(score=ari(true_masks[fg], pred_labels[fg]),
                         per_frame=None, skipped_frames=0)
    raise ValueError(f"unknown ari_f mode '{mode}'")


def ari_f_dataset(sequences: list, predictions: list, mode: str) -> dict:
    """ARI-F over many scenes: per-scene scores, their mean, and the pooled
    score over all scenes' foreground pixels concatenated."""
    per_scene = []
    all_true = []
    all_pred = []
    offset = 0
    for seq, pred in zip(sequences, predictions):
        res = ari_f(seq.masks, pred, mode)
        per_scene.append(res.score)
        fg = seq.masks != 0
        # Offset ids so objects/components from different scenes stay distinct.
        all_true.append(seq.masks[fg].astype(np.int64) + offset)
        all_pred.append(pred[fg].astype(np.int64) + offset)
        offset += 1 + int(seq.masks.max()) + int(pred.max())
    pooled = ari(np.concatenate(all_true), np.concatenate(all_pred))
    return {"mode": mode, "per_scene": per_scene,
            "mean": float(np.mean(per_scene)), "pooled": float(pooled),
            "num_scenes": len(per_scene)}


def hungarian_match(cost: np.ndarray):
    """Minimum-cost one-to-one assignment (rows to columns) over the smaller
    dimension of a rectangular cost matrix. Returns (pairs, total_cost)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    from scipy.optimize import linear_sum_assignment
    rows, cols = linear_sum_assignment(cost)
    total = 0.0
    for r, c in zip(rows, cols):
        total += cost[r, c]
    return list(zip(rows.tolist(), cols.tolist())), total


def mask_mse_cost(weights: np.ndarray, true_masks: np.ndarray,
                  true_ids: Optional[list] = None) -> np.ndarray:
    """Cost matrix for matching predicted components to true objects.

    ``weights`` (K, T, H, W) soft mixture weights; ``true_masks`` (T, H, W)
    instance ids. Entry (k, j) is the mean squared difference between
    component k's weight map and object j's indicator map.
    """
    weights = np.asarray(weights, dtype=np.float64)
    true_masks = np.asarray(true_masks)
    if weights.shape[1:] != true_masks.shape:
        raise ValueError(f"shape mismatch {weights.shape[1:]} vs {true_masks.shape}")
    if true_ids is None:
        true_ids = [int(i) for i in np.unique(true_masks) if i != 0]
    k = weights.shape[0]
    cost = np.empty((k, len(true_ids)))
    flat_w = weights.reshape(k, -1)
    for j, tid in enumerate(true_ids):
        indicator = (true_masks == tid).reshape(-1).astype(np.float64)
        cost[:, j] = ((flat_w - indicator[None, :]) ** 2).mean(axis=1)
    return cost


def r2_score(predictions: np.ndarray, targets: np.ndarray) -> float:
    """1 - SS_res/SS_tot per target dimension, averaged over dimensions."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets differ in shape")
    if targets.ndim == 1:
        predictions = predictions[:, None]
        targets = targets[:, None]
    if targets.shape[0] < 2:
        raise ValueError("r2_score needs at least 2 samples")
    ss_res = ((targets - predictions) ** 2).sum(axis=0)
    ss_tot = ((targets - targets.mean(axis=0)) ** 2).sum(axis=0)
    if np.any(ss_tot == 0):
        raise ValueError("r2_score: a target dimension has zero variance")
    return float((1.0 - ss_res / ss_tot).mean())


# ---------------------------------------------------------------------------
# Probes


@dataclass
class ProbeResult:
    r2_train: float
    r2_eval: float
    regressor: str


def fit_linear_probe(x_train, y_train):
    """Ordinary least squares with a bias column; returns a predict function."""
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    design = np.concatenate([x_train, np.ones((len(x_train), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, y_train, rcond=None)

    def predict(x):
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([x, np.ones((len(x), 1))], axis=1) @ coef

    return predict


def fit_mlp_probe(x_train, y_train, seed: int = 0, hidden: int = 128,
                  iterations: int = 2000, learning_rate: float = 1e-3):
    """Single-hidden-layer regressor, full-batch Adam, fixed budget."""
    x = torch.as_tensor(np.asarray(x_train, dtype=np.float64))
    y = torch.as_tensor(np.asarray(y_train, dtype=np.float64))
    if y.ndim == 1:
        y = y[:, None]
    x_mean, x_std = x.mean(dim=0), x.std(dim=0).clamp_min(1e-8)
    xn = (x - x_mean) / x_std
    generator = torch.Generator().manual_seed(seed)
    net = torch.nn.Sequential(
        torch.nn.Linear(x.shape[1], hidden), torch.nn.ReLU(),
        torch.nn.Linear(hidden, y.shape[1])).double()
    for p in net.parameters():
        if p.ndim == 2:
            bound = 1.0 / math.sqrt(p.shape[1])
        else:
            bound = 1.0 / math.sqrt(net[0].in_features)
        p.data.uniform_(-bound, bound, generator=generator)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    for _ in range(iterations):
        opt.zero_grad(set_to_none=True)
        loss = ((net(xn) - y) ** 2).mean()
        loss.backward()
        opt.step()
    net.eval()

    def predict(x_new):
        x_new = torch.as_tensor(np.asarray(x_new, dtype=np.float64))
        with torch.no_grad():
            return ((net((x_new - x_mean) / x_std))).numpy()

    return predict


def run_probe(x_train, y_train, x_eval, y_eval, regressor: str = "linear",
              seed: int = 0) -> ProbeResult:
    y_train = np.asarray(y_train, dtype=np.float64)
    if float(np.ptp(y_train, axis=0).min()) == 0.0:
        raise ValueError("probe targets are degenerate (zero variance)")
    if regressor == "linear":
        predict = fit_linear_probe(x_train, y_train)
    elif regressor == "mlp":
        predict = fit_mlp_probe(x_train, y_train, seed=seed)
    else:
        raise ValueError(f"unknown regressor '{regressor}'")
    return ProbeResult(
        r2_train=r2_score(np.asarray(predict(x_train)).reshape(np.shape(y_train)), y_train),
        r2_eval=r2_score(np.asarray(predict(x_eval)).reshape(np.shape(y_eval)),
                         np.asarray(y_eval, dtype=np.float64)),
        regressor=regressor)


# ---------------------------------------------------------------------------
# Latent extraction and probe dataset assembly


@dataclass
class SceneLatents:
    """Frozen posterior means and ground truth for one dataset."""

    object_means: np.ndarray     # (N, K, D)
    frame_means: Optional[np.ndarray]  # (N, T, D); None for vs_mode models
    cameras: np.ndarray          # (N, T, 2)
    weights: np.ndarray          # (N, K, T, H, W) mixture weights
    segmentations: np.ndarray    # (N, T, H, W) argmax components
    true_masks: np.ndarray       # (N, T, H, W) ground-truth instance ids
    sprite_positions: np.ndarray  # (N, M, T, 2) allocentric centers
    moving: np.ndarray           # (N, M) ground-truth movement flags


def collect_latents(model: SceneModel, sequences: list,
                    batch_size: int = 16) -> SceneLatents:
    """Run the frozen model over a dataset; gather means, weights, and truth."""
    dtype = next(model.parameters()).dtype
    frames = frames_to_tensor(sequences, dtype)
    cameras = cameras_to_tensor(sequences, dtype)
    obj, frm, wts, segs = [], [], [], []
    with torch.no_grad():
        for lo in range(0, len(sequences), batch_size):
            hi = min(lo + batch_size, len(sequences))
            poses = cameras[lo:hi] if model.config.vs_mode else None
            posteriors, _, _, seg, weights = model.reconstruct(frames[lo:hi], poses=poses)
            obj.append(posteriors.object_mean.numpy())
            if posteriors.frame_mean is not None:
                frm.append(posteriors.frame_mean.numpy())
            wts.append(weights.numpy())
            segs.append(seg.numpy())
    specs = [SceneSpec.from_dict(seq.meta) for seq in sequences]
    max_sprites = max(spec.num_sprites for spec in specs)
    t = model.config.frames
    positions = np.full((len(specs), max_sprites, t, 2), np.nan)
    moving = np.zeros((len(specs), max_sprites), dtype=bool)
    for i, spec in enumerate(specs):
        pos = spec.sprite_positions()
        positions[i, :len(pos)] = pos
        moving[i, :len(pos)] = spec.moving_flags()
    if any(seq.masks is None for seq in sequences):
        raise ValueError("sequence without ground-truth masks")
    return SceneLatents(
        object_means=np.concatenate(obj),
        frame_means=np.concatenate(frm) if frm else None,
        cameras=np.stack([np.asarray(seq.camera, dtype=np.float64) for seq in sequences]),
        weights=np.concatenate(wts),
        segmentations=np.concatenate(segs),
        true_masks=np.stack([seq.masks for seq in sequences]),
        sprite_positions=positions,
        moving=moving)


def camera_probe_data(latents: SceneLatents, input_kind: str):
    """(X, y) for predicting the camera offset at each (scene, t).

    ``frame``: X = frame latent mean at t. ``object``: X = all K object means
    concatenated (constant across t). ``object+t``: the same plus t/T.
    """
    n, t, _ = latents.cameras.shape
    y = latents.cameras.reshape(n * t, 2)
    if input_kind == "frame":
        if latents.frame_means is None:
            raise ValueError("model has no frame latents")
        x = latents.frame_means.reshape(n * t, -1)
    elif input_kind in ("object", "object+t"):
        obj = latents.object_means.reshape(n, -1)
        x = np.repeat(obj, t, axis=0)
        if input_kind == "object+t":
            ts = np.tile(np.arange(t) / t, n)[:, None]
            x = np.concatenate([x, ts], axis=1)
    else:
        raise ValueError(f"unknown camera probe input '{input_kind}'")
    return x, y


def matched_moving_sprites(latents: SceneLatents):
    """Per scene, Hungarian-match components to sprites on mask MSE and pick
    the moving sprites. Yields (scene, slot k, sprite j) triples."""
    triples = []
    for i in range(latents.weights.shape[0]):
        valid = [j for j in range(latents.moving.shape[1])
                 if not np.isnan(latents.sprite_positions[i, j]).any()]
        if not valid:
            continue
        # Component weights vs sprite indicator masks (ids are 1-based).
        cost = mask_mse_cost(latents.weights[i], latents.true_masks[i],
                             true_ids=[j + 1 for j in valid])
        pairs, _ = hungarian_match(cost)
        for k, col in pairs:
            j = valid[col]
            if latents.moving[i, j]:
                triples.append((i, k, j))
    return triples


def object_probe_data(latents: SceneLatents, input_kind: str):
    """(X, y) for predicting a matched moving sprite's allocentric position.

    One sample per (scene, matched moving sprite, t). ``object+t`` feeds
    (o_k, t/T); ``object+frame+t`` adds f_t; ``complement`` feeds the
    concatenation of all object latents except o_k, plus t/T.
    """
    triples = matched_moving_sprites(latents)
    if not triples:
        raise ValueError("no moving sprites matched")
    n, k_slots, d = latents.object_means.shape
    t = latents.cameras.shape[1]
    xs, ys = [], []
    for (i, k, j) in triples:
        for step in range(t):
            t_norm = step / t
            if input_kind == "object+t":
                x = np.concatenate([latents.object_means[i, k], [t_norm]])
            elif input_kind == "object+frame+t":
                if latents.frame_means is None:
                    raise ValueError("model has no frame latents")
                x = np.concatenate([latents.object_means[i, k],
                                    latents.frame_means[i, step], [t_norm]])
            elif input_kind == "complement":
                rest = np.delete(latents.object_means[i], k, axis=0).reshape(-1)
                x = np.concatenate([rest, [t_norm]])
            else:
                raise ValueError(f"unknown object probe input '{input_kind}'")
            xs.append(x)
            ys.append(latents.sprite_positions[i, j, step])
    return np.stack(xs), np.stack(ys)
