"""Training loop, checkpointing, resume, and the finite-difference gradient
checker.

Determinism contract: a single ``torch.Generator`` seeded from the config
drives parameter init, batch sampling, decode-target choice, and latent
noise, in a fixed order per step. Checkpoints store that generator's state,
so save/resume continues the exact loss trajectory.
"""

import json
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .configs import ModelConfig, TrainConfig, train_config_from_dict, train_config_to_dict
from .container import ContainerError, read_container, write_container
from .encoder import LatentSamples
from .model import SceneModel, cameras_to_tensor, frames_to_tensor, init_parameters
from .objective import choose_decode_targets, negative_elbo
from .seqio import read_dataset

CKPT_MAGIC = b"SFCKPT\x00\x00"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    """Startup or runtime failure of the training loop."""


class CheckpointError(ContainerError):
    """Checkpoint contents incompatible with the requested restore."""


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps_run: int
    final_parts: Optional[dict]


def _dtype_for(config: TrainConfig) -> torch.dtype:
    return torch.float64 if config.precision == "float64" else torch.float32


def save_checkpoint(path: str, model: SceneModel, optimizer: Optional[torch.optim.Adam],
                    generator: torch.Generator, step: int, config: TrainConfig) -> None:
    """Write a versioned binary checkpoint (documented in the README)."""
    names = []
    arrays = []
    for name, tensor in model.state_dict().items():
        names.append(name)
        arrays.append(tensor.detach().cpu().numpy())
    adam_steps = []
    has_opt = optimizer is not None
    if has_opt:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        for p in params:
            state = optimizer.state.get(p, {})
            adam_steps.append(float(state["step"]) if "step" in state else 0.0)
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    arrays.append(state[key].detach().cpu().numpy())
                else:
                    arrays.append(np.zeros(p.shape, dtype=arrays[0].dtype))
    rng = generator.get_state().numpy().astype(np.uint8)
    arrays.append(rng)
    header = {
        "kind": "checkpoint",
        "step": step,
        "config": train_config_to_dict(config),
        "param_names": names,
        "has_optimizer_state": has_opt,
        "adam_steps": adam_steps,
    }
    write_container(path, CKPT_MAGIC, CKPT_VERSION, header, arrays)


@dataclass
class CheckpointData:
    step: int
    config: TrainConfig
    params: dict                      # name -> torch.Tensor
    adam: Optional[list]              # per-param (step, exp_avg, exp_avg_sq)
    rng_state: torch.Tensor           # uint8 generator state


def load_checkpoint(path: str) -> CheckpointData:
    _, header, arrays = read_container(path, CKPT_MAGIC, (CKPT_VERSION,))
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    config = train_config_from_dict(header["config"])
    names = header["param_names"]
    params = {name: torch.from_numpy(arrays[i].copy()) for i, name in enumerate(names)}
    cursor = len(names)
    adam = None
    if header["has_optimizer_state"]:
        adam = []
        for step_count in header["adam_steps"]:
            exp_avg = torch.from_numpy(arrays[cursor].copy())
            exp_avg_sq = torch.from_numpy(arrays[cursor + 1].copy())
            cursor += 2
            adam.append((step_count, exp_avg, exp_avg_sq))
    rng_state = torch.from_numpy(arrays[cursor].copy())
    return CheckpointData(step=header["step"], config=config, params=params,
                          adam=adam, rng_state=rng_state)


def restore_model(model: SceneModel, data: CheckpointData) -> None:
    """Load checkpoint parameters into a model, naming any mismatched tensor."""
    state = model.state_dict()
    for name, tensor in state.items():
        if name not in data.params:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        saved = data.params[name]
        if tuple(saved.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"tensor '{name}' has shape {tuple(saved.shape)} in the checkpoint "
                f"but {tuple(tensor.shape)} in the model")
    extra = set(data.params) - set(state)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensors {sorted(extra)}")
    dtype = next(iter(state.values())).dtype
    model.load_state_dict({k: v.to(dtype) for k, v in data.params.items()})


def restore_optimizer(optimizer: torch.optim.Adam, data: CheckpointData,
                      dtype: torch.dtype) -> None:
    if data.adam is None:
        return
    params = [p for group in optimizer.param_groups for p in group["params"]]
    if len(params) != len(data.adam):
        raise CheckpointError(
            f"checkpoint has optimizer state for {len(data.adam)} parameters, "
            f"model has {len(params)}")
    for p, (step_count, exp_avg, exp_avg_sq) in zip(params, data.adam):
        optimizer.state[p] = {
            "step": torch.tensor(step_count),
            "exp_avg": exp_avg.to(dtype),
            "exp_avg_sq": exp_avg_sq.to(dtype),
        }


def load_model(path: str):
    """Rebuild a model from a checkpoint. Returns (model, train_config, step)."""
    data = load_checkpoint(path)
    model = SceneModel(data.config.model)
    if data.config.precision == "float64":
        model = model.double()
    restore_model(model, data)
    model.eval()
    return model, data.config, data.step


def _grad_norms(model: SceneModel) -> dict:
    norms = {}
    for name, p in model.named_parameters():
        if p.grad is not None:
            norms[name] = float(p.grad.norm())
    return norms


def train(config: TrainConfig, resume_from: Optional[str] = None,
          progress: bool = False) -> TrainResult:
    """Run the optimization loop; returns paths to the final checkpoint and log.

    Per step: sample a batch, encode, choose decode targets, sample latents
    (one independent draw per decode position), decode, evaluate the loss,
    and apply one Adam update. The annealing schedule is evaluated at the
    number of completed steps, so the first update uses beta_o(0).
    """
    config.validate()
    if not config.data_path:
        raise TrainingError("config.data_path is empty")
    sequences = read_dataset(config.data_path)
    dtype = _dtype_for(config)
    frames = frames_to_tensor(sequences, dtype)
    cfg_m = config.model
    if frames.shape[1:] != (cfg_m.frames, 3, cfg_m.height, cfg_m.width):
        raise TrainingError(
            f"dataset shape {tuple(frames.shape[1:])} does not match the model "
            f"config ({cfg_m.frames}, 3, {cfg_m.height}, {cfg_m.width})")
    poses = None
    if cfg_m.vs_mode:
        poses = cameras_to_tensor(sequences, dtype)

    model = SceneModel(cfg_m)
    if dtype == torch.float64:
        model = model.double()
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    init_parameters(model, generator)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.optimizer.learning_rate,
        betas=(config.optimizer.beta1, config.optimizer.beta2),
        eps=config.optimizer.epsilon)

    start_step = 0
    if resume_from is not None:
        data = load_checkpoint(resume_from)
        restore_model(model, data)  # raises naming the first mismatched tensor
        if train_config_to_dict(data.config)["model"] != train_config_to_dict(config)["model"]:
            raise CheckpointError("checkpoint model config differs from the requested one")
        restore_optimizer(optimizer, data, dtype)
        generator.set_state(data.rng_state.clone())
        start_step = data.step

    out_dir = config.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    log_mode = "a" if resume_from is not None else "w"
    num_scenes = frames.shape[0]
    parts = None
    final_path = os.path.join(out_dir, "checkpoint_final.bin")

    with open(log_path, log_mode) as log:
        for step in range(start_step + 1, config.steps + 1):
            t0 = time.perf_counter()
            idx = torch.randint(num_scenes, (config.batch_size,), generator=generator)
            batch = frames[idx]
            batch_poses = poses[idx] if poses is not None else None
            spec = choose_decode_targets(cfg_m.frames, cfg_m.height, cfg_m.width,
                                         config.decode, generator)
            result = model(batch, spec.frame_indices, spec.rows, spec.cols,
                           generator=generator, poses=batch_poses)
            total, parts = negative_elbo(result.mixture, result.targets,
                                         result.posteriors, config.loss,
                                         step=step - 1)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at step {step}: parts={parts}, "
                    f"grad_norms={_grad_norms(model)}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            record = {"step": step, **parts, "wall": time.perf_counter() - t0}
            log.write(json.dumps(record) + "\n")
            periodic = config.checkpoint_every > 0 and step % config.checkpoint_every == 0
            if periodic or step == config.steps:
                log.flush()
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{step:07d}.bin"),
                                model, optimizer, generator, step, config)
            if config.eval_every and step % config.eval_every == 0:
                eval_parts = _eval_loss(model, frames, poses, config, step)
                log.write(json.dumps({"step": step, **eval_parts}) + "\n")
                log.flush()
            if progress and (step % 100 == 0 or step == config.steps):
                print(f"step {step}/{config.steps} total={parts['total']:.4f} "
                      f"nll={parts['nll']:.4f}", flush=True)

    save_checkpoint(final_path, model, optimizer, generator,
                    max(config.steps, start_step), config)
    return TrainResult(checkpoint_path=final_path, log_path=log_path,
                       steps_run=max(config.steps - start_step, 0), final_parts=parts)


def _eval_loss(model: SceneModel, frames: torch.Tensor,
               poses: Optional[torch.Tensor], config: TrainConfig, step: int) -> dict:
    """Loss on a fixed probe batch with a step-keyed private generator."""
    n = min(config.eval_scenes, frames.shape[0])
    gen = torch.Generator()
    gen.manual_seed(config.seed * 1000003 + step)
    spec = choose_decode_targets(config.model.frames, config.model.height,
                                 config.model.width, config.decode, gen)
    with torch.no_grad():
        result = model(frames[:n], spec.frame_indices, spec.rows, spec.cols,
                       generator=gen, poses=poses[:n] if poses is not None else None)
        _, parts = negative_elbo(result.mixture, result.targets,
                                 result.posteriors, config.loss, step=step)
    return {f"eval_{k}": v for k, v in parts.items()}


def tiny_gradcheck_config() -> ModelConfig:
    """A <6k-parameter configuration for finite-difference verification."""
    return ModelConfig(
        num_slots=4, latent_dim=4, frames=2, height=8, width=8,
        cnn_channels=8, cnn_layers=1, tr_layers=1, tr_heads=2, tr_value_size=8,
        tr_mlp_hidden=16, agg_mlp_hidden=16, decoder_layers=2, decoder_channels=16)


def gradcheck(model_config: Optional[ModelConfig] = None, seed: int = 0,
              rel_tol: float = 1e-4, max_coords_per_param: Optional[int] = None):
    """Compare analytic gradients with central finite differences at float64.

    The loss is made a pure function of the parameters by freezing the input,
    the decode targets, and the latent noise. Relative error uses the floor
    max(|analytic|, |numeric|, 1e-3), so near-zero gradient pairs are compared
    absolutely at 1e-7 resolution.

    Returns (report, passed): report maps parameter name ->
    (max_rel_err, coords_checked).
    """
    from .configs import LossConfig
    cfg = model_config or tiny_gradcheck_config()
    torch.manual_seed(seed)
    model = SceneModel(cfg).double()
    generator = torch.Generator()
    generator.manual_seed(seed)
    init_parameters(model, generator)

    frames = torch.rand((1, cfg.frames, 3, cfg.height, cfg.width),
                        generator=generator, dtype=torch.float64)
    poses = None
    if cfg.vs_mode:
        poses = torch.rand((1, cfg.frames, cfg.pose_dim), generator=generator,
                           dtype=torch.float64) * 0.5 - 0.25
    t_d = max(cfg.frames // 2, 1)
    frame_indices = torch.arange(t_d)
    rows = torch.arange(0, cfg.height, 2)
    cols = torch.arange(0, cfg.width, 2)
    num_pixels = len(rows) * len(cols)
    eps_o = torch.randn((1, cfg.num_slots, t_d, num_pixels, cfg.latent_dim),
                        generator=generator, dtype=torch.float64)
    eps_f = torch.randn((1, cfg.num_slots, t_d, num_pixels, cfg.latent_dim),
                        generator=generator, dtype=torch.float64)
    sub = frames[:, frame_indices][:, :, :, rows][:, :, :, :, cols]
    targets = sub.permute(0, 1, 3, 4, 2).reshape(1, t_d, -1, 3)
    loss_config = LossConfig(beta_o=0.01, beta_f=0.01)

    def loss_fn() -> torch.Tensor:
        posteriors = model.encode(frames, poses if cfg.vs_mode else None)
        o = (posteriors.object_mean[:, :, None, None, :]
             + torch.exp(posteriors.object_log_scale[:, :, None, None, :]) * eps_o)
        if cfg.vs_mode:
            latents = LatentSamples(objects=o, frames=None)
        else:
            fm = posteriors.frame_mean[:, frame_indices][:, None, :, None, :]
            fs = posteriors.frame_log_scale[:, frame_indices][:, None, :, None, :]
            latents = LatentSamples(objects=o, frames=fm + torch.exp(fs) * eps_f)
        mixture = model.decode(posteriors, frame_indices, rows, cols,
                               latents=latents, poses=poses)
        total, _ = negative_elbo(mixture, targets, posteriors, loss_config)
        return total

    loss = loss_fn()
    model.zero_grad()
    loss.backward()

    report = {}
    passed = True
    for name, param in model.named_parameters():
        grad = param.grad.reshape(-1) if param.grad is not None else None
        flat = param.data.reshape(-1)
        n = flat.numel()
        coords = range(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            stride = n / max_coords_per_param
            coords = [int(i * stride) for i in range(max_coords_per_param)]
        worst = 0.0
        checked = 0
        for idx in coords:
            old = float(flat[idx])
            h = 1e-6 * max(1.0, abs(old))
            with torch.no_grad():
                flat[idx] = old + h
            up = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = old - h
            down = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = old
            numeric = (up - down) / (2.0 * h)
            analytic = float(grad[idx]) if grad is not None else 0.0
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, rel)
            checked += 1
        report[name] = (worst, checked)
        if worst >= rel_tol:
            passed = False
    return report, passed
