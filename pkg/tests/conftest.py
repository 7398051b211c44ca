"""Session fixtures for the acceptance gate (criteria 7-11).

The pinned recipe below is the "first passing run" that established the
regression gates: the desk model configuration trained on 500 synthetic
scenes (2 static sprites + 1 moving sprite + camera pan), three seeds.
Training all three seeds takes roughly an hour on one CPU core; set
SCENEFACTOR_TEST_CACHE to a directory to reuse datasets, checkpoints, and
scores across pytest invocations (the cache key is a hash of RECIPE, so a
recipe change invalidates it).
"""

import hashlib
import json
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pytest
import torch

from scenefactor.configs import (DecodeConfig, LossConfig, ModelConfig,
                                 OptimizerConfig, TrainConfig)
from scenefactor.metrics import (SceneLatents, ari_f_dataset,
                                 camera_probe_data, collect_latents,
                                 object_probe_data)
from scenefactor.seqio import read_dataset
from scenefactor.synth import generate_dataset, write_dataset
from scenefactor.training import load_model, train

RECIPE = {
    "data": {"frame_count": 8, "frame_size": 32, "num_sprites": 3,
             "num_moving": 1, "pan_limit": 0.25},
    "train_scenes": 500, "eval_scenes": 50,
    "train_data_seed": 100, "eval_data_seed": 200,
    "seeds": [0, 1, 2],
    "steps": 4000, "batch_size": 8, "learning_rate": 3e-4,
    "beta_o": 1e-2, "beta_o_final": 1e-5, "beta_o_anneal_steps": 3000,
    "beta_f": 1e-4,
}


def desk_model_config() -> ModelConfig:
    return ModelConfig()


def recipe_train_config(seed: int, data_path: str, out_dir: str) -> TrainConfig:
    return TrainConfig(
        model=desk_model_config(),
        loss=LossConfig(beta_o=RECIPE["beta_o"],
                        beta_o_final=RECIPE["beta_o_final"],
                        beta_o_anneal_steps=RECIPE["beta_o_anneal_steps"],
                        beta_f=RECIPE["beta_f"]),
        decode=DecodeConfig(),
        optimizer=OptimizerConfig(learning_rate=RECIPE["learning_rate"]),
        batch_size=RECIPE["batch_size"], steps=RECIPE["steps"], seed=seed,
        checkpoint_every=0, data_path=data_path, out_dir=out_dir)


@dataclass
class AcceptanceRun:
    seed: int
    steps: int
    checkpoint_path: str
    log_path: str
    ari_video: float
    ari_static: float

    def records(self):
        with open(self.log_path) as fh:
            return [json.loads(line) for line in fh.read().strip().splitlines()]

    def loss_at(self, step: int) -> float:
        for rec in self.records():
            if rec["step"] == step:
                return rec["total"]
        raise KeyError(step)

    def loss_window(self, step: int, half_width: int = 10) -> float:
        totals = [rec["total"] for rec in self.records()
                  if abs(rec["step"] - step) <= half_width]
        return float(np.median(totals))

    def load_model(self):
        model, _, _ = load_model(self.checkpoint_path)
        return model


@dataclass
class AcceptanceRuns:
    runs: list                    # sorted by seed
    eval_sequences: list
    eval_data_path: str

    def model_config(self) -> ModelConfig:
        return desk_model_config()

    def median_run(self) -> AcceptanceRun:
        ordered = sorted(self.runs, key=lambda r: r.ari_video)
        return ordered[len(ordered) // 2]


def _workspace_root(tmp_path_factory) -> str:
    """Cache directory keyed by the recipe, or a per-session tmp dir."""
    cache = os.environ.get("SCENEFACTOR_TEST_CACHE")
    if not cache:
        return str(tmp_path_factory.mktemp("acceptance"))
    key = hashlib.sha1(
        json.dumps(RECIPE, sort_keys=True).encode()).hexdigest()[:12]
    root = os.path.join(cache, key)
    os.makedirs(root, exist_ok=True)
    return root


def _ensure_dataset(path: str, num_scenes: int, seed: int) -> None:
    if os.path.exists(path):
        return
    sequences = generate_dataset(num_scenes, seed=seed, **RECIPE["data"])
    write_dataset(sequences, path)


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory) -> AcceptanceRuns:
    root = _workspace_root(tmp_path_factory)
    train_path = os.path.join(root, "train.bin")
    eval_path = os.path.join(root, "eval.bin")
    _ensure_dataset(train_path, RECIPE["train_scenes"], RECIPE["train_data_seed"])
    _ensure_dataset(eval_path, RECIPE["eval_scenes"], RECIPE["eval_data_seed"])
    eval_sequences = read_dataset(eval_path)

    runs = []
    for seed in RECIPE["seeds"]:
        out_dir = os.path.join(root, f"seed{seed}")
        ckpt = os.path.join(out_dir, "checkpoint_final.bin")
        log_path = os.path.join(out_dir, "train_log.jsonl")
        if not os.path.exists(ckpt):
            train(recipe_train_config(seed, train_path, out_dir))
        scores_path = os.path.join(out_dir, "scores.json")
        if os.path.exists(scores_path):
            with open(scores_path) as fh:
                scores = json.load(fh)
        else:
            model, _, _ = load_model(ckpt)
            latents = collect_latents(model, eval_sequences)
            preds = list(latents.segmentations)
            scores = {
                "video": ari_f_dataset(eval_sequences, preds, "video")["mean"],
                "static": ari_f_dataset(eval_sequences, preds, "static")["mean"],
            }
            with open(scores_path, "w") as fh:
                json.dump(scores, fh)
        runs.append(AcceptanceRun(
            seed=seed, steps=RECIPE["steps"], checkpoint_path=ckpt,
            log_path=log_path, ari_video=scores["video"],
            ari_static=scores["static"]))
    return AcceptanceRuns(runs=runs, eval_sequences=eval_sequences,
                          eval_data_path=eval_path)


def _slice_latents(latents: SceneLatents, sl: slice) -> SceneLatents:
    return SceneLatents(
        object_means=latents.object_means[sl],
        frame_means=(None if latents.frame_means is None
                     else latents.frame_means[sl]),
        cameras=latents.cameras[sl],
        weights=latents.weights[sl],
        segmentations=latents.segmentations[sl],
        true_masks=latents.true_masks[sl],
        sprite_positions=latents.sprite_positions[sl],
        moving=latents.moving[sl])


@dataclass
class ProbeData:
    """Latents of the median-seed model over held-out scenes, split 80/20
    at the scene level (40 train / 10 eval scenes)."""

    latents_train: SceneLatents
    latents_eval: SceneLatents

    def camera(self, input_kind: str):
        x_tr, y_tr = camera_probe_data(self.latents_train, input_kind)
        x_ev, y_ev = camera_probe_data(self.latents_eval, input_kind)
        return x_tr, y_tr, x_ev, y_ev

    def object(self, input_kind: str):
        x_tr, y_tr = object_probe_data(self.latents_train, input_kind)
        x_ev, y_ev = object_probe_data(self.latents_eval, input_kind)
        return x_tr, y_tr, x_ev, y_ev


@pytest.fixture(scope="session")
def probe_data(acceptance_runs) -> ProbeData:
    run = acceptance_runs.median_run()
    model = run.load_model()
    latents = collect_latents(model, acceptance_runs.eval_sequences)
    split = int(0.8 * len(acceptance_runs.eval_sequences))
    return ProbeData(latents_train=_slice_latents(latents, slice(None, split)),
                     latents_eval=_slice_latents(latents, slice(split, None)))
