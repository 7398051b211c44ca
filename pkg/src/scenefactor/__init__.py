"""scenefactor: factorized-latent variational model for unsupervised video
scene decomposition, with a procedural sprite-video generator, training loop,
segmentation/probe metrics, and latent-space analyses."""

from .configs import (ConfigError, DecodeConfig, LossConfig, ModelConfig,
                      OptimizerConfig, TrainConfig, desk_train_config,
                      full_model_config, full_train_config, load_train_config,
                      save_train_config)
from .synth import (SceneSpec, SceneSpecError, SpriteSpec, VideoSequence,
                    generate_dataset, generate_scene, sample_scene_spec,
                    split_dataset)
from .seqio import read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DecodeConfig", "LossConfig", "ModelConfig",
    "OptimizerConfig", "TrainConfig", "desk_train_config", "full_model_config",
    "full_train_config", "load_train_config", "save_train_config",
    "SceneSpec", "SceneSpecError", "SpriteSpec", "VideoSequence",
    "generate_dataset", "generate_scene", "sample_scene_spec", "split_dataset",
    "read_dataset", "write_dataset", "__version__",
]
