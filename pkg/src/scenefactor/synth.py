"""Procedural multi-object sprite videos with ground-truth masks and camera pose.

World coordinates span [-1, 1]^2. The camera is a pure 2D translation: at
frame t the visible window is [-1, 1]^2 shifted by the camera offset, so a
static sprite drifts across the image opposite to the pan while the
world-anchored background gradient drifts with it. Sprites are composited
back to front (later sprites in the list paint over earlier ones) with 2x2
supersampled coverage, and the instance mask records the topmost sprite whose
coverage at a pixel is at least one half.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Hard generator bounds; specs outside these are rejected.
MAX_FRAMES = 64
ALLOWED_SIZES = (32, 64)
MAX_SPRITES = 8

SHAPE_NAMES = ("circle", "square", "triangle")

# Background gradient anchored to world coordinates.
_BG_LOW = np.array([0.08, 0.10, 0.18])
_BG_HIGH = np.array([0.35, 0.38, 0.52])


class SceneSpecError(ValueError):
    """A scene specification field is out of the generator's bounds."""


@dataclass
class SpriteSpec:
    """One sprite: shape, appearance, and a (possibly piecewise) trajectory."""

    shape: str                      # circle | square | triangle
    color: tuple                    # RGB in [0, 1]^3
    size: float                     # world units (circumradius / half-side)
    position: tuple                 # initial center, world units
    velocity: tuple                 # world units per frame
    velocity2: Optional[tuple] = None   # velocity after change_frame, if any
    change_frame: Optional[int] = None  # frame index where velocity switches

    def positions(self, frame_count: int) -> np.ndarray:
        """Center per frame, shape (T, 2)."""
        t = np.arange(frame_count, dtype=np.float64)[:, None]
        pos = np.asarray(self.position, dtype=np.float64) + t * np.asarray(self.velocity)
        if self.change_frame is not None and self.velocity2 is not None:
            tc = self.change_frame
            after = t[:, 0] >= tc
            base = np.asarray(self.position) + tc * np.asarray(self.velocity)
            pos[after] = base + (t[after] - tc) * np.asarray(self.velocity2)
        return pos

    def is_moving(self) -> bool:
        moving = any(abs(v) > 0 for v in self.velocity)
        if self.velocity2 is not None:
            moving = moving or any(abs(v) > 0 for v in self.velocity2)
        return moving


@dataclass
class SceneSpec:
    """Complete recipe for one rendered sequence; rendering is deterministic."""

    seed: int
    frame_count: int = 8
    frame_size: tuple = (32, 32)
    camera: np.ndarray = field(default_factory=lambda: np.zeros((8, 2)))  # (T, 2) offsets
    sprites: list = field(default_factory=list)
    pan_limit: float = 0.25

    @property
    def num_sprites(self) -> int:
        return len(self.sprites)

    def validate(self) -> None:
        if not 1 <= self.frame_count <= MAX_FRAMES:
            raise SceneSpecError(f"frame_count {self.frame_count} outside [1, {MAX_FRAMES}]")
        h, w = self.frame_size
        if h != w or h not in ALLOWED_SIZES:
            raise SceneSpecError(f"frame_size {self.frame_size} not square in {ALLOWED_SIZES}")
        if self.num_sprites > MAX_SPRITES:
            raise SceneSpecError(f"num_sprites {self.num_sprites} exceeds {MAX_SPRITES}")
        cam = np.asarray(self.camera, dtype=np.float64)
        if cam.shape != (self.frame_count, 2):
            raise SceneSpecError(f"camera shape {cam.shape} != ({self.frame_count}, 2)")
        if not np.all(np.isfinite(cam)):
            raise SceneSpecError("camera offsets must be finite")
        if np.any(np.abs(cam) > self.pan_limit + 1e-9):
            raise SceneSpecError(f"camera offsets exceed pan_limit {self.pan_limit}")
        for idx, sprite in enumerate(self.sprites):
            if sprite.shape not in SHAPE_NAMES:
                raise SceneSpecError(f"sprites[{idx}].shape '{sprite.shape}' unknown")
            if not 0 < sprite.size <= 0.6:
                raise SceneSpecError(f"sprites[{idx}].size {sprite.size} outside (0, 0.6]")
            pos = sprite.positions(self.frame_count)
            if np.any(np.abs(pos) > 1.0):
                raise SceneSpecError(f"sprites[{idx}] center leaves world bounds")

    def sprite_positions(self) -> np.ndarray:
        """Ground-truth sprite centers, shape (num_sprites, T, 2)."""
        if not self.sprites:
            return np.zeros((0, self.frame_count, 2))
        return np.stack([s.positions(self.frame_count) for s in self.sprites])

    def moving_flags(self) -> np.ndarray:
        return np.array([s.is_moving() for s in self.sprites], dtype=bool)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frame_size"] = list(self.frame_size)
        d["camera"] = np.asarray(self.camera, dtype=np.float64).tolist()
        for s in d["sprites"]:
            for key in ("color", "position", "velocity", "velocity2"):
                if s[key] is not None:
                    s[key] = list(s[key])
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        sprites = []
        for s in d["sprites"]:
            s = dict(s)
            for key in ("color", "position", "velocity", "velocity2"):
                if s[key] is not None:
                    s[key] = tuple(s[key])
            sprites.append(SpriteSpec(**s))
        return SceneSpec(
            seed=d["seed"], frame_count=d["frame_count"],
            frame_size=tuple(d["frame_size"]),
            camera=np.asarray(d["camera"], dtype=np.float64),
            sprites=sprites, pan_limit=d["pan_limit"])


@dataclass
class VideoSequence:
    """Rendered frames plus optional ground truth."""

    frames: np.ndarray                      # (T, H, W, 3) float32 in [0, 1]
    masks: Optional[np.ndarray] = None      # (T, H, W) uint8, 0 = background
    camera: Optional[np.ndarray] = None     # (T, 2) float32 world offsets
    meta: Optional[dict] = None             # SceneSpec echo

    @property
    def shape(self):
        return self.frames.shape[:3]

    def spec(self) -> SceneSpec:
        if self.meta is None:
            raise ValueError("sequence carries no spec echo")
        return SceneSpec.from_dict(self.meta)


def _inside(shape: str, dx: np.ndarray, dy: np.ndarray, size: float) -> np.ndarray:
    """Point-in-sprite test on offset grids (world units from sprite center)."""
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= size
    if shape == "triangle":
        # Equilateral, apex up (negative y is up in image space), circumradius = size.
        # Vertices: (0, -s), (-s*sqrt(3)/2, s/2), (s*sqrt(3)/2, s/2).
        slope = math.sqrt(3.0)
        below_base = dy <= size / 2.0
        right_of_left_edge = dy >= -slope * dx - size
        left_of_right_edge = dy >= slope * dx - size
        return below_base & right_of_left_edge & left_of_right_edge
    raise SceneSpecError(f"unknown sprite shape '{shape}'")


def generate_scene(spec: SceneSpec) -> VideoSequence:
    """Render a SceneSpec to frames, instance masks, and camera offsets."""
    spec.validate()
    t_count = spec.frame_count
    h, w = spec.frame_size
    cam = np.asarray(spec.camera, dtype=np.float64)

    # Supersampled pixel-center coordinates in view space ([-1, 1]^2 window).
    ss = 2
    view_x = -1.0 + (np.arange(w * ss) + 0.5) * (2.0 / (w * ss))
    view_y = -1.0 + (np.arange(h * ss) + 0.5) * (2.0 / (h * ss))
    gx = view_x[None, :]
    gy = view_y[:, None]

    frames = np.empty((t_count, h, w, 3), dtype=np.float32)
    masks = np.zeros((t_count, h, w), dtype=np.uint8)
    positions = spec.sprite_positions()

    for t in range(t_count):
        # World coordinates seen by each subsample at this camera offset.
        wx = gx + cam[t, 0]
        wy = gy + cam[t, 1]

        # World-anchored diagonal gradient background.
        ramp = np.clip((wx + wy + 2.0) / 4.0, 0.0, 1.0)
        image = _BG_LOW[None, None, :] + ramp[:, :, None] * (_BG_HIGH - _BG_LOW)[None, None, :]
        image = np.broadcast_to(image, (h * ss, w * ss, 3)).copy()
        mask_t = np.zeros((h, w), dtype=np.uint8)

        for idx, sprite in enumerate(spec.sprites):
            cx, cy = positions[idx, t]
            hit = _inside(sprite.shape, wx - cx, wy - cy, sprite.size)
            coverage = hit.reshape(h, ss, w, ss).mean(axis=(1, 3))
            cov_ss = hit.astype(np.float64)[:, :, None]
            color = np.asarray(sprite.color, dtype=np.float64)[None, None, :]
            image = image * (1.0 - cov_ss) + color * cov_ss
            mask_t[coverage >= 0.5] = idx + 1  # later sprites overwrite: topmost wins

        frames[t] = image.reshape(h, ss, w, ss, 3).mean(axis=(1, 3)).astype(np.float32)
        masks[t] = mask_t

    return VideoSequence(
        frames=np.clip(frames, 0.0, 1.0),
        masks=masks,
        camera=cam.astype(np.float32),
        meta=spec.to_dict())


def _rng_for(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def sample_scene_spec(seed: int, frame_count: int = 8, frame_size: int = 32,
                      num_sprites: int = 3, num_moving: int = 1,
                      pan_limit: float = 0.25, allow_event: bool = False) -> SceneSpec:
    """Draw a random, valid SceneSpec. Deterministic in the seed.

    The camera pans linearly with a per-scene random direction and magnitude;
    offsets are centered so their mean over the sequence is exactly zero.
    Moving sprites get constant velocities (one optional mid-sequence velocity
    change when ``allow_event``); all sprite centers stay within the world.
    """
    if num_moving > num_sprites:
        raise SceneSpecError(f"num_moving {num_moving} exceeds num_sprites {num_sprites}")
    rng = _rng_for(seed)

    # Centered linear pan: offset(t) = (t - (T-1)/2) * step.
    theta = rng.uniform(0.0, 2.0 * math.pi)
    magnitude = rng.uniform(0.3, 1.0) * pan_limit
    half_span = max((frame_count - 1) / 2.0, 1.0)
    step = magnitude / half_span * np.array([math.cos(theta), math.sin(theta)])
    t_idx = np.arange(frame_count, dtype=np.float64) - (frame_count - 1) / 2.0
    camera = t_idx[:, None] * step[None, :]

    sprites = []
    event_budget = 1 if allow_event else 0
    for idx in range(num_sprites):
        shape = SHAPE_NAMES[rng.integers(len(SHAPE_NAMES))]
        color = rng.uniform(0.25, 1.0, size=3)
        color[rng.integers(3)] = rng.uniform(0.75, 1.0)  # keep sprites saturated
        size = rng.uniform(0.14, 0.28)
        moving = idx < num_moving
        for _ in range(200):  # rejection-sample a trajectory that stays in bounds
            position = rng.uniform(-0.6, 0.6, size=2)
            if moving:
                angle = rng.uniform(0.0, 2.0 * math.pi)
                speed = rng.uniform(0.03, 0.09)
                velocity = speed * np.array([math.cos(angle), math.sin(angle)])
            else:
                velocity = np.zeros(2)
            velocity2 = None
            change_frame = None
            if moving and event_budget > 0 and rng.uniform() < 0.5:
                change_frame = frame_count // 2
                angle2 = rng.uniform(0.0, 2.0 * math.pi)
                speed2 = rng.uniform(0.03, 0.09)
                velocity2 = speed2 * np.array([math.cos(angle2), math.sin(angle2)])
            sprite = SpriteSpec(
                shape=shape, color=tuple(color.round(6)), size=float(round(size, 6)),
                position=tuple(position.round(6)), velocity=tuple(velocity.round(6)),
                velocity2=tuple(velocity2.round(6)) if velocity2 is not None else None,
                change_frame=change_frame)
            if np.all(np.abs(sprite.positions(frame_count)) <= 0.7):
                break
        else:
            raise SceneSpecError(f"sprites[{idx}]: no in-bounds trajectory found")
        if sprite.change_frame is not None:
            event_budget -= 1
        sprites.append(sprite)

    return SceneSpec(
        seed=seed, frame_count=frame_count, frame_size=(frame_size, frame_size),
        camera=camera, sprites=sprites, pan_limit=pan_limit)


def generate_dataset(num_scenes: int, seed: int = 0, **spec_kwargs) -> list:
    """Generate ``num_scenes`` independent scenes; scene i uses seed stream (seed, i)."""
    sequences = []
    for i in range(num_scenes):
        scene_seed = int(_rng_for(seed, i + 1).integers(2 ** 31))
        spec = sample_scene_spec(scene_seed, **spec_kwargs)
        sequences.append(generate_scene(spec))
    return sequences


def split_dataset(sequences: list, train_fraction: float, seed: int = 0):
    """Disjoint, exhaustive, seed-deterministic train/eval partition."""
    if not sequences:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction {train_fraction} outside (0, 1)")
    order = _rng_for(seed).permutation(len(sequences))
    n_train = int(round(len(sequences) * train_fraction))
    n_train = min(max(n_train, 1), len(sequences) - 1)
    train = [sequences[i] for i in order[:n_train]]
    evalu = [sequences[i] for i in order[n_train:]]
    return train, evalu
