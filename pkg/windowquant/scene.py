"""
WindowQuant -- Synthetic video/prompt embeddings.

Replaces the visual and text encoders with a seeded generator. A shared
"topic" direction ties the prompt to the planted relevant windows:

- text rows and relevant visual rows are ``a·topic + sqrt(1 − a²)·noise``,
- all other visual rows are pure noise orthogonal to the topic,

with every noise row of unit norm and orthogonal to the topic, so a relevant
window scores about ``a²`` against the prompt and any other window about 0.

Frames are drawn from per-frame generators, which makes a scene with more
frames an exact extension of the same scene with fewer.
"""
from dataclasses import dataclass

import numpy as np

from windowquant.errors import ShapeError
from windowquant.numerics import Matrix, as_matrix
from windowquant.search import WindowPlan

# Seed offset separating the calibration scene from evaluated scenes.
CALIBRATION_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class SyntheticScene:
    num_frames: int = 16
    tokens_per_frame: int = 16
    text_tokens: int = 8
    window_size: int = 32
    relevant_window_ids: tuple[int, ...] = ()
    seed: int = 0
    relevance: float = 0.9

    def __post_init__(self):
        for name in ("num_frames", "tokens_per_frame", "text_tokens", "window_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"scene {name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.relevance <= 1.0:
            raise ShapeError(f"relevance must be in (0, 1], got {self.relevance}")
        bad = [w for w in self.relevant_window_ids if not 0 <= w < self.plan.num_windows]
        if bad:
            raise ShapeError(f"relevant windows {bad} outside 0..{self.plan.num_windows - 1}")

    @property
    def num_visual_tokens(self) -> int:
        return self.num_frames * self.tokens_per_frame

    @property
    def plan(self) -> WindowPlan:
        return WindowPlan.for_tokens(self.num_visual_tokens, self.window_size)


def _topic(seed: int, dim: int) -> np.ndarray:
    t = np.random.default_rng([seed, 0]).normal(size=dim)
    return t / np.linalg.norm(t)


def _orthogonal_noise(rng: np.random.Generator, rows: int, topic: np.ndarray) -> np.ndarray:
    g = rng.normal(size=(rows, topic.size))
    g -= np.outer(g @ topic, topic)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def generate_scene(scene: SyntheticScene, embed_dim: int) -> tuple[Matrix, Matrix]:
    """Deterministic (visual M×D, text N×D) embeddings for ``scene``."""
    if embed_dim < 2:
        raise ShapeError(f"embed_dim must be >= 2 to host a topic and noise, got {embed_dim}")
    topic = _topic(scene.seed, embed_dim)
    a = scene.relevance
    b = np.sqrt(1.0 - a * a)

    text_noise = _orthogonal_noise(np.random.default_rng([scene.seed, 1]), scene.text_tokens, topic)
    text = a * topic + b * text_noise

    relevant = set(scene.relevant_window_ids)
    k = scene.tokens_per_frame
    frames = []
    for f in range(scene.num_frames):
        rows = _orthogonal_noise(np.random.default_rng([scene.seed, 2, f]), k, topic)
        for r in range(k):
            if (f * k + r) // scene.window_size in relevant:
                rows[r] = a * topic + b * rows[r]
        frames.append(rows)
    return as_matrix(np.vstack(frames)), as_matrix(text)


def calibration_input(embed_dim: int, model_seed: int) -> Matrix:
    """Fixed calibration sample (visual then text rows) derived from the model seed."""
    scene = SyntheticScene(
        num_frames=4, tokens_per_frame=8, text_tokens=8, window_size=8,
        relevant_window_ids=(1,), seed=model_seed + CALIBRATION_SEED_OFFSET,
    )
    visual, text = generate_scene(scene, embed_dim)
    return as_matrix(np.vstack([visual, text]))
