"""Concept activation vectors.

A CAV is the unit normal of a logistic-regression hyperplane that separates
a concept's layer activations from those of a negative set, oriented so the
concept side scores positive. Activations are used raw (no centering or
scaling).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffmodel import ImageSample, LayerActivation, LayeredModel, stack_pixels

log = logging.getLogger(__name__)

ACCURACY_WARNING = 0.6


class UntrainableCavError(ArithmeticError):
    """The classifier weights collapsed to (numerically) zero."""


@dataclass
class CavTrainConfig:
    learning_rate: float = 0.1
    epochs: int = 200
    l2_penalty: float = 0.01
    holdout_fraction: float = 0.2
    seed: int = 0
    warn_below: float = ACCURACY_WARNING

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be non-negative")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")


@dataclass
class Cav:
    concept_name: str
    layer_name: str
    direction: np.ndarray
    bias: float
    holdout_accuracy: float
    run_id: int = 0
    negative_set_fingerprint: str = ""
    is_random: bool = False

    def __post_init__(self) -> None:
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)

    @property
    def size(self) -> int:
        return self.direction.size

    def margins(self, acts: np.ndarray) -> np.ndarray:
        return np.asarray(acts, dtype=np.float64) @ self.direction + self.bias


def activation_matrix(
    model: LayeredModel, images: Sequence[ImageSample], layer_name: str, batch_size: int = 128
) -> np.ndarray:
    """Row i is the flattened activation of images[i] at ``layer_name``."""
    if len(images) == 0:
        raise ValueError("no images to collect activations from")
    x = stack_pixels(images)
    model.layer_index(layer_name)
    return np.concatenate(
        [model.activations(x[i : i + batch_size], layer_name) for i in range(0, len(x), batch_size)]
    )


def collect_activations(model: LayeredModel, images: Sequence[ImageSample], layer_name: str) -> list:
    shape = model.output_shape_of(layer_name)
    return [LayerActivation(layer_name, row, shape) for row in activation_matrix(model, images, layer_name)]


def _as_matrix(acts) -> tuple[np.ndarray, str | None]:
    if isinstance(acts, np.ndarray):
        return np.atleast_2d(np.asarray(acts, dtype=np.float64)), None
    acts = list(acts)
    if not acts:
        raise ValueError("activation list is empty")
    layers = {a.layer_name for a in acts}
    if len(layers) != 1:
        raise ValueError(f"activations come from several layers: {sorted(layers)}")
    sizes = {a.values.size for a in acts}
    if len(sizes) != 1:
        raise ValueError(f"activations have different lengths: {sorted(sizes)}")
    return np.stack([a.values for a in acts]), layers.pop()


def fingerprint(acts: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(acts, dtype=np.float64).tobytes()).hexdigest()[:16]


def _holdout_split(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_hold = int(round(n * fraction))
    if n >= 2:
        n_hold = min(max(n_hold, 1), n - 1)
    else:
        n_hold = 0
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_logistic(
    x: np.ndarray, y: np.ndarray, learning_rate: float, epochs: int, l2_penalty: float
) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on mean log-loss + (l2/2)*|w|^2 (bias unpenalized).

    Descent runs on z = (x - mean) / s, with s the RMS distance of the rows
    from their mean, so one learning rate suits any activation magnitude.
    The scaling is isotropic, so the returned raw-space normal points the
    same way as the normal found for z.
    """
    n, d = x.shape
    mu = x.mean(axis=0)
    z = x - mu
    s = float(np.sqrt(np.mean(np.sum(z * z, axis=1))))
    if s == 0.0:
        return np.zeros(d), 0.0
    z /= s
    w = np.zeros(d)
    b = 0.0
    for _ in range(epochs):
        r = _sigmoid(z @ w + b) - y
        w -= learning_rate * (z.T @ r / n + l2_penalty * w)
        b -= learning_rate * float(r.mean())
    return w / s, b - float(w @ mu) / s


def train_cav(
    concept_acts,
    negative_acts,
    cfg: CavTrainConfig = CavTrainConfig(),
    concept_name: str = "concept",
    run_id: int = 0,
    is_random: bool = False,
    layer_name: str | None = None,
) -> Cav:
    """Train the concept-vs-negative classifier and return its oriented unit normal.

    ``concept_acts``/``negative_acts`` are lists of LayerActivation or 2-D
    arrays (one row per sample). For arrays, pass ``layer_name`` explicitly.
    """
    pos, pos_layer = _as_matrix(concept_acts)
    neg, neg_layer = _as_matrix(negative_acts)
    if pos_layer is not None and neg_layer is not None and pos_layer != neg_layer:
        raise ValueError(f"concept activations from {pos_layer!r}, negatives from {neg_layer!r}")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError(f"activation lengths differ: {pos.shape[1]} vs {neg.shape[1]}")
    layer_name = pos_layer or neg_layer or layer_name or ""

    rng = np.random.default_rng(cfg.seed)
    pos_tr, pos_ho = _holdout_split(len(pos), cfg.holdout_fraction, rng)
    neg_tr, neg_ho = _holdout_split(len(neg), cfg.holdout_fraction, rng)
    x = np.concatenate([pos[pos_tr], neg[neg_tr]])
    y = np.concatenate([np.ones(len(pos_tr)), np.zeros(len(neg_tr))])
    w, b = fit_logistic(x, y, cfg.learning_rate, cfg.epochs, cfg.l2_penalty)

    norm = float(np.linalg.norm(w))
    if not np.isfinite(norm) or norm < 1e-12:
        raise UntrainableCavError(f"CAV for {concept_name!r} at {layer_name!r} collapsed (|w| = {norm:.3g})")

    x_ho = np.concatenate([pos[pos_ho], neg[neg_ho]])
    if len(x_ho):
        y_ho = np.concatenate([np.ones(len(pos_ho)), np.zeros(len(neg_ho))])
        accuracy = float(np.mean(((x_ho @ w + b) > 0) == (y_ho == 1)))
    else:
        accuracy = float("nan")

    direction = w / norm
    bias = b / norm
    if float(np.mean(pos[pos_tr] @ direction + bias)) <= 0.0:
        direction, bias = -direction, -bias
    if accuracy < cfg.warn_below and not is_random:
        log.warning(
            "CAV %r at layer %r (run %d) has holdout accuracy %.3f", concept_name, layer_name, run_id, accuracy
        )
    return Cav(
        concept_name=concept_name,
        layer_name=layer_name,
        direction=direction,
        bias=bias,
        holdout_accuracy=accuracy,
        run_id=run_id,
        negative_set_fingerprint=fingerprint(neg),
        is_random=is_random,
    )


def make_random_random_cav(
    pool_acts,
    count_per_side: int,
    cfg: CavTrainConfig = CavTrainConfig(),
    seed: int = 0,
    run_id: int = 0,
    name: str = "random",
    layer_name: str | None = None,
) -> Cav:
    """Null CAV: two disjoint random halves of ``pool_acts`` trained against each other."""
    pool, layer = _as_matrix(pool_acts)
    if count_per_side < 1 or len(pool) < 2 * count_per_side:
        raise ValueError(f"pool of {len(pool)} cannot supply two disjoint sets of {count_per_side}")
    idx = np.random.default_rng(seed).permutation(len(pool))
    a = pool[np.sort(idx[:count_per_side])]
    b = pool[np.sort(idx[count_per_side : 2 * count_per_side])]
    return train_cav(a, b, cfg, concept_name=name, run_id=run_id, is_random=True, layer_name=layer or layer_name)
