"""Joint-count-agnostic skin weight factorization.

Skin weights are factorized into fixed-channel joint embeddings and vertex
embeddings (the vertex embedding is the skin-weighted average of the joint
embeddings). Decoding lifts both sides through affine maps to a higher
dimension and recovers the weights as a per-vertex temperature-scaled softmax
over joint compatibilities, which is a valid partition of unity for any joint
count. A direct gradient-descent fit stands in for a trained encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Skeleton, SkinWeights
from .errors import ParseError, ValidationError

DEFAULT_CHANNELS = 4
DEFAULT_LIFTED_DIM = 64


@dataclass(frozen=True)
class AffineLift:
    """Affine map from the embedding channels to the lifted dimension."""

    weight: np.ndarray  # (C, D)
    bias: np.ndarray  # (D,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    @classmethod
    def identity(cls, dim: int) -> "AffineLift":
        return cls(np.eye(dim), np.zeros(dim))


@dataclass(frozen=True)
class SkinEmbeddings:
    """Fixed-channel joint/vertex skin embeddings with per-vertex temperatures."""

    joint_embeddings: np.ndarray  # (J, C)
    vertex_embeddings: np.ndarray  # (V, C)
    temperatures: np.ndarray  # (V,) positive
    lift_joint: AffineLift  # C -> D
    lift_vertex: AffineLift  # C -> D

    def __post_init__(self):
        je = np.asarray(self.joint_embeddings, dtype=np.float64)
        ve = np.asarray(self.vertex_embeddings, dtype=np.float64)
        temps = np.asarray(self.temperatures, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "joint_embeddings", je)
        object.__setattr__(self, "vertex_embeddings", ve)
        object.__setattr__(self, "temperatures", temps)
        if je.ndim != 2 or ve.ndim != 2 or je.shape[1] != ve.shape[1]:
            raise ValidationError("joint and vertex embeddings must share the channel dimension")
        if len(temps) != len(ve):
            raise ValidationError("one temperature per vertex required")
        if len(temps) and temps.min() <= 0.0:
            raise ValidationError("temperatures must be positive")
        if self.lift_joint.weight.shape != self.lift_vertex.weight.shape:
            raise ValidationError("joint/vertex lifts must map to the same dimension")
        if self.lift_joint.weight.shape[0] != je.shape[1]:
            raise ValidationError("lift input dimension must equal the channel count")

    @property
    def channels(self) -> int:
        return self.joint_embeddings.shape[1]

    @property
    def lifted_dim(self) -> int:
        return self.lift_joint.weight.shape[1]


def encode_vertex_embeddings(joint_embeddings: np.ndarray, skin: SkinWeights) -> np.ndarray:
    """Skin-weighted average of the joint embeddings, one row per vertex.

    The output channel count equals the embedding channel count regardless of
    how many joints the rig has.
    """
    je = np.asarray(joint_embeddings, dtype=np.float64)
    if je.ndim != 2:
        raise ValidationError("joint embeddings must be a (J, C) matrix")
    if len(je) != skin.joint_count:
        raise ValidationError(
            f"joint embedding count {len(je)} != skin joint_count {skin.joint_count}"
        )
    return skin.to_dense() @ je


def _decode_logits(emb: SkinEmbeddings) -> np.ndarray:
    lifted_j = emb.lift_joint(emb.joint_embeddings)  # (J, D)
    lifted_v = emb.lift_vertex(emb.vertex_embeddings)  # (V, D)
    return (lifted_v @ lifted_j.T) / emb.temperatures[:, None]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def decode_skin(emb: SkinEmbeddings) -> SkinWeights:
    """Per-vertex softmax over lifted-embedding compatibilities.

    w_i(v) = softmax_i(<lift_v(W_v), lift_j(W_i)> / T_v); an exact partition
    of unity for every joint count.
    """
    if len(emb.joint_embeddings) < 1 or len(emb.vertex_embeddings) < 1:
        raise ValidationError("decode requires at least one joint and one vertex")
    probs = _softmax(_decode_logits(emb))
    return SkinWeights.from_dense(probs)


@dataclass(frozen=True)
class FitConfig:
    """Budget and hyperparameters of the embedding fit."""

    iterations: int = 3000
    learning_rate: float = 0.5
    grad_clip: float = 5.0
    seed: int = 0
    channels: int = DEFAULT_CHANNELS
    lifted_dim: int = DEFAULT_LIFTED_DIM

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.grad_clip <= 0:
            raise ValidationError("grad_clip must be > 0")
        if self.channels < 1 or self.lifted_dim < 1:
            raise ValidationError("channels and lifted_dim must be >= 1")


@dataclass(frozen=True)
class FitResult:
    embeddings: SkinEmbeddings
    final_kl: float
    kl_history: np.ndarray


def _mean_kl(target: np.ndarray, probs: np.ndarray) -> float:
    safe = np.where(target > 0.0, target, 1.0)
    val = float(np.mean((target * (np.log(safe) - np.log(probs + 1e-12))).sum(axis=1)))
    return max(val, 0.0)  # the log smoothing can leave a tiny negative residue


def fit_skin_embeddings(skin: SkinWeights, skeleton: Skeleton, config: FitConfig | None = None) -> FitResult:
    """Fit joint embeddings, lifts, and temperatures to reproduce a skin.

    Vertex embeddings stay tied to the skin-weighted average of the joint
    embeddings throughout. Plain gradient descent on mean KL(target ||
    decoded) with global gradient-norm clipping; temperatures are
    parameterized as exp(theta) to stay positive. Non-convergence is not an
    error; the final loss is reported.
    """
    cfg = config or FitConfig()
    if skin.joint_count != skeleton.joint_count:
        raise ValidationError(
            f"skin joint_count {skin.joint_count} != skeleton joint count {skeleton.joint_count}"
        )
    target = skin.to_dense()  # (V, J)
    n_vertices, n_joints = target.shape
    rng = np.random.default_rng(cfg.seed)
    c, d = cfg.channels, cfg.lifted_dim

    w_joint = rng.normal(0.0, 0.5, size=(n_joints, c))
    # Lifts start near a tiled identity so early logits are informative.
    lift_j = np.tile(np.eye(c), (1, d // c + 1))[:, :d] + rng.normal(0.0, 0.01, size=(c, d))
    lift_v = np.tile(np.eye(c), (1, d // c + 1))[:, :d] + rng.normal(0.0, 0.01, size=(c, d))
    bias_j = np.zeros(d)
    bias_v = np.zeros(d)
    theta = np.zeros(n_vertices)  # temperature = exp(theta)

    history = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        w_vertex = target @ w_joint  # tied encoding
        lifted_j = w_joint @ lift_j + bias_j  # (J, D)
        lifted_v = w_vertex @ lift_v + bias_v  # (V, D)
        temps = np.exp(theta)
        scores = lifted_v @ lifted_j.T  # (V, J)
        logits = scores / temps[:, None]
        probs = _softmax(logits)
        history[it] = _mean_kl(target, probs)

        d_logits = (probs - target) / n_vertices  # (V, J)
        d_scores = d_logits / temps[:, None]
        d_theta = -(d_logits * logits).sum(axis=1) * 1.0  # chain through s/exp(theta)
        d_lifted_v = d_scores @ lifted_j  # (V, D)
        d_lifted_j = d_scores.T @ lifted_v  # (J, D)
        d_lift_v = w_vertex.T @ d_lifted_v
        d_bias_v = d_lifted_v.sum(axis=0)
        d_lift_j = w_joint.T @ d_lifted_j
        d_bias_j = d_lifted_j.sum(axis=0)
        d_w_vertex = d_lifted_v @ lift_v.T
        d_w_joint = d_lifted_j @ lift_j.T + target.T @ d_w_vertex

        grads = [d_w_joint, d_lift_j, d_bias_j, d_lift_v, d_bias_v, d_theta]
        norm = float(np.sqrt(sum(float((g**2).sum()) for g in grads)))
        scale = cfg.learning_rate * (cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0)
        w_joint -= scale * d_w_joint
        lift_j -= scale * d_lift_j
        bias_j -= scale * d_bias_j
        lift_v -= scale * d_lift_v
        bias_v -= scale * d_bias_v
        theta -= scale * d_theta

    embeddings = SkinEmbeddings(
        joint_embeddings=w_joint,
        vertex_embeddings=target @ w_joint,
        temperatures=np.exp(theta),
        lift_joint=AffineLift(lift_j, bias_j),
        lift_vertex=AffineLift(lift_v, bias_v),
    )
    final = _mean_kl(target, _softmax(_decode_logits(embeddings)))
    return FitResult(embeddings=embeddings, final_kl=final, kl_history=history)


# ---------------------------------------------------------------------------
# Embeddings JSON I/O
# ---------------------------------------------------------------------------


def save_embeddings(emb: SkinEmbeddings, path: str | Path) -> None:
    doc = {
        "C": emb.channels,
        "D": emb.lifted_dim,
        "joint_embeddings": emb.joint_embeddings.tolist(),
        "vertex_embeddings": emb.vertex_embeddings.tolist(),
        "temperatures": emb.temperatures.tolist(),
        "lift_joint": {"weight": emb.lift_joint.weight.tolist(), "bias": emb.lift_joint.bias.tolist()},
        "lift_vertex": {"weight": emb.lift_vertex.weight.tolist(), "bias": emb.lift_vertex.bias.tolist()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_embeddings(path: str | Path) -> SkinEmbeddings:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return SkinEmbeddings(
            joint_embeddings=np.asarray(doc["joint_embeddings"], dtype=np.float64),
            vertex_embeddings=np.asarray(doc["vertex_embeddings"], dtype=np.float64),
            temperatures=np.asarray(doc["temperatures"], dtype=np.float64),
            lift_joint=AffineLift(
                np.asarray(doc["lift_joint"]["weight"], dtype=np.float64),
                np.asarray(doc["lift_joint"]["bias"], dtype=np.float64),
            ),
            lift_vertex=AffineLift(
                np.asarray(doc["lift_vertex"]["weight"], dtype=np.float64),
                np.asarray(doc["lift_vertex"]["bias"], dtype=np.float64),
            ),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: embeddings document missing field: {exc}") from exc
