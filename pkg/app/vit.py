"""
Vanilla pre-norm Vision Transformer on the tensor tape.

Block layout: x += Proj(MHA(LN(x))); x += MLP(LN(x)). Every forward pass can
record the per-head attention matrices and three latent taps per block:
the concatenated head outputs ("attn"), the residual stream after the
projected attention is added ("proj") and the residual stream after the MLP
is added ("mlp").
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from app import tensor as T
from app.config import ViTConfig
from app.errors import DataError, NumericError, ShapeError
from app.storage import load_checkpoint, save_checkpoint
from app.tensor import Tensor

logger = logging.getLogger(__name__)

TAP_KINDS = ("attn", "proj", "mlp")
INIT_STD = 0.02


def tap_names(cfg: ViTConfig) -> List[str]:
    return [f"block{b}.{kind}" for b in range(cfg.depth) for kind in TAP_KINDS]


def parameter_shapes(cfg: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    d, hidden = cfg.embed_dim, cfg.mlp_hidden_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.tokens, d),
        "norm.gamma": (d,),
        "norm.beta": (d,),
        "head.weight": (d, cfg.num_classes),
        "head.bias": (cfg.num_classes,),
    }
    for b in range(cfg.depth):
        prefix = f"blocks.{b}"
        for name in ("norm1", "norm2"):
            shapes[f"{prefix}.{name}.gamma"] = (d,)
            shapes[f"{prefix}.{name}.beta"] = (d,)
        for name in ("q", "k", "v", "out"):
            shapes[f"{prefix}.attn.{name}.weight"] = (d, d)
            shapes[f"{prefix}.attn.{name}.bias"] = (d,)
        shapes[f"{prefix}.mlp.fc1.weight"] = (d, hidden)
        shapes[f"{prefix}.mlp.fc1.bias"] = (hidden,)
        shapes[f"{prefix}.mlp.fc2.weight"] = (hidden, d)
        shapes[f"{prefix}.mlp.fc2.bias"] = (d,)
    return shapes


@dataclass
class ViTWeights:
    config: ViTConfig
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        self.validate()

    def validate(self):
        expected = parameter_shapes(self.config)
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise DataError(f"Weights do not match config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape} != {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise NumericError(f"{name}: non-finite weights")

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {name: Tensor(value, requires_grad=requires_grad) for name, value in self.params.items()}

    def copy(self) -> "ViTWeights":
        return ViTWeights(self.config, {name: value.copy() for name, value in self.params.items()})

    def save(self, directory: Path):
        save_checkpoint(directory, self.config.model_dump(), self.params)

    @classmethod
    def load(cls, directory: Path) -> "ViTWeights":
        config, params = load_checkpoint(directory)
        return cls(ViTConfig(**config), params)


def init_weights(cfg: ViTConfig, rng: np.random.Generator) -> ViTWeights:
    """Xavier-uniform block and patch projections, small normal embeddings and head."""
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            params[name] = np.zeros(shape)
        elif name in ("cls_token", "pos_embed", "head.weight"):
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ViTWeights(cfg, params)


@dataclass
class PatchGrid:
    centers: np.ndarray
    distances: np.ndarray

    @classmethod
    def from_config(cls, cfg: ViTConfig) -> "PatchGrid":
        rows, cols = np.divmod(np.arange(cfg.num_patches), cfg.grid_side)
        centers = np.stack([(cols + 0.5) * cfg.patch_side, (rows + 0.5) * cfg.patch_side], axis=1).astype(float)
        return cls(centers=centers, distances=cdist(centers, centers))

    @property
    def max_distance(self) -> float:
        return float(self.distances.max())


@dataclass
class InferenceTrace:
    logits: np.ndarray
    posterior: np.ndarray
    attention: np.ndarray  # (depth, heads, tokens, tokens)
    latents: np.ndarray  # (3 * depth, tokens, embed_dim)
    tap_names: List[str] = field(default_factory=list)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))

    def check(self):
        if np.any(self.posterior < 0) or abs(self.posterior.sum() - 1.0) > 1e-9:
            raise NumericError("posterior is not on the simplex")
        if np.any(np.abs(self.attention.sum(axis=-1) - 1.0) > 1e-9):
            raise NumericError("attention rows do not sum to 1")
        if len(self.latents) != 3 * self.attention.shape[0]:
            raise NumericError(f"expected {3 * self.attention.shape[0]} latent taps, got {len(self.latents)}")
        return self


def _as_batch(images, cfg: ViTConfig) -> Tuple[Tensor, bool]:
    x = T.as_tensor(images)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1, *x.shape))
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_side, cfg.image_side):
        raise ShapeError(f"Expected images of shape (B, {cfg.channels}, {cfg.image_side}, {cfg.image_side}), got {x.shape}")
    return x, single


def patchify(images, cfg: ViTConfig) -> Tensor:
    """(C, S, S) -> (N, C*P*P) or (B, C, S, S) -> (B, N, C*P*P); raster order, values in (c, y, x) order."""
    x, single = _as_batch(images, cfg)
    batch, g, p = x.shape[0], cfg.grid_side, cfg.patch_side
    x = T.reshape(x, (batch, cfg.channels, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (batch, cfg.num_patches, cfg.patch_dim))
    return T.reshape(x, x.shape[1:]) if single else x


def unpatchify(patches: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    patches = np.asarray(patches, dtype=float)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    batch, g, p = patches.shape[0], cfg.grid_side, cfg.patch_side
    images = patches.reshape(batch, g, g, cfg.channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    images = images.reshape(batch, cfg.channels, cfg.image_side, cfg.image_side)
    return images[0] if single else images


def _linear(x: Tensor, params: Dict[str, Tensor], name: str) -> Tensor:
    return T.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _split_heads(x: Tensor, cfg: ViTConfig) -> Tensor:
    batch, tokens = x.shape[:2]
    return T.transpose(T.reshape(x, (batch, tokens, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))


def _attention(h: Tensor, params: Dict[str, Tensor], prefix: str, cfg: ViTConfig) -> Tuple[Tensor, Tensor]:
    q = _split_heads(_linear(h, params, f"{prefix}.q"), cfg)
    k = _split_heads(_linear(h, params, f"{prefix}.k"), cfg)
    v = _split_heads(_linear(h, params, f"{prefix}.v"), cfg)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
    weights = T.softmax(scores, axis=-1)
    context = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
    return T.reshape(context, (h.shape[0], h.shape[1], cfg.embed_dim)), weights


def _check_block(x: Tensor, where: str):
    T.ensure_finite(x.data, f"activations after {where}")


def run_model(params: Dict[str, Tensor], images, cfg: ViTConfig, record: bool = False):
    """Logits tensor (B, K) on the tape; plus attention (B, depth, H, T, T) and latents (B, 3*depth, T, D) if `record`."""
    x, _ = _as_batch(images, cfg)
    batch = x.shape[0]
    tokens = _linear(patchify(x, cfg), params, "patch_embed")
    cls = T.expand(T.reshape(params["cls_token"], (1, cfg.embed_dim)), (batch, 1, cfg.embed_dim))
    x = T.concat([cls, tokens], axis=1) + params["pos_embed"]
    _check_block(x, "embedding")

    attention, latents = [], []
    for b in range(cfg.depth):
        prefix = f"blocks.{b}"
        mixed, weights = _attention(T.layer_norm(x, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"]),
                                    params, f"{prefix}.attn", cfg)
        x = x + _linear(mixed, params, f"{prefix}.attn.out")
        projected = x
        hidden = T.gelu(_linear(T.layer_norm(x, params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"]),
                                params, f"{prefix}.mlp.fc1"))
        x = x + _linear(hidden, params, f"{prefix}.mlp.fc2")
        _check_block(x, f"block {b}")
        if record:
            attention.append(weights.data)
            latents.extend([mixed.data, projected.data, x.data])

    cls_out = T.reshape(T.narrow(T.layer_norm(x, params["norm.gamma"], params["norm.beta"]), 1, 0, 1),
                        (batch, cfg.embed_dim))
    logits = _linear(cls_out, params, "head")
    _check_block(logits, "classifier head")
    if not record:
        return logits, None, None
    return logits, np.stack(attention, axis=1), np.stack(latents, axis=1)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def forward_batch(weights: ViTWeights, images: np.ndarray) -> List[InferenceTrace]:
    cfg = weights.config
    logits, attention, latents = run_model(weights.tensors(), images, cfg, record=True)
    posteriors = softmax_rows(logits.data)
    names = tap_names(cfg)
    return [
        InferenceTrace(logits.data[i], posteriors[i], attention[i], latents[i], names).check()
        for i in range(logits.shape[0])
    ]


def forward(weights: ViTWeights, image: np.ndarray) -> InferenceTrace:
    return forward_batch(weights, np.asarray(image, dtype=float)[None])[0]


def predict_logits(weights: ViTWeights, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    params = weights.tensors()
    chunks = [run_model(params, images[start:start + batch_size], weights.config)[0].data
              for start in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, weights.config.num_classes))


def input_gradient(weights: ViTWeights, images: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient w.r.t. the images (loss summed over the batch)."""
    x = Tensor(images, requires_grad=True)
    logits = run_model(weights.tensors(), x, weights.config)[0]
    losses = -np.take_along_axis(T.log_softmax(logits).data, np.asarray(labels)[:, None], axis=1)[:, 0]
    grad = T.grad_input(T.cross_entropy(logits, labels, reduction="sum"), x)
    return losses, grad


def gradient_spot_check(weights: ViTWeights, image: np.ndarray, label: int, coordinates: int = 24,
                        step: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between tape and central-difference input gradients on random pixels."""
    rng = np.random.default_rng(seed)
    params = weights.tensors()
    labels = np.array([label])

    def loss(pixels: np.ndarray) -> float:
        return T.cross_entropy(run_model(params, pixels[None], weights.config)[0], labels, reduction="sum").item()

    _, analytic = input_gradient(weights, image[None], labels)
    flat = rng.choice(image.size, size=min(coordinates, image.size), replace=False)
    positions = [np.unravel_index(i, image.shape) for i in flat]
    numeric = T.numerical_gradient(loss, image, step=step, indices=positions)
    picked = np.array([analytic[0][p] for p in positions])
    return T.max_relative_error(picked, np.array([numeric[p] for p in positions]))
