"""
Inference-time attack signatures.

- frequency ratio of the input (orthonormal 2-D DCT-II energy above/below an index-sum threshold)
- posterior entropy of the softmax output
- attention distance per head, attention profile and its deviation from a clean reference
- linear CKA between tapped layers and its deviation from a clean reference matrix
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.fft import dctn, idctn
from scipy.special import entr

from app.errors import DataError, DegenerateSignatureError, ShapeError
from app.vit import InferenceTrace, PatchGrid

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-6
# self-HSIC below this fraction of the Gram energy marks a constant layer
UNDEFINED_HSIC_RATIO = 1e-12


@dataclass(frozen=True)
class FrequencySpec:
    phi: int
    side: int

    def __post_init__(self):
        if not 0 < self.phi <= 2 * (self.side - 1):
            raise DataError(f"phi must lie in (0, {2 * (self.side - 1)}] for side {self.side}, got {self.phi}")

    def high_mask(self) -> np.ndarray:
        i, j = np.indices((self.side, self.side))
        return i + j >= self.phi


def dct2(channel: np.ndarray) -> np.ndarray:
    channel = np.asarray(channel, dtype=float)
    if channel.ndim != 2 or channel.shape[0] != channel.shape[1]:
        raise ShapeError(f"dct2 needs a square channel, got shape {channel.shape}")
    return dctn(channel, type=2, norm="ortho")


def idct2(coefficients: np.ndarray) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.ndim != 2 or coefficients.shape[0] != coefficients.shape[1]:
        raise ShapeError(f"idct2 needs a square array, got shape {coefficients.shape}")
    return idctn(coefficients, type=2, norm="ortho")


def dct_energy(image: np.ndarray) -> np.ndarray:
    """Squared DCT coefficients summed over channels."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[None]
    return sum(dct2(channel) ** 2 for channel in image)


def frequency_ratio(image: np.ndarray, phi: Optional[int] = None) -> float:
    image = np.asarray(image, dtype=float)
    side = image.shape[-1]
    spec = FrequencySpec(phi if phi is not None else side, side)
    energy = dct_energy(image)
    high = spec.high_mask()
    low_energy = energy[~high].sum()
    if low_energy <= 0:
        raise DegenerateSignatureError("frequency ratio undefined: no low-frequency energy")
    return float(energy[high].sum() / low_energy)


def posterior_entropy(posterior: np.ndarray) -> float:
    p = np.asarray(posterior, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise DataError("posterior_entropy needs a probability vector")
    return float(min(entr(p).sum(), np.log(len(p))))


def attention_distance(attention: np.ndarray, grid: PatchGrid) -> float:
    """Attention-weighted mean patch-center distance; the class token (index 0) is dropped."""
    attention = np.asarray(attention, dtype=float)
    patches = grid.distances.shape[0]
    if attention.shape != (patches + 1, patches + 1):
        raise ShapeError(f"attention shape {attention.shape} does not match {patches} patches + class token")
    weights = attention[1:, 1:]
    total = weights.sum()
    if total <= 0:
        raise DegenerateSignatureError("attention distance undefined: no attention between patches")
    return float((weights * grid.distances).sum() / total)


@dataclass
class AttentionProfile:
    distances: np.ndarray  # (depth, heads) in pixels

    def unit_names(self) -> List[str]:
        depth, heads = self.distances.shape
        return [f"block{b}.head{h}" for b in range(depth) for h in range(heads)]


def attention_profile(trace: InferenceTrace, grid: PatchGrid) -> AttentionProfile:
    depth, heads = trace.attention.shape[:2]
    return AttentionProfile(np.array([[attention_distance(trace.attention[b, h], grid) for h in range(heads)]
                                      for b in range(depth)]))


def mean_profile(profiles: Sequence[AttentionProfile]) -> AttentionProfile:
    if not profiles:
        raise DataError("Cannot average an empty set of attention profiles")
    return AttentionProfile(np.mean([p.distances for p in profiles], axis=0))


def attention_profile_summary(profile: AttentionProfile, reference: AttentionProfile) -> float:
    """S_AP = sum over blocks and heads of |reference AD - observed AD|."""
    if profile.distances.shape != reference.distances.shape:
        raise ShapeError(f"profile shape {profile.distances.shape} != reference {reference.distances.shape}")
    return float(np.abs(reference.distances - profile.distances).sum())


@dataclass
class CkaMatrix:
    values: np.ndarray  # (l, l); NaN where undefined
    batch_size: int
    tap_names: List[str] = field(default_factory=list)

    @property
    def undefined(self) -> np.ndarray:
        return np.isnan(self.values)


def centering_matrix(m: int) -> np.ndarray:
    return np.eye(m) - np.full((m, m), 1.0 / m)


def centered_gram(activations: np.ndarray) -> np.ndarray:
    flat = np.asarray(activations, dtype=float).reshape(len(activations), -1)
    h = centering_matrix(len(flat))
    return h @ (flat @ flat.T) @ h


def hsic(centered_a: np.ndarray, centered_b: np.ndarray) -> float:
    m = centered_a.shape[0]
    return float(np.vdot(centered_a, centered_b) / (m - 1) ** 2)


def cka_matrix(latents: Sequence[np.ndarray], tap_names: Optional[List[str]] = None) -> CkaMatrix:
    """
    Linear CKA between every pair of layers; latents[i] is (m, ...) and is
    flattened to one row per sample. Constant layers give NaN entries.
    """
    if not latents:
        raise DataError("cka_matrix needs at least one layer")
    m = len(latents[0])
    if m < 2 or any(len(layer) != m for layer in latents):
        raise ShapeError(f"All layers must share a batch size m >= 2, got {[len(layer) for layer in latents]}")
    flats = [np.asarray(layer, dtype=float).reshape(m, -1) for layer in latents]
    grams = [centered_gram(flat) for flat in flats]
    # a layer is constant across the batch when centring removes (almost) all of its Gram energy
    defined = [np.sum(g ** 2) > UNDEFINED_HSIC_RATIO * np.sum((flat @ flat.T) ** 2) for g, flat in zip(grams, flats)]

    size = len(latents)
    values = np.full((size, size), np.nan)
    for i in range(size):
        for j in range(i, size):
            if defined[i] and defined[j]:
                value = hsic(grams[i], grams[j]) / np.sqrt(hsic(grams[i], grams[i]) * hsic(grams[j], grams[j]))
                values[i, j] = values[j, i] = value
    if not all(defined):
        logger.warning("CKA undefined for constant layers %s", [i for i, ok in enumerate(defined) if not ok])
    return CkaMatrix(values, m, list(tap_names or []))


def latent_batches(latents: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """Disjoint sequential batches of `batch_size` samples from (n, layers, ...); the remainder is dropped."""
    count = len(latents) // batch_size
    return [latents[k * batch_size:(k + 1) * batch_size] for k in range(count)]


def cka_for_batch(batch: np.ndarray, tap_names: Optional[List[str]] = None) -> CkaMatrix:
    """batch is (m, layers, ...) as produced by stacked InferenceTrace latents."""
    return cka_matrix([batch[:, layer] for layer in range(batch.shape[1])], tap_names)


@dataclass
class CkaDifference:
    d: np.ndarray
    s_cka: float
    mean_matrix: np.ndarray
    excluded: List[Tuple[int, int, int]] = field(default_factory=list)  # (i, j, batches dropped)


def cka_difference_summary(reference: CkaMatrix, batches: Sequence[CkaMatrix]) -> CkaDifference:
    """
    D = |M_ref - mean_B M(B)| and S_CKA = sum D. Undefined batch entries are
    left out of that entry's mean and reported; entries undefined everywhere
    (or in the reference) are NaN in D and skipped in S_CKA.
    """
    if not batches:
        raise DataError("cka_difference_summary needs at least one batch")
    shape = reference.values.shape
    for matrix in batches:
        if matrix.values.shape != shape:
            raise ShapeError(f"CKA matrix shape {matrix.values.shape} != reference {shape}")
    stack = np.stack([matrix.values for matrix in batches])
    missing = np.isnan(stack).sum(axis=0)
    with np.errstate(invalid="ignore"):
        counts = np.sum(~np.isnan(stack), axis=0)
        mean = np.where(counts > 0, np.nansum(stack, axis=0) / np.maximum(counts, 1), np.nan)
    d = np.abs(reference.values - mean)
    excluded = [(int(i), int(j), int(missing[i, j])) for i, j in zip(*np.nonzero(missing)) if i <= j]
    if excluded:
        logger.warning("CKA entries with undefined batches excluded: %s", excluded)
    return CkaDifference(d=d, s_cka=float(np.nansum(d)), mean_matrix=mean, excluded=excluded)


def cka_batch_summary(reference: CkaMatrix, batch: CkaMatrix) -> Tuple[float, np.ndarray]:
    """S_CKA of one batch and the per-layer row sums of its D (the per-layer units for refinement)."""
    d = np.abs(reference.values - batch.values)
    return float(np.nansum(d)), np.nansum(d, axis=1)
