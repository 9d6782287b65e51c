import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from app.errors import DataError
from app.models import RefineMode
from app.storage import write_csv

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 100
SUMMARY_UNIT = "summary"


@dataclass
class Histogram:
    density: np.ndarray
    edges: np.ndarray
    count: int
    degenerate: bool = False


def _finite_values(values, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise DataError(f"{what}: no values")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{what}: non-finite values")
    return values


def shared_edges(*value_sets, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """Equal-width edges spanning the pooled min/max; a single unit-width bin if all values coincide."""
    pooled = _finite_values(np.concatenate([np.asarray(v, dtype=float).reshape(-1) for v in value_sets]), "shared_edges")
    low, high = pooled.min(), pooled.max()
    if low == high:
        return np.array([low - 0.5, low + 0.5])
    return np.linspace(low, high, bins + 1)


def histogram(values, edges: np.ndarray) -> Histogram:
    """
    Normalised counts over `edges`. Bins are half-open [left, right) except the
    last, so a value on an interior edge lands in the bin to its right.
    """
    values = _finite_values(values, "histogram")
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise DataError("histogram edges must be strictly increasing")
    if values.min() < edges[0] or values.max() > edges[-1]:
        raise DataError(f"values span [{values.min()}, {values.max()}] outside edges [{edges[0]}, {edges[-1]}]")
    counts, _ = np.histogram(values, bins=edges)
    degenerate = bool(values.min() == values.max())
    if degenerate:
        logger.warning("Degenerate histogram: all %d values equal %r", values.size, float(values[0]))
    return Histogram(counts / counts.sum(), edges, int(values.size), degenerate)


def bhattacharyya(h: Histogram, h_prime: Histogram) -> float:
    if not np.array_equal(h.edges, h_prime.edges):
        raise DataError("Bhattacharyya coefficient needs histograms over identical edges")
    return float(np.sum(np.sqrt(h.density * h_prime.density)))


def compare(clean, attacked, bins: int = HISTOGRAM_BINS) -> Tuple[float, Histogram, Histogram]:
    edges = shared_edges(clean, attacked, bins=bins)
    h_clean, h_attacked = histogram(clean, edges), histogram(attacked, edges)
    return bhattacharyya(h_clean, h_attacked), h_clean, h_attacked


def write_histogram_csv(path: Path, clean: Histogram, attacked: Histogram):
    write_csv(path, ["bin_left", "bin_right", "clean_density", "attacked_density"],
              zip(clean.edges[:-1], clean.edges[1:], clean.density, attacked.density))


class SeparabilityReport(BaseModel):
    signature: str
    attack_tag: str
    bc: float
    unit_bcs: Dict[str, float] = {}
    best_unit: Optional[str] = None
    best_bc: Optional[float] = None
    improvement: Optional[float] = None
    mode: Optional[RefineMode] = None


def _unit_bcs(clean_units: np.ndarray, attacked_units: np.ndarray, names: Sequence[str], bins: int) -> Dict[str, float]:
    return {name: compare(clean_units[:, u], attacked_units[:, u], bins)[0] for u, name in enumerate(names)}


def _argmin(scores: Dict[str, float]) -> str:
    return min(scores, key=lambda name: scores[name])


def refine_best_unit(clean_units: np.ndarray, attacked_units: np.ndarray, unit_names: Sequence[str],
                     clean_summary: np.ndarray, attacked_summary: np.ndarray, signature: str, attack_tag: str,
                     mode: RefineMode = RefineMode.CHERRY_PICK, bins: int = HISTOGRAM_BINS,
                     seed: int = 0) -> SeparabilityReport:
    """
    Scan per-unit value distributions (heads or layers) for the lowest BC.

    The summary-level signature is one of the scanned candidates, so in
    cherry-pick mode the reported BC never exceeds the summary BC. In held-out
    mode each set is split 50/50: the unit is chosen on one half and its BC
    (and the summary BC it is compared with) measured on the other.
    """
    clean_units = np.asarray(clean_units, dtype=float)
    attacked_units = np.asarray(attacked_units, dtype=float)
    names: List[str] = list(unit_names)
    if len(names) < 2 or clean_units.shape[1] != len(names) or attacked_units.shape[1] != len(names):
        raise DataError(f"refine_best_unit needs >= 2 units with matching columns, got {len(names)} names")

    summary_bc = compare(clean_summary, attacked_summary, bins)[0]
    if mode == RefineMode.CHERRY_PICK:
        scores = _unit_bcs(clean_units, attacked_units, names, bins)
        best = _argmin({**scores, SUMMARY_UNIT: summary_bc})
        best_bc = summary_bc if best == SUMMARY_UNIT else scores[best]
        return SeparabilityReport(signature=signature, attack_tag=attack_tag, bc=summary_bc, unit_bcs=scores,
                                  best_unit=best, best_bc=best_bc, improvement=summary_bc - best_bc, mode=mode)

    rng = np.random.default_rng(seed)
    if len(clean_units) < 2 or len(attacked_units) < 2:
        raise DataError("held-out refinement needs at least 2 samples per set")
    clean_order, attacked_order = rng.permutation(len(clean_units)), rng.permutation(len(attacked_units))
    clean_pick, clean_eval = np.array_split(clean_order, 2)
    attacked_pick, attacked_eval = np.array_split(attacked_order, 2)
    clean_summary, attacked_summary = np.asarray(clean_summary, float), np.asarray(attacked_summary, float)

    pick_scores = _unit_bcs(clean_units[clean_pick], attacked_units[attacked_pick], names, bins)
    pick_summary = compare(clean_summary[clean_pick], attacked_summary[attacked_pick], bins)[0]
    best = _argmin({**pick_scores, SUMMARY_UNIT: pick_summary})

    eval_scores = _unit_bcs(clean_units[clean_eval], attacked_units[attacked_eval], names, bins)
    eval_summary = compare(clean_summary[clean_eval], attacked_summary[attacked_eval], bins)[0]
    best_bc = eval_summary if best == SUMMARY_UNIT else eval_scores[best]
    return SeparabilityReport(signature=signature, attack_tag=attack_tag, bc=eval_summary, unit_bcs=eval_scores,
                              best_unit=best, best_bc=best_bc, improvement=eval_summary - best_bc, mode=mode)
