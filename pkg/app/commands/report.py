"""
Report stage: accuracy and efficacy table, per-head drift, signature
shifts, separability and the budget trends, rendered to JSON and Markdown.
"""
import logging
from typing import Dict, List

import numpy as np

from app.errors import DataError, NumericError
from app.models import StageName
from app.pipeline import (CLEAN_TAG, ReferenceProfile, RunContext, StoredSignatures, attacked_tags,
                          read_signature_table, stage_audit)
from app.storage import read_csv, read_json, write_csv, write_json
from app.templates import render_template

logger = logging.getLogger(__name__)

TREND_SIGNATURES = ("fr", "ph", "s_ap", "s_cka")
STABLE_FRACTION = 0.01


def checked_accuracy(table: StoredSignatures, tag: str) -> float:
    """Top-1 accuracy recomputed from the stored posteriors; must agree with the prediction column."""
    if len(table.posteriors) != len(table.predictions):
        raise DataError(f"{tag}: {len(table.posteriors)} posteriors for {len(table.predictions)} signature rows")
    recomputed = table.posteriors.argmax(axis=1)
    if not np.array_equal(recomputed, table.predictions):
        raise NumericError(f"{tag}: stored predictions disagree with the argmax of the stored posteriors")
    return float(np.mean(recomputed == table.labels))


def _efficacy(ctx: RunContext, tag: str) -> Dict[str, float]:
    rows = read_csv(ctx.attacks_dir / tag / "manifest.csv")
    return {
        "success_rate": float(np.mean([float(row["success"]) for row in rows])),
        "mean_linf": float(np.mean([float(row["linf"]) for row in rows])),
        "mean_l2": float(np.mean([float(row["l2"]) for row in rows])),
    }


def head_drift(tag: str, ad: np.ndarray, reference: ReferenceProfile) -> List[dict]:
    tolerance = STABLE_FRACTION * reference.max_distance
    mean, std = ad.mean(axis=0), ad.std(axis=0)
    delta = mean - reference.ad.distances
    rows = []
    for (b, h), change in np.ndenumerate(delta):
        if abs(change) < tolerance:
            direction = "stable"
        else:
            direction = "diversified" if change > 0 else "shrunk"
        rows.append({"attack_tag": tag, "block": b, "head": h, "mean_ad": float(mean[b, h]),
                     "std_ad": float(std[b, h]), "delta": float(change), "direction": direction})
    return rows


def count_inversions(bcs: List[float]) -> int:
    """Steps where BC rises although the budget grew."""
    return sum(1 for before, after in zip(bcs, bcs[1:]) if after > before)


def budget_trends(ctx: RunContext, separability: Dict[str, Dict[str, dict]]) -> List[dict]:
    specs = ctx.attack_specs()
    families = {}
    for tag in separability:
        families.setdefault(specs[tag].family.value, []).append(tag)
    trends = []
    for family, tags in families.items():
        tags.sort(key=lambda tag: specs[tag].budget)
        for signature in TREND_SIGNATURES:
            bcs = [separability[tag][signature]["bc"] for tag in tags]
            trends.append({"family": family, "signature": signature, "tags": tags, "bcs": bcs,
                           "inversions": count_inversions(bcs)})
    return trends


def cmd_report(ctx: RunContext) -> dict:
    cfg = ctx.config
    with stage_audit(ctx, StageName.REPORT) as outcome:
        reference = ReferenceProfile.load(ctx.reference_dir)
        clean = read_signature_table(ctx, CLEAN_TAG)
        clean_accuracy = checked_accuracy(clean, CLEAN_TAG)
        clean_ids = set(clean.sample_ids)

        accuracy = [{"attack_tag": CLEAN_TAG, "family": "", "budget": None, "accuracy": clean_accuracy,
                     "success_rate": None, "mean_linf": 0.0, "mean_l2": 0.0}]
        drift = head_drift(CLEAN_TAG, clean.ad, reference)
        shifts, separability, cka_groups = {}, {}, {}
        specs = ctx.attack_specs()

        for tag in attacked_tags(ctx):
            if not (ctx.signatures_dir / f"{tag}.csv").exists():
                logger.warning("No signatures for %s, left out of the report", tag)
                continue
            attacked = read_signature_table(ctx, tag)
            orphans = sorted(set(attacked.sample_ids) - clean_ids)
            if orphans:
                raise DataError(f"{tag}: {len(orphans)} rows without a clean counterpart, e.g. {orphans[0]}")
            spec = specs[tag]
            accuracy.append({"attack_tag": tag, "family": spec.family.value, "budget": spec.budget,
                             "accuracy": checked_accuracy(attacked, tag), **_efficacy(ctx, tag)})
            drift.extend(head_drift(tag, attacked.ad, reference))
            shifts[tag] = {
                "fr_median_shift": float(np.median(attacked.fr) - np.median(clean.fr)),
                "ph_median_shift": float(np.median(attacked.ph) - np.median(clean.ph)),
            }
            if (ctx.cka_dir / f"{tag}.json").exists():
                cka_groups[tag] = read_json(ctx.cka_dir / f"{tag}.json")["group_s_cka"]
            if (ctx.compare_dir / f"{tag}.json").exists():
                reports = read_json(ctx.compare_dir / f"{tag}.json")["reports"]
                separability[tag] = {report["signature"]: report for report in reports}

        write_csv(ctx.report_dir / "accuracy.csv",
                  ["attack_tag", "family", "budget", "accuracy", "success_rate", "mean_linf", "mean_l2"],
                  ([row["attack_tag"], row["family"], "" if row["budget"] is None else row["budget"], row["accuracy"],
                    "" if row["success_rate"] is None else row["success_rate"], row["mean_linf"], row["mean_l2"]]
                   for row in accuracy))
        write_csv(ctx.report_dir / "head_drift.csv",
                  ["attack_tag", "block", "head", "mean_ad", "std_ad", "delta", "direction"],
                  ([row["attack_tag"], row["block"], row["head"], row["mean_ad"], row["std_ad"], row["delta"],
                    row["direction"]] for row in drift))

        report = {
            "seed": cfg.seed,
            "phi": reference.phi,
            "cka_batch": reference.cka_batch,
            "clean_count": reference.clean_count,
            "refine_mode": cfg.refine_mode.value,
            "clean_accuracy": clean_accuracy,
            "accuracy": accuracy,
            "head_drift": drift,
            "signature_shifts": shifts,
            "cka_groups": cka_groups,
        }
        if (ctx.weights_dir / "gradient_check.json").exists():
            report["gradient_check"] = read_json(ctx.weights_dir / "gradient_check.json")
        if separability:
            trends = budget_trends(ctx, separability)
            report["separability"] = separability
            report["trends"] = trends
            report["total_inversions"] = sum(trend["inversions"] for trend in trends)
        write_json(ctx.report_dir / "report.json", report)
        (ctx.report_dir / "report.md").write_text(render_template("report.md", report))

        outcome["count"] = len(accuracy)
        outcome["detail"] = f"clean accuracy {clean_accuracy:.4f}"
        logger.info("Report written to %s (clean accuracy %.4f, %d attack tags)",
                    ctx.report_dir, clean_accuracy, len(accuracy) - 1)
    return report
