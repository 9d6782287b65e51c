import logging
from typing import Dict, List, Optional

import numpy as np

from app.attacks import AttackResult, merge_results, run_attack
from app.errors import DataError, NumericError
from app.models import RefineMode, StageName
from app.commands.report import cmd_report
from app.pipeline import (CHUNK_SIZE, CLEAN_TAG, ReferenceProfile, RunContext, SignatureTable, attacked_tags,
                          chunk_starts, extract_signatures, load_attacked_set, parallel_map, read_cka_table,
                          read_signature_table, stage_audit, write_signature_table)
from app.signatures import (cka_batch_summary, cka_difference_summary, cka_for_batch, latent_batches)
from app.statistics import SeparabilityReport, compare, refine_best_unit, write_histogram_csv
from app.storage import save_tensor, write_csv, write_json
from app.vit import TAP_KINDS

logger = logging.getLogger(__name__)

SUMMARY_SIGNATURES = ("fr", "ph", "s_ap", "s_cka")


def cmd_attack(ctx: RunContext) -> Dict[str, AttackResult]:
    """Run every attack of the grid over the evaluation set; a failing tag is logged and skipped."""
    weights = ctx.load_weights()
    clean = ctx.evaluation_set()
    results = {}
    for tag, spec in ctx.attack_specs().items():
        try:
            with stage_audit(ctx, StageName.ATTACK, tag=tag) as outcome:
                def work(start, spec=spec):
                    stop = start + CHUNK_SIZE
                    return run_attack(weights, spec, clean.images[start:stop], clean.labels[start:stop])

                result = merge_results(parallel_map(work, chunk_starts(len(clean)), ctx.workers))
                directory = ctx.attacks_dir / tag
                for name, image in zip(clean.ids, result.images):
                    save_tensor(directory / name, image)
                write_csv(directory / "manifest.csv",
                          ["source_file", "label", "attack_family", "hyperparameters", "success", "linf", "l2"],
                          zip(clean.ids, clean.labels.tolist(), [spec.family.value] * len(clean),
                              [spec.hyperparameters()] * len(clean), result.success, result.linf, result.l2))
                outcome["count"] = len(result)
                outcome["detail"] = f"success rate {float(np.mean(result.success)):.4f}"
            results[tag] = result
        except (DataError, NumericError) as exc:
            logger.error("Attack %s failed, continuing with the rest of the grid: %s", tag, exc)
    return results


def _write_cka(ctx: RunContext, tag: str, table: SignatureTable, reference: ReferenceProfile):
    names = reference.m_ref.tap_names
    batches = latent_batches(table.latents, ctx.config.cka_batch)
    if not batches:
        raise DataError(f"{tag}: fewer than {ctx.config.cka_batch} samples, no CKA batch can be formed")
    matrices = [cka_for_batch(batch, names) for batch in batches]
    difference = cka_difference_summary(reference.m_ref, matrices)

    m = ctx.config.cka_batch
    batch_ids = [table.sample_ids[k * m:(k + 1) * m] for k in range(len(batches))]
    rows = []
    for k, matrix in enumerate(matrices):
        s_cka, layer_sums = cka_batch_summary(reference.m_ref, matrix)
        rows.append([k, "|".join(batch_ids[k]), s_cka, *layer_sums.tolist()])
    write_csv(ctx.signatures_dir / f"{tag}_cka.csv", ["batch", "sample_ids", "s_cka", *names], rows)

    save_tensor(ctx.cka_dir / f"{tag}_mbar.vtf", difference.mean_matrix)
    save_tensor(ctx.cka_dir / f"{tag}_d.vtf", difference.d)
    groups = {}
    for kind in TAP_KINDS:
        index = [i for i, name in enumerate(names) if name.endswith(f".{kind}")]
        groups[kind] = float(np.nansum(difference.d[np.ix_(index, index)]))
    write_json(ctx.cka_dir / f"{tag}.json", {
        "m": m,
        "batches": batch_ids,
        "tap_names": names,
        "s_cka": difference.s_cka,
        "group_s_cka": groups,
        "excluded": [list(entry) for entry in difference.excluded],
    })


def cmd_extract(ctx: RunContext) -> List[str]:
    """Signatures for the clean set and every attacked set on disk; returns the tags extracted."""
    weights = ctx.load_weights()
    reference = ReferenceProfile.load(ctx.reference_dir)
    phi = ctx.config.frequency_threshold
    done = []
    for tag in [CLEAN_TAG, *attacked_tags(ctx)]:
        try:
            with stage_audit(ctx, StageName.EXTRACT, tag=tag) as outcome:
                dataset = ctx.evaluation_set() if tag == CLEAN_TAG else load_attacked_set(ctx, tag)
                table = extract_signatures(weights, dataset.images, dataset.labels, dataset.ids, phi,
                                           ctx.workers, reference=reference.ad)
                write_signature_table(ctx, tag, table)
                _write_cka(ctx, tag, table, reference)
                outcome["count"] = len(dataset)
            done.append(tag)
        except (DataError, NumericError) as exc:
            if tag == CLEAN_TAG:
                raise
            logger.error("Extraction for %s failed, continuing: %s", tag, exc)
    return done


def _refine(ctx: RunContext, clean_units, attacked_units, unit_names, clean_summary, attacked_summary,
            signature: str, tag: str) -> Optional[SeparabilityReport]:
    cfg = ctx.config
    if cfg.refine_mode == RefineMode.HELD_OUT and min(len(clean_units), len(attacked_units)) < 2:
        logger.warning("%s: held-out %s refinement skipped, a set has fewer than 2 rows", tag, signature)
        return None
    return refine_best_unit(clean_units, attacked_units, unit_names, clean_summary, attacked_summary,
                            signature=signature, attack_tag=tag, mode=cfg.refine_mode,
                            bins=cfg.histogram_bins, seed=cfg.seed)


def cmd_compare(ctx: RunContext) -> Dict[str, List[SeparabilityReport]]:
    cfg = ctx.config
    tags = [tag for tag in attacked_tags(ctx) if (ctx.signatures_dir / f"{tag}.csv").exists()]
    if not tags:
        return {}
    clean, clean_cka = read_signature_table(ctx, CLEAN_TAG), read_cka_table(ctx, CLEAN_TAG)
    depth, heads = clean.ad.shape[1:]
    head_names = [f"block{b}.head{h}" for b in range(depth) for h in range(heads)]
    results = {}
    for tag in tags:
        try:
            with stage_audit(ctx, StageName.COMPARE, tag=tag) as outcome:
                attacked, attacked_cka = read_signature_table(ctx, tag), read_cka_table(ctx, tag)
                values = {
                    "fr": (clean.fr, attacked.fr),
                    "ph": (clean.ph, attacked.ph),
                    "s_ap": (clean.s_ap, attacked.s_ap),
                    "s_cka": (clean_cka.s_cka, attacked_cka.s_cka),
                }
                reports = []
                for name in SUMMARY_SIGNATURES:
                    bc, h_clean, h_attacked = compare(*values[name], bins=cfg.histogram_bins)
                    write_histogram_csv(ctx.compare_dir / "histograms" / f"{name}_{tag}.csv", h_clean, h_attacked)
                    reports.append(SeparabilityReport(signature=name, attack_tag=tag, bc=bc))
                refined = [
                    _refine(ctx, clean.ad.reshape(len(clean.ad), -1), attacked.ad.reshape(len(attacked.ad), -1),
                            head_names, clean.s_ap, attacked.s_ap, "ad_head", tag),
                    _refine(ctx, clean_cka.layers, attacked_cka.layers, clean_cka.layer_names,
                            clean_cka.s_cka, attacked_cka.s_cka, "cka_layer", tag),
                ]
                reports.extend(report for report in refined if report is not None)
                write_json(ctx.compare_dir / f"{tag}.json", {"reports": [r.model_dump(mode="json") for r in reports]})
                outcome["count"] = len(reports)
            results[tag] = reports
        except (DataError, NumericError) as exc:
            logger.error("Comparison for %s failed, continuing: %s", tag, exc)
    return results


def cmd_run_grid(ctx: RunContext) -> dict:
    """Attack, extract, compare and report against an existing reference profile."""
    cmd_attack(ctx)
    cmd_extract(ctx)
    cmd_compare(ctx)
    return cmd_report(ctx)
