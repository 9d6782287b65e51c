import logging

import numpy as np

from app.errors import DataError
from app.models import StageName
from app.pipeline import CLEAN_TAG, ReferenceProfile, RunContext, extract_signatures, stage_audit
from app.signatures import AttentionProfile, attention_profile_summary, cka_matrix, mean_profile
from app.statistics import histogram, shared_edges
from app.storage import write_csv
from app.vit import PatchGrid, tap_names

logger = logging.getLogger(__name__)


def cmd_build_reference(ctx: RunContext) -> ReferenceProfile:
    """Clean-set reference: mean AD per head, M_ref over the whole clean set, clean histograms."""
    cfg = ctx.config
    with stage_audit(ctx, StageName.BUILD_REFERENCE, tag=CLEAN_TAG) as outcome:
        weights = ctx.load_weights()
        clean = ctx.evaluation_set()
        if len(clean) == 0:
            raise DataError("Cannot build a reference from an empty clean set")
        if len(clean) < 2:
            raise DataError("The CKA reference needs at least 2 clean samples")

        table = extract_signatures(weights, clean.images, clean.labels, clean.ids,
                                   cfg.frequency_threshold, ctx.workers)
        ad_reference = mean_profile([AttentionProfile(distances) for distances in table.ad])
        names = tap_names(cfg.vit)
        m_ref = cka_matrix([table.latents[:, layer] for layer in range(table.latents.shape[1])], names)
        reference = ReferenceProfile(
            ad=ad_reference,
            m_ref=m_ref,
            clean_count=len(clean),
            phi=cfg.frequency_threshold,
            cka_batch=cfg.cka_batch,
            max_distance=PatchGrid.from_config(cfg.vit).max_distance,
        )
        reference.save(ctx.reference_dir)

        s_ap = np.array([attention_profile_summary(AttentionProfile(d), ad_reference) for d in table.ad])
        rows = []
        for name, values in (("fr", table.fr), ("ph", table.ph), ("s_ap", s_ap)):
            h = histogram(values, shared_edges(values, bins=cfg.histogram_bins))
            rows.extend((name, left, right, density) for left, right, density in zip(h.edges[:-1], h.edges[1:], h.density))
        write_csv(ctx.reference_dir / "clean_histograms.csv", ["signature", "bin_left", "bin_right", "density"], rows)
        outcome["count"] = len(clean)
    return reference
