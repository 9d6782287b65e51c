import logging
from pathlib import Path

from app.datasets import NOISE_STD, Dataset, generate_synthetic, load_dataset, save_dataset
from app.models import StageName
from app.pipeline import RunContext, stage_audit

logger = logging.getLogger(__name__)


def cmd_gen_data(ctx: RunContext) -> Dataset:
    """Write the labelled dataset (synthetic, or ingested from a user directory) under data/."""
    cfg = ctx.config
    with stage_audit(ctx, StageName.GEN_DATA) as outcome:
        if cfg.dataset == "synthetic":
            dataset = generate_synthetic(cfg.vit, cfg.samples_per_class, cfg.seed)
            manifest = {
                "source": "synthetic",
                "seed": cfg.seed,
                "samples_per_class": cfg.samples_per_class,
                "num_classes": cfg.vit.num_classes,
                "image_side": cfg.vit.image_side,
                "channels": cfg.vit.channels,
                "noise_std": NOISE_STD,
            }
        else:
            dataset = load_dataset(Path(cfg.dataset), cfg.vit)
            manifest = {"source": str(cfg.dataset), "num_classes": cfg.vit.num_classes}
        manifest["count"] = len(dataset)
        save_dataset(ctx.data_dir, dataset, manifest)
        outcome["count"] = len(dataset)
    return dataset
