import logging

import numpy as np

from app.datasets import load_dataset
from app.errors import TrainingDiverged
from app.models import StageName, StageStatus
from app.pipeline import RunContext, stage_audit
from app.storage import write_json
from app.training import TrainingResult, train_toy
from app.vit import gradient_spot_check, init_weights

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4


def cmd_train(ctx: RunContext) -> TrainingResult:
    cfg = ctx.config
    with stage_audit(ctx, StageName.TRAIN) as outcome:
        dataset = load_dataset(ctx.data_dir, cfg.vit)

        # finite-difference spot check on the same initialisation train_toy draws
        fresh = init_weights(cfg.vit, np.random.default_rng(cfg.seed))
        error = gradient_spot_check(fresh, dataset.images[0], int(dataset.labels[0]), seed=cfg.seed)
        write_json(ctx.weights_dir / "gradient_check.json", {"max_relative_error": error, "tolerance": GRADIENT_TOLERANCE})
        if error >= GRADIENT_TOLERANCE:
            logger.warning("Input-gradient spot check: max relative error %.3g exceeds %.0e", error, GRADIENT_TOLERANCE)

        try:
            result = train_toy(dataset, cfg.vit, cfg.train, cfg.seed, log_path=ctx.weights_dir / "training_log.csv")
        except TrainingDiverged as exc:
            if exc.checkpoint is not None:
                exc.checkpoint.save(ctx.weights_dir)
                logger.error("Training diverged; last finite weights saved to %s", ctx.weights_dir)
            raise

        result.weights.save(ctx.weights_dir)
        outcome["count"] = len(result.history)
        final = result.history[-1].accuracy if result.history else 0.0
        outcome["detail"] = f"train accuracy {final:.4f}"
        if not result.reached_target:
            outcome["status"] = StageStatus.TARGET_MISSED
    return result
