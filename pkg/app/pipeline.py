"""
Shared plumbing for the pipeline stages: run context and paths, ledger
auditing, the ordered worker pool, signature extraction and the clean
reference profile.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from sqlalchemy.engine import Engine

from app.config import AttackSpec, RunConfig, settings
from app.database import audit_log, create_ledger_engine, get_db, init_db, ledger_url
from app.datasets import Dataset, load_dataset
from app.errors import DataError, ToolkitError
from app.models import StageName, StageStatus
from app.signatures import (AttentionProfile, CkaMatrix, attention_profile, attention_profile_summary,
                            frequency_ratio, posterior_entropy)
from app.storage import (load_tensor, read_csv, read_json, save_tensor, write_csv, write_json)
from app.vit import PatchGrid, ViTWeights, forward_batch

logger = logging.getLogger(__name__)

CHUNK_SIZE = 32
CLEAN_TAG = "clean"


@dataclass
class RunContext:
    config: RunConfig
    engine: Engine
    workers: int = 1

    @classmethod
    def create(cls, config: RunConfig, engine: Optional[Engine] = None, workers: Optional[int] = None) -> "RunContext":
        out_dir = Path(config.out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"Cannot create output directory {out_dir}: {exc}") from exc
        engine = engine or create_ledger_engine(ledger_url(out_dir))
        init_db(engine)
        return cls(config=config, engine=engine, workers=workers or settings.WORKERS)

    @property
    def out_dir(self) -> Path:
        return Path(self.config.out_dir)

    @property
    def data_dir(self) -> Path:
        return self.out_dir / "data"

    @property
    def weights_dir(self) -> Path:
        return self.out_dir / "weights"

    @property
    def reference_dir(self) -> Path:
        return self.out_dir / "reference"

    @property
    def attacks_dir(self) -> Path:
        return self.out_dir / "attacks"

    @property
    def signatures_dir(self) -> Path:
        return self.out_dir / "signatures"

    @property
    def cka_dir(self) -> Path:
        return self.out_dir / "cka"

    @property
    def compare_dir(self) -> Path:
        return self.out_dir / "compare"

    @property
    def report_dir(self) -> Path:
        return self.out_dir / "report"

    def attack_specs(self) -> Dict[str, AttackSpec]:
        return {spec.tag: spec for spec in self.config.attacks}

    def load_weights(self) -> ViTWeights:
        if not (self.weights_dir / "manifest.json").exists():
            raise DataError(f"No trained weights in {self.weights_dir}; run the train stage first")
        weights = ViTWeights.load(self.weights_dir)
        if weights.config != self.config.vit:
            raise DataError("Checkpoint config differs from the run config")
        return weights

    def evaluation_set(self) -> Dataset:
        return load_dataset(self.data_dir, self.config.vit).subset(self.config.eval_samples)


@contextmanager
def stage_audit(ctx: RunContext, stage: StageName, tag: str = "") -> Iterator[dict]:
    """Record started/completed/failed rows for a stage; the body may set `count`, `status` and `detail`."""
    outcome = {"count": 0, "status": StageStatus.COMPLETED, "detail": ""}
    with get_db(ctx.engine) as session:
        audit_log(session, ctx.config.seed, stage, StageStatus.STARTED, tag=tag)
        try:
            yield outcome
        except ToolkitError as exc:
            audit_log(session, ctx.config.seed, stage, StageStatus.FAILED, tag=tag, detail=str(exc))
            raise
        audit_log(session, ctx.config.seed, stage, outcome["status"], tag=tag,
                  item_count=outcome["count"], detail=outcome["detail"])


def parallel_map(fn: Callable, items: Sequence, workers: int) -> List:
    """Map preserving input order, so outputs are identical for any pool size."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunk_starts(count: int, size: int = CHUNK_SIZE) -> List[int]:
    return list(range(0, count, size))


@dataclass
class SignatureTable:
    sample_ids: List[str]
    labels: np.ndarray
    posteriors: np.ndarray  # (n, K)
    fr: np.ndarray
    ph: np.ndarray
    ad: np.ndarray  # (n, depth, heads)
    latents: np.ndarray  # (n, 3 * depth, tokens, embed_dim)
    s_ap: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def predictions(self) -> np.ndarray:
        return self.posteriors.argmax(axis=1)


def extract_signatures(weights: ViTWeights, images: np.ndarray, labels: np.ndarray, sample_ids: List[str],
                       phi: int, workers: int, reference: Optional[AttentionProfile] = None) -> SignatureTable:
    grid = PatchGrid.from_config(weights.config)

    def work(start: int):
        batch = images[start:start + CHUNK_SIZE]
        traces = forward_batch(weights, batch)
        return [(trace.posterior, frequency_ratio(image, phi), posterior_entropy(trace.posterior),
                 attention_profile(trace, grid).distances, trace.latents)
                for trace, image in zip(traces, batch)]

    rows = [row for chunk in parallel_map(work, chunk_starts(len(images)), workers) for row in chunk]
    if not rows:
        raise DataError("No samples to extract signatures from")
    posteriors, fr, ph, ad, latents = (np.stack(column) for column in zip(*rows))
    table = SignatureTable(list(sample_ids), np.asarray(labels), posteriors, fr, ph, ad, latents)
    if reference is not None:
        table.s_ap = np.array([attention_profile_summary(AttentionProfile(d), reference) for d in ad])
    return table


def ad_columns(depth: int, heads: int) -> List[str]:
    return [f"ad_b{b}h{h}" for b in range(depth) for h in range(heads)]


def write_signature_table(ctx: RunContext, tag: str, table: SignatureTable):
    depth, heads = table.ad.shape[1:]
    header = ["sample_id", "attack_tag", "seed", "label", "prediction", "fr", "ph", *ad_columns(depth, heads), "s_ap"]
    rows = (
        [sample_id, tag, ctx.config.seed, int(label), int(pred), fr, ph, *ad.reshape(-1).tolist(), s_ap]
        for sample_id, label, pred, fr, ph, ad, s_ap in zip(table.sample_ids, table.labels, table.predictions,
                                                            table.fr, table.ph, table.ad, table.s_ap)
    )
    write_csv(ctx.signatures_dir / f"{tag}.csv", header, rows)
    save_tensor(ctx.signatures_dir / f"{tag}_posteriors.vtf", table.posteriors)
    save_tensor(ctx.signatures_dir / f"{tag}_ad.vtf", table.ad)


@dataclass
class StoredSignatures:
    sample_ids: List[str]
    labels: np.ndarray
    predictions: np.ndarray
    fr: np.ndarray
    ph: np.ndarray
    s_ap: np.ndarray
    ad: np.ndarray
    posteriors: np.ndarray


def read_signature_table(ctx: RunContext, tag: str) -> StoredSignatures:
    path = ctx.signatures_dir / f"{tag}.csv"
    if not path.exists():
        raise DataError(f"No signatures for {tag!r}; run the extract stage first")
    rows = read_csv(path)
    return StoredSignatures(
        sample_ids=[row["sample_id"] for row in rows],
        labels=np.array([int(row["label"]) for row in rows]),
        predictions=np.array([int(row["prediction"]) for row in rows]),
        fr=np.array([float(row["fr"]) for row in rows]),
        ph=np.array([float(row["ph"]) for row in rows]),
        s_ap=np.array([float(row["s_ap"]) for row in rows]),
        ad=load_tensor(ctx.signatures_dir / f"{tag}_ad.vtf"),
        posteriors=load_tensor(ctx.signatures_dir / f"{tag}_posteriors.vtf"),
    )


@dataclass
class ReferenceProfile:
    ad: AttentionProfile
    m_ref: CkaMatrix
    clean_count: int
    phi: int
    cka_batch: int
    max_distance: float

    def save(self, directory: Path):
        save_tensor(directory / "ad_reference.vtf", self.ad.distances)
        save_tensor(directory / "m_ref.vtf", self.m_ref.values)
        write_json(directory / "m_ref.json", {"m": self.m_ref.batch_size, "tap_names": self.m_ref.tap_names,
                                              "undefined": np.argwhere(self.m_ref.undefined).tolist()})
        write_json(directory / "reference.json", {
            "clean_count": self.clean_count,
            "phi": self.phi,
            "cka_batch": self.cka_batch,
            "max_distance": self.max_distance,
            "ad": self.ad.distances.tolist(),
        })

    @classmethod
    def load(cls, directory: Path) -> "ReferenceProfile":
        if not (directory / "reference.json").exists():
            raise DataError(f"No reference profile in {directory}; run the build-reference stage first")
        meta = read_json(directory / "reference.json")
        cka_meta = read_json(directory / "m_ref.json")
        return cls(
            ad=AttentionProfile(load_tensor(directory / "ad_reference.vtf")),
            m_ref=CkaMatrix(load_tensor(directory / "m_ref.vtf"), cka_meta["m"], cka_meta["tap_names"]),
            clean_count=meta["clean_count"],
            phi=meta["phi"],
            cka_batch=meta["cka_batch"],
            max_distance=meta["max_distance"],
        )


def load_attacked_set(ctx: RunContext, tag: str) -> Dataset:
    directory = ctx.attacks_dir / tag
    rows = read_csv(directory / "manifest.csv")
    if not rows:
        raise DataError(f"Attack manifest for {tag!r} is empty")
    rows.sort(key=lambda row: row["source_file"])
    images = np.stack([load_tensor(directory / row["source_file"]) for row in rows])
    return Dataset([row["source_file"] for row in rows], images, np.array([int(row["label"]) for row in rows]))


def attacked_tags(ctx: RunContext) -> List[str]:
    """Grid tags in config order whose attack output exists on disk."""
    return [tag for tag in ctx.attack_specs() if (ctx.attacks_dir / tag / "manifest.csv").exists()]


@dataclass
class CkaTable:
    s_cka: np.ndarray  # per batch
    layers: np.ndarray  # (batches, layers) row sums of each batch's D
    layer_names: List[str]


def read_cka_table(ctx: RunContext, tag: str) -> CkaTable:
    path = ctx.signatures_dir / f"{tag}_cka.csv"
    if not path.exists():
        raise DataError(f"No CKA signatures for {tag!r}; run the extract stage first")
    rows = read_csv(path)
    if not rows:
        raise DataError(f"{path}: no CKA batches")
    names = [key for key in rows[0] if key not in ("batch", "sample_ids", "s_cka")]
    return CkaTable(
        s_cka=np.array([float(row["s_cka"]) for row in rows]),
        layers=np.array([[float(row[name]) for name in names] for row in rows]),
        layer_names=names,
    )
