"""Supervised stage 2: project slide, karyotype and mutation modalities into
a shared unit sphere and pull same-class patients together across modalities.

The contrastive loss treats every same-class batch member of the target
modality as a positive for the anchor; each modality pair is trained in both
directions.  Decoders reconstruct the binary genetic vectors from their own
projected embedding (BCE), weighted by ``recon_weight``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gbio, ndiff
from .aggregator import AggregatorConfig, forward, init_params
from .cohort import Cohort, Patient
from .karyogram import load_band_table, rollup_to_arms
from .ndiff import Tape, Tensor
from .optim import AdamW, warmup_cosine_lr
from .pretrain import TrainingError

logger = logging.getLogger(__name__)

AGGREGATOR_MODES = ("finetune", "frozen", "mean_pool")
INIT_MODES = ("pretrained", "random")
KARYOTYPE_RESOLUTIONS = ("band", "arm")


@dataclass
class AlignConfig:
    temperature: float = 0.1
    recon_weight: float = 1.0
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    aggregator_lr: float = 1e-5
    init: str = "pretrained"
    aggregator_mode: str = "finetune"
    karyotype_resolution: str = "band"
    shared_dim: int = 128
    head_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.recon_weight < 0:
            raise ValueError("recon_weight must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.aggregator_mode not in AGGREGATOR_MODES:
            raise ValueError(f"aggregator_mode must be one of {AGGREGATOR_MODES}")
        if self.karyotype_resolution not in KARYOTYPE_RESOLUTIONS:
            raise ValueError(
                f"karyotype_resolution must be one of {KARYOTYPE_RESOLUTIONS}"
            )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SupconStats:
    empty_anchor_count: int = 0
    empty_batch_count: int = 0


def _check_unit_rows(x: Tensor, name: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise ValueError(f"{name}: rows must be unit-norm (max deviation "
                         f"{np.abs(norms - 1.0).max():.2e})")


def supcon_directional(
    anchors: Tensor,
    targets: Tensor,
    labels: np.ndarray,
    temperature: float,
    stats: SupconStats | None = None,
) -> Tensor:
    """Anchor->target supervised contrastive loss over one batch.

    Positives for anchor p are the other batch rows with the same label; the
    softmax denominator runs over the whole batch.  Anchors without positives
    contribute nothing and are left out of the average (counted in ``stats``).
    """
    labels = np.asarray(labels)
    batch = anchors.shape[0]
    if batch < 2:
        raise ValueError(f"supcon needs a batch of >= 2, got {batch}")
    if anchors.shape != targets.shape:
        raise ValueError(f"anchor/target shapes differ: {anchors.shape} vs {targets.shape}")
    _check_unit_rows(anchors, "anchors")
    _check_unit_rows(targets, "targets")
    same = labels[:, None] == labels[None, :]
    positives = same & ~np.eye(batch, dtype=bool)
    counts = positives.sum(axis=1)
    alive = counts > 0
    n_alive = int(alive.sum())
    if stats is not None:
        stats.empty_anchor_count += batch - n_alive
    if n_alive == 0:
        if stats is not None:
            stats.empty_batch_count += 1
        return Tensor(np.zeros((), dtype=anchors.dtype))
    weights = np.zeros((batch, batch), dtype=anchors.data.dtype)
    weights[alive] = positives[alive] / counts[alive, None]
    sim = ndiff.scalar_mul(ndiff.matmul(anchors, ndiff.transpose(targets)), 1.0 / temperature)
    log_prob = ndiff.log_softmax(sim, axis=-1)
    weighted = ndiff.mul(Tensor(weights), log_prob)
    # mean over B^2 entries -> rescale to -(1/n_alive) * sum
    return ndiff.scalar_mul(ndiff.mean(weighted), -(batch * batch) / n_alive)


def supcon_symmetric(
    z_a: Tensor,
    z_b: Tensor,
    labels: np.ndarray,
    temperature: float,
    stats: SupconStats | None = None,
) -> Tensor:
    forward_loss = supcon_directional(z_a, z_b, labels, temperature, stats)
    backward_loss = supcon_directional(z_b, z_a, labels, temperature, stats)
    return ndiff.scalar_mul(ndiff.add(forward_loss, backward_loss), 0.5)


def reconstruction_loss(logits: Tensor, targets: np.ndarray | Tensor) -> Tensor:
    """Mean BCE-with-logits over all entries."""
    if not isinstance(targets, Tensor):
        targets = Tensor(np.asarray(targets, dtype=logits.dtype))
    return ndiff.mean(ndiff.binary_cross_entropy_with_logits(logits, targets))


def init_mlp_params(
    in_dim: int,
    hidden: int,
    out_dim: int,
    prefix: str,
    rng: np.random.Generator,
    dtype=np.float32,
) -> dict[str, Tensor]:
    def param(shape, scale):
        return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)

    # hidden bias gets small noise so an all-zero input (e.g. a normal
    # karyotype) still projects to a usable direction instead of the exact
    # zero vector
    return {
        f"{prefix}.w1": param((in_dim, hidden), math.sqrt(2.0 / in_dim)),
        f"{prefix}.b1": param((1, hidden), 0.01),
        f"{prefix}.w2": param((hidden, out_dim), math.sqrt(2.0 / hidden)),
        f"{prefix}.b2": Tensor(np.zeros((1, out_dim), dtype=dtype), requires_grad=True),
    }


def mlp_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ndiff.gelu(ndiff.add(ndiff.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ndiff.add(ndiff.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def project(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return ndiff.l2_normalize(mlp_forward(x, params, prefix), axis=-1)


@dataclass
class AlignedTable:
    patient_ids: list[str]
    labels: list[str]
    splits: list[str]
    slide: np.ndarray  # (N, D) patient embeddings
    z_slide: np.ndarray  # (N, shared_dim) unit rows
    z_karyotype: np.ndarray
    z_mutation: np.ndarray

    def rows(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.patient_ids))
        return np.array([i for i, s in enumerate(self.splits) if s == split])

    def save(self, out_dir: str | Path, stem: str = "aligned") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, mat in [
            ("slide", self.slide),
            ("zs", self.z_slide),
            ("zk", self.z_karyotype),
            ("zm", self.z_mutation),
        ]:
            path = out_dir / f"{stem}.{name}.gbm"
            gbio.write_gbm(path, gbio.Matrix(mat.astype(np.float32), self.patient_ids))
            paths.append(path)
        index = {
            "patient_ids": self.patient_ids,
            "labels": self.labels,
            "splits": self.splits,
            "files": {p.name.split(".")[-2]: p.name for p in paths},
        }
        index_path = out_dir / f"{stem}.index.json"
        index_path.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
        paths.append(index_path)
        return paths


def load_table(out_dir: str | Path, stem: str = "aligned") -> AlignedTable:
    out_dir = Path(out_dir)
    index = json.loads((out_dir / f"{stem}.index.json").read_text())
    mats = {
        name: gbio.read_gbm(out_dir / f"{stem}.{name}.gbm").data
        for name in ("slide", "zs", "zk", "zm")
    }
    return AlignedTable(
        patient_ids=index["patient_ids"],
        labels=index["labels"],
        splits=index["splits"],
        slide=mats["slide"],
        z_slide=mats["zs"],
        z_karyotype=mats["zk"],
        z_mutation=mats["zm"],
    )


def stratified_batches(
    labels: list[str], batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Class-stratified batches: members are dealt out two per class per round
    so every class present in a batch has >= 2 members whenever it still has
    >= 2 unassigned."""
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    queues = {}
    for lab in sorted(by_class):
        members = np.array(by_class[lab])
        queues[lab] = list(rng.permutation(members))
    class_order = sorted(queues)
    batches: list[list[int]] = []
    current: list[int] = []
    while any(queues.values()):
        for lab in class_order:
            queue = queues[lab]
            take = min(2, len(queue))
            for _ in range(take):
                current.append(int(queue.pop()))
                if len(current) == batch_size:
                    batches.append(current)
                    current = []
    if current:
        if len(current) == 1 and batches:
            batches[-1].extend(current)
        else:
            batches.append(current)
    return [np.array(b) for b in batches]


def _karyotype_matrix(patients: list[Patient], resolution: str) -> np.ndarray:
    mat = np.stack([p.karyotype for p in patients]).astype(np.float32)
    if resolution == "arm":
        table = load_band_table()
        mat = np.stack(
            [rollup_to_arms(p.karyotype.astype(np.uint8), table) for p in patients]
        ).astype(np.float32)
    return mat


@dataclass
class AlignResult:
    params: dict[str, Tensor]
    agg_config: AggregatorConfig
    config: AlignConfig
    metrics: list[dict]
    table: AlignedTable
    excluded: list[str] = field(default_factory=list)
    slide_dim: int = 0

    def save(self, path: str | Path) -> None:
        gbio.write_gbck(
            path,
            {name: p.data for name, p in self.params.items()},
            config={
                "stage": "align",
                "aggregator": self.agg_config.to_dict(),
                "align": self.config.to_dict(),
                "slide_dim": self.slide_dim,
            },
            epoch=len(self.metrics),
            seed=self.config.seed,
        )


def _slide_embedding_dim(agg_config: AggregatorConfig, mode: str) -> int:
    return agg_config.input_dim if mode == "mean_pool" else agg_config.embed_dim


def _slide_constant(patient: Patient, mode: str) -> np.ndarray:
    # mean_pool: unweighted average of the raw cell embeddings
    return patient.bag.cells.mean(axis=0)


def init_align_params(
    agg_config: AggregatorConfig,
    config: AlignConfig,
    d_karyotype: int,
    d_mutation: int,
    rng: np.random.Generator,
    aggregator_params: dict[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    if config.aggregator_mode != "mean_pool":
        if aggregator_params is None:
            aggregator_params = init_params(agg_config, rng)
        for name, p in aggregator_params.items():
            params[f"agg.{name}"] = p
    slide_dim = _slide_embedding_dim(agg_config, config.aggregator_mode)
    params.update(init_mlp_params(slide_dim, config.head_hidden, config.shared_dim, "proj_s", rng))
    params.update(init_mlp_params(d_karyotype, config.head_hidden, config.shared_dim, "proj_k", rng))
    params.update(init_mlp_params(d_mutation, config.head_hidden, config.shared_dim, "proj_m", rng))
    params.update(init_mlp_params(config.shared_dim, config.head_hidden, d_karyotype, "dec_k", rng))
    params.update(init_mlp_params(config.shared_dim, config.head_hidden, d_mutation, "dec_m", rng))
    return params


def _aggregator_subset(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k[len("agg."):]: v for k, v in params.items() if k.startswith("agg.")}


def _slide_batch(
    patients: list[Patient],
    params: dict[str, Tensor],
    agg_config: AggregatorConfig,
    mode: str,
    cache: np.ndarray | None,
    batch: np.ndarray,
) -> Tensor:
    if cache is not None:
        return Tensor(cache[batch])
    agg_params = _aggregator_subset(params)
    rows = [
        forward(patients[i].bag.cells, np.empty(0, np.int64), agg_params, agg_config).cls
        for i in batch
    ]
    return ndiff.concat_rows(rows)


def train_align(
    cohort: Cohort,
    agg_config: AggregatorConfig,
    config: AlignConfig,
    pretrained_aggregator: dict[str, Tensor] | None = None,
    metrics_path: str | Path | None = None,
) -> AlignResult:
    rng = np.random.default_rng(config.seed)
    train_all = cohort.subset("train")
    excluded = [p.patient_id for p in train_all if not p.complete]
    if excluded:
        logger.warning("excluding %d patients with missing modalities: %s",
                       len(excluded), ", ".join(excluded))
    train = [p for p in train_all if p.complete]
    if len(train) < 2:
        raise TrainingError("need at least 2 complete training patients")
    if config.init == "pretrained" and config.aggregator_mode != "mean_pool":
        if pretrained_aggregator is None:
            raise TrainingError("init='pretrained' requires a stage-1 checkpoint")
        expected = agg_config.embed_dim
        got = pretrained_aggregator["embed.w2"].shape[1]
        if got != expected:
            raise TrainingError(
                f"checkpoint embed_dim {got} does not match configured {expected}"
            )
        aggregator_params = {k: Tensor(v.data.copy(), requires_grad=True)
                             for k, v in pretrained_aggregator.items()
                             if not k.startswith("head.")}
    else:
        aggregator_params = None  # fresh random init (or unused for mean_pool)

    karyo = _karyotype_matrix(train, config.karyotype_resolution)
    mut = np.stack([p.mutations for p in train]).astype(np.float32)
    labels = [p.label for p in train]
    params = init_align_params(
        agg_config, config, karyo.shape[1], mut.shape[1], rng, aggregator_params
    )

    trainable = dict(params)
    slide_cache = None
    if config.aggregator_mode == "mean_pool":
        slide_cache = np.stack([_slide_constant(p, "mean_pool") for p in train])
        trainable = {k: v for k, v in params.items() if not k.startswith("agg.")}
    elif config.aggregator_mode == "frozen":
        agg_params = _aggregator_subset(params)
        slide_cache = np.stack([
            forward(p.bag.cells, np.empty(0, np.int64), agg_params, agg_config).cls.data[0]
            for p in train
        ])
        trainable = {k: v for k, v in params.items() if not k.startswith("agg.")}

    optimizer = AdamW(
        trainable,
        lr=config.lr,
        lr_scale={"agg.": config.aggregator_lr / config.lr},
    )
    n_batches = max(1, math.ceil(len(train) / config.batch_size))
    total_steps = config.epochs * n_batches
    metrics: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        stats = SupconStats()
        sums = {"supcon_sk": 0.0, "supcon_sm": 0.0, "recon": 0.0, "total": 0.0}
        weight = 0
        for batch in stratified_batches(labels, config.batch_size, rng):
            batch_labels = np.array([labels[i] for i in batch])
            with Tape() as tape:
                slide = _slide_batch(train, params, agg_config,
                                     config.aggregator_mode, slide_cache, batch)
                z_s = project(slide, params, "proj_s")
                z_k = project(Tensor(karyo[batch]), params, "proj_k")
                z_m = project(Tensor(mut[batch]), params, "proj_m")
                loss_sk = supcon_symmetric(z_s, z_k, batch_labels, config.temperature, stats)
                loss_sm = supcon_symmetric(z_s, z_m, batch_labels, config.temperature, stats)
                loss = ndiff.add(loss_sk, loss_sm)
                recon_value = 0.0
                if config.recon_weight > 0:
                    recon_k = reconstruction_loss(
                        mlp_forward(z_k, params, "dec_k"), karyo[batch]
                    )
                    recon_m = reconstruction_loss(
                        mlp_forward(z_m, params, "dec_m"), mut[batch]
                    )
                    recon = ndiff.add(recon_k, recon_m)
                    recon_value = float(recon.data)
                    loss = ndiff.add(loss, ndiff.scalar_mul(recon, config.recon_weight))
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingError(f"non-finite loss in epoch {epoch}")
            grads = tape.backward(loss)
            optimizer.step(grads, lr=warmup_cosine_lr(step, total_steps, config.lr))
            step += 1
            b = len(batch)
            weight += b
            sums["supcon_sk"] += float(loss_sk.data) * b
            sums["supcon_sm"] += float(loss_sm.data) * b
            sums["recon"] += recon_value * b
            sums["total"] += loss_value * b
        record = {"epoch": epoch, **{k: v / weight for k, v in sums.items()},
                  "empty_anchors": stats.empty_anchor_count}
        metrics.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    table = embed_cohort(cohort, params, agg_config, config)
    return AlignResult(
        params=params,
        agg_config=agg_config,
        config=config,
        metrics=metrics,
        table=table,
        excluded=excluded,
        slide_dim=_slide_embedding_dim(agg_config, config.aggregator_mode),
    )


def project_slides(
    patients: list[Patient],
    params: dict[str, Tensor],
    agg_config: AggregatorConfig,
    config: AlignConfig,
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Slide embeddings and their shared-space projections (no genetics
    needed, no gradients)."""
    withbags = [p for p in patients if p.bag is not None]
    if not withbags:
        raise ValueError("no patients with cell bags")
    agg_params = _aggregator_subset(params)
    if config.aggregator_mode == "mean_pool":
        slide = np.stack([_slide_constant(p, "mean_pool") for p in withbags])
    else:
        slide = np.stack([
            forward(p.bag.cells, np.empty(0, np.int64), agg_params, agg_config).cls.data[0]
            for p in withbags
        ])
    z_s = project(Tensor(slide.astype(np.float32)), params, "proj_s").data
    ids = [p.patient_id for p in withbags]
    return ids, slide.astype(np.float32), z_s.astype(np.float32)


def embed_cohort(
    cohort: Cohort,
    params: dict[str, Tensor],
    agg_config: AggregatorConfig,
    config: AlignConfig,
) -> AlignedTable:
    """Project every complete patient into the shared space (no gradients)."""
    patients = [p for p in cohort.patients if p.complete]
    _, slide, _ = project_slides(patients, params, agg_config, config)
    karyo = _karyotype_matrix(patients, config.karyotype_resolution)
    mut = np.stack([p.mutations for p in patients]).astype(np.float32)
    z_s = project(Tensor(slide.astype(np.float32)), params, "proj_s").data
    z_k = project(Tensor(karyo), params, "proj_k").data
    z_m = project(Tensor(mut), params, "proj_m").data
    return AlignedTable(
        patient_ids=[p.patient_id for p in patients],
        labels=[p.label for p in patients],
        splits=[p.split for p in patients],
        slide=slide.astype(np.float32),
        z_slide=z_s.astype(np.float32),
        z_karyotype=z_k.astype(np.float32),
        z_mutation=z_m.astype(np.float32),
    )


def load_align_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], AggregatorConfig, AlignConfig]:
    tensors, header = gbio.read_gbck(path)
    if header["config"].get("stage") != "align":
        raise gbio.FormatError(f"{path}: not an alignment checkpoint")
    params = {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    agg_config = AggregatorConfig(**header["config"]["aggregator"])
    align_config = AlignConfig(**header["config"]["align"])
    return params, agg_config, align_config
