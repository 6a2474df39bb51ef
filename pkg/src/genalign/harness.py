"""Evaluation report assembly and the ablation grid.

Retrieval directions are evaluated on the test split with the same-patient
counterpart as the true match, against a per-query shuffled random baseline;
paired Wilcoxon tests on reciprocal ranks are Bonferroni-corrected over the
four directions.  The ablation grid varies one factor per row (aggregator
init/pooling, karyotype resolution, reconstruction weight) with the other
factors at their defaults, sharing seeds so reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit as ek
from .align import AlignConfig, AlignedTable, embed_cohort, project, train_align
from .aggregator import AggregatorConfig
from .cohort import Cohort
from .evalkit import RankedList, RetrievalIndex, StatReport
from .ndiff import Tensor

MODALITY_TAGS = {"slide": "S", "karyotype": "K", "mutation": "M"}
DIRECTIONS = [
    ("slide", "karyotype"),
    ("karyotype", "slide"),
    ("slide", "mutation"),
    ("mutation", "slide"),
]


def _modality_matrix(table: AlignedTable, modality: str) -> np.ndarray:
    return {
        "slide": table.z_slide,
        "karyotype": table.z_karyotype,
        "mutation": table.z_mutation,
    }[modality]


def direction_tag(query: str, target: str) -> str:
    return f"{MODALITY_TAGS[query]}->{MODALITY_TAGS[target]}"


def cross_modal_rankings(
    table: AlignedTable, query: str, target: str, split: str = "test"
) -> tuple[list[RankedList], dict[str, str]]:
    rows = table.rows(split)
    if rows.size == 0:
        raise ek.EvalError(f"no patients in split {split!r}")
    ids = [table.patient_ids[i] for i in rows]
    index = RetrievalIndex(ids, _modality_matrix(table, target)[rows], modality=target)
    queries = _modality_matrix(table, query)[rows]
    ranked = [ek.retrieve(pid, queries[j], index) for j, pid in enumerate(ids)]
    return ranked, {pid: pid for pid in ids}


def random_rankings(
    ranked: list[RankedList], rng: np.random.Generator
) -> list[RankedList]:
    """Per-query shuffled candidate order (the random retrieval baseline)."""
    out = []
    for r in ranked:
        perm = rng.permutation(len(r.candidate_ids))
        out.append(
            RankedList(
                r.query_id,
                [r.candidate_ids[i] for i in perm],
                np.zeros(len(perm)),
            )
        )
    return out


def _mean(items: list) -> float:
    return float(np.mean(items))


def _stat_from_values(name: str, values: np.ndarray, n_boot: int, seed: int) -> StatReport:
    summary = ek.bootstrap(_mean, list(values), n_boot=n_boot, seed=seed)
    return StatReport(name, summary.point, summary.boot_mean, summary.boot_std, n_boot)


def retrieval_block(
    table: AlignedTable,
    split: str = "test",
    n_boot: int = 1000,
    seed: int = 0,
    top_ks: tuple[int, ...] = (1, 5),
) -> dict:
    """Cross-modal retrieval metrics vs the random baseline, all directions."""
    rng = np.random.default_rng(seed)
    block: dict = {}
    m_corrections = len(DIRECTIONS)
    for d, (query, target) in enumerate(DIRECTIONS):
        ranked, matches = cross_modal_rankings(table, query, target, split)
        baseline = random_rankings(ranked, rng)
        rr_model = ek.reciprocal_ranks(ranked, matches)
        rr_random = ek.reciprocal_ranks(baseline, matches)
        tag = direction_tag(query, target)
        entry: dict = {}
        for k in top_ks:
            hits_model = np.array(
                [matches[r.query_id] in r.candidate_ids[:k] for r in ranked], float
            )
            hits_random = np.array(
                [matches[r.query_id] in r.candidate_ids[:k] for r in baseline], float
            )
            entry[f"top{k}"] = _stat_from_values(
                f"{tag} top-{k}", hits_model, n_boot, seed + 10 * d + k
            ).to_dict()
            entry[f"top{k}_random"] = _stat_from_values(
                f"{tag} top-{k} random", hits_random, n_boot, seed + 10 * d + k + 1000
            ).to_dict()
        test = ek.wilcoxon_signed_rank(rr_model, rr_random)
        mrr_stat = _stat_from_values(f"{tag} MRR", rr_model, n_boot, seed + 10 * d + 7)
        mrr_stat.p_value = test.p_value
        mrr_stat.p_bonferroni = ek.bonferroni(test.p_value, m_corrections)
        entry["mrr"] = mrr_stat.to_dict()
        entry["mrr_random"] = _stat_from_values(
            f"{tag} MRR random", rr_random, n_boot, seed + 10 * d + 1007
        ).to_dict()
        entry["wilcoxon"] = {
            "statistic": test.statistic,
            "n": test.n,
            "method": test.method,
            "p_value": test.p_value,
            "p_bonferroni": ek.bonferroni(test.p_value, m_corrections),
        }
        block[tag] = entry
    return block


def slide_retrieval_block(
    table: AlignedTable, split: str = "test", k: int = 3,
    n_boot: int = 1000, seed: int = 0,
) -> dict:
    """Same-class slide-to-slide retrieval, mAP@k."""
    rows = table.rows(split)
    ids = [table.patient_ids[i] for i in rows]
    labels = {pid: table.labels[i] for i, pid in zip(rows, ids)}
    index = RetrievalIndex(ids, table.z_slide[rows], modality="slide")
    ranked = [
        ek.retrieve(pid, table.z_slide[i], index, exclude_self=True)
        for i, pid in zip(rows, ids)
    ]
    relevance = {
        pid: {other for other in ids if other != pid and labels[other] == labels[pid]}
        for pid in ids
    }
    point, skipped = ek.map_at_k(ranked, relevance, k)
    per_query = [
        ek.average_precision_at_k(r, relevance[r.query_id], k)
        for r in ranked
        if relevance[r.query_id]
    ]
    stat = _stat_from_values(f"S->S mAP@{k}", np.array(per_query), n_boot, seed)
    return {"map_at_k": stat.to_dict(), "k": k, "skipped_queries": skipped,
            "ap_normalizer": "min(|relevant|, k)"}


def probe_block(
    table: AlignedTable, k: int = 5, l2_strength: float = 1.0,
    n_boot: int = 1000, seed: int = 0,
) -> dict:
    """k-NN and logistic-regression probes on the slide embeddings."""
    train_rows = table.rows("train")
    test_rows = table.rows("test")
    train_x = table.slide[train_rows]
    train_y = np.array([table.labels[i] for i in train_rows])
    test_x = table.slide[test_rows]
    test_y = np.array([table.labels[i] for i in test_rows])
    knn_bacc = ek.knn_probe(train_x, train_y, test_x, test_y, k=k)
    logreg = ek.logreg_probe(train_x, train_y, test_x, test_y, l2_strength=l2_strength)
    return {
        "knn": {"k": k, "balanced_accuracy": knn_bacc},
        "logreg": {
            "balanced_accuracy": logreg.balanced_accuracy,
            "converged": logreg.converged,
            "l2_strength": l2_strength,
        },
    }


def logreg_bootstrap(
    table: AlignedTable, n_boot: int, seed: int, l2_strength: float = 1.0
) -> StatReport:
    """Fit once on train, bootstrap the test (truth, prediction) pairs."""
    train_rows = table.rows("train")
    test_rows = table.rows("test")
    train_y = np.array([table.labels[i] for i in train_rows])
    test_y = np.array([table.labels[i] for i in test_rows])
    result = ek.logreg_probe(
        table.slide[train_rows], train_y, table.slide[test_rows], test_y,
        l2_strength=l2_strength,
    )
    pairs = list(zip(test_y.tolist(), result.predictions.tolist()))
    summary = ek.bootstrap(
        lambda items: ek.balanced_accuracy(
            np.array([t for t, _ in items]), np.array([p for _, p in items])
        ),
        pairs, n_boot=n_boot, seed=seed,
    )
    return StatReport("logreg bAcc", result.balanced_accuracy,
                      summary.boot_mean, summary.boot_std, n_boot)


def mrr_report(table: AlignedTable, query: str, target: str,
               n_boot: int, seed: int) -> StatReport:
    ranked, matches = cross_modal_rankings(table, query, target)
    rr = ek.reciprocal_ranks(ranked, matches)
    return _stat_from_values(f"{direction_tag(query, target)} MRR", rr, n_boot, seed)


def per_gene_block(
    table: AlignedTable,
    cohort: Cohort,
    params: dict,
    gene_names: list[str] | None = None,
    split: str = "test",
    n_boot: int = 200,
    seed: int = 0,
) -> dict:
    """Per-gene retrieval F1: gene->slide via one-hot gene queries through
    the mutation projector, slide->gene via nearest-gene assignment."""
    rows = table.rows(split)
    ids = [table.patient_ids[i] for i in rows]
    by_id = {p.patient_id: p for p in cohort.patients}
    n_genes = len(by_id[ids[0]].mutations)
    names = gene_names or [f"gene{g:02d}" for g in range(n_genes)]
    positives = {
        names[g]: {pid for pid in ids if by_id[pid].mutations[g]}
        for g in range(n_genes)
    }
    # genes need at least one positive and one negative test patient
    usable = {g: n for g, n in enumerate(names)
              if 0 < len(positives[n]) < len(ids)}
    gene_embeddings = project(
        Tensor(np.eye(n_genes, dtype=np.float32)), params, "proj_m"
    ).data
    index = RetrievalIndex(ids, table.z_slide[rows], modality="slide")
    rankings = {
        name: ek.retrieve(name, gene_embeddings[g], index)
        for g, name in usable.items()
    }
    gene_to_slide = ek.per_gene_f1(rankings, {n: positives[n] for n in rankings})
    assignment = ek.nearest_gene_assignment(
        ids, table.z_slide[rows],
        [names[g] for g in usable], gene_embeddings[list(usable)],
    )
    slide_to_gene = ek.per_gene_f1_from_assignment(
        assignment, {n: positives[n] for n in rankings}
    )
    rng = np.random.default_rng(seed)
    random_f1 = {}
    for name, ranked in rankings.items():
        values = []
        for _ in range(n_boot):
            perm = rng.permutation(len(ids))
            shuffled = RankedList(name, [ids[i] for i in perm], np.zeros(len(ids)))
            values.append(ek.per_gene_f1({name: shuffled}, {name: positives[name]})[name])
        random_f1[name] = float(np.mean(values))
    return {
        "genes": {
            name: {
                "n_positive": len(positives[name]),
                "gene_to_slide_f1": gene_to_slide[name],
                "slide_to_gene_f1": slide_to_gene[name],
                "random_f1": random_f1[name],
            }
            for name in sorted(rankings)
        }
    }


ALL_TASKS = ("retrieval", "slide_retrieval", "knn", "logreg", "per_gene")


def evaluate_report(
    cohort: Cohort,
    params: dict,
    agg_config: AggregatorConfig,
    align_config: AlignConfig,
    tasks: tuple[str, ...] = ALL_TASKS,
    seed: int = 0,
    n_boot: int = 1000,
) -> dict:
    table = embed_cohort(cohort, params, agg_config, align_config)
    report: dict = {
        "seed": seed,
        "n_boot": n_boot,
        "n_patients": {"train": int(table.rows("train").size),
                       "test": int(table.rows("test").size)},
        "tasks": {},
    }
    wanted = set(tasks)
    if "retrieval" in wanted:
        report["tasks"]["retrieval"] = retrieval_block(table, n_boot=n_boot, seed=seed)
    if "slide_retrieval" in wanted:
        report["tasks"]["slide_retrieval"] = slide_retrieval_block(
            table, n_boot=n_boot, seed=seed
        )
    if wanted & {"knn", "logreg"}:
        probes = probe_block(table, n_boot=n_boot, seed=seed)
        if "knn" not in wanted:
            probes.pop("knn")
        if "logreg" not in wanted:
            probes.pop("logreg")
        report["tasks"]["probes"] = probes
    if "per_gene" in wanted:
        report["tasks"]["per_gene"] = per_gene_block(
            table, cohort, params, seed=seed, n_boot=min(n_boot, 200)
        )
    return report


def report_to_tsv(report: dict) -> str:
    """Flatten every numeric leaf into metric<TAB>value lines."""
    lines = ["metric\tvalue"]

    def walk(prefix, node):
        if isinstance(node, dict):
            for key in sorted(node):
                walk(f"{prefix}.{key}" if prefix else str(key), node[key])
        elif isinstance(node, (int, float)) and not isinstance(node, bool):
            lines.append(f"{prefix}\t{node}")

    walk("", report)
    return "\n".join(lines) + "\n"


AGGREGATOR_SETTINGS = {
    "transformer_pretrained": {"aggregator_mode": "finetune", "init": "pretrained"},
    "transformer_random": {"aggregator_mode": "finetune", "init": "random"},
    "mean_pool": {"aggregator_mode": "mean_pool", "init": "random"},
}


@dataclass
class AblationGrid:
    aggregator: list[str] = field(
        default_factory=lambda: list(AGGREGATOR_SETTINGS)
    )
    karyotype_resolution: list[str] = field(default_factory=lambda: ["band", "arm"])
    recon_weight: list[float] = field(default_factory=lambda: [1.0, 0.1, 0.0])
    defaults: dict = field(default_factory=dict)  # AlignConfig overrides
    n_boot: int = 200
    seed: int = 0


def run_ablation(
    cohort: Cohort,
    agg_config: AggregatorConfig,
    grid: AblationGrid,
    pretrained_aggregator: dict | None = None,
) -> dict:
    """One row per setting per axis, other factors at their defaults."""
    base = {
        "aggregator_mode": "finetune",
        "init": "pretrained" if pretrained_aggregator is not None else "random",
        "karyotype_resolution": "band",
        "recon_weight": 1.0,
        "seed": grid.seed,
        **grid.defaults,
    }
    rows = []

    def evaluate_setting(ablation: str, setting: str, overrides: dict) -> dict:
        cfg = AlignConfig(**{**base, **overrides})
        result = train_align(
            cohort, agg_config, cfg,
            pretrained_aggregator=(
                pretrained_aggregator if cfg.init == "pretrained" else None
            ),
        )
        table = result.table
        logreg = logreg_bootstrap(table, n_boot=grid.n_boot, seed=grid.seed)
        sk = mrr_report(table, "slide", "karyotype", grid.n_boot, grid.seed + 1)
        ks = mrr_report(table, "karyotype", "slide", grid.n_boot, grid.seed + 2)
        return {
            "ablation": ablation,
            "setting": setting,
            "logreg_bacc": logreg.to_dict(),
            "sk_mrr": sk.to_dict(),
            "ks_mrr": ks.to_dict(),
        }

    for setting in grid.aggregator:
        if setting not in AGGREGATOR_SETTINGS:
            raise ValueError(f"unknown aggregator setting {setting!r}")
        overrides = dict(AGGREGATOR_SETTINGS[setting])
        if overrides["init"] == "pretrained" and pretrained_aggregator is None:
            overrides["init"] = "random"
        rows.append(evaluate_setting("aggregator", setting, overrides))
    for resolution in grid.karyotype_resolution:
        rows.append(
            evaluate_setting("karyotype_resolution", resolution,
                             {"karyotype_resolution": resolution})
        )
    for weight in grid.recon_weight:
        rows.append(
            evaluate_setting("recon_weight", f"lambda_r={weight}",
                             {"recon_weight": weight})
        )
    return {"seed": grid.seed, "n_boot": grid.n_boot, "rows": rows}


def ablation_to_tsv(result: dict) -> str:
    header = ["ablation", "setting", "logreg_bacc", "logreg_std",
              "sk_mrr", "sk_std", "ks_mrr", "ks_std"]
    lines = ["\t".join(header)]
    for row in result["rows"]:
        lines.append("\t".join([
            row["ablation"],
            row["setting"],
            f"{row['logreg_bacc']['point']:.4f}",
            f"{row['logreg_bacc']['boot_std']:.4f}",
            f"{row['sk_mrr']['point']:.4f}",
            f"{row['sk_mrr']['boot_std']:.4f}",
            f"{row['ks_mrr']['point']:.4f}",
            f"{row['ks_mrr']['boot_std']:.4f}",
        ]))
    return "\n".join(lines) + "\n"


def save_report(report: dict, json_path: str | Path, tsv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    if tsv_path is not None:
        Path(tsv_path).write_text(report_to_tsv(report))
