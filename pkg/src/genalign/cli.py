"""``genalign`` command line: synth, encode-karyotype, pretrain, align,
embed, retrieve, evaluate, ablate, inspect.

Heavy modules are imported inside the handlers so ``--threads`` can cap the
BLAS pool before numpy loads.  Every command writes a run manifest (config
hash, seed, artifact checksums, wall time) next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path

logger = logging.getLogger("genalign")


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_section(raw: dict, section: str, config_cls, path: str):
    data = raw.get(section, {})
    allowed = {f.name for f in dataclass_fields(config_cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"{path}: unknown {section} config keys: {sorted(unknown)}")
    return config_cls(**data)


def _read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _apply_seed(config, seed_flag):
    if seed_flag is not None:
        config.seed = seed_flag
    return config


def cmd_synth(args) -> int:
    from . import gbio
    from .synthcohort import SynthConfig, generate, oracle_report

    started = time.time()
    raw = _read_json(args.config) if args.config else {}
    allowed = {f.name for f in dataclass_fields(SynthConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"{args.config}: unknown config keys: {sorted(unknown)}")
    config = _apply_seed(SynthConfig(**raw), args.seed)
    cohort = generate(config)
    out_dir = Path(args.out_dir)
    paths = cohort.save(out_dir)
    oracle_path = out_dir / "oracle.json"
    oracle_path.write_text(
        json.dumps(oracle_report(cohort, config), sort_keys=True, indent=2) + "\n"
    )
    paths.append(oracle_path)
    gbio.write_manifest(out_dir, "synth", config.to_dict(), config.seed, paths, started)
    logger.info("wrote cohort of %d patients to %s", len(cohort), out_dir)
    return 0


def cmd_encode_karyotype(args) -> int:
    import numpy as np

    from . import gbio
    from .karyogram import (
        encode_karyotype,
        load_band_table,
        parse_iscn,
        parse_iscn_lenient,
        rollup_to_arms,
    )

    started = time.time()
    table = load_band_table()
    ids, rows, warnings = [], [], []
    with open(args.infile, newline="") as fh:
        for line_no, record in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not record:
                continue
            if len(record) != 2:
                raise ValueError(f"{args.infile}:{line_no}: expected patient_id<TAB>iscn")
            pid, iscn = record
            if args.lenient:
                events, skipped = parse_iscn_lenient(iscn, table)
                for token in skipped:
                    warnings.append({"patient_id": pid, "skipped_token": token})
                    logger.warning("%s: skipped token %r", pid, token)
            else:
                events = parse_iscn(iscn, table)
            vec = encode_karyotype(events, table)
            if args.arm_level:
                vec = rollup_to_arms(vec, table)
            ids.append(pid)
            rows.append(vec)
    if not rows:
        raise ValueError(f"{args.infile}: no karyotypes found")
    matrix = gbio.Matrix(
        np.stack(rows).astype(np.uint8), ids, band_table_sha256=table.sha256
    )
    gbio.write_gbm(args.out, matrix)
    config = {
        "infile": str(args.infile),
        "arm_level": bool(args.arm_level),
        "lenient": bool(args.lenient),
        "warnings": warnings,
    }
    gbio.write_manifest(Path(args.out).parent, "encode-karyotype", config,
                        args.seed or 0, [args.out], started)
    logger.info("encoded %d karyotypes -> %s", len(ids), args.out)
    return 0


def cmd_pretrain(args) -> int:
    from . import gbio
    from .aggregator import AggregatorConfig, cap_bag
    from .cohort import load_cohort
    from .pretrain import PretrainConfig, train_pretrain
    import numpy as np

    started = time.time()
    raw = _read_json(args.config) if args.config else {}
    unknown = set(raw) - {"aggregator", "pretrain"}
    if unknown:
        raise ValueError(f"{args.config}: unknown config sections: {sorted(unknown)}")
    agg_config = _load_section(raw, "aggregator", AggregatorConfig, args.config or "")
    config = _apply_seed(
        _load_section(raw, "pretrain", PretrainConfig, args.config or ""), args.seed
    )
    cohort = load_cohort(args.cohort)
    cap_rng = np.random.default_rng(config.seed)
    bags = [cap_bag(p.bag, agg_config.max_cells, cap_rng) for p in cohort.patients]
    metrics_path = args.metrics
    if metrics_path:
        Path(metrics_path).unlink(missing_ok=True)
    result = train_pretrain(bags, agg_config, config, metrics_path=metrics_path)
    result.save(args.out)
    artifacts = [args.out] + ([metrics_path] if metrics_path else [])
    gbio.write_manifest(
        Path(args.out).parent, "pretrain",
        {"aggregator": agg_config.to_dict(), "pretrain": config.to_dict()},
        config.seed, artifacts, started,
    )
    logger.info("pretrained %d epochs on %d bags -> %s",
                config.epochs, len(bags), args.out)
    return 0


def _load_align_inputs(args):
    from .aggregator import AggregatorConfig
    from .align import AlignConfig
    from .cohort import load_cohort
    from .pretrain import load_checkpoint

    raw = _read_json(args.config) if args.config else {}
    unknown = set(raw) - {"aggregator", "align"}
    if unknown:
        raise ValueError(f"{args.config}: unknown config sections: {sorted(unknown)}")
    config = _apply_seed(
        _load_section(raw, "align", AlignConfig, args.config or ""), args.seed
    )
    cohort = load_cohort(args.cohort, args.karyo, args.mut, args.labels)
    pretrained = None
    if args.init:
        student, _, ckpt_config = load_checkpoint(args.init)
        agg_config = AggregatorConfig(**ckpt_config["aggregator"])
        pretrained = student
    elif "aggregator" in raw:
        agg_config = _load_section(raw, "aggregator", AggregatorConfig, args.config)
    elif config.aggregator_mode == "mean_pool":
        width = cohort.patients[0].bag.cells.shape[1]
        agg_config = AggregatorConfig(depth=1, heads=1, embed_dim=width,
                                      mlp_dim=width, input_dim=width)
    else:
        raise ValueError(
            "align needs --init checkpoint or an 'aggregator' config section"
        )
    return cohort, agg_config, config, pretrained


def cmd_align(args) -> int:
    from . import gbio
    from .align import train_align

    started = time.time()
    cohort, agg_config, config, pretrained = _load_align_inputs(args)
    result = train_align(cohort, agg_config, config,
                         pretrained_aggregator=pretrained,
                         metrics_path=args.metrics)
    result.save(args.out)
    artifacts = [args.out]
    if args.table_dir:
        artifacts += result.table.save(args.table_dir)
    if args.metrics:
        artifacts.append(args.metrics)
    gbio.write_manifest(
        Path(args.out).parent, "align",
        {"aggregator": agg_config.to_dict(), "align": config.to_dict()},
        config.seed, artifacts, started,
    )
    logger.info("aligned %d epochs -> %s", config.epochs, args.out)
    return 0


def cmd_embed(args) -> int:
    import numpy as np

    from . import gbio
    from .aggregator import AggregatorConfig
    from .cohort import load_cohort

    started = time.time()
    header = gbio.inspect_header(args.ckpt)["header"]
    stage = header["config"].get("stage")
    cohort = load_cohort(args.cohort)
    ids = [p.patient_id for p in cohort.patients]
    if stage == "pretrain":
        if args.space != "slide":
            raise ValueError("a pretrain checkpoint only provides --space slide")
        from .pretrain import embed_bags, load_checkpoint

        student, _, config = load_checkpoint(args.ckpt)
        agg_config = AggregatorConfig(**config["aggregator"])
        matrix = embed_bags([p.bag for p in cohort.patients], student, agg_config)
    elif stage == "align":
        from .align import load_align_checkpoint, project_slides

        params, agg_config, align_config = load_align_checkpoint(args.ckpt)
        ids, slide, z_slide = project_slides(
            cohort.patients, params, agg_config, align_config
        )
        matrix = slide if args.space == "slide" else z_slide
    else:
        raise ValueError(f"{args.ckpt}: not a training checkpoint")
    gbio.write_gbm(args.out, gbio.Matrix(matrix.astype(np.float32), ids))
    gbio.write_manifest(Path(args.out).parent, "embed",
                        {"ckpt": str(args.ckpt), "space": args.space},
                        args.seed or 0, [args.out], started)
    logger.info("embedded %d patients -> %s", len(ids), args.out)
    return 0


def cmd_retrieve(args) -> int:
    from . import gbio
    from .align import load_table
    from .harness import cross_modal_rankings

    started = time.time()
    table = load_table(args.table_dir, stem=args.stem)
    ranked, _ = cross_modal_rankings(table, args.query, args.target, args.split)
    payload = {
        "query_modality": args.query,
        "target_modality": args.target,
        "split": args.split,
        "rankings": [
            {
                "query_id": r.query_id,
                "candidates": r.candidate_ids[: args.k],
                "scores": [round(float(s), 6) for s in r.scores[: args.k]],
            }
            for r in ranked
        ],
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    gbio.write_manifest(Path(args.out).parent, "retrieve",
                        {"query": args.query, "target": args.target, "k": args.k},
                        args.seed or 0, [args.out], started)
    return 0


def cmd_evaluate(args) -> int:
    from . import gbio
    from .align import load_align_checkpoint
    from .cohort import load_cohort
    from .harness import ALL_TASKS, evaluate_report, report_to_tsv, save_report

    started = time.time()
    tasks = tuple(args.tasks.split(",")) if args.tasks else ALL_TASKS
    unknown = set(tasks) - set(ALL_TASKS)
    if unknown:
        raise ValueError(f"unknown tasks: {sorted(unknown)}; valid: {ALL_TASKS}")
    params, agg_config, align_config = load_align_checkpoint(args.aligned)
    cohort = load_cohort(args.cohort, args.karyo, args.mut, args.labels)
    report = evaluate_report(
        cohort, params, agg_config, align_config,
        tasks=tasks, seed=args.seed or 0, n_boot=args.n_boot,
    )
    save_report(report, args.out, args.tsv)
    artifacts = [args.out] + ([args.tsv] if args.tsv else [])
    gbio.write_manifest(Path(args.out).parent, "evaluate",
                        {"tasks": list(tasks), "n_boot": args.n_boot},
                        args.seed or 0, artifacts, started)
    logger.info("evaluation report -> %s", args.out)
    return 0


def cmd_ablate(args) -> int:
    from . import gbio
    from .aggregator import AggregatorConfig
    from .cohort import load_cohort_dir
    from .harness import AblationGrid, ablation_to_tsv, run_ablation
    from .pretrain import load_checkpoint

    started = time.time()
    raw = _read_json(args.grid)
    allowed = {"cohort_dir", "init_checkpoint", "aggregator", "align", "axes",
               "n_boot", "seed", "out", "out_tsv"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"{args.grid}: unknown grid keys: {sorted(unknown)}")
    cohort = load_cohort_dir(raw["cohort_dir"])
    pretrained = None
    if raw.get("init_checkpoint"):
        student, _, ckpt_config = load_checkpoint(raw["init_checkpoint"])
        agg_config = AggregatorConfig(**ckpt_config["aggregator"])
        pretrained = student
    else:
        agg_config = _load_section(raw, "aggregator", AggregatorConfig, args.grid)
    axes = raw.get("axes", {})
    grid = AblationGrid(
        aggregator=axes.get("aggregator", AblationGrid().aggregator),
        karyotype_resolution=axes.get(
            "karyotype_resolution", AblationGrid().karyotype_resolution
        ),
        recon_weight=axes.get("recon_weight", AblationGrid().recon_weight),
        defaults=raw.get("align", {}),
        n_boot=raw.get("n_boot", 200),
        seed=args.seed if args.seed is not None else raw.get("seed", 0),
    )
    result = run_ablation(cohort, agg_config, grid, pretrained_aggregator=pretrained)
    out = Path(raw.get("out", "ablation.json"))
    out.write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    artifacts = [out]
    if raw.get("out_tsv"):
        tsv = Path(raw["out_tsv"])
        tsv.write_text(ablation_to_tsv(result))
        artifacts.append(tsv)
    gbio.write_manifest(out.parent, "ablate", raw, grid.seed, artifacts, started)
    logger.info("ablation grid (%d rows) -> %s", len(result["rows"]), out)
    return 0


def cmd_inspect(args) -> int:
    from . import gbio

    info = gbio.inspect_header(args.file)
    print(json.dumps(info, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genalign",
        description="Patient-level aggregation of cell embeddings with "
                    "supervised genetic alignment and retrieval evaluation.",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("encode-karyotype", help="encode ISCN strings to a .gbm matrix")
    p.add_argument("--in", dest="infile", required=True,
                   help="TSV of patient_id<TAB>iscn_string")
    p.add_argument("--out", required=True)
    p.add_argument("--arm-level", action="store_true")
    p.add_argument("--lenient", action="store_true",
                   help="skip unsupported tokens with a warning")
    p.set_defaults(handler=cmd_encode_karyotype)

    p = sub.add_parser("pretrain", help="stage-1 self-supervised training")
    p.add_argument("--config", help="JSON with 'aggregator' and 'pretrain' sections")
    p.add_argument("--cohort", required=True, help="bags .gbm")
    p.add_argument("--out", required=True, help="checkpoint .gbck")
    p.add_argument("--metrics", help="JSON-lines metrics log")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("align", help="stage-2 supervised genetic alignment")
    p.add_argument("--config", help="JSON with 'align' (and optional 'aggregator')")
    p.add_argument("--cohort", required=True, help="bags .gbm")
    p.add_argument("--karyo", required=True, help="karyotype .gbm")
    p.add_argument("--mut", required=True, help="mutation .gbm")
    p.add_argument("--labels", required=True, help="labels TSV")
    p.add_argument("--init", help="stage-1 checkpoint .gbck")
    p.add_argument("--out", required=True, help="aligned checkpoint .gbck")
    p.add_argument("--table-dir", help="also write the aligned-patient table here")
    p.add_argument("--metrics", help="JSON-lines metrics log")
    p.set_defaults(handler=cmd_align)

    p = sub.add_parser("embed", help="patient embeddings from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--space", choices=["slide", "shared"], default="slide")
    p.set_defaults(handler=cmd_embed)

    p = sub.add_parser("retrieve", help="cross-modal retrieval from a table")
    p.add_argument("--table-dir", required=True)
    p.add_argument("--stem", default="aligned")
    p.add_argument("--query", required=True,
                   choices=["slide", "karyotype", "mutation"])
    p.add_argument("--target", required=True,
                   choices=["slide", "karyotype", "mutation"])
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_retrieve)

    p = sub.add_parser("evaluate", help="full evaluation report")
    p.add_argument("--aligned", required=True, help="aligned checkpoint .gbck")
    p.add_argument("--cohort", required=True)
    p.add_argument("--karyo", required=True)
    p.add_argument("--mut", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--tasks", help="comma list: retrieval,slide_retrieval,knn,logreg,per_gene")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--tsv", help="flat TSV twin of the report")
    p.add_argument("--n-boot", type=int, default=1000)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--grid", required=True, help="grid JSON")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("inspect", help="print a .gbm/.gbck header")
    p.add_argument("file")
    p.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        _set_threads(args.threads)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except Exception as exc:  # structured failure -> exit 1
        logger.error("%s", exc)
        if args.log_level == "debug":
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
