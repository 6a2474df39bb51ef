"""Patient cohort container: bags, genetic vectors, labels, splits.

On disk a cohort is a directory of ``bags.gbm`` (f32 cells with per-patient
row ranges), ``karyotypes.gbm`` (u8, band-level), ``mutations.gbm`` (u8) and
``labels.tsv`` (``patient_id<TAB>label<TAB>split``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gbio
from .aggregator import CellBag

BAGS_FILE = "bags.gbm"
KARYOTYPES_FILE = "karyotypes.gbm"
MUTATIONS_FILE = "mutations.gbm"
LABELS_FILE = "labels.tsv"


@dataclass
class Patient:
    patient_id: str
    label: str
    split: str  # train | test
    bag: CellBag | None
    karyotype: np.ndarray | None  # (3 * n_bands,) u8
    mutations: np.ndarray | None  # (n_genes,) u8

    @property
    def complete(self) -> bool:
        return (
            self.bag is not None
            and self.karyotype is not None
            and self.mutations is not None
        )


@dataclass
class Cohort:
    patients: list[Patient]
    band_table_sha256: str | None = None

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient ids in cohort")

    def __len__(self) -> int:
        return len(self.patients)

    def subset(self, split: str) -> list[Patient]:
        return [p for p in self.patients if p.split == split]

    @property
    def labels(self) -> list[str]:
        return sorted({p.label for p in self.patients})

    def save(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ids = [p.patient_id for p in self.patients]
        cells = np.concatenate([p.bag.cells for p in self.patients], axis=0)
        ranges = []
        start = 0
        for p in self.patients:
            ranges.append((start, start + p.bag.n_cells))
            start += p.bag.n_cells
        paths = []
        paths.append(out_dir / BAGS_FILE)
        gbio.write_gbm(paths[-1], gbio.Matrix(cells.astype(np.float32), ids, row_ranges=ranges))
        paths.append(out_dir / KARYOTYPES_FILE)
        gbio.write_gbm(
            paths[-1],
            gbio.Matrix(
                np.stack([p.karyotype for p in self.patients]).astype(np.uint8),
                ids,
                band_table_sha256=self.band_table_sha256,
            ),
        )
        paths.append(out_dir / MUTATIONS_FILE)
        gbio.write_gbm(
            paths[-1],
            gbio.Matrix(np.stack([p.mutations for p in self.patients]).astype(np.uint8), ids),
        )
        paths.append(out_dir / LABELS_FILE)
        with open(paths[-1], "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for p in self.patients:
                writer.writerow([p.patient_id, p.label, p.split])
        return paths


def load_cohort(
    bags_path: str | Path,
    karyotypes_path: str | Path | None = None,
    mutations_path: str | Path | None = None,
    labels_path: str | Path | None = None,
) -> Cohort:
    bags_m = gbio.read_gbm(bags_path)
    if bags_m.row_ranges is None:
        raise gbio.FormatError(f"{bags_path}: bag file needs per-patient row ranges")
    ids = bags_m.patient_ids
    bags = {pid: CellBag(pid, bags_m.rows_for(pid)) for pid in ids}
    karyotypes: dict[str, np.ndarray] = {}
    sha = None
    if karyotypes_path is not None:
        m = gbio.read_gbm(karyotypes_path)
        sha = m.band_table_sha256
        karyotypes = {pid: m.data[i] for i, pid in enumerate(m.patient_ids)}
    mutations: dict[str, np.ndarray] = {}
    if mutations_path is not None:
        m = gbio.read_gbm(mutations_path)
        mutations = {pid: m.data[i] for i, pid in enumerate(m.patient_ids)}
    labels: dict[str, tuple[str, str]] = {pid: ("unknown", "train") for pid in ids}
    if labels_path is not None:
        with open(labels_path, newline="") as fh:
            for row in csv.reader(fh, delimiter="\t"):
                if not row:
                    continue
                if len(row) != 3:
                    raise ValueError(f"{labels_path}: expected 3 columns, got {row}")
                labels[row[0]] = (row[1], row[2])
    patients = [
        Patient(
            patient_id=pid,
            label=labels[pid][0],
            split=labels[pid][1],
            bag=bags[pid],
            karyotype=karyotypes.get(pid),
            mutations=mutations.get(pid),
        )
        for pid in ids
    ]
    return Cohort(patients, band_table_sha256=sha)


def load_cohort_dir(cohort_dir: str | Path) -> Cohort:
    d = Path(cohort_dir)
    return load_cohort(
        d / BAGS_FILE, d / KARYOTYPES_FILE, d / MUTATIONS_FILE, d / LABELS_FILE
    )
