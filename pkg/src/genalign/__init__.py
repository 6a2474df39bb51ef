"""genalign: patient-level aggregation of single-cell embeddings, karyotype
encoding, supervised genetic alignment, and retrieval evaluation."""

__version__ = "0.1.0"
