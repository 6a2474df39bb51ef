import math

import numpy as np
import pytest

from genalign import align, ndiff
from genalign.aggregator import AggregatorConfig, CellBag
from genalign.align import (
    AlignConfig,
    SupconStats,
    load_align_checkpoint,
    reconstruction_loss,
    stratified_batches,
    supcon_directional,
    supcon_symmetric,
    train_align,
)
from genalign.cohort import Cohort, Patient
from genalign.karyogram import load_band_table
from genalign.ndiff import Tensor
from genalign.pretrain import TrainingError

TINY_AGG = AggregatorConfig(depth=1, heads=2, embed_dim=12, mlp_dim=24,
                            input_dim=12, max_cells=16)


def unit_rows(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def supcon_oracle(za, zb, labels, tau):
    """Direct summation of the directional loss definition."""
    n = len(labels)
    total, alive = 0.0, 0
    for p in range(n):
        pos = [j for j in range(n) if j != p and labels[j] == labels[p]]
        if not pos:
            continue
        alive += 1
        inner = 0.0
        for j in pos:
            logits = [float(za[p] @ zb[q]) / tau for q in range(n)]
            m = max(logits)
            log_denom = m + math.log(sum(math.exp(l - m) for l in logits))
            inner += logits[j] - log_denom
        total += inner / len(pos)
    return -total / alive if alive else 0.0


class TestSupconDirectional:
    def test_two_identical_same_class(self):
        u = np.zeros((1, 8))
        u[0, 0] = 1.0
        z = Tensor(np.vstack([u, u]))
        loss = supcon_directional(z, Tensor(z.data.copy()), np.array([0, 0]), 0.3)
        assert float(loss.data) == pytest.approx(math.log(2), rel=1e-9)

    def test_no_positives_returns_zero_and_counts(self, rng):
        z = Tensor(unit_rows(rng, (2, 8)))
        stats = SupconStats()
        loss = supcon_directional(z, Tensor(unit_rows(rng, (2, 8))),
                                  np.array([0, 1]), 0.1, stats)
        assert float(loss.data) == 0.0
        assert stats.empty_anchor_count == 2
        assert stats.empty_batch_count == 1

    def test_matches_scalar_loop_oracle(self, rng):
        za = unit_rows(rng, (3, 16))
        zb = unit_rows(rng, (3, 16))
        labels = np.array(["A", "A", "B"])
        loss = supcon_directional(Tensor(za), Tensor(zb), labels, 0.5)
        assert float(loss.data) == pytest.approx(
            supcon_oracle(za, zb, labels, 0.5), rel=1e-9
        )

    def test_oracle_agreement_with_partial_empty_anchors(self, rng):
        # anchor 4 has no positives; it must drop out of the average
        za = unit_rows(rng, (5, 8))
        zb = unit_rows(rng, (5, 8))
        labels = np.array([0, 0, 1, 1, 2])
        loss = supcon_directional(Tensor(za), Tensor(zb), labels, 0.2)
        assert float(loss.data) == pytest.approx(
            supcon_oracle(za, zb, labels, 0.2), rel=1e-9
        )

    def test_batch_permutation_invariance(self, rng):
        za = unit_rows(rng, (6, 8))
        zb = unit_rows(rng, (6, 8))
        labels = np.array([0, 0, 1, 1, 2, 2])
        base = float(supcon_directional(Tensor(za), Tensor(zb), labels, 0.1).data)
        perm = rng.permutation(6)
        shuffled = float(
            supcon_directional(Tensor(za[perm]), Tensor(zb[perm]), labels[perm], 0.1).data
        )
        assert shuffled == pytest.approx(base, rel=1e-6)

    def test_rotation_invariance_and_temperature_dependence(self, rng):
        za = unit_rows(rng, (4, 8))
        zb = unit_rows(rng, (4, 8))
        labels = np.array([0, 0, 1, 1])
        base = float(supcon_directional(Tensor(za), Tensor(zb), labels, 0.1).data)
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        rotated = float(
            supcon_directional(Tensor(za @ q), Tensor(zb @ q), labels, 0.1).data
        )
        assert rotated == pytest.approx(base, rel=1e-5)
        other_temp = float(supcon_directional(Tensor(za), Tensor(zb), labels, 0.5).data)
        assert abs(other_temp - base) > 1e-6

    def test_clustered_beats_shuffled_labels(self):
        e = np.eye(8)
        za = np.vstack([e[0], e[0], e[0], e[1], e[1], e[1]])
        zb = za.copy()
        clustered = np.array([0, 0, 0, 1, 1, 1])
        shuffled = np.array([0, 1, 0, 1, 0, 1])
        low = float(supcon_directional(Tensor(za), Tensor(zb), clustered, 0.1).data)
        high = float(supcon_directional(Tensor(za), Tensor(zb), shuffled, 0.1).data)
        assert low < high

    def test_rejects_small_or_unnormalized_batches(self, rng):
        with pytest.raises(ValueError, match=">= 2"):
            supcon_directional(Tensor(unit_rows(rng, (1, 4))),
                               Tensor(unit_rows(rng, (1, 4))), np.array([0]), 0.1)
        bad = Tensor(unit_rows(rng, (2, 4)) * 1.3)
        with pytest.raises(ValueError, match="unit-norm"):
            supcon_directional(bad, Tensor(unit_rows(rng, (2, 4))),
                               np.array([0, 0]), 0.1)

    def test_gradient_passes_grad_check_b4(self, rng):
        zb = unit_rows(rng, (4, 8))
        labels = np.array([0, 0, 1, 1])

        def f_anchor(raw):
            za = ndiff.l2_normalize(raw, axis=-1)
            return supcon_directional(za, Tensor(zb), labels, 0.2)

        report = ndiff.grad_check(f_anchor, Tensor(rng.standard_normal((4, 8))),
                                  eps=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_err

        za = unit_rows(rng, (4, 8))

        def f_target(raw):
            return supcon_directional(Tensor(za), ndiff.l2_normalize(raw, axis=-1),
                                      labels, 0.2)

        report = ndiff.grad_check(f_target, Tensor(rng.standard_normal((4, 8))),
                                  eps=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_err


class TestSupconSymmetric:
    def test_equal_modalities_match_directional(self, rng):
        z = unit_rows(rng, (4, 8))
        labels = np.array([0, 0, 1, 1])
        sym = float(supcon_symmetric(Tensor(z), Tensor(z.copy()), labels, 0.1).data)
        directional = float(
            supcon_directional(Tensor(z), Tensor(z.copy()), labels, 0.1).data
        )
        assert sym == pytest.approx(directional, rel=1e-9)

    def test_modality_swap_symmetry(self, rng):
        za, zb = unit_rows(rng, (5, 8)), unit_rows(rng, (5, 8))
        labels = np.array([0, 1, 0, 1, 1])
        ab = float(supcon_symmetric(Tensor(za), Tensor(zb), labels, 0.15).data)
        ba = float(supcon_symmetric(Tensor(zb), Tensor(za), labels, 0.15).data)
        assert ab == pytest.approx(ba, rel=1e-9)

    def test_half_sum_of_oracle_directions(self, rng):
        za, zb = unit_rows(rng, (6, 8)), unit_rows(rng, (6, 8))
        labels = np.array([0, 0, 0, 1, 1, 1])
        sym = float(supcon_symmetric(Tensor(za), Tensor(zb), labels, 0.3).data)
        expected = 0.5 * (supcon_oracle(za, zb, labels, 0.3)
                          + supcon_oracle(zb, za, labels, 0.3))
        assert sym == pytest.approx(expected, rel=1e-9)


class TestReconstruction:
    def test_zero_logits(self):
        loss = reconstruction_loss(Tensor(np.zeros((4, 7))), np.ones((4, 7)))
        assert float(loss.data) == pytest.approx(math.log(2), rel=1e-9)

    def test_saturated_logits(self):
        loss = reconstruction_loss(Tensor(np.full((2, 3), 1e4)), np.ones((2, 3)))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_matches_scalar_oracle(self, rng):
        logits = rng.standard_normal((2, 3))
        targets = (rng.random((2, 3)) > 0.5).astype(float)
        loss = float(reconstruction_loss(Tensor(logits), targets).data)
        acc = 0.0
        for i in range(2):
            for j in range(3):
                p = 1.0 / (1.0 + math.exp(-logits[i, j]))
                y = targets[i, j]
                acc += -(y * math.log(p) + (1 - y) * math.log(1 - p))
        assert loss == pytest.approx(acc / 6, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ndiff.NdiffError):
            reconstruction_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))


class TestStratifiedBatches:
    def test_partition_and_pairing(self, rng):
        labels = ["A"] * 10 + ["B"] * 9 + ["C"] * 5
        batches = stratified_batches(labels, 8, rng)
        seen = np.concatenate(batches)
        assert sorted(seen.tolist()) == list(range(24))
        for batch in batches[:-1]:
            counts = {}
            for i in batch:
                counts[labels[i]] = counts.get(labels[i], 0) + 1
            # every class present in a full batch shows up at least twice
            assert all(v >= 2 for v in counts.values())

    def test_no_singleton_batches(self, rng):
        labels = ["A"] * 5
        batches = stratified_batches(labels, 2, rng)
        assert all(len(b) >= 2 for b in batches)


def make_cohort(rng, n_per_class=6, n_classes=3, dim=12, n_cells=8,
                split_last=2, drop_modality=None):
    table = load_band_table()
    patients = []
    means = rng.standard_normal((n_classes, dim)) * 2.0
    for c in range(n_classes):
        for i in range(n_per_class):
            pid = f"c{c}_{i}"
            cells = (means[c] + rng.standard_normal((n_cells, dim))).astype(np.float32)
            karyo = np.zeros(3 * len(table), dtype=np.uint8)
            karyo[c * 10 : c * 10 + 5] = 1
            mut = np.zeros(25, dtype=np.uint8)
            mut[c] = 1
            split = "test" if i >= n_per_class - split_last else "train"
            patients.append(Patient(pid, f"class{c}", split, CellBag(pid, cells),
                                    None if drop_modality == pid else karyo, mut))
    return Cohort(patients, band_table_sha256=table.sha256)


TINY_ALIGN = AlignConfig(epochs=2, batch_size=6, aggregator_mode="mean_pool",
                         init="random", seed=3)


class TestTrainAlign:
    def test_mean_pool_uses_raw_cell_average(self, rng):
        cohort = make_cohort(rng)
        result = train_align(cohort, TINY_AGG, TINY_ALIGN)
        complete = [p for p in cohort.patients if p.complete]
        for i, p in enumerate(complete):
            assert np.allclose(result.table.slide[i], p.bag.cells.mean(axis=0),
                               atol=1e-6)

    def test_projections_unit_norm(self, rng):
        cohort = make_cohort(rng)
        result = train_align(cohort, TINY_AGG, TINY_ALIGN)
        for mat in (result.table.z_slide, result.table.z_karyotype,
                    result.table.z_mutation):
            assert np.allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-4)

    def test_lambda_zero_reduces_to_supcon_sum(self, rng):
        cohort = make_cohort(rng)
        cfg = AlignConfig(**{**TINY_ALIGN.to_dict(), "recon_weight": 0.0, "epochs": 1})
        result = train_align(cohort, TINY_AGG, cfg)
        record = result.metrics[0]
        assert record["total"] == pytest.approx(
            record["supcon_sk"] + record["supcon_sm"], rel=1e-6
        )
        assert record["recon"] == 0.0

    def test_arm_resolution_width(self, rng):
        cohort = make_cohort(rng)
        cfg = AlignConfig(**{**TINY_ALIGN.to_dict(), "karyotype_resolution": "arm"})
        result = train_align(cohort, TINY_AGG, cfg)
        assert result.params["proj_k.w1"].shape[0] == 144

    def test_missing_modality_excluded_with_warning(self, rng, caplog):
        cohort = make_cohort(rng, drop_modality="c0_0")
        with caplog.at_level("WARNING"):
            result = train_align(cohort, TINY_AGG, TINY_ALIGN)
        assert result.excluded == ["c0_0"]
        assert "c0_0" in caplog.text
        assert "c0_0" not in result.table.patient_ids

    def test_finetune_requires_checkpoint(self, rng):
        cohort = make_cohort(rng)
        cfg = AlignConfig(**{**TINY_ALIGN.to_dict(), "aggregator_mode": "finetune",
                             "init": "pretrained"})
        with pytest.raises(TrainingError, match="stage-1"):
            train_align(cohort, TINY_AGG, cfg)

    def test_dimension_mismatch_refused(self, rng):
        from genalign.aggregator import init_params
        cohort = make_cohort(rng)
        other = AggregatorConfig(depth=1, heads=2, embed_dim=16, mlp_dim=32,
                                 input_dim=12, max_cells=16)
        ckpt = init_params(other, rng)
        cfg = AlignConfig(**{**TINY_ALIGN.to_dict(), "aggregator_mode": "finetune",
                             "init": "pretrained"})
        with pytest.raises(TrainingError, match="embed_dim"):
            train_align(cohort, TINY_AGG, cfg, pretrained_aggregator=ckpt)

    def test_finetune_random_init_runs(self, rng):
        cohort = make_cohort(rng, n_per_class=4)
        cfg = AlignConfig(epochs=1, batch_size=6, aggregator_mode="finetune",
                          init="random", seed=1)
        result = train_align(cohort, TINY_AGG, cfg)
        assert result.table.slide.shape[1] == TINY_AGG.embed_dim
        assert np.isfinite(result.metrics[0]["total"])

    def test_checkpoint_roundtrip_and_table_io(self, rng, tmp_path):
        cohort = make_cohort(rng)
        result = train_align(cohort, TINY_AGG, TINY_ALIGN)
        ckpt = tmp_path / "aligned.gbck"
        result.save(ckpt)
        params, agg_cfg, align_cfg = load_align_checkpoint(ckpt)
        assert agg_cfg.embed_dim == TINY_AGG.embed_dim
        assert align_cfg.aggregator_mode == "mean_pool"
        table2 = align.embed_cohort(cohort, params, agg_cfg, align_cfg)
        assert np.allclose(table2.z_slide, result.table.z_slide, atol=1e-6)
        result.table.save(tmp_path, stem="aligned")
        loaded = align.load_table(tmp_path, stem="aligned")
        assert loaded.patient_ids == result.table.patient_ids
        assert np.allclose(loaded.z_karyotype, result.table.z_karyotype)

    def test_deterministic_given_seed(self, rng, tmp_path):
        cohort = make_cohort(rng)
        a = train_align(cohort, TINY_AGG, TINY_ALIGN)
        b = train_align(cohort, TINY_AGG, TINY_ALIGN)
        pa, pb = tmp_path / "a.gbck", tmp_path / "b.gbck"
        a.save(pa)
        b.save(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AlignConfig(temperature=0.0)
        with pytest.raises(ValueError):
            AlignConfig(recon_weight=-0.1)
        with pytest.raises(ValueError):
            AlignConfig(batch_size=1)
        with pytest.raises(ValueError):
            AlignConfig(aggregator_mode="bogus")
