"""Evaluation tests: ranking mechanics, CMC properties, protocol averaging,
score-distribution diagnostics, result emission."""

import json
import os

import numpy as np
import numpy.testing as npt
import pytest

from dhsl import evaluation as ev
from dhsl.data import DatasetManifest, ManifestEntry, ProtocolSplit
from dhsl.errors import ProtocolError
from dhsl.model import build_model

from test_layers import mini_stack_config


def mini_model(seed=0):
    return build_model(seed=seed, stack_config=mini_stack_config(),
                       init_std=0.05)


def image_manifest(rng, n_ids, per_camera=1, distractors=0, mirror_cameras=False):
    """Tiny-image manifest: camera 2 repeats camera 1 when mirror_cameras."""
    entries, images = [], []
    for ident in range(n_ids):
        base = rng.random((per_camera, 8, 6, 3), dtype=np.float32)
        for cam in (1, 2):
            for idx in range(per_camera):
                entries.append(ManifestEntry(
                    f"<mem:{ident}:{cam}:{idx}>", ident, cam, False))
                if mirror_cameras or cam == 1:
                    images.append(base[idx])
                else:
                    images.append(rng.random((8, 6, 3), dtype=np.float32))
    for j in range(distractors):
        entries.append(ManifestEntry(f"<bg:{j}>", -1, 2, True))
        images.append(rng.random((8, 6, 3), dtype=np.float32))
    return DatasetManifest(entries, images=np.stack(images))


def split_over(manifest, protocol="custom"):
    ids = tuple(manifest.identities())
    return ProtocolSplit(0, (), ids, seed=0, protocol=protocol)


class TestRanking:
    def test_rank_of_match_basic(self):
        scores = np.array([[0.9, 0.1, 0.5],
                           [0.2, 0.8, 0.3]])
        ranks = ev.rank_of_match(scores, [10, 11], [10, 11, 12],
                                 descending=True)
        npt.assert_array_equal(ranks, [1, 1])

    def test_direction_flip_with_negated_scores_is_identical(self, rng):
        scores = rng.normal(size=(6, 9))
        gids = list(range(9))
        pids = [rng.integers(9) for _ in range(6)]
        up = ev.rank_of_match(scores, pids, gids, descending=True)
        down = ev.rank_of_match(-scores, pids, gids, descending=False)
        npt.assert_array_equal(up, down)

    def test_positive_affine_transform_keeps_ranking(self, rng):
        scores = rng.normal(size=(5, 8))
        gids = list(range(8))
        pids = [int(rng.integers(8)) for _ in range(5)]
        base = ev.rank_of_match(scores, pids, gids, descending=True)
        moved = ev.rank_of_match(2.5 * scores + 7.0, pids, gids,
                                 descending=True)
        npt.assert_array_equal(base, moved)

    def test_ties_break_by_gallery_index(self):
        scores = np.zeros((1, 4))
        ranks = ev.rank_of_match(scores, [2], [0, 1, 2, 3], descending=True)
        assert ranks[0] == 3  # identity 2 sits at gallery index 2

    def test_missing_probe_identity_raises(self):
        with pytest.raises(ProtocolError):
            ev.rank_of_match(np.zeros((1, 2)), [99], [0, 1], descending=True)


class TestEvaluateTrial:
    def test_identical_probe_and_gallery_images_rank_1_euclidean(self, rng):
        manifest = image_manifest(rng, n_ids=8, mirror_cameras=True)
        curve = ev.evaluate_trial(mini_model(), split_over(manifest), manifest,
                                  "euclidean")
        assert curve.rates[0] == 1.0
        assert curve.gallery_size == 8

    def test_cmc_curves_are_monotone(self, rng):
        manifest = image_manifest(rng, n_ids=10, per_camera=2)
        for metric in ("hybrid", "euclidean", "cosine", "diff-only",
                       "mult-only"):
            curve = ev.evaluate_trial(mini_model(1), split_over(manifest),
                                      manifest, metric)
            assert np.all(np.diff(curve.rates) >= 0)
            assert curve.rates[-1] == 1.0

    def test_untrained_model_is_at_chance_on_identity_free_data(self, rng):
        """Probe/gallery images carry no identity signal, so the true match's
        rank is uniform; pooled rank-1 hits stay inside 3-sigma binomial."""
        hits = trials = 0
        for seed in range(5):
            local = np.random.default_rng(100 + seed)
            manifest = image_manifest(local, n_ids=20, per_camera=2)
            model = mini_model(seed=200 + seed)
            curve = ev.evaluate_trial(model, split_over(manifest), manifest,
                                      "hybrid")
            n_probes = 40  # 20 ids x 2 probe images
            hits += curve.rates[0] * n_probes
            trials += n_probes
        p = 1 / 20
        sigma = np.sqrt(trials * p * (1 - p))
        assert abs(hits - trials * p) < 3 * sigma

    def test_distractors_never_raise_the_curve(self, rng):
        manifest = image_manifest(rng, n_ids=8, per_camera=2, distractors=10)
        model = mini_model(seed=3)
        with_d = ev.evaluate_trial(model, split_over(manifest, "grid"),
                                   manifest, "hybrid")
        without = ev.evaluate_trial(model, split_over(manifest, "viper"),
                                    manifest, "hybrid")
        assert with_d.gallery_size == 18
        assert without.gallery_size == 8
        g = without.gallery_size
        assert np.all(with_d.rates[:g] <= without.rates[:g] + 1e-12)

    def test_repeat_evaluation_is_bit_identical(self, rng):
        manifest = image_manifest(rng, n_ids=6, per_camera=2)
        model = mini_model(seed=5)
        split = split_over(manifest)
        a = ev.evaluate_trial(model, split, manifest, "hybrid")
        b = ev.evaluate_trial(model, split, manifest, "hybrid")
        npt.assert_array_equal(a.rates, b.rates)

    def test_worker_parallel_features_match_serial(self, rng):
        manifest = image_manifest(rng, n_ids=6, per_camera=2)
        model = mini_model(seed=6)
        imgs = manifest.images
        serial = ev.extract_features(model, imgs, chunk=4, workers=1)
        threaded = ev.extract_features(model, imgs, chunk=4, workers=3)
        npt.assert_array_equal(serial, threaded)

    def test_single_camera_test_set_rejected(self, rng):
        entries = [ManifestEntry(f"<m:{i}>", i, 1, False) for i in range(4)]
        manifest = DatasetManifest(
            entries, images=rng.random((4, 8, 6, 3), dtype=np.float32))
        with pytest.raises(ProtocolError):
            ev.evaluate_trial(mini_model(), split_over(manifest), manifest,
                              "hybrid")


class TestEvaluateProtocol:
    def test_identical_trials_average_to_single_trial(self, rng):
        manifest = image_manifest(rng, n_ids=6, per_camera=2)
        split = split_over(manifest)
        model = mini_model(seed=7)
        single = ev.evaluate_trial(model, split, manifest, "hybrid")
        curve, table = ev.evaluate_protocol([model, model], [split, split],
                                            manifest, "hybrid")
        npt.assert_allclose(curve.rates, single.rates, rtol=1e-12)
        assert curve.trials == 2

    def test_rank_table_extracts_curve_values(self, rng):
        manifest = image_manifest(rng, n_ids=12, per_camera=2)
        model = mini_model(seed=8)
        curve, table = ev.evaluate_protocol([model], [split_over(manifest)],
                                            manifest, "hybrid")
        assert table.ranks == (1, 10, 20, 30)
        assert table.rates[0] == curve.rates[0]
        assert table.rates[1] == curve.rates[9]
        # gallery only holds 12 entries; ranks beyond clamp to the last rate
        assert table.rates[2] == curve.rates[-1] == table.rates[3]

    def test_two_trial_average_arithmetic(self):
        a = ev.CmcCurve(np.array([1.0, 1.0]), 1, "custom", 2)
        b = ev.CmcCurve(np.array([0.0, 1.0]), 1, "custom", 2)
        mean = np.mean([a.rates, b.rates], axis=0)
        npt.assert_array_equal(mean, [0.5, 1.0])

    def test_trial_count_mismatch_rejected(self, rng):
        manifest = image_manifest(rng, n_ids=4)
        with pytest.raises(ValueError):
            ev.evaluate_protocol([mini_model()], [split_over(manifest)] * 2,
                                 manifest, "hybrid")


class TestScoreDistributions:
    def test_zero_mult_weights_zero_sub_scores(self, rng):
        model = mini_model(seed=9)
        model.w_m[...] = 0
        f1 = rng.normal(size=(10, model.feature_dim))
        f2 = rng.normal(size=(10, model.feature_dim))
        dist = ev.score_distributions(model, f1, f2)
        assert not dist.mult_scores.any()

    def test_sub_scores_add_to_hybrid_score(self, rng):
        model = mini_model(seed=10)
        f1 = rng.normal(size=(20, model.feature_dim)).astype(np.float32)
        f2 = rng.normal(size=(20, model.feature_dim)).astype(np.float32)
        dist = ev.score_distributions(model, f1, f2)
        total = model.score_features(f1, f2)
        npt.assert_allclose(dist.diff_scores + dist.mult_scores, total,
                            atol=1e-6)

    def test_summary_fields(self, rng):
        model = mini_model(seed=11)
        f = rng.normal(size=(5, model.feature_dim))
        dist = ev.score_distributions(model, f, f + 1)
        s = dist.summary("diff")
        assert s["min"] <= s["mean"] <= s["max"]

    def test_empty_population_rejected(self, rng):
        model = mini_model(seed=12)
        with pytest.raises(ValueError):
            ev.score_distributions(model, np.zeros((0, 4)), np.zeros((0, 4)))


class TestEmitResults:
    def _sample_outputs(self, rng):
        manifest = image_manifest(rng, n_ids=6, per_camera=2)
        model = mini_model(seed=13)
        curve, table = ev.evaluate_protocol([model], [split_over(manifest)],
                                            manifest, "hybrid")
        feats = ev.extract_features(model, manifest.images)
        dist = ev.score_distributions(model, feats[:6], feats[6:12])
        return curve, table, dist

    def test_tsv_round_trip_at_printed_precision(self, tmp_path, rng):
        curve, table, dist = self._sample_outputs(rng)
        ev.emit_results(curve, table, dist, str(tmp_path), fmt="tsv")
        lines = (tmp_path / "cmc.tsv").read_text().strip().split("\n")
        assert lines[1] == "rank\trate"
        for r, line in enumerate(lines[2:], start=1):
            rank, rate = line.split("\t")
            assert int(rank) == r
            assert f"{curve.rates[r - 1]:.4f}" == rate

    def test_grid_metadata_reports_gallery_size(self, tmp_path, rng):
        """A 250-identity grid-style split without distractor images still
        reports its 125-entry gallery."""
        manifest = image_manifest(rng, n_ids=250, per_camera=1)
        test_ids = tuple(manifest.identities())[:125]
        split = ProtocolSplit(0, (), test_ids, seed=0, protocol="grid")
        model = mini_model(seed=14)
        curve, table = ev.evaluate_protocol([model], [split], manifest,
                                            "euclidean")
        ev.emit_results(curve, table, None, str(tmp_path), fmt="tsv",
                        metric="euclidean")
        meta = json.loads(
            (tmp_path / "cmc.tsv").read_text().split("\n")[0].lstrip("# "))
        assert meta["gallery_size"] == 125
        assert meta["protocol"] == "grid"

    def test_json_lines_parse(self, tmp_path, rng):
        curve, table, dist = self._sample_outputs(rng)
        ev.emit_results(curve, table, dist, str(tmp_path), fmt="json-lines")
        lines = (tmp_path / "cmc.jsonl").read_text().strip().split("\n")
        meta = json.loads(lines[0])
        assert "meta" in meta
        records = [json.loads(line) for line in lines[1:]]
        assert [r["rank"] for r in records] == list(range(1, len(records) + 1))
        ranks = [json.loads(line)
                 for line in (tmp_path / "ranks.jsonl").read_text().strip().split("\n")]
        assert [r["rank"] for r in ranks] == [1, 10, 20, 30]

    def test_deterministic_reemission(self, tmp_path, rng):
        curve, table, dist = self._sample_outputs(rng)
        ev.emit_results(curve, table, dist, str(tmp_path / "a"), fmt="tsv")
        ev.emit_results(curve, table, dist, str(tmp_path / "b"), fmt="tsv")
        for name in ("cmc.tsv", "ranks.tsv", "distributions.tsv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()
