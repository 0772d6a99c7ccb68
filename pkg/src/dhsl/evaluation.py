"""Protocol-faithful ranking evaluation: single-shot galleries, CMC curves
with multi-trial averaging, rank tables, and score-distribution diagnostics.

Metric direction is part of the metric kind: the learned similarity scores
(hybrid, diff-only, mult-only) and cosine rank descending, the distance
baselines (euclidean, mahalanobis) rank ascending. Equal scores are broken
by gallery index, so repeated evaluation is bit-identical.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import similarity
from .data import load_image
from .errors import ProtocolError

SIMILARITY_METRICS = ("hybrid", "diff-only", "mult-only", "cosine")
DISTANCE_METRICS = ("euclidean", "mahalanobis")
METRICS = SIMILARITY_METRICS + DISTANCE_METRICS


def higher_is_better(metric):
    if metric in SIMILARITY_METRICS:
        return True
    if metric in DISTANCE_METRICS:
        return False
    raise ValueError(f"unknown metric kind {metric!r}")


@dataclass
class CmcCurve:
    """Identification rate as a function of rank; rates[r-1] is rank r."""

    rates: np.ndarray
    trials: int
    protocol: str
    gallery_size: int

    def rate_at(self, rank):
        rank = min(rank, len(self.rates))
        return float(self.rates[rank - 1])


@dataclass
class RankTable:
    ranks: tuple
    rates: tuple

    @classmethod
    def from_curve(cls, curve, ranks=(1, 10, 20, 30)):
        return cls(tuple(ranks), tuple(curve.rate_at(r) for r in ranks))


@dataclass
class ScoreDistribution:
    """Histograms of the two hybrid sub-scores over a pair population."""

    diff_scores: np.ndarray
    mult_scores: np.ndarray
    diff_hist: tuple
    mult_hist: tuple

    def summary(self, which):
        s = self.diff_scores if which == "diff" else self.mult_scores
        return {"min": float(s.min()), "max": float(s.max()),
                "mean": float(s.mean())}


def extract_features(model, images, chunk=128, workers=1):
    """Inference features for an image stack, computed once per image.

    Chunks are processed in deterministic order; ``workers`` > 1 runs chunks
    on a thread pool (the infer path is pure, so this is safe).
    """
    images = np.asarray(images)
    parts = [images[s : s + chunk] for s in range(0, len(images), chunk)]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            feats = list(pool.map(lambda p: model.features(p, mode="infer"),
                                  parts))
    else:
        feats = [model.features(p, mode="infer") for p in parts]
    return np.concatenate(feats, axis=0)


def score_matrix(metric, model, probe_feats, gallery_feats, chunk=64):
    """(P, G) score matrix under the chosen metric."""
    p, g = np.asarray(probe_feats), np.asarray(gallery_feats)
    if metric == "cosine":
        p = p / np.linalg.norm(p, axis=1, keepdims=True)
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
        return p @ g.T
    if metric in ("hybrid", "diff-only", "mult-only"):
        w_d = model.w_d if metric != "mult-only" else np.zeros_like(model.w_d)
        w_m = model.w_m if metric != "diff-only" else np.zeros_like(model.w_m)
        out = np.empty((len(p), len(g)), dtype=np.float64)
        for s in range(0, len(p), chunk):
            block = p[s : s + chunk][:, None, :]
            out[s : s + chunk] = (
                np.abs(block - g[None, :, :]) @ w_d + (block * g[None, :, :]) @ w_m
            )
        return out
    if metric == "euclidean":
        out = np.empty((len(p), len(g)), dtype=np.float64)
        for s in range(0, len(p), chunk):
            d = p[s : s + chunk][:, None, :] - g[None, :, :]
            out[s : s + chunk] = np.einsum("pgi,pgi->pg", d, d)
        return out
    raise ValueError(f"unknown metric kind {metric!r}")


def rank_of_match(scores, probe_ids, gallery_ids, descending):
    """1-based rank of each probe's true match; ties break by gallery index."""
    keys = -scores if descending else scores
    order = np.argsort(keys, axis=1, kind="stable")
    ranked_ids = np.asarray(gallery_ids)[order]
    hits = ranked_ids == np.asarray(probe_ids)[:, None]
    if not hits.any(axis=1).all():
        missing = np.asarray(probe_ids)[~hits.any(axis=1)]
        raise ProtocolError(f"probe identities absent from gallery: "
                            f"{sorted(set(missing.tolist()))}")
    return hits.argmax(axis=1) + 1


def single_shot_gallery(manifest, test_ids, probe_camera, gallery_camera,
                        include_distractors):
    """Index selection for one trial: probes and a one-image-per-id gallery.

    The gallery takes the first image (manifest order) of each test identity
    in the gallery camera; probes are all test-identity images from the probe
    camera. Distractor images join the gallery when requested.
    """
    gallery_idx, gallery_ids = [], []
    for ident in test_ids:
        candidates = manifest.indices_of(ident, gallery_camera)
        if not candidates:
            raise ProtocolError(
                f"identity {ident} has no image in gallery camera "
                f"{gallery_camera}"
            )
        gallery_idx.append(candidates[0])
        gallery_ids.append(ident)
    if include_distractors:
        for i in manifest.distractor_indices():
            gallery_idx.append(i)
            gallery_ids.append(manifest.entries[i].identity)
    probe_idx, probe_ids = [], []
    for ident in test_ids:
        for i in manifest.indices_of(ident, probe_camera):
            probe_idx.append(i)
            probe_ids.append(ident)
    if not probe_idx:
        raise ProtocolError(f"no probe images in camera {probe_camera}")
    return probe_idx, probe_ids, gallery_idx, gallery_ids


def evaluate_trial(model, split, manifest, metric, images=None, workers=1):
    """CMC curve of one trial under the single-shot setting."""
    test_ids = list(split.test_ids)
    cams = sorted({manifest.entries[i].camera
                   for ident in test_ids for i in manifest.indices_of(ident)})
    if len(cams) < 2:
        raise ProtocolError("evaluation needs two camera views over the test set")
    probe_cam, gallery_cam = cams[0], cams[1]
    probe_idx, probe_ids, gallery_idx, gallery_ids = single_shot_gallery(
        manifest, test_ids, probe_cam, gallery_cam,
        include_distractors=(split.protocol == "grid"),
    )
    if images is None:
        images = manifest.images
    if images is None:
        fetch = lambda idx: np.stack(
            [load_image(manifest.entries[i].path) for i in idx])
    else:
        fetch = lambda idx: images[idx]
    probe_feats = extract_features(model, fetch(probe_idx), workers=workers)
    gallery_feats = extract_features(model, fetch(gallery_idx), workers=workers)
    scores = score_matrix(metric, model, probe_feats, gallery_feats)
    ranks = rank_of_match(scores, probe_ids, gallery_ids,
                          descending=higher_is_better(metric))
    g = len(gallery_ids)
    rates = np.cumsum(np.bincount(ranks, minlength=g + 1)[1:]) / len(ranks)
    return CmcCurve(rates, trials=1, protocol=split.protocol, gallery_size=g)


def evaluate_protocol(models, splits, manifest, metric, images=None,
                      workers=1, table_ranks=(1, 10, 20, 30)):
    """Average per-trial curves (one trained model per trial) into the final
    curve and its rank table."""
    if len(models) != len(splits):
        raise ValueError(
            f"got {len(models)} models for {len(splits)} trials"
        )
    curves = [
        evaluate_trial(m, s, manifest, metric, images=images, workers=workers)
        for m, s in zip(models, splits)
    ]
    sizes = {c.gallery_size for c in curves}
    if len(sizes) != 1:
        raise ValueError(f"trials produced unequal gallery sizes: {sorted(sizes)}")
    mean_rates = np.mean([c.rates for c in curves], axis=0)
    curve = CmcCurve(mean_rates, trials=len(curves),
                     protocol=splits[0].protocol, gallery_size=sizes.pop())
    return curve, RankTable.from_curve(curve, table_ranks)


def score_distributions(model, feats1, feats2, bins=20):
    """Per-pair sub-scores of the hybrid similarity and their histograms.

    The two sub-scores add up exactly to the hybrid score of each pair.
    """
    feats1, feats2 = np.asarray(feats1), np.asarray(feats2)
    if len(feats1) == 0:
        raise ValueError("pair population is empty")
    diff_scores = similarity.diff_forward(feats1, feats2) @ model.w_d
    mult_scores = similarity.mult_forward(feats1, feats2) @ model.w_m
    return ScoreDistribution(
        diff_scores, mult_scores,
        np.histogram(diff_scores, bins=bins),
        np.histogram(mult_scores, bins=bins),
    )


def emit_results(curve, table, distributions, out_dir, fmt="tsv",
                 metric="hybrid"):
    """Write curve/table/distribution files with fixed 4-decimal formatting."""
    if fmt not in ("tsv", "json-lines"):
        raise ValueError(f"unknown output format {fmt!r}")
    os.makedirs(out_dir, exist_ok=True)
    meta = {"protocol": curve.protocol, "trials": curve.trials,
            "gallery_size": curve.gallery_size, "metric": metric}
    if fmt == "tsv":
        with open(os.path.join(out_dir, "cmc.tsv"), "w", encoding="utf-8") as fh:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write("rank\trate\n")
            for r, rate in enumerate(curve.rates, start=1):
                fh.write(f"{r}\t{rate:.4f}\n")
        with open(os.path.join(out_dir, "ranks.tsv"), "w", encoding="utf-8") as fh:
            fh.write("rank\trate\n")
            for r, rate in zip(table.ranks, table.rates):
                fh.write(f"{r}\t{rate:.4f}\n")
        if distributions is not None:
            with open(os.path.join(out_dir, "distributions.tsv"), "w",
                      encoding="utf-8") as fh:
                fh.write("term\tbin_lo\tbin_hi\tcount\n")
                for term, (counts, edges) in (
                    ("diff", distributions.diff_hist),
                    ("mult", distributions.mult_hist),
                ):
                    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                        fh.write(f"{term}\t{lo:.4f}\t{hi:.4f}\t{int(c)}\n")
    else:
        with open(os.path.join(out_dir, "cmc.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
            for r, rate in enumerate(curve.rates, start=1):
                fh.write(json.dumps({"rank": r, "rate": round(float(rate), 4)})
                         + "\n")
        with open(os.path.join(out_dir, "ranks.jsonl"), "w",
                  encoding="utf-8") as fh:
            for r, rate in zip(table.ranks, table.rates):
                fh.write(json.dumps({"rank": r, "rate": round(float(rate), 4)})
                         + "\n")
        if distributions is not None:
            with open(os.path.join(out_dir, "distributions.jsonl"), "w",
                      encoding="utf-8") as fh:
                for term, (counts, edges) in (
                    ("diff", distributions.diff_hist),
                    ("mult", distributions.mult_hist),
                ):
                    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                        fh.write(json.dumps({
                            "term": term, "bin_lo": round(float(lo), 4),
                            "bin_hi": round(float(hi), 4), "count": int(c),
                        }) + "\n")
