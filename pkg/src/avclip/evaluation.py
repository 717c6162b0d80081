"""Retrieval metrics for aligned embeddings and fidelity statistics for the prior."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .clip_align import project_audio, project_video
from .errors import FormatError, ValidationError
from .goal_prior import sample_goal

REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_queries", "recall_at", "median_rank", "mean_diagonal_cosine", "percentiles"],
    "additionalProperties": False,
    "properties": {
        "n_queries": {"type": "integer", "minimum": 0},
        "recall_at": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False,
        },
        "median_rank": {"type": "number", "minimum": 1},
        "mean_diagonal_cosine": {"type": "number", "minimum": -1, "maximum": 1},
        "percentiles": {
            "type": "object",
            "required": ["p10", "p50", "p90"],
            "additionalProperties": False,
            "properties": {k: {"type": "number"} for k in ("p10", "p50", "p90")},
        },
    },
}

PERCENTILES = (10, 50, 90)


@dataclass
class RetrievalReport:
    n_queries: int
    recall_at: dict
    median_rank: float
    mean_diagonal_cosine: float
    percentiles: dict = field(default_factory=dict)
    ranks: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "n_queries": int(self.n_queries),
            "recall_at": {str(k): float(v) for k, v in sorted(self.recall_at.items())},
            "median_rank": float(self.median_rank),
            "mean_diagonal_cosine": float(self.mean_diagonal_cosine),
            "percentiles": {k: float(v) for k, v in self.percentiles.items()},
        }

    @classmethod
    def from_json(cls, obj) -> "RetrievalReport":
        try:
            jsonschema.validate(obj, REPORT_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise FormatError(f"report does not match schema: {exc.message}") from exc
        return cls(obj["n_queries"], {int(k): v for k, v in obj["recall_at"].items()},
                   obj["median_rank"], obj["mean_diagonal_cosine"], dict(obj["percentiles"]))


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def ranks_of_true(scores: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row; ties go to the lower column index."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    true = scores[np.arange(n), np.arange(n)][:, None]
    above = (scores > true).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == true) & (cols < np.arange(n)[:, None])).sum(axis=1)
    return above + tied_before + 1


def retrieval_from_embeddings(queries, candidates, ks=(1, 5, 10)) -> RetrievalReport:
    """Rank candidate ``i`` for query ``i`` by cosine similarity among all candidates."""
    q, c = _unit_rows(queries), _unit_rows(candidates)
    n = q.shape[0]
    if n == 0:
        raise ValidationError("retrieval needs at least one query")
    if c.shape[0] != n:
        raise ValidationError(f"{n} queries but {c.shape[0]} candidates; pairs must be row-aligned")
    ks = sorted(set(int(k) for k in ks))
    if ks and (ks[0] < 1 or ks[-1] > n):
        raise ValidationError(f"K values must lie in [1, {n}], got {ks}")
    scores = q @ c.T
    ranks = ranks_of_true(scores)
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    vals = list(recall.values())
    assert all(a <= b for a, b in zip(vals, vals[1:])), "recall@K must be non-decreasing"
    diag = np.diag(scores)
    pct = {f"p{p}": float(np.percentile(diag, p)) for p in PERCENTILES}
    return RetrievalReport(n, recall, float(np.median(ranks)), float(np.clip(diag.mean(), -1, 1)), pct, ranks)


def retrieval_metrics(model, test_pairs, ks=(1, 5, 10), direction: str = "audio_to_video") -> RetrievalReport:
    """Cross-modal retrieval over the ``test`` split of a PairedDataset."""
    audio, video = test_pairs.arrays("test")
    if audio.shape[0] == 0:
        raise ValidationError("test split is empty")
    a = project_audio(model, audio)
    v = project_video(model, video)
    if direction == "audio_to_video":
        return retrieval_from_embeddings(a, v, ks)
    if direction == "video_to_audio":
        return retrieval_from_embeddings(v, a, ks)
    raise ValidationError(f"unknown direction {direction!r}")


@dataclass
class FidelityReport:
    n_pairs: int
    mean_cosine: float
    percentiles: dict
    cosines: np.ndarray = field(repr=False, compare=False, default=None)

    def to_json(self) -> dict:
        return {"n_pairs": self.n_pairs, "mean_cosine": self.mean_cosine, "percentiles": self.percentiles}


def fidelity_from_samples(samples, targets) -> FidelityReport:
    s, t = _unit_rows(samples), _unit_rows(targets)
    if s.shape[0] == 0:
        raise ValidationError("fidelity needs at least one pair")
    cos = np.sum(s * t, axis=1)
    pct = {f"p{p}": float(np.percentile(cos, p)) for p in PERCENTILES}
    return FidelityReport(int(len(cos)), float(cos.mean()), pct, cos)


def prior_fidelity(prior, conditions, targets, seed: int = 0) -> FidelityReport:
    """Cosine between one sampled goal per condition and its true target."""
    conditions = np.asarray(conditions)
    if conditions.ndim != 2 or conditions.shape[0] == 0:
        raise ValidationError("prior_fidelity needs a non-empty 2-D batch of conditions")
    samples = sample_goal(prior, conditions, seed, 1)[:, 0, :]
    return fidelity_from_samples(samples, targets)


def emit_report(report, path) -> None:
    obj = report.to_json()
    if isinstance(report, RetrievalReport):
        jsonschema.validate(obj, REPORT_SCHEMA)
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory {parent} does not exist")
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def load_report(path) -> RetrievalReport:
    with open(path) as fh:
        return RetrievalReport.from_json(json.load(fh))


def write_ranks_csv(path, report: RetrievalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "rank"])
        for i, r in enumerate(report.ranks):
            w.writerow([i, int(r)])
