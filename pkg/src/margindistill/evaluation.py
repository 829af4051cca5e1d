"""Verification and identification metrics plus the comparison table.

Verification sweeps the decision threshold over every midpoint between
consecutive sorted pair scores (sentinels at -1 and +1) and keeps the
smallest threshold achieving the best accuracy. Identification is rank-1
against gallery plus distractors with ties counted as misses.
"""

import hashlib
import io
import json
import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, IdentificationProtocol, VerificationProtocol
from .errors import EmptyProtocol, ProtocolMismatch
from .network import Checkpoint
from .training import embed_dataset


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation results for one checkpoint on one protocol pair.

    ``timing_seconds`` is informational only and never written to report
    files, which must be byte-identical across repeated runs.
    """

    method: str
    verification_accuracy: float
    best_threshold: float
    rank1_accuracy: float
    seed: int
    protocol_hash: str
    timing_seconds: float = 0.0
    teacher_gap_rank1: float | None = None


def protocol_hash(ver: VerificationProtocol, ident: IdentificationProtocol) -> str:
    h = hashlib.sha256()
    for arr in (ver.index_a, ver.index_b, ver.same.astype(np.uint8),
                ident.probes, ident.gallery, ident.distractors):
        h.update(np.ascontiguousarray(arr).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def sweep_thresholds(scores, same) -> tuple[float, float]:
    """Best pair accuracy for the rule ``score >= threshold -> same`` and
    the smallest threshold achieving it."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.size == 0:
        raise EmptyProtocol("no pairs to sweep")
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    same_sorted = same[order]

    distinct = np.unique(s_sorted)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    candidates = np.sort(np.concatenate(([-1.0], mids, [1.0])))

    # correct(t) = #neg below t + #pos at or above t
    prefix_neg = np.concatenate(([0], np.cumsum(~same_sorted)))
    suffix_pos = np.concatenate((np.cumsum(same_sorted[::-1])[::-1], [0]))
    cut = np.searchsorted(s_sorted, candidates, side="left")
    correct = prefix_neg[cut] + suffix_pos[cut]
    best = int(np.argmax(correct))  # argmax returns the first (smallest) hit
    return float(correct[best] / scores.size), float(candidates[best])


def verification_accuracy(embedder: Checkpoint, dataset: Dataset,
                          protocol: VerificationProtocol,
                          embeddings: np.ndarray | None = None) -> tuple[float, float]:
    """Score every pair by embedding cosine and sweep the threshold."""
    if protocol.n_pairs == 0:
        raise EmptyProtocol("verification protocol has no pairs")
    if embeddings is None:
        embeddings = embed_dataset(embedder, dataset)
    scores = (embeddings[protocol.index_a] * embeddings[protocol.index_b]).sum(axis=1)
    return sweep_thresholds(scores, protocol.same)


def rank1_identification(embedder: Checkpoint, dataset: Dataset,
                         protocol: IdentificationProtocol,
                         embeddings: np.ndarray | None = None) -> float:
    """Fraction of probes whose strict nearest neighbour among gallery and
    distractor embeddings is their own gallery entry."""
    if protocol.n_probes == 0:
        raise EmptyProtocol("identification protocol has no probes")
    if embeddings is None:
        embeddings = embed_dataset(embedder, dataset)
    cand = np.concatenate([embeddings[protocol.gallery],
                           embeddings[protocol.distractors]])
    scores = embeddings[protocol.probes] @ cand.T
    n = protocol.n_probes
    own = scores[np.arange(n), np.arange(n)]
    masked = scores.copy()
    masked[np.arange(n), np.arange(n)] = -np.inf
    hits = own > masked.max(axis=1)
    return float(np.mean(hits))


def evaluate_checkpoint(ck: Checkpoint, dataset: Dataset,
                        ver: VerificationProtocol, ident: IdentificationProtocol,
                        method: str, seed: int) -> MetricsReport:
    t0 = time.perf_counter()
    embeddings = embed_dataset(ck, dataset)
    acc, thr = verification_accuracy(ck, dataset, ver, embeddings)
    r1 = rank1_identification(ck, dataset, ident, embeddings)
    return MetricsReport(
        method=method, verification_accuracy=acc, best_threshold=thr,
        rank1_accuracy=r1, seed=seed, protocol_hash=protocol_hash(ver, ident),
        timing_seconds=time.perf_counter() - t0)


REPORT_FIELDS = ("method", "verification_accuracy", "best_threshold",
                 "rank1_accuracy", "seed", "protocol_hash")

CSV_COLUMNS = ("method", "verification_accuracy", "best_threshold",
               "rank1_accuracy", "delta_vs_teacher_rank1",
               "delta_vs_baseline_rank1", "seed")


def report_to_json(report: MetricsReport) -> str:
    # timing is intentionally dropped: report files must be reproducible
    return json.dumps({k: getattr(report, k) for k in REPORT_FIELDS},
                      sort_keys=True)


def report_from_json(text: str) -> MetricsReport:
    obj = json.loads(text)
    return MetricsReport(**{k: obj[k] for k in REPORT_FIELDS})


@dataclass(frozen=True)
class GapReport:
    """Teacher/student comparison rows, sorted by rank-1 descending."""

    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(row[c]) for c in CSV_COLUMNS) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        widths = {c: max(len(c), max((len(_fmt(r[c])) for r in self.rows), default=0))
                  for c in CSV_COLUMNS}
        lines = ["  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS)]
        for row in self.rows:
            lines.append("  ".join(_fmt(row[c]).ljust(widths[c]) for c in CSV_COLUMNS))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def gap_report(teacher: MetricsReport, students: list[MetricsReport],
               baseline_method: str = "arcface") -> GapReport:
    """Absolute metrics plus rank-1 deltas versus the teacher and versus
    the plain-ArcFace student baseline."""
    for rep in students:
        if rep.protocol_hash != teacher.protocol_hash:
            raise ProtocolMismatch(
                f"report {rep.method!r} was evaluated on protocol "
                f"{rep.protocol_hash}, teacher on {teacher.protocol_hash}")
    baseline = next((r for r in students if r.method == baseline_method), None)

    def row(rep: MetricsReport, label: str) -> dict:
        return {
            "method": label,
            "verification_accuracy": rep.verification_accuracy,
            "best_threshold": rep.best_threshold,
            "rank1_accuracy": rep.rank1_accuracy,
            "delta_vs_teacher_rank1": rep.rank1_accuracy - teacher.rank1_accuracy,
            "delta_vs_baseline_rank1": (rep.rank1_accuracy - baseline.rank1_accuracy
                                        if baseline is not None else None),
            "seed": rep.seed,
        }

    rows = [row(teacher, "teacher")]
    rows += [row(rep, rep.method) for rep in students]
    rows.sort(key=lambda r: -r["rank1_accuracy"])
    return GapReport(rows)
