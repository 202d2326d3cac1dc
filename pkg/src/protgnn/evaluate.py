"""Decoy q-values, entrapment ROC curves, partial AUC and report files."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

TRUE = "true"
ENTRAPMENT = "entrapment"
UNKNOWN = "unknown"
TRUTH_FLAGS = (TRUE, ENTRAPMENT, UNKNOWN)

SCORE_COLUMNS = ("group_id", "members", "score", "q_value", "is_decoy", "truth")


@dataclass(frozen=True, eq=False)
class ScoreTable:
    group_ids: np.ndarray
    members: tuple[tuple[str, ...], ...]
    scores: np.ndarray
    is_decoy: np.ndarray
    truth: tuple[str, ...]
    q_values: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.members)
        object.__setattr__(self, "group_ids", np.asarray(self.group_ids, dtype=np.int64))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "is_decoy", np.asarray(self.is_decoy, dtype=bool))
        if self.q_values is not None:
            object.__setattr__(self, "q_values", np.asarray(self.q_values, dtype=np.float64))
        if not (len(self.group_ids) == len(self.scores) == len(self.is_decoy) == len(self.truth) == n):
            raise ValueError("column lengths differ")
        if len(np.unique(self.group_ids)) != n:
            raise ValueError("group ids must be unique")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        bad = set(self.truth) - set(TRUTH_FLAGS)
        if bad:
            raise ValueError(f"unknown truth flags: {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def keys(self) -> list[str]:
        return [";".join(m) for m in self.members]

    @classmethod
    def for_graph(cls, graph, scores, truth: Mapping[str, str] | None = None) -> "ScoreTable":
        """Score table aligned with the protein groups of ``graph``."""
        groups = graph.groups
        flags = tuple(
            UNKNOWN if truth is None else group_truth(g.members, truth) for g in groups
        )
        return cls(
            group_ids=np.array([g.group_id for g in groups]),
            members=tuple(g.members for g in groups),
            scores=np.asarray(scores, dtype=np.float64),
            is_decoy=np.array([g.is_decoy for g in groups], dtype=bool),
            truth=flags,
        )

    def with_truth(self, truth: Mapping[str, str]) -> "ScoreTable":
        return replace(self, truth=tuple(group_truth(m, truth) for m in self.members))


def group_truth(members: Sequence[str], truth: Mapping[str, str]) -> str:
    """A group is true if any member is true, entrapment if all members are."""
    flags = [truth.get(m, UNKNOWN) for m in members]
    if TRUE in flags:
        return TRUE
    if flags and all(f == ENTRAPMENT for f in flags):
        return ENTRAPMENT
    return UNKNOWN


def _thresholds(scores: np.ndarray):
    """Distinct scores in descending order and, for each row, the position
    of its score among them."""
    uniq = np.unique(scores)[::-1]
    pos = len(uniq) - 1 - np.searchsorted(uniq[::-1], scores)
    return uniq, pos


def decoy_fdr_curve(scores, is_decoy, *, plus_one: bool = False):
    """Per distinct threshold (descending): decoys / max(1, targets) among
    rows scoring at least that threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    is_decoy = np.asarray(is_decoy, dtype=bool)
    uniq, pos = _thresholds(scores)
    n_dec = np.cumsum(np.bincount(pos[is_decoy], minlength=len(uniq)))
    n_tgt = np.cumsum(np.bincount(pos[~is_decoy], minlength=len(uniq)))
    fdr = (n_dec + (1 if plus_one else 0)) / np.maximum(1, n_tgt)
    return uniq, pos, fdr, n_tgt


def decoy_qvalues(table: ScoreTable, *, plus_one: bool = False) -> ScoreTable:
    """Target-decoy q-values. Tied scores share one threshold; each q-value is
    the minimum FDR over its own and every lower threshold."""
    if (~table.is_decoy).sum() == 0:
        raise ValueError("no target rows; q-values are undefined")
    _, pos, fdr, _ = decoy_fdr_curve(table.scores, table.is_decoy, plus_one=plus_one)
    q = np.minimum.accumulate(fdr[::-1])[::-1]
    return replace(table, q_values=q[pos])


@dataclass(frozen=True)
class RocCurve:
    fdr: np.ndarray
    tp: np.ndarray
    fdr_lo: float
    fdr_hi: float
    n_true: int

    def __len__(self) -> int:
        return len(self.fdr)


def entrapment_sweep(table: ScoreTable):
    """(entrapment FDR, true-positive count) at every distinct threshold over
    target rows with known truth."""
    keep = ~table.is_decoy
    flags = np.array(table.truth, dtype=object)
    if keep.any() and (flags[keep] == UNKNOWN).all():
        raise ValueError("no ground-truth flags on target rows")
    keep &= flags != UNKNOWN
    scores = table.scores[keep]
    is_true = flags[keep] == TRUE
    if len(scores) == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    uniq, pos = _thresholds(scores)
    tp = np.cumsum(np.bincount(pos[is_true], minlength=len(uniq)))
    fp = np.cumsum(np.bincount(pos[~is_true], minlength=len(uniq)))
    return fp / (tp + fp), tp


def entrapment_curve(table: ScoreTable, fdr_lo: float = 0.01, fdr_hi: float = 0.05) -> RocCurve:
    """Best true-positive count reachable at each entrapment FDR in the band.

    The first point sits at ``fdr_lo`` and carries the best count among
    thresholds with FDR <= ``fdr_lo``; later points are sweep thresholds
    inside the band. Counts are running maxima, so the curve is a
    non-decreasing step function.
    """
    if not 0.0 <= fdr_lo < fdr_hi <= 1.0:
        raise ValueError(f"need 0 <= fdr_lo < fdr_hi <= 1, got [{fdr_lo}, {fdr_hi}]")
    flags = np.array(table.truth, dtype=object)
    n_true = int(((flags == TRUE) & ~table.is_decoy).sum())
    fdr, tp = entrapment_sweep(table)
    if len(fdr) == 0:
        return RocCurve(np.empty(0), np.empty(0, dtype=np.int64), fdr_lo, fdr_hi, n_true)
    below = fdr <= fdr_lo
    start = int(tp[below].max()) if below.any() else 0
    inside = (fdr > fdr_lo) & (fdr <= fdr_hi)
    xs, ys = [fdr_lo], [start]
    for x in np.unique(fdr[inside]):
        best = max(ys[-1], int(tp[inside & (fdr == x)].max()))
        if best > ys[-1]:
            xs.append(float(x))
            ys.append(best)
    return RocCurve(np.array(xs), np.array(ys, dtype=np.int64), fdr_lo, fdr_hi, n_true)


def pauc(curve: RocCurve) -> float:
    """Area under the step function ``tp(fdr)`` over the band, relative to a
    curve that finds every true protein throughout."""
    if curve.n_true == 0:
        raise ValueError("n_true is zero; partial AUC is undefined")
    if len(curve) == 0:
        return 0.0
    x = np.clip(np.append(curve.fdr, curve.fdr_hi), curve.fdr_lo, curve.fdr_hi)
    area = float(np.sum(np.diff(x) * curve.tp))
    return area / ((curve.fdr_hi - curve.fdr_lo) * curve.n_true)


def calibration(table: ScoreTable) -> list[tuple[float, int, float, float]]:
    """Decoy FDR next to entrapment FDR at each distinct threshold:
    ``(threshold, n_targets, decoy_fdr, entrapment_fdr)``; entrapment FDR is
    NaN where no target with known truth has been admitted."""
    uniq, _, dfdr, n_tgt = decoy_fdr_curve(table.scores, table.is_decoy)
    flags = np.array(table.truth, dtype=object)
    known = ~table.is_decoy & (flags != UNKNOWN)
    rows = []
    for s, n, d in zip(uniq, n_tgt, dfdr):
        sel = known & (table.scores >= s)
        k = int(sel.sum())
        e = float((flags[sel] == ENTRAPMENT).sum() / k) if k else float("nan")
        rows.append((float(s), int(n), float(d), e))
    return rows


# -- files -------------------------------------------------------------------

def _f6(x: float) -> str:
    return f"{x:.6f}"


def write_scores(table: ScoreTable, path) -> None:
    q = table.q_values if table.q_values is not None else [float("nan")] * len(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for gid, members, s, qv, dec, tr in zip(
            table.group_ids, table.members, table.scores, q, table.is_decoy, table.truth
        ):
            w.writerow([int(gid), ";".join(members), _f6(s), _f6(qv), int(dec), tr])


def read_scores(path) -> ScoreTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != SCORE_COLUMNS:
        raise ValueError(f"{path}: expected header {SCORE_COLUMNS}")
    body = rows[1:]
    q = np.array([float(r[3]) for r in body])
    return ScoreTable(
        group_ids=np.array([int(r[0]) for r in body], dtype=np.int64),
        members=tuple(tuple(r[1].split(";")) for r in body),
        scores=np.array([float(r[2]) for r in body]),
        is_decoy=np.array([r[4] == "1" for r in body], dtype=bool),
        truth=tuple(r[5] for r in body),
        q_values=None if np.isnan(q).all() else q,
    )


def read_truth(path) -> dict[str, str]:
    """Ground truth TSV: ``protein_id <tab> true|entrapment``."""
    truth = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 columns")
            if lineno == 1 and parts[1] not in (TRUE, ENTRAPMENT):
                continue  # header
            if parts[1] not in (TRUE, ENTRAPMENT):
                raise ValueError(f"{path}:{lineno}: bad flag {parts[1]!r}")
            truth[parts[0]] = parts[1]
    return truth


def write_truth(truth: Mapping[str, str], path) -> None:
    with open(path, "w") as fh:
        fh.write("protein_id\ttruth\n")
        for pid, flag in truth.items():
            fh.write(f"{pid}\t{flag}\n")


def write_curve(curve: RocCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("fdr\ttp\n")
        for x, y in zip(curve.fdr, curve.tp):
            fh.write(f"{_f6(x)}\t{int(y)}\n")


def emit_report(
    tables: Mapping[str, ScoreTable],
    curves: Mapping[str, RocCurve],
    paucs: Mapping[str, float],
    out_dir,
) -> list[Path]:
    """Write scores, curve and calibration TSVs per dataset plus one summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    written = []
    for name, table in tables.items():
        p = out / f"{name}.scores.tsv"
        write_scores(table, p)
        written.append(p)
        p = out / f"{name}.calibration.tsv"
        with open(p, "w") as fh:
            fh.write("threshold\tn_targets\tdecoy_fdr\tentrapment_fdr\n")
            for s, n, d, e in calibration(table):
                fh.write(f"{_f6(s)}\t{n}\t{_f6(d)}\t{'nan' if np.isnan(e) else _f6(e)}\n")
        written.append(p)
    for name, curve in curves.items():
        p = out / f"{name}.curve.tsv"
        write_curve(curve, p)
        written.append(p)
    p = out / "summary.tsv"
    with open(p, "w") as fh:
        fh.write("dataset\tpauc\n")
        for name, value in paucs.items():
            fh.write(f"{name}\t{_f6(value)}\n")
    written.append(p)
    return written
