"""Pseudo-label self-training of the protein scoring network."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gnn
from .evaluate import ScoreTable, decoy_qvalues
from .graph import TripartiteGraph
from .psm import FeatureStats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainRunConfig:
    fdr_threshold: float = 0.05
    rounds: int = 10
    epochs: int = 1000
    val_fraction: float = 0.1
    patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fdr_threshold < 1.0:
            raise ValueError(f"fdr_threshold must lie in (0, 1), got {self.fdr_threshold}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


@dataclass(frozen=True, eq=False)
class LabelSet:
    keys: tuple[str, ...]
    labels: np.ndarray
    is_decoy: np.ndarray
    train: np.ndarray
    val: np.ndarray
    provenance: str = "base-model"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("protein_group\tis_decoy\tlabel\tsplit\n")
            for k, d, y, v in zip(self.keys, self.is_decoy, self.labels, self.val):
                fh.write(f"{k}\t{int(d)}\t{int(y)}\t{'val' if v else 'train'}\n")


def split_masks(keys: Sequence[str], labels: np.ndarray, val_fraction: float, seed: int):
    """Stratified validation split ranked by a seeded hash of the group key.

    Each class contributes ``ceil(val_fraction * n)`` groups, leaving at
    least one of the class in training.
    """
    val = np.zeros(len(keys), dtype=bool)
    if val_fraction > 0:
        rank = [hashlib.sha256(f"{seed}:{k}".encode()).hexdigest() for k in keys]
        for cls in (0, 1):
            idx = [i for i in range(len(keys)) if labels[i] == cls]
            n_val = min(math.ceil(val_fraction * len(idx)), len(idx) - 1)
            for i in sorted(idx, key=rank.__getitem__)[: max(n_val, 0)]:
                val[i] = True
    return ~val, val


def pseudo_labels(
    scores: ScoreTable,
    fdr_threshold: float = 0.05,
    *,
    val_fraction: float = 0.1,
    seed: int = 0,
    provenance: str = "base-model",
) -> LabelSet:
    """Targets within ``fdr_threshold`` decoy q-value are positive; every
    other target and every decoy is negative."""
    q = decoy_qvalues(scores).q_values
    labels = ((q <= fdr_threshold) & ~scores.is_decoy).astype(np.int64)
    keys = tuple(scores.keys)
    train, val = split_masks(keys, labels, val_fraction, seed)
    return LabelSet(keys, labels, scores.is_decoy.copy(), train, val, provenance)


def align_scores(graph: TripartiteGraph, base: Mapping[str, float]) -> ScoreTable:
    """Base scores keyed by group (``;``-joined members) aligned to ``graph``.

    A group missing from ``base`` falls back to the best score among its
    individual members.
    """
    scores, missing = [], []
    for g in graph.groups:
        if g.key in base:
            scores.append(base[g.key])
            continue
        member = [base[m] for m in g.members if m in base]
        if member:
            scores.append(max(member))
        else:
            missing.append(g.key)
    if missing:
        raise KeyError(f"no base score for protein group(s): {', '.join(missing)}")
    return ScoreTable.for_graph(graph, scores)


def read_base_scores(path) -> dict[str, float]:
    """Base-score TSV: ``members (;-joined) <tab> score``, optional header."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 columns")
            try:
                value = float(parts[1])
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric score {parts[1]!r}") from None
            key = ";".join(sorted(parts[0].split(";")))
            out[key] = value
    return out


def baseline_scores(graph: TripartiteGraph) -> ScoreTable:
    """Heuristic group score ``1 - prod(1 - S_uv * d_u)`` over incident
    peptides. A weak reference scorer, not a trained model."""
    credit = graph.s_attr * graph.pep_max_score[graph.pro_pep[:, 1]]
    miss = np.ones(graph.n_pro)
    for (g, _), c in zip(graph.pro_pep, credit):
        miss[g] *= 1.0 - c
    return ScoreTable.for_graph(graph, np.clip(1.0 - miss, 0.0, 1.0))


@dataclass
class RoundLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class RoundResult:
    params: gnn.ModelParams
    best_epoch: int
    history: list[RoundLog] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _val_loss(graphs, labels, params) -> float:
    losses = []
    for g, ls in zip(graphs, labels):
        if ls.val.any():
            losses.append(gnn.bce_loss(gnn.forward_logits(g, params), ls.labels, ls.val)[0])
    if not losses:
        # nothing held out: fall back to the training objective
        losses = [gnn.bce_loss(gnn.forward_logits(g, params), ls.labels, ls.train)[0]
                  for g, ls in zip(graphs, labels)]
    return float(np.mean(losses))


def train_round(
    graphs: Sequence[TripartiteGraph],
    labels: Sequence[LabelSet],
    net: gnn.NetConfig,
    config: TrainRunConfig,
    seed: int,
    *,
    on_epoch: Callable[[RoundLog], None] | None = None,
) -> RoundResult:
    """Fresh initialization, then one Adam step per graph per epoch. Returns
    the snapshot with the lowest mean validation BCE."""
    if not graphs:
        raise ValueError("need at least one graph")
    if len(graphs) != len(labels):
        raise ValueError("one label set per graph required")
    warnings = []
    for i, ls in enumerate(labels):
        if len(np.unique(ls.labels[ls.train])) < 2:
            msg = f"graph {i}: training labels are single-class"
            log.warning(msg)
            warnings.append(msg)

    params = gnn.init_params(net, graphs[0].feature_dim, seed)
    state = gnn.AdamState.zeros(params)
    best, best_loss, best_epoch, stale = params, math.inf, 0, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        train_losses = []
        for g, ls in zip(graphs, labels):
            loss, grads = gnn.loss_and_grads(g, params, ls.labels, ls.train)
            params, state = gnn.adam_step(params, grads, state, net.lr)
            train_losses.append(loss)
        val = _val_loss(graphs, labels, params)
        entry = RoundLog(epoch, float(np.mean(train_losses)), val)
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        if val < best_loss:
            best, best_loss, best_epoch, stale = params, val, epoch, 0
        else:
            stale += 1
            if stale > config.patience:
                break
    return RoundResult(best, best_epoch, history, warnings)


@dataclass
class ModelEnsemble:
    members: list[gnn.ModelParams]
    net: gnn.NetConfig
    feature_stats: FeatureStats | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one model")
        ref = [(n, v.shape) for n, v in self.members[0].tensors.items()]
        for m in self.members[1:]:
            if [(n, v.shape) for n, v in m.tensors.items()] != ref:
                raise ValueError("ensemble members differ in shape")


def ensemble_score(ensemble: ModelEnsemble, graph: TripartiteGraph) -> ScoreTable:
    """Mean member probability per protein group."""
    if graph.feature_dim != ensemble.members[0].feature_dim:
        raise ValueError(
            f"graph has {graph.feature_dim} features, ensemble expects "
            f"{ensemble.members[0].feature_dim}"
        )
    total = np.zeros(graph.n_pro)
    for params in ensemble.members:
        total += gnn.forward(graph, params)
    return ScoreTable.for_graph(graph, total / len(ensemble.members))


@dataclass
class SelfTrainResult:
    ensemble: ModelEnsemble
    labels: list[list[LabelSet]]  # per round, per graph
    rounds: list[RoundResult]


def self_train(
    graphs: Sequence[TripartiteGraph],
    base_scores: Sequence[ScoreTable],
    net: gnn.NetConfig,
    config: TrainRunConfig,
    *,
    feature_stats: FeatureStats | None = None,
    on_round: Callable[[int, list[LabelSet], RoundResult], None] | None = None,
    on_epoch: Callable[[int, RoundLog], None] | None = None,
) -> SelfTrainResult:
    """Round 1 learns the base scores' pseudo-labels; each later round
    relabels with the previous round's model and retrains from scratch
    (seed ``config.seed + round``)."""
    if len(graphs) != len(base_scores):
        raise ValueError("one base score table per graph required")
    scores = list(base_scores)
    members, label_hist, rounds = [], [], []
    for r in range(1, config.rounds + 1):
        provenance = "base-model" if r == 1 else f"self-round-{r - 1}"
        labels = [
            pseudo_labels(
                s, config.fdr_threshold, val_fraction=config.val_fraction,
                seed=config.seed, provenance=provenance,
            )
            for s in scores
        ]
        result = train_round(
            graphs, labels, net, config, config.seed + r,
            on_epoch=(lambda e, r=r: on_epoch(r, e)) if on_epoch else None,
        )
        log.info("round %d: best epoch %d", r, result.best_epoch)
        members.append(result.params)
        label_hist.append(labels)
        rounds.append(result)
        if on_round:
            on_round(r, labels, result)
        scores = [ScoreTable.for_graph(g, gnn.forward(g, result.params)) for g in graphs]
    ensemble = ModelEnsemble(members, net, feature_stats)
    return SelfTrainResult(ensemble, label_hist, rounds)
