"""Protein-group / peptide / PSM tripartite graph construction."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import IO, Mapping

import numpy as np
import scipy.sparse as sp

from .psm import DEFAULT_DECOY_PREFIX, BipartiteMap, PsmTable, peptide_protein_map

PROTEIN_CODE = 0
PEPTIDE_CODE = 1
TIE_LOWEST_GROUP = "lowest-group-id"


class EmptyGraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphBuildConfig:
    epsilon: float = 0.9
    decoy_prefix: str = DEFAULT_DECOY_PREFIX
    tie_break: str = TIE_LOWEST_GROUP

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not self.decoy_prefix:
            raise ValueError("decoy prefix must be non-empty")
        if self.tie_break != TIE_LOWEST_GROUP:
            raise ValueError(f"unknown tie-break policy {self.tie_break!r}")


@dataclass(frozen=True)
class ProteinGroup:
    members: tuple[str, ...]
    is_decoy: bool
    group_id: int

    @property
    def key(self) -> str:
        return ";".join(self.members)


def group_proteins(
    bmap: BipartiteMap, decoy_prefix: str = DEFAULT_DECOY_PREFIX
) -> tuple[list[ProteinGroup], BipartiteMap]:
    """Merge proteins with identical peptide sets into groups.

    Groups are ordered by their smallest member accession and the returned
    map is keyed by group id.
    """
    by_peptides: dict[tuple, list[str]] = {}
    for pro, peps in bmap.pro_to_pep.items():
        by_peptides.setdefault(tuple(sorted(peps)), []).append(pro)
    buckets = sorted((sorted(members), peps) for peps, members in by_peptides.items())
    groups = []
    pairs = []
    for gid, (members, peps) in enumerate(buckets):
        is_decoy = all(m.startswith(decoy_prefix) for m in members)
        groups.append(ProteinGroup(tuple(members), is_decoy, gid))
        pairs.extend((pep, gid) for pep in peps)
    return groups, BipartiteMap.from_pairs(pairs)


def peptide_scores(table: PsmTable) -> dict[str, float]:
    """Best identification score (``1 - pep``) per peptide."""
    best: dict[str, float] = {}
    for peptide, pep in zip(table.peptides, table.pep):
        score = 1.0 - float(pep)
        if score > best.get(peptide, -1.0):
            best[peptide] = score
    return best


def surrogate_score(k: int, grouped: BipartiteMap, d: Mapping[str, float], epsilon: float) -> int:
    """Number of peptides of group ``k`` whose best score exceeds ``epsilon``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    try:
        peps = grouped.pro_to_pep[k]
    except KeyError:
        raise IndexError(f"unknown protein group {k}") from None
    return sum(1 for pep in peps if d[pep] > epsilon)


def edge_attrs(
    grouped: BipartiteMap, d: Mapping[str, float], config: GraphBuildConfig | float
) -> dict[tuple[str, int], float]:
    """Peptide-sharing attribute for every (peptide, group) edge.

    For each peptide only the incident group with the highest surrogate
    score keeps a nonzero value, ``1/|C|``; ties go to the lowest group id.
    """
    epsilon = config.epsilon if isinstance(config, GraphBuildConfig) else float(config)
    f = {k: surrogate_score(k, grouped, d, epsilon) for k in grouped.pro_to_pep}
    out = {}
    for pep, groups in grouped.pep_to_pro.items():
        # groups are sorted, so max() keeps the lowest id among ties
        winner = max(groups, key=lambda g: (f[g], -g))
        share = 1.0 / len(groups)
        for g in groups:
            out[(pep, g)] = share if g == winner else 0.0
    return out


@dataclass(frozen=True, eq=False)
class TripartiteGraph:
    """Typed graph consumed by the network.

    ``pro_pep`` rows are (group index, peptide index), sorted by group then
    peptide. ``pep_psm`` rows are (peptide index, PSM index), one per PSM
    in PSM order.
    """

    groups: tuple[ProteinGroup, ...]
    peptides: tuple[str, ...]
    psm_ids: tuple[str, ...]
    pro_pep: np.ndarray
    s_attr: np.ndarray
    pep_psm: np.ndarray
    e_attr: np.ndarray
    psm_features: np.ndarray
    pep_max_score: np.ndarray
    feature_names: tuple[str, ...] = ()

    @property
    def n_pro(self) -> int:
        return len(self.groups)

    @property
    def n_pep(self) -> int:
        return len(self.peptides)

    @property
    def n_psm(self) -> int:
        return len(self.psm_ids)

    @property
    def feature_dim(self) -> int:
        return self.psm_features.shape[1]

    @property
    def is_decoy(self) -> np.ndarray:
        return np.array([g.is_decoy for g in self.groups], dtype=bool)

    @cached_property
    def node_type_codes(self) -> np.ndarray:
        return np.array([PROTEIN_CODE] * self.n_pro + [PEPTIDE_CODE] * self.n_pep, dtype=np.int64)

    # Incidence matrices (targets x edges). CSR rows store columns in
    # ascending edge order, so a sparse product sums messages in that order.
    def _incidence(self, index: np.ndarray, n_rows: int) -> sp.csr_matrix:
        n_edges = len(index)
        m = sp.csr_matrix(
            (np.ones(n_edges), (index, np.arange(n_edges))), shape=(n_rows, n_edges)
        )
        m.sort_indices()
        return m

    @cached_property
    def pro_incidence(self) -> sp.csr_matrix:
        return self._incidence(self.pro_pep[:, 0], self.n_pro)

    @cached_property
    def pep_incidence_pro(self) -> sp.csr_matrix:
        return self._incidence(self.pro_pep[:, 1], self.n_pep)

    @cached_property
    def pep_incidence_psm(self) -> sp.csr_matrix:
        return self._incidence(self.pep_psm[:, 0], self.n_pep)

    @cached_property
    def psm_incidence(self) -> sp.csr_matrix:
        return self._incidence(self.pep_psm[:, 1], self.n_psm)

    def validate(self) -> None:
        """Raise ``ValueError`` if any structural invariant is broken."""
        if np.bincount(self.pep_psm[:, 1], minlength=self.n_psm).tolist() != [1] * self.n_psm:
            raise ValueError("every PSM needs exactly one peptide edge")
        if (np.bincount(self.pro_pep[:, 1], minlength=self.n_pep) == 0).any():
            raise ValueError("peptide without protein edge")
        if (np.bincount(self.pep_psm[:, 0], minlength=self.n_pep) == 0).any():
            raise ValueError("peptide without PSM edge")
        if ((self.e_attr < 0) | (self.e_attr > 1)).any():
            raise ValueError("PSM edge weight outside [0, 1]")
        pep = self.pro_pep[:, 1]
        degree = np.bincount(pep, minlength=self.n_pep)
        nonzero = self.s_attr != 0
        if (np.bincount(pep[nonzero], minlength=self.n_pep) > 1).any():
            raise ValueError("peptide with more than one nonzero sharing attribute")
        if (self.s_attr[nonzero] != 1.0 / degree[pep[nonzero]]).any():
            raise ValueError("nonzero sharing attribute differs from 1/degree")


def build_graph(table: PsmTable, config: GraphBuildConfig | None = None) -> TripartiteGraph:
    """Build the tripartite graph from a labeled (and usually standardized)
    PSM table. PSM edge weight is ``1 - pep``."""
    config = config or GraphBuildConfig(decoy_prefix=table.decoy_prefix)
    if len(table) == 0:
        raise EmptyGraphError("cannot build a graph from an empty PSM table")
    bmap = peptide_protein_map(table)
    groups, grouped = group_proteins(bmap, config.decoy_prefix)
    d = peptide_scores(table)
    s = edge_attrs(grouped, d, config)

    peptides = tuple(sorted(bmap.pep_to_pro))
    pep_index = {p: i for i, p in enumerate(peptides)}
    pro_pep = [(g, pep_index[pep]) for g, peps in grouped.pro_to_pep.items() for pep in peps]
    pro_pep.sort()
    s_attr = np.array([s[(peptides[p], g)] for g, p in pro_pep], dtype=np.float64)

    pep = table.pep
    pep_psm = np.array([(pep_index[p], i) for i, p in enumerate(table.peptides)], dtype=np.int64)
    return TripartiteGraph(
        groups=tuple(groups),
        peptides=peptides,
        psm_ids=tuple(table.spec_ids),
        pro_pep=np.array(pro_pep, dtype=np.int64).reshape(-1, 2),
        s_attr=s_attr,
        pep_psm=pep_psm.reshape(-1, 2),
        e_attr=1.0 - np.asarray(pep, dtype=np.float64),
        psm_features=np.array(table.features, dtype=np.float64),
        pep_max_score=np.array([d[p] for p in peptides], dtype=np.float64),
        feature_names=tuple(table.feature_names),
    )


def sharing_histogram(bmap: BipartiteMap) -> dict[str, int]:
    """Peptide counts by number of parent proteins: ``1``, ``2`` and ``>=3``."""
    hist = {"1": 0, "2": 0, ">=3": 0}
    for pros in bmap.pep_to_pro.values():
        key = "1" if len(pros) == 1 else "2" if len(pros) == 2 else ">=3"
        hist[key] += 1
    return hist


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def dump_graph(graph: TripartiteGraph, out: IO[str] | None = None) -> str:
    """Line-oriented text dump: node sections, then ``PRO_PEP`` and
    ``PEP_PSM`` edge sections."""
    lines = ["# protgnn-graph 1", f"NODES PRO {graph.n_pro}"]
    lines += [f"PRO {g.group_id} {int(g.is_decoy)} {g.key}" for g in graph.groups]
    lines.append(f"NODES PEP {graph.n_pep}")
    lines += [
        f"PEP {i} {p} {_fmt(d)}" for i, (p, d) in enumerate(zip(graph.peptides, graph.pep_max_score))
    ]
    lines.append(f"NODES PSM {graph.n_psm}")
    lines += [f"PSM {i} {s}" for i, s in enumerate(graph.psm_ids)]
    lines.append(f"EDGES PRO_PEP {len(graph.pro_pep)}")
    lines += [f"PRO_PEP {g} {p} {_fmt(s)}" for (g, p), s in zip(graph.pro_pep, graph.s_attr)]
    lines.append(f"EDGES PEP_PSM {len(graph.pep_psm)}")
    lines += [f"PEP_PSM {p} {m} {_fmt(e)}" for (p, m), e in zip(graph.pep_psm, graph.e_attr)]
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text

