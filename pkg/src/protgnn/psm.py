"""Percolator PIN ingest: parsing, decoy labeling, feature standardization and
the peptide/protein bipartite map.

A PIN file is tab separated. The header names ``SpecId``, ``Label``,
``ScanNr``, then the feature columns, then ``Peptide`` and ``Proteins``.
Everything after the peptide column is a protein accession, so a row may be
wider than its header.
"""
from __future__ import annotations

import io
import re
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np

DEFAULT_DECOY_PREFIX = "DECOY_"
PEP_FEATURE = "pep"
STD_FLOOR = 1e-6

#: The PSM feature set consumed by the model, in canonical column order.
PSM_FEATURES = (
    "pep", "lnrSp", "deltLCn", "deltCn", "XCorr", "Sp", "IonFrac", "Mass",
    "PepLen", "Charge1", "Charge2", "Charge3", "enzN", "enzC", "enzInt",
    "lnNumSP", "dM", "absdM",
)

_LEADING = ("SpecId", "Label", "ScanNr")
_TRAILING = ("Peptide", "Proteins")
_FLANKED = re.compile(r"^[A-Za-z\-]\.(.+)\.[A-Za-z\-]$")


class PinParseError(ValueError):
    """Base class for PIN parsing failures. ``line`` is 1-based."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MalformedHeaderError(PinParseError):
    pass


class ColumnCountError(PinParseError):
    pass


class FeatureValueError(PinParseError):
    def __init__(self, message: str, line: int, column: str):
        super().__init__(message, line)
        self.column = column


class EmptyProteinsError(PinParseError):
    pass


class InsufficientDataError(ValueError):
    pass


def normalize_peptide(peptide: str) -> str:
    """Strip ``X.`` / ``.X`` flanking residues; modifications are kept verbatim.

    >>> normalize_peptide("K.PEPM[15.9949]TIDE.R")
    'PEPM[15.9949]TIDE'
    """
    peptide = peptide.strip()
    m = _FLANKED.match(peptide)
    return m.group(1) if m else peptide


@dataclass(frozen=True)
class PsmRecord:
    spec_id: str
    scan_nr: int
    label: int  # +1 target, -1 decoy
    features: tuple[float, ...]
    peptide: str
    proteins: tuple[str, ...]

    @property
    def is_decoy(self) -> bool:
        return self.label == -1


@dataclass(frozen=True, eq=False)
class PsmTable:
    """Column-oriented, read-only table of PSMs.

    Row ``i`` is available as a :class:`PsmRecord` through ``table[i]``.
    """

    spec_ids: tuple[str, ...]
    scan_nrs: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    peptides: tuple[str, ...]
    proteins: tuple[tuple[str, ...], ...]
    feature_names: tuple[str, ...]
    decoy_prefix: str = DEFAULT_DECOY_PREFIX

    def __post_init__(self):
        n = len(self.spec_ids)
        feats = np.asarray(self.features, dtype=np.float64).reshape(n, len(self.feature_names))
        for name, arr in (
            ("scan_nrs", np.asarray(self.scan_nrs, dtype=np.int64)),
            ("labels", np.asarray(self.labels, dtype=np.int64)),
            ("features", feats),
        ):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (len(self.scan_nrs) == len(self.labels) == len(self.peptides) == len(self.proteins) == n):
            raise ValueError("column lengths differ")

    def __len__(self) -> int:
        return len(self.spec_ids)

    def __getitem__(self, i: int) -> PsmRecord:
        return PsmRecord(
            spec_id=self.spec_ids[i],
            scan_nr=int(self.scan_nrs[i]),
            label=int(self.labels[i]),
            features=tuple(float(x) for x in self.features[i]),
            peptide=self.peptides[i],
            proteins=self.proteins[i],
        )

    @property
    def records(self) -> list[PsmRecord]:
        return [self[i] for i in range(len(self))]

    @property
    def is_decoy(self) -> np.ndarray:
        return self.labels == -1

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"feature {name!r} not in table") from None

    @property
    def pep(self) -> np.ndarray:
        return self.features[:, self.feature_index(PEP_FEATURE)]

    def equals(self, other: "PsmTable") -> bool:
        """Field-wise equality, features compared bit for bit."""
        return (
            self.spec_ids == other.spec_ids
            and self.peptides == other.peptides
            and self.proteins == other.proteins
            and self.feature_names == other.feature_names
            and self.decoy_prefix == other.decoy_prefix
            and np.array_equal(self.scan_nrs, other.scan_nrs)
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    @classmethod
    def from_records(
        cls,
        records: Sequence[PsmRecord],
        feature_names: Sequence[str],
        decoy_prefix: str = DEFAULT_DECOY_PREFIX,
    ) -> "PsmTable":
        feature_names = tuple(feature_names)
        feats = np.array([r.features for r in records], dtype=np.float64).reshape(
            len(records), len(feature_names)
        )
        return cls(
            spec_ids=tuple(r.spec_id for r in records),
            scan_nrs=np.array([r.scan_nr for r in records], dtype=np.int64),
            labels=np.array([r.label for r in records], dtype=np.int64),
            features=feats,
            peptides=tuple(r.peptide for r in records),
            proteins=tuple(tuple(r.proteins) for r in records),
            feature_names=feature_names,
            decoy_prefix=decoy_prefix,
        )


@dataclass(frozen=True)
class FeatureStats:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def apply(self, table: PsmTable) -> PsmTable:
        """Standardize ``table`` with these (training-time) statistics."""
        if tuple(table.feature_names) != tuple(self.feature_names):
            raise ValueError(
                f"feature columns differ: expected {list(self.feature_names)}, "
                f"got {list(table.feature_names)}"
            )
        feats = (table.features - self.mean) / self.std
        if PEP_FEATURE in self.feature_names:
            j = self.feature_names.index(PEP_FEATURE)
            feats[:, j] = table.features[:, j]
        return replace(table, features=feats)


@dataclass(frozen=True)
class BipartiteMap:
    """Peptide to protein adjacency and its exact transpose.

    Protein keys are accession strings for a raw map and integer group ids
    for a grouped map. Neighbor tuples are sorted.
    """

    pep_to_pro: dict = field(default_factory=dict)
    pro_to_pep: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple]) -> "BipartiteMap":
        fwd: dict = {}
        rev: dict = {}
        for pep, pro in pairs:
            fwd.setdefault(pep, set()).add(pro)
            rev.setdefault(pro, set()).add(pep)
        return cls(
            pep_to_pro={k: tuple(sorted(v)) for k, v in sorted(fwd.items())},
            pro_to_pep={k: tuple(sorted(v)) for k, v in sorted(rev.items())},
        )

    def pairs(self) -> list[tuple]:
        return [(pep, pro) for pep, pros in self.pep_to_pro.items() for pro in pros]

    def is_consistent(self) -> bool:
        fwd = {(u, v) for u, vs in self.pep_to_pro.items() for v in vs}
        rev = {(u, v) for v, us in self.pro_to_pep.items() for u in us}
        n_fwd = sum(len(v) for v in self.pep_to_pro.values())
        n_rev = sum(len(v) for v in self.pro_to_pep.values())
        return fwd == rev and n_fwd == len(fwd) and n_rev == len(rev)


def _split_header(header: list[str]) -> tuple[tuple[str, ...], int]:
    missing = [c for c in _LEADING + _TRAILING if c not in header]
    if missing:
        raise MalformedHeaderError(f"missing mandatory column(s): {', '.join(missing)}", 1)
    if tuple(header[:3]) != _LEADING:
        raise MalformedHeaderError(
            f"header must start with {'/'.join(_LEADING)}, got {'/'.join(header[:3])}", 1
        )
    pep_col = header.index("Peptide")
    if header[pep_col + 1 :] != ["Proteins"]:
        raise MalformedHeaderError("Proteins must be the last column, right after Peptide", 1)
    features = tuple(header[3:pep_col])
    if PEP_FEATURE not in features:
        raise MalformedHeaderError(f"missing mandatory feature column {PEP_FEATURE!r}", 1)
    if len(set(features)) != len(features):
        raise MalformedHeaderError("duplicate feature column", 1)
    return features, pep_col


def parse_pin(source, decoy_prefix: str = DEFAULT_DECOY_PREFIX) -> PsmTable:
    """Parse a PIN stream (bytes, text, or a path-like) into a :class:`PsmTable`.

    Labels are taken verbatim from the ``Label`` column; run
    :func:`detect_decoys` to relabel from protein accessions.
    """
    if isinstance(source, (bytes, bytearray)):
        lines = io.StringIO(bytes(source).decode("utf-8"))
    elif isinstance(source, str):
        lines = io.StringIO(source)
    elif hasattr(source, "read"):
        data = source.read()
        lines = io.StringIO(data.decode("utf-8") if isinstance(data, bytes) else data)
    else:
        with open(source, "r", encoding="utf-8") as fh:
            lines = io.StringIO(fh.read())

    header_line = lines.readline()
    if not header_line.strip():
        raise MalformedHeaderError("empty input, no header row", 1)
    header = header_line.rstrip("\r\n").split("\t")
    feature_names, pep_col = _split_header(header)
    pep_j = feature_names.index(PEP_FEATURE)

    spec_ids, scans, labels, feats, peptides, proteins = [], [], [], [], [], []
    for lineno, raw in enumerate(lines, start=2):
        raw = raw.rstrip("\r\n")
        if not raw.strip():
            continue
        cells = raw.split("\t")
        if cells[0] == "DefaultDirection":
            continue
        if len(cells) < len(header):
            raise ColumnCountError(
                f"expected at least {len(header)} columns, found {len(cells)}", lineno
            )
        try:
            label = int(cells[1])
        except ValueError:
            raise FeatureValueError(f"non-integer Label {cells[1]!r}", lineno, "Label") from None
        if label not in (1, -1):
            raise FeatureValueError(f"Label must be 1 or -1, got {label}", lineno, "Label")
        try:
            scan = int(cells[2])
        except ValueError:
            raise FeatureValueError(f"non-integer ScanNr {cells[2]!r}", lineno, "ScanNr") from None
        row = []
        for name, cell in zip(feature_names, cells[3:pep_col]):
            try:
                value = float(cell)
            except ValueError:
                raise FeatureValueError(
                    f"non-numeric value {cell!r} in column {name!r}", lineno, name
                ) from None
            if not np.isfinite(value):
                raise FeatureValueError(f"non-finite value in column {name!r}", lineno, name)
            row.append(value)
        if not 0.0 <= row[pep_j] <= 1.0:
            raise FeatureValueError(
                f"{PEP_FEATURE} must lie in [0, 1], got {row[pep_j]}", lineno, PEP_FEATURE
            )
        prots = tuple(dict.fromkeys(p.strip() for p in cells[pep_col + 1 :] if p.strip()))
        if not prots:
            raise EmptyProteinsError("empty protein list", lineno)
        spec_ids.append(cells[0])
        scans.append(scan)
        labels.append(label)
        feats.append(row)
        peptides.append(normalize_peptide(cells[pep_col]))
        proteins.append(prots)

    return PsmTable(
        spec_ids=tuple(spec_ids),
        scan_nrs=np.array(scans, dtype=np.int64),
        labels=np.array(labels, dtype=np.int64),
        features=np.array(feats, dtype=np.float64).reshape(len(spec_ids), len(feature_names)),
        peptides=tuple(peptides),
        proteins=tuple(proteins),
        feature_names=feature_names,
        decoy_prefix=decoy_prefix,
    )


def write_pin(table: PsmTable, out: IO[str] | None = None) -> str:
    """Serialize ``table`` in canonical PIN layout; floats use ``repr`` so a
    re-parse is bit exact."""
    buf = io.StringIO()
    buf.write("\t".join(_LEADING + table.feature_names + _TRAILING) + "\n")
    for i in range(len(table)):
        cells = [table.spec_ids[i], str(int(table.labels[i])), str(int(table.scan_nrs[i]))]
        cells.extend(repr(float(x)) for x in table.features[i])
        cells.append(table.peptides[i])
        cells.extend(table.proteins[i])
        buf.write("\t".join(cells) + "\n")
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def detect_decoys(table: PsmTable, decoy_prefix: str | None = None) -> PsmTable:
    """Relabel PSMs from their protein accessions.

    A PSM is a decoy only if every protein carries the decoy prefix; any
    target protein makes it a target.
    """
    prefix = table.decoy_prefix if decoy_prefix is None else decoy_prefix
    if not prefix:
        raise ValueError("decoy prefix must be non-empty")
    labels = np.array(
        [-1 if all(p.startswith(prefix) for p in prots) else 1 for prots in table.proteins],
        dtype=np.int64,
    )
    return replace(table, labels=labels, decoy_prefix=prefix)


def load_pin(path, decoy_prefix: str = DEFAULT_DECOY_PREFIX) -> PsmTable:
    """Read a PIN file from disk and mark decoys by accession prefix."""
    with open(path, "rb") as fh:
        return detect_decoys(parse_pin(fh, decoy_prefix), decoy_prefix)


def feature_stats(table: PsmTable) -> FeatureStats:
    if len(table) < 2:
        raise InsufficientDataError(f"need at least 2 PSMs to standardize, got {len(table)}")
    mean = table.features.mean(axis=0)
    std = np.maximum(table.features.std(axis=0), STD_FLOOR)
    if PEP_FEATURE in table.feature_names:
        j = table.feature_index(PEP_FEATURE)
        mean[j], std[j] = 0.0, 1.0
    return FeatureStats(tuple(table.feature_names), mean, std)


def standardize_features(table: PsmTable) -> tuple[PsmTable, FeatureStats]:
    """Z-score every feature column except ``pep``."""
    stats = feature_stats(table)
    return stats.apply(table), stats


def pooled_feature_stats(tables: Sequence[PsmTable]) -> FeatureStats:
    """Statistics over the concatenation of several tables with equal columns."""
    names = {tuple(t.feature_names) for t in tables}
    if len(names) != 1:
        raise ValueError("tables have different feature columns")
    first = tables[0]
    stacked = replace(
        first,
        spec_ids=tuple(s for t in tables for s in t.spec_ids),
        scan_nrs=np.concatenate([t.scan_nrs for t in tables]),
        labels=np.concatenate([t.labels for t in tables]),
        features=np.concatenate([t.features for t in tables]),
        peptides=tuple(p for t in tables for p in t.peptides),
        proteins=tuple(p for t in tables for p in t.proteins),
    )
    return feature_stats(stacked)


def peptide_protein_map(table: PsmTable) -> BipartiteMap:
    return BipartiteMap.from_pairs(
        (pep, pro) for pep, prots in zip(table.peptides, table.proteins) for pro in prots
    )
