import numpy as np
import pytest

from protgnn.psm import PSM_FEATURES, PsmTable, detect_decoys


def pin_text(rows, feature_names=PSM_FEATURES):
    """rows: (spec_id, label, scan, features, peptide, proteins)."""
    lines = ["\t".join(("SpecId", "Label", "ScanNr") + tuple(feature_names) + ("Peptide", "Proteins"))]
    for sid, label, scan, feats, pep, prots in rows:
        lines.append("\t".join([sid, str(label), str(scan)] + [repr(float(x)) for x in feats] + [pep] + list(prots)))
    return "\n".join(lines) + "\n"


def make_table(psms, n_features=3, prefix="DECOY_"):
    """Tiny table from (peptide, proteins, pep) triples; extra features are
    deterministic ramps."""
    names = ("pep",) + tuple(f"f{i}" for i in range(1, n_features))
    feats = np.array(
        [[pep] + [float(i + j) for j in range(1, n_features)] for i, (_, _, pep) in enumerate(psms)]
    ).reshape(len(psms), n_features)
    table = PsmTable(
        spec_ids=tuple(f"s{i}" for i in range(len(psms))),
        scan_nrs=np.arange(len(psms)),
        labels=np.ones(len(psms), dtype=np.int64),
        features=feats,
        peptides=tuple(p for p, _, _ in psms),
        proteins=tuple(tuple(pr) for _, pr, _ in psms),
        feature_names=names,
        decoy_prefix=prefix,
    )
    return detect_decoys(table)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
