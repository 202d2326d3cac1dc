"""Synthetic PIN data with planted ground truth.

Peptides of present ("true") proteins get PSMs with low error
probabilities; peptides that belong only to entrapment or decoy proteins
get PSMs from a worse distribution. Other features are noisy Gaussians
that move with ``1 - pep``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluate import ENTRAPMENT, TRUE
from .psm import DEFAULT_DECOY_PREFIX, PSM_FEATURES, PsmTable, detect_decoys, parse_pin

AMINO_ACIDS = np.array(list("ACDEFGHIKLMNPQRSTVWY"))
OXIDATION = "M[15.9949]"


@dataclass(frozen=True)
class SynthConfig:
    n_true: int = 60
    n_entrapment: int = 60
    peptides_min: int = 2
    peptides_max: int = 8
    p_share: float = 0.3
    psms_min: int = 1
    psms_max: int = 4
    present_beta: tuple[float, float] = (1.0, 6.0)
    absent_beta: tuple[float, float] = (2.0, 2.0)
    decoy_fraction: float = 0.5
    decoy_prefix: str = DEFAULT_DECOY_PREFIX
    seed: int = 42

    def __post_init__(self):
        counts = (self.n_true, self.n_entrapment, self.peptides_min, self.peptides_max,
                  self.psms_min, self.psms_max)
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        if self.n_true + self.n_entrapment == 0:
            raise ValueError("need at least one true or entrapment protein")
        if self.peptides_min < 1 or self.peptides_min > self.peptides_max:
            raise ValueError("need 1 <= peptides_min <= peptides_max")
        if self.psms_min < 1 or self.psms_min > self.psms_max:
            raise ValueError("need 1 <= psms_min <= psms_max")
        if not 0.0 <= self.p_share <= 1.0:
            raise ValueError("p_share must lie in [0, 1]")
        if self.decoy_fraction < 0:
            raise ValueError("decoy_fraction must be non-negative")
        if min(self.present_beta + self.absent_beta) <= 0:
            raise ValueError("beta parameters must be positive")
        if not self.decoy_prefix:
            raise ValueError("decoy prefix must be non-empty")


class _PeptideFactory:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.seen: set[str] = set()

    def __call__(self) -> str:
        while True:
            n = int(self.rng.integers(7, 21))
            seq = "".join(self.rng.choice(AMINO_ACIDS, size=n - 1)) + self.rng.choice(["K", "R"])
            if seq not in self.seen:
                self.seen.add(seq)
                return seq


def _assign(pool: list[str], cfg: SynthConfig, rng, make_peptide) -> dict[str, list[str]]:
    """peptide -> parents; every protein gets its own peptides and each
    peptide picks a second parent with probability ``p_share``."""
    parents: dict[str, list[str]] = {}
    for i, prot in enumerate(pool):
        for _ in range(int(rng.integers(cfg.peptides_min, cfg.peptides_max + 1))):
            pep = make_peptide()
            parents[pep] = [prot]
            if len(pool) > 1 and rng.random() < cfg.p_share:
                j = int(rng.integers(len(pool) - 1))
                parents[pep].append(pool[j if j < i else j + 1])
    return parents


def _features(q: float, peptide: str, rng) -> list[float]:
    charge = int(rng.choice([1, 2, 3], p=[0.1, 0.6, 0.3]))
    dm = float(rng.normal(0.0, 0.005 + 0.02 * (1 - q)))
    n_res = len(peptide.replace(OXIDATION, "M"))
    return [
        max(0.0, float(rng.normal(1.5 * (1 - q), 0.5))),             # lnrSp
        float(rng.normal(0.3 + 0.5 * q, 0.1)),                       # deltLCn
        float(rng.normal(0.05 + 0.3 * q, 0.05)),                     # deltCn
        float(rng.normal(1.0 + 2.5 * q, 0.4)),                       # XCorr
        float(rng.normal(200 + 400 * q, 80)),                        # Sp
        float(np.clip(rng.normal(0.2 + 0.5 * q, 0.08), 0, 1)),       # IonFrac
        float(rng.uniform(800, 3500)),                               # Mass
        float(n_res),                                                # PepLen
        float(charge == 1), float(charge == 2), float(charge == 3),  # Charge1..3
        1.0,                                                         # enzN
        float(rng.random() < 0.95),                                  # enzC
        float(rng.poisson(0.2)),                                     # enzInt
        float(rng.normal(5.0, 0.5)),                                 # lnNumSP
        dm,                                                          # dM
        abs(dm),                                                     # absdM
    ]


def generate_pin(config: SynthConfig) -> tuple[str, dict[str, str], dict]:
    """PIN text, ground truth and generator bookkeeping for ``config``."""
    rng = np.random.default_rng(config.seed)
    n_targets = config.n_true + config.n_entrapment
    accessions = [f"PRT{i:05d}" for i in rng.permutation(n_targets) + 1]
    truth = {
        acc: TRUE if i < config.n_true else ENTRAPMENT for i, acc in enumerate(accessions)
    }
    n_decoys = int(round(config.decoy_fraction * n_targets))
    order = list(rng.permutation(accessions))
    decoys = sorted(
        config.decoy_prefix + order[i % n_targets] + (f"_{i // n_targets}" if i >= n_targets else "")
        for i in range(n_decoys)
    )

    make_peptide = _PeptideFactory(rng)
    parents = _assign(sorted(accessions), config, rng, make_peptide)
    parents.update(_assign(decoys, config, rng, make_peptide))
    if not parents:
        raise ValueError("configuration produced no peptides")

    rows = []
    for pep, prots in parents.items():
        present = any(truth.get(p) == TRUE for p in prots)
        a, b = config.present_beta if present else config.absent_beta
        shown = pep.replace("M", OXIDATION, 1) if "M" in pep and rng.random() < 0.3 else pep
        for _ in range(int(rng.integers(config.psms_min, config.psms_max + 1))):
            pep_err = float(rng.beta(a, b))
            rows.append((shown, prots, pep_err, _features(1 - pep_err, shown, rng)))

    lines = ["\t".join(("SpecId", "Label", "ScanNr") + PSM_FEATURES + ("Peptide", "Proteins"))]
    for scan, i in enumerate(rng.permutation(len(rows)), start=1):
        shown, prots, pep_err, feats = rows[i]
        label = -1 if all(p.startswith(config.decoy_prefix) for p in prots) else 1
        charge = 1 + int(np.argmax(feats[8:11]))
        cells = [f"synth_{scan}_{charge}_1", str(label), str(scan), repr(pep_err)]
        cells += [repr(x) for x in feats]
        cells.append(f"{rng.choice(AMINO_ACIDS)}.{shown}.{rng.choice(AMINO_ACIDS)}")
        cells += list(prots)
        lines.append("\t".join(cells))

    info = {
        "n_psms": len(rows),
        "n_peptides": len(parents),
        "n_proteins": n_targets + len(decoys),
        "n_decoy_proteins": len(decoys),
        "parents_per_peptide": {p: len(v) for p, v in parents.items()},
    }
    return "\n".join(lines) + "\n", truth, info


def generate(config: SynthConfig) -> tuple[PsmTable, dict[str, str]]:
    """Decoy-labeled PSM table and ground truth for ``config``."""
    text, truth, _ = generate_pin(config)
    table = detect_decoys(parse_pin(text, config.decoy_prefix), config.decoy_prefix)
    return table, truth


def random_small_table(
    rng: np.random.Generator,
    n_proteins: int,
    n_peptides: int,
    n_psms: int,
    *,
    n_features: int = len(PSM_FEATURES),
    decoy_prefix: str = DEFAULT_DECOY_PREFIX,
) -> PsmTable:
    """Tiny random PSM table for gradient checks and property tests.

    Every peptide gets at least one PSM and one to three parent proteins.
    """
    if n_psms < n_peptides:
        raise ValueError("need at least one PSM per peptide")
    names = ("pep",) + tuple(f"f{i}" for i in range(1, n_features))
    proteins = [
        (decoy_prefix if rng.random() < 0.25 else "") + f"P{i:02d}" for i in range(n_proteins)
    ]
    peps = [f"PEP{i:02d}K" for i in range(n_peptides)]
    parents = {
        p: sorted(rng.choice(proteins, size=int(rng.integers(1, min(3, n_proteins) + 1)), replace=False))
        for p in peps
    }
    owner = list(range(n_peptides)) + list(rng.integers(0, n_peptides, size=n_psms - n_peptides))
    rng.shuffle(owner)
    feats = rng.normal(size=(n_psms, n_features))
    feats[:, 0] = rng.uniform(0, 1, size=n_psms)
    prots = tuple(tuple(parents[peps[o]]) for o in owner)
    table = PsmTable(
        spec_ids=tuple(f"s{i}" for i in range(n_psms)),
        scan_nrs=np.arange(n_psms),
        labels=np.ones(n_psms, dtype=np.int64),
        features=feats,
        peptides=tuple(peps[o] for o in owner),
        proteins=prots,
        feature_names=names,
        decoy_prefix=decoy_prefix,
    )
    return detect_decoys(table)
