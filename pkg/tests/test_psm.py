import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_table, pin_text
from protgnn import synth
from protgnn.psm import (
    PSM_FEATURES,
    BipartiteMap,
    ColumnCountError,
    EmptyProteinsError,
    FeatureValueError,
    InsufficientDataError,
    MalformedHeaderError,
    PsmTable,
    detect_decoys,
    feature_stats,
    load_pin,
    normalize_peptide,
    parse_pin,
    peptide_protein_map,
    pooled_feature_stats,
    standardize_features,
    write_pin,
)

FEATS = [0.01] + [float(i) for i in range(1, len(PSM_FEATURES))]


class TestParsePin:
    def test_single_row_fields(self):
        text = pin_text([("s1", 1, 7, FEATS, "K.PEPTIDE.R", ["P1", "P2"])])
        table = parse_pin(text)
        assert len(table) == 1
        rec = table[0]
        assert rec.spec_id == "s1"
        assert rec.scan_nr == 7
        assert rec.label == 1
        assert rec.peptide == "PEPTIDE"
        assert rec.proteins == ("P1", "P2")
        assert rec.features == tuple(FEATS)
        assert table.feature_names == PSM_FEATURES

    def test_header_only_gives_empty_table(self):
        table = parse_pin(pin_text([]))
        assert len(table) == 0
        assert table.features.shape == (0, len(PSM_FEATURES))

    def test_bad_feature_value_names_row_and_column(self):
        feats = list(map(str, FEATS))
        feats[PSM_FEATURES.index("XCorr")] = "abc"
        header = pin_text([]).rstrip("\n")
        text = header + "\n" + "\t".join(["s1", "1", "1"] + feats + ["PEPK", "P1"]) + "\n"
        with pytest.raises(FeatureValueError) as exc:
            parse_pin(text)
        assert exc.value.line == 2
        assert exc.value.column == "XCorr"

    def test_accepts_bytes_and_streams(self):
        text = pin_text([("s1", 1, 1, FEATS, "PEPK", ["P1"])])
        a = parse_pin(text)
        assert a.equals(parse_pin(text.encode()))
        assert a.equals(parse_pin(io.StringIO(text)))
        assert a.equals(parse_pin(io.BytesIO(text.encode())))

    def test_missing_columns(self):
        with pytest.raises(MalformedHeaderError):
            parse_pin("SpecId\tLabel\n")
        with pytest.raises(MalformedHeaderError):
            parse_pin("")

    def test_short_row(self):
        text = pin_text([]) + "s1\t1\t1\t0.5\n"
        with pytest.raises(ColumnCountError) as exc:
            parse_pin(text)
        assert exc.value.line == 2

    def test_no_proteins(self):
        text = pin_text([("s1", 1, 1, FEATS, "PEPK", [])])
        with pytest.raises((EmptyProteinsError, ColumnCountError)):
            parse_pin(text)

    @pytest.mark.parametrize("pep", [-0.1, 1.5, float("nan")])
    def test_pep_out_of_range(self, pep):
        feats = [pep] + FEATS[1:]
        with pytest.raises(FeatureValueError):
            parse_pin(pin_text([("s1", 1, 1, feats, "PEPK", ["P1"])]))

    def test_bad_label(self):
        text = pin_text([("s1", 0, 1, FEATS, "PEPK", ["P1"])])
        with pytest.raises(FeatureValueError):
            parse_pin(text)

    def test_duplicate_proteins_dropped(self):
        table = parse_pin(pin_text([("s1", 1, 1, FEATS, "PEPK", ["P1", "P2", "P1"])]))
        assert table[0].proteins == ("P1", "P2")

    def test_default_direction_row_skipped(self):
        header = pin_text([]).rstrip("\n")
        text = header + "\nDefaultDirection\t-\t-" + "\t0" * len(PSM_FEATURES) + "\n"
        text += pin_text([("s1", 1, 1, FEATS, "PEPK", ["P1"])]).split("\n", 1)[1]
        assert len(parse_pin(text)) == 1

    def test_load_pin_reads_path(self, tmp_path):
        path = tmp_path / "a.pin"
        path.write_text(pin_text([("s1", 1, 1, FEATS, "PEPK", ["DECOY_P1"])]))
        table = load_pin(path)
        assert table.is_decoy.tolist() == [True]


def test_normalize_peptide():
    assert normalize_peptide("K.PEPM[15.9949]TIDE.R") == "PEPM[15.9949]TIDE"
    assert normalize_peptide("-.PEPTIDE.-") == "PEPTIDE"
    assert normalize_peptide("PEPTIDE") == "PEPTIDE"
    assert normalize_peptide("n[42.01]PEP") == "n[42.01]PEP"


class TestDecoys:
    def test_prefix_rule(self):
        t = make_table([("A", ["DECOY_P1"], 0.1), ("B", ["P1", "DECOY_P2"], 0.1), ("C", ["P3"], 0.1)])
        assert t.labels.tolist() == [-1, 1, 1]

    def test_empty_prefix_rejected(self):
        t = make_table([("A", ["P1"], 0.1)])
        with pytest.raises(ValueError):
            detect_decoys(t, "")

    def test_idempotent(self):
        table, _ = synth.generate(synth.SynthConfig(n_true=5, n_entrapment=5, seed=3))
        once = detect_decoys(table)
        assert detect_decoys(once).equals(once)

    def test_custom_prefix(self):
        t = make_table([("A", ["REV_P1"], 0.1), ("B", ["P2"], 0.1)], prefix="REV_")
        assert t.labels.tolist() == [-1, 1]


class TestStandardize:
    def test_hand_values(self):
        t = PsmTable(
            spec_ids=("a", "b"), scan_nrs=np.array([1, 2]), labels=np.array([1, 1]),
            features=np.array([[0.1, 1.0, 5.0], [0.9, 3.0, 5.0]]),
            peptides=("P", "Q"), proteins=(("X",), ("X",)), feature_names=("pep", "a", "b"),
        )
        std, stats = standardize_features(t)
        assert std.features[:, 1].tolist() == [-1.0, 1.0]
        assert std.features[:, 2].tolist() == [0.0, 0.0]
        assert std.features[:, 0].tolist() == [0.1, 0.9]
        assert stats.std[2] == pytest.approx(1e-6)

    def test_too_few_rows(self):
        t = make_table([("A", ["P1"], 0.1)])
        with pytest.raises(InsufficientDataError):
            feature_stats(t)

    def test_moments(self):
        table, _ = synth.generate(synth.SynthConfig(n_true=10, n_entrapment=10, seed=5))
        std, stats = standardize_features(table)
        j = table.feature_index("pep")
        for i in range(std.features.shape[1]):
            if i == j:
                continue
            col = std.features[:, i]
            assert abs(col.mean()) < 1e-9
            if stats.std[i] > 1e-6:
                assert abs(col.std() - 1) < 1e-9

    def test_stats_reapply(self):
        a, _ = synth.generate(synth.SynthConfig(n_true=4, n_entrapment=4, seed=1))
        b, _ = synth.generate(synth.SynthConfig(n_true=4, n_entrapment=4, seed=2))
        stats = pooled_feature_stats([a, b])
        both = np.vstack([a.features, b.features])
        np.testing.assert_allclose(stats.mean[1:], both.mean(axis=0)[1:])
        wrong = make_table([("A", ["P1"], 0.1), ("B", ["P1"], 0.2)])
        with pytest.raises(ValueError):
            stats.apply(wrong)


class TestBipartite:
    def test_dedup(self):
        t = make_table([("p", ["P"], 0.1), ("p", ["P"], 0.2)])
        assert peptide_protein_map(t).pairs() == [("p", "P")]

    def test_small_map(self):
        t = make_table([("p1", ["A", "B"], 0.1), ("p2", ["B"], 0.2)])
        m = peptide_protein_map(t)
        assert m.pro_to_pep == {"A": ("p1",), "B": ("p1", "p2")}
        assert m.pep_to_pro == {"p1": ("A", "B"), "p2": ("B",)}

    def test_empty(self):
        m = peptide_protein_map(parse_pin(pin_text([])))
        assert m.pep_to_pro == {} and m.pro_to_pep == {}

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 6)), max_size=40))
    def test_transpose_consistent(self, pairs):
        m = BipartiteMap.from_pairs((f"p{a}", f"P{b}") for a, b in pairs)
        assert m.is_consistent()
        assert sorted(m.pairs()) == sorted(set((f"p{a}", f"P{b}") for a, b in pairs))


_floats = st.floats(allow_nan=False, allow_infinity=False, width=64)
_ident = st.text("ABCDEFGHIKLMNPQRSTVWY", min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.integers(0, 10**6),
            st.sampled_from([1, -1]),
            st.floats(0, 1),
            st.lists(_floats, min_size=2, max_size=2),
            _ident,
            st.lists(_ident, min_size=1, max_size=3, unique=True),
        ),
        max_size=12,
    )
)
def test_write_parse_roundtrip(rows):
    text = pin_text(
        [(f"s{i}", lab, scan, [pep] + xs, pep_seq, prots) for i, (scan, lab, pep, xs, pep_seq, prots) in enumerate(rows)],
        feature_names=("pep", "a", "b"),
    )
    table = parse_pin(text)
    again = parse_pin(write_pin(table))
    assert again.equals(table)
