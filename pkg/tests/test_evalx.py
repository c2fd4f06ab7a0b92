import numpy as np
import pytest

import chem
import evalx
from chem import Spectrum
from config import EvalConfig
from evalx import EvalRecord
from infer import PredictionRecord
from msio import AnnotatedSpectrum


def _rec(pred: str, truth: str, confidence: float = 0.5, source_id: str = "") -> EvalRecord:
    return EvalRecord(
        source_id,
        chem.parse_peptide(pred) if pred else (),
        chem.parse_peptide(truth),
        confidence,
    )


@pytest.fixture
def five_psms() -> list[EvalRecord]:
    return [
        _rec("PEPTIDE", "PEPTIDE", 0.9, "exact"),
        _rec("GG", "N", 0.8, "gg-n"),
        _rec("GA", "AG", 0.7, "swap"),
        _rec("", "KR", 0.0, "none"),
        _rec("GASPK", "GASPR", 0.6, "partial"),
    ]


def test_aa_match_identity():
    m = evalx.aa_match(tuple("PEPTIDE"), tuple("PEPTIDE"))
    assert m.n_matched == 7 and m.peptide_correct
    assert m.pairs == [(i, i) for i in range(7)]


def test_aa_match_swapped_residues():
    assert evalx.aa_match(("G", "A"), ("A", "G")).n_matched == 0


def test_aa_match_gg_versus_n():
    m = evalx.aa_match(("G", "G"), ("N",))
    assert m.n_matched == 0
    assert not m.peptide_correct


def test_aa_match_isobaric_residues_count():
    assert evalx.aa_match(tuple("PEPTLDE"), tuple("PEPTIDE")).peptide_correct


def test_five_psm_fixture(five_psms):
    precision, recall = evalx.aa_metrics(five_psms)
    assert precision == 11 / 16
    assert recall == 11 / 17
    pep_precision, auc = evalx.peptide_metrics(five_psms)
    assert pep_precision == 1 / 4
    assert auc == pytest.approx(25 / 48, abs=1e-12)
    assert evalx.ptm_metrics(five_psms) == (None, None)
    report = evalx.evaluate(five_psms)
    assert report.n_psms == 5
    assert report.pep_recall == 1 / 5
    assert [p.coverage for p in report.curve] == [0.25, 0.5, 0.75, 1.0]
    assert [p.precision for p in report.curve] == pytest.approx([1.0, 0.5, 1 / 3, 0.25])


def test_all_exact_predictions():
    records = [_rec(p, p, 0.5) for p in ("PEPTIDE", "GASPK", "MK")]
    assert evalx.aa_metrics(records) == (1.0, 1.0)
    assert evalx.peptide_metrics(records) == (1.0, 1.0)


def test_empty_predictions_leave_precision_undefined():
    records = [_rec("", "PEPTIDE"), _rec("", "GA")]
    assert evalx.aa_metrics(records) == (None, 0.0)
    assert evalx.peptide_metrics(records) == (None, None)
    assert evalx.aa_metrics([]) == (None, None)


def test_two_record_auc():
    records = [_rec("GASPK", "GASPK", 0.9), _rec("GA", "AG", 0.5)]
    precision, auc = evalx.peptide_metrics(records)
    assert precision == 0.5
    curve = evalx.precision_coverage_curve([0.9, 0.5], [True, False])
    assert [(p.coverage, p.precision) for p in curve] == [(0.5, 1.0), (1.0, 0.5)]
    assert auc == pytest.approx(0.75)


def test_tied_confidences_enter_together():
    curve = evalx.precision_coverage_curve([0.5, 0.5, 0.2], [False, True, True])
    assert [p.threshold for p in curve] == [0.5, 0.2]
    assert [p.coverage for p in curve] == pytest.approx([2 / 3, 1.0])
    assert [p.precision for p in curve] == pytest.approx([0.5, 2 / 3])
    assert evalx.curve_auc([]) is None


def test_ptm_fixture():
    records = [
        _rec("PEM(+15.99)K", "PEM(+15.99)K"),
        _rec("PEMK", "PEM(+15.99)K"),
        _rec("Q(+.98)AK", "QAK"),
    ]
    assert evalx.ptm_metrics(records) == (0.5, 0.5)
    precision, recall = evalx.ptm_metrics(records[1:2])
    assert precision is None and recall == 0.0


def test_single_bin_reproduces_global(five_psms):
    values = [0.0, 0.25, 0.5, 0.75, 1.0]
    (row,) = evalx.stratify_by_value(five_psms, values, [0.0, 1.0])
    report = evalx.evaluate(five_psms)
    assert row.n_psms == 5
    assert row.aa_precision == report.aa_precision
    assert row.aa_recall == report.aa_recall
    assert row.pep_precision == report.pep_precision
    assert row.pep_auc == report.pep_auc


def test_bins_are_half_open_with_closed_last_bin(five_psms):
    rows = evalx.stratify_by_value(five_psms, [0.0, 0.5, 0.5, None, 1.0], [0.0, 0.5, 1.0])
    assert [r.n_psms for r in rows] == [1, 3]
    rows = evalx.stratify_by_value(five_psms, [0.1] * 5, [0.0, 0.5, 1.0])
    assert rows[1].n_psms == 0
    assert rows[1].aa_precision is None and rows[1].pep_auc is None


def test_stratify_by_missing_ratio():
    peptide = tuple("PEPTIDE")
    theo = chem.theoretical_spectrum(peptide)
    full = Spectrum(theo.mz, theo.intensity, 500.0, 2)
    half = Spectrum(theo.mz[:6], theo.intensity[:6], 500.0, 2)
    records = [_rec("PEPTIDE", "PEPTIDE"), _rec("PEPTLDE", "PEPTIDE")]
    assert evalx.missing_ratios([full, half], records, 0.05) == [0.0, 0.5]
    rows = evalx.stratify_by_missing_ratio(records, [full, half])
    assert len(rows) == 10
    assert rows[0].n_psms == 1 and rows[5].n_psms == 1
    assert sum(r.n_psms for r in rows) == 2
    # L and I share a mass, so both count as correct peptides
    assert rows[0].pep_recall == rows[5].pep_recall == 1.0
    assert rows[1].pep_recall is None


def test_single_residue_truth_has_zero_missing_ratio():
    records = [_rec("N", "N"), _rec("", "K")]
    spectra = [Spectrum([100.0], [1.0], 300.0, 2)] * 2
    assert evalx.missing_ratios(spectra, records, 0.05) == [0.0, 0.0]
    rows = evalx.stratify_by_missing_ratio(records, spectra, [0.0, 0.2, 0.4, 0.6])
    assert [r.n_psms for r in rows] == [2, 0, 0]
    assert rows[0].pep_recall == 0.5


def test_stratify_by_imputation_loss(five_psms):
    rows = evalx.stratify_by_imputation_loss(five_psms, [0.1, 0.2, 0.3, 0.4, None], n_bins=2)
    assert [r.n_psms for r in rows] == [2, 2]
    assert evalx.stratify_by_imputation_loss(five_psms, [None] * 5) == []


def test_join_records_uses_truth_order():
    spec = Spectrum([100.0], [1.0], 300.0, 2)
    truths = [
        AnnotatedSpectrum(spec, tuple("GASPK"), "b"),
        AnnotatedSpectrum(spec, None, "unannotated"),
        AnnotatedSpectrum(spec, tuple("PEPTIDE"), "a"),
    ]
    preds = [
        PredictionRecord("a", tuple("PEPTIDE"), 0.7, [0.7] * 7, True),
        PredictionRecord("orphan", ("G", "G"), 0.1, [0.1, 0.1], False),
    ]
    records = evalx.join_records(preds, truths)
    assert [r.source_id for r in records] == ["b", "a"]
    assert records[0].pred == () and not records[0].has_prediction
    assert records[1].confidence == 0.7


def test_evaluate_with_spectra_adds_bins(five_psms):
    spectra = [Spectrum([100.0], [1.0], 300.0, 2)] * 5
    report = evalx.evaluate(five_psms, spectra, EvalConfig(bins=[0.0, 0.5, 1.0]))
    assert len(report.per_bin) == 2
    # a single-residue truth has nothing to miss and lands in the first bin
    assert sum(r.n_psms for r in report.per_bin) == report.n_psms == 5
    assert [r.n_psms for r in report.per_bin] == [1, 4]
    assert np.isclose(report.aa_precision, 11 / 16)
