import io

import numpy as np
import pytest

import chem
import msio
from chem import Spectrum
from config import PreprocessConfig, SynthParams
from errors import ConfigError, DomainError, EmptySpectrumError, MgfParseError
from msio import AnnotatedSpectrum, DatasetSplit

GLYCINE_RECORD = """BEGIN IONS
TITLE=gly
PEPMASS=75.03931
CHARGE=1+
SEQ=G
58.02874 100.0
END IONS
"""


def test_read_annotated_record():
    records, report = msio.read_mgf(io.StringIO(GLYCINE_RECORD))
    assert report.n_records == 1 and report.n_skipped == 0
    rec = records[0]
    assert rec.source_id == "gly"
    assert rec.peptide == ("G",)
    assert rec.spectrum.precursor_charge == 1
    assert rec.spectrum.precursor_mz == 75.03931
    assert rec.spectrum.precursor_mass == pytest.approx(75.03931 - chem.PROTON, abs=1e-9)
    np.testing.assert_array_equal(rec.spectrum.mz, [58.02874])
    # the record is read as written; its PEPMASS sits about 1 Da below [M+H]+ of G
    assert rec.precursor_consistent(50.0) is False
    protonated = GLYCINE_RECORD.replace("PEPMASS=75.03931", "PEPMASS=76.03931")
    (gly,) = msio.parse_mgf(io.StringIO(protonated))
    assert gly.spectrum.precursor_mass == pytest.approx(chem.peptide_mass(("G",)), abs=1e-4)
    assert gly.precursor_consistent(50.0) is True


def test_read_binary_stream_and_empty_stream():
    assert msio.parse_mgf(io.BytesIO(GLYCINE_RECORD.encode()))[0].peptide == ("G",)
    assert msio.parse_mgf(io.StringIO("")) == []


def test_record_without_seq_is_unannotated():
    text = GLYCINE_RECORD.replace("SEQ=G\n", "")
    assert msio.parse_mgf(io.StringIO(text))[0].peptide is None


def test_lenient_parse_skips_and_counts_bad_records():
    bad = GLYCINE_RECORD.replace("CHARGE=1+\n", "").replace("TITLE=gly", "TITLE=bad")
    text = bad + GLYCINE_RECORD
    records, report = msio.read_mgf(io.StringIO(text))
    assert [r.source_id for r in records] == ["gly"]
    assert report.n_records == 2
    assert report.n_skipped == 1
    assert report.errors[0].line == 1


def test_strict_parse_raises_with_line_number():
    text = GLYCINE_RECORD + GLYCINE_RECORD.replace("58.02874 100.0", "58.02874 abc")
    with pytest.raises(MgfParseError) as excinfo:
        msio.read_mgf(io.StringIO(text), strict=True)
    assert excinfo.value.line == 13


@pytest.mark.parametrize(
    "text",
    [
        "BEGIN IONS\nPEPMASS=100\nCHARGE=2+\n",
        "END IONS\n",
        GLYCINE_RECORD.replace("SEQ=G", "SEQ=GX"),
        GLYCINE_RECORD.replace("CHARGE=1+", "CHARGE=12+"),
    ],
)
def test_malformed_records_are_skipped(text):
    records, report = msio.read_mgf(io.StringIO(text))
    assert records == []
    assert report.n_skipped == 1


def _random_record(rng, i) -> AnnotatedSpectrum:
    n = int(rng.integers(0, 30))
    spectrum = Spectrum(
        np.sort(rng.uniform(50.0, 2000.0, n)),
        rng.uniform(0.0, 1e4, n),
        float(rng.uniform(200.0, 1500.0)),
        int(rng.integers(1, 5)),
    )
    peptide = None
    if rng.random() < 0.7:
        peptide = tuple(rng.choice(chem.VOCAB.residues, size=int(rng.integers(1, 15))).tolist())
    return AnnotatedSpectrum(spectrum, peptide, f"rec-{i}")


def test_write_then_read_preserves_fields(rng):
    records = [_random_record(rng, i) for i in range(100)]
    sink = io.StringIO()
    msio.write_mgf(records, sink)
    parsed = msio.parse_mgf(io.StringIO(sink.getvalue()), strict=True)
    assert len(parsed) == 100
    for a, b in zip(records, parsed):
        assert a.source_id == b.source_id
        assert a.peptide == b.peptide
        assert a.spectrum.precursor_mz == b.spectrum.precursor_mz
        assert a.spectrum.precursor_charge == b.spectrum.precursor_charge
        np.testing.assert_array_equal(a.spectrum.mz, b.spectrum.mz)
        np.testing.assert_array_equal(a.spectrum.intensity, b.spectrum.intensity)


def test_write_empty_and_unannotated():
    assert msio.format_mgf([]) == ""
    rec = AnnotatedSpectrum(Spectrum([100.0], [1.0], 300.0, 2), None, "x")
    sink = io.BytesIO()
    msio.write_mgf([rec], sink)
    assert b"SEQ=" not in sink.getvalue()
    assert b"CHARGE=2+" in sink.getvalue()


def test_preprocess_keeps_most_intense():
    rng = np.random.default_rng(0)
    mz = np.sort(rng.uniform(100.0, 2000.0, 200))
    intensity = rng.permutation(np.arange(1, 201, dtype=float))
    spectrum = Spectrum(mz, intensity, 3000.0, 2)
    out = msio.preprocess(spectrum, PreprocessConfig(min_intensity=0.0))
    assert out.n_peaks == 150
    assert set(out.mz.tolist()) == set(mz[intensity > 50].tolist())
    assert np.linalg.norm(out.intensity) == pytest.approx(1.0, abs=1e-6)
    assert np.all(np.diff(out.mz) > 0)


def test_preprocess_sqrt_and_normalize():
    spectrum = Spectrum([300.0, 200.0, 100.0], [9.0, 4.0, 1.0], 1000.0, 2)
    out = msio.preprocess(spectrum, PreprocessConfig())
    np.testing.assert_allclose(out.mz, [100.0, 200.0, 300.0])
    np.testing.assert_allclose(out.intensity, np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0), atol=1e-12)


def test_preprocess_compliant_spectrum_only_rescales():
    spectrum = Spectrum([100.0, 200.0], [0.6, 0.8], 1000.0, 2)
    out = msio.preprocess(spectrum, PreprocessConfig(intensity_transform="none"))
    np.testing.assert_array_equal(out.mz, spectrum.mz)
    np.testing.assert_allclose(out.intensity, spectrum.intensity)


def test_preprocess_removes_precursor_and_window():
    spectrum = Spectrum([20.0, 500.0, 700.0], [1.0, 1.0, 1.0], 500.5, 2)
    out = msio.preprocess(spectrum, PreprocessConfig())
    np.testing.assert_array_equal(out.mz, [700.0])
    with pytest.raises(EmptySpectrumError):
        msio.preprocess(Spectrum([20.0], [1.0], 500.0, 2), PreprocessConfig())


def test_prepare_skips_empty_and_drops_mismatch_on_request():
    good = AnnotatedSpectrum(
        Spectrum.from_neutral_mass(chem.peptide_mass(tuple("PEPTIDE")), 2, [200.0], [1.0]),
        tuple("PEPTIDE"),
        "good",
    )
    off = AnnotatedSpectrum(Spectrum([200.0], [1.0], 900.0, 2), tuple("PEPTIDE"), "off")
    empty = AnnotatedSpectrum(Spectrum([10.0], [1.0], 900.0, 2), None, "empty")
    kept = msio.prepare([good, off, empty], PreprocessConfig())
    assert [r.source_id for r in kept] == ["good", "off"]
    kept = msio.prepare([good, off, empty], PreprocessConfig(drop_precursor_mismatch=True))
    assert [r.source_id for r in kept] == ["good"]


def test_synth_without_missing_keeps_every_ion():
    params = SynthParams(n_psms=30, missing_ratio=0.0, split_fractions=(1.0, 0.0, 0.0))
    split = msio.synth_dataset(params, seed=5)
    assert len(split.train) == 30
    for psm in split.train:
        assert msio.missing_ratio(psm.spectrum, psm.peptide) == 0.0
        assert psm.precursor_consistent(1.0)


def test_synth_is_deterministic(small_synth):
    a = msio.synth_dataset(small_synth, seed=11)
    b = msio.synth_dataset(small_synth, seed=11)
    assert msio.format_mgf(a.train + a.validation + a.test) == msio.format_mgf(
        b.train + b.validation + b.test
    )
    c = msio.synth_dataset(small_synth, seed=12)
    assert msio.format_mgf(c.train) != msio.format_mgf(a.train)


def test_synth_missing_ratio_matches_target():
    params = SynthParams(n_psms=1000, missing_ratio=0.3, split_fractions=(1.0, 0.0, 0.0))
    split = msio.synth_dataset(params, seed=7)
    ratios = [msio.missing_ratio(p.spectrum, p.peptide) for p in split.train]
    assert abs(np.mean(ratios) - 0.3) < 0.02


def test_synth_split_sizes_and_disjointness(small_synth):
    split = msio.synth_dataset(small_synth, seed=1)
    assert (len(split.train), len(split.validation), len(split.test)) == (16, 2, 2)
    ids = [p.source_id for name in msio.SPLITS for p in split.split(name)]
    assert len(ids) == len(set(ids)) == 20


def test_synth_rejects_bad_fractions_and_seed(small_synth):
    with pytest.raises(ConfigError):
        msio.synth_dataset(small_synth.model_copy(update={"split_fractions": (0.5, 0.2, 0.2)}), seed=1)
    with pytest.raises(ConfigError):
        msio.synth_dataset(small_synth, seed=-1)


def test_dataset_split_rejects_shared_ids(small_split):
    with pytest.raises(DomainError):
        DatasetSplit(train=small_split.train, test=small_split.train[:1])


def test_missing_ratio_examples():
    pep = ("P", "E")
    assert msio.missing_ratio(Spectrum([98.06004], [1.0], 200.0, 1), pep) == 0.5
    assert msio.missing_ratio(Spectrum([], [], 200.0, 1), pep) == 1.0
    theo = chem.theoretical_spectrum(tuple("PEPTIDE"))
    assert msio.missing_ratio(Spectrum(theo.mz, theo.intensity, 500.0, 2), tuple("PEPTIDE")) == 0.0
    with pytest.raises(DomainError):
        msio.missing_ratio(Spectrum([98.0], [1.0], 200.0, 1), ("P",))


def test_missing_ratio_never_grows_when_peaks_are_added(rng):
    peptide = tuple("PEPTIDEK")
    ideal = chem.theoretical_spectrum(peptide).mz
    for _ in range(50):
        pool = np.concatenate([ideal, rng.uniform(50.0, 1000.0, 20)])
        pool = pool[rng.permutation(pool.size)]
        previous = 1.0
        for n in range(1, pool.size + 1):
            mz = np.sort(pool[:n])
            ratio = msio.missing_ratio(Spectrum(mz, np.ones(n), 500.0, 2), peptide)
            assert ratio <= previous
            previous = ratio
        assert previous == 0.0


def test_write_and_load_dataset(small_split, small_synth, storage):
    written = msio.write_dataset(small_split, storage, small_synth, seed=3)
    assert {p.name for p in written} == {"train.mgf", "validation.mgf", "test.mgf", "manifest.json"}
    manifest = msio.load_manifest(storage.path("manifest.json"))
    assert manifest.seed == 3 and manifest.synth == small_synth
    loaded = msio.load_dataset(storage.path("manifest.json"))
    for name in msio.SPLITS:
        assert [p.source_id for p in loaded.split(name)] == [p.source_id for p in small_split.split(name)]
        assert [p.peptide for p in loaded.split(name)] == [p.peptide for p in small_split.split(name)]
