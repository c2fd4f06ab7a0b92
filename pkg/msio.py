"""
MGF reading and writing, spectrum preprocessing, synthetic PSMs and datasets
"""

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional

import numpy as np
from pydantic import BaseModel

import chem
from chem import Peptide, Spectrum
from config import PreprocessConfig, SynthParams
from errors import (
    ConfigError,
    DataError,
    DomainError,
    EmptySpectrumError,
    ImpnovoError,
    MgfParseError,
)
from logger import log_event
from parallel import ordered_map
from storage import Storage

SPLITS = ("train", "validation", "test")


@dataclass(eq=False)
class AnnotatedSpectrum:
    spectrum: Spectrum
    peptide: Optional[Peptide]
    source_id: str

    def precursor_error_ppm(self) -> Optional[float]:
        if self.peptide is None:
            return None
        return chem.mass_error_ppm(chem.peptide_mass(self.peptide), self.spectrum.precursor_mass)

    def precursor_consistent(self, tol_ppm: float) -> Optional[bool]:
        """Whether the annotation's mass matches the precursor; None when unannotated"""
        error = self.precursor_error_ppm()
        return None if error is None else abs(error) <= tol_ppm


@dataclass
class DatasetSplit:
    train: list[AnnotatedSpectrum] = field(default_factory=list)
    validation: list[AnnotatedSpectrum] = field(default_factory=list)
    test: list[AnnotatedSpectrum] = field(default_factory=list)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in SPLITS:
            for rec in getattr(self, name):
                if rec.source_id in seen:
                    raise DomainError(
                        f"source_id {rec.source_id!r} appears in {seen[rec.source_id]} and {name}"
                    )
                seen[rec.source_id] = name

    def split(self, name: str) -> list[AnnotatedSpectrum]:
        return getattr(self, name)


@dataclass
class ParseReport:
    n_records: int = 0
    errors: list[MgfParseError] = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return len(self.errors)


class DatasetManifest(BaseModel):
    """Paths of the per-split MGF files, relative to the manifest"""

    version: int = 1
    splits: dict[str, str]
    synth: Optional[SynthParams] = None
    seed: Optional[int] = None


def _text_lines(stream: IO) -> Iterator[str]:
    for line in stream:
        yield line.decode("utf-8") if isinstance(line, bytes) else line


def _parse_charge(value: str, line_no: int) -> int:
    text = value.strip().split()[0] if value.strip() else ""
    sign = -1 if text.endswith("-") else 1
    digits = text.rstrip("+-")
    if not digits.isdigit():
        raise MgfParseError(f"Malformed CHARGE {value!r}", line_no)
    charge = sign * int(digits)
    if not 1 <= charge <= chem.MAX_CHARGE:
        raise MgfParseError(f"CHARGE {value!r} outside 1..{chem.MAX_CHARGE}", line_no)
    return charge


def _build_record(
    params: dict[str, tuple[str, int]],
    peaks: list[tuple[float, float]],
    begin_line: int,
    index: int,
    source_name: str,
) -> AnnotatedSpectrum:
    if "PEPMASS" not in params:
        raise MgfParseError("Record has no PEPMASS", begin_line)
    if "CHARGE" not in params:
        raise MgfParseError("Record has no CHARGE", begin_line)
    pepmass, pep_line = params["PEPMASS"]
    try:
        mz = float(pepmass.split()[0])
    except (ValueError, IndexError):
        raise MgfParseError(f"Malformed PEPMASS {pepmass!r}", pep_line)
    charge = _parse_charge(*params["CHARGE"])
    peptide = None
    if "SEQ" in params and params["SEQ"][0]:
        seq, seq_line = params["SEQ"]
        try:
            peptide = chem.parse_peptide(seq)
        except ImpnovoError as e:
            raise MgfParseError(f"Bad SEQ {seq!r}: {e}", seq_line)
    arr = np.array(peaks, dtype=np.float64).reshape(-1, 2)
    try:
        spectrum = Spectrum(arr[:, 0], arr[:, 1], mz, charge)
    except DomainError as e:
        raise MgfParseError(str(e), begin_line)
    title = params.get("TITLE", ("", 0))[0]
    return AnnotatedSpectrum(spectrum, peptide, title or f"{source_name}:{index}")


def read_mgf(
    stream: IO, strict: bool = False, source_name: str = "mgf"
) -> tuple[list[AnnotatedSpectrum], ParseReport]:
    """
    Parse an MGF text or binary stream

    Args:
        stream: Readable stream of MGF text
        strict: Raise on the first malformed record instead of skipping it
        source_name: Prefix for source ids of records without TITLE

    Returns:
        tuple: parsed records in file order, and a report of skipped records
    """
    records: list[AnnotatedSpectrum] = []
    report = ParseReport()
    params: Optional[dict[str, tuple[str, int]]] = None
    peaks: list[tuple[float, float]] = []
    begin_line = 0
    record_error: Optional[MgfParseError] = None

    def _fail(err: MgfParseError):
        if strict:
            raise err
        log_event("msio", "warning", f"Skipping MGF record: {err}")
        report.errors.append(err)

    line_no = 0
    try:
        for line_no, raw in enumerate(_text_lines(stream), start=1):
            line = raw.strip()
            if not line or line[0] in "#;!/":
                continue
            if line == "BEGIN IONS":
                if params is not None:
                    _fail(MgfParseError("BEGIN IONS inside an open record", line_no))
                params, peaks, begin_line, record_error = {}, [], line_no, None
            elif line == "END IONS":
                if params is None:
                    _fail(MgfParseError("END IONS without BEGIN IONS", line_no))
                    continue
                report.n_records += 1
                try:
                    if record_error is not None:
                        raise record_error
                    records.append(
                        _build_record(params, peaks, begin_line, report.n_records - 1, source_name)
                    )
                except MgfParseError as e:
                    _fail(e)
                params = None
            elif params is None:
                # Global header parameters between records are ignored
                continue
            elif "=" in line and not line[0].isdigit():
                key, value = line.split("=", 1)
                params[key.strip().upper()] = (value.strip(), line_no)
            elif record_error is None:
                parts = line.split()
                try:
                    peaks.append((float(parts[0]), float(parts[1])))
                except (ValueError, IndexError):
                    record_error = MgfParseError(f"Malformed peak line {line!r}", line_no)
    except UnicodeDecodeError as e:
        raise MgfParseError(f"Stream is not UTF-8 text: {e}", line_no + 1) from e
    except OSError as e:
        raise DataError(f"Cannot read MGF stream: {e}") from e

    if params is not None:
        report.n_records += 1
        _fail(MgfParseError("Record not closed by END IONS", begin_line))

    if report.n_skipped:
        log_event(
            "msio",
            "warning",
            f"Parsed {len(records)} of {report.n_records} MGF records",
            {"skipped": report.n_skipped},
        )
    return records, report


def parse_mgf(stream: IO, strict: bool = False) -> list[AnnotatedSpectrum]:
    return read_mgf(stream, strict=strict)[0]


def read_mgf_file(path: str | Path, strict: bool = True) -> list[AnnotatedSpectrum]:
    try:
        with open(path, "rb") as f:
            return read_mgf(f, strict=strict, source_name=Path(path).stem)[0]
    except OSError as e:
        raise DataError(f"Cannot open {path}: {e}") from e


def _is_binary(sink: IO) -> bool:
    return isinstance(sink, (io.RawIOBase, io.BufferedIOBase)) or "b" in getattr(sink, "mode", "")


def format_mgf(records: Iterable[AnnotatedSpectrum]) -> str:
    """MGF text for records; floats use repr so they parse back exactly"""
    lines = []
    for rec in records:
        spec = rec.spectrum
        lines.append("BEGIN IONS")
        lines.append(f"TITLE={rec.source_id}")
        lines.append(f"PEPMASS={float(spec.precursor_mz)!r}")
        lines.append(f"CHARGE={spec.precursor_charge}+")
        if rec.peptide is not None:
            lines.append(f"SEQ={chem.format_peptide(rec.peptide)}")
        for mz, intensity in zip(spec.mz.tolist(), spec.intensity.tolist()):
            lines.append(f"{mz!r} {intensity!r}")
        lines.append("END IONS")
        lines.append("")
    return "\n".join(lines)


def write_mgf(records: Iterable[AnnotatedSpectrum], sink: IO):
    text = format_mgf(records)
    try:
        sink.write(text.encode("utf-8") if _is_binary(sink) else text)
    except OSError as e:
        raise DataError(f"Cannot write MGF: {e}") from e


def preprocess(spectrum: Spectrum, cfg: PreprocessConfig) -> Spectrum:
    """
    Clean a spectrum: m/z window, precursor peak removal, relative intensity
    floor, top-k most intense, sqrt transform, unit norm, ascending m/z

    Raises:
        EmptySpectrumError: nothing survives filtering
    """
    mz, intensity = spectrum.mz, spectrum.intensity
    keep = (mz >= cfg.min_mz) & (mz <= cfg.max_mz)
    if cfg.remove_precursor_tol > 0:
        keep &= np.abs(mz - spectrum.precursor_mz) > cfg.remove_precursor_tol
    mz, intensity = mz[keep], intensity[keep]
    if mz.size == 0 or intensity.max() <= 0:
        raise EmptySpectrumError("No peaks left after m/z filtering")

    keep = intensity >= cfg.min_intensity * intensity.max()
    mz, intensity = mz[keep], intensity[keep]
    if mz.size > cfg.max_peaks:
        top = np.argsort(-intensity, kind="stable")[: cfg.max_peaks]
        mz, intensity = mz[top], intensity[top]

    if cfg.intensity_transform == "sqrt":
        intensity = np.sqrt(intensity)
    intensity = intensity / np.linalg.norm(intensity)
    order = np.argsort(mz, kind="stable")
    return spectrum.with_peaks(mz[order], intensity[order])


def prepare(
    records: Iterable[AnnotatedSpectrum], cfg: PreprocessConfig
) -> list[AnnotatedSpectrum]:
    """Preprocess records, skipping empty spectra and flagging precursor mismatches"""
    prepared = []
    n_empty = n_mismatch = 0
    for rec in records:
        try:
            spectrum = preprocess(rec.spectrum, cfg)
        except EmptySpectrumError:
            n_empty += 1
            continue
        if rec.precursor_consistent(cfg.precursor_tol_ppm) is False:
            n_mismatch += 1
            if cfg.drop_precursor_mismatch:
                continue
        prepared.append(AnnotatedSpectrum(spectrum, rec.peptide, rec.source_id))
    if n_empty or n_mismatch:
        log_event(
            "msio",
            "info",
            f"Prepared {len(prepared)} spectra",
            {"empty_skipped": n_empty, "precursor_mismatch": n_mismatch,
             "mismatch_dropped": cfg.drop_precursor_mismatch},
        )
    return prepared


def _sample_peptide(rng: np.random.Generator, params: SynthParams) -> Peptide:
    length = int(rng.integers(params.min_length, params.max_length + 1))
    residues = [chem.VOCAB.canonical[i] for i in rng.integers(0, len(chem.VOCAB.canonical), length)]
    modifiable = {base: mod for mod, base in chem.VOCAB.base_of.items()}
    for i, tok in enumerate(residues):
        if tok in modifiable and rng.random() < params.ptm_probability:
            residues[i] = modifiable[tok]
    return tuple(residues)


def synth_psm(params: SynthParams, seed: int, index: int) -> AnnotatedSpectrum:
    """One synthetic PSM; depends only on (params, seed, index)"""
    rng = np.random.default_rng([seed, index])
    peptide = _sample_peptide(rng, params)
    theo = chem.theoretical_spectrum(peptide)
    present = rng.random(len(theo)) >= params.missing_ratio
    ion_mz = theo.mz[present] + rng.normal(0.0, params.mz_jitter, int(present.sum()))
    ion_int = rng.uniform(*params.signal_intensity, ion_mz.size)

    mass = chem.peptide_mass(peptide)
    n_noise = int(rng.integers(params.noise_peaks[0], params.noise_peaks[1] + 1))
    noise_mz = rng.uniform(50.0, mass + 2 * chem.PROTON, n_noise)
    noise_int = rng.uniform(0.0, params.noise_intensity_scale, n_noise)

    mz = np.concatenate([ion_mz, noise_mz])
    intensity = np.concatenate([ion_int, noise_int])
    order = np.argsort(mz, kind="stable")
    charge = int(rng.integers(params.charges[0], params.charges[1] + 1))
    spectrum = Spectrum.from_neutral_mass(mass, charge, mz[order], intensity[order])
    return AnnotatedSpectrum(spectrum, peptide, f"synth:{seed}:{index}")


def synth_dataset(params: SynthParams, seed: int) -> DatasetSplit:
    """
    Deterministic synthetic train/validation/test PSMs

    Raises:
        ConfigError: split fractions that do not sum to 1, or a negative seed
    """
    fractions = params.split_fractions
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"Split fractions {fractions} must be non-negative and sum to 1")
    if seed < 0:
        raise ConfigError("Seed must be non-negative")

    psms = ordered_map(lambda i: synth_psm(params, seed, i), range(params.n_psms), component="msio")
    order = np.random.default_rng(seed).permutation(params.n_psms)
    n_train = int(round(fractions[0] * params.n_psms))
    n_val = int(round(fractions[1] * params.n_psms))
    n_val = min(n_val, params.n_psms - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    split = DatasetSplit(*([psms[i] for i in sorted(part)] for part in parts))
    log_event(
        "msio",
        "info",
        f"Synthesized {params.n_psms} PSMs",
        {"seed": seed, "missing_ratio": params.missing_ratio,
         "train": len(split.train), "validation": len(split.validation), "test": len(split.test)},
    )
    return split


def missing_ratio(spectrum: Spectrum, peptide: Peptide, tol: float = 0.05) -> float:
    """Fraction of the 2(L-1) ideal b/y peaks with no observed peak within tol"""
    if len(peptide) < 2:
        raise DomainError("Missing ratio needs at least two residues")
    ideal = chem.theoretical_spectrum(peptide).mz
    if spectrum.n_peaks == 0:
        return 1.0
    observed = np.sort(spectrum.mz)
    last = observed.size - 1
    pos = np.searchsorted(observed, ideal)
    nearest = np.minimum(
        np.abs(observed[np.clip(pos, 0, last)] - ideal),
        np.abs(observed[np.clip(pos - 1, 0, last)] - ideal),
    )
    return float(np.mean(nearest > tol))


def write_dataset(
    split: DatasetSplit,
    storage: Storage,
    params: Optional[SynthParams] = None,
    seed: Optional[int] = None,
) -> list[Path]:
    """Write one MGF per split plus manifest.json into storage"""
    written = []
    paths = {}
    for name in SPLITS:
        paths[name] = f"{name}.mgf"
        written.append(storage.write_text(paths[name], format_mgf(split.split(name))))
    manifest = DatasetManifest(splits=paths, synth=params, seed=seed)
    written.append(storage.write_text("manifest.json", manifest.model_dump_json(indent=2) + "\n"))
    return written


def load_manifest(manifest_path: str | Path) -> DatasetManifest:
    try:
        return DatasetManifest.model_validate_json(Path(manifest_path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"Cannot read manifest {manifest_path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"Invalid manifest {manifest_path}: {e}") from e


def load_dataset(manifest_path: str | Path, strict: bool = True) -> DatasetSplit:
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    parts = {
        name: read_mgf_file(base / manifest.splits[name], strict=strict) if name in manifest.splits else []
        for name in SPLITS
    }
    return DatasetSplit(**parts)
