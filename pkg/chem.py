"""
Amino-acid vocabulary, monoisotopic mass arithmetic and theoretical spectra
"""

import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, PositiveFloat

from errors import DomainError, VocabularyError

MASS_TABLE_PATH = Path(__file__).with_name("residue_masses.json")

MAX_PEPTIDE_LENGTH = 100
MAX_CHARGE = 10

Peptide = tuple[str, ...]

_TOKEN_RE = re.compile(r"\[\$\]|[A-Z](?:\([^)]*\))?")


class ResidueEntry(BaseModel):
    symbol: str
    mass: PositiveFloat
    note: Optional[str] = None


class ModificationEntry(BaseModel):
    symbol: str
    base: str
    delta: float
    name: str


class MassTable(BaseModel):
    version: str
    units: str
    proton: PositiveFloat
    water: PositiveFloat
    stop: str
    residues: list[ResidueEntry]
    modifications: list[ModificationEntry]
    aliases: dict[str, str] = {}


@lru_cache(maxsize=1)
def mass_table() -> MassTable:
    """The bundled residue mass table"""
    return MassTable.model_validate_json(MASS_TABLE_PATH.read_text(encoding="utf-8"))


class Vocabulary:
    """Token <-> index mapping; index 0 is the stop token"""

    def __init__(self, table: MassTable):
        self.stop = table.stop
        self.masses: dict[str, float] = {r.symbol: r.mass for r in table.residues}
        self.ptm_tokens = frozenset(m.symbol for m in table.modifications)
        for mod in table.modifications:
            self.masses[mod.symbol] = self.masses[mod.base] + mod.delta
        self.canonical = tuple(r.symbol for r in table.residues)
        self.residues = self.canonical + tuple(m.symbol for m in table.modifications)
        self.base_of = {m.symbol: m.base for m in table.modifications}
        self.aliases = dict(table.aliases)
        self.tokens = (self.stop,) + self.residues
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.mass_array = np.array([0.0] + [self.masses[t] for t in self.residues])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def stop_index(self) -> int:
        return 0

    def canonicalize(self, symbol: str) -> str:
        symbol = self.aliases.get(symbol, symbol)
        if symbol not in self._index:
            raise VocabularyError(f"Unknown token: {symbol!r}")
        return symbol

    def index(self, symbol: str) -> int:
        return self._index[self.canonicalize(symbol)]

    def encode(self, peptide: Sequence[str]) -> list[int]:
        return [self.index(tok) for tok in peptide]

    def decode(self, indices: Sequence[int]) -> Peptide:
        try:
            return tuple(self.tokens[i] for i in indices)
        except IndexError as e:
            raise VocabularyError(f"Token index out of range: {e}") from e


VOCAB = Vocabulary(mass_table())
PROTON = mass_table().proton
WATER = mass_table().water
STOP = VOCAB.stop


def residue_mass(token: str) -> float:
    """Monoisotopic residue mass; PTM tokens carry base mass plus delta"""
    symbol = VOCAB.canonicalize(token)
    if symbol == STOP:
        raise VocabularyError("The stop token has no mass")
    return VOCAB.masses[symbol]


def is_ptm(token: str) -> bool:
    return token in VOCAB.ptm_tokens


def parse_peptide(text: str) -> Peptide:
    """
    Split a peptide string such as "PEM(+15.99)K" into vocabulary tokens

    Raises:
        VocabularyError: unknown or unparsable residues
        DomainError: empty or over-long peptide
    """
    text = text.strip()
    pos = 0
    tokens = []
    for match in _TOKEN_RE.finditer(text):
        if match.start() != pos:
            raise VocabularyError(f"Cannot parse {text!r} at position {pos}")
        tok = VOCAB.canonicalize(match.group(0))
        if tok == STOP:
            raise VocabularyError(f"Stop token inside peptide {text!r}")
        tokens.append(tok)
        pos = match.end()
    if pos != len(text):
        raise VocabularyError(f"Cannot parse {text!r} at position {pos}")
    return validate_peptide(tokens)


def validate_peptide(tokens: Sequence[str]) -> Peptide:
    if not 1 <= len(tokens) <= MAX_PEPTIDE_LENGTH:
        raise DomainError(f"Peptide length {len(tokens)} outside 1..{MAX_PEPTIDE_LENGTH}")
    return tuple(tokens)


def format_peptide(peptide: Sequence[str]) -> str:
    return "".join(peptide)


def peptide_mass(peptide: Sequence[str]) -> float:
    """Neutral monoisotopic peptide mass: residues plus water"""
    if len(peptide) == 0:
        raise DomainError("Empty peptide has no mass")
    return float(sum(residue_mass(tok) for tok in peptide) + WATER)


def precursor_mz(neutral_mass: float, charge: int) -> float:
    return neutral_mass / charge + PROTON


def mass_error_ppm(calculated: float, observed: float) -> float:
    return (calculated - observed) / observed * 1e6


@dataclass(eq=False)
class Spectrum:
    """Observed peaks plus precursor m/z and charge"""

    mz: np.ndarray
    intensity: np.ndarray
    precursor_mz: float
    precursor_charge: int

    def __post_init__(self):
        self.mz = np.asarray(self.mz, dtype=np.float64).reshape(-1)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.mz.shape != self.intensity.shape:
            raise DomainError("mz and intensity must have the same length")
        if np.any(self.mz <= 0):
            raise DomainError("Peak m/z values must be strictly positive")
        if np.any(self.intensity < 0):
            raise DomainError("Peak intensities must be non-negative")
        if not 1 <= int(self.precursor_charge) <= MAX_CHARGE:
            raise DomainError(f"Precursor charge {self.precursor_charge} outside 1..{MAX_CHARGE}")
        self.precursor_charge = int(self.precursor_charge)
        self.precursor_mz = float(self.precursor_mz)

    @classmethod
    def from_neutral_mass(cls, neutral_mass: float, charge: int, mz, intensity) -> "Spectrum":
        return cls(mz, intensity, precursor_mz(neutral_mass, charge), charge)

    @property
    def precursor_mass(self) -> float:
        """Neutral precursor mass"""
        return (self.precursor_mz - PROTON) * self.precursor_charge

    @property
    def n_peaks(self) -> int:
        return int(self.mz.shape[0])

    def with_peaks(self, mz, intensity) -> "Spectrum":
        return Spectrum(mz, intensity, self.precursor_mz, self.precursor_charge)


@dataclass(eq=False)
class TheoreticalSpectrum:
    """Singly charged b/y ladder in interleaved order b1, y1, b2, y2, ..."""

    mz: np.ndarray
    intensity: np.ndarray
    ion_labels: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.mz.shape[0])

    def truncated(self, limit: int) -> "TheoreticalSpectrum":
        return TheoreticalSpectrum(
            self.mz[:limit], self.intensity[:limit], self.ion_labels[:limit]
        )


def _masses(peptide: Sequence[str]) -> np.ndarray:
    return np.array([residue_mass(tok) for tok in peptide], dtype=np.float64)


def theoretical_spectrum(
    peptide: Sequence[str], reference_intensity: float = 1.0
) -> TheoreticalSpectrum:
    """
    All 2(L-1) singly charged b and y ions of a peptide

    Args:
        peptide: Residue tokens, length >= 2
        reference_intensity: Intensity given to every ion

    Returns:
        TheoreticalSpectrum: ions ordered b1, y1, b2, y2, ..., b(L-1), y(L-1)
    """
    if len(peptide) < 2:
        raise DomainError("Theoretical spectrum needs at least two residues")
    if not reference_intensity > 0:
        raise DomainError("reference_intensity must be positive")
    masses = _masses(peptide)
    n = len(peptide) - 1
    b = np.cumsum(masses)[:n] + PROTON
    y = np.cumsum(masses[::-1])[:n] + WATER + PROTON
    mz = np.empty(2 * n, dtype=np.float64)
    mz[0::2] = b
    mz[1::2] = y
    labels = [lab for k in range(1, n + 1) for lab in (("b", k), ("y", k))]
    return TheoreticalSpectrum(mz, np.full(2 * n, float(reference_intensity)), labels)


def complementary_spectrum(spectrum: Spectrum) -> Spectrum:
    """Map each peak m to M + 2*proton - m, dropping non-positive results"""
    mz = spectrum.precursor_mass + 2 * PROTON - spectrum.mz
    keep = mz > 0
    order = np.argsort(mz[keep], kind="stable")
    return spectrum.with_peaks(mz[keep][order], spectrum.intensity[keep][order])
