"""
Peptide generation: beam search, greedy decoding, oracle-memory decoding and
prediction files
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
import torch

import assign
import chem
from chem import Peptide, Spectrum
from config import InferConfig
from errors import DataError, DomainError, ImpnovoError
from logger import log_event
from msio import AnnotatedSpectrum
from neural import ImpNovoModel, spectrum_batch, theoretical_as_spectrum
from parallel import ordered_map
from storage import Storage

PREDICTION_COLUMNS = [
    "source_id",
    "peptide",
    "peptide_confidence",
    "residue_confidences",
    "precursor_match",
]


@dataclass
class Hypothesis:
    tokens: list[int]
    log_probs: list[float]
    finished: bool = False

    @property
    def score(self) -> float:
        return float(np.mean(self.log_probs)) if self.log_probs else -math.inf


@dataclass
class PredictionRecord:
    source_id: str
    peptide: Peptide
    peptide_confidence: float
    per_residue_confidences: list[float]
    precursor_match: bool
    complete: bool = True
    score: float = field(default=0.0, repr=False)


MemoryFn = Callable[[ImpNovoModel, Spectrum], tuple[torch.Tensor, torch.Tensor]]


def _imputed_memory(model: ImpNovoModel, spectrum: Spectrum):
    return model.memory_for(model.spectrum_batch([spectrum]))


def _in_order(model: ImpNovoModel, items: list):
    return items[::-1] if model.cfg.reverse else items


def _to_record(
    hyp: Hypothesis,
    model: ImpNovoModel,
    spectrum: Spectrum,
    source_id: str,
    tol_ppm: float,
) -> PredictionRecord:
    residues = hyp.tokens
    residue_lp = hyp.log_probs[: len(residues)]
    peptide = chem.VOCAB.decode(_in_order(model, residues))
    calc = chem.peptide_mass(peptide)
    match = abs(chem.mass_error_ppm(calc, spectrum.precursor_mass)) <= tol_ppm
    return PredictionRecord(
        source_id=source_id,
        peptide=peptide,
        peptide_confidence=math.exp(hyp.score),
        per_residue_confidences=[math.exp(lp) for lp in _in_order(model, residue_lp)],
        precursor_match=bool(match),
        complete=hyp.finished,
        score=hyp.score,
    )


def _next_log_probs(model, batch, memory, memory_mask, prefixes: list[list[int]]) -> np.ndarray:
    k = len(prefixes)
    tokens = torch.tensor(prefixes, dtype=torch.long, device=memory.device).reshape(k, -1)
    logits = model.decode_logits(
        tokens,
        _repeat_batch(batch, k),
        memory.expand(k, -1, -1),
        memory_mask.expand(k, -1),
    )[:, -1]
    return torch.log_softmax(logits.double(), dim=-1).cpu().numpy()


def _repeat_batch(batch, k: int):
    if k == 1:
        return batch
    return type(batch)(
        mz=batch.mz.expand(k, -1),
        intensity=batch.intensity.expand(k, -1),
        pad_mask=batch.pad_mask.expand(k, -1),
        precursor_mass=batch.precursor_mass.expand(k),
        charge=batch.charge.expand(k),
    )


@torch.no_grad()
def _search(
    spectrum: Spectrum,
    model: ImpNovoModel,
    beam_width: int,
    max_len: Optional[int],
    memory_fn: MemoryFn,
) -> tuple[list[Hypothesis], list[Hypothesis]]:
    """Length-synchronized beam search; returns (finished, unfinished) hypotheses"""
    if beam_width < 1:
        raise DomainError("beam_width must be at least 1")
    model.eval()
    max_len = min(max_len or model.cfg.max_len, model.cfg.max_len)
    stop = chem.VOCAB.stop_index
    batch = model.spectrum_batch([spectrum])
    memory, memory_mask = memory_fn(model, spectrum)

    beams = [Hypothesis([], [])]
    finished: list[Hypothesis] = []
    for step in range(max_len):
        lp = _next_log_probs(model, batch, memory, memory_mask, [h.tokens for h in beams])
        if step == 0:
            lp[:, stop] = -np.inf
        cumulative = np.array([sum(h.log_probs) for h in beams])[:, None] + lp
        # 2k candidates so finished ones cannot starve the beam; stable sort
        # breaks ties toward the earlier beam, then the smaller token index
        ranked = np.argsort(-cumulative.reshape(-1), kind="stable")[: 2 * beam_width]

        next_beams = []
        for rank, pick in enumerate(ranked):
            row, token = divmod(int(pick), lp.shape[1])
            if not np.isfinite(lp[row, token]):
                break
            parent = beams[row]
            log_probs = parent.log_probs + [float(lp[row, token])]
            if token == stop:
                # only a stop within the top k ends a hypothesis
                if rank < beam_width:
                    finished.append(Hypothesis(parent.tokens, log_probs, True))
            else:
                next_beams.append(Hypothesis(parent.tokens + [token], log_probs))
                if len(next_beams) == beam_width:
                    break
        beams = next_beams
        if not beams or len(finished) >= beam_width:
            break
    return finished, beams


def _best(
    hypotheses: Sequence[Hypothesis],
    model: ImpNovoModel,
    spectrum: Spectrum,
    source_id: str,
    tol_ppm: float,
) -> PredictionRecord:
    records = [_to_record(h, model, spectrum, source_id, tol_ppm) for h in hypotheses]
    order = sorted(range(len(records)), key=lambda i: (not records[i].precursor_match, -records[i].score))
    return records[order[0]]


def beam_search(
    spectrum: Spectrum,
    model: ImpNovoModel,
    beam_width: int = 5,
    max_len: Optional[int] = None,
    precursor_tol_ppm: float = 50.0,
    source_id: str = "",
    memory_fn: MemoryFn = _imputed_memory,
) -> PredictionRecord:
    """
    Decode a preprocessed spectrum with memory [filtered imputed rows; z]

    Hypotheses outside the precursor tolerance rank below every compliant
    finished hypothesis. The greedy (width 1) hypothesis is ranked together
    with the beam's. If nothing emits the stop token within max_len, the
    best unfinished hypothesis is returned with complete=False.
    """
    finished, unfinished = _search(spectrum, model, beam_width, max_len, memory_fn)
    if beam_width > 1:
        greedy_finished, greedy_unfinished = _search(spectrum, model, 1, max_len, memory_fn)
        finished += greedy_finished
        unfinished += greedy_unfinished
    if finished:
        return _best(finished, model, spectrum, source_id, precursor_tol_ppm)
    log_event("infer", "debug", f"No finished hypothesis for {source_id or 'spectrum'}")
    return _best(unfinished, model, spectrum, source_id, precursor_tol_ppm)


def greedy_decode(
    spectrum: Spectrum,
    model: ImpNovoModel,
    max_len: Optional[int] = None,
    precursor_tol_ppm: float = 50.0,
    source_id: str = "",
) -> PredictionRecord:
    return beam_search(spectrum, model, 1, max_len, precursor_tol_ppm, source_id)


def decode_with_oracle(
    spectrum: Spectrum,
    peptide_truth: Peptide,
    model: ImpNovoModel,
    beam_width: int = 5,
    max_len: Optional[int] = None,
    precursor_tol_ppm: float = 50.0,
    source_id: str = "",
) -> PredictionRecord:
    """Upper-bound decoding with the encoded theoretical spectrum of the truth as memory"""
    if len(peptide_truth) < 2:
        raise DomainError("Oracle decoding needs at least two residues")
    theory = theoretical_as_spectrum(AnnotatedSpectrum(spectrum, tuple(peptide_truth), source_id))

    def _oracle_memory(m: ImpNovoModel, s: Spectrum):
        return m.oracle_memory_for(
            m.spectrum_batch([s]), spectrum_batch([theory], False, m.dtype, m.device)
        )

    return beam_search(spectrum, model, beam_width, max_len, precursor_tol_ppm, source_id, _oracle_memory)


def predict(
    psms: Sequence[AnnotatedSpectrum],
    model: ImpNovoModel,
    cfg: InferConfig,
    oracle: bool = False,
    max_workers: Optional[int] = None,
) -> list[PredictionRecord]:
    """Decode preprocessed spectra in input order"""
    model.eval()

    def _one(psm: AnnotatedSpectrum) -> PredictionRecord:
        if oracle:
            if psm.peptide is None:
                raise DataError(f"Oracle decoding needs an annotation for {psm.source_id}")
            return decode_with_oracle(
                psm.spectrum, psm.peptide, model, cfg.beam_width, cfg.max_len,
                cfg.precursor_tol_ppm, psm.source_id,
            )
        return beam_search(
            psm.spectrum, model, cfg.beam_width, cfg.max_len, cfg.precursor_tol_ppm, psm.source_id
        )

    records = ordered_map(_one, psms, max_workers, component="infer")
    log_event(
        "infer",
        "info",
        f"Decoded {len(records)} spectra",
        {"beam_width": cfg.beam_width, "oracle": oracle},
    )
    return records


@torch.no_grad()
def imputation_losses(model: ImpNovoModel, psms: Sequence[AnnotatedSpectrum]) -> list[Optional[float]]:
    """Imputation loss of each annotated PSM; None where it is undefined"""
    if model.imputer is None:
        return [None] * len(psms)
    model.eval()
    losses: list[Optional[float]] = []
    for psm in psms:
        if psm.peptide is None or not 2 <= len(psm.peptide) <= model.cfg.max_len:
            losses.append(None)
            continue
        batch = model.collate([psm])
        z = model.encode(batch.spectra)
        zt = model.encode(batch.theory)[0, : min(batch.n_theory[0], model.cfg.n_queries)]
        imp = model.impute(z, batch.spectra.pad_mask).item(0)
        assignment = assign.solve_assignment(assign.build_cost_matrix(imp, zt, model.cfg.n_queries))
        losses.append(float(assign.imputation_loss(imp, zt, assignment, model.cfg.log_eps)))
    return losses


def predictions_frame(records: Sequence[PredictionRecord]) -> pd.DataFrame:
    rows = [
        {
            "source_id": r.source_id,
            "peptide": chem.format_peptide(r.peptide),
            "peptide_confidence": r.peptide_confidence,
            "residue_confidences": ",".join(repr(c) for c in r.per_residue_confidences),
            "precursor_match": r.precursor_match,
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=PREDICTION_COLUMNS)


def write_predictions(records: Sequence[PredictionRecord], storage: Storage, name: str = "predictions.tsv") -> Path:
    text = predictions_frame(records).to_csv(sep="\t", index=False, float_format="%.17g")
    return storage.write_text(name, text)


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    """Load a prediction file written by write_predictions"""
    try:
        frame = pd.read_csv(path, sep="\t", dtype={"source_id": str, "peptide": str, "residue_confidences": str}, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read predictions {path}: {e}") from e
    missing = set(PREDICTION_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"Prediction file {path} lacks columns {sorted(missing)}")

    records = []
    for row in frame.itertuples(index=False):
        try:
            peptide = chem.parse_peptide(row.peptide)
            confidences = [float(c) for c in row.residue_confidences.split(",") if c]
        except (ImpnovoError, ValueError) as e:
            raise DataError(f"Bad prediction row for {row.source_id}: {e}") from e
        match = row.precursor_match
        if isinstance(match, str):
            match = match.strip().lower() == "true"
        records.append(
            PredictionRecord(
                source_id=row.source_id,
                peptide=peptide,
                peptide_confidence=float(row.peptide_confidence),
                per_residue_confidences=confidences,
                precursor_match=bool(match),
            )
        )
    return records
