"""
Amino-acid, peptide and PTM metrics, precision-coverage AUC and stratified
analysis by missing fragmentation ratio or imputation loss
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

import chem
from chem import Peptide, Spectrum
from config import EvalConfig
from errors import DomainError
from logger import log_event
from msio import AnnotatedSpectrum, missing_ratio


@dataclass
class AaMatch:
    n_matched: int
    n_pred: int
    n_truth: int
    pred_flags: np.ndarray
    truth_flags: np.ndarray
    pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def peptide_correct(self) -> bool:
        return self.n_pred == self.n_truth and self.n_pred > 0 and bool(self.pred_flags.all())


@dataclass
class EvalRecord:
    """One annotated spectrum with its prediction; pred is empty when nothing was predicted"""

    source_id: str
    pred: Peptide
    truth: Peptide
    confidence: float = 0.0

    @property
    def has_prediction(self) -> bool:
        return len(self.pred) > 0


class CurvePoint(BaseModel):
    threshold: float
    coverage: float
    precision: float


class BinMetrics(BaseModel):
    lower: float
    upper: float
    n_psms: int
    aa_precision: Optional[float] = None
    aa_recall: Optional[float] = None
    pep_precision: Optional[float] = None
    pep_recall: Optional[float] = None
    pep_auc: Optional[float] = None


class EvalReport(BaseModel):
    n_psms: int
    aa_precision: Optional[float] = None
    aa_recall: Optional[float] = None
    pep_precision: Optional[float] = None
    pep_recall: Optional[float] = None
    pep_auc: Optional[float] = None
    ptm_precision: Optional[float] = None
    ptm_recall: Optional[float] = None
    per_bin: list[BinMetrics] = Field(default_factory=list)
    curve: list[CurvePoint] = Field(default_factory=list)
    imputation_bins: list[BinMetrics] = Field(default_factory=list)


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def aa_match(pred: Sequence[str], truth: Sequence[str], aa_tol: float = 0.1, prefix_tol: float = 0.5) -> AaMatch:
    """
    Walk both prefix-mass ladders; positions pair up when the prefix masses
    agree within prefix_tol and match when the residue masses also agree
    within aa_tol. The pointer with the smaller prefix mass advances otherwise.
    """
    pred_masses = [chem.residue_mass(t) for t in pred]
    truth_masses = [chem.residue_mass(t) for t in truth]
    pred_flags = np.zeros(len(pred), dtype=bool)
    truth_flags = np.zeros(len(truth), dtype=bool)
    pairs = []
    i = j = 0
    cum_pred = cum_truth = 0.0
    while i < len(pred) and j < len(truth):
        next_pred = cum_pred + pred_masses[i]
        next_truth = cum_truth + truth_masses[j]
        if abs(next_pred - next_truth) < prefix_tol:
            if abs(pred_masses[i] - truth_masses[j]) < aa_tol:
                pred_flags[i] = truth_flags[j] = True
                pairs.append((i, j))
            i, j = i + 1, j + 1
            cum_pred, cum_truth = next_pred, next_truth
        elif next_truth > next_pred:
            i, cum_pred = i + 1, next_pred
        else:
            j, cum_truth = j + 1, next_truth
    return AaMatch(len(pairs), len(pred), len(truth), pred_flags, truth_flags, pairs)


def _matches(records: Sequence[EvalRecord], cfg: EvalConfig) -> list[AaMatch]:
    return [aa_match(r.pred, r.truth, cfg.aa_tol, cfg.prefix_tol) for r in records]


def aa_metrics(
    records: Sequence[EvalRecord], cfg: EvalConfig = EvalConfig(), matches: Optional[list[AaMatch]] = None
) -> tuple[Optional[float], Optional[float]]:
    """Corpus-pooled amino-acid precision and recall; None where undefined"""
    matches = _matches(records, cfg) if matches is None else matches
    n_matched = sum(m.n_matched for m in matches)
    return (
        _ratio(n_matched, sum(m.n_pred for m in matches)),
        _ratio(n_matched, sum(m.n_truth for m in matches)),
    )


def precision_coverage_curve(confidences: Sequence[float], correct: Sequence[bool]) -> list[CurvePoint]:
    """Points swept from the highest confidence down; tied confidences enter together"""
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        return []
    order = np.lexsort((hits, -conf))
    conf, hits = conf[order], hits[order]
    cum_hits = np.cumsum(hits)
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    return [
        CurvePoint(
            threshold=float(conf[k]),
            coverage=(k + 1) / conf.size,
            precision=float(cum_hits[k] / (k + 1)),
        )
        for k in ends
    ]


def curve_auc(curve: Sequence[CurvePoint]) -> Optional[float]:
    """Area under the precision-coverage step curve"""
    if not curve:
        return None
    area = prev = 0.0
    for point in curve:
        area += (point.coverage - prev) * point.precision
        prev = point.coverage
    return area


def peptide_metrics(
    records: Sequence[EvalRecord], cfg: EvalConfig = EvalConfig(), matches: Optional[list[AaMatch]] = None
) -> tuple[Optional[float], Optional[float]]:
    """Peptide precision at full coverage and precision-coverage AUC"""
    matches = _matches(records, cfg) if matches is None else matches
    predicted = [(r, m) for r, m in zip(records, matches) if r.has_prediction]
    if not predicted:
        return None, None
    correct = [m.peptide_correct for _, m in predicted]
    curve = precision_coverage_curve([r.confidence for r, _ in predicted], correct)
    return sum(correct) / len(predicted), curve_auc(curve)


def ptm_metrics(
    records: Sequence[EvalRecord], cfg: EvalConfig = EvalConfig(), matches: Optional[list[AaMatch]] = None
) -> tuple[Optional[float], Optional[float]]:
    """A predicted PTM counts when its matched truth position carries the same PTM token"""
    matches = _matches(records, cfg) if matches is None else matches
    tp = n_pred = n_truth = 0
    for rec, m in zip(records, matches):
        n_pred += sum(chem.is_ptm(t) for t in rec.pred)
        n_truth += sum(chem.is_ptm(t) for t in rec.truth)
        tp += sum(1 for i, j in m.pairs if chem.is_ptm(rec.pred[i]) and rec.pred[i] == rec.truth[j])
    return _ratio(tp, n_pred), _ratio(tp, n_truth)


def _bin_index(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    """Bins [e_k, e_k+1), the last one closed; -1 outside"""
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = len(edges) - 2
    idx[(values < edges[0]) | (values > edges[-1]) | np.isnan(values)] = -1
    return idx


def stratify_by_value(
    records: Sequence[EvalRecord],
    values: Sequence[Optional[float]],
    edges: Sequence[float],
    cfg: EvalConfig = EvalConfig(),
) -> list[BinMetrics]:
    """aa and peptide metrics per value bin; empty bins report None metrics"""
    if len(values) != len(records):
        raise DomainError("One value per record is required")
    if len(edges) < 2:
        raise DomainError("At least two bin edges are required")
    vals = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
    idx = _bin_index(vals, edges)
    matches = _matches(records, cfg)
    rows = []
    for k in range(len(edges) - 1):
        members = np.flatnonzero(idx == k)
        recs = [records[i] for i in members]
        ms = [matches[i] for i in members]
        aa_p, aa_r = aa_metrics(recs, cfg, ms)
        pep_p, pep_auc = peptide_metrics(recs, cfg, ms)
        rows.append(
            BinMetrics(
                lower=float(edges[k]),
                upper=float(edges[k + 1]),
                n_psms=len(recs),
                aa_precision=aa_p,
                aa_recall=aa_r,
                pep_precision=pep_p,
                pep_recall=_ratio(sum(m.peptide_correct for m in ms), len(recs)),
                pep_auc=pep_auc,
            )
        )
    return rows


def missing_ratios(spectra: Sequence[Spectrum], records: Sequence[EvalRecord], tol: float) -> list[float]:
    # a single-residue truth has no fragment ions, so none are missing
    return [
        missing_ratio(s, r.truth, tol) if len(r.truth) >= 2 else 0.0
        for s, r in zip(spectra, records)
    ]


def stratify_by_missing_ratio(
    records: Sequence[EvalRecord],
    spectra: Sequence[Spectrum],
    bins: Optional[Sequence[float]] = None,
    cfg: EvalConfig = EvalConfig(),
) -> list[BinMetrics]:
    """Metrics per missing-fragmentation-ratio bin (default ten bins of width 0.1)"""
    if len(spectra) != len(records):
        raise DomainError("One spectrum per record is required")
    bins = cfg.bins if bins is None else bins
    return stratify_by_value(records, missing_ratios(spectra, records, cfg.missing_tol), bins, cfg)


def quantile_edges(values: Sequence[Optional[float]], n_bins: int) -> list[float]:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return []
    return sorted(set(np.quantile(vals, np.linspace(0.0, 1.0, n_bins + 1)).tolist()))


def stratify_by_imputation_loss(
    records: Sequence[EvalRecord],
    losses: Sequence[Optional[float]],
    n_bins: int = 4,
    cfg: EvalConfig = EvalConfig(),
) -> list[BinMetrics]:
    """Metrics per imputation-loss quantile bin"""
    edges = quantile_edges(losses, n_bins)
    if len(edges) < 2:
        return []
    return stratify_by_value(records, losses, edges, cfg)


def join_records(predictions: Sequence, truths: Sequence[AnnotatedSpectrum]) -> list[EvalRecord]:
    """Pair prediction records with annotated spectra by source_id, in truth order"""
    by_id = {p.source_id: p for p in predictions}
    records = []
    for psm in truths:
        if psm.peptide is None:
            continue
        pred = by_id.get(psm.source_id)
        records.append(
            EvalRecord(
                source_id=psm.source_id,
                pred=tuple(pred.peptide) if pred is not None else (),
                truth=psm.peptide,
                confidence=float(pred.peptide_confidence) if pred is not None else 0.0,
            )
        )
    unmatched = len(set(by_id) - {p.source_id for p in truths})
    if unmatched:
        log_event("evalx", "warning", f"{unmatched} predictions have no annotated spectrum")
    return records


def evaluate(
    records: Sequence[EvalRecord],
    spectra: Optional[Sequence[Spectrum]] = None,
    cfg: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Full report; per-bin rows need the observed spectra"""
    matches = _matches(records, cfg)
    aa_p, aa_r = aa_metrics(records, cfg, matches)
    pep_p, pep_auc = peptide_metrics(records, cfg, matches)
    ptm_p, ptm_r = ptm_metrics(records, cfg, matches)
    predicted = [(r, m) for r, m in zip(records, matches) if r.has_prediction]
    curve = precision_coverage_curve(
        [r.confidence for r, _ in predicted], [m.peptide_correct for _, m in predicted]
    )
    report = EvalReport(
        n_psms=len(records),
        aa_precision=aa_p,
        aa_recall=aa_r,
        pep_precision=pep_p,
        pep_recall=_ratio(sum(m.peptide_correct for m in matches), len(records)),
        pep_auc=pep_auc,
        ptm_precision=ptm_p,
        ptm_recall=ptm_r,
        per_bin=stratify_by_missing_ratio(records, spectra, cfg.bins, cfg) if spectra is not None else [],
        curve=curve,
    )
    log_event(
        "evalx",
        "info",
        f"Evaluated {report.n_psms} PSMs",
        {"aa_precision": aa_p, "pep_precision": pep_p, "pep_auc": pep_auc},
    )
    return report
