"""
Peak and precursor embedding, spectrum encoder, imputation module and peptide
decoder, plus the combined training objective
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

import assign
import chem
from assign import ImputationOutput
from chem import Spectrum
from config import ModelConfig
from errors import ConfigError, DomainError
from msio import AnnotatedSpectrum

IGNORE_INDEX = -100


def mz_divisors(d: int, lambda_max: float = 10000.0, lambda_min: float = 0.001) -> torch.Tensor:
    """Per-feature wavelengths (lmax/lmin) * (lmin / 2pi)^(2j/d), j = 1..d"""
    if d % 2:
        raise ConfigError(f"Embedding width must be even, got {d}")
    j = torch.arange(1, d + 1, dtype=torch.float64)
    return (lambda_max / lambda_min) * (lambda_min / (2 * math.pi)) ** (2 * j / d)


def encode_mz(
    m, d: int, lambda_max: float = 10000.0, lambda_min: float = 0.001
) -> torch.Tensor:
    """Fixed sinusoidal m/z features: sin for the first d/2, cos for the rest (float64)"""
    divisors = mz_divisors(d, lambda_max, lambda_min)
    arg = torch.as_tensor(m, dtype=torch.float64)[..., None] / divisors
    half = d // 2
    return torch.cat([torch.sin(arg[..., :half]), torch.cos(arg[..., half:])], dim=-1)


def sinusoidal_positions(length: int, d: int) -> torch.Tensor:
    """Standard token-position encoding, length x d"""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe


class MassEncoder(nn.Module):
    def __init__(self, d: int, lambda_max: float, lambda_min: float):
        super().__init__()
        self.d = d
        self.register_buffer("divisors", mz_divisors(d, lambda_max, lambda_min), persistent=False)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        arg = m.double()[..., None] / self.divisors.double()
        half = self.d // 2
        return torch.cat([torch.sin(arg[..., :half]), torch.cos(arg[..., half:])], dim=-1)


class PeakEncoder(nn.Module):
    """m/z sinusoid plus a learned projection of intensity"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mass_encoder = MassEncoder(cfg.d, cfg.lambda_max, cfg.lambda_min)
        self.intensity = nn.Linear(1, cfg.d)

    def forward(self, mz: torch.Tensor, intensity: torch.Tensor) -> torch.Tensor:
        projected = self.intensity(intensity[..., None])
        return self.mass_encoder(mz).to(projected.dtype) + projected


class PrecursorEncoder(nn.Module):
    """Precursor mass sinusoid plus a learned charge embedding"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.max_charge = cfg.max_charge
        self.mass_encoder = MassEncoder(cfg.d, cfg.lambda_max, cfg.lambda_min)
        self.charge = nn.Embedding(cfg.max_charge, cfg.d)

    def forward(self, mass: torch.Tensor, charge: torch.Tensor) -> torch.Tensor:
        if charge.numel() and (charge.min() < 1 or charge.max() > self.max_charge):
            raise DomainError(f"Precursor charge outside 1..{self.max_charge}")
        emb = self.charge(charge.long() - 1)
        return self.mass_encoder(mass).to(emb.dtype) + emb


@dataclass
class SpectrumBatch:
    """Zero-padded peaks; pad_mask is True at padding"""

    mz: torch.Tensor
    intensity: torch.Tensor
    pad_mask: torch.Tensor
    precursor_mass: torch.Tensor
    charge: torch.Tensor

    def __len__(self) -> int:
        return int(self.mz.shape[0])


@dataclass
class TrainBatch:
    spectra: SpectrumBatch
    theory: SpectrumBatch
    n_theory: list[int]
    tokens: torch.Tensor
    targets: torch.Tensor
    n_skipped: int = 0


@dataclass
class LossBreakdown:
    ce_main: torch.Tensor
    ce_theory: torch.Tensor
    imputation: torch.Tensor
    total: torch.Tensor
    n_skipped: int = 0

    def as_floats(self) -> dict[str, float]:
        return {
            "ce_main": float(self.ce_main),
            "ce_theory": float(self.ce_theory),
            "imputation": float(self.imputation),
            "total": float(self.total),
        }


def peak_arrays(spectrum: Spectrum, use_complement: bool) -> tuple[np.ndarray, np.ndarray]:
    """Observed peaks, with complementary peaks appended when enabled"""
    if not use_complement:
        return spectrum.mz, spectrum.intensity
    comp = chem.complementary_spectrum(spectrum)
    return np.concatenate([spectrum.mz, comp.mz]), np.concatenate([spectrum.intensity, comp.intensity])


def spectrum_batch(
    spectra: Sequence[Spectrum],
    use_complement: bool,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str = "cpu",
) -> SpectrumBatch:
    peaks = [peak_arrays(s, use_complement) for s in spectra]
    width = max([mz.size for mz, _ in peaks] + [1])
    mz = np.zeros((len(spectra), width))
    intensity = np.zeros((len(spectra), width))
    pad = np.ones((len(spectra), width), dtype=bool)
    for i, (m, inten) in enumerate(peaks):
        mz[i, : m.size] = m
        intensity[i, : m.size] = inten
        pad[i, : m.size] = False
    return SpectrumBatch(
        mz=torch.as_tensor(mz, dtype=torch.float64, device=device),
        intensity=torch.as_tensor(intensity, dtype=dtype, device=device),
        pad_mask=torch.as_tensor(pad, device=device),
        precursor_mass=torch.tensor([s.precursor_mass for s in spectra], dtype=torch.float64, device=device),
        charge=torch.tensor([s.precursor_charge for s in spectra], dtype=torch.long, device=device),
    )


def peptide_indices(peptide: Sequence[str], reverse: bool) -> list[int]:
    idx = chem.VOCAB.encode(peptide)
    return idx[::-1] if reverse else idx


def theoretical_as_spectrum(psm: AnnotatedSpectrum) -> Spectrum:
    """Ideal b/y peaks at the observed maximum intensity, same precursor"""
    spec = psm.spectrum
    reference = float(spec.intensity.max()) if spec.n_peaks and spec.intensity.max() > 0 else 1.0
    theo = chem.theoretical_spectrum(psm.peptide, reference)
    return Spectrum(theo.mz, theo.intensity, spec.precursor_mz, spec.precursor_charge)


def collate(
    psms: Sequence[AnnotatedSpectrum],
    cfg: ModelConfig,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str = "cpu",
) -> TrainBatch:
    """
    Tensors for a training batch; PSMs with fewer than two residues or more
    than max_len residues are skipped and counted

    Raises:
        DomainError: an unannotated PSM, or nothing left to train on
    """
    kept = []
    for psm in psms:
        if psm.peptide is None:
            raise DomainError(f"PSM {psm.source_id} has no annotation")
        if 2 <= len(psm.peptide) <= cfg.max_len:
            kept.append(psm)
    if not kept:
        raise DomainError("No PSM in the batch has a trainable peptide length")

    length = max(len(p.peptide) for p in kept)
    tokens = torch.zeros(len(kept), length, dtype=torch.long)
    targets = torch.full((len(kept), length + 1), IGNORE_INDEX, dtype=torch.long)
    for i, psm in enumerate(kept):
        idx = peptide_indices(psm.peptide, cfg.reverse)
        tokens[i, : len(idx)] = torch.tensor(idx)
        targets[i, : len(idx) + 1] = torch.tensor(idx + [chem.VOCAB.stop_index])

    theory = [theoretical_as_spectrum(p) for p in kept]
    return TrainBatch(
        spectra=spectrum_batch([p.spectrum for p in kept], cfg.use_complement, dtype, device),
        theory=spectrum_batch(theory, False, dtype, device),
        n_theory=[s.n_peaks for s in theory],
        tokens=tokens.to(device),
        targets=targets.to(device),
        n_skipped=len(psms) - len(kept),
    )


def _causal_mask(size: int, device) -> torch.Tensor:
    return torch.triu(torch.ones(size, size, dtype=torch.bool, device=device), diagonal=1)


class ResidualFFN(nn.Module):
    """Post-norm feed-forward block on top of the encoder stack"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d, cfg.ffn_width), nn.ReLU(), nn.Dropout(cfg.dropout), nn.Linear(cfg.ffn_width, cfg.d)
        )
        self.norm = nn.LayerNorm(cfg.d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.ffn(x))


class SpectrumEncoder(nn.Module):
    """Self-attention over peaks, no positional encoding"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.peak_encoder = PeakEncoder(cfg)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d,
            nhead=cfg.heads,
            dim_feedforward=cfg.ffn_width,
            dropout=cfg.dropout,
            batch_first=True,
        )
        self.transformer_encoder = nn.TransformerEncoder(
            layer, num_layers=cfg.encoder_layers, enable_nested_tensor=False
        )
        self.extra_ffn = ResidualFFN(cfg) if cfg.extra_ffn else None

    def forward(self, mz: torch.Tensor, intensity: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if mz.shape[-1] == 0 or bool(pad_mask.all(dim=-1).any()):
            raise DomainError("Cannot encode a spectrum without peaks")
        peaks = self.peak_encoder(mz, intensity)
        z = self.transformer_encoder(peaks, src_key_padding_mask=pad_mask)
        return z if self.extra_ffn is None else self.extra_ffn(z)


class Imputer(nn.Module):
    """M learned queries decoded against the encoded peaks, with vector and probability heads"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.log_eps = cfg.log_eps
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, cfg.d) * 0.02)
        layer = nn.TransformerDecoderLayer(
            d_model=cfg.d,
            nhead=cfg.heads,
            dim_feedforward=cfg.ffn_width,
            dropout=cfg.dropout,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=cfg.imputer_layers)
        self.vector_head = nn.Sequential(nn.Linear(cfg.d, cfg.d), nn.ReLU(), nn.Linear(cfg.d, cfg.d))
        self.prob_head = nn.Sequential(nn.Linear(cfg.d, cfg.d), nn.ReLU(), nn.Linear(cfg.d, 1))

    def forward(self, z: torch.Tensor, pad_mask: torch.Tensor) -> ImputationOutput:
        queries = self.queries.unsqueeze(0).expand(z.shape[0], -1, -1)
        hidden = self.decoder(queries, z, memory_key_padding_mask=pad_mask)
        probs = torch.sigmoid(self.prob_head(hidden).squeeze(-1))
        return ImputationOutput(
            vectors=self.vector_head(hidden),
            probs=probs.clamp(self.log_eps, 1.0 - self.log_eps),
        )


class PeptideDecoder(nn.Module):
    """Causal decoder over [precursor] + residue tokens with cross-attention to memory"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.max_len = cfg.max_len
        self.precursor_encoder = PrecursorEncoder(cfg)
        self.aa_encoder = nn.Embedding(len(chem.VOCAB), cfg.d)
        self.register_buffer(
            "positions", sinusoidal_positions(cfg.max_len + 1, cfg.d), persistent=False
        )
        layer = nn.TransformerDecoderLayer(
            d_model=cfg.d,
            nhead=cfg.heads,
            dim_feedforward=cfg.ffn_width,
            dropout=cfg.dropout,
            batch_first=True,
        )
        self.transformer_decoder = nn.TransformerDecoder(layer, num_layers=cfg.decoder_layers)
        self.final = nn.Linear(cfg.d, len(chem.VOCAB))

    def forward(
        self,
        tokens: torch.Tensor,
        precursor_mass: torch.Tensor,
        charge: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
    ) -> torch.Tensor:
        if tokens.shape[1] >= self.max_len + 1:
            raise DomainError(f"Prefix of {tokens.shape[1]} tokens exceeds max_len {self.max_len}")
        precursors = self.precursor_encoder(precursor_mass, charge).unsqueeze(1)
        seq = torch.cat([precursors, self.aa_encoder(tokens)], dim=1)
        seq = seq + self.positions[: seq.shape[1]].to(seq.dtype)
        hidden = self.transformer_decoder(
            seq,
            memory,
            tgt_mask=_causal_mask(seq.shape[1], seq.device),
            memory_key_padding_mask=memory_mask,
        )
        return self.final(hidden)


class ImpNovoModel(nn.Module):
    """Spectrum encoder, latent imputation and peptide decoder"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SpectrumEncoder(cfg)
        self.imputer = Imputer(cfg) if cfg.use_imputation else None
        self.decoder = PeptideDecoder(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def spectrum_batch(self, spectra: Sequence[Spectrum], use_complement: Optional[bool] = None) -> SpectrumBatch:
        use_complement = self.cfg.use_complement if use_complement is None else use_complement
        return spectrum_batch(spectra, use_complement, self.dtype, self.device)

    def collate(self, psms: Sequence[AnnotatedSpectrum]) -> TrainBatch:
        return collate(psms, self.cfg, self.dtype, self.device)

    def embed_peaks(self, mz: torch.Tensor, intensity: torch.Tensor) -> torch.Tensor:
        return self.encoder.peak_encoder(mz, intensity.to(self.dtype))

    def embed_precursor(self, mass: torch.Tensor, charge: torch.Tensor) -> torch.Tensor:
        return self.decoder.precursor_encoder(mass, charge)

    def encode(self, batch: SpectrumBatch) -> torch.Tensor:
        return self.encoder(batch.mz, batch.intensity, batch.pad_mask)

    def encode_spectrum(self, spectrum: Spectrum) -> torch.Tensor:
        """(N, d) peak representations of one spectrum, complement included when enabled"""
        return self.encode(self.spectrum_batch([spectrum]))[0]

    def impute(self, z: torch.Tensor, pad_mask: torch.Tensor) -> ImputationOutput:
        if self.imputer is None:
            raise ConfigError("Model was built without the imputation module")
        return self.imputer(z, pad_mask)

    def build_memory(
        self, z: torch.Tensor, pad_mask: torch.Tensor, imp: Optional[ImputationOutput]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """[filtered imputed rows; z], filtering expressed as a key padding mask"""
        if imp is None:
            return z, pad_mask
        keep = assign.filter_mask(imp.probs.detach(), self.cfg.tau)
        return torch.cat([imp.vectors, z], dim=1), torch.cat([~keep, pad_mask], dim=1)

    def memory_for(self, batch: SpectrumBatch) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.encode(batch)
        imp = self.impute(z, batch.pad_mask) if self.imputer is not None else None
        return self.build_memory(z, batch.pad_mask, imp)

    def oracle_memory_for(self, batch: SpectrumBatch, theory: SpectrumBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """[encoded theoretical spectrum; z] in place of imputed rows"""
        z = self.encode(batch)
        zt = self.encode(theory)
        return torch.cat([zt, z], dim=1), torch.cat([theory.pad_mask, batch.pad_mask], dim=1)

    def decode_logits(
        self,
        tokens: torch.Tensor,
        batch: SpectrumBatch,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
    ) -> torch.Tensor:
        """(B, T+1, vocab) logits; row t scores the token after prefix[:t]"""
        return self.decoder(tokens, batch.precursor_mass, batch.charge, memory, memory_mask)

    def _cross_entropy(self, logits: torch.Tensor, targets: torch.Tensor, label_smoothing: float) -> torch.Tensor:
        return F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]),
            targets.reshape(-1),
            ignore_index=IGNORE_INDEX,
            label_smoothing=label_smoothing,
        )

    def _imputation_term(self, imp: ImputationOutput, zt: torch.Tensor, n_theory: Sequence[int]) -> torch.Tensor:
        M = self.cfg.n_queries
        if not (torch.isfinite(imp.vectors).all() and torch.isfinite(imp.probs).all() and torch.isfinite(zt).all()):
            # no assignment exists; the trainer reports the divergence
            return zt.new_full((), float("nan"))
        losses = []
        for b, n in enumerate(n_theory):
            targets = zt[b, : min(n, M)]
            item = imp.item(b)
            with torch.no_grad():
                assignment = assign.solve_assignment(assign.build_cost_matrix(item, targets, M))
            losses.append(assign.imputation_loss(item, targets, assignment, self.cfg.log_eps))
        return torch.stack(losses).mean()

    def forward_train(self, batch: TrainBatch, label_smoothing: float = 0.01) -> LossBreakdown:
        spectra, theory = batch.spectra, batch.theory
        z = self.encode(spectra)
        zero = z.new_zeros(())

        need_theory = self.imputer is not None or self.cfg.use_theory_ce
        zt = self.encode(theory) if need_theory else None

        imp = None
        imputation = zero
        if self.imputer is not None:
            imp = self.impute(z, spectra.pad_mask)
            imputation = self._imputation_term(imp, zt, batch.n_theory)

        memory, memory_mask = self.build_memory(z, spectra.pad_mask, imp)
        logits = self.decode_logits(batch.tokens, spectra, memory, memory_mask)
        ce_main = self._cross_entropy(logits, batch.targets, label_smoothing)

        ce_theory = zero
        if self.cfg.use_theory_ce:
            logits_theory = self.decode_logits(batch.tokens, spectra, zt, theory.pad_mask)
            ce_theory = self._cross_entropy(logits_theory, batch.targets, label_smoothing)

        return LossBreakdown(
            ce_main=ce_main,
            ce_theory=ce_theory,
            imputation=imputation,
            total=ce_main + ce_theory + imputation,
            n_skipped=batch.n_skipped,
        )

    def forward(self, batch: TrainBatch, label_smoothing: float = 0.01) -> LossBreakdown:
        return self.forward_train(batch, label_smoothing)


def build_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32, device: str = "cpu") -> ImpNovoModel:
    return ImpNovoModel(cfg).to(device=device, dtype=dtype)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
