"""Batch SI-SDR evaluation and offline real-time-factor measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dsp
from .dsp import (
    ComplexSpectrogram,
    MaskPair,
    Waveform,
    apply_mask_and_reconstruct,
    compute_cirm,
    normalize_and_stack,
    segment_and_pad,
    stft,
    stitch_segments,
)
from .errors import DegenerateInputError, ShapeError
from .model import LmfcaNet
from .roomsim import REF_CHANNEL, load_manifest
from .tensor import Tensor
from .train import si_sdr

RTF_PHASES = "STFT + forward + mask application + iSTFT (file I/O and model load excluded)"


def _ref_index(channels: int) -> int:
    return REF_CHANNEL if channels > 1 else 0


def enhance_waveform(net: LmfcaNet, wav: Waveform) -> Waveform:
    """Full enhancement pipeline; output length equals input length.

    A segment whose reference channel is silent cannot be normalized; it is
    passed through as silence instead of crashing.
    """
    if wav.channels != net.config.mics:
        raise ShapeError(f"model expects {net.config.mics} channels, input has {wav.channels}")
    ref = _ref_index(wav.channels)
    pieces, valids = [], []
    for seg in segment_and_pad(wav):
        try:
            spec = stft(seg.waveform)
            feats, _ = normalize_and_stack(spec, ref)
            y = net.forward(Tensor(feats))
            mask = MaskPair(re=y.data[:, :, 0].astype(np.float64),
                            im=y.data[:, :, 1].astype(np.float64))
            ref_spec = ComplexSpectrogram(spec.channel(ref), n_samples=seg.waveform.n_samples)
            out = apply_mask_and_reconstruct(mask, ref_spec).samples
        except DegenerateInputError:
            out = np.zeros(seg.waveform.n_samples)
        pieces.append(out)
        valids.append(seg.valid)
    return Waveform(stitch_segments(pieces, valids))


def oracle_enhance(mix: Waveform, clean_ref: Waveform) -> Waveform:
    """Apply the computed cIRM itself; the upper bound of mask-based enhancement."""
    ref = _ref_index(mix.channels)
    pieces, valids = [], []
    for ms, cs in zip(segment_and_pad(mix), segment_and_pad(clean_ref)):
        spec = stft(ms.waveform)
        mask = compute_cirm(spec.channel(ref), stft(cs.waveform).channel(0))
        ref_spec = ComplexSpectrogram(spec.channel(ref), n_samples=ms.waveform.n_samples)
        pieces.append(apply_mask_and_reconstruct(mask, ref_spec).samples)
        valids.append(ms.valid)
    return Waveform(stitch_segments(pieces, valids))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    target: str = "direct"
    model_stats: dict = field(default_factory=dict)
    rtf: float | None = None

    @property
    def mean_noisy(self):
        return float(np.mean([r["si_sdr_noisy"] for r in self.rows]))

    @property
    def mean_enhanced(self):
        return float(np.mean([r["si_sdr_enhanced"] for r in self.rows]))

    @property
    def mean_delta(self):
        return float(np.mean([r["delta"] for r in self.rows]))

    def to_text(self) -> str:
        lines = [f"# SI-SDR evaluation, target = {self.target} reference"]
        if self.model_stats:
            stats = ", ".join(f"{k}={v}" for k, v in self.model_stats.items())
            lines.append(f"# model: {stats}")
        if self.rtf is not None:
            lines.append(f"# rtf = {self.rtf:.4f} ({RTF_PHASES})")
        lines.append("id\tsi_sdr_noisy\tsi_sdr_enhanced\tdelta")
        for r in self.rows:
            lines.append(f"{r['id']}\t{r['si_sdr_noisy']:.4f}\t{r['si_sdr_enhanced']:.4f}\t{r['delta']:.4f}")
        lines.append(f"MEAN\t{self.mean_noisy:.4f}\t{self.mean_enhanced:.4f}\t{self.mean_delta:.4f}")
        return "\n".join(lines)


def evaluate(enhance_fn, manifest_path, target: str = "direct",
             model_stats: dict | None = None) -> EvalReport:
    """Score SI-SDR before/after enhancement for every manifest example.

    target picks the scoring reference: 'direct' is the direct-path image
    (the training objective of the SI-SDR loss term), 'reverberant' is the
    reverberant speech image (the mask's own definition target).
    """
    if target not in ("direct", "reverberant"):
        raise ShapeError(f"unknown evaluation target {target!r}")
    entries = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    report = EvalReport(target=target, model_stats=model_stats or {})
    for entry in entries:
        mix = dsp.read_wav(base / entry["mix"])
        ref_wav = dsp.read_wav(base / (entry["direct"] if target == "direct" else entry["clean"]))
        enhanced = enhance_fn(mix)
        if enhanced.n_samples != mix.n_samples:
            raise ShapeError(f"{entry['id']}: enhancement changed the length")
        n = min(mix.n_samples, ref_wav.n_samples)
        ref = ref_wav.samples[:n]
        noisy = si_sdr(mix.samples[:n, _ref_index(mix.channels)] if mix.channels > 1
                       else mix.samples[:n], ref)
        enh = si_sdr(enhanced.samples[:n], ref)
        report.rows.append({
            "id": entry["id"],
            "si_sdr_noisy": noisy,
            "si_sdr_enhanced": enh,
            "delta": enh - noisy,
        })
    return report


def measure_rtf(enhance_fn, input_wav: Waveform, repeats: int = 5) -> dict:
    """Median wall-clock processing time divided by input duration.

    Pinned to a single BLAS thread so the number reflects one core; file
    I/O and model construction are outside the timed region.
    """
    if repeats < 1:
        raise ShapeError("repeats must be >= 1")
    duration = input_wav.duration
    runs = []
    with threadpool_limits(limits=1):
        for _ in range(repeats):
            t0 = time.perf_counter()
            enhance_fn(input_wav)
            runs.append((time.perf_counter() - t0) / duration)
    return {"rtf": float(np.median(runs)), "runs": runs, "duration_s": duration,
            "phases": RTF_PHASES}
