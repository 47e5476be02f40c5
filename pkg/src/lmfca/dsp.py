"""STFT analysis/synthesis, cIRM targets, masking, and segmentation.

Fixed analysis chain for the whole toolkit: 16 kHz audio, 510-sample
periodic Hann window, hop 255 (50% overlap), centered frames with reflect
padding. That yields 256 one-sided bins, and 3 s of audio lands on 189
frames, padded to 192 so the encoder can pool three times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import AudioFormatError, DegenerateInputError, ShapeError
from .tensor import Tensor, _finite

SAMPLE_RATE = 16000
WIN = 510
HOP = 255
N_BINS = WIN // 2 + 1  # 256
FRAME_MULTIPLE = 8
SEGMENT_SECONDS = 3.0

MASK_CLIP = 5.0
CIRM_EPS = 1e-8

_window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WIN) / WIN)  # periodic Hann

# rfft bin multiplicities for the irfft adjoint: interior bins appear twice
# in the Hermitian extension, and numpy's irfft ignores the imaginary part
# of bins 0 and N/2.
_BIN_WEIGHT = np.full(N_BINS, 2.0)
_BIN_WEIGHT[0] = 1.0
_BIN_WEIGHT[-1] = 1.0


@dataclass
class Waveform:
    samples: np.ndarray  # (n,) mono or (n, M)
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.size == 0:
            raise DegenerateInputError("empty signal")
        if not np.all(np.isfinite(self.samples)):
            raise DegenerateInputError("non-finite samples")
        if np.max(np.abs(self.samples)) > 32.0:
            raise DegenerateInputError("samples exceed the +/-32 clip guard")

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def channels(self):
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    def channel(self, m) -> np.ndarray:
        return self.samples if self.samples.ndim == 1 else self.samples[:, m]

    @property
    def duration(self):
        return self.n_samples / self.sample_rate


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # (F, T, M) complex
    n_samples: int  # waveform length the analysis saw (for exact inversion)

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.shape[0] != N_BINS:
            raise ShapeError(f"expected {N_BINS} bins, got {self.data.shape[0]}")

    @property
    def frames(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def channel(self, m) -> np.ndarray:
        return self.data[:, :, m]


@dataclass
class MaskPair:
    re: np.ndarray  # (F, T)
    im: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.complex)


def frame_count(n_samples: int) -> int:
    """Frames produced for a signal of this length under centered analysis."""
    return 1 + n_samples // HOP


def padded_length(n_samples: int) -> int:
    """Smallest length >= n_samples whose frame count is a multiple of 8."""
    frames = frame_count(n_samples)
    target = FRAME_MULTIPLE * ((frames + FRAME_MULTIPLE - 1) // FRAME_MULTIPLE)
    if target == frames:
        return n_samples
    return (target - 1) * HOP


def stft(w: Waveform) -> ComplexSpectrogram:
    """Per-channel STFT with centered frames and reflect padding."""
    x = w.samples
    mono = x.ndim == 1
    if mono:
        x = x[:, None]
    n, m = x.shape
    pad = WIN // 2
    xp = np.pad(x, ((pad, pad), (0, 0)), mode="reflect")
    n_frames = frame_count(n)
    spec = np.empty((N_BINS, n_frames, m), dtype=np.complex128)
    for i in range(n_frames):
        seg = xp[i * HOP:i * HOP + WIN, :] * _window[:, None]
        spec[:, i, :] = np.fft.rfft(seg, axis=0)
    return ComplexSpectrogram(spec, n_samples=n)


def _synthesis_envelope(n_frames: int) -> np.ndarray:
    total = HOP * (n_frames - 1) + WIN
    wss = np.zeros(total)
    w2 = _window * _window
    for i in range(n_frames):
        wss[i * HOP:i * HOP + WIN] += w2
    return np.maximum(wss, 1e-11)


def istft_array(spec: np.ndarray, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of a single-channel (F, T) spectrogram."""
    if spec.shape[0] != N_BINS:
        raise ShapeError(f"expected {N_BINS} bins, got {spec.shape[0]}")
    n_frames = spec.shape[1]
    frames = np.fft.irfft(spec, n=WIN, axis=0) * _window[:, None]
    total = HOP * (n_frames - 1) + WIN
    buf = np.zeros(total)
    for i in range(n_frames):
        buf[i * HOP:i * HOP + WIN] += frames[:, i]
    buf /= _synthesis_envelope(n_frames)
    pad = WIN // 2
    return buf[pad:pad + length]


def istft(spec: ComplexSpectrogram, length: int | None = None) -> Waveform:
    length = spec.n_samples if length is None else length
    chans = [istft_array(spec.channel(m), length) for m in range(spec.channels)]
    samples = chans[0] if len(chans) == 1 else np.stack(chans, axis=1)
    return Waveform(samples)


def istft_grad(grad_out: np.ndarray, n_frames: int, length: int) -> np.ndarray:
    """Adjoint of istft_array as a complex (F, T) array.

    The synthesis operator is linear in the spectrogram, so this is the
    exact gradient map. numpy's irfft drops the imaginary parts of bins 0
    and N/2; the adjoint zeroes those slots to match.
    """
    total = HOP * (n_frames - 1) + WIN
    buf = np.zeros(total)
    pad = WIN // 2
    buf[pad:pad + length] = grad_out
    buf /= _synthesis_envelope(n_frames)
    grad = np.empty((N_BINS, n_frames), dtype=np.complex128)
    for i in range(n_frames):
        g = np.fft.rfft(buf[i * HOP:i * HOP + WIN] * _window)
        grad[:, i] = g * (_BIN_WEIGHT / WIN)
    grad.imag[0, :] = 0.0
    grad.imag[-1, :] = 0.0
    return grad


def istft_op(re: Tensor, im: Tensor, length: int) -> Tensor:
    """Differentiable iSTFT of (re, im) tensors, each F x T."""
    if re.data.shape != im.data.shape or re.data.ndim != 2:
        raise ShapeError("istft_op: re and im must be equal-shape F x T tensors")
    spec = re.data.astype(np.float64) + 1j * im.data.astype(np.float64)
    y = istft_array(spec, length).astype(re.data.dtype)
    out = Tensor(_finite(y, "istft_op"), (re, im))
    n_frames = re.data.shape[1]

    def bwd(g):
        gs = istft_grad(np.asarray(g, dtype=np.float64), n_frames, length)
        re._accumulate(gs.real.astype(re.data.dtype))
        im._accumulate(gs.imag.astype(im.data.dtype))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# network input / target construction


def normalize_and_stack(spec: ComplexSpectrogram, ref_channel: int):
    """Scale by the reference channel's mean magnitude and stack re/im.

    Returns (features F x T x 2M float32, norm). Channel order is
    [re_1, im_1, ..., re_M, im_M]; the order is part of the checkpoint
    contract, so changing it invalidates trained models.
    """
    if ref_channel >= spec.channels:
        raise ShapeError(f"ref_channel {ref_channel} out of range for {spec.channels} channels")
    norm = float(np.mean(np.abs(spec.channel(ref_channel))))
    if not norm > 0:
        raise DegenerateInputError("all-zero reference channel")
    f, t, m = spec.data.shape
    feats = np.empty((f, t, 2 * m), dtype=np.float32)
    scaled = spec.data / norm
    feats[:, :, 0::2] = scaled.real
    feats[:, :, 1::2] = scaled.imag
    return feats, norm


def compute_cirm(mix_ref: np.ndarray, clean: np.ndarray,
                 eps: float = CIRM_EPS, clip: float = MASK_CLIP) -> MaskPair:
    """Complex ideal ratio mask clean/mix, magnitude-clipped, uncompressed."""
    if mix_ref.shape != clean.shape:
        raise ShapeError("compute_cirm: spectrogram shapes differ")
    y = clean * np.conj(mix_ref) / (np.abs(mix_ref) ** 2 + eps)
    mag = np.abs(y)
    over = mag > clip
    if np.any(over):
        y = np.where(over, y * (clip / np.maximum(mag, eps)), y)
    return MaskPair(re=y.real.copy(), im=y.imag.copy())


def apply_mask_and_reconstruct(mask: MaskPair, mix_ref: ComplexSpectrogram) -> Waveform:
    """Bin-wise complex product with the unnormalized reference, then iSTFT."""
    ref = mix_ref.channel(0) if mix_ref.data.ndim == 3 else mix_ref.data
    if mask.re.shape != ref.shape:
        raise ShapeError("apply_mask_and_reconstruct: mask/spectrogram shapes differ")
    product = mask.complex * ref
    return Waveform(istft_array(product, mix_ref.n_samples))


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class Segment:
    waveform: Waveform
    valid: int  # samples that belong to the original signal


def segment_and_pad(w: Waveform, seg_seconds: float = SEGMENT_SECONDS) -> list[Segment]:
    """Split into ~3 s clips and zero-pad tails so frame counts divide by 8."""
    seg_len = int(round(seg_seconds * SAMPLE_RATE))
    out = []
    for start in range(0, w.n_samples, seg_len):
        chunk = w.samples[start:start + seg_len]
        valid = chunk.shape[0]
        target = padded_length(valid)
        if target > valid:
            pad = [(0, target - valid)] + [(0, 0)] * (chunk.ndim - 1)
            chunk = np.pad(chunk, pad)
        out.append(Segment(Waveform(chunk), valid))
    return out


def stitch_segments(pieces, valids) -> np.ndarray:
    """Inverse of segment_and_pad's bookkeeping: trim pads and concatenate."""
    return np.concatenate([np.asarray(p)[:v] for p, v in zip(pieces, valids)])


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM or 32-bit float, 16 kHz enforced, no resampling)


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples)


def write_wav(path, samples: np.ndarray):
    wavfile.write(path, SAMPLE_RATE, np.asarray(samples, dtype=np.float32))
