"""Lightweight multi-channel speech enhancement with decoupled FC attention.

A desk-scale toolkit around a numpy tensor engine: room-acoustics data
synthesis, STFT-domain complex masking, the LMFCA encoder-decoder network,
training with a composite mask/SI-SDR loss, and MAC/FLOP/RTF profiling.
"""

from .dsp import (
    ComplexSpectrogram,
    MaskPair,
    Waveform,
    apply_mask_and_reconstruct,
    compute_cirm,
    istft,
    normalize_and_stack,
    read_wav,
    segment_and_pad,
    stft,
    write_wav,
)
from .evaluate import EvalReport, enhance_waveform, evaluate, measure_rtf, oracle_enhance
from .model import FcaKind, LmfcaNet, ModelConfig
from .params import Adam, Parameter, ParameterStore, load_checkpoint, save_checkpoint
from .roomsim import (
    MixtureExample,
    Rir,
    RoomScene,
    absorption_from_t60,
    image_method_rir,
    render_mixture,
    sample_scene,
    synth_dataset,
)
from .tensor import Tensor, gradcheck, numeric_grad
from .train import LossWeights, TrainState, composite_loss, si_sdr, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "ComplexSpectrogram", "EvalReport", "FcaKind", "LmfcaNet",
    "LossWeights", "MaskPair", "MixtureExample", "ModelConfig", "Parameter",
    "ParameterStore", "Rir", "RoomScene", "Tensor", "TrainState", "Waveform",
    "absorption_from_t60", "apply_mask_and_reconstruct", "composite_loss",
    "compute_cirm", "enhance_waveform", "evaluate", "gradcheck",
    "image_method_rir", "istft", "load_checkpoint", "measure_rtf",
    "normalize_and_stack", "numeric_grad", "oracle_enhance", "read_wav",
    "render_mixture", "sample_scene", "save_checkpoint", "segment_and_pad",
    "si_sdr", "stft", "synth_dataset", "train", "write_wav",
]
