"""Composite mask loss, SI-SDR, and the training loop.

The loss is alpha * mse(|mask|) + (1-alpha) * mse(re/im) + beta * (-SI-SDR),
with the SI-SDR term evaluated in the time domain through a differentiable
iSTFT of the masked reference spectrogram. The learning rate halves after
five consecutive epochs without validation improvement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dsp
from .dsp import MaskPair, compute_cirm, istft_op, normalize_and_stack, segment_and_pad, stft
from .errors import ConfigError, DegenerateInputError
from .model import LmfcaNet, ModelConfig
from .params import Adam, load_checkpoint, save_checkpoint
from .roomsim import REF_CHANNEL, load_manifest
from .tensor import (
    Tensor,
    add,
    clamp,
    log10,
    mse,
    mul,
    reciprocal,
    scalar_mul,
    select_channel,
    sqrt,
    sub,
    tsum,
)


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 1e-4
    sisdr_eps: float = 1e-8
    sisdr_cap_db: float = 30.0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        return self


def si_sdr(est: np.ndarray, ref: np.ndarray, eps: float = 1e-8, cap_db: float = 30.0) -> float:
    """Scale-invariant SDR in dB, clipped to +/-cap_db."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ConfigError(f"si_sdr: length mismatch {est.shape} vs {ref.shape}")
    if not np.any(ref):
        raise DegenerateInputError("si_sdr: all-zero reference")
    proj = float(np.dot(est, ref)) / (float(np.dot(ref, ref)) + eps)
    target = proj * ref
    num = float(np.dot(target, target))
    den = float(np.dot(target - est, target - est))
    val = 10.0 * np.log10((num + eps) / (den + eps))
    return float(np.clip(val, -cap_db, cap_db))


def si_sdr_graph(est: Tensor, ref: np.ndarray, eps: float = 1e-8, cap_db: float = 30.0) -> Tensor:
    """Differentiable SI-SDR of a tensor estimate against a fixed reference."""
    ref = np.asarray(ref, dtype=est.data.dtype)
    if not np.any(ref):
        raise DegenerateInputError("si_sdr: all-zero reference")
    ref_t = Tensor(ref)
    proj = tsum(mul(est, ref_t)) * (1.0 / (float(np.dot(ref, ref)) + eps))
    target = scalar_mul(proj, ref_t)
    num = tsum(mul(target, target))
    diff = sub(target, est)
    den = tsum(mul(diff, diff))
    val = log10(mul(num + eps, reciprocal(den + eps))) * 10.0
    return clamp(val, -cap_db, cap_db)


def composite_loss(mask_est: Tensor, mask_target: MaskPair, mix_ref: np.ndarray,
                   direct_ref: np.ndarray, weights: LossWeights) -> Tensor:
    """Eq.-style composite loss; differentiable end to end, iSTFT included."""
    f, t, c = mask_est.data.shape
    if c != 2 or mask_target.re.shape != (f, t) or mix_ref.shape != (f, t):
        raise ConfigError("composite_loss: mask/spectrogram shapes disagree")
    dtype = mask_est.data.dtype
    target = np.stack([mask_target.re, mask_target.im], axis=2).astype(dtype)

    loss_spec = mse(mask_est, Tensor(target))

    re_e = select_channel(mask_est, 0)
    im_e = select_channel(mask_est, 1)
    mag_est = sqrt(add(mul(re_e, re_e), mul(im_e, im_e)) + 1e-12)
    mag_target = Tensor(mask_target.magnitude.astype(dtype))
    loss_mag = mse(mag_est, mag_target)

    x_re = Tensor(mix_ref.real.astype(dtype))
    x_im = Tensor(mix_ref.imag.astype(dtype))
    s_re = sub(mul(re_e, x_re), mul(im_e, x_im))
    s_im = add(mul(re_e, x_im), mul(im_e, x_re))
    est = istft_op(s_re, s_im, len(direct_ref))
    loss_sisdr = -si_sdr_graph(est, direct_ref, weights.sisdr_eps, weights.sisdr_cap_db)

    return loss_mag * weights.alpha + loss_spec * (1.0 - weights.alpha) + loss_sisdr * weights.beta


# ---------------------------------------------------------------------------
# training data preparation


@dataclass
class TrainItem:
    feats: np.ndarray      # F x T x 2M float32
    mask: MaskPair
    mix_ref: np.ndarray    # complex F x T, unnormalized
    direct: np.ndarray     # time-domain SI-SDR target, padded segment length


def prepare_items(entry: dict, base_dir, ref_channel: int = REF_CHANNEL) -> list[TrainItem]:
    """Segment one manifest example into network-ready training items."""
    base = Path(base_dir)
    mix = dsp.read_wav(base / entry["mix"])
    clean = dsp.read_wav(base / entry["clean"])
    direct = dsp.read_wav(base / entry["direct"])
    mix_segs = segment_and_pad(mix)
    clean_segs = segment_and_pad(clean)
    direct_segs = segment_and_pad(direct)
    items = []
    for ms, cs, ds in zip(mix_segs, clean_segs, direct_segs):
        spec = stft(ms.waveform)
        feats, _ = normalize_and_stack(spec, ref_channel)
        x_ref = spec.channel(ref_channel)
        clean_spec = stft(cs.waveform).channel(0)
        mask = compute_cirm(x_ref, clean_spec)
        items.append(TrainItem(feats=feats, mask=mask, mix_ref=x_ref,
                               direct=ds.waveform.samples))
    return items


# ---------------------------------------------------------------------------
# state and checkpoints


@dataclass
class TrainState:
    adam: Adam
    epoch: int = 0
    lr: float = 1e-4
    best_val_loss: float = float("inf")
    stale_epochs: int = 0
    seed: int = 0
    halvings: int = 0

    def header(self) -> dict:
        return {
            "train.epoch": str(self.epoch),
            "train.lr": repr(self.lr),
            "train.best_val_loss": repr(self.best_val_loss),
            "train.stale_epochs": str(self.stale_epochs),
            "train.seed": str(self.seed),
            "train.halvings": str(self.halvings),
            "train.adam_step": str(self.adam.t),
        }

    @classmethod
    def from_header(cls, header: dict, adam: Adam) -> "TrainState":
        state = cls(
            adam=adam,
            epoch=int(header["train.epoch"]),
            lr=float(header["train.lr"]),
            best_val_loss=float(header["train.best_val_loss"]),
            stale_epochs=int(header["train.stale_epochs"]),
            seed=int(header["train.seed"]),
            halvings=int(header.get("train.halvings", "0")),
        )
        adam.t = int(header["train.adam_step"])
        return state


def save_model(path, net: LmfcaNet, state: TrainState | None = None):
    header = dict(net.config.to_dict())
    opt = None
    if state is not None:
        header.update(state.header())
        opt = state.adam.state_arrays()
    save_checkpoint(path, header, net.store.as_arrays(), opt)


def load_model(path):
    """Rebuild the network a checkpoint describes and load its weights."""
    header, params, opt = load_checkpoint(path)
    config = ModelConfig.from_dict(header)
    net = LmfcaNet(config)
    net.store.load_arrays(params)
    return net, header, opt


def restore_state(net: LmfcaNet, header: dict, opt: dict) -> TrainState:
    adam = Adam(net.store)
    adam.load_state_arrays(opt)
    return TrainState.from_header(header, adam)


# ---------------------------------------------------------------------------
# the loop


def _mean_loss(losses):
    total = losses[0]
    for term in losses[1:]:
        total = add(total, term)
    return total * (1.0 / len(losses))


def train(config: ModelConfig, manifest_path, out_dir, epochs: int,
          seed: int = 0, lr: float = 1e-4, batch_size: int = 4,
          val_fraction: float = 0.25, weights: LossWeights | None = None,
          resume=None, threads: int = 1, log=None) -> Path:
    """Train on a synthesized manifest; returns the best-checkpoint path.

    Deterministic for a given seed in single-threaded mode: the shuffle of
    epoch e is drawn from (seed, e), so resuming from the last checkpoint
    reproduces the continuation bit-for-bit.
    """
    weights = (weights or LossWeights()).validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = load_manifest(manifest_path)
    base = Path(manifest_path).parent

    n_val = min(int(round(val_fraction * len(entries))), len(entries) - 1)
    train_entries = entries[:len(entries) - n_val]
    val_entries = entries[len(entries) - n_val:]
    if not train_entries:
        raise ConfigError("manifest too small: no training examples left after the split")

    train_items = [it for e in train_entries for it in prepare_items(e, base)]
    val_items = [it for e in val_entries for it in prepare_items(e, base)]

    if resume is not None:
        # lr, moments, and counters continue from the checkpoint
        net, header, opt = load_model(resume)
        state = restore_state(net, header, opt)
    else:
        net = LmfcaNet(config)
        state = TrainState(adam=Adam(net.store), lr=lr, seed=seed)

    def emit(msg):
        if log is not None:
            log(msg)

    metrics_path = out_dir / "metrics.tsv"
    new_log = resume is None or not metrics_path.exists()
    metrics = open(metrics_path, "w" if new_log else "a")
    if new_log:
        metrics.write("epoch\ttrain_loss\tval_loss\tlr\twall_s\n")
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"

    def item_loss(item: TrainItem) -> Tensor:
        est = net.forward(Tensor(item.feats))
        return composite_loss(est, item.mask, item.mix_ref, item.direct, weights)

    with threadpool_limits(limits=threads):
        for epoch in range(state.epoch + 1, epochs + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng(np.random.SeedSequence((state.seed, epoch)))
            order = rng.permutation(len(train_items))
            epoch_losses = []
            for start in range(0, len(order), batch_size):
                batch = [train_items[i] for i in order[start:start + batch_size]]
                net.store.zero_grad()
                loss = _mean_loss([item_loss(it) for it in batch])
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(f"training diverged at epoch {epoch}: loss={value}")
                loss.backward()
                state.adam.step(state.lr)
                epoch_losses.append(value)
            train_loss = float(np.mean(epoch_losses))

            if val_items:
                val_loss = float(np.mean([item_loss(it).item() for it in val_items]))
            else:
                val_loss = train_loss

            state.epoch = epoch
            if val_loss < state.best_val_loss:
                state.best_val_loss = val_loss
                state.stale_epochs = 0
                save_model(best_path, net, state)
            else:
                state.stale_epochs += 1
                if state.stale_epochs >= 5:
                    state.lr *= 0.5
                    state.halvings += 1
                    state.stale_epochs = 0
            save_model(last_path, net, state)

            wall = time.perf_counter() - t0
            metrics.write(f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}\t{state.lr:.3e}\t{wall:.2f}\n")
            metrics.flush()
            emit(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} lr {state.lr:.2e} ({wall:.1f}s)")

    metrics.close()
    if not best_path.exists():
        save_model(best_path, net, state)
    return best_path
