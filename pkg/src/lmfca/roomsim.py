"""Image-method room simulation and SNR-controlled mixture synthesis.

Rooms are shoeboxes with uniform wall absorption derived from the target
reverberation time by Sabine inversion. The microphone array is six
capsules on a 0.1 m sphere around the array center (octahedral layout,
channel five = index 4 is the reference). Fractional tap delays are
rounded to the nearest sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .dsp import SAMPLE_RATE, Waveform, read_wav, write_wav
from .errors import ConfigError, DegenerateInputError, GenerationError

SPEED_OF_SOUND = 340.0
MIC_RADIUS = 0.1
WALL_MARGIN = 0.1
N_MICS = 6
REF_CHANNEL = 4  # zero-based; "channel five" of six

ROOM_LENGTH = (4.0, 10.0)
ROOM_WIDTH = (4.0, 10.0)
ROOM_HEIGHT = (2.5, 3.0)
T60_RANGE = (0.3, 0.8)
SOURCE_DIST = (0.2, 1.0)
SNR_RANGE = (0.0, 12.0)

# octahedral 6-mic layout on the sphere, fixed orientation
_MIC_DIRS = np.array([
    [1, 0, 0], [-1, 0, 0],
    [0, 1, 0], [0, -1, 0],
    [0, 0, 1], [0, 0, -1],
], dtype=float)

_MAX_TRIES = 10_000


@dataclass
class RoomScene:
    length: float
    width: float
    height: float
    t60: float
    source_pos: np.ndarray
    array_center: np.ndarray

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def mic_positions(self) -> np.ndarray:
        return self.array_center + MIC_RADIUS * _MIC_DIRS

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        l, w, h = self.length, self.width, self.height
        return 2.0 * (l * w + l * h + w * h)

    def validate(self):
        lo = np.full(3, WALL_MARGIN)
        hi = self.dims - WALL_MARGIN
        if not (np.all(self.source_pos > lo) and np.all(self.source_pos < hi)):
            raise GenerationError("source violates the wall margin")
        for m in self.mic_positions:
            if not (np.all(m > lo) and np.all(m < hi)):
                raise GenerationError("microphone violates the wall margin")
        d = np.linalg.norm(self.source_pos - self.array_center)
        if not (SOURCE_DIST[0] - 1e-9 <= d <= SOURCE_DIST[1] + 1e-9):
            raise GenerationError("source-center distance out of range")


@dataclass
class Rir:
    taps: np.ndarray  # (n_taps, M)
    sample_rate: int
    max_order: int

    @property
    def channels(self):
        return self.taps.shape[1]


@dataclass
class MixtureExample:
    mixture: Waveform        # (L, 6)
    clean_ref: Waveform      # reverberant speech image at the reference mic
    direct_ref: Waveform     # direct-path-only image (SI-SDR target)
    snr_db: float


def sample_room(rng: np.random.Generator):
    dims = np.array([
        rng.uniform(*ROOM_LENGTH),
        rng.uniform(*ROOM_WIDTH),
        rng.uniform(*ROOM_HEIGHT),
    ])
    t60 = rng.uniform(*T60_RANGE)
    return dims, t60


def sample_placement(dims: np.ndarray, rng: np.random.Generator):
    """Array center and source positions honoring all margins."""
    lo = WALL_MARGIN + MIC_RADIUS
    for _ in range(_MAX_TRIES):
        center = np.array([rng.uniform(lo, d - lo) for d in dims])
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        source = center + rng.uniform(*SOURCE_DIST) * direction
        if np.all(source > WALL_MARGIN) and np.all(source < dims - WALL_MARGIN):
            return source, center
    raise GenerationError("could not place source and array inside the room")


def sample_scene(seed) -> RoomScene:
    """Uniform scene draw; deterministic for a given seed (or Generator)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims, t60 = sample_room(rng)
    source, center = sample_placement(dims, rng)
    scene = RoomScene(dims[0], dims[1], dims[2], t60, source, center)
    scene.validate()
    return scene


def absorption_from_t60(scene: RoomScene) -> float:
    """Sabine inversion: alpha = 0.161 V / (S t60), clamped to (0, 0.99]."""
    if scene.t60 <= 0:
        raise GenerationError("t60 must be positive")
    alpha = 0.161 * scene.volume / (scene.surface * scene.t60)
    if alpha > 0.99:
        raise GenerationError(f"room too small for t60={scene.t60}: alpha={alpha:.3f}")
    return alpha


def _image_taps(scene: RoomScene, mics: np.ndarray, margin: float):
    """Accumulate image-source taps for all mic positions at once."""
    alpha = absorption_from_t60(scene)
    refl = 1.0 - alpha
    dims = scene.dims
    max_dist = SPEED_OF_SOUND * scene.t60 * margin + float(np.linalg.norm(dims))
    n_taps = int(round(max_dist / SPEED_OF_SOUND * SAMPLE_RATE)) + 2
    rmax = np.ceil(max_dist / (2.0 * dims)).astype(int)
    axes = [np.arange(-rmax[i], rmax[i] + 1) for i in range(3)]
    nx, ny, nz = np.meshgrid(*axes, indexing="ij")
    lattice = np.stack([nx.ravel(), ny.ravel(), nz.ravel()], axis=1)
    taps = np.zeros((n_taps, mics.shape[0]))
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                p = np.array([px, py, pz])
                pos = (1 - 2 * p) * scene.source_pos + 2.0 * lattice * dims
                n_refl = (np.abs(lattice - p) + np.abs(lattice)).sum(axis=1)
                gain = refl ** n_refl
                for m in range(mics.shape[0]):
                    d = np.linalg.norm(pos - mics[m], axis=1)
                    keep = d <= max_dist
                    idx = np.round(d[keep] / SPEED_OF_SOUND * SAMPLE_RATE).astype(int)
                    np.add.at(taps[:, m], idx, gain[keep] / (4.0 * np.pi * d[keep]))
    return taps, int(rmax.max())


def image_method_rir(scene: RoomScene, mic: int | None = None, margin: float = 1.3) -> Rir:
    """Allen-Berkley image-method RIR; margin scales the c*t60 tap horizon."""
    mics = scene.mic_positions if mic is None else scene.mic_positions[mic:mic + 1]
    taps, order = _image_taps(scene, mics, margin)
    return Rir(taps, SAMPLE_RATE, order)


def direct_path_rir(scene: RoomScene, mic: int | None = None) -> Rir:
    """Order-0 image only: one tap per mic at the direct-path delay."""
    mics = scene.mic_positions if mic is None else scene.mic_positions[mic:mic + 1]
    d = np.linalg.norm(mics - scene.source_pos, axis=1)
    idx = np.round(d / SPEED_OF_SOUND * SAMPLE_RATE).astype(int)
    taps = np.zeros((int(idx.max()) + 1, mics.shape[0]))
    for m in range(mics.shape[0]):
        taps[idx[m], m] = 1.0 / (4.0 * np.pi * d[m])
    return Rir(taps, SAMPLE_RATE, 0)


def direct_tap_index(scene: RoomScene, mic: int) -> int:
    d = float(np.linalg.norm(scene.mic_positions[mic] - scene.source_pos))
    return int(round(d / SPEED_OF_SOUND * SAMPLE_RATE))


# ---------------------------------------------------------------------------
# reverberation-time measurement (the Schroeder oracle)


def schroeder_decay_db(taps: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay in dB, normalized to 0 dB at the start."""
    energy = np.cumsum(taps[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise DegenerateInputError("RIR has no energy")
    return 10.0 * np.log10(np.maximum(energy / energy[0], 1e-30))


def measure_t60(taps_1ch: np.ndarray, skip: int = 0,
                fit_lo: float = -30.0, fit_hi: float = -60.0) -> float:
    """Least-squares slope of the Schroeder curve over [fit_lo, fit_hi] dB.

    skip drops the direct path and the first reflections; with a strong
    direct tap the full curve starts with a cliff that is not reverberant
    decay, so T60 is read from the tail.
    """
    db = schroeder_decay_db(taps_1ch[skip:])
    i1 = int(np.argmax(db <= fit_lo))
    i2 = int(np.argmax(db <= fit_hi))
    if i2 <= i1 + 8:
        raise DegenerateInputError("decay range too short for a T60 fit")
    t = np.arange(i1, i2) / SAMPLE_RATE
    basis = np.vstack([t, np.ones_like(t)]).T
    slope, _ = np.linalg.lstsq(basis, db[i1:i2], rcond=None)[0]
    return -60.0 / float(slope)


def measure_scene_t60(scene: RoomScene, mic: int = REF_CHANNEL, margin: float = 2.0) -> float:
    rir = image_method_rir(scene, mic=mic, margin=margin)
    skip = direct_tap_index(scene, mic) + 16
    return measure_t60(rir.taps[:, 0], skip=skip)


# ---------------------------------------------------------------------------
# mixing


def render_mixture(scene: RoomScene, clean: Waveform, noise: Waveform,
                   snr_db: float, rng: np.random.Generator | None = None) -> MixtureExample:
    """Convolve, spatialize noise, and mix at the requested reference-mic SNR."""
    if clean.channels != 1:
        raise DegenerateInputError("clean input must be mono")
    if clean.n_samples < SAMPLE_RATE:
        raise DegenerateInputError("clean input shorter than 1 s")
    s = clean.samples
    if np.max(np.abs(s)) == 0:
        raise DegenerateInputError("silent clean input")
    rng = rng if rng is not None else np.random.default_rng(0)

    rir = image_method_rir(scene)
    length = clean.n_samples + rir.taps.shape[0] - 1
    reverb = np.stack(
        [fftconvolve(s, rir.taps[:, m]) for m in range(N_MICS)], axis=1
    )

    drir = direct_path_rir(scene, mic=REF_CHANNEL)
    direct = fftconvolve(s, drir.taps[:, 0])
    direct = np.pad(direct, (0, length - direct.shape[0]))

    # noise: tile to length; mono noise is decorrelated across mics by
    # per-mic random circular shifts
    v = noise.samples
    if v.ndim == 1:
        v = np.tile(v, (int(np.ceil(length / v.shape[0])),))[:length]
        shifts = rng.integers(0, v.shape[0], size=N_MICS)
        v = np.stack([np.roll(v, int(k)) for k in shifts], axis=1)
    else:
        if v.shape[1] != N_MICS:
            raise DegenerateInputError(f"noise must be mono or {N_MICS}-channel")
        reps = int(np.ceil(length / v.shape[0]))
        v = np.tile(v, (reps, 1))[:length]

    clean_ref = reverb[:, REF_CHANNEL]
    p_speech = float(np.mean(clean_ref ** 2))
    p_noise = float(np.mean(v[:, REF_CHANNEL] ** 2))
    if p_noise > 0:
        gain = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    else:
        gain = 0.0
    mixture = reverb + gain * v
    return MixtureExample(
        mixture=Waveform(mixture),
        clean_ref=Waveform(clean_ref),
        direct_ref=Waveform(direct),
        snr_db=float(snr_db),
    )


def measured_snr_db(example: MixtureExample) -> float:
    """Re-measure speech/noise power ratio at the reference mic."""
    speech = example.clean_ref.samples
    noise = example.mixture.samples[:, REF_CHANNEL] - speech
    p_noise = float(np.mean(noise ** 2))
    if p_noise == 0:
        return float("inf")
    return 10.0 * np.log10(float(np.mean(speech ** 2)) / p_noise)


# ---------------------------------------------------------------------------
# dataset synthesis


def _scene_record(example_id, paths, scene, snr_db, seed):
    # fixed key order: id, wav paths, room dims, t60, positions, snr, seed
    return {
        "id": example_id,
        "mix": paths[0],
        "clean": paths[1],
        "direct": paths[2],
        "room": [round(float(v), 6) for v in scene.dims],
        "t60": round(float(scene.t60), 6),
        "source": [round(float(v), 6) for v in scene.source_pos],
        "array_center": [round(float(v), 6) for v in scene.array_center],
        "snr_db": round(float(snr_db), 6),
        "seed": int(seed),
    }


def _synth_one(task):
    (example_id, seed, room_dims, t60, clean_path, noise_path, snr_db, out_dir) = task
    rng = np.random.default_rng(seed)
    source, center = sample_placement(np.asarray(room_dims), rng)
    scene = RoomScene(room_dims[0], room_dims[1], room_dims[2], t60, source, center)
    scene.validate()
    clean = read_wav(clean_path)
    if clean.channels != 1:
        clean = Waveform(clean.samples[:, 0])
    noise = read_wav(noise_path)
    example = render_mixture(scene, clean, noise, snr_db, rng)
    out_dir = Path(out_dir)
    names = [f"{example_id}_mix.wav", f"{example_id}_clean.wav", f"{example_id}_direct.wav"]
    write_wav(out_dir / names[0], example.mixture.samples)
    write_wav(out_dir / names[1], example.clean_ref.samples)
    write_wav(out_dir / names[2], example.direct_ref.samples)
    return _scene_record(example_id, names, scene, snr_db, seed)


def synth_dataset(clean_dir, noise_dir, out_dir, n_rooms: int = 200,
                  rirs_per_room: int = 20, seed: int = 0,
                  snr_range=SNR_RANGE, threads: int = 1) -> Path:
    """Generate n_rooms x rirs_per_room mixtures and write a JSONL manifest.

    Room geometry and T60 are drawn once per room; each of the
    rirs_per_room placements re-samples source and array positions.
    Fully deterministic for a given seed, independent of thread count.
    """
    clean_files = sorted(Path(clean_dir).glob("*.wav"))
    noise_files = sorted(Path(noise_dir).glob("*.wav"))
    if not clean_files:
        raise ConfigError(f"no WAV files in clean dir {clean_dir}")
    if not noise_files:
        raise ConfigError(f"no WAV files in noise dir {noise_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    master = np.random.SeedSequence(seed)
    tasks = []
    for room_idx, room_seq in enumerate(master.spawn(n_rooms)):
        room_rng = np.random.default_rng(room_seq)
        dims, t60 = sample_room(room_rng)
        placement_seeds = room_rng.integers(0, 2 ** 63 - 1, size=rirs_per_room)
        for k in range(rirs_per_room):
            rng = np.random.default_rng(placement_seeds[k])
            clean_path = str(clean_files[rng.integers(len(clean_files))])
            noise_path = str(noise_files[rng.integers(len(noise_files))])
            snr = float(rng.uniform(*snr_range))
            tasks.append((
                f"ex{room_idx:04d}_{k:02d}", int(placement_seeds[k]),
                tuple(float(v) for v in dims), float(t60),
                clean_path, noise_path, snr, str(out_dir),
            ))

    if threads > 1:
        from multiprocessing import Pool

        with Pool(threads) as pool:
            records = pool.map(_synth_one, tasks)
    else:
        records = [_synth_one(t) for t in tasks]

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest


def load_manifest(path):
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    if not entries:
        raise ConfigError(f"manifest {path} is empty")
    return entries
