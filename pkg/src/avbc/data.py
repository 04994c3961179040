"""Synthetic paired audio-visual corpus, noise synthesis, SNR mixing, curriculum."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontends import SAMPLE_RATE, VIDEO_RATE, VideoClip, Waveform
from .io import read_container, read_jsonl, write_container, write_jsonl

LEXICON = (
    "at", "be", "go", "up", "no", "we", "on", "it",
    "red", "sun", "cat", "dog", "box", "map", "pen", "cup",
    "hat", "leg", "fox", "jam", "kit", "mud", "owl", "pig",
    "rod", "tap", "van", "wax", "yak", "zip", "bell", "frog",
)
WORD_SECONDS = 0.28
LOW_TONES = (260.0, 330.0, 410.0, 500.0, 610.0, 740.0, 900.0, 1090.0)
MID_TONES = (1320.0, 1600.0, 1940.0, 2350.0)
HIGH_TONES = (2850.0, 3450.0, 4180.0, 5060.0)

NOISE_KINDS = ("white", "pink", "babble", "speech-overlap")
SNR_GRID = (-7.5, -2.5, 2.5, 7.5, 12.5, 17.5)
CLEAN = None  # SNR sentinel for an unmixed utterance


@dataclass
class CorpusConfig:
    video_size: int = 16
    min_words: int = 3
    max_words: int = 8
    word_seconds: float = WORD_SECONDS
    amplitude: float = 0.1


@dataclass
class Sample:
    id: str
    seed: int
    transcript: list[str]
    clean: Waveform
    video: VideoClip

    @property
    def text(self) -> str:
        return " ".join(self.transcript)

    @property
    def duration(self) -> float:
        return self.clean.duration


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ----------------------------------------------------------------- rendering
def _word_tones(word_idx: int) -> tuple[float, float, float]:
    return LOW_TONES[word_idx % 8], MID_TONES[(word_idx // 8) % 4], HIGH_TONES[(word_idx * 3 + word_idx // 8) % 4]


def word_envelope(n: int) -> np.ndarray:
    return np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2


def render_word_audio(word_idx: int, cfg: CorpusConfig, rate: int = SAMPLE_RATE,
                      phase: float = 0.0) -> np.ndarray:
    """Multi-tone signature: a steady low tone, a mid tone in the first half, a high tone in the second."""
    n = int(round(cfg.word_seconds * rate))
    t = np.arange(n) / rate
    low, mid, high = _word_tones(word_idx)
    half = n // 2
    gate_a = np.zeros(n)
    gate_a[:half] = word_envelope(half)
    gate_b = np.zeros(n)
    gate_b[half:] = word_envelope(n - half)
    sig = (np.sin(2 * np.pi * low * t + phase) * word_envelope(n)
           + 0.8 * np.sin(2 * np.pi * mid * t + 2 * phase) * gate_a
           + 0.6 * np.sin(2 * np.pi * high * t + 3 * phase) * gate_b)
    return sig


def render_audio(word_ids: list[int], cfg: CorpusConfig, phase: float = 0.0) -> np.ndarray:
    sig = np.concatenate([render_word_audio(i, cfg, phase=phase) for i in word_ids])
    return cfg.amplitude * sig / np.sqrt(np.mean(sig ** 2))


def _mouth_frame(word_idx: int, opening: float, size: int) -> np.ndarray:
    """Per-word geometric mouth patch: width, interior shade and teeth encode the
    word; ``opening`` in [0, 1] sets the height."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    width = size * (0.18 + 0.07 * (word_idx % 4))
    height = size * (0.12 + 0.14 * opening)
    inside = ((xx - c) / width) ** 2 + ((yy - c) / height) ** 2 <= 1.0
    frame = np.full((size, size), 0.15)
    frame[inside] = 0.55 + 0.15 * ((word_idx // 4) % 4)
    if (word_idx // 16) % 2:
        teeth = inside & (np.abs(yy - (c - 0.5 * height)) < max(0.5, size / 32))
        frame[teeth] = 0.3
    return frame


def render_video(word_ids: list[int], audio: np.ndarray, cfg: CorpusConfig) -> np.ndarray:
    """Mouth frames at 25 Hz; opening tracks the audio frame RMS."""
    per_frame = SAMPLE_RATE // VIDEO_RATE
    frames_per_word = int(round(cfg.word_seconds * VIDEO_RATE))
    n_frames = frames_per_word * len(word_ids)
    rms = np.sqrt(np.mean(audio[: n_frames * per_frame].reshape(n_frames, per_frame) ** 2, axis=1))
    opening = rms / max(rms.max(), 1e-12)
    frames = [_mouth_frame(word_ids[f // frames_per_word], opening[f], cfg.video_size) for f in range(n_frames)]
    return np.clip(np.stack(frames), 0.0, 1.0)


def synth_sample(seed: int, cfg: CorpusConfig | None = None, sample_id: str | None = None) -> Sample:
    cfg = cfg or CorpusConfig()
    rng = np.random.default_rng(seed)
    n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    word_ids = [int(i) for i in rng.integers(0, len(LEXICON), size=n_words)]
    audio = render_audio(word_ids, cfg, phase=float(rng.uniform(0, 2 * np.pi)))
    video = render_video(word_ids, audio, cfg)
    return Sample(sample_id or f"utt{seed}", seed, [LEXICON[i] for i in word_ids],
                  Waveform(audio), VideoClip(video))


def make_corpus(n: int, seed: int, cfg: CorpusConfig | None = None, prefix: str = "utt") -> list[Sample]:
    return [synth_sample(derive_seed(seed, i), cfg, f"{prefix}{i:04d}") for i in range(n)]


# --------------------------------------------------------------------- noise
@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; choose from {NOISE_KINDS}")


def _unit_rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x ** 2))


def pink_noise(length: int, rng: np.random.Generator, rate: int = SAMPLE_RATE, f_lo: float = 15.625) -> np.ndarray:
    """Sum of octave-band white noises with per-octave level ∝ 1/f_center."""
    spec = np.fft.rfft(rng.standard_normal(length))
    freqs = np.fft.rfftfreq(length, 1.0 / rate)
    gain = np.zeros_like(freqs)
    lo = f_lo
    while lo < rate / 2:
        band = (freqs >= lo) & (freqs < 2 * lo)
        gain[band] = 1.0 / np.sqrt(1.5 * lo)
        lo *= 2
    return np.fft.irfft(spec * gain, n=length)


def babble_noise(length: int, rng: np.random.Generator, tracks: int = 6,
                 cfg: CorpusConfig | None = None) -> np.ndarray:
    cfg = cfg or CorpusConfig()
    word_len = int(round(cfg.word_seconds * SAMPLE_RATE))
    out = np.zeros(length)
    for _ in range(tracks):
        n_words = length // word_len + 2
        ids = [int(i) for i in rng.integers(0, len(LEXICON), size=n_words)]
        track = render_audio(ids, cfg, phase=float(rng.uniform(0, 2 * np.pi)))
        start = int(rng.integers(0, word_len))
        out += track[start:start + length]
    return out


def synth_noise(spec: NoiseSpec, length: int) -> Waveform:
    if length < 1:
        raise ValueError("noise length must be ≥ 1")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "white":
        x = rng.standard_normal(length)
    elif spec.kind == "pink":
        x = pink_noise(length, rng)
    elif spec.kind == "babble":
        x = babble_noise(length, rng)
    else:
        other = synth_sample(spec.seed)
        x = np.resize(other.clean.samples, length)
    return Waveform(_unit_rms(x))


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def fit_length(noise: np.ndarray, length: int) -> np.ndarray:
    """Tile or crop ``noise`` to ``length`` samples."""
    return np.resize(noise, length) if len(noise) != length else noise


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float | None, return_noise: bool = False):
    """``clean + g * noise`` with g chosen so 10 log10(P_clean / P_scaled_noise) = snr_db.

    ``snr_db`` of None or +inf returns the clean signal unchanged.
    """
    if snr_db is None or snr_db == math.inf:
        out = Waveform(clean.samples.copy(), clean.sample_rate)
        return (out, Waveform(np.zeros_like(clean.samples), clean.sample_rate)) if return_noise else out
    p_clean = _power(clean.samples)
    if p_clean <= 0.0:
        raise ValueError("clean signal has zero power")
    n = fit_length(noise.samples, len(clean))
    p_noise = _power(n)
    if p_noise <= 0.0:
        raise ValueError("noise has zero power")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = gain * n
    out = Waveform(clean.samples + scaled, clean.sample_rate)
    return (out, Waveform(scaled, clean.sample_rate)) if return_noise else out


def measured_snr(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(_power(clean) / _power(noise))


@dataclass
class OverlapMix:
    waveform: Waveform
    target_id: str
    distractor_id: str
    snr_db: float


def overlap_speech(target: Sample, distractor: Sample, snr_db: float = -5.0) -> OverlapMix:
    """Distractor utterance mixed into the target's audio; the target's video is kept."""
    if distractor.id == target.id:
        raise ValueError(f"distractor must differ from the target ({target.id})")
    mixed = mix_at_snr(target.clean, distractor.clean, snr_db)
    return OverlapMix(mixed, target.id, distractor.id, snr_db)


# ---------------------------------------------------------------- curriculum
@dataclass(frozen=True)
class CurriculumConfig:
    phase1_epochs: int = 20
    snr_grid: tuple[float, ...] = SNR_GRID
    phase1_min_snr: float = 7.5
    clean_prob: float = 0.5


@dataclass(frozen=True)
class CurriculumPhase:
    index: int
    snr_choices: tuple  # dB values plus the CLEAN sentinel
    enhance_enabled: bool

    @property
    def noisy_choices(self) -> tuple[float, ...]:
        return tuple(s for s in self.snr_choices if s is not CLEAN)


def curriculum_phase(epoch: int, cfg: CurriculumConfig | None = None) -> CurriculumPhase:
    cfg = cfg or CurriculumConfig()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < cfg.phase1_epochs:
        high = tuple(s for s in cfg.snr_grid if s >= cfg.phase1_min_snr)
        return CurriculumPhase(1, high + (CLEAN,), False)
    return CurriculumPhase(2, tuple(cfg.snr_grid) + (CLEAN,), True)


def draw_snr(phase: CurriculumPhase, rng: np.random.Generator, clean_prob: float = 0.5):
    """Fair coin for clean vs noisy, then uniform over the phase's SNR values."""
    if rng.random() < clean_prob:
        return CLEAN
    choices = phase.noisy_choices
    return choices[int(rng.integers(0, len(choices)))]


def draw_noise_kind(rng: np.random.Generator) -> str:
    return NOISE_KINDS[int(rng.integers(0, len(NOISE_KINDS)))]


# ------------------------------------------------------------- persistence
def save_corpus(samples: list[Sample], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        write_container(out / f"{s.id}.avbc", {"clean": s.clean.samples, "video": s.video.frames})
        rows.append({"id": s.id, "seed": s.seed, "transcript": s.text, "duration": s.duration})
    manifest = out / "manifest.jsonl"
    write_jsonl(manifest, rows)
    return manifest


def load_corpus(out_dir) -> list[Sample]:
    out = Path(out_dir)
    samples = []
    for row in read_jsonl(out / "manifest.jsonl"):
        arrays = read_container(out / f"{row['id']}.avbc")
        samples.append(Sample(row["id"], int(row["seed"]), row["transcript"].split(),
                              Waveform(arrays["clean"].astype(np.float64)),
                              VideoClip(arrays["video"].astype(np.float64))))
    return samples
