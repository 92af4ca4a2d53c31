"""Tone-coded synthetic speech-translation corpus and TSV manifests.

Each source "word" is a pure tone of fixed duration. An utterance is the
concatenation of its words' tones plus Gaussian noise. The translation maps
every word through a fixed bilingual lexicon and reverses the order, so the
translation task needs non-monotonic attention.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, hz_to_mel, mel_to_hz, read_wav, write_wav
from .errors import ConfigError, InputError

SOURCE_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
                "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
                "nineteen")
TARGET_WORDS = ("zéro", "un", "deux", "trois", "quatre", "cinq", "six", "sept", "huit", "neuf", "dix",
                "onze", "douze", "treize", "quatorze", "quinze", "seize", "dixsept", "dixhuit", "dixneuf")
SPLITS = ("train", "dev", "test")
HEADER = ("example_id", "audio_path", "source_transcript", "target_translation")


@dataclass(frozen=True)
class SynthTaskSpec:
    n_symbols: int = 10
    tone_ms: int = 200
    sample_rate: int = 16000
    f_min: float = 300.0
    f_max: float = 3000.0
    min_len: int = 2
    max_len: int = 5
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    amplitude: float = 0.5
    noise: float = 0.05
    label_noise: float = 0.0  # chance a training-reference word is replaced at random
    seed: int = 0

    def validate(self) -> SynthTaskSpec:
        if not 2 <= self.n_symbols <= len(SOURCE_WORDS):
            raise ConfigError(f"n_symbols must be in [2, {len(SOURCE_WORDS)}]")
        if not 0 < self.f_min < self.f_max < self.sample_rate / 2:
            raise ConfigError("tone frequencies must be positive, increasing and below Nyquist")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("invalid utterance length range")
        if min(self.n_train, self.n_dev, self.n_test) < 0 or self.noise < 0:
            raise ConfigError("counts and noise level must be non-negative")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("label_noise must be in [0, 1)")
        return self

    @property
    def frequencies(self) -> np.ndarray:
        """Tone per symbol, equally spaced on the mel scale."""
        return mel_to_hz(np.linspace(hz_to_mel(self.f_min), hz_to_mel(self.f_max), self.n_symbols))

    @property
    def source_words(self) -> tuple[str, ...]:
        return SOURCE_WORDS[: self.n_symbols]

    @property
    def target_words(self) -> tuple[str, ...]:
        return TARGET_WORDS[: self.n_symbols]

    def translate(self, symbols) -> list[str]:
        return [self.target_words[s] for s in reversed(list(symbols))]

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}


@dataclass
class ManifestRow:
    example_id: str
    audio_path: Path
    source: str
    target: str


def synthesize(spec: SynthTaskSpec, symbols, rng: np.random.Generator) -> Waveform:
    n = int(spec.sample_rate * spec.tone_ms / 1000)
    t = np.arange(n) / spec.sample_rate
    freqs = spec.frequencies
    tones = [spec.amplitude * np.sin(2 * np.pi * freqs[s] * t) for s in symbols]
    x = np.concatenate(tones) + rng.normal(0.0, spec.noise, size=n * len(symbols))
    return Waveform(np.clip(x, -1.0, 32767 / 32768).astype(np.float32), spec.sample_rate)


def generate_synthetic_dataset(spec: SynthTaskSpec, out_dir) -> dict[str, Path]:
    """Write ``wav/*.wav`` plus one manifest per split; returns the manifest paths."""
    spec.validate()
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    # separate stream so the audio does not depend on label_noise
    label_rng = np.random.default_rng([spec.seed, 1])
    paths = {}
    for split in SPLITS:
        rows = []
        for i in range(spec.split_sizes()[split]):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            symbols = rng.integers(0, spec.n_symbols, size=length)
            ex_id = f"{split}-{i:05d}"
            rel = Path("wav") / f"{ex_id}.wav"
            write_wav(out / rel, synthesize(spec, symbols, rng))
            target = spec.translate(symbols)
            if split == "train" and spec.label_noise > 0:
                flip = label_rng.random(len(target)) < spec.label_noise
                repl = label_rng.integers(0, spec.n_symbols, size=len(target))
                target = [spec.target_words[r] if f else w for w, f, r in zip(target, flip, repl)]
            rows.append((ex_id, rel.as_posix(), " ".join(spec.source_words[s] for s in symbols), " ".join(target)))
        paths[split] = out / f"{split}.tsv"
        write_manifest(paths[split], rows)
    (out / "synth.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(HEADER)
        w.writerows(rows)


def read_manifest(path, check_audio: bool = True) -> list[ManifestRow]:
    """Parse and validate a manifest; audio paths resolve relative to its directory."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest {path} does not exist")
    rows, seen = [], set()
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, rec in enumerate(csv.reader(f, delimiter="\t"), start=1):
            if not rec or tuple(rec) == HEADER:
                continue
            if len(rec) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(rec)}")
            ex_id, audio, src, tgt = rec
            if ex_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate example id {ex_id}")
            if not src.strip() or not tgt.strip():
                raise InputError(f"{path}:{lineno}: empty transcript or translation")
            seen.add(ex_id)
            audio_path = Path(audio) if Path(audio).is_absolute() else path.parent / audio
            if check_audio and not audio_path.exists():
                raise InputError(f"{path}:{lineno}: audio file {audio_path} does not exist")
            rows.append(ManifestRow(ex_id, audio_path, src, tgt))
    if not rows:
        raise InputError(f"manifest {path} is empty")
    return rows


def load_spec(data_dir) -> SynthTaskSpec:
    return SynthTaskSpec(**json.loads((Path(data_dir) / "synth.json").read_text(encoding="utf-8")))


def segment_waveforms(spec: SynthTaskSpec, wav_path) -> list[np.ndarray]:
    """Split a synthetic utterance back into its per-symbol tone segments."""
    x = read_wav(wav_path).samples
    n = int(spec.sample_rate * spec.tone_ms / 1000)
    return [x[i:i + n] for i in range(0, len(x) - n + 1, n)]
