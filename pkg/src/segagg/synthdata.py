"""Procedural harmonic-plus-noise speaker corpus.

Each speaker is a fundamental frequency, a harmonic envelope and a noise
floor; each utterance jitters the fundamental, redraws harmonic phases and
adds fresh noise.  Everything is keyed on integer seeds so a corpus can be
regenerated byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

PEAK = 0.9
_WAV_MAGIC = b"SWAV"
MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "val", "test")


@dataclass
class SynthConfig:
    sample_rate: int = 4000
    f0_min: float = 80.0
    f0_max: float = 300.0
    num_harmonics: int = 8
    noise_min: float = 0.05
    noise_max: float = 0.3
    jitter: float = 0.03


@dataclass
class SpeakerProfile:
    speaker_id: int
    f0: float
    harmonic_weights: np.ndarray
    noise_floor: float


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class CorpusConfig:
    train_speakers: int = 20
    val_speakers: int = 5
    test_speakers: int = 8
    utterances_per_speaker: int = 10
    min_duration: int = 7000
    max_duration: int = 14000
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class ManifestEntry:
    speaker_id: int
    utterance_seed: int
    duration: int
    path: str

    @property
    def split(self) -> str:
        return self.path.split("/", 1)[0]


@dataclass
class CorpusManifest:
    root: Path
    master_seed: int
    sample_rate: int
    entries: List[ManifestEntry]

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def speakers(self, name: str) -> List[int]:
        return sorted({e.speaker_id for e in self.split(name)})

    def load(self, entry: ManifestEntry) -> Waveform:
        return read_waveform(self.root / entry.path)


def make_speaker(master_seed: int, speaker_id: int, config: Optional[SynthConfig] = None) -> SpeakerProfile:
    config = config or SynthConfig()
    rng = np.random.default_rng([master_seed, speaker_id, 0])
    f0 = float(rng.uniform(config.f0_min, config.f0_max))
    weights = rng.uniform(0.0, 1.0, size=config.num_harmonics)
    weights[0] = max(weights[0], 0.1)
    noise = float(rng.uniform(config.noise_min, config.noise_max))
    return SpeakerProfile(speaker_id, f0, weights, noise)


def synth_utterance(
    profile: SpeakerProfile,
    utterance_seed: int,
    duration_samples: int,
    sample_rate: int = 4000,
    jitter: float = 0.03,
) -> Waveform:
    if duration_samples < 1:
        raise ValueError("duration_samples must be >= 1")
    rng = np.random.default_rng([utterance_seed, profile.speaker_id])
    f0 = profile.f0 * (1.0 + rng.uniform(-jitter, jitter))
    weights = profile.harmonic_weights
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(weights))
    t = np.arange(duration_samples) / sample_rate
    voiced = np.zeros(duration_samples)
    for h, (w, phi) in enumerate(zip(weights, phases), start=1):
        # harmonics above Nyquist would alias
        if h * f0 < sample_rate / 2:
            voiced += w * np.sin(2.0 * np.pi * h * f0 * t + phi)
    voiced /= max(np.abs(voiced).max(), 1e-12)
    x = voiced + profile.noise_floor * rng.standard_normal(duration_samples)
    x *= PEAK / max(np.abs(x).max(), 1e-12)
    return Waveform(x, sample_rate)


def write_waveform(path, wave: Waveform) -> None:
    """Header (magic, u32 sample rate, u32 length) then float32 LE samples."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _WAV_MAGIC + struct.pack("<II", wave.sample_rate, len(wave.samples))
    path.write_bytes(header + np.asarray(wave.samples, dtype="<f4").tobytes())


def read_waveform(path) -> Waveform:
    blob = Path(path).read_bytes()
    if blob[:4] != _WAV_MAGIC:
        raise ValueError(f"{path}: not a waveform file")
    sample_rate, length = struct.unpack_from("<II", blob, 4)
    samples = np.frombuffer(blob, dtype="<f4", count=length, offset=12).astype(np.float64)
    return Waveform(samples, sample_rate)


def _split_ranges(config: CorpusConfig) -> Dict[str, range]:
    a = config.train_speakers
    b = a + config.val_speakers
    c = b + config.test_speakers
    return {"train": range(0, a), "val": range(a, b), "test": range(b, c)}


def utterance_seed(master_seed: int, speaker_id: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, speaker_id, index]).generate_state(1)[0])


def generate_corpus(config: CorpusConfig, out_dir) -> CorpusManifest:
    """Synthesize every utterance to ``out_dir`` and write the manifest last."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    synth = config.synth
    entries: List[ManifestEntry] = []
    seen = set()
    for split, speakers in _split_ranges(config).items():
        for spk in speakers:
            profile = make_speaker(config.seed, spk, synth)
            dur_rng = np.random.default_rng([config.seed, spk, 1])
            for u in range(config.utterances_per_speaker):
                useed = utterance_seed(config.seed, spk, u)
                if (spk, useed) in seen:
                    raise RuntimeError(f"duplicate utterance seed for speaker {spk}")
                seen.add((spk, useed))
                duration = int(dur_rng.integers(config.min_duration, config.max_duration + 1))
                rel = f"{split}/spk{spk:04d}/utt{u:03d}.swav"
                wave = synth_utterance(profile, useed, duration, synth.sample_rate, synth.jitter)
                write_waveform(out_dir / rel, wave)
                entries.append(ManifestEntry(spk, useed, duration, rel))

    manifest = CorpusManifest(out_dir, config.seed, synth.sample_rate, entries)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: CorpusManifest) -> None:
    lines = [f"# master_seed={manifest.master_seed} sample_rate={manifest.sample_rate}"]
    lines += [f"{e.speaker_id} {e.utterance_seed} {e.duration} {e.path}" for e in manifest.entries]
    (manifest.root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_manifest(corpus_dir) -> CorpusManifest:
    root = Path(corpus_dir)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}; run the generate command first")
    master_seed, sample_rate, entries = 0, 0, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            meta = dict(kv.split("=") for kv in line[1:].split())
            master_seed, sample_rate = int(meta["master_seed"]), int(meta["sample_rate"])
        elif line.strip():
            spk, useed, dur, rel = line.split()
            entries.append(ManifestEntry(int(spk), int(useed), int(dur), rel))
    return CorpusManifest(root, master_seed, sample_rate, entries)


def load_split(manifest: CorpusManifest, split: str) -> Tuple[List[np.ndarray], List[int]]:
    """Waveforms and speaker ids of one split, in manifest order."""
    entries = manifest.split(split)
    return [manifest.load(e).samples for e in entries], [e.speaker_id for e in entries]
