"""Deterministic synthetic cover-song corpus.

A song repeats two stepwise eight-note motifs in AABA order on a two-octave
major scale, rendered with three harmonics. The repetition gives each clique a
recurring shape that survives transposition. Covers re-render the same
notes with a key shift, tempo ratio, fresh timbre, gain and additive white
noise, so transposition and tempo ground truth are exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import (
    SAMPLE_RATE,
    AudioClip,
    CqtSpectrogram,
    compute_cqt,
    downsample_time,
    normalize,
    save_cqt,
    write_wav,
)

MAJOR = (0, 2, 4, 5, 7, 9, 11)
N_DEGREES = 14  # two octaves
ROOT_RANGE = (36, 55)  # keeps all three harmonics >= 5 bins inside C1..B7 under +-5 shifts
NOTE_COUNT = (16, 64)
TEMPO_RANGE = (70.0, 160.0)
BEAT_CHOICES = (1.0, 2.0, 3.0, 4.0)
BEAT_PROBS = (0.4, 0.3, 0.2, 0.1)
SHIFT_RANGE = (-5, 5)
TEMPO_RATIO_RANGE = (0.7, 1.4)
SNR_RANGE = (20.0, 40.0)
GAIN_RANGE = (0.5, 1.0)
RAMP_SECONDS = 0.010
SYNTH_FACTOR = 20
MOTIF_LEN = 8
FORM = "AABA"
MAX_STEP = 3  # scale degrees between consecutive motif notes
HARMONIC_PRIOR = (30.0, 10.0, 5.0)


@dataclass
class SongSpec:
    root: int
    notes: list[tuple[int, float]]  # (scale degree 0..13, duration in beats)
    tempo: float
    harmonics: tuple[float, float, float]

    def midi_pitches(self) -> list[int]:
        return [self.root + 12 * (d // 7) + MAJOR[d % 7] for d, _ in self.notes]


@dataclass
class CoverParams:
    semitone_shift: int = 0
    tempo_ratio: float = 1.0
    snr_db: float = math.inf
    harmonics: tuple[float, float, float] | None = None
    gain: float = 1.0
    noise_seed: int = 0

    @classmethod
    def identity(cls) -> "CoverParams":
        return cls()


def _harmonic_weights(rng: np.random.Generator) -> tuple[float, float, float]:
    w = rng.dirichlet(HARMONIC_PRIOR)
    return tuple(float(x) for x in w)


def _walk(rng: np.random.Generator, n: int) -> np.ndarray:
    """Stepwise melody: uniform start degree, then steps from MAX_STEP, reflected at the range ends."""
    steps = rng.integers(-MAX_STEP, MAX_STEP + 1, size=n - 1)
    d = [int(rng.integers(0, N_DEGREES))]
    for s in steps:
        nxt = d[-1] + int(s)
        if not 0 <= nxt < N_DEGREES:
            nxt = d[-1] - int(s)
        d.append(nxt)
    return np.array(d)


def gen_song(rng: np.random.Generator) -> SongSpec:
    """Two random 8-note motifs A and B laid out as AABA AABA ..., cut to 16-64 notes."""
    n = int(rng.integers(NOTE_COUNT[0], NOTE_COUNT[1] + 1))
    motifs = {}
    for name in sorted(set(FORM)):
        degrees = _walk(rng, MOTIF_LEN)
        beats = rng.choice(BEAT_CHOICES, size=MOTIF_LEN, p=BEAT_PROBS)
        motifs[name] = [(int(d), float(b)) for d, b in zip(degrees, beats)]
    cycle = [note for part in FORM for note in motifs[part]]
    return SongSpec(
        root=int(rng.integers(ROOT_RANGE[0], ROOT_RANGE[1] + 1)),
        notes=[cycle[i % len(cycle)] for i in range(n)],
        tempo=float(rng.uniform(*TEMPO_RANGE)),
        harmonics=_harmonic_weights(rng),
    )


def gen_cover_params(rng: np.random.Generator) -> CoverParams:
    return CoverParams(
        semitone_shift=int(rng.integers(SHIFT_RANGE[0], SHIFT_RANGE[1] + 1)),
        tempo_ratio=float(rng.uniform(*TEMPO_RATIO_RANGE)),
        snr_db=float(rng.uniform(*SNR_RANGE)),
        harmonics=_harmonic_weights(rng),
        gain=float(rng.uniform(*GAIN_RANGE)),
        noise_seed=int(rng.integers(2**31)),
    )


def midi_to_hz(m: float) -> float:
    return 440.0 * 2.0 ** ((m - 69) / 12)


def render(spec: SongSpec, params: CoverParams | None = None, sr: int = SAMPLE_RATE) -> AudioClip:
    params = params or CoverParams.identity()
    weights = params.harmonics or spec.harmonics
    beat = 60.0 / spec.tempo / params.tempo_ratio
    ramp = int(round(RAMP_SECONDS * sr))
    pieces = []
    for midi, (_, beats) in zip(spec.midi_pitches(), spec.notes):
        f = midi_to_hz(midi + params.semitone_shift)
        if 3 * f >= sr / 2:
            raise ValueError(f"pitch {midi + params.semitone_shift} aliases at {sr} Hz")
        n = max(int(round(beats * beat * sr)), 2 * ramp + 1)
        t = np.arange(n) / sr
        tone = sum(w * np.sin(2 * np.pi * h * f * t) for h, w in enumerate(weights, 1))
        env = np.ones(n)
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = rise
        env[n - ramp :] = rise[::-1]
        pieces.append(tone * env)
    x = np.concatenate(pieces)
    if math.isfinite(params.snr_db):
        noise_rng = np.random.default_rng(params.noise_seed)
        power = np.mean(x**2) / 10 ** (params.snr_db / 10)
        x = x + noise_rng.normal(0.0, math.sqrt(power), size=x.size)
    x *= 0.9 * params.gain / np.abs(x).max()
    return AudioClip(x, sr)


def shift_cqt_bins(cqt, i: int):
    """Move rows by ``i`` toward higher bins (negative: lower); vacated rows are zero."""
    values = cqt.values if isinstance(cqt, CqtSpectrogram) else np.asarray(cqt)
    n = values.shape[0]
    if abs(i) >= n:
        raise ValueError(f"shift {i} out of range for {n} bins")
    out = np.zeros_like(values)
    if i >= 0:
        out[i:] = values[: n - i]
    else:
        out[:i] = values[-i:]
    if isinstance(cqt, CqtSpectrogram):
        return CqtSpectrogram(out, cqt.fmin, cqt.hop_length, cqt.downsample_factor)
    return out


def split_counts(versions: int) -> tuple[int, int, int]:
    """(train, val, test) versions per clique for a 70/15/15 split."""
    if versions < 3:
        return versions - (versions > 1), 0, int(versions > 1)
    n_val = max(1, round(0.15 * versions))
    n_test = max(1, round(0.15 * versions))
    return versions - n_val - n_test, n_val, n_test


def clique_versions(clique: int, versions: int, seed: int):
    """The song spec and per-version cover params for one clique."""
    rng = np.random.default_rng([seed, clique])
    song = gen_song(rng)
    params = [CoverParams.identity()] + [gen_cover_params(rng) for _ in range(versions - 1)]
    return song, params


def build_dataset(
    n_cliques: int,
    versions_per_clique: int,
    seed: int,
    out_dir,
    factor: int = SYNTH_FACTOR,
    wav: bool = False,
    log_compress: bool = False,
) -> list[dict]:
    """Render, extract and write a clique-labelled corpus; returns the manifest rows.

    Writes ``features/<id>.cqt``, optionally ``audio/<id>.wav``, and
    ``manifest.jsonl`` under ``out_dir``.
    """
    if n_cliques < 1 or versions_per_clique < 1:
        raise ValueError("need at least one clique and one version")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    if wav:
        (out / "audio").mkdir(exist_ok=True)
    n_train, n_val, _ = split_counts(versions_per_clique)
    rows = []
    for c in range(n_cliques):
        song, params = clique_versions(c, versions_per_clique, seed)
        for v, p in enumerate(params):
            rid = f"c{c:03d}_v{v}"
            clip = render(song, p)
            if wav:
                write_wav(out / "audio" / f"{rid}.wav", clip)
            cqt = normalize(downsample_time(compute_cqt(clip), factor), log_compress)
            save_cqt(out / "features" / f"{rid}.cqt", cqt)
            split = "train" if v < n_train else "val" if v < n_train + n_val else "test"
            rows.append({"id": rid, "feature": f"features/{rid}.cqt", "clique": f"clique{c:03d}", "split": split})
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return rows


def spec_to_dict(spec: SongSpec) -> dict:
    return asdict(spec)
