"""Self-contained synthetic corpus: seeded speech-like audio in two classes.

No external dataset or vocoder is required. "Bonafide" clips are filtered
harmonic complexes with natural pitch jitter, syllable rhythm, and breath
noise. "Fake" clips run the same generator and then stamp a comb-notch
signature into the band that survives every built-in channel (the notches
sit well under the narrowest band limit), so the two classes stay linearly
separable on average log-mel features even after transmission.
"""

import dataclasses
import os

import numpy as np
from scipy import signal

from .audio import AudioClip, write_wav
from .channel import derive_seed
from .corpus import (Manifest, NoiseProfile, UtteranceRecord,
                     builtin_noise_profiles, inject_noise, write_manifest)
from .errors import ConfigError

SAMPLE_RATE = 16000
TARGET_RMS_DBFS = -26.0

# Artifact per generator: (comb delay in samples, notch depth, hiss dBFS
# relative to speech RMS). The comb delays put notch spacings between 333
# and 640 Hz, so several notches land inside 300..3000 Hz regardless of
# band limiting; that cue survives every profile. The hiss is a stationary
# 4.8-7.6 kHz noise bed, deliberately fragile: spectral subtraction eats it
# and narrow band limits remove it outright, so detectors that lean on it
# fail on harsh channels. Strengths are deliberately uneven: G04, G09, and
# G05 are borderline, which keeps the clean task itself from being free.
# G08..G10 get denser combs.
GEN_ARTIFACTS = {
    "G01": (28, 0.90, -16.0), "G02": (30, 0.85, -18.0),
    "G03": (32, 0.90, -17.0), "G04": (34, 0.70, -20.0),
    "G05": (26, 0.72, -19.0), "G06": (36, 0.85, -18.0),
    "G07": (25, 0.80, -16.0), "G08": (40, 0.88, -18.0),
    "G09": (44, 0.68, -20.0), "G10": (48, 0.78, -19.0),
}
HISS_BAND = (4800.0, 7600.0)
ROOM_TONE_DBFS = -55.0     # faint bed on every clip, bonafide included
TRAIN_GENS = ("G01", "G02", "G03", "G04", "G08", "G09")
ALL_GENS = tuple(sorted(GEN_ARTIFACTS))


def _syllable(rng, fs: int, f0_base: float, dur: float) -> np.ndarray:
    n = max(int(dur * fs), 32)
    f0 = f0_base * rng.uniform(0.92, 1.12)
    # slow pitch wobble, a few percent, plus mild vibrato
    knots = rng.normal(0.0, 1.0, 6)
    wobble = 1.0 + 0.025 * np.interp(np.arange(n), np.linspace(0, n - 1, 6), knots)
    vib = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * np.arange(n) / fs)
    phase = 2.0 * np.pi * np.cumsum(f0 * wobble * vib) / fs
    x = np.zeros(n)
    for h in range(1, 13):
        x += np.cos(h * phase) / h
    lo = rng.uniform(350.0, 800.0)
    hi = rng.uniform(1700.0, 3000.0)
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = 0.55 * x + 0.45 * signal.sosfilt(sos, x)
    x += 0.02 * rng.normal(0.0, 1.0, n)          # breath
    return x * np.hanning(n) * rng.uniform(0.5, 1.0)


def _comb_stamp(x: np.ndarray, delay: int, depth: float) -> np.ndarray:
    b = np.zeros(delay + 1)
    b[0] = 1.0
    b[delay] = -depth
    return signal.lfilter(b, [1.0], x)


def _hiss_bed(rng, n: int, fs: int, ref_rms: float, level_db: float) -> np.ndarray:
    sos = signal.butter(4, HISS_BAND, btype="bandpass", fs=fs, output="sos")
    noise = signal.sosfilt(sos, rng.normal(0.0, 1.0, n))
    noise_rms = np.sqrt(np.mean(noise**2))
    if noise_rms == 0:
        return np.zeros(n)
    return noise * (ref_rms * 10.0 ** (level_db / 20.0) / noise_rms)


def synth_utterance(seed: int, f0_base: float = 140.0, duration: float = 2.0,
                    sample_rate: int = SAMPLE_RATE,
                    artifact: tuple | None = None) -> AudioClip:
    """One speech-like clip; `artifact=(delay, depth, hiss_db)` makes it fake."""
    rng = np.random.default_rng(seed)
    total = int(duration * sample_rate)
    x = np.zeros(total)
    pos = int(rng.uniform(0.02, 0.06) * sample_rate)
    while pos < total - 400:
        dur = rng.uniform(0.12, 0.30)
        syl = _syllable(rng, sample_rate, f0_base, dur)
        end = min(pos + len(syl), total)
        x[pos:end] += syl[:end - pos]
        pos = end + int(rng.uniform(0.05, 0.16) * sample_rate)
    if artifact is not None:
        delay, depth, hiss_db = artifact
        x = _comb_stamp(x, int(delay), float(depth))
        x += _hiss_bed(rng, total, sample_rate,
                       np.sqrt(np.mean(x**2)), float(hiss_db))
    rms = np.sqrt(np.mean(x**2))
    if rms > 0:
        x *= 10.0 ** (TARGET_RMS_DBFS / 20.0) / rms
    # Faint room tone on every clip so silence is never digitally zero and
    # pause energy alone cannot separate the classes.
    x += 10.0 ** (ROOM_TONE_DBFS / 20.0) * rng.normal(0.0, 1.0, total)
    return AudioClip(samples=np.clip(x, -1.0, 1.0), sample_rate_hz=sample_rate)


def default_speakers(n_train: int, n_dev: int, n_eval: int):
    """Named speakers with spread pitch bases, split three ways."""
    total = n_train + n_dev + n_eval
    names = [f"SPK{i + 1:02d}" for i in range(total)]
    f0s = {name: 105.0 + 13.0 * i for i, name in enumerate(names)}
    splits = {"train": names[:n_train],
              "dev": names[n_train:n_train + n_dev],
              "eval": names[n_train + n_dev:]}
    return splits, f0s


def _noise_profile_for(noise_id: str, utt_seed: int) -> NoiseProfile:
    for prof in builtin_noise_profiles():
        if prof.noise_id == noise_id:
            return dataclasses.replace(prof, seed=utt_seed)
    raise ConfigError(f"unknown noise id {noise_id!r}")


def make_synth_corpus(out_dir, seed: int = 0, n_train_speakers: int = 4,
                      n_dev_speakers: int = 2, n_eval_speakers: int = 4,
                      utts_bona: int = 3, utts_fake: int = 3,
                      duration: float = 2.0, noise_ids=("S01",),
                      sample_rate: int = SAMPLE_RATE):
    """Writes an offline corpus under out_dir/offline plus its manifest.

    Fakes on train/dev speakers draw only from the generators those subsets
    are allowed to contain; eval speakers cycle through all of them. Returns
    (Manifest, splits dict). Fully determined by `seed`.
    """
    if min(n_train_speakers, n_dev_speakers, n_eval_speakers) < 1:
        raise ConfigError("need at least one speaker per split")
    if utts_bona < 1 or utts_fake < 0:
        raise ConfigError("bad per-speaker utterance counts")
    splits, f0s = default_speakers(n_train_speakers, n_dev_speakers,
                                   n_eval_speakers)
    wav_dir = os.path.join(out_dir, "offline")
    os.makedirs(wav_dir, exist_ok=True)
    records = []
    noise_cursor = 0
    for split in ("train", "dev", "eval"):
        gens = ALL_GENS if split == "eval" else TRAIN_GENS
        for spk in splits[split]:
            jobs = [("b", j, None) for j in range(utts_bona)]
            jobs += [("f", j, gens[j % len(gens)]) for j in range(utts_fake)]
            for tag, j, gen in jobs:
                utt_id = f"{spk}-{tag}{j:02d}"
                utt_seed = derive_seed(seed, utt_id)
                artifact = GEN_ARTIFACTS[gen] if gen else None
                clip = synth_utterance(utt_seed, f0s[spk], duration,
                                       sample_rate, artifact)
                noise_id = noise_ids[noise_cursor % len(noise_ids)]
                noise_cursor += 1
                if noise_id != "S01":
                    prof = _noise_profile_for(
                        noise_id, derive_seed(seed, utt_id, noise_id))
                    clip = inject_noise(clip, prof)
                rel = os.path.join("offline", f"{utt_id}.wav")
                write_wav(clip, os.path.join(out_dir, rel))
                records.append(UtteranceRecord(
                    utt_id=utt_id, audio_path=rel,
                    label="bonafide" if gen is None else "fake",
                    gen_id=gen, platform_id="offline", noise_id=noise_id,
                    speaker_id=spk, lang_id="L1",
                    text=f"prompt {spk.lower()} {j}", pair_id=None))
    manifest = Manifest(records, subset="train")
    write_manifest(manifest, os.path.join(out_dir, "offline_manifest.tsv"))
    return manifest, splits
