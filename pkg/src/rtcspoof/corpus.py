"""Paired offline/online corpus construction.

Offline utterances are optionally mixed with scenario noise, concatenated
with guard gaps, pushed through a channel profile, re-segmented by timestamp
plus measured lag, content-verified, and written out as the online twin of
the offline corpus. Manifests are plain TSV so they diff and grep well.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps

from .audio import (AudioClip, CANONICAL_RATE, _hz_to_mel, _mel_to_hz,
                    align_lag, logmel_features, read_wav, write_wav)
from .channel import derive_seed, transmit
from .errors import (AlignmentError, EmptyBatchError, FormatError,
                     PairingError, SchemeError, SegmentationError,
                     SnrUndefinedError)

log = logging.getLogger(__name__)

NOISE_KINDS = ("clean", "babble", "echo", "filtered_noise", "impulsive")
LABELS = ("bonafide", "fake")
SUBSETS = ("train", "dev", "eval")

ACTIVE_FRAME = 400           # 25 ms activity frames for SNR measurement
ACTIVE_FLOOR_DB = 40.0       # frames this far under the max count as inactive

MANIFEST_COLUMNS = ("utt_id", "audio_path", "label", "gen_id", "platform_id",
                    "noise_id", "speaker_id", "lang_id", "text", "pair_id")

VERIFY_THRESHOLD = 0.6
CONTOUR_MAX_HZ = 2800.0    # use only bands every profile's band limit keeps
CONTOUR_FLOOR_NATS = 6.0   # ~52 dB of contour dynamic range kept
CONTOUR_HP_FRAMES = 51     # ~0.5 s moving average removed from the contour
VERIFY_MAX_SHIFT = 3       # residual frame lag; coarse alignment ran upstream


@dataclass
class NoiseProfile:
    noise_id: str
    kind: str
    snr_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.noise_id == "S01" and self.kind != "clean":
            raise ValueError("S01 is reserved for the clean condition")
        if self.kind != "clean" and not -5.0 <= self.snr_db <= 40.0:
            raise ValueError("snr_db must be in [-5, 40]")


def builtin_noise_profiles():
    """S01 is clean; S02..S07 cover colored, babble, echoed, and impulsive
    scenes at fixed SNRs. Two pairs share a kind but differ by seed, which
    changes the realization (spectral tilt coin, impulse rate)."""
    return [
        NoiseProfile("S01", "clean"),
        NoiseProfile("S02", "filtered_noise", snr_db=15.0, seed=202),
        NoiseProfile("S03", "babble", snr_db=10.0, seed=203),
        NoiseProfile("S04", "echo", snr_db=12.0, seed=204),
        NoiseProfile("S05", "filtered_noise", snr_db=15.0, seed=205),
        NoiseProfile("S06", "impulsive", snr_db=10.0, seed=206),
        NoiseProfile("S07", "impulsive", snr_db=18.0, seed=207),
    ]


def _active_mask(x, frame_len=ACTIVE_FRAME):
    """Boolean per-sample mask of frames within 40 dB of the loudest frame."""
    n = len(x)
    n_frames = int(np.ceil(n / frame_len))
    padded = np.zeros(n_frames * frame_len)
    padded[:n] = x
    energy = np.sum(padded.reshape(n_frames, frame_len) ** 2, axis=1)
    peak = np.max(energy)
    if peak <= 0.0:
        return np.zeros(n, dtype=bool)
    active = energy > peak * 10.0 ** (-ACTIVE_FLOOR_DB / 10.0)
    return np.repeat(active, frame_len)[:n]


def _babble_noise(n, rng, n_streams=6):
    out = np.zeros(n)
    for _ in range(n_streams):
        lo = rng.uniform(150, 1200)
        hi = lo + rng.uniform(600, 2400)
        sos = sps.butter(4, [lo, min(hi, 7600)], btype="band",
                         fs=CANONICAL_RATE, output="sos")
        stream = sps.sosfilt(sos, rng.normal(0.0, 1.0, n))
        rate = rng.uniform(2.0, 6.0)
        t = np.arange(n) / CANONICAL_RATE
        envelope = 0.4 + 0.6 * np.abs(np.sin(np.pi * rate * t + rng.uniform(0, np.pi)))
        out += stream * envelope
    return out


def _filtered_noise(n, rng):
    white = rng.normal(0.0, 1.0, n)
    if rng.random() < 0.5:
        # pink-ish: integrate white noise, then remove the drift
        pink = np.cumsum(white)
        pink -= np.linspace(pink[0], pink[-1], n)
        sos = sps.butter(2, 4000, btype="low", fs=CANONICAL_RATE, output="sos")
        return sps.sosfilt(sos, pink)
    cutoff = rng.uniform(800, 2500)
    sos = sps.butter(4, cutoff, btype="low", fs=CANONICAL_RATE, output="sos")
    return sps.sosfilt(sos, white)


def _impulsive_noise(n, rng):
    out = np.zeros(n)
    rate_hz = rng.uniform(2.0, 10.0)
    n_clicks = max(1, int(rate_hz * n / CANONICAL_RATE))
    positions = np.sort(rng.integers(0, max(1, n - 64), n_clicks))
    ring_len = 64
    t = np.arange(ring_len)
    for pos in positions:
        f = rng.uniform(1500, 6000)
        click = rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.0)
        ring = click * np.exp(-t / rng.uniform(4, 20)) * np.cos(
            2 * np.pi * f * t / CANONICAL_RATE)
        end = min(pos + ring_len, n)
        out[pos:end] += ring[: end - pos]
    return out


def _echo_noise(x, rng):
    delay = int(rng.uniform(0.080, 0.200) * CANONICAL_RATE)
    echoed = np.zeros(len(x))
    echoed[delay:] = x[: len(x) - delay]
    return echoed, delay


def inject_noise(clip: AudioClip, profile: NoiseProfile) -> AudioClip:
    """Mix seed-derived scenario noise at an exact SNR over active speech."""
    if profile.kind == "clean":
        return clip
    x = clip.samples
    mask = _active_mask(x)
    speech_power = float(np.mean(x[mask] ** 2)) if np.any(mask) else 0.0
    if speech_power <= 0.0:
        raise SnrUndefinedError("cannot set an SNR against silent input")
    rng = np.random.default_rng(profile.seed)
    if profile.kind == "babble":
        noise = _babble_noise(len(x), rng)
    elif profile.kind == "filtered_noise":
        noise = _filtered_noise(len(x), rng)
    elif profile.kind == "impulsive":
        noise = _impulsive_noise(len(x), rng)
    else:
        noise, _ = _echo_noise(x, rng)
    noise_power = float(np.mean(noise[mask] ** 2))
    if noise_power <= 0.0:
        # click trains can miss the active region; spread one click into it
        noise = noise + 1e-4 * rng.normal(0.0, 1.0, len(x))
        noise_power = float(np.mean(noise[mask] ** 2))
    scale = np.sqrt(speech_power / (noise_power * 10.0 ** (profile.snr_db / 10.0)))
    return clip.replace(x + scale * noise)


def concat_for_transmission(clips, gap_ms: float):
    """Join clips with silence gaps; returns the batch and (start, end) spans."""
    if not clips:
        raise EmptyBatchError("nothing to concatenate")
    if gap_ms < 100.0:
        raise ValueError("gap_ms must be >= 100 so concealment cannot bleed across")
    rate = clips[0].sample_rate_hz
    gap = int(round(gap_ms * rate / 1000.0))
    pieces = []
    spans = []
    cursor = 0
    for i, clip in enumerate(clips):
        if clip.sample_rate_hz != rate:
            raise ValueError("all clips must share one sample rate")
        if i > 0:
            pieces.append(np.zeros(gap))
            cursor += gap
        pieces.append(clip.samples)
        spans.append((cursor, cursor + len(clip.samples)))
        cursor += len(clip.samples)
    return AudioClip(np.concatenate(pieces), rate), spans


def segment_received(received: AudioClip, timestamps, measured_lag: int):
    """Cut the received batch back into utterances at shifted spans."""
    n = len(received.samples)
    out = []
    for start, end in timestamps:
        lo, hi = start + measured_lag, end + measured_lag
        if lo < 0 or hi > n:
            raise SegmentationError(
                f"span ({start}, {end}) at lag {measured_lag} leaves the signal")
        out.append(received.replace(received.samples[lo:hi]))
    return out


def _energy_contour(clip: AudioClip):
    """Syllable-rate energy shape, insensitive to gain drift and floor shifts.

    The floor clamp keeps packet-loss holes and noise-floor mismatches from
    dominating the correlation; the moving-average subtraction removes slow
    gain trajectories that receive-path AGC imposes on otherwise identical
    content.
    """
    feats = logmel_features(clip)
    edges = np.linspace(_hz_to_mel(0.0), _hz_to_mel(clip.sample_rate_hz / 2.0),
                        feats.frames.shape[1] + 2)
    centers = _mel_to_hz(edges[1:-1])
    e = np.mean(feats.frames[:, centers <= CONTOUR_MAX_HZ], axis=1)
    e = np.maximum(e, np.percentile(e, 95) - CONTOUR_FLOOR_NATS)
    win = CONTOUR_HP_FRAMES
    padded = np.pad(e, win // 2, mode="edge")
    return e - np.convolve(padded, np.ones(win) / win, mode="valid")


def verify_content(original: AudioClip, recovered: AudioClip,
                   threshold: float = VERIFY_THRESHOLD):
    """Score how well two clips carry the same content.

    Peak normalized cross-correlation of log-mel energy contours, scanned
    over a small residual frame lag. Returns (passed, score in [0, 1]).
    """
    try:
        ca = _energy_contour(original)
        cb = _energy_contour(recovered)
    except Exception:
        return False, 0.0
    na = np.linalg.norm(ca)
    nb = np.linalg.norm(cb)
    if na == 0.0 or nb == 0.0:
        return False, 0.0
    ca /= na
    cb /= nb
    max_shift = VERIFY_MAX_SHIFT
    best = -1.0
    for shift in range(-max_shift, max_shift + 1):
        if shift >= 0:
            a, b = ca[shift:], cb[: len(cb) - shift]
        else:
            a, b = ca[: len(ca) + shift], cb[-shift:]
        m = min(len(a), len(b))
        if m < 4:
            continue
        best = max(best, float(np.dot(a[:m], b[:m])))
    score = float(np.clip(best, 0.0, 1.0))
    return score >= threshold, score


@dataclass
class UtteranceRecord:
    utt_id: str
    audio_path: str
    label: str
    gen_id: str | None
    platform_id: str
    noise_id: str
    speaker_id: str
    lang_id: str
    text: str
    pair_id: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise FormatError(f"unknown label {self.label!r}")
        if (self.label == "bonafide") != (self.gen_id is None):
            raise FormatError("bonafide records carry no gen_id, fakes must")
        if self.platform_id == "offline" and self.pair_id is not None:
            raise FormatError("offline records must not reference a pair")


@dataclass
class Manifest:
    records: list
    subset: str = "train"

    def __post_init__(self):
        if self.subset not in SUBSETS:
            raise FormatError(f"unknown subset {self.subset!r}")
        ids = [r.utt_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise FormatError("duplicate utt_ids in manifest")

    def __len__(self):
        return len(self.records)

    def by_id(self):
        return {r.utt_id: r for r in self.records}


def write_manifest(manifest: Manifest, path):
    """TSV with a header; tabs and newlines in text fields become spaces."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in manifest.records:
            row = [r.utt_id, r.audio_path, r.label, r.gen_id or "none",
                   r.platform_id, r.noise_id, r.speaker_id, r.lang_id,
                   " ".join(str(r.text).split()), r.pair_id or "none"]
            fh.write("\t".join(row) + "\n")


def read_manifest(path, subset="train") -> Manifest:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty manifest file")
    header = tuple(lines[0].split("\t"))
    if header != MANIFEST_COLUMNS:
        raise FormatError(f"bad manifest header: {header}")
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise FormatError(f"line {ln}: expected {len(MANIFEST_COLUMNS)} columns")
        d = dict(zip(MANIFEST_COLUMNS, parts))
        records.append(UtteranceRecord(
            utt_id=d["utt_id"], audio_path=d["audio_path"], label=d["label"],
            gen_id=None if d["gen_id"] == "none" else d["gen_id"],
            platform_id=d["platform_id"], noise_id=d["noise_id"],
            speaker_id=d["speaker_id"], lang_id=d["lang_id"], text=d["text"],
            pair_id=None if d["pair_id"] == "none" else d["pair_id"]))
    return Manifest(records, subset=subset)


def check_pairing(offline: Manifest, online: Manifest):
    """Raise PairingError unless every online record resolves cleanly."""
    sources = offline.by_id()
    for r in online.records:
        if r.pair_id is None:
            raise PairingError(f"{r.utt_id}: online record without a pair")
        src = sources.get(r.pair_id)
        if src is None:
            raise PairingError(f"{r.utt_id}: pair {r.pair_id} not found")
        if (src.label, src.gen_id, src.speaker_id, src.text) != (
                r.label, r.gen_id, r.speaker_id, r.text):
            raise PairingError(f"{r.utt_id}: metadata disagrees with {r.pair_id}")


def _process_batch(batch, profile, batch_index, out_dir, subset, gap_ms,
                   threshold, root):
    """Transmit one batch through one profile; returns online records."""
    seeded = profile.with_seed(derive_seed(profile.seed, batch_index))
    clips = [read_wav(os.path.join(root, r.audio_path)) for r in batch]
    concat, spans = concat_for_transmission(clips, gap_ms)
    received, _tlog = transmit(concat, seeded)
    try:
        lag = align_lag(concat, received)
    except AlignmentError:
        log.warning("dropping batch %d via %s: could not align",
                    batch_index, profile.profile_id)
        return []
    # a lag measured a few samples long must not push the last span
    # off the end; trailing zeros are harmless there
    needed = spans[-1][1] + lag
    if needed > len(received.samples):
        received = received.replace(np.concatenate(
            [received.samples, np.zeros(needed - len(received.samples))]))
    segments = segment_received(received, spans, lag)
    out_records = []
    plat_dir = os.path.join(out_dir, subset, profile.profile_id)
    os.makedirs(plat_dir, exist_ok=True)
    for rec, orig, seg in zip(batch, clips, segments):
        passed, score = verify_content(orig, seg, threshold)
        if not passed:
            log.warning("dropping %s via %s: content score %.3f",
                        rec.utt_id, profile.profile_id, score)
            continue
        utt_id = f"{rec.utt_id}-{profile.profile_id}"
        rel_path = os.path.join(subset, profile.profile_id, f"{utt_id}.wav")
        write_wav(seg, os.path.join(out_dir, rel_path))
        out_records.append(replace(
            rec, utt_id=utt_id, audio_path=rel_path,
            platform_id=profile.profile_id, pair_id=rec.utt_id))
    return out_records


def build_online_corpus(manifest: Manifest, profiles, batch_size: int,
                        out_dir, gap_ms: float = 200.0,
                        threshold: float = VERIFY_THRESHOLD,
                        workers: int = 1, root: str = "") -> Manifest:
    """Transmit every offline utterance through every profile.

    Batches are formed in manifest order; per-batch channel seeds derive
    from (profile.seed, batch index) so any worker schedule gives the same
    corpus. Audio paths inside the manifest resolve against `root`.
    """
    if any(r.platform_id != "offline" for r in manifest.records):
        raise ValueError("input manifest must be offline-only")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    jobs = []
    for profile in profiles:
        for b, start in enumerate(range(0, len(manifest.records), batch_size)):
            jobs.append((manifest.records[start:start + batch_size], profile, b))
    results = {}
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_process_batch, batch, profile, b, out_dir,
                            manifest.subset, gap_ms, threshold, root): i
                for i, (batch, profile, b) in enumerate(jobs)}
            for fut, i in futures.items():
                results[i] = fut.result()
    else:
        for i, (batch, profile, b) in enumerate(jobs):
            results[i] = _process_batch(batch, profile, b, out_dir,
                                        manifest.subset, gap_ms, threshold, root)
    records = [rec for i in range(len(jobs)) for rec in results[i]]
    return Manifest(records, subset=manifest.subset)


@dataclass
class PartitionScheme:
    """Speaker assignment plus the gen/platform IDs each subset may contain."""
    train_speakers: frozenset
    dev_speakers: frozenset
    eval_speakers: frozenset
    train_gen_ids: frozenset
    dev_gen_ids: frozenset
    eval_gen_ids: frozenset
    train_platforms: frozenset
    dev_platforms: frozenset
    eval_platforms: frozenset

    def __post_init__(self):
        if (self.train_speakers & self.dev_speakers
                or self.train_speakers & self.eval_speakers
                or self.dev_speakers & self.eval_speakers):
            raise SchemeError("speaker sets overlap")


def published_scheme(train_speakers, dev_speakers, eval_speakers):
    """The generator/platform ranges of the published subset table."""
    tg = frozenset({"G01", "G02", "G03", "G04", "G08", "G09"})
    eg = frozenset({f"G{i:02d}" for i in range(1, 11)})
    return PartitionScheme(
        train_speakers=frozenset(train_speakers),
        dev_speakers=frozenset(dev_speakers),
        eval_speakers=frozenset(eval_speakers),
        train_gen_ids=tg, dev_gen_ids=tg, eval_gen_ids=eg,
        train_platforms=frozenset({"offline", "P01", "P02"}),
        dev_platforms=frozenset({"offline", "P01", "P02", "P03"}),
        eval_platforms=frozenset({"offline"} | {f"P{i:02d}" for i in range(1, 8)}))


def partition(records, scheme: PartitionScheme):
    """Split records into speaker-disjoint, ID-range-compliant subsets."""
    buckets = {"train": [], "dev": [], "eval": []}
    membership = {
        "train": (scheme.train_speakers, scheme.train_gen_ids, scheme.train_platforms),
        "dev": (scheme.dev_speakers, scheme.dev_gen_ids, scheme.dev_platforms),
        "eval": (scheme.eval_speakers, scheme.eval_gen_ids, scheme.eval_platforms)}
    for r in records:
        subset = None
        for name, (speakers, _, _) in membership.items():
            if r.speaker_id in speakers:
                subset = name
                break
        if subset is None:
            raise SchemeError(f"{r.utt_id}: speaker {r.speaker_id} not in scheme")
        _, gens, platforms = membership[subset]
        if r.gen_id is not None and r.gen_id not in gens:
            raise SchemeError(f"{r.utt_id}: {r.gen_id} not allowed in {subset}")
        if r.platform_id not in platforms:
            raise SchemeError(f"{r.utt_id}: {r.platform_id} not allowed in {subset}")
        buckets[subset].append(r)
    return (Manifest(buckets["train"], "train"),
            Manifest(buckets["dev"], "dev"),
            Manifest(buckets["eval"], "eval"))


def augment_plan(seed: int) -> dict:
    """Draw the augmentation recipe a seed implies (noise and/or short IR)."""
    rng = np.random.default_rng(seed)
    apply_noise = rng.random() < 0.7
    apply_ir = rng.random() < 0.5
    if not apply_noise and not apply_ir:
        apply_noise = True
    plan = {"apply_noise": apply_noise, "apply_ir": apply_ir,
            "ir": None, "snr_db": None, "noise_cutoff_hz": None,
            "noise_seed": derive_seed(seed, "augment-noise")}
    if apply_ir:
        taps = int(rng.integers(4, 33))
        ir = rng.normal(0.0, 1.0, taps) * np.exp(-np.arange(taps) / 6.0)
        ir[0] = 1.0
        plan["ir"] = ir / np.sqrt(np.sum(ir**2))
    if apply_noise:
        plan["snr_db"] = float(rng.uniform(10.0, 40.0))
        plan["noise_cutoff_hz"] = float(rng.uniform(1000, 6000))
    return plan


def augment(clip: AudioClip, seed: int) -> AudioClip:
    """Light waveform augmentation following augment_plan(seed)."""
    plan = augment_plan(seed)
    x = clip.samples.copy()
    if plan["apply_ir"]:
        x = sps.fftconvolve(x, plan["ir"])[: len(x)]
    if plan["apply_noise"]:
        nrng = np.random.default_rng(plan["noise_seed"])
        sos = sps.butter(2, plan["noise_cutoff_hz"], btype="low",
                         fs=clip.sample_rate_hz, output="sos")
        noise = sps.sosfilt(sos, nrng.normal(0.0, 1.0, len(x)))
        sig_power = float(np.mean(x**2))
        if sig_power > 0:
            scale = np.sqrt(sig_power
                            / (np.mean(noise**2) * 10.0 ** (plan["snr_db"] / 10.0)))
            x = x + scale * noise
    return clip.replace(x)
