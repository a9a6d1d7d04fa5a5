"""Waveform container, WAV I/O, resampling, log-mel features, lag alignment.

Everything downstream works on mono float waveforms in [-1, 1] at a canonical
16 kHz rate; this module is the only place samples enter or leave that form.
"""

import wave
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import AlignmentError, FormatError, IoError, TooShortError, UnsupportedError

CANONICAL_RATE = 16000
PCM_SCALE = 32768.0

# Frame grid shared by features, segmentations, and content verification.
DEFAULT_WIN_MS = 25.0
DEFAULT_HOP_MS = 10.0
DEFAULT_N_MELS = 40

# Mel floor sits just under the quietest level clean source audio reaches.
# Channels differ wildly in how deeply they bury silent or out-of-band mel
# bands (band limiting, noise suppression, codec zeros); saturating all of
# them at one shared level keeps those bands from encoding which channel a
# clip went through.
LOG_FLOOR = 4.5e-5


@dataclass
class AudioClip:
    """Mono PCM samples with their rate and an opaque utterance id."""

    samples: np.ndarray
    sample_rate_hz: int = CANONICAL_RATE
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be 1-D")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        self.samples = np.clip(self.samples, -1.0, 1.0)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate_hz

    def rms(self):
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))

    def replace(self, samples, id=None):
        """New clip at the same rate; samples are clipped to [-1, 1]."""
        return AudioClip(samples, self.sample_rate_hz, self.id if id is None else id)


@dataclass
class FeatureSequence:
    """T x d matrix of frame-level features on the canonical frame grid."""

    frames: np.ndarray
    frame_hop_ms: float = DEFAULT_HOP_MS
    frame_len_ms: float = DEFAULT_WIN_MS
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a T x d matrix with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature entries must be finite")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def read_wav(path) -> AudioClip:
    """Read a RIFF/WAVE PCM-16 file as a clip at the canonical 16 kHz rate.

    Stereo is downmixed by channel averaging; other rates are resampled.
    """
    try:
        handle = wave.open(str(path), "rb")
    except FileNotFoundError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedError(f"{path}: non-PCM encoding ({exc})") from exc
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated WAV header") from exc
    with handle as wf:
        n_channels = wf.getnchannels()
        samp_width = wf.getsampwidth()
        rate = wf.getframerate()
        n_frames = wf.getnframes()
        if samp_width != 2:
            raise UnsupportedError(f"{path}: only PCM 16-bit supported, got {8 * samp_width}-bit")
        if n_channels not in (1, 2):
            raise UnsupportedError(f"{path}: {n_channels} channels not supported")
        raw = wf.readframes(n_frames)
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if n_channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    clip = AudioClip(data / PCM_SCALE, rate, id=str(path))
    if rate != CANONICAL_RATE:
        clip = resample(clip, CANONICAL_RATE)
    return clip


def write_wav(clip: AudioClip, path) -> None:
    """Write a clip as mono PCM-16 little-endian WAV (saturating encode)."""
    encoded = np.clip(np.round(clip.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(clip.sample_rate_hz)
            wf.writeframes(encoded.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Polyphase resample; output length is round(n_in * target / source)."""
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    source_hz = clip.sample_rate_hz
    if target_hz == source_hz:
        return AudioClip(clip.samples.copy(), source_hz, clip.id)
    g = np.gcd(target_hz, source_hz)
    out = sps.resample_poly(clip.samples, target_hz // g, source_hz // g)
    n_out = (len(clip.samples) * target_hz + source_hz // 2) // source_hz
    if len(out) < n_out:
        out = np.pad(out, (0, n_out - len(out)))
    return AudioClip(out[:n_out], target_hz, clip.id)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate_hz):
    """Triangular HTK-mel filters from 0 Hz to Nyquist on the rFFT grid."""
    nyquist = sample_rate_hz / 2.0
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    bank = np.zeros((n_mels, len(fft_freqs)))
    for i in range(n_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (fft_freqs - left) / max(center - left, 1e-12)
        falling = (right - fft_freqs) / max(right - center, 1e-12)
        bank[i] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def frame_count(n_samples, win, hop):
    """T = floor((N - win) / hop) + 1, or 0 when N < win."""
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def logmel_features(clip: AudioClip, n_mels=DEFAULT_N_MELS, win_ms=DEFAULT_WIN_MS,
                    hop_ms=DEFAULT_HOP_MS) -> FeatureSequence:
    """Hann window -> power spectrum -> mel filterbank -> log(x + 1e-10)."""
    fs = clip.sample_rate_hz
    win = int(round(win_ms * fs / 1000.0))
    hop = int(round(hop_ms * fs / 1000.0))
    n = len(clip.samples)
    n_frames = frame_count(n, win, hop)
    if n_frames == 0:
        raise TooShortError(f"clip of {n} samples is shorter than one {win}-sample window")
    n_fft = 1 << int(np.ceil(np.log2(win)))
    window = sps.get_window("hann", win, fftbins=True)
    bank = mel_filterbank(n_mels, n_fft, fs)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = clip.samples[idx] * window[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = power @ bank.T
    return FeatureSequence(np.log(mel + LOG_FLOOR), hop_ms, win_ms, clip.id)


CMVN_STD_EPS = 1e-3


def normalized_logmel(clip: AudioClip, n_mels=DEFAULT_N_MELS,
                      win_ms=DEFAULT_WIN_MS, hop_ms=DEFAULT_HOP_MS) -> FeatureSequence:
    """Log-mel standardized per band over the clip.

    Channel gain, band limiting, and receive-side AGC shift whole bands by
    platform-dependent offsets; standardizing each band over time removes
    those shifts while leaving per-frame spectral contrasts intact, so
    detector scores stay comparable across platforms. A band a channel
    silenced has near-zero deviation and maps to ~0 rather than to an
    arbitrary floor value.
    """
    feats = logmel_features(clip, n_mels, win_ms, hop_ms)
    mu = feats.frames.mean(axis=0)
    sd = feats.frames.std(axis=0)
    feats.frames = (feats.frames - mu) / (sd + CMVN_STD_EPS)
    return feats


def align_lag(reference: AudioClip, degraded: AudioClip, max_lag_ms=500.0) -> int:
    """Lag (in samples) maximizing normalized cross-correlation on [0, max_lag].

    Positive lag means the degraded clip is delayed relative to the reference.
    """
    fs = reference.sample_rate_hz
    if degraded.sample_rate_hz != fs:
        raise ValueError("sample rates must match")
    ref = reference.samples
    deg = degraded.samples
    min_len = int(0.1 * fs)
    if len(ref) < min_len or len(deg) < min_len:
        raise AlignmentError("clips must be at least 100 ms for alignment")
    max_lag = min(int(round(max_lag_ms * fs / 1000.0)), len(deg) - min_len)
    if max_lag < 0:
        raise AlignmentError("degraded clip too short for any admissible lag")
    full = sps.correlate(deg, ref, mode="full", method="auto")
    num = full[len(ref) - 1 : len(ref) + max_lag]
    cs_ref2 = np.concatenate([[0.0], np.cumsum(ref**2)])
    cs_deg2 = np.concatenate([[0.0], np.cumsum(deg**2)])
    lags = np.arange(max_lag + 1)
    overlap = np.minimum(len(ref), len(deg) - lags)
    ref_energy = cs_ref2[overlap]
    deg_energy = cs_deg2[lags + overlap] - cs_deg2[lags]
    den = np.sqrt(ref_energy * deg_energy)
    valid = den > 0
    if not np.any(valid):
        raise AlignmentError("all-zero signal: lag undefined")
    score = np.full(max_lag + 1, -np.inf)
    score[valid] = num[valid] / den[valid]
    return int(np.argmax(score))


def segmental_snr(reference, degraded, frame_len=256, floor_db=-10.0, ceil_db=60.0):
    """Mean per-frame SNR in dB between equal-length signals.

    Frames where the reference carries no energy are skipped; per-frame values
    are clamped to [floor_db, ceil_db] as usual for segmental SNR.
    """
    ref = np.asarray(reference, dtype=np.float64)
    deg = np.asarray(degraded, dtype=np.float64)
    if ref.shape != deg.shape:
        raise ValueError("signals must have equal length")
    n_frames = len(ref) // frame_len
    if n_frames == 0:
        raise ValueError("signals shorter than one frame")
    ref_f = ref[: n_frames * frame_len].reshape(n_frames, frame_len)
    deg_f = deg[: n_frames * frame_len].reshape(n_frames, frame_len)
    sig = np.sum(ref_f**2, axis=1)
    err = np.sum((ref_f - deg_f) ** 2, axis=1)
    keep = sig > 1e-12
    if not np.any(keep):
        raise ValueError("reference is silent in every frame")
    snr = 10.0 * np.log10(sig[keep] / np.maximum(err[keep], 1e-20))
    return float(np.mean(np.clip(snr, floor_db, ceil_db)))
