"""End-to-end simulation of one black-box RTC platform.

The chain mirrors what a conferencing app does to speech: sender-side noise
suppression, echo cancellation and gain control, codec round-trip, bursty
packet loss with concealment, a constant playout delay, and receiver gain.
Every stage is deterministic given (input, profile), so a corpus built
through a profile can be reproduced bit-for-bit from its seed.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import signal as sps

from .audio import AudioClip, CANONICAL_RATE, resample
from .codecs import CODECS, codec_roundtrip
from .errors import ConfigError, TooShortError

STFT_WIN = 512
STFT_HOP = 256

NLMS_EPS = 1e-6
AEC_MU = 0.05              # in-chain NLMS step size
AEC_ECHO_GAIN = 0.1        # echo injected 20 dB under the near-end signal
AGC_GAIN_MIN = 0.1
AGC_GAIN_MAX = 10.0
# Converts the asymmetric-follower envelope of a sine to its RMS; holds for
# any attack:release ratio of 1:10, which both defaults below keep.
AGC_FORM_FACTOR = 1.2381

PLC_MODES = ("zero_fill", "repeat_fade")
PLC_FADE = 0.7

DELAY_MIN_MS = 20.0
DELAY_MAX_MS = 120.0


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (order-sensitive)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class ChannelProfile:
    """Full parameter bundle for one simulated platform."""

    profile_id: str
    ns_strength: float = 0.0          # spectral over-subtraction factor
    ns_floor: float = 0.05            # spectral floor fraction
    aec_taps: int = 0                 # 0 disables echo cancellation
    agc_target_dbfs: float | None = -26.0   # None disables gain control
    codec: str = "mulaw"
    codec_bits: int = 8
    packet_ms: float = 20.0
    p_loss: float = 0.0
    burst_len_mean: float = 1.0
    plc: str = "repeat_fade"
    band_limit_hz: float = 8000.0
    seed: int = 0

    def __post_init__(self):
        nyquist = CANONICAL_RATE / 2
        if self.ns_strength < 0:
            raise ConfigError("ns_strength must be >= 0")
        if not 0.0 <= self.ns_floor <= 1.0:
            raise ConfigError("ns_floor must be in [0, 1]")
        if self.aec_taps < 0:
            raise ConfigError("aec_taps must be >= 0")
        if self.codec not in CODECS:
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.codec == "subband_q" and not 2 <= self.codec_bits <= 8:
            raise ConfigError("subband_q needs codec_bits in 2..8")
        if (self.packet_ms * CANONICAL_RATE) % 1000 != 0:
            raise ConfigError("packet_ms must give an integer sample count at 16 kHz")
        if not 0.0 <= self.p_loss <= 1.0:
            raise ConfigError("p_loss must be in [0, 1]")
        if self.burst_len_mean < 1.0:
            raise ConfigError("burst_len_mean must be >= 1")
        if self.plc not in PLC_MODES:
            raise ConfigError(f"unknown plc mode {self.plc!r}")
        if not 0 < self.band_limit_hz <= nyquist:
            raise ConfigError("band_limit_hz must be in (0, Nyquist]")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    @property
    def packet_samples(self) -> int:
        return int(self.packet_ms * CANONICAL_RATE / 1000)

    def with_seed(self, seed: int) -> "ChannelProfile":
        d = asdict(self)
        d["seed"] = int(seed)
        return ChannelProfile(**d)


@dataclass
class TransmissionLog:
    """Per-packet audit of one transmission plus the realized playout delay."""

    profile_id: str
    sent: np.ndarray
    jitter_ms: np.ndarray
    total_delay_samples: int

    def __post_init__(self):
        self.sent = np.asarray(self.sent, dtype=bool)
        self.jitter_ms = np.asarray(self.jitter_ms, dtype=np.float64)
        if self.sent.shape != self.jitter_ms.shape:
            raise ValueError("sent and jitter_ms must have equal length")

    @property
    def n_packets(self) -> int:
        return len(self.sent)

    @property
    def n_lost(self) -> int:
        return int(np.sum(~self.sent))

    def to_text(self) -> str:
        lines = ["packet_index\tsent\tjitter_ms"]
        for i, (s, j) in enumerate(zip(self.sent, self.jitter_ms)):
            lines.append(f"{i}\t{int(s)}\t{j:.3f}")
        return "\n".join(lines) + "\n"


def profile_to_dict(profile: ChannelProfile) -> dict:
    return asdict(profile)


def profile_from_dict(d: dict) -> ChannelProfile:
    known = set(ChannelProfile.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown profile keys: {sorted(unknown)}")
    return ChannelProfile(**d)


def save_profiles(profiles, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([profile_to_dict(p) for p in profiles], fh, indent=2)
        fh.write("\n")


def load_profiles(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    return [profile_from_dict(d) for d in data]


def noise_suppress(clip: AudioClip, alpha: float, beta: float) -> AudioClip:
    """Spectral subtraction with a per-bin 10th-percentile noise floor.

    |Y| = max(|X| - alpha * noise_floor, beta * |X|), phase reused.
    """
    x = clip.samples
    if len(x) < STFT_WIN:
        raise TooShortError(f"need at least {STFT_WIN} samples for noise suppression")
    _, _, spec = sps.stft(x, fs=clip.sample_rate_hz, window="hann", nperseg=STFT_WIN,
                          noverlap=STFT_WIN - STFT_HOP, boundary="zeros", padded=True)
    mag = np.abs(spec)
    noise_floor = np.percentile(mag, 10, axis=1, keepdims=True)
    new_mag = np.maximum(mag - alpha * noise_floor, beta * mag)
    phase = np.where(mag > 0, spec / np.maximum(mag, 1e-300), 0.0)
    _, rec = sps.istft(new_mag * phase, fs=clip.sample_rate_hz, window="hann",
                       nperseg=STFT_WIN, noverlap=STFT_WIN - STFT_HOP)
    if len(rec) < len(x):
        rec = np.pad(rec, (0, len(x) - len(rec)))
    return clip.replace(rec[: len(x)])


def echo_cancel(mic: AudioClip, far_end: AudioClip, taps: int, mu: float = 0.5) -> AudioClip:
    """NLMS adaptive echo canceller; returns the error signal mic - y_hat."""
    if taps < 1:
        raise ValueError("taps must be >= 1")
    if not 0.0 < mu < 2.0:
        raise ValueError("mu must be in (0, 2)")
    x = mic.samples
    far = far_end.samples
    if len(far) < len(x):
        far = np.pad(far, (0, len(x) - len(far)))
    else:
        far = far[: len(x)]
    lagged = np.zeros((len(x), taps))
    for k in range(taps):
        lagged[k:, k] = far[: len(x) - k]
    energies = np.sum(lagged**2, axis=1)
    w = np.zeros(taps)
    out = np.empty(len(x))
    for n in range(len(x)):
        row = lagged[n]
        err = x[n] - float(w @ row)
        out[n] = err
        w += (mu * err / (energies[n] + NLMS_EPS)) * row
    return mic.replace(out)


def agc(clip: AudioClip, target_dbfs: float, attack_ms: float = 200.0,
        release_ms: float = 1000.0) -> AudioClip:
    """Per-sample gain from an asymmetric one-pole envelope follower on |x|.

    Defaults are slow on purpose: receive-path gain control in RTC stacks
    adapts over hundreds of milliseconds, and the chain applies this twice
    (sender and receiver), so fast constants would pump the envelope.
    """
    if not -40.0 <= target_dbfs <= 0.0:
        raise ValueError("target_dbfs must be in [-40, 0]")
    x = clip.samples
    if len(x) == 0 or np.max(np.abs(x)) == 0.0:
        return clip.replace(x.copy())
    fs = clip.sample_rate_hz
    ca = np.exp(-1000.0 / (attack_ms * fs))
    cr = np.exp(-1000.0 / (release_ms * fs))
    target_rms = 10.0 ** (target_dbfs / 20.0)
    mag = np.abs(x)
    # warm start: a cold (zero) envelope would apply full clamp gain to the
    # first onset, which no deployed gain control does
    env = float(np.mean(mag))
    gain = np.empty(len(x))
    for n in range(len(x)):
        c = ca if mag[n] > env else cr
        env = c * env + (1.0 - c) * mag[n]
        rms_est = env / AGC_FORM_FACTOR
        gain[n] = min(max(target_rms / (rms_est + 1e-12), AGC_GAIN_MIN), AGC_GAIN_MAX)
    return clip.replace(x * gain)


def _stationary_loss_chain(rng, n_packets, p_loss, burst_len_mean):
    """Gilbert-Elliott loss realization; returns sent flags."""
    sent = np.ones(n_packets, dtype=bool)
    if p_loss <= 0.0:
        return sent
    if p_loss >= 1.0:
        return np.zeros(n_packets, dtype=bool)
    p_bg = 1.0 / burst_len_mean
    p_gb = min(1.0, p_bg * p_loss / (1.0 - p_loss))
    bad = rng.random() < p_loss
    for i in range(n_packets):
        sent[i] = not bad
        if bad:
            bad = rng.random() >= p_bg
        else:
            bad = rng.random() < p_gb
    return sent


def replay_loss(profile: ChannelProfile, n_packets: int) -> np.ndarray:
    """Re-run the loss chain from the profile seed; matches the logged flags."""
    _, loss_ss, _ = np.random.SeedSequence(profile.seed).spawn(3)
    rng = np.random.default_rng(loss_ss)
    return _stationary_loss_chain(rng, n_packets, profile.p_loss, profile.burst_len_mean)


def packetize_and_impair(clip: AudioClip, profile: ChannelProfile):
    """Split into packets, drop per Gilbert-Elliott, conceal, prepend delay."""
    x = clip.samples
    psize = profile.packet_samples
    n_packets = int(np.ceil(len(x) / psize)) if len(x) else 0
    delay_ss, loss_ss, jitter_ss = np.random.SeedSequence(profile.seed).spawn(3)
    delay_ms = np.random.default_rng(delay_ss).uniform(DELAY_MIN_MS, DELAY_MAX_MS)
    delay_samples = int(round(delay_ms * clip.sample_rate_hz / 1000.0))
    sent = _stationary_loss_chain(np.random.default_rng(loss_ss), n_packets,
                                  profile.p_loss, profile.burst_len_mean)
    jitter = np.abs(np.random.default_rng(jitter_ss).normal(0.0, 10.0, n_packets))

    out = np.zeros(len(x))
    last_good = None
    consecutive = 0
    for i in range(n_packets):
        lo = i * psize
        hi = min(lo + psize, len(x))
        if sent[i]:
            out[lo:hi] = x[lo:hi]
            last_good = x[lo : lo + psize]
            consecutive = 0
        else:
            consecutive += 1
            if profile.plc == "repeat_fade" and last_good is not None:
                fill = last_good * (PLC_FADE**consecutive)
                out[lo:hi] = fill[: hi - lo]
            # zero_fill (or no history yet) leaves zeros
    delayed = np.concatenate([np.zeros(delay_samples), out])
    log = TransmissionLog(profile.profile_id, sent, jitter, delay_samples)
    return clip.replace(delayed), log


def _synthetic_far_end(n, rng):
    """Babble-like reference: three band-passed noise streams, unit peak."""
    streams = np.zeros(n)
    bands = [(200, 900), (700, 1800), (1500, 3400)]
    for lo, hi in bands:
        sos = sps.butter(4, [lo, hi], btype="band", fs=CANONICAL_RATE, output="sos")
        streams += sps.sosfilt(sos, rng.normal(0.0, 1.0, n))
    peak = np.max(np.abs(streams))
    return streams / peak if peak > 0 else streams


def _synthetic_echo_path(rng, length=128, n_taps=4):
    ir = np.zeros(length)
    positions = rng.choice(np.arange(8, length), size=n_taps, replace=False)
    amps = rng.uniform(0.3, 1.0, n_taps) * (0.6 ** np.arange(n_taps))
    ir[np.sort(positions)] = amps
    return ir


def bandlimit(clip: AudioClip, cutoff_hz: float) -> AudioClip:
    """Zero-phase low-pass; narrowband cutoffs add an 8 kHz resample round-trip."""
    nyquist = clip.sample_rate_hz / 2
    if cutoff_hz >= nyquist * 0.999:
        return clip.replace(clip.samples.copy())
    n = len(clip.samples)
    work = clip
    if cutoff_hz <= 4000.0 and clip.sample_rate_hz == CANONICAL_RATE:
        work = resample(resample(work, 8000), CANONICAL_RATE)
        samples = work.samples
        if len(samples) < n:
            samples = np.pad(samples, (0, n - len(samples)))
        work = clip.replace(samples[:n])
    sos = sps.butter(8, cutoff_hz, btype="low", fs=clip.sample_rate_hz, output="sos")
    return clip.replace(sps.sosfiltfilt(sos, work.samples))


def transmit(clip: AudioClip, profile: ChannelProfile):
    """Run the full sender -> network -> receiver chain for one profile.

    Deterministic in (clip, profile); output length = input length plus the
    logged playout delay.
    """
    n = len(clip.samples)
    stage = clip
    if profile.ns_strength > 0.0:
        stage = noise_suppress(stage, profile.ns_strength, profile.ns_floor)
    if profile.aec_taps > 0:
        rng = np.random.default_rng(np.random.SeedSequence(derive_seed(profile.seed, "aec")))
        far = _synthetic_far_end(n, rng)
        ir = _synthetic_echo_path(rng)
        echo = sps.fftconvolve(far, ir)[:n]
        echo_rms = np.sqrt(np.mean(echo**2))
        sig_rms = stage.rms()
        if echo_rms > 0 and sig_rms > 0:
            echo = echo * (AEC_ECHO_GAIN * sig_rms / echo_rms)
        mic = stage.replace(stage.samples + echo)
        stage = echo_cancel(mic, stage.replace(far), profile.aec_taps, AEC_MU)
    if profile.agc_target_dbfs is not None:
        stage = agc(stage, profile.agc_target_dbfs)
    stage = bandlimit(stage, profile.band_limit_hz)
    stage = codec_roundtrip(stage, profile.codec, profile.codec_bits)
    received, log = packetize_and_impair(stage, profile)
    if profile.agc_target_dbfs is not None:
        received = agc(received, profile.agc_target_dbfs)
    assert len(received.samples) == n + log.total_delay_samples
    return received, log


def builtin_profiles():
    """Seven platform stand-ins ordered from mild to severe degradation.

    Even the mildest applies real enhancement: every deployed stack runs
    noise suppression, so a detector trained on raw audio meets none of
    these unscathed.
    """
    return [
        ChannelProfile("P01", ns_strength=0.3, ns_floor=0.05, aec_taps=0,
                       agc_target_dbfs=None, codec="mulaw", packet_ms=20.0,
                       p_loss=0.0, burst_len_mean=1.0, plc="repeat_fade",
                       band_limit_hz=7500.0, seed=101),
        ChannelProfile("P02", ns_strength=0.8, ns_floor=0.05, aec_taps=0,
                       agc_target_dbfs=-26.0, codec="mulaw", packet_ms=20.0,
                       p_loss=0.005, burst_len_mean=1.2, plc="repeat_fade",
                       band_limit_hz=6500.0, seed=102),
        ChannelProfile("P03", ns_strength=0.8, ns_floor=0.05, aec_taps=16,
                       agc_target_dbfs=None, codec="adpcm_ima", packet_ms=20.0,
                       p_loss=0.01, burst_len_mean=1.5, plc="repeat_fade",
                       band_limit_hz=5500.0, seed=103),
        # shares P03's seed so both face the same far-end draw; the extra
        # loss and narrower band are then what separates them
        ChannelProfile("P04", ns_strength=1.0, ns_floor=0.05, aec_taps=16,
                       agc_target_dbfs=None, codec="adpcm_ima", packet_ms=40.0,
                       p_loss=0.02, burst_len_mean=2.0, plc="zero_fill",
                       band_limit_hz=4500.0, seed=103),
        ChannelProfile("P05", ns_strength=1.0, ns_floor=0.1, aec_taps=32,
                       agc_target_dbfs=-26.0, codec="adpcm_ima", packet_ms=40.0,
                       p_loss=0.025, burst_len_mean=2.0, plc="zero_fill",
                       band_limit_hz=4000.0, seed=105),
        ChannelProfile("P06", ns_strength=1.0, ns_floor=0.1, aec_taps=32,
                       agc_target_dbfs=-26.0, codec="subband_q", codec_bits=5,
                       packet_ms=40.0, p_loss=0.03, burst_len_mean=2.0,
                       plc="zero_fill", band_limit_hz=3400.0, seed=106),
        ChannelProfile("P07", ns_strength=1.0, ns_floor=0.1, aec_taps=32,
                       agc_target_dbfs=-24.0, codec="subband_q", codec_bits=4,
                       packet_ms=40.0, p_loss=0.04, burst_len_mean=2.0,
                       plc="repeat_fade", band_limit_hz=3000.0, seed=108),
    ]
