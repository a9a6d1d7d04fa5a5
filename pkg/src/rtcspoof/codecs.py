"""Speech codec round-trips: G.711 mu-law, IMA ADPCM, and an MDCT subband quantizer.

All three are specified to the bit: identical inputs give identical outputs
on every platform, which keeps channel simulation replayable.
"""

import numpy as np

from .audio import AudioClip, PCM_SCALE
from .errors import ConfigError

CODECS = ("mulaw", "adpcm_ima", "subband_q")

MULAW_BIAS = 0x84
MULAW_CLIP = 32635

# IMA ADPCM step and index adaptation tables (4-bit).
IMA_STEP_TABLE = np.array([
    7, 8, 9, 10, 11, 12, 13, 14, 16, 17, 19, 21, 23, 25, 28, 31, 34, 37,
    41, 45, 50, 55, 60, 66, 73, 80, 88, 97, 107, 118, 130, 143, 157, 173,
    190, 209, 230, 253, 279, 307, 337, 371, 408, 449, 494, 544, 598, 658,
    724, 796, 876, 963, 1060, 1166, 1282, 1411, 1552, 1707, 1878, 2066,
    2272, 2499, 2749, 3024, 3327, 3660, 4026, 4428, 4871, 5358, 5894,
    6484, 7132, 7845, 8630, 9493, 10442, 11487, 12635, 13899, 15289,
    16818, 18500, 20350, 22385, 24623, 27086, 29794, 32767,
], dtype=np.int64)
IMA_INDEX_TABLE = np.array([-1, -1, -1, -1, 2, 4, 6, 8], dtype=np.int64)

MDCT_FRAME = 512
MDCT_HOP = MDCT_FRAME // 2


def float_to_pcm16(samples):
    """Saturating 16-bit quantization, the same rule used when writing WAVs."""
    return np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767).astype(np.int64)


def pcm16_to_float(pcm):
    return np.asarray(pcm, dtype=np.float64) / PCM_SCALE


def mulaw_encode(pcm16):
    """G.711 mu-law (mu=255): int16 samples to 8-bit codes."""
    x = np.asarray(pcm16, dtype=np.int64)
    sign = np.where(x < 0, 0x80, 0x00)
    mag = np.minimum(np.abs(x), MULAW_CLIP) + MULAW_BIAS
    exponent = np.floor(np.log2(mag)).astype(np.int64) - 7
    mantissa = (mag >> (exponent + 3)) & 0x0F
    return (~(sign | (exponent << 4) | mantissa)) & 0xFF


def mulaw_decode(codes):
    """8-bit mu-law codes back to int16 samples."""
    u = (~np.asarray(codes, dtype=np.int64)) & 0xFF
    sign = u & 0x80
    exponent = (u >> 4) & 0x07
    mantissa = u & 0x0F
    mag = (((mantissa << 3) + MULAW_BIAS) << exponent) - MULAW_BIAS
    return np.where(sign > 0, -mag, mag)


def ima_adpcm_encode(pcm16):
    """IMA ADPCM 4-bit encode; predictor and step index start at zero."""
    x = np.asarray(pcm16, dtype=np.int64)
    nibbles = np.zeros(len(x), dtype=np.int64)
    predictor = 0
    index = 0
    for i in range(len(x)):
        step = int(IMA_STEP_TABLE[index])
        diff = int(x[i]) - predictor
        nibble = 0
        if diff < 0:
            nibble = 8
            diff = -diff
        if diff >= step:
            nibble |= 4
            diff -= step
        if diff >= step >> 1:
            nibble |= 2
            diff -= step >> 1
        if diff >= step >> 2:
            nibble |= 1
        delta = step >> 3
        if nibble & 4:
            delta += step
        if nibble & 2:
            delta += step >> 1
        if nibble & 1:
            delta += step >> 2
        predictor = predictor - delta if nibble & 8 else predictor + delta
        predictor = max(-32768, min(32767, predictor))
        index = max(0, min(88, index + int(IMA_INDEX_TABLE[nibble & 7])))
        nibbles[i] = nibble
    return nibbles


def ima_adpcm_decode(nibbles):
    """Decode 4-bit IMA ADPCM nibbles; mirrors the encoder's reconstruction."""
    out = np.zeros(len(nibbles), dtype=np.int64)
    predictor = 0
    index = 0
    for i, nibble in enumerate(np.asarray(nibbles, dtype=np.int64)):
        step = int(IMA_STEP_TABLE[index])
        delta = step >> 3
        if nibble & 4:
            delta += step
        if nibble & 2:
            delta += step >> 1
        if nibble & 1:
            delta += step >> 2
        predictor = predictor - delta if nibble & 8 else predictor + delta
        predictor = max(-32768, min(32767, predictor))
        index = max(0, min(88, index + int(IMA_INDEX_TABLE[int(nibble) & 7])))
        out[i] = predictor
    return out


def _mdct_basis():
    n = np.arange(MDCT_FRAME)
    k = np.arange(MDCT_HOP)
    window = np.sin(np.pi * (n + 0.5) / MDCT_FRAME)
    phase = np.pi / MDCT_HOP * (n[None, :] + 0.5 + MDCT_HOP / 2.0) * (k[:, None] + 0.5)
    return window, np.cos(phase)


def subband_quantize_roundtrip(samples, bits):
    """MDCT analysis, uniform per-frame scalar quantization, TDAC synthesis."""
    if not 2 <= bits <= 8:
        raise ConfigError(f"subband_q bits must be in 2..8, got {bits}")
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    window, basis = _mdct_basis()
    n_frames = int(np.ceil(n / MDCT_HOP)) + 1
    padded_len = (n_frames - 1) * MDCT_HOP + MDCT_FRAME
    padded = np.zeros(padded_len)
    padded[MDCT_HOP : MDCT_HOP + n] = x
    levels = (1 << (bits - 1)) - 1
    out = np.zeros(padded_len)
    for f in range(n_frames):
        start = f * MDCT_HOP
        frame = padded[start : start + MDCT_FRAME]
        coeffs = basis @ (window * frame)
        scale = np.max(np.abs(coeffs))
        if scale > 0:
            q = np.clip(np.round(coeffs / scale * levels), -levels, levels)
            coeffs = q * scale / levels
        recon = (2.0 / MDCT_HOP) * window * (basis.T @ coeffs)
        out[start : start + MDCT_FRAME] += recon
    return out[MDCT_HOP : MDCT_HOP + n]


def codec_roundtrip(clip: AudioClip, codec: str, bits: int = 8) -> AudioClip:
    """Encode/decode a clip through one of the supported codecs."""
    if codec == "mulaw":
        decoded = pcm16_to_float(mulaw_decode(mulaw_encode(float_to_pcm16(clip.samples))))
    elif codec == "adpcm_ima":
        decoded = pcm16_to_float(ima_adpcm_decode(ima_adpcm_encode(float_to_pcm16(clip.samples))))
    elif codec == "subband_q":
        decoded = subband_quantize_roundtrip(clip.samples, bits)
    else:
        raise ConfigError(f"unknown codec {codec!r}; expected one of {CODECS}")
    return clip.replace(decoded)
