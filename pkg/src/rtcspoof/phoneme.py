"""Phoneme-level pooling and consistency losses.

A segmentation maps an utterance's frame axis into ordered, non-overlapping
phone spans. Pooling averages encoder frames within each span; the
consistency losses compare pooled (phoneme-level) or raw (frame-level)
representations between an offline clip and its transmitted twin.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .audio import FeatureSequence
from .errors import AlignmentError, BoundsError, EmptyError, SegmentationError

log = logging.getLogger(__name__)

SILENCE_FLOOR_DB = 40.0
FLUX_FACTOR = 2.0


@dataclass
class PhonemeSegmentation:
    """Ordered (start_frame, end_frame, label) spans; gaps are allowed."""

    utt_id: str
    segments: list

    def __post_init__(self):
        prev_end = 0
        for i, (start, end, label) in enumerate(self.segments):
            if start < 0 or start >= end:
                raise SegmentationError(f"segment {i}: bad span [{start}, {end})")
            if start < prev_end:
                raise SegmentationError(f"segment {i}: overlaps or out of order")
            prev_end = end

    def __len__(self):
        return len(self.segments)


@dataclass
class PhonemeReps:
    """Pooled representations, one row per segment."""

    reps: np.ndarray
    labels: list
    source_id: str

    def __post_init__(self):
        self.reps = np.asarray(self.reps, dtype=np.float64)
        if self.reps.ndim != 2:
            raise ValueError("reps must be a K x d matrix")
        if len(self.labels) != self.reps.shape[0]:
            raise ValueError("one label per pooled row required")
        if not np.all(np.isfinite(self.reps)):
            raise ValueError("non-finite pooled representation")

    @property
    def K(self) -> int:
        return self.reps.shape[0]


def pool_phonemes(features: FeatureSequence, seg: PhonemeSegmentation) -> PhonemeReps:
    """Average the frames of each segment: p_k = mean of h_t over f_k."""
    if len(seg.segments) == 0:
        raise EmptyError("no segments to pool")
    h = features.frames
    rows = []
    labels = []
    for start, end, label in seg.segments:
        if end > features.num_frames:
            raise BoundsError(f"segment [{start}, {end}) exceeds T={features.num_frames}")
        rows.append(np.mean(h[start:end], axis=0))
        labels.append(label)
    return PhonemeReps(np.vstack(rows), labels, seg.utt_id)


def align_segmentations(offline_seg: PhonemeSegmentation, lag_frames: int,
                        online_T: int) -> PhonemeSegmentation:
    """Shift offline spans onto the online frame axis, clipping at its end."""
    if lag_frames < 0:
        raise ValueError("lag_frames must be >= 0")
    kept = []
    dropped = 0
    for start, end, label in offline_seg.segments:
        s, e = start + lag_frames, min(end + lag_frames, online_T)
        if s >= e:
            dropped += 1
            continue
        kept.append((s, e, label))
    if dropped:
        log.info("%s: %d segments fell off the online axis", offline_seg.utt_id, dropped)
    if not kept:
        raise AlignmentError(f"{offline_seg.utt_id}: no segments survive the shift")
    return PhonemeSegmentation(offline_seg.utt_id, kept)


def _frame_energy_db(features: FeatureSequence) -> np.ndarray:
    energy = np.sum(np.exp(features.frames), axis=1)
    return 10.0 * np.log10(energy + 1e-300)


def energy_segmenter(features: FeatureSequence, min_seg_frames: int = 3,
                     utt_id: str = "") -> PhonemeSegmentation:
    """Boundary fallback: change points from spectral flux over active frames.

    A new span opens where flux exceeds FLUX_FACTOR times its running median
    and the open span is at least min_seg_frames long. Frames more than 40 dB
    under the loudest frame are treated as silence and left out of all spans.
    """
    if min_seg_frames < 1:
        raise ValueError("min_seg_frames must be >= 1")
    h = features.frames
    energy_db = _frame_energy_db(features)
    active = energy_db > np.max(energy_db) - SILENCE_FLOOR_DB
    if not np.any(active):
        raise EmptyError("only silence; nothing to segment")
    flux = np.zeros(features.num_frames)
    diffs = np.diff(h, axis=0)
    flux[1:] = np.sum(np.maximum(diffs, 0.0), axis=1)

    segments = []
    start = None
    seen_flux = []
    for t in range(features.num_frames):
        if not active[t]:
            if start is not None and t > start:
                segments.append((start, t))
            start = None
            continue
        if start is None:
            start = t
            seen_flux.append(flux[t])
            continue
        seen_flux.append(flux[t])
        med = float(np.median(seen_flux))
        if flux[t] > FLUX_FACTOR * med and t - start >= min_seg_frames:
            segments.append((start, t))
            start = t
    if start is not None and features.num_frames > start:
        segments.append((start, features.num_frames))
    labeled = [(s, e, f"seg{k}") for k, (s, e) in enumerate(segments)]
    return PhonemeSegmentation(utt_id, labeled)


def pcl_loss(p_a: PhonemeReps, p_b: PhonemeReps) -> float:
    """Mean squared difference of pooled representations; symmetric."""
    ka, kb = p_a.K, p_b.K
    if ka != kb:
        log.warning("%s vs %s: K mismatch %d != %d, truncating",
                    p_a.source_id, p_b.source_id, ka, kb)
    k = min(ka, kb)
    if k == 0:
        raise EmptyError("no pooled segments to compare")
    if p_a.reps.shape[1] != p_b.reps.shape[1]:
        raise ValueError("pooled dimensionality differs")
    diff = p_a.reps[:k] - p_b.reps[:k]
    return float(np.mean(diff**2))


def fcl_loss(f_a: FeatureSequence, f_b: FeatureSequence) -> float:
    """Frame-level variant: element-wise MSE over the overlapping frames."""
    t = min(f_a.num_frames, f_b.num_frames)
    if t == 0:
        raise EmptyError("no overlapping frames")
    if f_a.dim != f_b.dim:
        raise ValueError("frame dimensionality differs")
    diff = f_a.frames[:t] - f_b.frames[:t]
    return float(np.mean(diff**2))


def _unit_matrix(obj) -> np.ndarray:
    if isinstance(obj, PhonemeReps):
        return obj.reps
    if isinstance(obj, FeatureSequence):
        return obj.frames
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D unit matrix")
    return arr


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; rows with zero norm score 0."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = np.sum(a * b, axis=1)
    denom = na * nb
    out = np.zeros(len(dot))
    ok = denom > 0
    out[ok] = dot[ok] / denom[ok]
    return out


def similarity_stats(pairs, level: str = "phoneme"):
    """Distribution of per-pair mean cosine similarity.

    Each pair holds the offline and online units at the requested level
    (pooled phoneme rows or raw frames); rows are truncated to the shorter
    side. Returns (mean, variance, per_pair).
    """
    if level not in ("frame", "phoneme"):
        raise ValueError(f"unknown level {level!r}")
    if not pairs:
        raise EmptyError("no pairs")
    per_pair = []
    for off, on in pairs:
        a = _unit_matrix(off)
        b = _unit_matrix(on)
        k = min(len(a), len(b))
        if k == 0:
            raise EmptyError("pair with no units")
        per_pair.append(float(np.mean(cosine_rows(a[:k], b[:k]))))
    arr = np.asarray(per_pair)
    return float(np.mean(arr)), float(np.var(arr)), per_pair


def write_boundaries(segmentations, path):
    """One line per span: utt_id, start_frame, end_frame, phone_label (TSV)."""
    with open(path, "w", encoding="utf-8") as fh:
        for seg in segmentations:
            for start, end, label in seg.segments:
                fh.write(f"{seg.utt_id}\t{start}\t{end}\t{label}\n")


def read_boundaries(path) -> dict:
    """Parse a boundary file back into {utt_id: PhonemeSegmentation}."""
    spans = {}
    order = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise SegmentationError(f"line {ln}: expected 4 columns")
            utt_id, start, end, label = parts
            if utt_id not in spans:
                spans[utt_id] = []
                order.append(utt_id)
            spans[utt_id].append((int(start), int(end), label))
    return {u: PhonemeSegmentation(u, spans[u]) for u in order}
