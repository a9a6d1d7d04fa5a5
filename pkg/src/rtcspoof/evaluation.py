"""Scoring, EER, per-condition breakdowns, and report writers.

EER convention (pinned because small trial counts make it visible): sweep
thresholds over the distinct observed scores, accept bonafide when
score >= threshold, FAR = fraction of fake accepted, FRR = fraction of
bonafide rejected, and report (FAR + FRR) / 2 at the threshold minimizing
|FAR - FRR|, ties broken toward the lower threshold.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .audio import (_hz_to_mel, _mel_to_hz, align_lag, logmel_features,
                    read_wav)
from .errors import (AlignmentError, EmptyError, FormatError,
                     UndefinedMetricError)
from .phoneme import (align_segmentations, energy_segmenter, pool_phonemes,
                      similarity_stats)

log = logging.getLogger(__name__)

BONAFIDE = "bonafide"
FAKE = "fake"
HIST_BINS = 10
# stability analysis compares only bands every built-in platform transmits;
# above the tightest band limit the online side holds the mel floor constant,
# so including those dimensions would measure the floor, not the features
STABILITY_MAX_HZ = 2800.0


@dataclass
class ScoredTrial:
    utt_id: str
    score: float
    label: str
    platform_id: str = "offline"
    noise_id: str = "S01"

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise FormatError(f"{self.utt_id}: non-finite score")
        if self.label not in (BONAFIDE, FAKE):
            raise FormatError(f"{self.utt_id}: bad label {self.label!r}")


def compute_eer(scores, labels=None) -> float:
    """EER of a trial list; accepts (scores, labels) arrays or ScoredTrials."""
    if labels is None:
        trials = list(scores)
        scores = [t.score for t in trials]
        labels = [t.label for t in trials]
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    bona = scores[labels == BONAFIDE]
    fake = scores[labels == FAKE]
    if bona.size == 0 or fake.size == 0:
        raise UndefinedMetricError("need at least one trial of each class")
    thresholds = np.unique(scores)
    fars = np.array([np.mean(fake >= t) for t in thresholds])
    frrs = np.array([np.mean(bona < t) for t in thresholds])
    best = int(np.argmin(np.abs(fars - frrs)))   # first minimum = lowest threshold
    return float((fars[best] + frrs[best]) / 2.0)


@dataclass
class EvalReport:
    overall_eer: float
    offline_eer: float | None
    online_avg_eer: float | None
    per_platform: dict = field(default_factory=dict)
    per_noise: dict = field(default_factory=dict)
    n_trials: dict = field(default_factory=dict)


def _cell_eer(trials):
    try:
        return compute_eer(trials)
    except UndefinedMetricError:
        return None


def breakdown(trials, keys=("platform_id", "noise_id")) -> EvalReport:
    """Pooled EER plus per-platform / per-noise cells; sparse cells are None."""
    trials = list(trials)
    overall = compute_eer(trials)     # single-class input must fail loudly
    n_trials = {"all": len(trials)}
    per_platform = {}
    per_noise = {}
    offline_eer = None
    online_avg = None
    if "platform_id" in keys:
        offline = [t for t in trials if t.platform_id == "offline"]
        if offline:
            offline_eer = _cell_eer(offline)
            n_trials["offline"] = len(offline)
        platforms = sorted({t.platform_id for t in trials} - {"offline"})
        for pid in platforms:
            cell = [t for t in trials if t.platform_id == pid]
            per_platform[pid] = _cell_eer(cell)
            n_trials[pid] = len(cell)
        defined = [v for v in per_platform.values() if v is not None]
        if defined:
            online_avg = float(np.mean(defined))
    if "noise_id" in keys:
        for nid in sorted({t.noise_id for t in trials}):
            cell = [t for t in trials if t.noise_id == nid]
            per_noise[nid] = _cell_eer(cell)
            n_trials[nid] = len(cell)
    return EvalReport(overall_eer=overall, offline_eer=offline_eer,
                      online_avg_eer=online_avg, per_platform=per_platform,
                      per_noise=per_noise, n_trials=n_trials)


def _fmt(value) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def render_report(report: EvalReport) -> str:
    lines = ["cell\teer\tn_trials"]
    lines.append(f"all\t{_fmt(report.overall_eer)}\t{report.n_trials.get('all', 0)}")
    if "offline" in report.n_trials:
        lines.append(f"offline\t{_fmt(report.offline_eer)}\t"
                     f"{report.n_trials['offline']}")
    for pid, eer in report.per_platform.items():
        lines.append(f"{pid}\t{_fmt(eer)}\t{report.n_trials.get(pid, 0)}")
    if report.per_platform:
        n_online = sum(report.n_trials.get(p, 0) for p in report.per_platform)
        lines.append(f"avg\t{_fmt(report.online_avg_eer)}\t{n_online}")
    for nid, eer in report.per_noise.items():
        lines.append(f"{nid}\t{_fmt(eer)}\t{report.n_trials.get(nid, 0)}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_report(report))


@dataclass
class SweepRow:
    lam: float
    regime: str
    mean_eer: float
    min_eer: float
    max_eer: float
    per_seed: tuple = ()


def lambda_sweep(train_fn, lambdas, seeds, regimes=("fcl", "pcl"),
                 workers: int = 1):
    """Trains per (regime, lambda, seed) and aggregates mean and range.

    train_fn(regime, lam, seed) must return a scalar EER. Jobs may run in
    parallel; rows come back sorted by (regime, lambda) so the table is
    stable regardless of scheduling.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [(regime, float(lam), int(seed))
            for regime in regimes for lam in lambdas for seed in seeds]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            eers = list(pool.map(lambda j: train_fn(*j), jobs))
    else:
        eers = [train_fn(*job) for job in jobs]
    by_cell = {}
    for (regime, lam, seed), eer in zip(jobs, eers):
        by_cell.setdefault((regime, lam), []).append((seed, float(eer)))
    rows = []
    for (regime, lam) in sorted(by_cell):
        cell = sorted(by_cell[(regime, lam)])
        values = np.array([v for _, v in cell])
        rows.append(SweepRow(lam=lam, regime=regime,
                             mean_eer=float(values.mean()),
                             min_eer=float(values.min()),
                             max_eer=float(values.max()),
                             per_seed=tuple(values)))
    return rows


def render_sweep(rows) -> str:
    lines = ["lambda\tregime\tmean_eer\tmin_eer\tmax_eer"]
    for r in rows:
        lines.append(f"{r.lam:g}\t{r.regime}\t{r.mean_eer:.6f}\t"
                     f"{r.min_eer:.6f}\t{r.max_eer:.6f}")
    return "\n".join(lines) + "\n"


def write_sweep(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_sweep(rows))


def write_sweep_plotdata(rows, out_dir, prefix="sweep"):
    """One (x, mean, min, max) file per regime, ready for any plotting tool."""
    paths = []
    for regime in sorted({r.regime for r in rows}):
        path = os.path.join(out_dir, f"{prefix}_{regime}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("x\tmean\tmin\tmax\n")
            for r in sorted(rows, key=lambda r: r.lam):
                if r.regime == regime:
                    fh.write(f"{r.lam:g}\t{r.mean_eer:.6f}\t"
                             f"{r.min_eer:.6f}\t{r.max_eer:.6f}\n")
        paths.append(path)
    return paths


@dataclass
class LevelStats:
    level: str
    mean: float
    variance: float
    n_pairs: int
    hist_counts: tuple
    hist_edges: tuple


def _load_features(record, root, cache):
    if record.utt_id in cache:
        return cache[record.utt_id]
    clip = read_wav(os.path.join(root, record.audio_path))
    feats = logmel_features(clip)
    cache[record.utt_id] = (clip, feats)
    return clip, feats


def _band_mask(feats, clip):
    edges = np.linspace(_hz_to_mel(0.0), _hz_to_mel(clip.sample_rate_hz / 2.0),
                        feats.frames.shape[1] + 2)
    return _mel_to_hz(edges[1:-1]) <= STABILITY_MAX_HZ


def stability_report(manifest, root: str = "", min_seg_frames: int = 3,
                     n_bins: int = HIST_BINS):
    """Offline-vs-online feature similarity at frame and phoneme level.

    Returns {"frame": LevelStats, "phoneme": LevelStats}. The populations
    are representation units, not utterances: every aligned speech frame at
    frame level, every pooled segment at phoneme level. Utterances whose lag
    cannot be measured or that yield no usable segments are skipped with a
    log line; no usable pairs at all raises EmptyError.
    """
    offline = {r.utt_id: r for r in manifest.records
               if r.platform_id == "offline"}
    cache = {}
    frame_pairs = []
    phoneme_pairs = []
    skipped = 0
    for rec in manifest.records:
        if rec.platform_id == "offline" or rec.pair_id not in offline:
            continue
        src = offline[rec.pair_id]
        try:
            clip_a, fa = _load_features(src, root, cache)
            clip_b, fb = _load_features(rec, root, cache)
            hop = int(round(fa.frame_hop_ms * clip_a.sample_rate_hz / 1000.0))
            try:
                lag = int(round(align_lag(clip_a, clip_b, max_lag_ms=100.0) / hop))
            except AlignmentError:
                lag = 0
            t = min(fa.num_frames, fb.num_frames - lag)
            if t <= 0:
                skipped += 1
                continue
            seg_a = energy_segmenter(fa, min_seg_frames, utt_id=src.utt_id)
            seg_b = align_segmentations(seg_a, lag, fb.num_frames)
            k = min(len(seg_a), len(seg_b))
            mask = _band_mask(fa, clip_a)
            ma = replace(fa, frames=fa.frames[:, mask])
            mb = replace(fb, frames=fb.frames[:, mask])
            # each population entry is one representation unit: a single
            # aligned frame at frame level, one pooled segment at phoneme
            # level; the silent gaps would only reward trivial matches
            rows_a, rows_b = [], []
            for start, end, _ in seg_a.segments[:k]:
                end = min(end, t)
                if end <= start:
                    continue
                rows_a.append(ma.frames[start:end])
                rows_b.append(mb.frames[start + lag:end + lag])
            if not rows_a:
                skipped += 1
                continue
            pa = pool_phonemes(ma, seg_a).reps[:k]
            pb = pool_phonemes(mb, seg_b).reps[:k]
            for i in range(len(pa)):
                phoneme_pairs.append((pa[i:i + 1], pb[i:i + 1]))
            ra, rb = np.vstack(rows_a), np.vstack(rows_b)
            for i in range(len(ra)):
                frame_pairs.append((ra[i:i + 1], rb[i:i + 1]))
        except (EmptyError, AlignmentError) as exc:
            log.info("stability: skipping %s (%s)", rec.utt_id, exc)
            skipped += 1
    if not frame_pairs or not phoneme_pairs:
        raise EmptyError("no usable offline/online pairs")
    if skipped:
        log.info("stability: skipped %d pairs", skipped)
    out = {}
    for level, pairs in (("frame", frame_pairs), ("phoneme", phoneme_pairs)):
        mean, var, per_pair = similarity_stats(pairs, level=level)
        counts, edges = np.histogram(per_pair, bins=n_bins, range=(-1.0, 1.0))
        out[level] = LevelStats(level=level, mean=mean, variance=var,
                                n_pairs=len(per_pair),
                                hist_counts=tuple(int(c) for c in counts),
                                hist_edges=tuple(float(e) for e in edges))
    return out


def render_stability(report) -> str:
    n_bins = len(next(iter(report.values())).hist_counts)
    header = "level\tmean\tvariance\tn_pairs\t" + \
        "\t".join(f"bin_{i}" for i in range(n_bins))
    lines = [header]
    for level in ("frame", "phoneme"):
        st = report[level]
        bins = "\t".join(str(c) for c in st.hist_counts)
        lines.append(f"{st.level}\t{st.mean:.6f}\t{st.variance:.8f}\t"
                     f"{st.n_pairs}\t{bins}")
    return "\n".join(lines) + "\n"


def write_stability(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_stability(report))


def trials_from_scores(records, scores) -> list:
    """Zip manifest records with model scores into ScoredTrials."""
    return [ScoredTrial(utt_id=r.utt_id, score=float(s), label=r.label,
                        platform_id=r.platform_id, noise_id=r.noise_id)
            for r, s in zip(records, scores)]


def write_scores(trials, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("utt_id\tscore\tlabel\tplatform_id\tnoise_id\n")
        for t in trials:
            fh.write(f"{t.utt_id}\t{t.score:.10f}\t{t.label}\t"
                     f"{t.platform_id}\t{t.noise_id}\n")


def save_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
