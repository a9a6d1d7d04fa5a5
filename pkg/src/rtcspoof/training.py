"""Desk-scale detector and the paired-branch training loop.

The model is deliberately tiny: one projection with ReLU into a hidden frame
space, mean-pooled into an utterance embedding, then a linear classifier.
What matters here is the loss machinery: both branches of a pair share the
same parameter tensors, and the consistency term backpropagates through the
per-segment average pooling.
"""

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .audio import (CANONICAL_RATE, LOG_FLOOR, FeatureSequence, _hz_to_mel,
                    _mel_to_hz, align_lag, logmel_features, read_wav)
from .errors import ConfigError, PairingError, ShapeError
from .evaluation import compute_eer
from .phoneme import align_segmentations, energy_segmenter
from .errors import AlignmentError, EmptyError

log = logging.getLogger(__name__)

REGIMES = ("off", "on", "mix", "pcl", "fcl")
CLASS_INDEX = {"bonafide": 0, "fake": 1}

# Training-time frequency masking: with this probability a sample has all
# mel bands above a random cutoff replaced by the mel floor, which is what
# an unseen channel's band limit does to them. Without it, a model never
# sees floored bands under both labels and treats missing high-band input
# as evidence rather than as absence.
FREQ_MASK_PROB = 0.5
FREQ_MASK_MIN_HZ = 2900.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"RSPF"
CHECKPOINT_VERSION = 1

PARAM_NAMES = ("Wp", "bp", "Wc", "bc")


@dataclass
class DetectorModel:
    """Two affine maps with a ReLU between; shared by both branches."""

    Wp: np.ndarray   # d x m
    bp: np.ndarray   # m
    Wc: np.ndarray   # m x 2
    bc: np.ndarray   # 2

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        if self.Wp.ndim != 2 or self.Wc.ndim != 2 or self.Wc.shape[1] != 2:
            raise ValueError("bad parameter shapes")
        if self.Wp.shape[1] != self.Wc.shape[0] or self.bp.shape != (self.Wp.shape[1],):
            raise ValueError("hidden widths disagree")

    @property
    def d(self) -> int:
        return self.Wp.shape[0]

    @property
    def m(self) -> int:
        return self.Wp.shape[1]

    def params(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.Wp.copy(), self.bp.copy(),
                             self.Wc.copy(), self.bc.copy())


def init_model(d: int, m: int = 32, seed: int = 0) -> DetectorModel:
    rng = np.random.default_rng(seed)
    return DetectorModel(
        Wp=rng.normal(0.0, 0.1, (d, m)),
        bp=np.zeros(m),
        Wc=rng.normal(0.0, 0.1, (m, 2)),
        bc=np.zeros(2))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    lam: float = 0.0
    regime: str = "mix"
    batch_size: int = 8
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("bad optimizer settings")


def paper_config(**overrides) -> TrainConfig:
    """The published hyperparameters; lr there presumes a large front-end."""
    base = dict(lr=1e-6, weight_decay=1e-4, max_epochs=100, patience=10)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainState:
    model: DetectorModel
    adam_m: dict
    adam_v: dict
    step: int = 0
    epoch: int = 0
    best_dev_eer: float = float("inf")
    epochs_since_improvement: int = 0
    best_params: dict | None = None


def forward(model: DetectorModel, features: FeatureSequence):
    """Returns (logits 2-vector, hidden T x m frames)."""
    h = features.frames
    if h.shape[1] != model.d:
        raise ShapeError(f"feature dim {h.shape[1]} != model dim {model.d}")
    hidden = np.maximum(h @ model.Wp + model.bp, 0.0)
    embedding = np.mean(hidden, axis=0)
    logits = embedding @ model.Wc + model.bc
    return logits, hidden


def _softmax(z):
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def cross_entropy(logits, label_index: int) -> float:
    z = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(z))) - z[label_index])


def joint_loss(z_a, z_b, label_index: int, consistency: float, lam: float) -> float:
    """Pair objective: mean of both branch CEs plus weighted consistency."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    ce = 0.5 * (cross_entropy(z_a, label_index) + cross_entropy(z_b, label_index))
    return ce + lam * consistency


@dataclass
class SingleSample:
    features: FeatureSequence
    label_index: int
    utt_id: str = ""


@dataclass
class PairSample:
    features_a: FeatureSequence     # offline branch
    features_b: FeatureSequence     # online branch
    label_index: int
    pool_a: np.ndarray | None = None    # K x T_a averaging matrix
    pool_b: np.ndarray | None = None    # K x T_b
    lag_frames: int = 0
    utt_id: str = ""


def _pooling_matrix(segments, n_frames: int) -> np.ndarray:
    mat = np.zeros((len(segments), n_frames))
    for k, (start, end, _) in enumerate(segments):
        mat[k, start:end] = 1.0 / (end - start)
    return mat


def make_pair_sample(features_a, features_b, label_index, seg_a,
                     lag_frames: int = 0, utt_id: str = "") -> PairSample:
    """Build a PCL-ready pair: online spans are offline spans after the lag."""
    seg_b = align_segmentations(seg_a, lag_frames, features_b.num_frames)
    k = min(len(seg_a), len(seg_b))
    if k < len(seg_a):
        log.info("%s: truncating to %d pooled segments", utt_id, k)
    return PairSample(
        features_a=features_a, features_b=features_b, label_index=label_index,
        pool_a=_pooling_matrix(seg_a.segments[:k], features_a.num_frames),
        pool_b=_pooling_matrix(seg_b.segments[:k], features_b.num_frames),
        lag_frames=lag_frames, utt_id=utt_id)


def _mask_high_bands(sample, rng, centers, floor):
    """Random high-band drop to the floor; pairs share one cutoff draw."""
    if rng.random() >= FREQ_MASK_PROB:
        return sample
    cutoff = rng.uniform(FREQ_MASK_MIN_HZ, centers[-1])
    mask = centers > cutoff
    if not mask.any():
        return sample

    def floored(feats):
        frames = feats.frames.copy()
        frames[:, mask] = floor
        return FeatureSequence(frames, feats.frame_hop_ms,
                               feats.frame_len_ms, feats.source_id)

    if isinstance(sample, SingleSample):
        return SingleSample(floored(sample.features), sample.label_index,
                            sample.utt_id)
    return PairSample(floored(sample.features_a), floored(sample.features_b),
                      sample.label_index, sample.pool_a, sample.pool_b,
                      sample.lag_frames, sample.utt_id)


def _zero_grads(model: DetectorModel) -> dict:
    return {n: np.zeros_like(p) for n, p in model.params().items()}


def _branch_backward(model, h, hidden, d_hidden, grads):
    mask = hidden > 0.0
    d_act = d_hidden * mask
    grads["Wp"] += h.frames.T @ d_act
    grads["bp"] += np.sum(d_act, axis=0)


def _batch_pass(model: DetectorModel, batch, config: TrainConfig):
    """One forward/backward pass; returns (mean loss, gradient dict)."""
    if not batch:
        raise ValueError("empty batch")
    grads = _zero_grads(model)
    total = 0.0
    inv_n = 1.0 / len(batch)
    for sample in batch:
        if isinstance(sample, SingleSample):
            z, hidden = forward(model, sample.features)
            total += cross_entropy(z, sample.label_index)
            dz = (_softmax(z) - np.eye(2)[sample.label_index]) * inv_n
            emb = np.mean(hidden, axis=0)
            grads["Wc"] += np.outer(emb, dz)
            grads["bc"] += dz
            d_hidden = np.tile(model.Wc @ dz / hidden.shape[0],
                               (hidden.shape[0], 1))
            _branch_backward(model, sample.features, hidden, d_hidden, grads)
            continue
        za, hidden_a = forward(model, sample.features_a)
        zb, hidden_b = forward(model, sample.features_b)
        lam = config.lam if config.regime in ("pcl", "fcl") else 0.0
        if config.regime == "pcl":
            pa = sample.pool_a @ hidden_a
            pb = sample.pool_b @ hidden_b
            cons = float(np.mean((pa - pb) ** 2)) if pa.size else 0.0
        elif config.regime == "fcl":
            t = min(hidden_a.shape[0], hidden_b.shape[0] - sample.lag_frames)
            if t <= 0:
                raise EmptyError(f"{sample.utt_id}: no overlapping frames")
            da = hidden_a[:t]
            db = hidden_b[sample.lag_frames:sample.lag_frames + t]
            cons = float(np.mean((da - db) ** 2))
        else:
            cons = 0.0
        total += joint_loss(za, zb, sample.label_index, cons, lam)

        d_hidden_a = np.zeros_like(hidden_a)
        d_hidden_b = np.zeros_like(hidden_b)
        for z, hidden, d_hidden in ((za, hidden_a, d_hidden_a),
                                    (zb, hidden_b, d_hidden_b)):
            dz = 0.5 * inv_n * (_softmax(z) - np.eye(2)[sample.label_index])
            emb = np.mean(hidden, axis=0)
            grads["Wc"] += np.outer(emb, dz)
            grads["bc"] += dz
            d_hidden += model.Wc @ dz / hidden.shape[0]
        if lam > 0.0 and config.regime == "pcl" and sample.pool_a.size:
            dp = (2.0 * lam * inv_n / (pa.size)) * (pa - pb)
            d_hidden_a += sample.pool_a.T @ dp
            d_hidden_b -= sample.pool_b.T @ dp
        elif lam > 0.0 and config.regime == "fcl":
            dd = (2.0 * lam * inv_n / (da.size)) * (da - db)
            d_hidden_a[:t] += dd
            d_hidden_b[sample.lag_frames:sample.lag_frames + t] -= dd
        _branch_backward(model, sample.features_a, hidden_a, d_hidden_a, grads)
        _branch_backward(model, sample.features_b, hidden_b, d_hidden_b, grads)
    return total * inv_n, grads


def batch_loss(model: DetectorModel, batch, config: TrainConfig) -> float:
    loss, _ = _batch_pass(model, batch, config)
    return loss


def gradients(model: DetectorModel, batch, config: TrainConfig) -> dict:
    """Exact analytic gradients of the regime's batch loss."""
    _, grads = _batch_pass(model, batch, config)
    return grads


def adam_step(state: TrainState, grads: dict, config: TrainConfig):
    """One decoupled-weight-decay Adam update, in place."""
    state.step += 1
    t = state.step
    params = state.model.params()
    for name, p in params.items():
        g = grads[name]
        state.adam_m[name] = ADAM_BETA1 * state.adam_m[name] + (1 - ADAM_BETA1) * g
        state.adam_v[name] = ADAM_BETA2 * state.adam_v[name] + (1 - ADAM_BETA2) * g**2
        m_hat = state.adam_m[name] / (1 - ADAM_BETA1**t)
        v_hat = state.adam_v[name] / (1 - ADAM_BETA2**t)
        p -= config.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        p -= config.lr * config.weight_decay * p


def new_state(model: DetectorModel) -> TrainState:
    return TrainState(model=model,
                      adam_m=_zero_grads(model),
                      adam_v=_zero_grads(model))


def features_for(record, root: str = "", cache: dict | None = None) -> FeatureSequence:
    if cache is not None and record.utt_id in cache:
        return cache[record.utt_id]
    clip = read_wav(os.path.join(root, record.audio_path))
    feats = logmel_features(clip)
    feats.source_id = record.utt_id
    if cache is not None:
        cache[record.utt_id] = feats
    return feats


def _measured_lag_frames(clip_a, clip_b, hop_samples: int) -> int:
    try:
        lag = align_lag(clip_a, clip_b, max_lag_ms=100.0)
    except AlignmentError:
        return 0
    return int(round(lag / hop_samples))


def prepare_samples(manifest, config: TrainConfig, root: str = "",
                    cache: dict | None = None, min_seg_frames: int = 3):
    """Resolve manifest records into regime-appropriate training samples."""
    records = manifest.records
    if config.regime == "off":
        chosen = [r for r in records if r.platform_id == "offline"]
        return [SingleSample(features_for(r, root, cache),
                             CLASS_INDEX[r.label], r.utt_id) for r in chosen]
    if config.regime == "on":
        chosen = [r for r in records if r.platform_id != "offline"]
        return [SingleSample(features_for(r, root, cache),
                             CLASS_INDEX[r.label], r.utt_id) for r in chosen]
    if config.regime == "mix":
        return [SingleSample(features_for(r, root, cache),
                             CLASS_INDEX[r.label], r.utt_id) for r in records]
    offline = {r.utt_id: r for r in records if r.platform_id == "offline"}
    pairs = []
    skipped = 0
    for r in records:
        if r.platform_id == "offline":
            continue
        src = offline.get(r.pair_id)
        if src is None:
            skipped += 1
            continue
        fa = features_for(src, root, cache)
        fb = features_for(r, root, cache)
        try:
            seg_a = energy_segmenter(fa, min_seg_frames, utt_id=src.utt_id)
        except EmptyError:
            skipped += 1
            continue
        clip_a = read_wav(os.path.join(root, src.audio_path))
        clip_b = read_wav(os.path.join(root, r.audio_path))
        hop = int(round(fa.frame_hop_ms * clip_a.sample_rate_hz / 1000.0))
        lag_frames = _measured_lag_frames(clip_a, clip_b, hop)
        try:
            pairs.append(make_pair_sample(fa, fb, CLASS_INDEX[r.label], seg_a,
                                          lag_frames, utt_id=r.utt_id))
        except AlignmentError:
            skipped += 1
    if skipped:
        log.info("prepare_samples: skipped %d unpaired/unsegmentable records", skipped)
    if not pairs:
        raise PairingError("no usable pairs for paired training")
    return pairs


def score_record(model: DetectorModel, features: FeatureSequence) -> float:
    """Detection score: bonafide logit minus fake logit."""
    logits, _ = forward(model, features)
    return float(logits[0] - logits[1])


def evaluate_eer(model: DetectorModel, manifest, root: str = "",
                 cache: dict | None = None) -> float:
    scores, labels = [], []
    for r in manifest.records:
        scores.append(score_record(model, features_for(r, root, cache)))
        labels.append(r.label)
    return compute_eer(scores, labels)


def train(train_manifest, dev_manifest, config: TrainConfig, root: str = "",
          cache: dict | None = None):
    """Full training loop; returns (TrainState at best dev EER, history).

    History rows are (epoch, train_loss, dev_eer). The best parameters are
    restored into the returned state's model.
    """
    if cache is None:
        cache = {}
    samples = prepare_samples(train_manifest, config, root, cache)
    if not samples:
        raise ValueError("no training samples for this regime")
    model = init_model(samples[0].features.dim if isinstance(samples[0], SingleSample)
                       else samples[0].features_a.dim,
                       m=config.hidden, seed=config.seed)
    state = new_state(model)
    rng = np.random.default_rng(config.seed)
    edges = np.linspace(_hz_to_mel(0.0), _hz_to_mel(CANONICAL_RATE / 2.0),
                        model.d + 2)
    centers = _mel_to_hz(edges[1:-1])
    floor = float(np.log(LOG_FLOOR))
    history = []
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(samples), config.batch_size):
            batch = [_mask_high_bands(samples[i], rng, centers, floor)
                     for i in order[start:start + config.batch_size]]
            loss, grads = _batch_pass(state.model, batch, config)
            adam_step(state, grads, config)
            epoch_loss += loss
            n_batches += 1
        train_loss = epoch_loss / n_batches
        dev_eer = evaluate_eer(state.model, dev_manifest, root, cache)
        history.append((epoch, train_loss, dev_eer))
        if dev_eer < state.best_dev_eer:
            state.best_dev_eer = dev_eer
            state.epochs_since_improvement = 0
            state.best_params = {n: p.copy() for n, p in state.model.params().items()}
        else:
            if dev_eer == state.best_dev_eer:
                # same selection metric: keep the longer-trained parameters,
                # whose train loss is lower; patience still counts down
                state.best_params = {n: p.copy()
                                     for n, p in state.model.params().items()}
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= config.patience:
                break
    if state.best_params is not None:
        state.model = DetectorModel(**state.best_params)
    return state, history


def export_history(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tdev_eer\n")
        for epoch, loss, eer in history:
            fh.write(f"{epoch}\t{loss:.10f}\t{eer:.10f}\n")


def save_checkpoint(model: DetectorModel, path):
    """Versioned binary: magic, version, then per-parameter shape + LE f64."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(PARAM_NAMES)))
        for name in PARAM_NAMES:
            arr = getattr(model, name)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<H", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> DetectorModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError("not a checkpoint file")
    version, n_params = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    offset = 12
    params = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        params[name] = arr.reshape(shape).astype(np.float64)
    return DetectorModel(**params)
