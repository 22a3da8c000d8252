"""Toy differentiable speaker-embedding model with cosine scoring.

A per-frame MLP lifts log-mel features to a hidden space, an attentive
pooling layer collapses the frame axis (plain mean, attention-weighted
mean, or attention-weighted mean-and-deviation), and a linear projection
followed by L2 normalisation yields the embedding. The verification
score of a trial is the cosine between test and enrolment embeddings.

Training minimises additive-margin softmax over speaker classes with
Adam on fixed-length random crops. Everything is seeded: the same
corpus, config and seed reproduce bit-identical parameters.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import FeatureConfig, extract_fbank, frame_count
from .metrics import calibrate_threshold
from .seeding import derive_seed

# keeps the variance under the deviation-pooling square root positive
VARIANCE_FLOOR = 1e-8

POOLING_KINDS = ("mean", "sap", "asp")


def attention_logits(frame_features, params) -> ad.Tensor:
    """Per-frame attention logits, shape (..., T, 1).

    One tanh layer over the frame vectors followed by a linear map to a
    single logit. The attentive pooling layers consume these through a
    softmax over the frame axis.
    """
    h = ad.tanh(ad.broadcast_add(ad.matmul(frame_features, params["att_w"]), params["att_b"]))
    return ad.matmul(h, params["att_v"])


def _attention_weights(frame_features, attn_logits):
    f = ad.as_tensor(frame_features)
    logits = ad.as_tensor(attn_logits)
    if f.ndim < 2 or f.shape[-2] == 0:
        raise ValueError("pooling requires at least one frame")
    if logits.shape != f.shape[:-1] + (1,):
        raise ValueError(
            f"attention logits shape {logits.shape} does not match frames {f.shape}"
        )
    return f, ad.softmax(logits, axis=-2)


def pool_sap(frame_features, attn_logits) -> ad.Tensor:
    """Self-attentive pooling: softmax(logits)-weighted mean of frames.

    With all logits equal this is exactly the arithmetic mean.
    """
    f, w = _attention_weights(frame_features, attn_logits)
    return ad.reduce_sum(ad.multiply(f, w), axis=-2)


def pool_asp(frame_features, attn_logits) -> ad.Tensor:
    """Attentive statistics pooling: weighted mean and weighted standard
    deviation of the frames, concatenated. The variance is floored at
    VARIANCE_FLOOR, so a single frame pools to (frame, sqrt(floor))."""
    f, w = _attention_weights(frame_features, attn_logits)
    mu = ad.reduce_sum(ad.multiply(f, w), axis=-2)
    ex2 = ad.reduce_sum(ad.multiply(ad.square(f), w), axis=-2)
    var = ad.subtract(ex2, ad.square(mu))
    sig = ad.sqrt(var, floor=VARIANCE_FLOOR)
    return ad.concat([mu, sig], axis=-1)


def embed_features(frame_features, params, pooling: str) -> ad.Tensor:
    """Frame features (..., T, n_mels) -> unit-norm embeddings (..., d)."""
    if pooling not in POOLING_KINDS:
        raise ValueError(f"unknown pooling kind {pooling!r}")
    h = ad.tanh(ad.broadcast_add(ad.matmul(frame_features, params["frame_w1"]), params["frame_b1"]))
    h = ad.tanh(ad.broadcast_add(ad.matmul(h, params["frame_w2"]), params["frame_b2"]))
    if pooling == "mean":
        logits = ad.Tensor(np.zeros(h.shape[:-1] + (1,)))
    else:
        logits = attention_logits(h, params)
    pooled = pool_asp(h, logits) if pooling == "asp" else pool_sap(h, logits)
    emb = ad.broadcast_add(ad.matmul(pooled, params["proj_w"]), params["proj_b"])
    return ad.l2_normalize(emb, axis=-1)


def _unit_cosine(e1, e2) -> float:
    # dot of unit vectors; clamp shaves the odd 1 + 1e-16 rounding
    return float(min(1.0, max(-1.0, float(np.dot(e1, e2)))))


@dataclass
class AsvModel:
    """Trained model: front-end geometry, pooling kind and parameters."""

    feature_config: FeatureConfig
    pooling: str
    hidden_dim: int
    embedding_dim: int
    params: dict
    n_classes: int | None = None

    def embed_graph(self, waveforms: ad.Tensor) -> ad.Tensor:
        """Embeddings of a (B, n) tensor; differentiable when taped."""
        feats = extract_fbank(waveforms, self.feature_config)
        return embed_features(feats, self.params, self.pooling)

    def embed_batch(self, waveforms) -> np.ndarray:
        w = np.asarray(waveforms, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"embed_batch expects (batch, samples), got {w.shape}")
        return self.embed_graph(ad.Tensor(w)).data

    def embed(self, waveform) -> np.ndarray:
        w = np.asarray(waveform, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"embed expects a 1-D waveform, got {w.shape}")
        return self.embed_batch(w[None, :])[0]

    def score(self, x_test, x_enroll) -> float:
        """Cosine similarity of the two utterances' embeddings."""
        return _unit_cosine(self.embed(x_test), self.embed(x_enroll))


def init_model(
    feature_config=FeatureConfig(),
    n_classes=None,
    pooling="mean",
    hidden_dim=64,
    embedding_dim=8,
    seed=0,
) -> AsvModel:
    """Seeded random initialisation; same arguments, same parameters."""
    if pooling not in POOLING_KINDS:
        raise ValueError(f"unknown pooling kind {pooling!r}")
    rng = np.random.default_rng(derive_seed(seed, "init"))
    nm = feature_config.n_mels
    pooled_dim = 2 * hidden_dim if pooling == "asp" else hidden_dim

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    params = {
        "frame_w1": dense(nm, hidden_dim),
        "frame_b1": np.zeros(hidden_dim),
        "frame_w2": dense(hidden_dim, hidden_dim),
        "frame_b2": np.zeros(hidden_dim),
    }
    if pooling != "mean":
        params["att_w"] = dense(hidden_dim, hidden_dim)
        params["att_b"] = np.zeros(hidden_dim)
        params["att_v"] = dense(hidden_dim, 1)
    params["proj_w"] = dense(pooled_dim, embedding_dim)
    params["proj_b"] = np.zeros(embedding_dim)
    if n_classes is not None:
        params["cls_w"] = rng.normal(0.0, 1.0, size=(embedding_dim, n_classes))
    return AsvModel(feature_config, pooling, hidden_dim, embedding_dim, params, n_classes)


def am_softmax_loss(cosines, true_class, scale=30.0, margin=0.1) -> ad.Tensor:
    """Additive-margin softmax loss.

    ``cosines`` holds per-class cosine similarities, shape (C,) or
    (B, C); the margin is subtracted from the true-class cosine before
    the scaled cross-entropy. Returns the scalar mean loss.
    """
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    if not 0.0 <= margin < 1.0:
        raise ValueError("margin must be in [0, 1)")
    cos = ad.as_tensor(cosines)
    if cos.ndim == 1:
        cos = ad.gather(cos, np.arange(cos.shape[0])[None, :])
    elif cos.ndim != 2:
        raise ValueError(f"cosines must be 1-D or 2-D, got shape {cos.shape}")
    batch, n_classes = cos.shape
    labels = np.atleast_1d(np.asarray(true_class))
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} class labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"class index out of range for {n_classes} classes")
    if np.abs(cos.data).max() > 1.0 + 1e-9:
        raise ValueError("cosines must lie in [-1, 1]")

    onehot = np.zeros((batch, n_classes))
    onehot[np.arange(batch), labels] = 1.0
    z = ad.scalar_multiply(ad.subtract(cos, margin * onehot), scale)
    # stable log-sum-exp with a constant shift (exact gradient either way)
    shift = z.data.max(axis=-1, keepdims=True)
    lse = ad.add(
        ad.log(ad.reduce_sum(ad.exp(ad.subtract(z, shift)), axis=-1), floor=0.0),
        shift[:, 0],
    )
    picked = ad.pick(z, labels)
    return ad.reduce_mean(ad.subtract(lse, picked))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    # multiplicative decay applied every lr_decay_every epochs;
    # lr_decay=0.9 with lr_decay_every=2 is the classic schedule
    lr_decay: float = 1.0
    lr_decay_every: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    scale: float = 30.0
    margin: float = 0.1
    crop_seconds: float = 2.0
    pooling: str = "mean"
    hidden_dim: int = 64
    # tight on purpose: 20 speakers cannot spread out in 8 dimensions,
    # which keeps impostor scores in a realistic, non-degenerate range
    embedding_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1.0:
            raise ValueError("bad learning-rate settings")
        if self.crop_seconds <= 0:
            raise ValueError("crop_seconds must be positive")


def train(
    utterances,
    config: TrainConfig = TrainConfig(),
    feature_config: FeatureConfig = FeatureConfig(),
    dev_trials=None,
    epoch_callback=None,
) -> AsvModel:
    """Train a speaker classifier and return the embedding model.

    ``utterances`` is a list of corpus utterances (anything with
    ``speaker_id``, ``utterance_id`` and ``waveform``). ``dev_trials``,
    if given, is a list of (enroll_id, test_id, is_target) used to track
    dev EER per epoch; ``epoch_callback(epoch, loss, dev_eer)`` receives
    the training curve as it forms.
    """
    speakers = sorted({u.speaker_id for u in utterances})
    per_speaker = {s: 0 for s in speakers}
    for u in utterances:
        per_speaker[u.speaker_id] += 1
    if len(speakers) < 2 or min(per_speaker.values()) < 2:
        raise ValueError(
            "degenerate corpus: need at least 2 speakers with 2 utterances each"
        )
    class_of = {s: i for i, s in enumerate(speakers)}
    labels_all = np.array([class_of[u.speaker_id] for u in utterances])

    crop_len = int(round(config.crop_seconds * feature_config.sample_rate))
    frame_count(crop_len, feature_config.win_length, feature_config.hop_length)
    for u in utterances:
        if len(u.waveform) < crop_len:
            raise ValueError(
                f"utterance {u.utterance_id} shorter than the {crop_len}-sample crop"
            )

    model = init_model(
        feature_config,
        n_classes=len(speakers),
        pooling=config.pooling,
        hidden_dim=config.hidden_dim,
        embedding_dim=config.embedding_dim,
        seed=config.seed,
    )
    params = model.params
    rng = np.random.default_rng(derive_seed(config.seed, "train"))

    # crops of equal-length utterances repeat, so cache their features
    feat_cache = {}

    def crop_features(i, offset):
        key = (i, offset)
        if key not in feat_cache:
            wave = utterances[i].waveform[offset : offset + crop_len]
            feat_cache[key] = extract_fbank(wave, feature_config).data
        return feat_cache[key]

    adam_m = {k: np.zeros_like(v) for k, v in params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    first_epoch_loss = last_epoch_loss = None

    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_every)
        order = rng.permutation(len(utterances))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            offsets = [
                int(rng.integers(0, len(utterances[i].waveform) - crop_len + 1))
                for i in batch
            ]
            feats = np.stack([crop_features(i, o) for i, o in zip(batch, offsets)])

            tape = ad.Tape()
            leaves = {k: tape.leaf(v) for k, v in params.items()}
            emb = embed_features(ad.Tensor(feats), leaves, config.pooling)
            class_dirs = ad.l2_normalize(leaves["cls_w"], axis=0)
            cos = ad.matmul(emb, class_dirs)
            loss = am_softmax_loss(cos, labels_all[batch], config.scale, config.margin)
            grads = tape.backward(loss)

            step += 1
            bc1 = 1.0 - config.adam_beta1 ** step
            bc2 = 1.0 - config.adam_beta2 ** step
            for k in params:
                g = grads[leaves[k].node_id]
                adam_m[k] = config.adam_beta1 * adam_m[k] + (1 - config.adam_beta1) * g
                adam_v[k] = config.adam_beta2 * adam_v[k] + (1 - config.adam_beta2) * g * g
                params[k] = params[k] - lr * (adam_m[k] / bc1) / (
                    np.sqrt(adam_v[k] / bc2) + config.adam_eps
                )
            losses.append(float(loss.data))

        epoch_loss = float(np.mean(losses))
        if first_epoch_loss is None:
            first_epoch_loss = epoch_loss
        last_epoch_loss = epoch_loss
        dev_eer = None
        if dev_trials is not None:
            dev_eer = _dev_eer(model, utterances, dev_trials)
        if epoch_callback is not None:
            epoch_callback(epoch, epoch_loss, dev_eer)

    model.params = params
    return model


def embed_utterances(model: AsvModel, utterances) -> dict:
    """Embed a list of utterances, batching equal lengths together."""
    groups = {}
    for u in utterances:
        groups.setdefault(len(u.waveform), []).append(u)
    out = {}
    for _, group in sorted(groups.items()):
        stack = np.stack([u.waveform for u in group])
        embs = model.embed_batch(stack)
        for u, e in zip(group, embs):
            out[u.utterance_id] = e
    return out


def _dev_eer(model, utterances, dev_trials):
    embs = embed_utterances(model, utterances)
    tgt, ntgt = [], []
    for enroll_id, test_id, is_target in dev_trials:
        s = _unit_cosine(embs[test_id], embs[enroll_id])
        (tgt if is_target else ntgt).append(s)
    return calibrate_threshold(tgt, ntgt).eer


# Checkpoint layout (all integers little-endian):
#   bytes 0..7    magic b"ASVCKPT1"
#   bytes 8..15   uint64 header length H
#   bytes 16..16+H-1  UTF-8 JSON header: feature_config fields, pooling,
#                 hidden_dim, embedding_dim, n_classes, and a tensor
#                 table [{name, shape}] in serialisation order
#   remainder     the tensors' float64 data, C order, concatenated
_CKPT_MAGIC = b"ASVCKPT1"


def save_checkpoint(model: AsvModel, path):
    header = {
        "feature_config": {
            "sample_rate": model.feature_config.sample_rate,
            "win_length": model.feature_config.win_length,
            "hop_length": model.feature_config.hop_length,
            "n_fft": model.feature_config.n_fft,
            "n_mels": model.feature_config.n_mels,
            "log_floor": model.feature_config.log_floor,
        },
        "pooling": model.pooling,
        "hidden_dim": model.hidden_dim,
        "embedding_dim": model.embedding_dim,
        "n_classes": model.n_classes,
        "tensors": [
            {"name": k, "shape": list(v.shape)} for k, v in model.params.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in model.params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> AsvModel:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    fc = FeatureConfig(**header["feature_config"])
    return AsvModel(
        feature_config=fc,
        pooling=header["pooling"],
        hidden_dim=header["hidden_dim"],
        embedding_dim=header["embedding_dim"],
        params=params,
        n_classes=header["n_classes"],
    )
