"""Statistics-pooling embedding network, implemented from scratch in numpy.

Two frame-level affine+ReLU layers (width-1 convolutions, shared across
channels and frames), mean+variance pooling over time (per channel in
"modified" mode, over all channels pooled in "baseline" mode), an embedding
layer whose pre-activation output is the x-vector, and a softmax classifier
over training subjects. Trained with cross-entropy and Adam; gradients are
exact, including the paths through the variance pooling.
"""

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backend import Embedding, XVECTOR
from .errors import ArtifactError, DivergenceError, ValidationError
from .features import FeatureSegment
from .fileio import check_magic, read_array, read_provenance, read_str, write_array, write_provenance, write_str

XVEC_MAGIC = b"XVEC1"
POOL_EPS = 1e-8

BASELINE, MODIFIED = "baseline", "modified"

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")


@dataclass
class XvecNet:
    mode: str
    w1: np.ndarray  # (d, h1)
    b1: np.ndarray
    w2: np.ndarray  # (h1, h2)
    b2: np.ndarray
    w3: np.ndarray  # (pool_dim, e)
    b3: np.ndarray
    w4: np.ndarray  # (e, S)
    b4: np.ndarray
    n_channels: int
    subjects: list

    @property
    def hidden2(self) -> int:
        return self.w2.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.w3.shape[1]

    @property
    def pool_dim(self) -> int:
        return 2 * self.hidden2 * (self.n_channels if self.mode == MODIFIED else 1)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "XvecNet":
        return replace(self, **{name: getattr(self, name).copy() for name in PARAM_NAMES})


def init_net(
    mode: str,
    n_bins: int,
    hidden1: int,
    hidden2: int,
    embed_dim: int,
    subjects,
    n_channels: int,
    seed: int = 0,
) -> XvecNet:
    """He-initialized network; biases start at zero."""
    if mode not in (BASELINE, MODIFIED):
        raise ValidationError(f"unknown pooling mode {mode!r}")
    subjects = list(subjects)
    if len(subjects) < 2:
        raise ValidationError("need at least 2 subjects for classifier training")
    rng = np.random.default_rng(seed)
    pool = 2 * hidden2 * (n_channels if mode == MODIFIED else 1)

    def he(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)

    return XvecNet(
        mode=mode,
        w1=he(n_bins, hidden1),
        b1=np.zeros(hidden1),
        w2=he(hidden1, hidden2),
        b2=np.zeros(hidden2),
        w3=he(pool, embed_dim),
        b3=np.zeros(embed_dim),
        w4=he(embed_dim, len(subjects)),
        b4=np.zeros(len(subjects)),
        n_channels=n_channels,
        subjects=subjects,
    )


def _forward_stack(net: XvecNet, stack: np.ndarray) -> dict:
    """Forward pass of a (B, C, N, d) stack of same-shape segments."""
    b, c, n, d = stack.shape
    if n < 2:
        raise ValidationError("statistics pooling needs at least 2 frames per segment")
    if d != net.w1.shape[0]:
        raise ArtifactError(f"feature dimension {d} does not match network input {net.w1.shape[0]}")
    if net.mode == MODIFIED and c != net.n_channels:
        raise ArtifactError(f"network expects {net.n_channels} channels, got {c}")
    h2 = net.hidden2
    x = stack.reshape(b * c * n, d)
    z1 = x @ net.w1 + net.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ net.w2 + net.b2
    a2 = np.maximum(z2, 0.0)
    if net.mode == MODIFIED:
        frames = a2.reshape(b, c, n, h2)
        means = frames.mean(axis=2)  # (B, C, h2)
        variances = frames.var(axis=2) + POOL_EPS
        pooled = np.concatenate([means.reshape(b, -1), variances.reshape(b, -1)], axis=1)
    else:
        frames = a2.reshape(b, c * n, h2)
        means = frames.mean(axis=1)  # (B, h2)
        variances = frames.var(axis=1) + POOL_EPS
        pooled = np.concatenate([means, variances], axis=1)
    z3 = pooled @ net.w3 + net.b3  # the x-vectors (pre-activation), (B, e)
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ net.w4 + net.b4
    return {
        "shape": (b, c, n),
        "x": x,
        "z1": z1,
        "a1": a1,
        "z2": z2,
        "a2": a2,
        "means": means,
        "pooled": pooled,
        "z3": z3,
        "a3": a3,
        "logits": logits,
    }


def forward(net: XvecNet, feat: FeatureSegment):
    """Returns (logits, embedding); the embedding is the pre-activation
    output of the layer after pooling."""
    cache = _forward_stack(net, feat.features[None])
    return cache["logits"][0], cache["z3"][0]


def extract_xvector(net: XvecNet, feat: FeatureSegment) -> Embedding:
    _, emb = forward(net, feat)
    return Embedding(
        kind=XVECTOR,
        v=emb,
        subject_id=feat.subject_id,
        session_id=feat.session_id,
        task_id=feat.task_id,
        start_sample=feat.start_sample,
    )


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _zero_grads(net: XvecNet) -> dict:
    return {name: np.zeros_like(getattr(net, name)) for name in PARAM_NAMES}


def _group_by_shape(feats, label_indices):
    groups: dict = {}
    for feat, y in zip(feats, label_indices):
        groups.setdefault(feat.features.shape, ([], []))
        groups[feat.features.shape][0].append(feat.features)
        groups[feat.features.shape][1].append(y)
    return groups


def _backward_stack(net: XvecNet, stack, labels, scale, grads):
    """Accumulate gradients of summed cross-entropy (times scale) in place."""
    cache = _forward_stack(net, stack)
    b, c, n = cache["shape"]
    h2 = net.hidden2
    logp = _log_softmax(cache["logits"])
    loss = -float(logp[np.arange(b), labels].sum())

    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits *= scale

    grads["w4"] += cache["a3"].T @ dlogits
    grads["b4"] += dlogits.sum(axis=0)
    da3 = dlogits @ net.w4.T
    dz3 = da3 * (cache["z3"] > 0)
    grads["w3"] += cache["pooled"].T @ dz3
    grads["b3"] += dz3.sum(axis=0)
    dpool = dz3 @ net.w3.T  # (B, pool_dim)

    if net.mode == MODIFIED:
        dmean = dpool[:, : c * h2].reshape(b, c, h2)
        dvar = dpool[:, c * h2 :].reshape(b, c, h2)
        frames = cache["a2"].reshape(b, c, n, h2)
        da2 = (
            dmean[:, :, None, :] / n
            + dvar[:, :, None, :] * 2.0 * (frames - cache["means"][:, :, None, :]) / n
        ).reshape(b * c * n, h2)
    else:
        m = c * n
        frames = cache["a2"].reshape(b, m, h2)
        da2 = (
            dpool[:, None, :h2] / m
            + dpool[:, None, h2:] * 2.0 * (frames - cache["means"][:, None, :]) / m
        ).reshape(b * m, h2)

    dz2 = da2 * (cache["z2"] > 0)
    grads["w2"] += cache["a1"].T @ dz2
    grads["b2"] += dz2.sum(axis=0)
    da1 = dz2 @ net.w2.T
    dz1 = da1 * (cache["z1"] > 0)
    grads["w1"] += cache["x"].T @ dz1
    grads["b1"] += dz1.sum(axis=0)
    return loss


def backward(net: XvecNet, feats, label_indices):
    """Mean cross-entropy over the batch and its exact parameter gradients.

    Segments of equal shape are processed as one stacked pass; mixed shapes
    fall back to per-shape groups.
    """
    feats = list(feats)
    if not feats:
        raise ValidationError("empty batch")
    grads = _zero_grads(net)
    scale = 1.0 / len(feats)
    total_loss = 0.0
    for _, (arrays, labels) in sorted(_group_by_shape(feats, label_indices).items()):
        total_loss += _backward_stack(net, np.stack(arrays), np.asarray(labels), scale, grads)
    return total_loss * scale, grads


def batch_loss(net: XvecNet, feats, label_indices) -> float:
    total = 0.0
    for _, (arrays, labels) in sorted(_group_by_shape(feats, label_indices).items()):
        logp = _log_softmax(_forward_stack(net, np.stack(arrays))["logits"])
        total -= float(logp[np.arange(len(labels)), labels].sum())
    return total / max(len(feats), 1)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("training config needs non-negative rate and positive sizes")


def label_indices_for(net: XvecNet, feats) -> list:
    index = {s: i for i, s in enumerate(net.subjects)}
    try:
        return [index[f.subject_id] for f in feats]
    except KeyError as exc:
        raise ValidationError(f"subject {exc.args[0]!r} not in the network's label set") from exc


def train(net: XvecNet, train_feats, val_feats, cfg: TrainConfig) -> XvecNet:
    """Mini-batch Adam; deterministic given cfg.seed.

    Returns the parameters with the best validation loss (final parameters
    when no validation set is given). Raises DivergenceError if the loss
    turns non-finite.
    """
    train_feats = list(train_feats)
    if len({f.subject_id for f in train_feats}) < 2:
        raise ValidationError("need training segments from at least 2 subjects")
    labels = label_indices_for(net, train_feats)
    val_feats = list(val_feats or [])
    val_labels = label_indices_for(net, val_feats) if val_feats else []

    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    m_state = _zero_grads(net)
    v_state = _zero_grads(net)
    step = 0
    best = net.copy()
    best_val = np.inf
    stale = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_feats))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = backward(net, [train_feats[i] for i in batch], [labels[i] for i in batch])
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            step += 1
            for name in PARAM_NAMES:
                g = grads[name]
                m_state[name] = cfg.beta1 * m_state[name] + (1 - cfg.beta1) * g
                v_state[name] = cfg.beta2 * v_state[name] + (1 - cfg.beta2) * g**2
                m_hat = m_state[name] / (1 - cfg.beta1**step)
                v_hat = v_state[name] / (1 - cfg.beta2**step)
                getattr(net, name)[...] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)

        if val_feats:
            val_loss = batch_loss(net, val_feats, val_labels)
            if not np.isfinite(val_loss):
                raise DivergenceError(epoch)
            if val_loss < best_val:
                best_val = val_loss
                best = net.copy()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    return best
    return best if val_feats else net


# ---------------------------------------------------------------------------
# Model file


def write_xvec(net: XvecNet, path, cfg: TrainConfig | None = None, config_hash: str = "") -> None:
    with open(path, "wb") as f:
        f.write(XVEC_MAGIC)
        f.write(struct.pack("<B", 1 if net.mode == MODIFIED else 0))
        d, h1 = net.w1.shape
        h2 = net.hidden2
        e = net.embed_dim
        s = len(net.subjects)
        f.write(struct.pack("<IIIIII", d, h1, h2, e, s, net.n_channels))
        for name in PARAM_NAMES:
            write_array(f, getattr(net, name), "f8")
        for subject in net.subjects:
            write_str(f, subject)
        prov = {"config_hash": config_hash}
        if cfg is not None:
            prov["train_config"] = vars(cfg)
        write_provenance(f, "XVEC1", **prov)


def read_xvec(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"x-vector model not found: {path}")
    with open(path, "rb") as f:
        check_magic(f, XVEC_MAGIC, str(path))
        (mode_flag,) = struct.unpack("<B", f.read(1))
        d, h1, h2, e, s, c = struct.unpack("<IIIIII", f.read(24))
        mode = MODIFIED if mode_flag else BASELINE
        pool = 2 * h2 * (c if mode == MODIFIED else 1)
        shapes = {
            "w1": (d, h1),
            "b1": (h1,),
            "w2": (h1, h2),
            "b2": (h2,),
            "w3": (pool, e),
            "b3": (e,),
            "w4": (e, s),
            "b4": (s,),
        }
        params = {name: read_array(f, shape, "f8") for name, shape in shapes.items()}
        subjects = [read_str(f) for _ in range(s)]
        prov = read_provenance(f)
    return XvecNet(mode=mode, n_channels=c, subjects=subjects, **params), prov
