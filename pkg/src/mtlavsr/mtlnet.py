"""Dual-head feed-forward network trained on fused audio-visual frames.

The trunk is shared; head A predicts acoustic HMM states and head V predicts
visual HMM states. The objective is

    C_mtl = C_main + lambda * C_1

where C_main is the summed cross-entropy of head A over every instance and
C_1 the summed cross-entropy of head V over visual-only instances. With
lambda = 0 head V receives no gradient and the model is the single-task
baseline.

Each labelled frame yields three instances: both modalities present
(``AV``), visual block suppressed (``A``), and audio block suppressed
(``V``). Suppression overwrites a block with a small constant before
splicing, so every context frame of the instance is suppressed as well.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import AUDIO_DIM, CONTEXT, FUSED_DIM, SPLICED_DIM, splice, splice_indices

SUPPRESS_EPS = 1e-5
PROB_FLOOR = 1e-12
ACTIVATIONS = ("sigmoid", "relu", "tanh")
VARIANTS = ("AV", "A", "V")
AV, A_ONLY, V_ONLY = 0, 1, 2
NO_LABEL = -1

NET_MAGIC = b"MTLN"
NET_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.3
    batch_size: int = 256
    initial_lr: float = 0.008
    halve_threshold_pct: float = 0.5
    stop_threshold_pct: float = 0.1
    seed: int = 0
    hidden_layers: int = 4
    hidden_dim: int = 1500
    activation: str = "sigmoid"
    max_epochs: int = 20
    epoch_fraction: float = 1.0
    suppress_eps: float = SUPPRESS_EPS
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.halve_threshold_pct <= 0 or self.stop_threshold_pct <= 0:
            raise ValueError("new-bob thresholds must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 1 <= self.hidden_layers <= 8:
            raise ValueError("hidden_layers must be in 1..8")
        if not 0.0 < self.epoch_fraction <= 1.0:
            raise ValueError("epoch_fraction must be in (0, 1]")


@dataclass
class MtlNetwork:
    trunk: list[tuple[np.ndarray, np.ndarray]]
    head_a: tuple[np.ndarray, np.ndarray]
    head_v: tuple[np.ndarray, np.ndarray]
    activation: str = "sigmoid"

    @property
    def input_dim(self):
        return self.trunk[0][0].shape[0] if self.trunk else self.head_a[0].shape[0]

    @property
    def dims(self):
        d = [self.input_dim] + [w.shape[1] for w, _ in self.trunk]
        return d + [self.head_a[0].shape[1], self.head_v[0].shape[1]]

    def params(self):
        """Flat list of parameter arrays, trunk -> head_a -> head_v."""
        out = [p for layer in self.trunk for p in layer]
        return out + list(self.head_a) + list(self.head_v)

    def copy(self):
        return MtlNetwork([(w.copy(), b.copy()) for w, b in self.trunk],
                          (self.head_a[0].copy(), self.head_a[1].copy()),
                          (self.head_v[0].copy(), self.head_v[1].copy()),
                          self.activation)


@dataclass
class TrainingInstance:
    input: np.ndarray
    variant: str
    acoustic_label: int | None
    visual_label: int | None = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    cv_acc: float


def init_network(dims, activation="sigmoid", seed=0, dtype=np.float64):
    """Glorot-uniform weights, zero biases.

    ``dims`` = [input, hidden..., K_a, K_v].
    """
    if len(dims) < 3 or min(dims) < 1:
        raise ValueError(f"invalid network dims {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)

    def layer(n_in, n_out):
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype)
        return w, np.zeros(n_out, dtype=dtype)

    body = dims[:-2]
    trunk = [layer(a, b) for a, b in zip(body[:-1], body[1:])]
    return MtlNetwork(trunk, layer(body[-1], dims[-2]), layer(body[-1], dims[-1]), activation)


def param_hash(params):
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# instances


def suppress(frame, modality, eps=SUPPRESS_EPS):
    """Overwrite the audio (dims 0-39) or visual (dims 40-139) block with ``eps``."""
    out = np.array(frame, dtype=np.float64, copy=True)
    if modality == "audio":
        out[..., :AUDIO_DIM] = eps
    elif modality == "visual":
        out[..., AUDIO_DIM:FUSED_DIM] = eps
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return out


def make_instances(fused, acoustic_labels, visual_labels, eps=SUPPRESS_EPS):
    """Three training instances per frame of one utterance (see module docstring)."""
    fused = np.asarray(fused, dtype=np.float64)
    a_lab = np.asarray(getattr(acoustic_labels, "labels", acoustic_labels))
    v_lab = np.asarray(getattr(visual_labels, "labels", visual_labels))
    T = fused.shape[0]
    if a_lab.size != T or v_lab.size != T:
        raise ValueError(f"alignment lengths ({a_lab.size}, {v_lab.size}) != frame count {T}")
    av = splice(fused)
    a_only = splice(suppress(fused, "visual", eps))
    v_only = splice(suppress(fused, "audio", eps))
    out = []
    for t in range(T):
        out.append(TrainingInstance(av[t], "AV", int(a_lab[t])))
        out.append(TrainingInstance(a_only[t], "A", int(a_lab[t])))
        out.append(TrainingInstance(v_only[t], "V", int(a_lab[t]), int(v_lab[t])))
    return out


@dataclass
class InstanceSet:
    """Array-backed instances over many utterances.

    Fused frames are stored once; spliced, suppressed inputs are materialized
    per batch. Instance ``i`` is frame ``i // 3`` with variant ``i % 3``.
    """

    frames: np.ndarray  # (N, 140)
    context: np.ndarray  # (N, 11) row indices into frames
    acoustic: np.ndarray  # (N,)
    visual: np.ndarray  # (N,)
    eps: float = SUPPRESS_EPS
    utt_offsets: list[int] = field(default_factory=list)

    @classmethod
    def from_utterances(cls, fused_list, acoustic_list, visual_list, eps=SUPPRESS_EPS,
                        dtype=np.float32):
        frames, ctx, a_all, v_all, offsets = [], [], [], [], []
        base = 0
        for fused, a, v in zip(fused_list, acoustic_list, visual_list):
            a = np.asarray(getattr(a, "labels", a))
            v = np.asarray(getattr(v, "labels", v))
            T = len(fused)
            if a.size != T or v.size != T:
                raise ValueError(f"alignment lengths ({a.size}, {v.size}) != frame count {T}")
            frames.append(np.asarray(fused))
            ctx.append(splice_indices(T, CONTEXT, CONTEXT) + base)
            a_all.append(a)
            v_all.append(v)
            offsets.append(base)
            base += T
        return cls(np.concatenate(frames).astype(dtype), np.concatenate(ctx).astype(np.int64),
                   np.concatenate(a_all).astype(np.int64), np.concatenate(v_all).astype(np.int64),
                   eps, offsets)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def __len__(self):
        return 3 * self.n_frames

    def batch(self, idx):
        """(inputs, variants, acoustic labels, visual labels) for instance ids ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        frame = idx // 3
        variant = idx % 3
        x = self.frames[self.context[frame]]  # (B, 11, 140)
        x[variant == A_ONLY, :, AUDIO_DIM:] = self.eps
        x[variant == V_ONLY, :, :AUDIO_DIM] = self.eps
        vis = np.where(variant == V_ONLY, self.visual[frame], NO_LABEL)
        return x.reshape(len(idx), SPLICED_DIM), variant, self.acoustic[frame], vis

    def instances(self, idx):
        x, var, a, v = self.batch(idx)
        return [TrainingInstance(x[i], VARIANTS[var[i]], int(a[i]),
                                 None if v[i] == NO_LABEL else int(v[i])) for i in range(len(x))]


# ---------------------------------------------------------------------------
# forward / loss / backward


def _act(name, z):
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, h):
    if name == "sigmoid":
        return h * (1.0 - h)
    if name == "tanh":
        return 1.0 - h * h
    return (h > 0).astype(h.dtype)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(net, x):
    """Returns (P_a, P_v, cache). The trunk runs once; both heads always run."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of dim {net.input_dim}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    acts = [x]
    h = x
    for w, b in net.trunk:
        h = _act(net.activation, h @ w + b)
        acts.append(h)
    p_a = softmax(h @ net.head_a[0] + net.head_a[1])
    p_v = softmax(h @ net.head_v[0] + net.head_v[1])
    return p_a, p_v, acts


def _check_labels(variants, acoustic, visual):
    variants = np.asarray(variants)
    acoustic = np.asarray(acoustic)
    visual = np.asarray(visual)
    if np.any(acoustic < 0):
        raise ValueError("every instance needs an acoustic label")
    is_v = variants == V_ONLY
    if np.any(visual[is_v] < 0):
        raise ValueError("visual-only instances need a visual label")
    if np.any(visual[~is_v] >= 0):
        raise ValueError("only visual-only instances may carry a visual label")
    return is_v


def mtl_loss(p_a, p_v, variants, acoustic, visual, lam):
    """(C_mtl, C_main, C_1) summed over the batch."""
    is_v = _check_labels(variants, acoustic, visual)
    rows = np.arange(len(acoustic))
    c_main = -np.sum(np.log(np.maximum(p_a[rows, acoustic], PROB_FLOOR)), dtype=np.float64)
    vr = rows[is_v]
    c_1 = -np.sum(np.log(np.maximum(p_v[vr, np.asarray(visual)[is_v]], PROB_FLOOR)),
                  dtype=np.float64)
    return c_main + lam * c_1, c_main, c_1


def backward(net, p_a, p_v, cache, variants, acoustic, visual, lam, scale=1.0):
    """Gradients of ``scale * C_mtl`` in :meth:`MtlNetwork.params` order."""
    is_v = _check_labels(variants, acoustic, visual)
    rows = np.arange(len(acoustic))
    d_a = p_a.copy()
    d_a[rows, acoustic] -= 1.0
    d_a[p_a[rows, acoustic] < PROB_FLOOR] = 0.0
    d_a *= scale
    d_v = np.zeros_like(p_v)
    if lam != 0.0 and np.any(is_v):
        vr = rows[is_v]
        vl = np.asarray(visual)[is_v]
        d_v[vr] = p_v[vr]
        d_v[vr, vl] -= 1.0
        d_v[vr[p_v[vr, vl] < PROB_FLOOR]] = 0.0
        d_v *= lam * scale
    h = cache[-1]
    grads_head_a = [h.T @ d_a, d_a.sum(0)]
    grads_head_v = [h.T @ d_v, d_v.sum(0)]
    dh = d_a @ net.head_a[0].T + d_v @ net.head_v[0].T
    trunk_grads = []
    for i in range(len(net.trunk) - 1, -1, -1):
        w, _ = net.trunk[i]
        dz = dh * _act_grad(net.activation, cache[i + 1])
        trunk_grads.append([cache[i].T @ dz, dz.sum(0)])
        if i > 0:
            dh = dz @ w.T
    trunk_grads.reverse()
    return [g for pair in trunk_grads for g in pair] + grads_head_a + grads_head_v


# ---------------------------------------------------------------------------
# training


def sgd_epoch(net, instances, cfg, epoch_seed, lr=None):
    """One shuffled pass of minibatch SGD, updating ``net`` in place.

    Each step follows the gradient of the batch's summed C_mtl. Returns
    (net, mean C_mtl per instance).
    """
    lr = cfg.initial_lr if lr is None else lr
    n = len(instances)
    if n == 0:
        raise ValueError("empty instance set")
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(n)
    if cfg.epoch_fraction < 1.0:
        order = order[:max(1, int(round(cfg.epoch_fraction * n)))]
    params = net.params()
    total = 0.0
    for start in range(0, order.size, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        x, variants, a, v = instances.batch(idx)
        x = x.astype(params[0].dtype, copy=False)
        p_a, p_v, cache = forward(net, x)
        total += mtl_loss(p_a, p_v, variants, a, v, cfg.lam)[0]
        if lr == 0.0:
            continue
        grads = backward(net, p_a, p_v, cache, variants, a, v, cfg.lam)
        for p, g in zip(params, grads):
            p -= (lr * g).astype(p.dtype, copy=False)
    return net, total / order.size


def newbob_step(prev_acc, curr_acc, lr, halving_started, halve_threshold=0.5,
                stop_threshold=0.1):
    """(next_lr, halving_started, stop) from two successive CV accuracies in %."""
    improvement = curr_acc - prev_acc
    if halving_started:
        if improvement < stop_threshold:
            return lr, True, True
        return lr / 2.0, True, False
    if improvement < halve_threshold:
        return lr / 2.0, True, False
    return lr, False, False


def predict(net, instances, variant=AV, batch_size=4096):
    """Head-A posteriors for every frame of ``instances`` presented as ``variant``."""
    out = []
    dtype = net.params()[0].dtype
    for start in range(0, instances.n_frames, batch_size):
        frames = np.arange(start, min(start + batch_size, instances.n_frames))
        x = instances.batch(3 * frames + variant)[0].astype(dtype, copy=False)
        out.append(forward(net, x)[0])
    return np.concatenate(out)


def frame_accuracy(net, instances, batch_size=4096):
    """Head-A frame accuracy (%) on the AV variant of every frame."""
    if instances.n_frames == 0:
        raise ValueError("empty cross-validation set")
    p_a = predict(net, instances, AV, batch_size)
    return 100.0 * float(np.mean(np.argmax(p_a, axis=1) == instances.acoustic))


def train(net, train_set, cv_set, cfg, log_path=None, on_epoch=None):
    """New-bob training loop; returns (net, list of EpochRecord)."""
    lr = cfg.initial_lr
    prev = frame_accuracy(net, cv_set)
    halving = False
    records = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            seed = np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]
            net, ce = sgd_epoch(net, train_set, cfg, int(seed), lr)
            acc = frame_accuracy(net, cv_set)
            rec = EpochRecord(epoch, lr, ce, acc)
            records.append(rec)
            if log_file:
                log_file.write(format_epoch(rec) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(rec)
            lr, halving, stop = newbob_step(prev, acc, lr, halving, cfg.halve_threshold_pct,
                                            cfg.stop_threshold_pct)
            prev = acc
            if stop:
                break
    finally:
        if log_file:
            log_file.close()
    return net, records


def format_epoch(rec):
    return f"{rec.epoch}\t{rec.lr:.8g}\t{rec.train_ce:.6f}\t{rec.cv_acc:.4f}"


# ---------------------------------------------------------------------------
# checkpoint


def write_network(path, net):
    """Layout: magic, u32 version, u32 activation index, u32 n_dims, u32 dims...,
    then f64 LE parameters trunk -> head_a -> head_v (each W row-major, then b)."""
    dims = net.dims
    with open(path, "wb") as f:
        f.write(NET_MAGIC)
        f.write(struct.pack("<3I", NET_VERSION, ACTIVATIONS.index(net.activation), len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        for p in net.params():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_network(path, dtype=np.float64):
    data = Path(path).read_bytes()
    if data[:4] != NET_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, act, n = struct.unpack_from("<3I", data, 4)
    if version != NET_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = list(struct.unpack_from(f"<{n}I", data, 16))
    off = 16 + 4 * n

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        return arr.astype(dtype)

    body = dims[:-2]
    trunk = [(take((a, b)), take((b,))) for a, b in zip(body[:-1], body[1:])]
    head_a = (take((body[-1], dims[-2])), take((dims[-2],)))
    head_v = (take((body[-1], dims[-1])), take((dims[-1],)))
    return MtlNetwork(trunk, head_a, head_v, ACTIVATIONS[act])
