"""Monophone GMM/HMM bootstrap: flat start, Baum-Welch, mixture splitting,
LDA, and Viterbi forced alignment.

Every phone has three left-to-right emitting states. State ``j`` of phone
``p`` has global id ``3 * p + j``; these ids are the frame labels handed to
the network. An utterance model is the concatenation of its phones' chains,
entered in the first state and left through the last state's forward arc.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from numba import njit

from .features import splice

log = logging.getLogger(__name__)

STATES_PER_PHONE = 3
VAR_FLOOR = 1e-4
SELF_LOOP_INIT = 0.5
LOG_2PI = float(np.log(2.0 * np.pi))
MODEL_MAGIC = b"HMMS"
MODEL_VERSION = 1


class AlignmentError(ValueError):
    pass


@dataclass
class Gmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray


@dataclass
class HmmSet:
    """All phone HMMs. Per global state: [log p(self), log p(forward)] and a
    diagonal GMM with ``n_components`` mixtures."""

    phones: tuple[str, ...]
    trans: np.ndarray  # (S, 2)
    weights: np.ndarray  # (S, K)
    means: np.ndarray  # (S, K, D)
    variances: np.ndarray  # (S, K, D)

    @property
    def n_states(self):
        return self.trans.shape[0]

    @property
    def n_components(self):
        return self.weights.shape[1]

    @property
    def dim(self):
        return self.means.shape[2]

    def state_id(self, phone_index, position):
        return STATES_PER_PHONE * phone_index + position

    def gmm(self, state):
        return Gmm(self.weights[state], self.means[state], self.variances[state])

    def copy(self):
        return HmmSet(self.phones, self.trans.copy(), self.weights.copy(),
                      self.means.copy(), self.variances.copy())


@dataclass
class Alignment:
    utt_id: str
    labels: np.ndarray
    modality: str = "acoustic"
    score: float = float("nan")


@dataclass
class LdaTransform:
    matrix: np.ndarray  # (out_dim, in_dim)
    input_mean: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def apply(self, x):
        return (np.asarray(x) - self.input_mean) @ self.matrix.T


def chain_states(phone_seq):
    """Global state ids of the utterance HMM built from a phone-index sequence."""
    p = np.asarray(phone_seq, dtype=np.int64)
    return (STATES_PER_PHONE * p[:, None] + np.arange(STATES_PER_PHONE)[None, :]).ravel()


# ---------------------------------------------------------------------------
# emissions


def state_loglik(model, x, states=None):
    """log p(x_t | state) for every frame and the requested states, (T, len(states))."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != model.dim:
        raise ValueError(f"feature dim {x.shape[1]} != model dim {model.dim}")
    if states is None:
        states = np.arange(model.n_states)
    mu = model.means[states]
    var = model.variances[states]
    w = model.weights[states]
    n_s, k, d = mu.shape
    inv = 1.0 / var.reshape(n_s * k, d)
    mu2 = mu.reshape(n_s * k, d)
    const = -0.5 * (d * LOG_2PI + np.sum(np.log(var.reshape(n_s * k, d)), axis=1)
                    + np.sum(mu2 * mu2 * inv, axis=1))
    ll = const[None, :] - 0.5 * ((x * x) @ inv.T) + x @ (mu2 * inv).T
    with np.errstate(divide="ignore"):
        ll = ll.reshape(-1, n_s, k) + np.log(w)[None]
    return _logsumexp(ll, axis=2), ll


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


# ---------------------------------------------------------------------------
# chain recursions


@njit(cache=True)
def _lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True)
def chain_forward_backward(logb, lself, lfwd):
    """Baum-Welch statistics for a left-to-right chain.

    Returns (loglik, gamma (T, S), self-transition counts (S,), forward counts (S,)).
    The final exit through the last state's forward arc is part of the path.
    """
    T, S = logb.shape
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = logb[0, 0]
    for t in range(1, T):
        hi = min(S, t + 1)
        for s in range(hi):
            v = alpha[t - 1, s] + lself[s]
            if s > 0:
                v = _lse(v, alpha[t - 1, s - 1] + lfwd[s - 1])
            alpha[t, s] = v + logb[t, s]
    ll = alpha[T - 1, S - 1] + lfwd[S - 1]
    beta[T - 1, S - 1] = lfwd[S - 1]
    for t in range(T - 2, -1, -1):
        lo = max(0, S - (T - t))
        for s in range(lo, S):
            v = lself[s] + logb[t + 1, s] + beta[t + 1, s]
            if s + 1 < S:
                v = _lse(v, lfwd[s] + logb[t + 1, s + 1] + beta[t + 1, s + 1])
            beta[t, s] = v
    gamma = np.zeros((T, S))
    xi_self = np.zeros(S)
    xi_fwd = np.zeros(S)
    if ll == -np.inf:
        return ll, gamma, xi_self, xi_fwd
    for t in range(T):
        for s in range(S):
            g = alpha[t, s] + beta[t, s] - ll
            if g > -700.0:
                gamma[t, s] = np.exp(g)
    for t in range(T - 1):
        for s in range(S):
            a = alpha[t, s]
            if a == -np.inf:
                continue
            v = a + lself[s] + logb[t + 1, s] + beta[t + 1, s] - ll
            if v > -700.0:
                xi_self[s] += np.exp(v)
            if s + 1 < S:
                v = a + lfwd[s] + logb[t + 1, s + 1] + beta[t + 1, s + 1] - ll
                if v > -700.0:
                    xi_fwd[s] += np.exp(v)
    xi_fwd[S - 1] += gamma[T - 1, S - 1]
    return ll, gamma, xi_self, xi_fwd


@njit(cache=True)
def chain_viterbi(logb, lself, lfwd):
    """Best path through a left-to-right chain; returns (score, chain positions)."""
    T, S = logb.shape
    delta = np.full((T, S), -np.inf)
    back = np.zeros((T, S), dtype=np.int64)
    delta[0, 0] = logb[0, 0]
    for t in range(1, T):
        for s in range(min(S, t + 1)):
            stay = delta[t - 1, s] + lself[s]
            best = stay
            arg = s
            if s > 0:
                move = delta[t - 1, s - 1] + lfwd[s - 1]
                if move > stay:
                    best = move
                    arg = s - 1
            delta[t, s] = best + logb[t, s]
            back[t, s] = arg
    score = delta[T - 1, S - 1] + lfwd[S - 1]
    path = np.zeros(T, dtype=np.int64)
    path[T - 1] = S - 1
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return score, path


def forced_align(model, features, phone_seq, utt_id="", modality="acoustic"):
    """Viterbi alignment of one utterance against its transcript HMM."""
    x = np.asarray(features, dtype=np.float64)
    states = chain_states(phone_seq)
    if x.shape[0] < states.size:
        raise AlignmentError(
            f"{utt_id or 'utterance'}: {x.shape[0]} frames cannot cover {states.size} states")
    ll_u, _ = state_loglik(model, x, np.unique(states))
    logb = ll_u[:, np.searchsorted(np.unique(states), states)]
    score, path = chain_viterbi(logb, model.trans[states, 0], model.trans[states, 1])
    if not np.isfinite(score):
        raise AlignmentError(f"{utt_id or 'utterance'}: no valid alignment path")
    return Alignment(utt_id, states[path], modality, float(score))


def forward_loglik(model, features, phone_seq):
    states = chain_states(phone_seq)
    uniq = np.unique(states)
    ll_u, _ = state_loglik(model, np.asarray(features, dtype=np.float64), uniq)
    logb = ll_u[:, np.searchsorted(uniq, states)]
    return chain_forward_backward(logb, model.trans[states, 0], model.trans[states, 1])[0]


# ---------------------------------------------------------------------------
# training


def _initial_model(phones, dim, n_components=1):
    n = STATES_PER_PHONE * len(phones)
    trans = np.log(np.tile([SELF_LOOP_INIT, 1.0 - SELF_LOOP_INIT], (n, 1)))
    return HmmSet(tuple(phones), trans, np.ones((n, n_components)),
                  np.zeros((n, n_components, dim)), np.ones((n, n_components, dim)))


def _model_from_assignments(phones, feats, assignments):
    """Single-Gaussian states estimated from hard frame-to-state assignments."""
    dim = feats[0].shape[1]
    model = _initial_model(phones, dim)
    n = model.n_states
    occ = np.zeros(n)
    s1 = np.zeros((n, dim))
    s2 = np.zeros((n, dim))
    for x, lab in zip(feats, assignments):
        occ += np.bincount(lab, minlength=n)
        np.add.at(s1, lab, x)
        np.add.at(s2, lab, x * x)
    all_x = np.concatenate(feats)
    g_mean, g_var = all_x.mean(0), np.maximum(all_x.var(0), VAR_FLOOR)
    seen = occ > 0
    mean = np.where(seen[:, None], s1 / np.maximum(occ, 1)[:, None], g_mean)
    var = np.where(seen[:, None], s2 / np.maximum(occ, 1)[:, None] - mean ** 2, g_var)
    model.means[:, 0] = mean
    model.variances[:, 0] = np.maximum(var, VAR_FLOOR)
    return model


def flat_start(features, transcripts, phones):
    """Uniform segmentation of every utterance over its chain states.

    ``transcripts`` are phone-index sequences. Utterances with more states than
    frames are skipped.
    """
    feats, assigns = [], []
    for i, (x, phone_seq) in enumerate(zip(features, transcripts)):
        states = chain_states(phone_seq)
        T = len(x)
        if states.size > T:
            log.warning("flat start: utterance %d has %d states but %d frames; skipped",
                        i, states.size, T)
            continue
        feats.append(np.asarray(x, dtype=np.float64))
        assigns.append(states[(np.arange(T) * states.size) // T])
    if not feats:
        raise AlignmentError("flat start: no usable utterances")
    return _model_from_assignments(phones, feats, assigns)


def model_from_alignments(phones, features, alignments):
    return _model_from_assignments(phones, [np.asarray(x, dtype=np.float64) for x in features],
                                   [np.asarray(a.labels if isinstance(a, Alignment) else a)
                                    for a in alignments])


def em_iterate(model, features, transcripts):
    """One Baum-Welch pass. Returns (updated model, log-likelihood under the input model).

    Accumulation follows dataset order, so results are reproducible.
    """
    n, k, d = model.means.shape
    occ = np.zeros((n, k))
    s1 = np.zeros((n, k, d))
    s2 = np.zeros((n, k, d))
    t_self = np.zeros(n)
    t_fwd = np.zeros(n)
    total = 0.0
    for x, phone_seq in zip(features, transcripts):
        x = np.asarray(x, dtype=np.float64)
        states = chain_states(phone_seq)
        if states.size > x.shape[0]:
            continue
        uniq = np.unique(states)
        ll_u, comp_u = state_loglik(model, x, uniq)
        col = np.searchsorted(uniq, states)
        ll, gamma, xs, xf = chain_forward_backward(
            np.ascontiguousarray(ll_u[:, col]), model.trans[states, 0], model.trans[states, 1])
        if not np.isfinite(ll):
            log.warning("em: utterance with zero likelihood skipped")
            continue
        total += ll
        np.add.at(t_self, states, xs)
        np.add.at(t_fwd, states, xf)
        g_u = np.zeros((x.shape[0], uniq.size))
        np.add.at(g_u.T, col, gamma.T)
        with np.errstate(invalid="ignore"):
            post = np.exp(comp_u - ll_u[:, :, None])
        post = np.nan_to_num(post) * g_u[:, :, None]  # (T, U, K)
        occ[uniq] += post.sum(0)
        s1[uniq] += np.einsum("tuk,td->ukd", post, x)
        s2[uniq] += np.einsum("tuk,td->ukd", post, x * x)

    new = model.copy()
    state_occ = occ.sum(1)
    live = state_occ > 1e-10
    new.weights[live] = occ[live] / state_occ[live, None]
    comp_live = occ > 1e-10
    safe = np.where(comp_live, occ, 1.0)[..., None]
    mean = s1 / safe
    var = s2 / safe - mean ** 2
    new.means = np.where(comp_live[..., None], mean, model.means)
    new.variances = np.where(comp_live[..., None], np.maximum(var, VAR_FLOOR), model.variances)
    tr = t_self + t_fwd
    has_tr = tr > 1e-10
    with np.errstate(divide="ignore"):
        new.trans[has_tr, 0] = np.log(t_self[has_tr] / tr[has_tr])
        new.trans[has_tr, 1] = np.log(t_fwd[has_tr] / tr[has_tr])
    return new, total


def split_gaussians(model, target_components):
    """Grow every state's mixture to ``target_components`` by splitting the
    heaviest component along +-0.1 standard deviations."""
    if target_components < model.n_components:
        raise ValueError("cannot shrink mixtures by splitting")
    m = model.copy()
    while m.n_components < target_components:
        idx = np.argmax(m.weights, axis=1)
        rows = np.arange(m.n_states)
        w = m.weights[rows, idx] / 2.0
        mu = m.means[rows, idx]
        var = m.variances[rows, idx]
        delta = 0.1 * np.sqrt(var)
        weights = m.weights.copy()
        weights[rows, idx] = w
        means = m.means.copy()
        means[rows, idx] = mu + delta
        m = HmmSet(m.phones, m.trans,
                   np.concatenate([weights, w[:, None]], axis=1),
                   np.concatenate([means, (mu - delta)[:, None]], axis=1),
                   np.concatenate([m.variances, var[:, None]], axis=1))
    return m


class LdaStats:
    """Sufficient statistics for LDA, accumulated one utterance at a time."""

    def __init__(self, dim, n_classes):
        self.n = 0
        self.total = np.zeros(dim)
        self.outer = np.zeros((dim, dim))
        self.class_sums = np.zeros((n_classes, dim))
        self.counts = np.zeros(n_classes, dtype=np.int64)

    def add(self, x, labels):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(labels)
        self.n += x.shape[0]
        self.total += x.sum(0)
        self.outer += x.T @ x
        np.add.at(self.class_sums, y, x)
        self.counts += np.bincount(y, minlength=self.counts.size)


def lda_from_stats(stats, out_dim=40):
    """Fisher LDA: top generalized eigenvectors of (between, within + eps*I).

    Scatter matrices are normalized by the sample count, so the projected
    within-class covariance is the identity.
    """
    live = stats.counts > 0
    n_classes = int(live.sum())
    if n_classes < out_dim + 1:
        raise ValueError(f"LDA to {out_dim} dims needs >= {out_dim + 1} classes, got {n_classes}")
    n, d = stats.n, stats.total.size
    mean = stats.total / n
    total = stats.outer / n - np.outer(mean, mean)
    diff = stats.class_sums[live] / stats.counts[live, None] - mean
    between = (diff * stats.counts[live, None]).T @ diff / n
    within = total - between
    within = 0.5 * (within + within.T)
    within += 1e-6 * np.trace(within) / d * np.eye(d)
    vals, vecs = scipy.linalg.eigh(between, within)
    order = np.argsort(vals)[::-1][:out_dim]
    return LdaTransform(matrix=vecs[:, order].T.copy(), input_mean=mean, eigenvalues=vals[order])


def estimate_lda(features, labels, out_dim=40):
    """LDA from a full (N, D) matrix and integer class labels."""
    x = np.asarray(features, dtype=np.float64)
    classes, inv = np.unique(np.asarray(labels), return_inverse=True)
    stats = LdaStats(x.shape[1], classes.size)
    stats.add(x, inv)
    return lda_from_stats(stats, out_dim)


def state_priors(alignments, n_states):
    counts = np.zeros(n_states)
    for a in alignments:
        labels = a.labels if isinstance(a, Alignment) else a
        counts += np.bincount(np.asarray(labels), minlength=n_states)
    if counts.sum() == 0:
        raise ValueError("no aligned frames")
    p = np.maximum(counts / counts.sum(), 1e-8)
    return p / p.sum()


# ---------------------------------------------------------------------------
# bootstrap recipe


@dataclass(frozen=True)
class BootstrapConfig:
    em_iters: int = 5
    lda_iters: int = 5
    lda_dim: int = 40
    lda_context: int = 4
    components: int = 4


@dataclass
class BootstrapResult:
    model: HmmSet
    lda: LdaTransform
    alignments: list[Alignment]
    loglik_history: list[float]


def lda_features(lda, x, context):
    return lda.apply(splice(x, context, context))


def _split_schedule(iters, target):
    """Component count before each of ``iters`` EM passes (doubling early)."""
    sched, k = [], 1
    for _ in range(iters):
        sched.append(k)
        if k < target:
            k = min(2 * k, target)
    if sched and sched[-1] < target:
        sched[-1] = target
    return sched


def bootstrap(features, transcripts, phones, ids=None, cfg=BootstrapConfig(), modality="acoustic"):
    """Flat start -> EM -> align -> LDA on spliced frames -> EM with mixture
    growth -> final alignment. The same recipe serves both modalities."""
    ids = ids if ids is not None else [str(i) for i in range(len(features))]
    history = []
    model = flat_start(features, transcripts, phones)
    for _ in range(cfg.em_iters):
        model, ll = em_iterate(model, features, transcripts)
        history.append(ll)
    first = [forced_align(model, x, t, i, modality) for x, t, i in zip(features, transcripts, ids)]

    stats = LdaStats(features[0].shape[1] * (2 * cfg.lda_context + 1), model.n_states)
    for x, a in zip(features, first):
        stats.add(splice(x, cfg.lda_context, cfg.lda_context), a.labels)
    lda = lda_from_stats(stats, cfg.lda_dim)
    projected = [lda_features(lda, x, cfg.lda_context) for x in features]

    trans = model.trans
    model = model_from_alignments(phones, projected, first)
    model.trans = trans.copy()
    for k in _split_schedule(cfg.lda_iters, cfg.components):
        if k > model.n_components:
            model = split_gaussians(model, k)
        model, ll = em_iterate(model, projected, transcripts)
        history.append(ll)
    final = [forced_align(model, x, t, i, modality) for x, t, i in zip(projected, transcripts, ids)]
    return BootstrapResult(model, lda, final, history)


# ---------------------------------------------------------------------------
# file formats


def model_hash(model):
    h = hashlib.sha256()
    for a in (model.trans, model.weights, model.means, model.variances):
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def write_model(path, model, lda=None):
    """Binary layout: magic, u32 version, u32 n_phones, u32 states/phone,
    u32 n_states, u32 K, u32 D, u32 lda_rows, u32 lda_cols, phone names
    (u16 length + utf-8), then f64 LE: transitions (S x 2 log-probs),
    weights, means, variances, LDA matrix, LDA input mean."""
    n, k, d = model.means.shape
    lr, lc = lda.matrix.shape if lda is not None else (0, 0)
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<8I", MODEL_VERSION, len(model.phones), STATES_PER_PHONE,
                            n, k, d, lr, lc))
        for p in model.phones:
            b = p.encode()
            f.write(struct.pack("<H", len(b)) + b)
        for a in (model.trans, model.weights, model.means, model.variances):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        if lda is not None:
            f.write(np.ascontiguousarray(lda.matrix, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(lda.input_mean, dtype="<f8").tobytes())


def read_model(path):
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an HMM model file")
    version, n_ph, spp, n, k, d, lr, lc = struct.unpack_from("<8I", data, 4)
    if version != MODEL_VERSION or spp != STATES_PER_PHONE:
        raise ValueError(f"{path}: unsupported model version/topology")
    off = 36
    phones = []
    for _ in range(n_ph):
        (ln,) = struct.unpack_from("<H", data, off)
        phones.append(data[off + 2:off + 2 + ln].decode())
        off += 2 + ln

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        return arr

    model = HmmSet(tuple(phones), take((n, 2)), take((n, k)), take((n, k, d)), take((n, k, d)))
    lda = None
    if lr:
        lda = LdaTransform(take((lr, lc)), take((lc,)))
    return model, lda


def write_alignments(path, alignments):
    with open(path, "w") as f:
        for a in alignments:
            f.write(a.utt_id + " " + " ".join(str(int(s)) for s in a.labels) + "\n")


def read_alignments(path, modality="acoustic"):
    out = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            out.append(Alignment(parts[0], np.array([int(s) for s in parts[1:]], dtype=np.int64),
                                 modality))
    return out
