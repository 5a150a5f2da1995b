"""Grammar-constrained Viterbi decoding over DNN state likelihoods.

The search graph is compiled directly from the slot grammar, the lexicon and
the HMM topology. Nodes are either slot boundaries (non-emitting) or HMM
state positions inside a word. An emitting arc consumes one frame and scores
it with the log-likelihood of its state id; epsilon arcs consume nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .features import splice
from .gmmhmm import STATES_PER_PHONE
from .mtlnet import SUPPRESS_EPS, forward, suppress

EPS = -1
NO_WORD = -1
PROB_FLOOR = 1e-12
TEST_MODALITIES = ("AV", "audio-only", "video-only")


class DecodeError(RuntimeError):
    pass


@dataclass
class DecodeGraph:
    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray  # emitting state id, or EPS
    word: np.ndarray  # index into ``words``, or NO_WORD
    weight: np.ndarray  # log probability
    start: int
    finals: np.ndarray
    words: tuple[str, ...]
    n_states: int

    @property
    def n_arcs(self):
        return self.src.size

    def permuted(self, order):
        """Same graph with arcs stored in a different order."""
        order = np.asarray(order)
        return DecodeGraph(self.n_nodes, self.src[order], self.dst[order], self.label[order],
                           self.word[order], self.weight[order], self.start, self.finals,
                           self.words, self.n_states)

    def dump(self):
        lines = []
        for s, d, lab, w, wt in zip(self.src, self.dst, self.label, self.word, self.weight):
            state = "<eps>" if lab == EPS else str(lab)
            word = "<eps>" if w == NO_WORD else self.words[w]
            lines.append(f"{s} {d} {state} {word} {wt:.6f}")
        return "\n".join(lines)


@dataclass
class Hypothesis:
    words: tuple[str, ...]
    score: float
    boundaries: list[tuple[int, int]]


def compile_graph(grammar, lexicon, model=None, transitions=None):
    """Slot-sequential acceptor expanded through pronunciations into 3-state chains.

    ``transitions`` (or ``model.trans``) holds per-state [log self, log forward];
    without either every state uses 0.5/0.5. Entering a word costs -ln|slot|.
    """
    missing = [w for w in grammar.vocabulary if w not in lexicon.entries]
    if missing:
        raise DecodeError(f"grammar words missing from lexicon: {missing}")
    n_states = STATES_PER_PHONE * len(lexicon.phones)
    if transitions is None:
        transitions = model.trans if model is not None else np.log(np.full((n_states, 2), 0.5))
    transitions = np.asarray(transitions, dtype=np.float64)

    words = tuple(grammar.vocabulary)
    word_index = {w: i for i, w in enumerate(words)}
    arcs = []
    n_slots = len(grammar.slots)
    boundary = list(range(n_slots + 1))
    next_node = n_slots + 1
    for slot_i, slot in enumerate(grammar.slots):
        entry = -np.log(len(slot))
        for w in slot:
            states = []
            for p in lexicon.entries[w]:
                pi = lexicon.phones.index(p)
                states.extend(STATES_PER_PHONE * pi + j for j in range(STATES_PER_PHONE))
            nodes = list(range(next_node, next_node + len(states)))
            next_node += len(states)
            arcs.append((boundary[slot_i], nodes[0], states[0], word_index[w], entry))
            for j, (node, st) in enumerate(zip(nodes, states)):
                arcs.append((node, node, st, NO_WORD, transitions[st, 0]))
                if j + 1 < len(states):
                    arcs.append((node, nodes[j + 1], states[j + 1], NO_WORD, transitions[st, 1]))
            arcs.append((nodes[-1], boundary[slot_i + 1], EPS, NO_WORD, transitions[states[-1], 1]))
    a = np.array(arcs, dtype=object)
    return DecodeGraph(
        n_nodes=next_node,
        src=a[:, 0].astype(np.int64), dst=a[:, 1].astype(np.int64),
        label=a[:, 2].astype(np.int64), word=a[:, 3].astype(np.int64),
        weight=a[:, 4].astype(np.float64),
        start=boundary[0], finals=np.array([boundary[-1]]), words=words, n_states=n_states)


def posteriors_to_loglik(posteriors, priors, acoustic_scale=1.0):
    """scale * (log P(s|o) - log P(s)), posteriors floored at 1e-12."""
    p = np.asarray(posteriors, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise DecodeError("posterior rows must sum to 1")
    if np.any(priors <= 0):
        raise DecodeError("priors must be strictly positive")
    return acoustic_scale * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(priors)[None, :])


# ---------------------------------------------------------------------------
# search


def _incoming_table(graph, mask):
    """Padded incoming-arc table for arcs selected by ``mask``.

    Each destination's arcs are ordered by (source node, arc index), so taking
    the first maximum along a row applies the canonical tie-break.
    """
    ids = np.flatnonzero(mask)
    order = np.lexsort((ids, graph.src[ids], graph.dst[ids]))
    ids = ids[order]
    dst = graph.dst[ids]
    nodes, starts, counts = np.unique(dst, return_index=True, return_counts=True)
    width = int(counts.max()) if counts.size else 0
    table = np.full((nodes.size, max(width, 1)), -1, dtype=np.int64)
    for r, (s, c) in enumerate(zip(starts, counts)):
        table[r, :c] = ids[s:s + c]
    return nodes.astype(np.int64), table


def _epsilon_levels(graph):
    """Destination levels so every epsilon source is final before its targets."""
    eps = graph.label == EPS
    src, dst = graph.src[eps], graph.dst[eps]
    depth = np.zeros(graph.n_nodes, dtype=np.int64)
    for _ in range(graph.n_nodes + 1):
        new = depth.copy()
        if src.size:
            np.maximum.at(new, dst, depth[src] + 1)
        if np.array_equal(new, depth):
            break
        depth = new
    else:
        raise DecodeError("epsilon cycle in decode graph")
    return depth


@dataclass
class _Compiled:
    emit_nodes: np.ndarray
    emit_table: np.ndarray
    eps_nodes: np.ndarray
    eps_table: np.ndarray
    is_final: np.ndarray


def _prepare(graph):
    cached = getattr(graph, "_compiled", None)
    if cached is not None:
        return cached
    emit_nodes, emit_table = _incoming_table(graph, graph.label != EPS)
    depth = _epsilon_levels(graph)
    eps_mask = graph.label == EPS
    eps_nodes, eps_table = _incoming_table(graph, eps_mask)
    # process epsilon destinations in increasing depth
    order = np.argsort(depth[eps_nodes], kind="stable")
    is_final = np.zeros(graph.n_nodes, dtype=np.bool_)
    is_final[graph.finals] = True
    c = _Compiled(emit_nodes, emit_table, eps_nodes[order], eps_table[order], is_final)
    graph._compiled = c
    return c


@njit(cache=True)
def _better(score, key_src, key_arc, best, best_src, best_arc):
    if score > best:
        return True
    if score == best and score > -np.inf:
        if key_src < best_src or (key_src == best_src and key_arc < best_arc):
            return True
    return False


@njit(cache=True)
def _viterbi_kernel(loglik, src, label, weight, start, emit_nodes, emit_table,
                    eps_nodes, eps_table, n_nodes, beam):
    T = loglik.shape[0]
    NEG = -np.inf
    prev = np.full(n_nodes, NEG)
    cur = np.full(n_nodes, NEG)
    # back[t, node] = arc used to reach node at frame t (emitting or epsilon)
    back = np.full((T, n_nodes), -1, dtype=np.int64)
    prev[start] = 0.0
    # epsilon closure before the first frame
    init_back = np.full(n_nodes, -1, dtype=np.int64)
    for r in range(eps_nodes.size):
        node = eps_nodes[r]
        best = prev[node]
        bsrc = n_nodes
        barc = -1
        for c in range(eps_table.shape[1]):
            a = eps_table[r, c]
            if a < 0:
                break
            v = prev[src[a]] + weight[a]
            if _better(v, src[a], a, best, bsrc, barc):
                best = v
                bsrc = src[a]
                barc = a
        if barc >= 0:
            prev[node] = best
            init_back[node] = barc
    for t in range(T):
        cur[:] = NEG
        for r in range(emit_nodes.size):
            node = emit_nodes[r]
            best = NEG
            bsrc = n_nodes
            barc = -1
            for c in range(emit_table.shape[1]):
                a = emit_table[r, c]
                if a < 0:
                    break
                s = src[a]
                if prev[s] == NEG:
                    continue
                v = prev[s] + weight[a] + loglik[t, label[a]]
                if _better(v, s, a, best, bsrc, barc):
                    best = v
                    bsrc = s
                    barc = a
            if barc >= 0:
                cur[node] = best
                back[t, node] = barc
        for r in range(eps_nodes.size):
            node = eps_nodes[r]
            best = cur[node]
            bsrc = n_nodes
            barc = -1
            if back[t, node] >= 0:
                bsrc = src[back[t, node]]
                barc = back[t, node]
            for c in range(eps_table.shape[1]):
                a = eps_table[r, c]
                if a < 0:
                    break
                s = src[a]
                if cur[s] == NEG:
                    continue
                v = cur[s] + weight[a]
                if _better(v, s, a, best, bsrc, barc):
                    best = v
                    bsrc = s
                    barc = a
            if barc >= 0:
                cur[node] = best
                back[t, node] = barc
        if beam > 0.0:
            top = NEG
            for n in range(n_nodes):
                if cur[n] > top:
                    top = cur[n]
            for n in range(n_nodes):
                if cur[n] < top - beam:
                    cur[n] = NEG
        tmp = prev
        prev = cur
        cur = tmp
    return prev, back, init_back


def viterbi(graph, loglik, beam=0.0):
    """Exact best path over all T frames (pruned when ``beam`` > 0)."""
    ll = np.ascontiguousarray(loglik, dtype=np.float64)
    if ll.ndim != 2 or ll.shape[1] < graph.n_states:
        raise DecodeError(f"loglik must be T x {graph.n_states}")
    if not np.all(np.isfinite(ll)):
        raise DecodeError("non-finite log-likelihoods")
    c = _prepare(graph)
    final_scores, back, init_back = _viterbi_kernel(
        ll, graph.src, graph.label, graph.weight, graph.start, c.emit_nodes, c.emit_table,
        c.eps_nodes, c.eps_table, graph.n_nodes, float(beam))
    finals = np.sort(graph.finals)
    scores = final_scores[finals]
    if not np.any(np.isfinite(scores)):
        raise DecodeError("no decode path")
    end = int(finals[np.argmax(scores)])
    arcs = _traceback(graph, back, init_back, end)
    words, bounds = [], []
    for t, a in arcs:
        if graph.word[a] != NO_WORD:
            if bounds:
                bounds[-1] = (bounds[-1][0], t)
            words.append(graph.words[graph.word[a]])
            bounds.append((t, ll.shape[0]))
    return Hypothesis(tuple(words), float(scores.max()), bounds)


def _traceback(graph, back, init_back, node):
    """Arcs on the best path as (frame, arc) in time order; epsilon arcs get
    the frame after which they were taken."""
    T = back.shape[0]
    out = []
    t = T - 1
    while t >= 0:
        a = back[t, node]
        if a < 0:
            raise DecodeError("broken traceback")
        out.append((t, a) if graph.label[a] != EPS else (t + 1, a))
        node = int(graph.src[a])
        if graph.label[a] != EPS:
            t -= 1
    while node != graph.start:
        a = init_back[node]
        if a < 0:
            raise DecodeError("broken traceback")
        out.append((0, a))
        node = int(graph.src[a])
    out.reverse()
    return out


def decode_utterance(net, graph, priors, fused, test_modality="AV", acoustic_scale=1.0,
                     eps=SUPPRESS_EPS, beam=0.0):
    """Suppress per ``test_modality``, splice, run head A only, convert, decode."""
    if test_modality == "audio-only":
        fused = suppress(fused, "visual", eps)
    elif test_modality == "video-only":
        fused = suppress(fused, "audio", eps)
    elif test_modality != "AV":
        raise DecodeError(f"unknown test modality {test_modality!r}")
    x = splice(np.asarray(fused)).astype(net.params()[0].dtype, copy=False)
    p_a, _, _ = forward(net, x)
    return viterbi(graph, posteriors_to_loglik(p_a, priors, acoustic_scale), beam)


def write_hypotheses(path, hyps):
    """hyps: iterable of (utt_id, word sequence)."""
    with open(path, "w") as f:
        for utt_id, words in hyps:
            f.write(f"{utt_id}\t{' '.join(words)}\n")


def read_hypotheses(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                utt_id, _, words = line.partition("\t")
                out[utt_id] = tuple(words.split())
    return out
