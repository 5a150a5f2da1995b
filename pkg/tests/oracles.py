"""Independent brute-force references shared by unit and acceptance tests."""

import itertools
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from mtlavsr import decoder as D
from mtlavsr import synthdata


# ---------------------------------------------------------------------------
# left-to-right chains


def chain_paths(T, S):
    """Every monotone path 0 -> S-1 through a left-to-right chain in T frames."""
    for steps in itertools.product((0, 1), repeat=T - 1):
        if sum(steps) == S - 1:
            yield np.concatenate([[0], np.cumsum(steps)]).astype(int)


def chain_path_score(path, logb, lself, lfwd):
    s = logb[0, path[0]]
    for t in range(1, len(path)):
        s += (lfwd if path[t] != path[t - 1] else lself)[path[t - 1]] + logb[t, path[t]]
    return s + lfwd[path[-1]]


# ---------------------------------------------------------------------------
# decode graphs


def graph_paths(graph, ll):
    """All complete paths through ``graph`` consuming every frame: [(score, words)]."""
    T = ll.shape[0]
    out_arcs = {}
    for a in range(graph.n_arcs):
        out_arcs.setdefault(int(graph.src[a]), []).append(a)
    finals = set(int(f) for f in graph.finals)
    results = []

    def walk(node, t, score, words):
        if t == T and node in finals:
            results.append((score, tuple(words)))
        for a in out_arcs.get(node, []):
            w = list(words)
            if graph.word[a] != D.NO_WORD:
                w.append(graph.words[graph.word[a]])
            if graph.label[a] == D.EPS:
                walk(int(graph.dst[a]), t, score + graph.weight[a], w)
            elif t < T:
                walk(int(graph.dst[a]), t + 1, score + graph.weight[a] + ll[t, graph.label[a]], w)

    walk(graph.start, 0, 0.0, [])
    return results


PHONES = ("a", "b", "c", "d")


def random_task(rng):
    """Grammar/lexicon whose compiled graph has at most 12 emitting states."""
    lex_phones = {p: i for i, p in enumerate(PHONES)}
    while True:
        n_slots = int(rng.integers(1, 4))
        slots, entries = [], {}
        for s in range(n_slots):
            words = []
            for k in range(int(rng.integers(1, 3))):
                name = f"w{s}{k}"
                entries[name] = tuple(rng.choice(PHONES, int(rng.integers(1, 3))))
                words.append(name)
            slots.append(tuple(words))
        n_emit = sum(3 * len(entries[w]) for slot in slots for w in slot)
        if n_emit <= 12:
            break
    g = synthdata.Grammar(tuple(slots))
    lex = synthdata.Lexicon(entries, PHONES, lex_phones)
    p = rng.uniform(0.1, 0.9, 12)
    trans = np.log(np.stack([p, 1 - p], axis=1))
    return g, lex, trans


def graph_forward_score(graph, ll):
    return logsumexp([s for s, _ in graph_paths(graph, ll)])


# ---------------------------------------------------------------------------
# word error rate


def levenshtein(a, b):
    """Plain two-row edit distance with unit costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@lru_cache(maxsize=None)
def alignment_matrix(m, n):
    """Every alignment of an m-word reference with an n-word hypothesis,
    described by its diagonal (match/substitution) pairs: a 0/1 matrix of
    shape (n_alignments, m*n). Deletions and insertions are the rows and
    columns left unpaired, so their order does not change the counts."""
    rows = []
    for k in range(min(m, n) + 1):
        for ri in itertools.combinations(range(m), k):
            for ci in itertools.combinations(range(n), k):
                r = np.zeros(m * n, dtype=np.int16)
                for i, j in zip(ri, ci):
                    r[i * n + j] = 1
                rows.append(r)
    return np.array(rows, dtype=np.int16).reshape(len(rows), m * n)


def equality_patterns(length, max_symbols):
    """Restricted growth strings: every way ``length`` positions can be equal
    or distinct, using at most ``max_symbols`` distinct values."""
    out = []

    def rec(prefix, k):
        if len(prefix) == length:
            out.append(prefix)
            return
        for v in range(min(k + 1, max_symbols)):
            rec(prefix + [v], max(k, v + 1))

    rec([], 0)
    return np.array(out, dtype=np.int16).reshape(len(out), length)


def exhaustive_wer_counts(m, n, patterns):
    """(S, D, I) of the canonical alignment (fewest edits, then fewest
    insertions, then fewest deletions) for every pattern, by scoring all
    alignments."""
    A = alignment_matrix(m, n)
    d = A.sum(1).astype(np.int64)
    ref, hyp = patterns[:, :m], patterns[:, m:]
    eq = (ref[:, :, None] == hyp[:, None, :]).reshape(len(patterns), m * n).astype(np.int16)
    matches = eq @ A.T  # (P, n_alignments)
    cost = (m + n) - d[None, :] - matches
    # ties: fewer insertions (n - d) <=> more diagonal pairs
    key = cost * (m + n + 1) - d[None, :]
    best = np.argmin(key, axis=1)
    dbest = d[best]
    e = matches[np.arange(len(patterns)), best]
    return dbest - e, m - dbest, n - dbest


def check_wer_exhaustive(wer_fn, max_len=5, vocab=10, chunk=20000):
    """Compare ``wer_fn`` against all alignments for every equality pattern of
    (ref, hyp) pairs with 1..max_len reference and 0..max_len hypothesis
    words. Any word-sequence pair over ``vocab`` words has one of these
    patterns, and edit counts depend on nothing else. Returns the number of
    patterns checked; raises AssertionError on the first mismatch."""
    words = [f"w{i}" for i in range(vocab)]
    total = 0
    for m in range(1, max_len + 1):
        for n in range(0, max_len + 1):
            pats = equality_patterns(m + n, vocab)
            for start in range(0, len(pats), chunk):
                block = pats[start:start + chunk]
                S, Dl, I = exhaustive_wer_counts(m, n, block)
                for p, s, dl, i in zip(block, S, Dl, I):
                    r = wer_fn([words[k] for k in p[:m]], [words[k] for k in p[m:]])
                    if (r.substitutions, r.deletions, r.insertions) != (s, dl, i):
                        raise AssertionError(f"pattern {list(p)} (m={m}): got "
                                             f"{(r.substitutions, r.deletions, r.insertions)}, "
                                             f"expected {(s, dl, i)}")
                total += len(block)
    return total


def check_wer_random(wer_fn, n_pairs=10000, vocab=10, min_len=6, max_len=30, seed=0):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab)]
    for _ in range(n_pairs):
        ref = [words[k] for k in rng.integers(0, vocab, int(rng.integers(min_len, max_len + 1)))]
        hyp = [words[k] for k in rng.integers(0, vocab, int(rng.integers(0, max_len + 1)))]
        r = wer_fn(ref, hyp)
        if r.errors != levenshtein(ref, hyp):
            raise AssertionError(f"{ref} / {hyp}: {r.errors} != {levenshtein(ref, hyp)}")
        if r.deletions - r.insertions != len(ref) - len(hyp):
            raise AssertionError("inconsistent deletion/insertion counts")
    return n_pairs


# ---------------------------------------------------------------------------
# acceptance reporting

ACCEPTANCE_LOG = []


class criterion:
    """Context manager: times a criterion and prints one PASS/FAIL line."""

    def __init__(self, number, title, limit_s=None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.detail = ""

    def __enter__(self):
        import time
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        dt = time.perf_counter() - self._t0
        ok = exc_type is None
        if ok and self.limit_s is not None and dt > self.limit_s:
            ok = False
            self.detail = f"{self.detail} runtime {dt:.1f} s exceeds {self.limit_s} s".strip()
            exc = AssertionError(self.detail)
        elif not ok:
            self.detail = f"{self.detail} {exc_type.__name__}: {exc}".strip()
        line = (f"{'PASS' if ok else 'FAIL'} criterion {self.number:2d} {self.title} "
                f"({dt:.1f} s){': ' + self.detail if self.detail else ''}")
        ACCEPTANCE_LOG.append(line)
        print(line, flush=True)
        if ok or exc_type is not None:
            return False
        raise exc
