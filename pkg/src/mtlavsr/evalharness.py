"""Scoring, the noise x modality x model experiment grid, and trend rules."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import decoder, gmmhmm, mtlnet, pipeline

log = logging.getLogger(__name__)

RESULTS_HEADER = ["snr", "video", "model", "wer_pct", "subs", "dels", "ins", "ref_len"]
RESULTS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer_pct(self):
        return 100.0 * self.errors / self.ref_len

    def __add__(self, other):
        return WerResult(self.substitutions + other.substitutions,
                         self.deletions + other.deletions,
                         self.insertions + other.insertions,
                         self.ref_len + other.ref_len)


def wer(ref, hyp):
    """Word-level edit alignment with unit costs.

    Among minimum-cost alignments the one with fewest insertions, then fewest
    deletions, is reported.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("empty reference")
    n, m = len(ref), len(hyp)
    # cost tuples (edits, insertions, deletions) compared lexicographically
    prev = [(j, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i)] + [None] * m
        for j in range(1, m + 1):
            e, ins, dl = prev[j - 1]
            diag = (e, ins, dl) if ref[i - 1] == hyp[j - 1] else (e + 1, ins, dl)
            e, ins, dl = prev[j]
            up = (e + 1, ins, dl + 1)
            e, ins, dl = cur[j - 1]
            left = (e + 1, ins + 1, dl)
            cur[j] = min(diag, up, left)
        prev = cur
    edits, ins, dels = prev[m]
    return WerResult(edits - ins - dels, dels, ins, n)


def relative_improvement(baseline_wer, new_wer):
    if baseline_wer <= 0:
        raise ValueError("baseline WER must be positive")
    return 100.0 * (baseline_wer - new_wer) / baseline_wer


# ---------------------------------------------------------------------------
# grid and results


@dataclass(frozen=True)
class ExperimentGrid:
    snrs: tuple = (-3, 0, 10, "clean")
    modalities: tuple = ("audio-only", "AV", "video-only")
    models: tuple = (("mtl_0.1", 0.1), ("mtl_0.3", 0.3), ("stl", 0.0))

    def rows(self):
        out = []
        for snr in self.snrs:
            if "audio-only" in self.modalities:
                out.append((pipeline.snr_label(snr), "OFF"))
            if "AV" in self.modalities:
                out.append((pipeline.snr_label(snr), "ON"))
        if "video-only" in self.modalities:
            out.append(("OFF", "ON"))
        return out


@dataclass(frozen=True)
class CellResult:
    snr: str
    video: str
    model: str
    result: WerResult


@dataclass
class Results:
    cells: list[CellResult] = field(default_factory=list)

    @property
    def models(self):
        seen = []
        for c in self.cells:
            if c.model not in seen:
                seen.append(c.model)
        return seen

    @property
    def rows(self):
        seen = []
        for c in self.cells:
            if (c.snr, c.video) not in seen:
                seen.append((c.snr, c.video))
        return seen

    def wer(self, snr, video, model):
        for c in self.cells:
            if (c.snr, c.video, c.model) == (snr, video, model):
                return c.result.wer_pct
        raise KeyError(f"missing cell ({snr}, {video}, {model})")

    def table(self):
        """One row per (snr, video), one WER column per model."""
        return [(snr, video, [self.wer(snr, video, m) for m in self.models])
                for snr, video in self.rows]


def score_hypotheses(refs, hyps):
    total = WerResult(0, 0, 0, 0)
    for utt_id in sorted(refs):
        total = total + wer(refs[utt_id], hyps.get(utt_id, ()))
    return total


def format_results_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for c in results.cells:
        r = c.result
        w.writerow([c.snr, c.video, c.model, f"{r.wer_pct:.4f}", r.substitutions, r.deletions,
                    r.insertions, r.ref_len])
    return buf.getvalue()


def parse_results_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != RESULTS_HEADER:
        raise ValueError(f"unexpected results header {reader.fieldnames}")
    cells = []
    for row in reader:
        cells.append(CellResult(row["snr"], row["video"], row["model"],
                                WerResult(int(row["subs"]), int(row["dels"]), int(row["ins"]),
                                          int(row["ref_len"]))))
    return Results(cells)


@dataclass
class WideTable:
    """Report-shaped table: rows (snr, video) with a WER per model."""

    models: list[str]
    rows: list[tuple[str, str, list[float]]]

    def wer(self, snr, video, model):
        j = self.models.index(model)
        for s, v, w in self.rows:
            if (s, v) == (snr, video):
                return w[j]
        raise KeyError(f"missing cell ({snr}, {video}, {model})")


def parse_table(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:2] != ["snr", "video"] or len(header) < 3:
        raise ValueError(f"unexpected table header {header}")
    rows = []
    for line in reader:
        if not line:
            continue
        if len(line) != len(header):
            raise ValueError(f"row {line} does not match header")
        rows.append((line[0], line[1], [float(x) for x in line[2:]]))
    return WideTable(header[2:], rows)


def reference_table():
    text = resources.files("mtlavsr").joinpath("data/reference_table.csv").read_text(encoding="utf-8")
    return parse_table(text)


def as_table(results):
    if isinstance(results, WideTable):
        return results
    return WideTable(results.models, results.table())


def mean_table(tables):
    """Cell-wise mean WER of several tables with identical shape."""
    tables = [as_table(t) for t in tables]
    first = tables[0]
    rows = []
    for i, (snr, video, _) in enumerate(first.rows):
        stacked = np.array([t.rows[i][2] for t in tables])
        rows.append((snr, video, list(stacked.mean(axis=0))))
    return WideTable(list(first.models), rows)


def format_wide(table):
    lines = [",".join(["snr", "video"] + table.models)]
    for snr, video, wers in table.rows:
        lines.append(",".join([snr, video] + [f"{w:.4f}" for w in wers]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# trend rules


@dataclass(frozen=True)
class TrendRule:
    """Asserts WER(better) < WER(worse) (or <= when not strict).

    A model of ``"*"`` on both sides applies the rule to every model; the
    reported margin is the smallest one.
    """

    name: str
    better: tuple[str, str, str]
    worse: tuple[str, str, str]
    strict: bool = True


@dataclass(frozen=True)
class RuleOutcome:
    name: str
    passed: bool
    margin: float


def default_rules(lam_model="mtl_0.3", stl_model="stl"):
    rules = [TrendRule("av_beats_audio_-3dB", ("-3dB", "ON", "*"), ("-3dB", "OFF", "*"))]
    for snr in ("-3dB", "0dB"):
        for video in ("ON", "OFF"):
            rules.append(TrendRule(f"{lam_model}_le_{stl_model}_{snr}_{video}",
                                   (snr, video, lam_model), (snr, video, stl_model), strict=False))
    return rules


def trend_check(results, rules=None):
    table = as_table(results)
    rules = default_rules() if rules is None else rules
    out = []
    for rule in rules:
        models = table.models if rule.better[2] == "*" else [None]
        margins = []
        for m in models:
            b_model = m or rule.better[2]
            w_model = m or rule.worse[2]
            margins.append(table.wer(rule.worse[0], rule.worse[1], w_model)
                           - table.wer(rule.better[0], rule.better[1], b_model))
        margin = min(margins)
        passed = margin > 0 if rule.strict else margin >= 0
        out.append(RuleOutcome(rule.name, passed, margin))
    return out


def format_trend(outcomes):
    return "".join(f"RULE {o.name} {'PASS' if o.passed else 'FAIL'} margin={o.margin:.4f}\n"
                   for o in outcomes)


# ---------------------------------------------------------------------------
# experiment


class ExperimentError(RuntimeError):
    pass


def evaluate(models, graph, priors, corpus, grid, dnn_eps=mtlnet.SUPPRESS_EPS, scale=1.0,
             beam=0.0, noise_seed=0, test_feats=None, jobs=1, babble_sources=6):
    """Decode every (snr, video) cell of the shared test set with every model."""
    test = corpus.subset(corpus.split.test)
    refs = {u.id: u.words for u in test}
    test_feats = {} if test_feats is None else test_feats
    results = Results()
    for snr, video in grid.rows():
        if snr not in test_feats:
            if snr in (pipeline.CLEAN, "OFF"):
                test_feats[snr] = pipeline.extract_features(test)
            else:
                level = float(snr[:-2])
                noisy = pipeline.noisy_waveforms(test, corpus, level, noise_seed, babble_sources)
                test_feats[snr] = pipeline.extract_features(test, noisy)
        modality = pipeline.modality_for(snr, video)
        for m in models:
            try:
                hyps = pipeline.decode_set(m.net, graph, priors, test_feats[snr], sorted(refs),
                                           modality, scale, dnn_eps, beam, jobs)
            except Exception as e:
                raise ExperimentError(f"cell ({snr}, {video}, {m.name}) failed: {e}") from e
            results.cells.append(CellResult(snr, video, m.name, score_hypotheses(refs, hyps)))
    return results


def run_experiment(corpus, grid, gmm_cfg, dnn_cfg, decode_scale=1.0, seeds=(0,), beam=0.0,
                   gmm_stage=None, jobs=1, babble_sources=6):
    """Full pipeline on an in-memory corpus: GMM/HMM labels, one network per
    model and seed, then every grid cell. Returns one Results per seed."""
    feats = pipeline.extract_features(corpus.subset(corpus.split.train + corpus.split.cv))
    gmm_stage = gmm_stage or pipeline.train_gmm(corpus, feats, gmm_cfg)
    acoustic = gmm_stage.labels("acoustic")
    visual = gmm_stage.labels("visual")
    n_states = gmm_stage.acoustic.model.n_states
    n_vis = gmm_stage.visual.model.n_states
    train_set = pipeline.instance_set(corpus.split.train, feats, acoustic, visual,
                                      dnn_cfg.suppress_eps, np.dtype(dnn_cfg.dtype))
    cv_set = pipeline.instance_set(corpus.split.cv, feats, acoustic, visual,
                                   dnn_cfg.suppress_eps, np.dtype(dnn_cfg.dtype))
    priors = gmmhmm.state_priors([acoustic[i] for i in corpus.split.train], n_states)
    graph = decoder.compile_graph(corpus.grammar, corpus.lexicon, gmm_stage.acoustic.model)
    test_feats = {}
    per_seed = []
    for seed in seeds:
        trained = []
        for name, lam in grid.models:
            cfg = replace(dnn_cfg, lam=lam, seed=seed)
            trained.append(pipeline.train_dnn(name, cfg, train_set, cv_set, n_states, n_vis))
        per_seed.append(evaluate(trained, graph, priors, corpus, grid, dnn_cfg.suppress_eps,
                                 decode_scale, beam, noise_seed=corpus.seed,
                                 test_feats=test_feats, jobs=jobs,
                                 babble_sources=babble_sources))
    return per_seed
