"""Command-line entry point: ``mtlavsr <subcommand> [options]``.

Working directory layout: ``work/{corpus,gmm,align,dnn,decode,results}``.
Each stage records its input hash and output hashes in
``work/manifest.json`` and is skipped when nothing changed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import decoder, evalharness, features, gmmhmm, mtlnet, pipeline, synthdata

log = logging.getLogger("mtlavsr")

STAGES = ("synth", "train-gmm", "align", "train-dnn", "decode", "score")


class StageError(RuntimeError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class Manifest:
    """stage key -> {"inputs": hash, "outputs": {relative path: sha256}}."""

    def __init__(self, workdir):
        self.workdir = Path(workdir)
        self.path = self.workdir / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {}

    def save(self):
        self.workdir.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        tmp.replace(self.path)

    def up_to_date(self, key, inputs):
        entry = self.data.get(key)
        if not entry or entry["inputs"] != inputs:
            return False
        for rel, digest in entry["outputs"].items():
            p = self.workdir / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def outputs_hash(self, key):
        entry = self.data.get(key)
        if entry is None:
            raise StageError(f"missing upstream artifact: run `{key.split('/')[0]}` first")
        return sha256_json(entry["outputs"])

    def record(self, key, inputs, paths, seconds):
        outs = {str(Path(p).relative_to(self.workdir)): sha256_file(p) for p in sorted(paths)}
        self.data[key] = {"inputs": inputs, "outputs": outs, "seconds": round(seconds, 3)}
        self.save()
        for rel, digest in outs.items():
            log.info("  %s sha256=%s", rel, digest[:16])


class Workspace:
    def __init__(self, cfg, force=False, jobs=1, seed=0):
        self.cfg = cfg
        self.root = cfg.workdir
        self.force = force
        self.jobs = max(1, jobs)
        self.seed = seed
        self.manifest = Manifest(self.root)
        self._corpus = None
        self._feats = {}

    def dir(self, name):
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def run(self, key, inputs, fn):
        if not self.force and self.manifest.up_to_date(key, inputs):
            log.info("%s: up to date, skipped", key)
            return
        t0 = time.perf_counter()
        log.info("%s: running", key)
        paths = fn()
        dt = time.perf_counter() - t0
        log.info("%s: done in %.2f s", key, dt)
        self.manifest.record(key, inputs, paths, dt)

    def require(self, stage):
        return self.manifest.outputs_hash(stage)

    # -- corpus ---------------------------------------------------------

    def grammar_lexicon(self):
        c = self.cfg.corpus
        grammar = synthdata.load_grammar(c.grammar) if c.grammar else synthdata.default_grammar()
        lexicon = synthdata.load_lexicon(c.lexicon) if c.lexicon else synthdata.default_lexicon()
        lexicon.check_grammar(grammar)
        return grammar, lexicon

    def corpus(self):
        if self._corpus is None:
            self.require("synth")
            grammar, lexicon = self.grammar_lexicon()
            cdir = self.root / "corpus"
            split = json.loads((cdir / "split.json").read_text())
            utts = {}
            for utt_id, wav, vid, words in synthdata.read_manifest(cdir / "manifest.tsv"):
                utts[utt_id] = synthdata.SynthUtterance(
                    utt_id, words, features.read_wav(cdir / wav), synthdata.read_video(cdir / vid))
            self._corpus = synthdata.Corpus(
                grammar, lexicon, utts,
                synthdata.CorpusSplit(tuple(split["train"]), tuple(split["cv"]), tuple(split["test"])),
                self.cfg.corpus.seed)
        return self._corpus

    def train_features(self):
        """Clean features for train+cv, cached as FMAT files by train-gmm."""
        if not self._feats:
            corpus = self.corpus()
            fdir = self.root / "gmm" / "features"
            for i in corpus.split.train + corpus.split.cv:
                fused = features.read_fmat(fdir / f"{i}.fmat")
                self._feats[i] = pipeline.UttFeatures(fused[:, :features.AUDIO_DIM],
                                                      fused[:, features.AUDIO_DIM:])
        return self._feats


# ---------------------------------------------------------------------------
# stages


def cmd_synth(ws):
    cfg = ws.cfg.corpus
    inputs = sha256_json({"corpus": asdict(cfg), "grammar": _file_digest(cfg.grammar),
                          "lexicon": _file_digest(cfg.lexicon)})

    def work():
        grammar, lexicon = ws.grammar_lexicon()
        voice = synthdata.VoiceParams(target_duration=cfg.duration, duration_jitter=cfg.jitter)
        corpus = synthdata.build_corpus(cfg.size, cfg.seed, grammar, lexicon, voice)
        cdir = ws.dir("corpus")
        (cdir / "wav").mkdir(exist_ok=True)
        (cdir / "vid").mkdir(exist_ok=True)
        rows, paths = [], []
        for utt_id in sorted(corpus.utterances):
            u = corpus.utterances[utt_id]
            wav, vid = f"wav/{utt_id}.wav", f"vid/{utt_id}.vid"
            features.write_wav(cdir / wav, u.waveform)
            synthdata.write_video(cdir / vid, u.frames)
            rows.append((utt_id, wav, vid, u.words))
            paths += [cdir / wav, cdir / vid]
        synthdata.write_manifest(cdir / "manifest.tsv", rows)
        s = corpus.split
        (cdir / "split.json").write_text(json.dumps(
            {"train": list(s.train), "cv": list(s.cv), "test": list(s.test)}, indent=1))
        log.info("corpus: %d utterances, split %d/%d/%d", len(rows), len(s.train), len(s.cv),
                 len(s.test))
        return paths + [cdir / "manifest.tsv", cdir / "split.json"]

    ws.run("synth", inputs, work)


def _file_digest(path):
    return sha256_file(path) if path else ""


def cmd_train_gmm(ws):
    inputs = sha256_json({"synth": ws.require("synth"), "gmmhmm": asdict(ws.cfg.gmmhmm)})

    def work():
        corpus = ws.corpus()
        ids = sorted(corpus.split.train + corpus.split.cv)
        feats = pipeline.extract_features(corpus.subset(ids))
        fdir = ws.dir("gmm") / "features"
        fdir.mkdir(exist_ok=True)
        paths = []
        for i in ids:
            features.write_fmat(fdir / f"{i}.fmat", feats[i].fused)
            paths.append(fdir / f"{i}.fmat")
        # models are trained on the stored (float32) features, as later stages see them
        ws._feats = {}
        feats = ws.train_features()
        stage = pipeline.train_gmm(corpus, feats, gmmhmm.BootstrapConfig(**asdict(ws.cfg.gmmhmm)))
        gdir = ws.dir("gmm")
        for name, res in (("acoustic", stage.acoustic), ("visual", stage.visual)):
            gmmhmm.write_model(gdir / f"{name}.mdl", res.model, res.lda)
            paths.append(gdir / f"{name}.mdl")
        return paths

    ws.run("train-gmm", inputs, work)


def cmd_align(ws):
    inputs = sha256_json({"train-gmm": ws.require("train-gmm")})

    def work():
        corpus = ws.corpus()
        feats = ws.train_features()
        ids = sorted(corpus.split.train + corpus.split.cv)
        ctx = ws.cfg.gmmhmm.lda_context
        adir = ws.dir("align")
        paths = []
        for name, attr in (("acoustic", "audio"), ("visual", "visual")):
            model, lda = gmmhmm.read_model(ws.root / "gmm" / f"{name}.mdl")
            alis = []
            for i in ids:
                x = gmmhmm.lda_features(lda, getattr(feats[i], attr), ctx)
                alis.append(gmmhmm.forced_align(model, x, corpus.lexicon.pronounce(
                    corpus.utterances[i].words), i, name))
            gmmhmm.write_alignments(adir / f"{name}.ali", alis)
            paths.append(adir / f"{name}.ali")
            if name == "acoustic":
                train = set(corpus.split.train)
                priors = gmmhmm.state_priors([a for a in alis if a.utt_id in train],
                                             model.n_states)
                np.savetxt(adir / "priors.txt", priors, fmt="%.17g")
                paths.append(adir / "priors.txt")
        return paths

    ws.run("align", inputs, work)


def train_config(ws, lam, seed):
    d = ws.cfg.dnn
    return mtlnet.TrainConfig(
        lam=lam, batch_size=d.batch_size, initial_lr=d.lr, halve_threshold_pct=d.halve_threshold,
        stop_threshold_pct=d.stop_threshold, seed=seed, hidden_layers=d.hidden_layers,
        hidden_dim=d.hidden_dim, activation=d.activation, max_epochs=d.max_epochs,
        epoch_fraction=d.epoch_fraction, suppress_eps=d.suppress_eps)


def _dnn_dir(ws, seed, multi):
    return ws.dir(f"dnn/seed{seed}" if multi else "dnn")


def _labels(ws):
    corpus = ws.corpus()
    adir = ws.root / "align"
    ac = {a.utt_id: a for a in gmmhmm.read_alignments(adir / "acoustic.ali", "acoustic")}
    vi = {a.utt_id: a for a in gmmhmm.read_alignments(adir / "visual.ali", "visual")}
    missing = [i for i in corpus.split.train + corpus.split.cv if i not in ac or i not in vi]
    if missing:
        raise StageError(f"alignments missing for {len(missing)} utterances (e.g. {missing[0]})")
    return ac, vi


def cmd_train_dnn(ws, models, seed, multi=False):
    """Train each (name, lambda, label) model; returns stage keys."""
    upstream = ws.require("align")
    keys = []
    sets = {}
    for name, lam, label in models:
        cfg = train_config(ws, lam, seed)
        key = f"train-dnn/seed{seed}/{name}" if multi else f"train-dnn/{name}"
        inputs = sha256_json({"align": upstream, "train": asdict(cfg)})
        keys.append(key)

        def work(name=name, cfg=cfg, label=label):
            if not sets:
                corpus = ws.corpus()
                feats = ws.train_features()
                ac, vi = _labels(ws)
                dtype = np.dtype(cfg.dtype)
                sets["train"] = pipeline.instance_set(corpus.split.train, feats, ac, vi,
                                                      cfg.suppress_eps, dtype)
                sets["cv"] = pipeline.instance_set(corpus.split.cv, feats, ac, vi,
                                                   cfg.suppress_eps, dtype)
                sets["k"] = 3 * len(corpus.lexicon.phones)
            ddir = _dnn_dir(ws, seed, multi)
            log_path = ddir / f"{name}.log"
            trained = pipeline.train_dnn(name, cfg, sets["train"], sets["cv"], sets["k"],
                                         sets["k"], log_path)
            mtlnet.write_network(ddir / f"{name}.net", trained.net)
            meta = {"name": name, "lambda": cfg.lam, "kind": label, "seed": seed,
                    "epochs": len(trained.records)}
            (ddir / f"{name}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
            return [ddir / f"{name}.net", log_path, ddir / f"{name}.json"]

        ws.run(key, inputs, work)
    return keys


def _grid(ws, model_names):
    e = ws.cfg.experiment
    snrs = tuple(s if s.lower() == "clean" else float(s) for s in e.snrs)
    return evalharness.ExperimentGrid(snrs, tuple(e.modalities),
                                      tuple((n, 0.0) for n in model_names))


def _cell_file(snr, video):
    return f"{snr}_{video}.hyp"


def cmd_decode(ws, model_names, seed, multi=False):
    dnn_keys = [f"train-dnn/seed{seed}/{n}" if multi else f"train-dnn/{n}" for n in model_names]
    upstream = {k: ws.require(k) for k in dnn_keys}
    upstream["align"] = ws.require("align")
    key = f"decode/seed{seed}" if multi else "decode"
    inputs = sha256_json({"up": upstream, "decode": asdict(ws.cfg.decode),
                          "experiment": asdict(ws.cfg.experiment),
                          "babble": ws.cfg.corpus.babble_sources})

    def work():
        corpus = ws.corpus()
        grid = _grid(ws, model_names)
        acoustic, _ = gmmhmm.read_model(ws.root / "gmm" / "acoustic.mdl")
        graph = decoder.compile_graph(corpus.grammar, corpus.lexicon, acoustic)
        priors = np.loadtxt(ws.root / "align" / "priors.txt")
        ddir = _dnn_dir(ws, seed, multi)
        nets = {n: mtlnet.read_network(ddir / f"{n}.net", np.float32) for n in model_names}
        test = corpus.subset(corpus.split.test)
        ids = [u.id for u in test]
        out_root = ws.dir(f"decode/seed{seed}" if multi else "decode")
        paths, cache = [], {}
        d = ws.cfg.decode
        for snr, video in grid.rows():
            if snr not in cache:
                if snr in (pipeline.CLEAN, "OFF"):
                    cache[snr] = pipeline.extract_features(test)
                else:
                    noisy = pipeline.noisy_waveforms(test, corpus, float(snr[:-2]),
                                                     corpus.seed, ws.cfg.corpus.babble_sources)
                    cache[snr] = pipeline.extract_features(test, noisy)
            modality = pipeline.modality_for(snr, video)
            for name, net in nets.items():
                try:
                    hyps = pipeline.decode_set(net, graph, priors, cache[snr], ids, modality,
                                               d.acoustic_scale, ws.cfg.dnn.suppress_eps,
                                               d.beam, ws.jobs)
                except Exception as e:
                    raise StageError(f"decode cell ({snr}, {video}, {name}) failed: {e}") from e
                mdir = out_root / name
                mdir.mkdir(exist_ok=True)
                p = mdir / _cell_file(snr, video)
                decoder.write_hypotheses(p, [(i, hyps[i]) for i in ids])
                paths.append(p)
        return paths

    ws.run(key, inputs, work)
    return key


def score_results(ws, model_names, seed, multi=False):
    corpus = ws.corpus()
    refs = {i: corpus.utterances[i].words for i in corpus.split.test}
    grid = _grid(ws, model_names)
    root = ws.root / (f"decode/seed{seed}" if multi else "decode")
    results = evalharness.Results()
    for snr, video in grid.rows():
        for name in model_names:
            p = root / name / _cell_file(snr, video)
            if not p.exists():
                raise StageError(f"missing upstream artifact {p}: run `decode` first")
            hyps = decoder.read_hypotheses(p)
            results.cells.append(evalharness.CellResult(
                snr, video, name, evalharness.score_hypotheses(refs, hyps)))
    return results


def cmd_score(ws, model_names, seeds, multi=False):
    keys = [f"decode/seed{s}" if multi else "decode" for s in seeds]
    inputs = sha256_json({k: ws.require(k) for k in keys})

    def work():
        rdir = ws.dir("results")
        paths, tables = [], []
        for s in seeds:
            res = score_results(ws, model_names, s, multi)
            suffix = f"_seed{s}" if multi else ""
            p = rdir / f"results{suffix}.csv"
            p.write_text(evalharness.format_results_csv(res))
            t = rdir / f"table{suffix}.csv"
            t.write_text(evalharness.format_wide(evalharness.as_table(res)))
            paths += [p, t]
            tables.append(evalharness.as_table(res))
        final = tables[0]
        if multi:
            final = evalharness.mean_table(tables)
            p = rdir / "table_mean.csv"
            p.write_text(evalharness.format_wide(final))
            paths.append(p)
        outcomes = evalharness.trend_check(final, _rules(model_names, final))
        tr = rdir / "trend.txt"
        tr.write_text(evalharness.format_trend(outcomes))
        paths.append(tr)
        for line in tr.read_text().splitlines():
            log.info("%s", line)
        return paths

    ws.run("score", inputs, work)


def _rules(model_names, table):
    """Default trend rules restricted to the cells/models that exist."""
    lam_models = [n for n in model_names if n.startswith("mtl_")]
    best = "mtl_0.3" if "mtl_0.3" in model_names else (lam_models[-1] if lam_models else None)
    rules = evalharness.default_rules(best or "stl")
    if best is None or "stl" not in model_names:
        rules = rules[:1]
    rows = {(snr, video) for snr, video, _ in table.rows}
    return [r for r in rules if r.better[:2] in rows and r.worse[:2] in rows]


def cmd_experiment(ws, n_seeds):
    cmd_synth(ws)
    cmd_train_gmm(ws)
    cmd_align(ws)
    models = ws.cfg.models()
    specs = [(n, lam, "STL" if n == "stl" else "MTL") for n, lam in models]
    names = [n for n, _ in models]
    multi = n_seeds > 1
    seeds = [ws.seed + i for i in range(n_seeds)]
    for s in seeds:
        cmd_train_dnn(ws, specs, s, multi)
        cmd_decode(ws, names, s, multi)
    cmd_score(ws, names, seeds, multi)


# ---------------------------------------------------------------------------
# argument handling


def build_parser():
    p = argparse.ArgumentParser(prog="mtlavsr", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker cap")
    p.add_argument("--force", action="store_true", help="rerun stages even if up to date")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="synthesize the corpus")
    sub.add_parser("train-gmm", help="extract features and bootstrap GMM/HMMs")
    sub.add_parser("align", help="force-align train+cv with both GMM/HMMs")
    t = sub.add_parser("train-dnn", help="train networks")
    g = t.add_mutually_exclusive_group()
    g.add_argument("--stl", action="store_true", help="single-task baseline (lambda = 0)")
    g.add_argument("--lambda", dest="lam", type=float, help="train one MTL model")
    t.add_argument("--name", help="model name (default derived from lambda)")
    sub.add_parser("decode", help="decode the test set for every grid cell")
    sub.add_parser("score", help="score decodes, write results and trend report")
    e = sub.add_parser("experiment", help="run every stage for every model")
    e.add_argument("--seeds", type=int, default=1, help="repeat training with k seeds")
    return p


def _selected_models(ws, args):
    if getattr(args, "stl", False):
        return [(args.name or "stl", 0.0, "STL")]
    if getattr(args, "lam", None) is not None:
        return [(args.name or f"mtl_{args.lam:g}", args.lam, "MTL")]
    return [(n, lam, "STL" if n == "stl" else "MTL") for n, lam in ws.cfg.models()]


def _trained_names(ws):
    names = []
    for key in ws.manifest.data:
        parts = key.split("/")
        if parts[0] == "train-dnn" and len(parts) == 2:
            names.append(parts[1])
    if not names:
        raise StageError("missing upstream artifact: run `train-dnn` first")
    order = [n for n, _ in ws.cfg.models()]
    return sorted(names, key=lambda n: (order.index(n) if n in order else len(order), n))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = config_mod.load_config(args.config)
    except config_mod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    ws = Workspace(cfg, args.force, args.jobs, args.seed)
    try:
        if args.command == "synth":
            cmd_synth(ws)
        elif args.command == "train-gmm":
            cmd_train_gmm(ws)
        elif args.command == "align":
            cmd_align(ws)
        elif args.command == "train-dnn":
            cmd_train_dnn(ws, _selected_models(ws, args), args.seed)
        elif args.command == "decode":
            cmd_decode(ws, _trained_names(ws), args.seed)
        elif args.command == "score":
            cmd_score(ws, _trained_names(ws), [args.seed])
        elif args.command == "experiment":
            if args.seeds < 1:
                raise config_mod.ConfigError("--seeds must be >= 1")
            cmd_experiment(ws, args.seeds)
    except (synthdata.CorpusError, config_mod.ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (StageError, gmmhmm.AlignmentError, decoder.DecodeError,
            evalharness.ExperimentError, OSError, ValueError) as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return 1
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
