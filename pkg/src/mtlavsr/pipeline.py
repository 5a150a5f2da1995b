"""Stage functions shared by the command line and the experiment runner."""

from __future__ import annotations

import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import decoder, features, gmmhmm, mtlnet, synthdata

log = logging.getLogger(__name__)

CLEAN = "CLEAN"


@dataclass
class UttFeatures:
    audio: np.ndarray  # (T, 40) normalized
    visual: np.ndarray  # (T, 100) normalized

    @property
    def fused(self):
        return features.fuse(self.audio, self.visual)


@dataclass
class GmmStage:
    acoustic: gmmhmm.BootstrapResult
    visual: gmmhmm.BootstrapResult

    def labels(self, modality):
        res = self.acoustic if modality == "acoustic" else self.visual
        return {a.utt_id: a for a in res.alignments}


@dataclass
class TrainedModel:
    name: str
    lam: float
    net: mtlnet.MtlNetwork
    records: list
    seed: int


def timed(stage):
    """Decorator logging wall time of a stage."""
    def wrap(fn):
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            out = fn(*args, **kwargs)
            log.info("%s finished in %.1f s", stage, time.perf_counter() - t0)
            return out
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def extract_features(utterances, waveforms=None):
    """Normalized audio/visual features for each utterance (optionally with
    replacement waveforms, e.g. noisy versions)."""
    out = {}
    for u in utterances:
        wav = u.waveform if waveforms is None else waveforms[u.id]
        audio, visual = features.utterance_features(wav, u.video)
        out[u.id] = UttFeatures(audio, visual)
    return out


@timed("train-gmm")
def train_gmm(corpus, feats, cfg=gmmhmm.BootstrapConfig(), ids=None):
    """Acoustic and visual bootstraps on train+cv utterances.

    The two models share the recipe but see disjoint feature streams.
    """
    ids = ids if ids is not None else sorted(corpus.split.train + corpus.split.cv)
    trans = [corpus.lexicon.pronounce(corpus.utterances[i].words) for i in ids]
    phones = corpus.lexicon.phones
    ac = gmmhmm.bootstrap([feats[i].audio for i in ids], trans, phones, ids, cfg, "acoustic")
    vi = gmmhmm.bootstrap([feats[i].visual for i in ids], trans, phones, ids, cfg, "visual")
    return GmmStage(ac, vi)


def instance_set(ids, feats, acoustic, visual, eps=mtlnet.SUPPRESS_EPS, dtype=np.float32):
    return mtlnet.InstanceSet.from_utterances(
        [feats[i].fused for i in ids], [acoustic[i] for i in ids], [visual[i] for i in ids],
        eps, dtype)


def network_dims(cfg, n_acoustic, n_visual):
    return [features.SPLICED_DIM] + [cfg.hidden_dim] * cfg.hidden_layers + [n_acoustic, n_visual]


@timed("train-dnn")
def train_dnn(name, cfg, train_set, cv_set, n_acoustic, n_visual, log_path=None):
    net = mtlnet.init_network(network_dims(cfg, n_acoustic, n_visual), cfg.activation, cfg.seed,
                              np.dtype(cfg.dtype))
    net, records = mtlnet.train(
        net, train_set, cv_set, cfg, log_path,
        on_epoch=lambda r: log.info("%s epoch %d lr=%g ce=%.4f cv=%.2f%%", name, r.epoch, r.lr,
                                    r.train_ce, r.cv_acc))
    return TrainedModel(name, cfg.lam, net, records, cfg.seed)


def babble_for(utt, corpus, seed, n_sources=6):
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(utt.id.encode()), 0xBAB])
    return synthdata.synth_babble(n_sources, utt.waveform.size, corpus.lexicon, corpus.grammar, rng)


def noisy_waveforms(utterances, corpus, snr_db, seed, n_sources=6):
    """Babble-corrupted copies; the babble for an utterance is independent of
    the SNR so conditions differ only in level."""
    return {u.id: synthdata.mix_at_snr(u.waveform, babble_for(u, corpus, seed, n_sources), snr_db)
            for u in utterances}


def snr_label(snr):
    if isinstance(snr, str):
        return snr.upper() if snr.upper() in (CLEAN, "OFF") else snr
    return f"{snr:g}dB"


def test_conditions(snrs):
    """Table rows: every SNR with video OFF and ON, then the lip-reading row."""
    rows = []
    for snr in snrs:
        rows.append((snr_label(snr), "OFF"))
        rows.append((snr_label(snr), "ON"))
    rows.append(("OFF", "ON"))
    return rows


def modality_for(snr_lab, video):
    if snr_lab == "OFF":
        return "video-only"
    return "AV" if video == "ON" else "audio-only"


def decode_set(net, graph, priors, feats, ids, modality, scale=1.0, eps=mtlnet.SUPPRESS_EPS,
               beam=0.0, jobs=1):
    def one(i):
        return i, decoder.decode_utterance(net, graph, priors, feats[i].fused, modality, scale,
                                           eps, beam).words
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return dict(ex.map(one, ids))
    return dict(one(i) for i in ids)
