"""Synthetic GRID-style audio-visual corpus.

Each phone is rendered as three steady sinusoids ("formants") under a smooth
amplitude envelope; the mouth region is a filled ellipse whose opening depends
on the viseme of the active phone. Timings are known exactly, which makes the
whole recognition pipeline testable without licensed recordings.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import ROI_SIZE, SAMPLE_RATE, VIDEO_RATE

VID_MAGIC = b"VID0"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Grammar:
    """Ordered slots, one word drawn from each slot per sentence."""

    slots: tuple[tuple[str, ...], ...]
    slot_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.slots:
            raise CorpusError("grammar has no slots")
        for i, words in enumerate(self.slots):
            if not words:
                raise CorpusError(f"grammar slot {i} is empty")
            if len(set(words)) != len(words):
                raise CorpusError(f"grammar slot {i} has duplicate words")

    @property
    def vocabulary(self):
        return sorted({w for slot in self.slots for w in slot})

    def accepts(self, words):
        return len(words) == len(self.slots) and all(
            w in slot for w, slot in zip(words, self.slots))


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, tuple[str, ...]]
    phones: tuple[str, ...]
    viseme_map: dict[str, int]

    def __post_init__(self):
        known = set(self.phones)
        for word, pron in self.entries.items():
            if not pron:
                raise CorpusError(f"empty pronunciation for {word!r}")
            missing = [p for p in pron if p not in known]
            if missing:
                raise CorpusError(f"{word!r} uses unknown phones {missing}")
        unmapped = [p for p in self.phones if p not in self.viseme_map]
        if unmapped:
            raise CorpusError(f"phones without a viseme: {unmapped}")

    @property
    def n_visemes(self):
        return max(self.viseme_map.values()) + 1

    def phone_id(self, phone):
        return self.phones.index(phone)

    def pronounce(self, words):
        """Flat phone-index sequence for a word sequence."""
        out = []
        for w in words:
            if w not in self.entries:
                raise CorpusError(f"word not in lexicon: {w!r}")
            out.extend(self.phones.index(p) for p in self.entries[w])
        return out

    def check_grammar(self, grammar):
        missing = [w for w in grammar.vocabulary if w not in self.entries]
        if missing:
            raise CorpusError(f"grammar words missing from lexicon: {missing}")


GRID_SLOTS = (
    ("command", ("bin", "lay", "place", "set")),
    ("color", ("blue", "green", "red", "white")),
    ("preposition", ("at", "by", "in", "with")),
    ("letter", tuple("abcdefghijklmnopqrstuvxyz")),
    ("digit", ("zero", "one", "two", "three", "four", "five", "six", "seven",
               "eight", "nine")),
    ("adverb", ("again", "now", "please", "soon")),
)

# Reduced phone inventory; pronunciations are approximate by design.
GRID_PRONUNCIATIONS = {
    "bin": "b ih n", "lay": "l ey", "place": "p l ey s", "set": "s eh t",
    "blue": "b l uw", "green": "g r iy n", "red": "r eh d", "white": "w ay t",
    "at": "eh t", "by": "b ay", "in": "ih n", "with": "w ih f",
    "a": "ey", "b": "b iy", "c": "s iy", "d": "d iy", "e": "iy", "f": "eh f",
    "g": "jh iy", "h": "ey jh", "i": "ay", "j": "jh ey", "k": "k ey",
    "l": "eh l", "m": "eh m", "n": "eh n", "o": "ow", "p": "p iy",
    "q": "k iy uw", "r": "aa r", "s": "eh s", "t": "t iy", "u": "iy uw",
    "v": "v iy", "x": "eh k s", "y": "w ay", "z": "z eh d",
    "zero": "z ih r ow", "one": "w aa n", "two": "t uw", "three": "f r iy",
    "four": "f ow r", "five": "f ay v", "six": "s ih k s",
    "seven": "s eh v eh n", "eight": "ey t", "nine": "n ay n",
    "again": "eh g eh n", "now": "n aa w", "please": "p l iy z",
    "soon": "s uw n",
}

# bilabial, labiodental, alveolar, velar/palatal, rounded, spread, open, mid
GRID_VISEMES = {
    "b": 0, "p": 0, "m": 0,
    "f": 1, "v": 1,
    "t": 2, "d": 2, "s": 2, "z": 2, "n": 2, "l": 2,
    "k": 3, "g": 3, "jh": 3, "r": 3,
    "w": 4, "uw": 4, "ow": 4,
    "iy": 5, "ih": 5, "ey": 5,
    "aa": 6, "ay": 6,
    "eh": 7,
}

# (vertical half-aperture, horizontal half-width) as fractions of the ROI
VISEME_SHAPES = np.array([
    [0.04, 0.30],
    [0.10, 0.28],
    [0.18, 0.32],
    [0.24, 0.26],
    [0.20, 0.14],
    [0.14, 0.40],
    [0.40, 0.30],
    [0.30, 0.34],
])


def default_grammar():
    return Grammar(slots=tuple(words for _, words in GRID_SLOTS),
                   slot_names=tuple(name for name, _ in GRID_SLOTS))


def default_lexicon():
    phones = tuple(sorted(GRID_VISEMES))
    entries = {w: tuple(p.split()) for w, p in GRID_PRONUNCIATIONS.items()}
    return Lexicon(entries=entries, phones=phones, viseme_map=dict(GRID_VISEMES))


def load_grammar(path):
    """Grammar file: one slot per line, ``name: word word ...``; '#' comments."""
    slots, names = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise CorpusError(f"{path}:{lineno}: expected 'slot: words...'")
        name, words = line.split(":", 1)
        slots.append(tuple(words.split()))
        names.append(name.strip())
    try:
        return Grammar(slots=tuple(slots), slot_names=tuple(names))
    except CorpusError as e:
        raise CorpusError(f"{path}: {e}") from None


def load_lexicon(path):
    """Lexicon file: ``word phone phone ...`` lines plus ``@viseme phone id`` lines."""
    entries, visemes = {}, {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "@viseme":
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected '@viseme phone id'")
            visemes[parts[1]] = int(parts[2])
        else:
            if len(parts) < 2:
                raise CorpusError(f"{path}:{lineno}: word without pronunciation")
            entries[parts[0]] = tuple(parts[1:])
    try:
        return Lexicon(entries=entries, phones=tuple(sorted(visemes)), viseme_map=visemes)
    except CorpusError as e:
        raise CorpusError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class VoiceParams:
    """Knobs of the toy voice. ``fixed_phone_duration`` (seconds) disables
    random durations and total-length rescaling."""

    target_duration: float = 3.0
    duration_jitter: float = 0.1
    duration_sigma: float = 0.25
    formant_jitter: float = 0.03
    noise_level: float = 0.01
    ramp_ms: float = 10.0
    pixel_noise: float = 0.02
    min_phone_duration: float = 0.05
    fixed_phone_duration: float | None = None


@dataclass
class SynthUtterance:
    """``frames`` holds u8 intensities (the on-disk quantization); ``video``
    gives them as floats in [0, 1]."""

    id: str
    words: tuple[str, ...]
    waveform: np.ndarray
    frames: np.ndarray  # (n_frames, 64, 64) u8
    phone_timing: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.dtype != np.uint8:
            f = quantize_frames(f)
        self.frames = f

    @property
    def video(self):
        return self.frames.astype(np.float64) / 255.0

    @property
    def phones(self):
        return [p for p, _, _ in self.phone_timing]


def utterance_rng(seed, utt_id):
    """Per-utterance generator keyed on (master seed, id), independent of order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(utt_id.encode())])


def phone_formants(n_phones):
    """Deterministic, well separated (f1, f2, f3) per phone index in Hz."""
    rng = np.random.default_rng(12345)
    f1 = np.linspace(250.0, 900.0, n_phones)
    f2 = np.linspace(950.0, 2500.0, n_phones)
    f3 = np.linspace(2600.0, 3900.0, n_phones)
    return np.stack([rng.permutation(f1), rng.permutation(f2), rng.permutation(f3)], axis=1)


def phone_mean_durations(lexicon):
    """Mean phone duration in seconds; vowels run longer than consonants."""
    vowels = {"aa", "ay", "eh", "ey", "ih", "iy", "ow", "uw"}
    return np.array([0.19 if p in vowels else 0.13 for p in lexicon.phones])


def sample_sentence(grammar, rng_seed):
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return tuple(slot[int(rng.integers(len(slot)))] for slot in grammar.slots)


def _phone_durations(phones, lexicon, voice, rng):
    if voice.fixed_phone_duration is not None:
        return np.full(len(phones), float(voice.fixed_phone_duration))
    means = phone_mean_durations(lexicon)[phones]
    dur = means * np.exp(voice.duration_sigma * rng.standard_normal(len(phones))
                         - 0.5 * voice.duration_sigma ** 2)
    if voice.target_duration:
        total = voice.target_duration + voice.duration_jitter * rng.uniform(-1.0, 1.0)
        dur *= total / dur.sum()
    return np.maximum(dur, voice.min_phone_duration)


def _render_ellipse(aperture, width, jitter):
    yy, xx = np.mgrid[0:ROI_SIZE, 0:ROI_SIZE] + 0.5
    cy, cx = ROI_SIZE * (0.5 + jitter[0]), ROI_SIZE * (0.5 + jitter[1])
    ry, rx = max(aperture * ROI_SIZE, 0.5), width * ROI_SIZE
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return np.where(inside, 0.15, 0.75)


def synth_utterance(words, lexicon, voice=None, rng_seed=0, utt_id="utt"):
    """Render one utterance; the same seed reproduces it bit for bit."""
    voice = voice or VoiceParams()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    phones = lexicon.pronounce(words)
    durations = _phone_durations(phones, lexicon, voice, rng)
    bounds = np.round(np.concatenate([[0.0], np.cumsum(durations)]) * SAMPLE_RATE).astype(np.int64)
    n = int(bounds[-1])

    formants = phone_formants(len(lexicon.phones))
    shift = 1.0 + voice.formant_jitter * rng.standard_normal()
    amps = np.array([1.0, 0.6, 0.35])
    amps = amps / np.sqrt(np.sum(amps ** 2) / 2.0)
    ramp = max(1, int(voice.ramp_ms * SAMPLE_RATE / 1000))

    audio = np.zeros(n)
    timing = []
    for p, start, end in zip(phones, bounds[:-1], bounds[1:]):
        start, end = int(start), int(end)
        seg_len = end - start
        t = np.arange(seg_len) / SAMPLE_RATE
        phase = rng.uniform(0.0, 2 * np.pi, 3)
        seg = np.zeros(seg_len)
        for k in range(3):
            seg += amps[k] * np.sin(2 * np.pi * formants[p, k] * shift * t + phase[k])
        env = np.ones(seg_len)
        r = min(ramp, seg_len // 2)
        if r > 0:
            w = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            env[:r] = w
            env[seg_len - r:] = w[::-1]
        audio[start:end] = 0.3 * seg * env
        timing.append((p, start, end))
    audio += voice.noise_level * rng.standard_normal(n)

    n_video = max(2, int(round(n / SAMPLE_RATE * VIDEO_RATE)))
    centers = np.minimum(((np.arange(n_video) + 0.5) * SAMPLE_RATE / VIDEO_RATE).astype(np.int64), n - 1)
    seg_of = np.searchsorted(bounds[1:], centers, side="right")
    frames = np.empty((n_video, ROI_SIZE, ROI_SIZE))
    for i, s in enumerate(seg_of):
        aperture, width = VISEME_SHAPES[lexicon.viseme_map[lexicon.phones[phones[s]]]]
        frames[i] = _render_ellipse(aperture, width, 0.01 * rng.standard_normal(2))
    frames += voice.pixel_noise * rng.standard_normal(frames.shape)

    return SynthUtterance(id=utt_id, words=tuple(words), waveform=audio, frames=frames,
                          phone_timing=timing)


def _fit_length(x, n):
    if x.size >= n:
        return x[:n]
    reps = -(-n // x.size)
    return np.tile(x, reps)[:n]


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def synth_babble(n_sources, n_samples, lexicon, grammar, rng_seed, voice=None):
    """Sum of ``n_sources`` synthetic talkers, looped/trimmed, scaled to unit RMS."""
    if n_sources < 1:
        raise CorpusError("babble needs at least one source")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    out = np.zeros(n_samples)
    for _ in range(n_sources):
        words = sample_sentence(grammar, rng)
        utt = synth_utterance(words, lexicon, voice, rng)
        out += _fit_length(utt.waveform, n_samples)
    return out / rms(out)


def mix_at_snr(clean, noise, snr_db):
    """``clean + g * noise`` with g chosen so the power ratio is ``snr_db``."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise CorpusError("clean and noise must have equal length")
    p_clean = np.mean(clean ** 2)
    if p_clean <= 0.0:
        raise CorpusError("clean signal has zero power")
    p_noise = np.mean(noise ** 2)
    if p_noise <= 0.0:
        raise CorpusError("noise signal has zero power")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def measured_snr(clean, noisy):
    noise = np.asarray(noisy) - np.asarray(clean)
    return 10.0 * np.log10(np.mean(np.square(clean)) / np.mean(np.square(noise)))


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[str, ...]
    cv: tuple[str, ...]
    test: tuple[str, ...]


def split_ids(ids, seed, test_fraction=0.1, cv_fraction=0.1):
    ids = sorted(ids)
    order = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5EED]).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = int(round(test_fraction * len(ids)))
    n_cv = int(round(cv_fraction * (len(ids) - n_test)))
    test = shuffled[:n_test]
    cv = shuffled[n_test:n_test + n_cv]
    train = shuffled[n_test + n_cv:]
    return CorpusSplit(train=tuple(sorted(train)), cv=tuple(sorted(cv)), test=tuple(sorted(test)))


@dataclass
class Corpus:
    grammar: Grammar
    lexicon: Lexicon
    utterances: dict[str, SynthUtterance]
    split: CorpusSplit
    seed: int = 0

    def subset(self, ids):
        return [self.utterances[i] for i in ids]


def make_utterance(utt_id, grammar, lexicon, seed, voice=None):
    rng = utterance_rng(seed, utt_id)
    return synth_utterance(sample_sentence(grammar, rng), lexicon, voice, rng, utt_id=utt_id)


def build_corpus(size, seed, grammar=None, lexicon=None, voice=None,
                 test_fraction=0.1, cv_fraction=0.1):
    if size < 10:
        raise CorpusError("corpus needs at least 10 utterances")
    grammar = grammar or default_grammar()
    lexicon = lexicon or default_lexicon()
    lexicon.check_grammar(grammar)
    ids = [f"utt{i:05d}" for i in range(size)]
    utts = {i: make_utterance(i, grammar, lexicon, seed, voice) for i in ids}
    return Corpus(grammar, lexicon, utts, split_ids(ids, seed, test_fraction, cv_fraction), seed)


def corpus_hash(corpus):
    h = hashlib.sha256()
    for utt_id in sorted(corpus.utterances):
        u = corpus.utterances[utt_id]
        h.update(utt_id.encode())
        h.update(" ".join(u.words).encode())
        h.update(np.ascontiguousarray(u.waveform).tobytes())
        h.update(np.ascontiguousarray(u.frames).tobytes())
    for part in (corpus.split.train, corpus.split.cv, corpus.split.test):
        h.update(",".join(part).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# media / manifest formats


def quantize_frames(frames):
    """[0, 1] intensities -> u8 (values outside the range are clipped)."""
    return np.clip(np.round(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_video(path, frames):
    """``frames``: u8 array, or floats in [0, 1]."""
    frames = np.asarray(frames)
    n, h, w = frames.shape
    if frames.dtype != np.uint8:
        frames = quantize_frames(frames)
    with open(path, "wb") as f:
        f.write(VID_MAGIC)
        f.write(struct.pack("<III", n, w, h))
        f.write(np.ascontiguousarray(frames).tobytes())


def read_video(path):
    data = Path(path).read_bytes()
    if data[:4] != VID_MAGIC:
        raise CorpusError(f"{path}: bad VID0 magic")
    n, w, h = struct.unpack_from("<III", data, 4)
    body = np.frombuffer(data, dtype=np.uint8, offset=16)
    if body.size != n * w * h:
        raise CorpusError(f"{path}: truncated video payload")
    return body.reshape(n, h, w).astype(np.float64) / 255.0


def write_manifest(path, rows):
    """rows: iterable of (utt_id, wav_path, video_path, words)."""
    with open(path, "w") as f:
        for utt_id, wav, vid, words in rows:
            f.write(f"{utt_id}\t{wav}\t{vid}\t{' '.join(words)}\n")


def read_manifest(path):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorpusError(f"{path}:{lineno}: expected 4 tab-separated fields")
        rows.append((parts[0], parts[1], parts[2], tuple(parts[3].split())))
    return rows
