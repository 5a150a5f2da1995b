"""Audio and visual front end.

Everything here is a pure function of its inputs. Audio frames are 25 ms
Hamming windows every 10 ms at 16 kHz; video frames are 64x64 grayscale
mouth regions described by 100 low-frequency DCT coefficients.
"""

from __future__ import annotations

import struct
import wave
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.signal

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 40
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 7600.0
ENERGY_FLOOR = 1e-10
VAR_FLOOR = 1e-8

ROI_SIZE = 64
N_DCT = 100
VIDEO_RATE = 25.0

AUDIO_DIM = N_MELS
VISUAL_DIM = N_DCT
FUSED_DIM = AUDIO_DIM + VISUAL_DIM
CONTEXT = 5
SPLICED_DIM = (2 * CONTEXT + 1) * FUSED_DIM

FMAT_MAGIC = b"FMAT"


class FeatureError(ValueError):
    pass


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers_hz(n_mels=N_MELS, low=MEL_LOW_HZ, high=MEL_HIGH_HZ):
    """Center frequencies (Hz) of the triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE,
                   low=MEL_LOW_HZ, high=MEL_HIGH_HZ):
    """Triangular filters on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (c - lo)
        falling = (hi - freqs) / (hi - c)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    fb.setflags(write=False)
    return fb


def num_frames(n_samples):
    return (n_samples - FRAME_LEN) // FRAME_SHIFT + 1


def compute_filterbank(samples, n_mels=N_MELS):
    """Log mel filterbank energies, one row per 10 ms frame.

    Raises FeatureError if the waveform is shorter than one 25 ms frame.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError("waveform must be one-dimensional")
    if x.size < FRAME_LEN:
        raise FeatureError("utterance too short")
    if not np.all(np.isfinite(x)):
        raise FeatureError("waveform contains non-finite samples")
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::FRAME_SHIFT]
    frames = frames * np.hamming(FRAME_LEN)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels).T
    return np.log(np.maximum(energies, ENERGY_FLOOR))


@lru_cache(maxsize=4)
def zigzag_indices(n=ROI_SIZE, count=N_DCT):
    """(row, col) pairs of the first ``count`` cells in JPEG zigzag order."""
    order = []
    for s in range(2 * n - 1):
        diag = [(i, s - i) for i in range(max(0, s - n + 1), min(s, n - 1) + 1)]
        # even anti-diagonals run bottom-left to top-right
        if s % 2 == 0:
            diag.reverse()
        order.extend(diag)
        if len(order) >= count:
            break
    rows, cols = zip(*order[:count])
    return np.array(rows), np.array(cols)


def dct2(image):
    return scipy.fft.dctn(np.asarray(image, dtype=np.float64), type=2, norm="ortho")


def idct2(coeffs):
    return scipy.fft.idctn(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho")


def dct_visual(frame, count=N_DCT):
    """Orthonormal 2-D DCT-II of a 64x64 ROI, first ``count`` zigzag coefficients."""
    img = np.asarray(frame, dtype=np.float64)
    if img.shape != (ROI_SIZE, ROI_SIZE):
        raise FeatureError(f"ROI frame must be {ROI_SIZE}x{ROI_SIZE}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise FeatureError("ROI frame contains non-finite values")
    rows, cols = zigzag_indices(ROI_SIZE, count)
    return dct2(img)[rows, cols]


def dct_visual_stream(frames, count=N_DCT):
    """Apply :func:`dct_visual` to every frame of a (T, 64, 64) stack."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (ROI_SIZE, ROI_SIZE):
        raise FeatureError(f"expected (T, {ROI_SIZE}, {ROI_SIZE}) frames, got {frames.shape}")
    rows, cols = zigzag_indices(ROI_SIZE, count)
    coeffs = scipy.fft.dctn(frames, type=2, norm="ortho", axes=(1, 2))
    return coeffs[:, rows, cols]


def mean_variance_normalize(m):
    """Per-dimension zero mean / unit (population) variance over one utterance."""
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise FeatureError("normalization needs at least 2 frames")
    centered = x - x.mean(axis=0)
    var = np.mean(centered ** 2, axis=0)
    return centered / np.sqrt(np.maximum(var, VAR_FLOOR))


def interpolate_video(frames, target_frame_count):
    """Linearly resample a frame stack onto ``target_frame_count`` frames.

    Source and target frames are placed evenly on [0, 1], so the first and last
    frames are reproduced exactly.
    """
    v = np.asarray(frames, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        raise FeatureError("need at least 2 video frames to interpolate")
    if target_frame_count < 2:
        raise FeatureError("target frame count must be >= 2")
    pos = np.arange(target_frame_count) * (n - 1) / (target_frame_count - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = (pos - lo).reshape((-1,) + (1,) * (v.ndim - 1))
    return (1.0 - frac) * v[lo] + frac * v[lo + 1]


def fuse(audio, video):
    """Concatenate 40-dim audio rows with 100-dim visual rows."""
    a = np.asarray(audio)
    v = np.asarray(video)
    if a.ndim != 2 or v.ndim != 2:
        raise FeatureError("fuse expects two matrices")
    if a.shape[0] != v.shape[0]:
        raise FeatureError(f"frame count mismatch: audio {a.shape[0]} vs video {v.shape[0]}")
    return np.concatenate([a, v], axis=1)


def splice_indices(n_frames, left=CONTEXT, right=CONTEXT):
    """Row indices for context windows with edge replication, shape (T, left+right+1)."""
    offsets = np.arange(-left, right + 1)
    return np.clip(np.arange(n_frames)[:, None] + offsets[None, :], 0, n_frames - 1)


def splice(m, left=CONTEXT, right=CONTEXT):
    """Stack each frame with its neighbours; (T, D) -> (T, (left+right+1) * D)."""
    x = np.asarray(m)
    if x.ndim != 2 or x.shape[0] < 1:
        raise FeatureError("splice expects a non-empty matrix")
    idx = splice_indices(x.shape[0], left, right)
    return x[idx].reshape(x.shape[0], -1)


def utterance_features(samples, video_frames):
    """Normalized (audio, visual) feature matrices on a common frame grid."""
    audio = mean_variance_normalize(compute_filterbank(samples))
    video = interpolate_video(video_frames, audio.shape[0])
    visual = mean_variance_normalize(dct_visual_stream(video))
    return audio, visual


# ---------------------------------------------------------------------------
# file formats


def read_wav(path):
    """PCM16 mono WAV -> float samples in [-1, 1) at 16 kHz."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise FeatureError(f"{path}: only 16-bit PCM is supported")
        if w.getnchannels() != 1:
            raise FeatureError(f"{path}: only mono audio is supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != SAMPLE_RATE:
        g = np.gcd(rate, SAMPLE_RATE)
        x = scipy.signal.resample_poly(x, SAMPLE_RATE // g, rate // g)
    return x


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def write_fmat(path, m):
    m = np.asarray(m)
    if m.ndim != 2:
        raise FeatureError("FMAT stores 2-D matrices only")
    with open(path, "wb") as f:
        f.write(FMAT_MAGIC)
        f.write(struct.pack("<II", *m.shape))
        f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_fmat(path):
    data = Path(path).read_bytes()
    if data[:4] != FMAT_MAGIC:
        raise FeatureError(f"{path}: bad FMAT magic")
    rows, cols = struct.unpack_from("<II", data, 4)
    body = np.frombuffer(data, dtype="<f4", offset=12)
    if body.size != rows * cols:
        raise FeatureError(f"{path}: truncated FMAT payload")
    return body.reshape(rows, cols).astype(np.float64)
