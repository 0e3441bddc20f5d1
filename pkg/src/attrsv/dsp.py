from __future__ import annotations
import logging
import struct
from pathlib import Path
import numpy as np
import soundfile as sf
from scipy.fft import dct
from attrsv.config import MfccConfig
from attrsv.errors import DataError
from attrsv.models import AudioClip, MfccMatrix

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"ATSV"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHII")


class MissingAudioError(DataError):
    pass


class UnsupportedAudioError(DataError):
    pass


class EmptyAudioError(DataError):
    pass


class FeatureError(DataError):
    pass


def load_wav(path: Path | str) -> AudioClip:
    path = Path(path)
    if not path.exists():
        raise MissingAudioError(f"Audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise UnsupportedAudioError(f"{path} is not a readable RIFF/WAVE file: {e}") from e
    if info.format != "WAV":
        raise UnsupportedAudioError(f"{path} is {info.format}, expected RIFF/WAVE")
    if info.subtype != "PCM_16":
        raise UnsupportedAudioError(f"{path} is {info.subtype}; only 16-bit integer PCM is supported")
    if info.frames == 0:
        raise EmptyAudioError(f"{path} contains no audio samples")

    data, rate = sf.read(str(path), dtype="int16", always_2d=True)
    samples = data.astype(np.float64).mean(axis=1) / 32768.0
    return AudioClip(samples=samples, sample_rate=rate, source_id=str(path))


def write_wav(path: Path | str, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), pcm, clip.sample_rate, subtype="PCM_16", format="WAV")


def resample_linear(clip: AudioClip, target_rate: int) -> AudioClip:
    if clip.sample_rate == target_rate:
        return clip
    n_out = int(np.floor(clip.samples.size * target_rate / clip.sample_rate))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(clip.samples.size) / clip.sample_rate
    samples = np.interp(t_out, t_in, clip.samples)
    return AudioClip(samples=samples, sample_rate=target_rate, source_id=clip.source_id)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular filters evenly spaced on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(num_samples: int, frame_length: int, hop: int) -> int:
    if num_samples < frame_length:
        return 0
    return (num_samples - frame_length) // hop + 1


def compute_mfcc(clip: AudioClip, config: MfccConfig) -> MfccMatrix:
    if config.n_coeffs > config.n_mels:
        raise FeatureError(f"n_coeffs ({config.n_coeffs}) exceeds mel filter count ({config.n_mels})")
    clip = resample_linear(clip, config.sample_rate)
    frame_len, hop = config.frame_length_samples, config.hop_samples
    if frame_len > config.n_fft:
        raise FeatureError(f"frame of {frame_len} samples does not fit a {config.n_fft}-point FFT")
    n_frames = frame_count(clip.samples.size, frame_len, hop)
    if n_frames == 0:
        raise FeatureError(
            f"clip {clip.source_id or '<memory>'} has {clip.samples.size} samples, "
            f"shorter than one {frame_len}-sample frame"
        )

    x = clip.samples
    emphasized = np.concatenate(([x[0]], x[1:] - config.preemphasis * x[:-1]))
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, frame_len)[::hop][:n_frames]
    window = np.hanning(frame_len) if config.window == "hann" else np.hamming(frame_len)
    spectrum = np.abs(np.fft.rfft(frames * window, n=config.n_fft)) ** 2

    f_max = config.f_max if config.f_max is not None else config.sample_rate / 2.0
    fbank = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels, config.f_min, f_max)
    log_energy = np.log(np.maximum(spectrum @ fbank.T, config.log_floor))
    coeffs = dct(log_energy, type=2, norm="ortho", axis=1)[:, : config.n_coeffs]

    matrix = MfccMatrix(values=coeffs, frame_length_ms=config.frame_length_ms, frame_hop_ms=config.frame_hop_ms)
    return mean_variance_normalize(matrix) if config.cmvn else matrix


def mean_variance_normalize(m: MfccMatrix) -> MfccMatrix:
    if m.frames < 2:
        raise FeatureError(f"mean/variance normalization needs at least 2 frames, got {m.frames}")
    values = m.values
    centered = values - values.mean(axis=0)
    constant = np.all(values == values[0], axis=0)
    std = centered.std(axis=0)
    scale = np.where(constant, 1.0, std)
    out = centered / scale
    out[:, constant] = 0.0
    return MfccMatrix(values=out, frame_length_ms=m.frame_length_ms, frame_hop_ms=m.frame_hop_ms)


def encode_features(m: MfccMatrix) -> bytes:
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, m.frames, m.n_coeffs)
    return header + np.ascontiguousarray(m.values, dtype="<f4").tobytes()


def load_features(path: Path | str, frame_length_ms: float = 25.0, frame_hop_ms: float = 10.0) -> MfccMatrix:
    path = Path(path)
    if not path.exists():
        raise MissingAudioError(f"Feature cache not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise FeatureError(f"{path} is too short to be a feature cache file")
    magic, version, frames, n_coeffs = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise FeatureError(f"{path} is not a feature cache file (bad magic {magic!r})")
    if version != CACHE_VERSION:
        raise FeatureError(f"{path} has cache format version {version}, expected {CACHE_VERSION}")
    body = raw[_CACHE_HEADER.size:]
    if len(body) != frames * n_coeffs * 4:
        raise FeatureError(f"{path} is truncated: expected {frames}x{n_coeffs} floats")
    values = np.frombuffer(body, dtype="<f4").reshape(frames, n_coeffs).astype(np.float64)
    return MfccMatrix(values=values, frame_length_ms=frame_length_ms, frame_hop_ms=frame_hop_ms)
