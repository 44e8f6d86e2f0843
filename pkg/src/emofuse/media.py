"""Deterministic media preprocessing.

Frame sampling, greedy-IoU face tracklet assembly, dense face cropping, audio
resampling to 16 kHz, and 128-channel log-mel extraction. Every operation is a
pure function of its inputs; media decoding goes through a single seam
(:class:`ClipDecoder`) so tests and mock pipelines can run on synthetic
frames and samples without any codec.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import signal as _signal

from .corpus import MediaClip, ValidationError

logger = logging.getLogger(__name__)

AUDIO_RATE = 16000
MEL_CHANNELS = 128
WINDOW_MS = 25
HOP_MS = 10
WINDOW_SAMPLES = AUDIO_RATE * WINDOW_MS // 1000  # 400
HOP_SAMPLES = AUDIO_RATE * HOP_MS // 1000  # 160
LOG_FLOOR = 1e-10

Box = tuple[float, float, float, float]


class DecodeError(RuntimeError):
    """Media could not be decoded; carries the offending clip id."""

    def __init__(self, clip_id: str, message: str):
        super().__init__(f"{clip_id}: {message}")
        self.clip_id = clip_id


class MediaRangeError(ValueError):
    """A requested span lies outside the decodable video."""


class Gender(Enum):
    MALE = "MALE"
    FEMALE = "FEMALE"


@dataclass(frozen=True)
class Frame:
    image: np.ndarray  # HxWx3 uint8
    timestamp_s: float


@dataclass(frozen=True)
class FaceCrop:
    image: np.ndarray
    timestamp_s: float
    box: Box  # normalized, margin-expanded and clamped


@dataclass(frozen=True)
class Detection:
    box: Box  # normalized (x0, y0, x1, y1)
    confidence: float


class FaceDetectorBackend(Protocol):
    def detect_faces(self, image: np.ndarray) -> Sequence[Detection]: ...


@dataclass(frozen=True)
class FaceTracklet:
    """A single face tracked across consecutive sampled frames.

    ``boxes`` holds one normalized box per frame of ``frame_span`` inclusive;
    frames bridged over detector misses carry interpolated boxes with
    ``det_confidence`` 0.
    """

    tracklet_id: str
    clip_id: str
    frame_span: tuple[int, int]
    boxes: tuple[Box, ...]
    det_confidence: tuple[float, ...]
    age_years: Optional[float] = None
    gender: Optional[Gender] = None
    gender_confidence: Optional[float] = None

    def __post_init__(self):
        first, last = self.frame_span
        if first < 0 or last < first:
            raise ValidationError(f"invalid frame_span {self.frame_span}")
        span = last - first + 1
        if len(self.boxes) != span or len(self.det_confidence) != span:
            raise ValidationError(
                f"boxes/confidence length must equal frame_span length {span}"
            )
        for box in self.boxes:
            x0, y0, x1, y1 = box
            if not (x0 < x1 and y0 < y1):
                raise ValidationError(f"degenerate box {box}")
        for conf in self.det_confidence:
            if not 0.0 <= conf <= 1.0:
                raise ValidationError(f"det_confidence out of [0,1]: {conf}")
        if self.age_years is not None and self.age_years < 0:
            raise ValidationError(f"age_years must be >= 0, got {self.age_years}")
        if self.gender_confidence is not None and not 0.0 <= self.gender_confidence <= 1.0:
            raise ValidationError(f"gender_confidence out of [0,1]")

    @property
    def length(self) -> int:
        return self.frame_span[1] - self.frame_span[0] + 1


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [128 channels x F frames], log energies
    sample_rate: int = AUDIO_RATE
    window_ms: int = WINDOW_MS
    hop_ms: int = HOP_MS

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != MEL_CHANNELS:
            raise ValidationError(
                f"mel channel dimension must be {MEL_CHANNELS}, got shape {self.values.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


# --- decoding seam ---------------------------------------------------------

class ClipDecoder(Protocol):
    """The single decode seam: everything that touches pixels or samples."""

    def frame_at(self, clip: MediaClip, timestamp_s: float) -> np.ndarray: ...

    def audio(self, clip: MediaClip) -> Optional[tuple[np.ndarray, int]]: ...


class SyntheticDecoder:
    """Deterministic pseudo-media generator keyed on clip id and timestamp.

    Clips whose ``media_uri`` contains ``"noaudio"`` have no audio track.
    """

    def __init__(self, frame_size: tuple[int, int] = (64, 64), audio_rate: int = AUDIO_RATE):
        self.frame_size = frame_size
        self.audio_rate = audio_rate

    def _rng(self, *parts: object) -> np.random.Generator:
        digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def frame_at(self, clip: MediaClip, timestamp_s: float) -> np.ndarray:
        if timestamp_s < 0 or timestamp_s > clip.duration_s:
            raise MediaRangeError(
                f"timestamp {timestamp_s:.3f}s outside clip {clip.clip_id} "
                f"of duration {clip.duration_s}s"
            )
        h, w = self.frame_size
        rng = self._rng("frame", clip.clip_id, f"{timestamp_s:.3f}")
        return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)

    def audio(self, clip: MediaClip) -> Optional[tuple[np.ndarray, int]]:
        if "noaudio" in clip.media_uri:
            return None
        rng = self._rng("audio", clip.clip_id)
        n = int(round(clip.duration_s * self.audio_rate))
        t = np.arange(n) / self.audio_rate
        freq = 80.0 + float(rng.integers(0, 400))
        wave = 0.4 * np.sin(2 * np.pi * freq * t) + 0.05 * rng.standard_normal(n)
        return wave.astype(np.float64), self.audio_rate


class FileDecoder:
    """Decodes video frames via OpenCV; audio is read from a sibling WAV file.

    Container audio tracks are not demuxed (no ffmpeg dependency): for a clip
    at ``/data/x.mp4`` the audio, if any, is expected at ``/data/x.wav``.
    """

    def frame_at(self, clip: MediaClip, timestamp_s: float) -> np.ndarray:
        try:
            import cv2
        except ImportError as exc:
            raise DecodeError(clip.clip_id, f"OpenCV unavailable: {exc}") from exc
        cap = cv2.VideoCapture(clip.media_uri)
        try:
            if not cap.isOpened():
                raise DecodeError(clip.clip_id, f"cannot open {clip.media_uri}")
            cap.set(cv2.CAP_PROP_POS_MSEC, timestamp_s * 1000.0)
            ok, frame = cap.read()
            if not ok:
                raise DecodeError(clip.clip_id, f"no frame at {timestamp_s:.3f}s")
            return frame[:, :, ::-1].copy()  # BGR -> RGB
        finally:
            cap.release()

    def audio(self, clip: MediaClip) -> Optional[tuple[np.ndarray, int]]:
        from pathlib import Path

        from scipy.io import wavfile

        wav = Path(clip.media_uri).with_suffix(".wav")
        if not wav.exists():
            return None
        rate, data = wavfile.read(wav)
        if data.ndim > 1:
            data = data.mean(axis=1)
        if np.issubdtype(data.dtype, np.integer):
            data = data.astype(np.float64) / np.iinfo(data.dtype).max
        return np.asarray(data, dtype=np.float64), int(rate)


# --- frame sampling --------------------------------------------------------

def sample_frames(
    clip: MediaClip, rate_fps: float = 1.0, *, decoder: Optional[ClipDecoder] = None
) -> list[Frame]:
    """Sparse-sample frames at ``k / rate_fps`` for ``k = 0..n-1``.

    ``n = max(1, floor(duration_s * rate_fps))``: every positive-duration clip
    yields at least one frame.
    """
    if rate_fps <= 0:
        raise ValueError(f"rate_fps must be positive, got {rate_fps}")
    decoder = decoder or FileDecoder()
    n = max(1, math.floor(clip.duration_s * rate_fps))
    frames = []
    for k in range(n):
        t = k / rate_fps
        try:
            image = decoder.frame_at(clip, t)
        except DecodeError:
            raise
        except Exception as exc:
            raise DecodeError(clip.clip_id, f"decode failed at {t:.3f}s: {exc}") from exc
        frames.append(Frame(image=image, timestamp_s=t))
    return frames


# --- tracklet assembly -----------------------------------------------------

def box_iou(a: Box, b: Box) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def interpolate_box(a: Box, b: Box, weight: float) -> Box:
    """Linear interpolation between two boxes; weight 0 -> a, weight 1 -> b."""
    return tuple(av + (bv - av) * weight for av, bv in zip(a, b))  # type: ignore[return-value]


class _TrackState:
    def __init__(self, index: int, box: Box, confidence: float):
        self.entries: list[tuple[int, Box, float]] = [(index, box, confidence)]
        self.misses = 0

    @property
    def last_box(self) -> Box:
        return self.entries[-1][1]

    def extend(self, index: int, box: Box, confidence: float):
        self.entries.append((index, box, confidence))
        self.misses = 0


def _finalize_track(state: _TrackState, clip_id: str, ordinal: int) -> FaceTracklet:
    first = state.entries[0][0]
    last = state.entries[-1][0]
    boxes: list[Box] = []
    confs: list[float] = []
    by_index = {idx: (box, conf) for idx, box, conf in state.entries}
    anchors = [idx for idx, _, _ in state.entries]
    pos = 0
    for idx in range(first, last + 1):
        if idx in by_index:
            box, conf = by_index[idx]
            if anchors[pos] != idx:
                pos = anchors.index(idx)
        else:
            # bridge a detector gap by linear interpolation, confidence 0
            while anchors[pos + 1] < idx:
                pos += 1
            lo, hi = anchors[pos], anchors[pos + 1]
            weight = (idx - lo) / (hi - lo)
            box = interpolate_box(by_index[lo][0], by_index[hi][0], weight)
            conf = 0.0
        boxes.append(box)
        confs.append(conf)
    return FaceTracklet(
        tracklet_id=f"{clip_id}-t{ordinal}",
        clip_id=clip_id,
        frame_span=(first, last),
        boxes=tuple(boxes),
        det_confidence=tuple(confs),
    )


def extract_tracklets(
    clip: MediaClip,
    detector: FaceDetectorBackend,
    iou_threshold: float = 0.5,
    *,
    rate_fps: float = 1.0,
    gap_frames: int = 10,
    min_len: int = 5,
    decoder: Optional[ClipDecoder] = None,
) -> list[FaceTracklet]:
    """Link per-frame detections into tracklets by greedy IoU association.

    Each detection is matched against every open tracklet's last box, highest
    IoU first; a tracklet closes after ``gap_frames`` consecutive misses, and
    tracklets spanning fewer than ``min_len`` frames are dropped. Detector
    failures on single frames are logged and skipped, never fatal.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0,1], got {iou_threshold}")
    frames = sample_frames(clip, rate_fps, decoder=decoder)
    open_tracks: list[_TrackState] = []
    closed: list[_TrackState] = []
    created = 0
    order: dict[int, int] = {}

    for index, frame in enumerate(frames):
        try:
            detections = list(detector.detect_faces(frame.image))
        except Exception as exc:
            logger.warning("detector failed on %s frame %d: %s", clip.clip_id, index, exc)
            detections = []

        pairs = []
        for ti, track in enumerate(open_tracks):
            for di, det in enumerate(detections):
                iou = box_iou(track.last_box, det.box)
                if iou >= iou_threshold:
                    pairs.append((iou, ti, di))
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        used_tracks: set[int] = set()
        used_dets: set[int] = set()
        for iou, ti, di in pairs:
            if ti in used_tracks or di in used_dets:
                continue
            open_tracks[ti].extend(index, detections[di].box, detections[di].confidence)
            used_tracks.add(ti)
            used_dets.add(di)

        still_open: list[_TrackState] = []
        for ti, track in enumerate(open_tracks):
            if ti in used_tracks:
                still_open.append(track)
                continue
            track.misses += 1
            if track.misses >= gap_frames:
                closed.append(track)
            else:
                still_open.append(track)
        open_tracks = still_open

        for di, det in enumerate(detections):
            if di in used_dets:
                continue
            state = _TrackState(index, det.box, det.confidence)
            order[id(state)] = created
            created += 1
            open_tracks.append(state)
        for track in open_tracks:
            order.setdefault(id(track), created)

    closed.extend(open_tracks)
    closed.sort(key=lambda s: (s.entries[0][0], order.get(id(s), 0)))
    tracklets = []
    for state in closed:
        span = state.entries[-1][0] - state.entries[0][0] + 1
        if span < min_len:
            continue
        tracklets.append(_finalize_track(state, clip.clip_id, len(tracklets)))
    return tracklets


# --- dense face crops ------------------------------------------------------

def expand_and_clamp_box(box: Box, margin: float) -> Box:
    """Expand each side by ``margin`` of the box size, clamped to [0, 1]."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    return (
        max(0.0, x0 - margin * w),
        max(0.0, y0 - margin * h),
        min(1.0, x1 + margin * w),
        min(1.0, y1 + margin * h),
    )


def crop_tracklet_frames(
    clip: MediaClip,
    tracklet: FaceTracklet,
    dense_rate_fps: float = 4.0,
    *,
    sampled_rate_fps: float = 1.0,
    margin: float = 0.2,
    decoder: Optional[ClipDecoder] = None,
) -> list[FaceCrop]:
    """Densely crop a tracklet's face at ``dense_rate_fps`` within its span.

    Boxes are linearly interpolated between the tracklet's annotated frames,
    expanded by ``margin`` of the box size per side, and clamped to the image.
    """
    if dense_rate_fps <= 0:
        raise ValueError(f"dense_rate_fps must be positive, got {dense_rate_fps}")
    if tracklet.clip_id != clip.clip_id:
        raise ValueError(
            f"tracklet {tracklet.tracklet_id} belongs to {tracklet.clip_id}, not {clip.clip_id}"
        )
    decoder = decoder or FileDecoder()
    first, last = tracklet.frame_span
    t_first = first / sampled_rate_fps
    t_last = last / sampled_rate_fps
    if t_last > clip.duration_s:
        raise MediaRangeError(
            f"tracklet span ends at {t_last:.3f}s beyond clip duration {clip.duration_s}s"
        )
    count = max(1, math.floor((t_last - t_first) * dense_rate_fps))
    crops = []
    for k in range(count):
        t = t_first + k / dense_rate_fps
        position = min(max(t * sampled_rate_fps, first), last)
        lo = int(math.floor(position))
        hi = min(lo + 1, last)
        weight = position - lo
        if hi == lo:
            box = tracklet.boxes[lo - first]
        else:
            box = interpolate_box(tracklet.boxes[lo - first], tracklet.boxes[hi - first], weight)
        box = expand_and_clamp_box(box, margin)
        image = decoder.frame_at(clip, t)
        height, width = image.shape[:2]
        px0 = int(math.floor(box[0] * width))
        py0 = int(math.floor(box[1] * height))
        px1 = max(px0 + 1, int(math.ceil(box[2] * width)))
        py1 = max(py0 + 1, int(math.ceil(box[3] * height)))
        crops.append(FaceCrop(image=image[py0:py1, px0:px1], timestamp_s=t, box=box))
    return crops


# --- audio -----------------------------------------------------------------

def resample_audio(waveform: np.ndarray, source_rate: int) -> np.ndarray:
    """Resample a waveform to 16 kHz, preserving duration within one sample."""
    if source_rate <= 0:
        raise ValueError(f"source_rate must be positive, got {source_rate}")
    x = np.asarray(waveform, dtype=np.float64)
    if x.size == 0:
        return np.zeros(0)
    if source_rate == AUDIO_RATE:
        return x.copy()
    g = math.gcd(AUDIO_RATE, int(source_rate))
    # filter ripple would modulate the DC component; take it out and restore
    mean = x.mean()
    out = _signal.resample_poly(x - mean, AUDIO_RATE // g, int(source_rate) // g, padtype="line")
    return out + mean


def _hz_to_mel(freq: np.ndarray) -> np.ndarray:
    # Slaney scale: linear below 1 kHz, logarithmic above.
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    linear = freq / f_sp
    with np.errstate(divide="ignore"):
        logpart = min_log_hz / f_sp + np.log(np.maximum(freq, 1e-10) / min_log_hz) / logstep
    return np.where(freq >= min_log_hz, logpart, linear)


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    linear = mel * f_sp
    logpart = 1000.0 * np.exp(logstep * (mel - min_log_mel))
    return np.where(mel >= min_log_mel, logpart, linear)


def mel_filterbank(
    n_mels: int = MEL_CHANNELS,
    n_fft: int = WINDOW_SAMPLES,
    sample_rate: int = AUDIO_RATE,
    fmin: float = 0.0,
    fmax: float = 8000.0,
) -> np.ndarray:
    """Slaney-style triangular filterbank, shape [n_mels, n_fft // 2 + 1]."""
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    mel_points = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bank = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        lower, center, upper = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - lower) / max(center - lower, 1e-12)
        down = (upper - fft_freqs) / max(upper - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
        bank[m] *= 2.0 / (upper - lower)  # Slaney area normalization
    return bank


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def compute_log_mel(waveform: np.ndarray) -> MelSpectrogram:
    """Log-mel energies of a 16 kHz waveform: 25 ms window, 10 ms hop.

    Inputs shorter than one window are zero-padded to a single frame. Frame
    count for unpadded input is ``floor((N - 400) / 160) + 1``. Energies are
    floored at 1e-10 before the natural log.
    """
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if x.size < WINDOW_SAMPLES:
        x = np.pad(x, (0, WINDOW_SAMPLES - x.size))
    num_frames = (x.size - WINDOW_SAMPLES) // HOP_SAMPLES + 1
    indices = (
        np.arange(num_frames)[:, None] * HOP_SAMPLES + np.arange(WINDOW_SAMPLES)[None, :]
    )
    window = _signal.get_window("hann", WINDOW_SAMPLES, fftbins=True)
    frames = x[indices] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # [F, bins]
    key = (MEL_CHANNELS, WINDOW_SAMPLES, AUDIO_RATE)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank()
    mel = _FILTERBANK_CACHE[key] @ power.T  # [128, F]
    return MelSpectrogram(values=np.log(np.maximum(mel, LOG_FLOOR)))
