"""Model-backend seam: capability protocols, deterministic mocks, HTTP adapter.

Every expensive or remote model (visual describer, face describer, audio
analyzer, age/gender estimator, face detector, judge) sits behind a small
protocol plus a registry entry. Mock implementations are pure functions of
their input checksums and an optional script table, so curation runs are
reproducible without any network or model weights.
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
import re
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .media import Detection, Gender


class Capability(Enum):
    VISUAL_DESCRIBE = "VISUAL_DESCRIBE"
    FACIAL_DESCRIBE = "FACIAL_DESCRIBE"
    AUDIO_ANALYZE = "AUDIO_ANALYZE"
    AGE_GENDER = "AGE_GENDER"
    FACE_DETECT = "FACE_DETECT"
    JUDGE = "JUDGE"


class BackendError(RuntimeError):
    """Base class for backend failures; carries the backend id."""

    def __init__(self, backend_id: str, message: str):
        super().__init__(f"[{backend_id}] {message}")
        self.backend_id = backend_id


class TransientBackendError(BackendError):
    """Worth retrying: timeouts, connection resets, 5xx, rate limits."""


class PermanentBackendError(BackendError):
    """Not worth retrying: bad request, auth failure, unsupported input."""


class BackendProtocolError(PermanentBackendError):
    """The backend answered, but the response violates the wire contract."""


class ScoringError(BackendError):
    """A judge response that had to contain a score in [0, 10] did not."""


class UnknownBackendError(KeyError):
    def __init__(self, backend_id: str, known: Sequence[str]):
        super().__init__(
            f"unknown backend id {backend_id!r}; registered: {sorted(known) or 'none'}"
        )
        self.backend_id = backend_id


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    capability: Capability
    timeout_s: float = 30.0
    max_retries: int = 2
    backoff_base_s: float = 1.0
    endpoint: Optional[str] = None

    def __post_init__(self):
        if not self.backend_id:
            raise ValueError("backend_id must be non-empty")
        if self.timeout_s <= 0:
            raise ValueError(f"timeout_s must be positive, got {self.timeout_s}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.backoff_base_s <= 0:
            raise ValueError(f"backoff_base_s must be positive, got {self.backoff_base_s}")


class BackendRegistry:
    """Maps backend ids to (descriptor, implementation) pairs."""

    def __init__(self):
        self._entries: dict[str, tuple[BackendDescriptor, object]] = {}

    def register(self, descriptor: BackendDescriptor, backend: object) -> None:
        if descriptor.backend_id in self._entries:
            raise ValueError(f"backend id {descriptor.backend_id!r} already registered")
        self._entries[descriptor.backend_id] = (descriptor, backend)

    def get(self, backend_id: str) -> object:
        return self._entry(backend_id)[1]

    def descriptor(self, backend_id: str) -> BackendDescriptor:
        return self._entry(backend_id)[0]

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, backend_id: str) -> bool:
        return backend_id in self._entries

    def _entry(self, backend_id: str):
        try:
            return self._entries[backend_id]
        except KeyError:
            raise UnknownBackendError(backend_id, list(self._entries)) from None


@dataclass(frozen=True)
class AudioAnalysis:
    caption: str
    transcript: str
    vocal_emotion: str


@dataclass(frozen=True)
class AgeGenderEstimate:
    age_years: float
    gender: Gender
    confidence: float

    def __post_init__(self):
        if self.age_years < 0:
            raise ValueError(f"age_years must be >= 0, got {self.age_years}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


# --- retries and score grammar ----------------------------------------------

def call_with_retries(
    fn: Callable[[], object],
    *,
    max_retries: int = 2,
    backoff_base_s: float = 1.0,
    sleeper: Callable[[float], None] = time.sleep,
    retryable: tuple = (TransientBackendError,),
):
    """Run ``fn``, retrying ``retryable`` failures with exponential backoff.

    Delays are ``backoff_base_s * 2**attempt``; permanent errors propagate
    immediately. ``max_retries`` counts retries, not total attempts.
    """
    attempt = 0
    while True:
        try:
            return fn()
        except retryable:
            if attempt >= max_retries:
                raise
            sleeper(backoff_base_s * (2**attempt))
            attempt += 1


_INT_TOKEN = re.compile(r"-?\d+")


def parse_judge_score(text: str, backend_id: str = "judge") -> int:
    """Extract a score as the first integer token of a judge response.

    The token must lie in [0, 10]; anything else is a scoring failure, never
    silently replaced with a default.
    """
    match = _INT_TOKEN.search(text)
    if match is None:
        raise ScoringError(backend_id, f"no integer score in response {text!r}")
    value = int(match.group())
    if not 0 <= value <= 10:
        raise ScoringError(backend_id, f"score {value} outside [0, 10] in {text!r}")
    return value


def judge_text(
    backend,
    prompt: str,
    descriptor: Optional[BackendDescriptor] = None,
    *,
    sleeper: Callable[[float], None] = time.sleep,
) -> str:
    desc = descriptor or BackendDescriptor("judge", Capability.JUDGE)
    return call_with_retries(
        lambda: backend.judge(prompt),
        max_retries=desc.max_retries,
        backoff_base_s=desc.backoff_base_s,
        sleeper=sleeper,
    )


def judge_score(
    backend,
    prompt: str,
    descriptor: Optional[BackendDescriptor] = None,
    *,
    sleeper: Callable[[float], None] = time.sleep,
) -> int:
    """Ask the judge for a mandatory score; scoring failures are retried too."""
    desc = descriptor or BackendDescriptor("judge", Capability.JUDGE)
    return call_with_retries(
        lambda: parse_judge_score(backend.judge(prompt), desc.backend_id),
        max_retries=desc.max_retries,
        backoff_base_s=desc.backoff_base_s,
        sleeper=sleeper,
        retryable=(TransientBackendError, ScoringError),
    )


# --- checksums ---------------------------------------------------------------

def array_checksum(array: np.ndarray) -> str:
    arr = np.ascontiguousarray(array)
    digest = hashlib.sha256()
    digest.update(str(arr.dtype).encode())
    digest.update(str(arr.shape).encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()[:12]


def arrays_checksum(arrays: Sequence[np.ndarray]) -> str:
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(array_checksum(arr).encode())
    return digest.hexdigest()[:12]


def text_checksum(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:12]


# --- deterministic mocks ------------------------------------------------------

_EMOTION_WORDS = ("neutral", "happy", "sad", "angry", "surprised")


class MockVisualDescriber:
    """Scripted by frame-stack checksum, with a deterministic fallback."""

    def __init__(self, script: Optional[Mapping[str, str]] = None):
        self.script = dict(script or {})

    def describe_frames(self, images: Sequence[np.ndarray], prompt: str) -> str:
        checksum = arrays_checksum(images)
        if checksum in self.script:
            return self.script[checksum]
        return f"an indoor scene with soft lighting, marker {checksum[:6]}"


class MockFaceDescriber:
    def __init__(self, script: Optional[Mapping[str, str]] = None):
        self.script = dict(script or {})

    def describe_faces(self, crops: Sequence[np.ndarray], prompt: str) -> str:
        checksum = arrays_checksum(crops)
        if checksum in self.script:
            return self.script[checksum]
        return f"a face with a steady gaze and slightly parted lips, marker {checksum[:6]}"


class MockAudioAnalyzer:
    """Near-silent input is reported as silence with an empty transcript."""

    SILENCE_PEAK = 1e-6

    def __init__(self, script: Optional[Mapping[str, AudioAnalysis]] = None):
        self.script = dict(script or {})

    def analyze_audio(self, waveform: np.ndarray) -> AudioAnalysis:
        wave = np.asarray(waveform, dtype=np.float64)
        if wave.size == 0 or np.max(np.abs(wave)) < self.SILENCE_PEAK:
            return AudioAnalysis(caption="silence", transcript="", vocal_emotion="neutral")
        checksum = array_checksum(wave)
        if checksum in self.script:
            return self.script[checksum]
        pick = int(checksum, 16)
        return AudioAnalysis(
            caption=f"a voice speaking over room tone, marker {checksum[:6]}",
            transcript=f"synthetic line {checksum[:6]}",
            vocal_emotion=_EMOTION_WORDS[pick % len(_EMOTION_WORDS)],
        )


class MockAgeGenderEstimator:
    def __init__(self, script: Optional[Mapping[str, AgeGenderEstimate]] = None):
        self.script = dict(script or {})

    def estimate_age_gender(self, crops: Sequence[np.ndarray]) -> AgeGenderEstimate:
        checksum = arrays_checksum(crops)
        if checksum in self.script:
            return self.script[checksum]
        pick = int(checksum, 16)
        return AgeGenderEstimate(
            age_years=float(20 + pick % 40),
            gender=Gender.FEMALE if pick % 2 == 0 else Gender.MALE,
            confidence=0.9,
        )


class MockFaceDetector:
    """One centered face per frame unless scripted otherwise."""

    DEFAULT_BOX = (0.25, 0.2, 0.75, 0.8)

    def __init__(self, script: Optional[Mapping[str, Sequence[Detection]]] = None):
        self.script = dict(script or {})

    def detect_faces(self, image: np.ndarray) -> Sequence[Detection]:
        checksum = array_checksum(image)
        if checksum in self.script:
            return list(self.script[checksum])
        return [Detection(box=self.DEFAULT_BOX, confidence=0.95)]


class MockJudge:
    """Substring-rule judge: the first rule whose substrings all match wins.

    Without a matching rule the response is derived from the prompt checksum:
    consistency prompts get ``CONSISTENT``, scoring prompts get
    ``Score: <checksum mod 11>``, synthesis prompts get a parseable
    reason/labels/intensity block.
    """

    def __init__(self, rules: Sequence[tuple[Sequence[str], str]] = ()):
        self.rules = [(tuple(needles), response) for needles, response in rules]
        self.calls: list[str] = []

    def judge(self, prompt: str) -> str:
        self.calls.append(prompt)
        for needles, response in self.rules:
            if all(needle in prompt for needle in needles):
                return response
        checksum = text_checksum(prompt)
        pick = int(checksum, 16)
        lowered = prompt.lower()
        if "score" in lowered:
            return f"Score: {pick % 11}"
        if "consistent" in lowered:
            return "CONSISTENT"
        labels = sorted({_EMOTION_WORDS[pick % 5], _EMOTION_WORDS[(pick // 5) % 5]})
        return (
            f"Reason: the voice and the face point the same way, marker {checksum[:6]}.\n"
            f"Labels: {', '.join(labels)}\n"
            f"Intensity: {1 + pick % 5}"
        )


def build_mock_registry(judge_rules: Sequence[tuple[Sequence[str], str]] = ()) -> BackendRegistry:
    """A full local registry: every capability served by a deterministic mock."""
    registry = BackendRegistry()
    entries = [
        (BackendDescriptor("mock-visual", Capability.VISUAL_DESCRIBE), MockVisualDescriber()),
        (BackendDescriptor("mock-face", Capability.FACIAL_DESCRIBE), MockFaceDescriber()),
        (BackendDescriptor("mock-audio", Capability.AUDIO_ANALYZE), MockAudioAnalyzer()),
        (BackendDescriptor("mock-agegender", Capability.AGE_GENDER), MockAgeGenderEstimator()),
        (BackendDescriptor("mock-detector", Capability.FACE_DETECT), MockFaceDetector()),
        (BackendDescriptor("mock-judge", Capability.JUDGE), MockJudge(judge_rules)),
    ]
    for descriptor, backend in entries:
        registry.register(descriptor, backend)
    return registry


# --- HTTP adapter --------------------------------------------------------------

def _encode_payload(arrays: Sequence[np.ndarray]) -> str:
    buffer = io.BytesIO()
    np.savez(buffer, *[np.ascontiguousarray(a) for a in arrays])
    return base64.b64encode(buffer.getvalue()).decode("ascii")


class HttpBackend:
    """Adapter speaking a one-endpoint JSON protocol for every capability.

    Request: ``POST {endpoint}`` with ``{"capability", "prompt", "payload_b64"}``
    where the payload is a base64 NPZ of the input arrays. Responses carry
    ``{"text": ...}`` or ``{"fields": {...}}``. Endpoint and API key can be
    overridden per backend id via ``EMOFUSE_ENDPOINT_<ID>`` and
    ``EMOFUSE_API_KEY_<ID>`` (id uppercased, dashes as underscores), falling
    back to ``EMOFUSE_ENDPOINT`` / ``EMOFUSE_API_KEY``.
    """

    def __init__(self, descriptor: BackendDescriptor, session=None):
        import requests
        from requests.adapters import HTTPAdapter

        self.descriptor = descriptor
        suffix = descriptor.backend_id.upper().replace("-", "_")
        self.endpoint = (
            os.environ.get(f"EMOFUSE_ENDPOINT_{suffix}")
            or os.environ.get("EMOFUSE_ENDPOINT")
            or descriptor.endpoint
        )
        if not self.endpoint:
            raise ValueError(f"backend {descriptor.backend_id!r} has no endpoint configured")
        self.api_key = os.environ.get(f"EMOFUSE_API_KEY_{suffix}") or os.environ.get(
            "EMOFUSE_API_KEY"
        )
        if session is None:
            session = requests.Session()
            adapter = HTTPAdapter(pool_connections=4, pool_maxsize=4)
            session.mount("http://", adapter)
            session.mount("https://", adapter)
        self.session = session

    def _post(self, prompt: str, arrays: Sequence[np.ndarray]) -> dict:
        import requests

        backend_id = self.descriptor.backend_id
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "capability": self.descriptor.capability.value,
            "prompt": prompt,
            "payload_b64": _encode_payload(arrays) if arrays else None,
        }
        try:
            response = self.session.post(
                self.endpoint, json=body, timeout=self.descriptor.timeout_s, headers=headers
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientBackendError(backend_id, f"request failed: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(
                backend_id, f"server returned {response.status_code}"
            )
        if response.status_code >= 400:
            raise PermanentBackendError(
                backend_id, f"server returned {response.status_code}: {response.text[:200]}"
            )
        try:
            return response.json()
        except ValueError as exc:
            raise BackendProtocolError(backend_id, f"non-JSON response: {exc}") from exc

    def _text(self, prompt: str, arrays: Sequence[np.ndarray]) -> str:
        payload = self._post(prompt, arrays)
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise BackendProtocolError(
                self.descriptor.backend_id, f"missing or empty 'text' in {payload!r}"
            )
        return text

    def _fields(self, prompt: str, arrays: Sequence[np.ndarray]) -> dict:
        payload = self._post(prompt, arrays)
        fields = payload.get("fields")
        if not isinstance(fields, dict):
            raise BackendProtocolError(
                self.descriptor.backend_id, f"missing 'fields' in {payload!r}"
            )
        return fields

    def describe_frames(self, images: Sequence[np.ndarray], prompt: str) -> str:
        return self._text(prompt, list(images))

    def describe_faces(self, crops: Sequence[np.ndarray], prompt: str) -> str:
        return self._text(prompt, list(crops))

    def judge(self, prompt: str) -> str:
        return self._text(prompt, [])

    def analyze_audio(self, waveform: np.ndarray) -> AudioAnalysis:
        fields = self._fields("", [np.asarray(waveform, dtype=np.float64)])
        try:
            return AudioAnalysis(
                caption=str(fields["caption"]),
                transcript=str(fields["transcript"]),
                vocal_emotion=str(fields["vocal_emotion"]),
            )
        except KeyError as exc:
            raise BackendProtocolError(
                self.descriptor.backend_id, f"audio fields missing {exc}"
            ) from exc

    def estimate_age_gender(self, crops: Sequence[np.ndarray]) -> AgeGenderEstimate:
        fields = self._fields("", list(crops))
        backend_id = self.descriptor.backend_id
        try:
            gender = Gender(fields["gender"])
        except (KeyError, ValueError) as exc:
            raise BackendProtocolError(backend_id, f"bad gender field: {exc}") from exc
        try:
            estimate = AgeGenderEstimate(
                age_years=float(fields["age_years"]),
                gender=gender,
                confidence=float(fields["confidence"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendProtocolError(backend_id, f"bad age/gender fields: {exc}") from exc
        return estimate

    def detect_faces(self, image: np.ndarray) -> Sequence[Detection]:
        fields = self._fields("", [image])
        raw = fields.get("detections")
        if not isinstance(raw, list):
            raise BackendProtocolError(
                self.descriptor.backend_id, f"missing 'detections' in {fields!r}"
            )
        detections = []
        for item in raw:
            try:
                box = tuple(float(v) for v in item["box"])
                if len(box) != 4:
                    raise ValueError(f"box must have 4 coordinates, got {len(box)}")
                detections.append(Detection(box=box, confidence=float(item["confidence"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendProtocolError(
                    self.descriptor.backend_id, f"bad detection entry {item!r}: {exc}"
                ) from exc
        return detections
