"""Self-reviewed annotation pipeline.

Per clip: gather modality evidence through backends, have a judge check the
evidence for cross-modal contradictions, synthesize one reasoning annotation,
then score how well it aligns with the clip's ground-truth label. Records at
or above the threshold form the SRE manifest; the HRE manifest is a seeded
per-source sample of the remainder, disjoint from SRE by construction. The
whole run is deterministic for deterministic backends: reruns produce
byte-identical manifests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

from .backends import (
    BackendDescriptor,
    BackendError,
    BackendRegistry,
    Capability,
    ScoringError,
    call_with_retries,
    judge_score,
)
from .corpus import (
    DatasetManifest,
    EvidenceKind,
    MediaClip,
    ModalityEvidence,
    Provenance,
    ReasoningAnnotation,
    ReviewAuditEntry,
    ReviewStatus,
    build_manifest,
    write_manifest,
)
from .media import (
    ClipDecoder,
    DecodeError,
    FaceTracklet,
    crop_tracklet_frames,
    extract_tracklets,
    resample_audio,
    sample_frames,
)

logger = logging.getLogger(__name__)


class CurationError(RuntimeError):
    pass


class SynthesisError(CurationError):
    """The judge's synthesis response could not be parsed into a record."""


class ReviewStateError(CurationError):
    """A human verdict was applied to a record in the wrong review state."""


class ReviewVerdict(Enum):
    APPROVE = "APPROVE"
    REJECT = "REJECT"
    EDIT = "EDIT"


#: Review states a human verdict may be applied to.
_REVIEWABLE = frozenset({ReviewStatus.SELF_REVIEWED, ReviewStatus.HUMAN_EDITED})

_CURATION_TEMPLATES = (
    "visual_describe.txt",
    "facial_describe.txt",
    "consistency_check.txt",
    "synthesis.txt",
    "alignment_score.txt",
)


def load_template(name: str) -> str:
    return resources.files("emofuse").joinpath("templates", name).read_text(encoding="utf-8")


def template_fingerprint(names: Sequence[str] = _CURATION_TEMPLATES) -> str:
    digest = hashlib.sha256()
    for name in names:
        digest.update(name.encode())
        digest.update(load_template(name).encode())
    return digest.hexdigest()[:12]


@dataclass(frozen=True)
class CurationConfig:
    score_threshold: int = 5
    hre_quota_per_source: int = 700
    excluded_sources: frozenset = frozenset({"RAVDESS"})
    random_seed: int = 0
    frame_rate_fps: float = 1.0
    dense_crop_fps: float = 4.0
    max_workers: int = 4
    visual_backend: str = "mock-visual"
    face_backend: str = "mock-face"
    audio_backend: str = "mock-audio"
    agegender_backend: str = "mock-agegender"
    detector_backend: str = "mock-detector"
    judge_backend: str = "mock-judge"

    def __post_init__(self):
        if not 0 <= self.score_threshold <= 10:
            raise ValueError(f"score_threshold must be in [0, 10], got {self.score_threshold}")
        if self.hre_quota_per_source < 0:
            raise ValueError("hre_quota_per_source must be >= 0")
        if self.max_workers < 1:
            raise ValueError("max_workers must be >= 1")

    def backend_ids(self) -> tuple[str, ...]:
        return tuple(
            sorted(
                {
                    self.visual_backend,
                    self.face_backend,
                    self.audio_backend,
                    self.agegender_backend,
                    self.detector_backend,
                    self.judge_backend,
                }
            )
        )

    def is_excluded(self, source_value: str) -> bool:
        return source_value in self.excluded_sources


@dataclass(frozen=True)
class ConsistencyVerdict:
    consistent: bool
    verdict_text: str


@dataclass(frozen=True)
class AnnotationOutcome:
    """What happened to one clip during a curation run.

    ``cause`` is ``None`` for a fully scored record; ``unscored:*`` keeps the
    annotation without a score; ``discarded:*`` and ``failed:*`` drop it.
    """

    clip_id: str
    annotation: Optional[ReasoningAnnotation] = None
    cause: Optional[str] = None


_KIND_TAGS = {
    EvidenceKind.VISUAL_GLOBAL: "VISUAL",
    EvidenceKind.FACIAL: "FACE",
    EvidenceKind.AGE_GENDER: "AGE/GENDER",
    EvidenceKind.AUDIO_CAPTION: "AUDIO CAPTION",
    EvidenceKind.ASR_TRANSCRIPT: "SPEECH",
    EvidenceKind.AUDIO_EMOTION: "VOCAL EMOTION",
}


def format_evidence_block(evidence: Sequence[ModalityEvidence]) -> str:
    lines = []
    for item in evidence:
        tag = _KIND_TAGS[item.kind]
        if item.tracklet_id:
            tag = f"{tag} {item.tracklet_id}"
        lines.append(f"- [{tag}] {item.text}")
    return "\n".join(lines)


# --- evidence gathering -------------------------------------------------------

def gather_evidence(
    clip: MediaClip,
    registry: BackendRegistry,
    config: CurationConfig,
    *,
    decoder: Optional[ClipDecoder] = None,
) -> tuple[ModalityEvidence, ...]:
    """Collect one evidence item per modality observation for a clip.

    Order is deterministic: global visual description, then per-tracklet face
    description and age/gender, then audio caption, transcript, and vocal
    emotion when the clip has an audio track. A missing or silent transcript
    is recorded as "(no speech)" so the evidence text stays non-empty.
    """
    frames = sample_frames(clip, config.frame_rate_fps, decoder=decoder)
    images = [f.image for f in frames]
    evidence: list[ModalityEvidence] = []

    visual = registry.get(config.visual_backend)
    description = visual.describe_frames(images, load_template("visual_describe.txt"))
    evidence.append(
        ModalityEvidence(EvidenceKind.VISUAL_GLOBAL, description, config.visual_backend)
    )

    detector = registry.get(config.detector_backend)
    tracklets = extract_tracklets(
        clip, detector, rate_fps=config.frame_rate_fps, decoder=decoder
    )
    face = registry.get(config.face_backend)
    agegender = registry.get(config.agegender_backend)
    for tracklet in tracklets:
        crops = crop_tracklet_frames(
            clip,
            tracklet,
            config.dense_crop_fps,
            sampled_rate_fps=config.frame_rate_fps,
            decoder=decoder,
        )
        crop_images = [c.image for c in crops]
        face_text = face.describe_faces(crop_images, load_template("facial_describe.txt"))
        evidence.append(
            ModalityEvidence(
                EvidenceKind.FACIAL, face_text, config.face_backend, tracklet.tracklet_id
            )
        )
        estimate = agegender.estimate_age_gender(crop_images)
        text = f"apparent age {estimate.age_years:.0f}, {estimate.gender.value.lower()}"
        evidence.append(
            ModalityEvidence(
                EvidenceKind.AGE_GENDER, text, config.agegender_backend, tracklet.tracklet_id
            )
        )

    decoder = decoder or _raise_no_decoder()
    track = decoder.audio(clip)
    if track is not None:
        waveform, rate = track
        waveform = resample_audio(waveform, rate)
        analysis = registry.get(config.audio_backend).analyze_audio(waveform)
        transcript = analysis.transcript.strip() or "(no speech)"
        evidence.extend(
            [
                ModalityEvidence(
                    EvidenceKind.AUDIO_CAPTION, analysis.caption, config.audio_backend
                ),
                ModalityEvidence(
                    EvidenceKind.ASR_TRANSCRIPT, transcript, config.audio_backend
                ),
                ModalityEvidence(
                    EvidenceKind.AUDIO_EMOTION, analysis.vocal_emotion, config.audio_backend
                ),
            ]
        )
    return tuple(evidence)


def _raise_no_decoder():
    raise ValueError("a ClipDecoder is required to read audio")


# --- judge stages --------------------------------------------------------------

def check_consistency(
    clip: MediaClip,
    evidence: Sequence[ModalityEvidence],
    judge,
    descriptor: Optional[BackendDescriptor] = None,
    *,
    sleeper: Callable[[float], None] = time.sleep,
) -> ConsistencyVerdict:
    """Ask the judge whether the evidence items contradict each other.

    With fewer than two items there is nothing to contradict, so the verdict
    is consistent without a judge call. INCONSISTENT is checked before
    CONSISTENT because one contains the other.
    """
    if len(evidence) < 2:
        return ConsistencyVerdict(True, "trivially consistent: single observation")
    prompt = load_template("consistency_check.txt").format(
        clip_id=clip.clip_id, evidence_block=format_evidence_block(evidence)
    )
    desc = descriptor or BackendDescriptor("judge", Capability.JUDGE)
    text = call_with_retries(
        lambda: judge.judge(prompt),
        max_retries=desc.max_retries,
        backoff_base_s=desc.backoff_base_s,
        sleeper=sleeper,
    )
    upper = text.upper()
    if "INCONSISTENT" in upper:
        return ConsistencyVerdict(False, text)
    if "CONSISTENT" in upper:
        return ConsistencyVerdict(True, text)
    raise SynthesisError(f"{clip.clip_id}: unparseable consistency verdict {text!r}")


_LABEL_SPLIT = re.compile(r"[,;]")


def _parse_synthesis(clip_id: str, text: str) -> tuple[str, frozenset[str], int]:
    reason_match = re.search(r"Reason:\s*(.*?)(?:\n\s*Labels:)", text, re.DOTALL)
    labels_match = re.search(r"Labels:\s*(.+)", text)
    intensity_match = re.search(r"Intensity:\s*(-?\d+)", text)
    if not reason_match or not labels_match or not intensity_match:
        raise SynthesisError(
            f"{clip_id}: synthesis response missing Reason/Labels/Intensity: {text!r}"
        )
    reason = reason_match.group(1).strip()
    if not reason:
        raise SynthesisError(f"{clip_id}: empty reason in synthesis response")
    labels = frozenset(
        part.strip().lower() for part in _LABEL_SPLIT.split(labels_match.group(1)) if part.strip()
    )
    if not labels:
        raise SynthesisError(f"{clip_id}: no labels in synthesis response")
    intensity = int(intensity_match.group(1))
    if not 1 <= intensity <= 5:
        raise SynthesisError(f"{clip_id}: intensity {intensity} outside [1, 5]")
    return reason, labels, intensity


def synthesize_annotation(
    clip: MediaClip,
    evidence: Sequence[ModalityEvidence],
    judge,
    descriptor: Optional[BackendDescriptor] = None,
    *,
    sleeper: Callable[[float], None] = time.sleep,
) -> ReasoningAnnotation:
    """Fuse the evidence into one reasoning record via the judge."""
    prompt = load_template("synthesis.txt").format(
        clip_id=clip.clip_id,
        evidence_block=format_evidence_block(evidence),
        subtitle=clip.subtitle or "(none)",
    )
    desc = descriptor or BackendDescriptor("judge", Capability.JUDGE)
    text = call_with_retries(
        lambda: judge.judge(prompt),
        max_retries=desc.max_retries,
        backoff_base_s=desc.backoff_base_s,
        sleeper=sleeper,
    )
    reason, labels, intensity = _parse_synthesis(clip.clip_id, text)
    return ReasoningAnnotation(
        clip_id=clip.clip_id,
        source_dataset=clip.source_dataset,
        evidence=tuple(evidence),
        reason=reason,
        open_vocab_labels=labels,
        intensity=intensity,
    )


def score_alignment(
    annotation: ReasoningAnnotation,
    ground_truth_label: str,
    judge,
    descriptor: Optional[BackendDescriptor] = None,
    *,
    sleeper: Callable[[float], None] = time.sleep,
) -> ReasoningAnnotation:
    """Score annotation-to-label agreement 0..10 and mark it self-reviewed."""
    if not ground_truth_label:
        raise ValueError(f"{annotation.clip_id}: alignment scoring needs a ground-truth label")
    prompt = load_template("alignment_score.txt").format(
        clip_id=annotation.clip_id,
        ground_truth=ground_truth_label,
        reason=annotation.reason,
        labels=", ".join(annotation.sorted_labels()),
        intensity=annotation.intensity,
    )
    score = judge_score(judge, prompt, descriptor, sleeper=sleeper)
    return dataclasses.replace(
        annotation, alignment_score=score, review_status=ReviewStatus.SELF_REVIEWED
    )


# --- human review ----------------------------------------------------------------

@dataclass(frozen=True)
class ReviewEdits:
    reason: Optional[str] = None
    labels: Optional[frozenset[str]] = None
    intensity: Optional[int] = None

    def is_empty(self) -> bool:
        return self.reason is None and self.labels is None and self.intensity is None


def record_review(
    annotation: ReasoningAnnotation,
    verdict: ReviewVerdict,
    reviewer_id: str,
    edits: Optional[ReviewEdits] = None,
    timestamp: Optional[str] = None,
) -> ReasoningAnnotation:
    """Apply one human verdict, appending an audit entry.

    Only self-reviewed or previously edited records accept verdicts; an EDIT
    must change something and records the prior values in its audit entry.
    """
    if annotation.review_status not in _REVIEWABLE:
        raise ReviewStateError(
            f"{annotation.clip_id}: cannot review a record in state "
            f"{annotation.review_status.value}"
        )
    if not reviewer_id:
        raise ValueError("reviewer_id must be non-empty")
    stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")

    if verdict is ReviewVerdict.APPROVE:
        entry = ReviewAuditEntry(verdict.value, reviewer_id, stamp)
        return dataclasses.replace(
            annotation,
            review_status=ReviewStatus.HUMAN_APPROVED,
            audit=annotation.audit + (entry,),
        )
    if verdict is ReviewVerdict.REJECT:
        entry = ReviewAuditEntry(verdict.value, reviewer_id, stamp)
        return dataclasses.replace(
            annotation,
            review_status=ReviewStatus.HUMAN_REJECTED,
            audit=annotation.audit + (entry,),
        )
    if edits is None or edits.is_empty():
        raise ValueError(f"{annotation.clip_id}: EDIT verdict requires edits")
    entry = ReviewAuditEntry(
        verdict.value,
        reviewer_id,
        stamp,
        prior_reason=annotation.reason,
        prior_labels=tuple(annotation.sorted_labels()),
        prior_intensity=annotation.intensity,
    )
    return dataclasses.replace(
        annotation,
        reason=edits.reason if edits.reason is not None else annotation.reason,
        open_vocab_labels=edits.labels if edits.labels is not None else annotation.open_vocab_labels,
        intensity=edits.intensity if edits.intensity is not None else annotation.intensity,
        review_status=ReviewStatus.HUMAN_EDITED,
        audit=annotation.audit + (entry,),
    )


# --- dataset assembly ---------------------------------------------------------------

def filter_sre(
    records: Sequence[ReasoningAnnotation], config: CurationConfig
) -> list[ReasoningAnnotation]:
    """Records whose alignment score clears the threshold, minus exclusions."""
    kept = []
    for record in records:
        if record.alignment_score is None:
            continue
        if record.alignment_score < config.score_threshold:
            continue
        if config.is_excluded(record.source_dataset.value):
            continue
        if record.review_status is ReviewStatus.HUMAN_REJECTED:
            continue
        kept.append(record)
    return sorted(kept, key=lambda r: r.clip_id)


def sample_hre(
    records: Sequence[ReasoningAnnotation],
    sre_clip_ids: frozenset[str],
    config: CurationConfig,
) -> list[ReasoningAnnotation]:
    """Seeded per-source sample of records outside SRE, for human annotation.

    Each source draws ``min(quota, available)`` records with a seed derived
    from the run seed and the source name, so the draw does not depend on
    iteration order or other sources.
    """
    pool: dict[str, list[ReasoningAnnotation]] = {}
    for record in records:
        if record.clip_id in sre_clip_ids:
            continue
        if config.is_excluded(record.source_dataset.value):
            continue
        pool.setdefault(record.source_dataset.value, []).append(record)

    chosen: list[ReasoningAnnotation] = []
    for source in sorted(pool):
        candidates = sorted(pool[source], key=lambda r: r.clip_id)
        take = min(config.hre_quota_per_source, len(candidates))
        seed_bytes = hashlib.sha256(f"{config.random_seed}:{source}".encode()).digest()
        rng = random.Random(int.from_bytes(seed_bytes[:8], "big"))
        chosen.extend(rng.sample(candidates, take))
    return sorted(chosen, key=lambda r: r.clip_id)


# --- full pipeline -------------------------------------------------------------------

def annotate_clip(
    clip: MediaClip,
    registry: BackendRegistry,
    config: CurationConfig,
    *,
    decoder: Optional[ClipDecoder] = None,
    sleeper: Callable[[float], None] = time.sleep,
) -> AnnotationOutcome:
    """Run the per-clip pipeline, folding every failure into an outcome."""
    judge = registry.get(config.judge_backend)
    judge_desc = registry.descriptor(config.judge_backend)
    try:
        evidence = gather_evidence(clip, registry, config, decoder=decoder)
        verdict = check_consistency(clip, evidence, judge, judge_desc, sleeper=sleeper)
        if not verdict.consistent:
            return AnnotationOutcome(clip.clip_id, cause="discarded:inconsistent")
        annotation = synthesize_annotation(clip, evidence, judge, judge_desc, sleeper=sleeper)
    except DecodeError as exc:
        logger.warning("clip %s failed to decode: %s", clip.clip_id, exc)
        return AnnotationOutcome(clip.clip_id, cause="failed:decode-error")
    except SynthesisError as exc:
        logger.warning("clip %s: %s", clip.clip_id, exc)
        return AnnotationOutcome(clip.clip_id, cause="discarded:synthesis-error")
    except BackendError as exc:
        logger.warning("clip %s backend failure: %s", clip.clip_id, exc)
        return AnnotationOutcome(clip.clip_id, cause="failed:backend-error")

    if not clip.ground_truth_label:
        return AnnotationOutcome(clip.clip_id, annotation, "unscored:no-ground-truth")
    try:
        scored = score_alignment(
            annotation, clip.ground_truth_label, judge, judge_desc, sleeper=sleeper
        )
    except ScoringError as exc:
        logger.warning("clip %s scoring failed: %s", clip.clip_id, exc)
        return AnnotationOutcome(clip.clip_id, annotation, "unscored:scoring-error")
    except BackendError as exc:
        logger.warning("clip %s backend failure: %s", clip.clip_id, exc)
        return AnnotationOutcome(clip.clip_id, annotation, "unscored:backend-error")
    return AnnotationOutcome(clip.clip_id, scored, None)


@dataclass(frozen=True)
class CurationRunReport:
    outcomes: tuple[AnnotationOutcome, ...]
    sre: DatasetManifest
    hre: DatasetManifest
    cause_counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "total_clips": len(self.outcomes),
            "cause_counts": dict(sorted(self.cause_counts.items())),
            "sre": {
                "record_count": len(self.sre.records),
                "per_source_counts": dict(sorted(self.sre.per_source_counts.items())),
            },
            "hre": {
                "record_count": len(self.hre.records),
                "per_source_counts": dict(sorted(self.hre.per_source_counts.items())),
            },
        }


def run_curation(
    clips: Sequence[MediaClip],
    registry: BackendRegistry,
    config: CurationConfig,
    output_dir: str | Path,
    *,
    decoder: Optional[ClipDecoder] = None,
    sleeper: Callable[[float], None] = time.sleep,
) -> CurationRunReport:
    """Annotate every clip, build the SRE and HRE manifests, write them out.

    Writes ``sre.jsonl``, ``hre.jsonl`` (with headers) and ``run_report.json``
    under ``output_dir``. Output bytes are a pure function of the inputs.
    """
    seen: set[str] = set()
    for clip in clips:
        if clip.clip_id in seen:
            raise ValueError(f"duplicate clip_id {clip.clip_id}")
        seen.add(clip.clip_id)

    with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
        outcomes = list(
            pool.map(
                lambda c: annotate_clip(c, registry, config, decoder=decoder, sleeper=sleeper),
                clips,
            )
        )
    outcomes.sort(key=lambda o: o.clip_id)

    annotations = [o.annotation for o in outcomes if o.annotation is not None]
    provenance = Provenance(
        score_threshold=config.score_threshold,
        random_seed=config.random_seed,
        backend_ids=config.backend_ids(),
        template_hash=template_fingerprint(),
    )
    sre_records = filter_sre(annotations, config)
    sre = build_manifest("SRE", sre_records, provenance)
    hre_records = sample_hre(annotations, sre.clip_ids(), config)
    hre = build_manifest("HRE", hre_records, provenance)

    cause_counts: dict[str, int] = {}
    for outcome in outcomes:
        key = outcome.cause or "scored"
        cause_counts[key] = cause_counts.get(key, 0) + 1

    report = CurationRunReport(tuple(outcomes), sre, hre, cause_counts)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(sre, output_dir / "sre.jsonl")
    write_manifest(hre, output_dir / "hre.jsonl")
    (output_dir / "run_report.json").write_text(
        json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return report
