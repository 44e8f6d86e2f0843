"""Domain records and persistent manifest formats shared by the whole toolkit.

All record types are immutable value objects validated on construction, so a
record held anywhere in the pipeline is known to be well-formed. Manifests are
persisted as a JSONL record file plus a sibling ``*.header.json`` file; writes
are byte-deterministic for equal manifests regardless of record insertion
order, which keeps golden-file tests and rerun diffs meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence


class ValidationError(ValueError):
    """A record or manifest violates one of its invariants."""


class ManifestParseError(ValueError):
    """A JSONL record line could not be parsed into a valid record."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class ManifestFormatError(ValueError):
    """The manifest header is missing or disagrees with the record file."""


class SourceDataset(Enum):
    DFEW = "DFEW"
    MAFW = "MAFW"
    MER24 = "MER24"
    CAER = "CAER"
    AFEW_VA = "AFEW_VA"
    FERV39K = "FERV39K"
    RAVDESS = "RAVDESS"
    OTHER = "OTHER"


class EvidenceKind(Enum):
    VISUAL_GLOBAL = "VISUAL_GLOBAL"
    FACIAL = "FACIAL"
    AUDIO_CAPTION = "AUDIO_CAPTION"
    ASR_TRANSCRIPT = "ASR_TRANSCRIPT"
    AUDIO_EMOTION = "AUDIO_EMOTION"
    AGE_GENDER = "AGE_GENDER"


#: Evidence kinds that describe one tracked face and must point at a tracklet.
_TRACKLET_KINDS = frozenset({EvidenceKind.FACIAL, EvidenceKind.AGE_GENDER})


class ReviewStatus(Enum):
    UNREVIEWED = "UNREVIEWED"
    SELF_REVIEWED = "SELF_REVIEWED"
    HUMAN_APPROVED = "HUMAN_APPROVED"
    HUMAN_REJECTED = "HUMAN_REJECTED"
    HUMAN_EDITED = "HUMAN_EDITED"


@dataclass(frozen=True)
class MediaClip:
    """One source video (with optional audio track) and its provenance."""

    clip_id: str
    source_dataset: SourceDataset
    media_uri: str
    duration_s: float
    fps: float
    ground_truth_label: Optional[str] = None
    subtitle: Optional[str] = None

    def __post_init__(self):
        if not self.clip_id:
            raise ValidationError("clip_id must be non-empty")
        if self.duration_s <= 0:
            raise ValidationError(f"duration_s must be > 0, got {self.duration_s}")
        if self.fps <= 0:
            raise ValidationError(f"fps must be > 0, got {self.fps}")


@dataclass(frozen=True)
class ModalityEvidence:
    """One piece of modality-specific evidence produced by a backend."""

    kind: EvidenceKind
    text: str
    backend_id: str
    tracklet_id: Optional[str] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValidationError(f"{self.kind.value} evidence text must be non-empty")
        if self.kind in _TRACKLET_KINDS and not self.tracklet_id:
            raise ValidationError(f"{self.kind.value} evidence must reference a tracklet_id")
        if self.kind not in _TRACKLET_KINDS and self.tracklet_id is not None:
            raise ValidationError(
                f"{self.kind.value} evidence is clip-global and must not carry a tracklet_id"
            )


@dataclass(frozen=True)
class ReviewAuditEntry:
    """Audit-trail entry appended when a human verdict touches a record."""

    verdict: str
    reviewer_id: str
    timestamp: str
    prior_reason: Optional[str] = None
    prior_labels: Optional[tuple[str, ...]] = None
    prior_intensity: Optional[int] = None


@dataclass(frozen=True)
class ReasoningAnnotation:
    """The per-clip output record of the curation pipeline.

    ``alignment_score`` is ``None`` while the record is unscored. The audit
    trail grows only through human review verdicts.
    """

    clip_id: str
    source_dataset: SourceDataset
    evidence: tuple[ModalityEvidence, ...]
    reason: str
    open_vocab_labels: frozenset[str]
    intensity: int
    alignment_score: Optional[int] = None
    review_status: ReviewStatus = ReviewStatus.UNREVIEWED
    audit: tuple[ReviewAuditEntry, ...] = ()

    def __post_init__(self):
        if not self.clip_id:
            raise ValidationError("clip_id must be non-empty")
        if not self.open_vocab_labels:
            raise ValidationError("open_vocab_labels must be non-empty")
        for label in self.open_vocab_labels:
            if not label or label != label.lower():
                raise ValidationError(f"open_vocab_labels must be lowercase, got {label!r}")
        if not 1 <= self.intensity <= 5:
            raise ValidationError(f"intensity must be in [1, 5], got {self.intensity}")
        if self.alignment_score is not None and not 0 <= self.alignment_score <= 10:
            raise ValidationError(
                f"alignment_score must be in [0, 10], got {self.alignment_score}"
            )

    def sorted_labels(self) -> list[str]:
        return sorted(self.open_vocab_labels)


@dataclass(frozen=True)
class Provenance:
    """How a manifest was produced; written verbatim into its header."""

    score_threshold: int
    random_seed: int
    backend_ids: tuple[str, ...] = ()
    created_at: Optional[str] = None
    template_hash: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: tuple[ReasoningAnnotation, ...]
    per_source_counts: Mapping[str, int]
    provenance: Provenance

    def __post_init__(self):
        seen: set[str] = set()
        for record in self.records:
            if record.clip_id in seen:
                raise ValidationError(f"duplicate clip_id {record.clip_id}")
            seen.add(record.clip_id)
        derived = count_per_source(self.records)
        declared = {k: v for k, v in self.per_source_counts.items() if v}
        if declared != derived:
            raise ValidationError(
                f"per_source_counts {dict(declared)} disagree with records {derived}"
            )
        if sum(self.per_source_counts.values()) != len(self.records):
            raise ValidationError("per_source_counts must sum to the record count")
        if self.name.startswith("SRE"):
            threshold = self.provenance.score_threshold
            for record in self.records:
                if record.alignment_score is None or record.alignment_score < threshold:
                    raise ValidationError(
                        f"record {record.clip_id} scores below the SRE threshold {threshold}"
                    )

    def clip_ids(self) -> frozenset[str]:
        return frozenset(r.clip_id for r in self.records)


def count_per_source(records: Iterable[ReasoningAnnotation]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for record in records:
        key = record.source_dataset.value
        counts[key] = counts.get(key, 0) + 1
    return counts


def build_manifest(
    name: str, records: Sequence[ReasoningAnnotation], provenance: Provenance
) -> DatasetManifest:
    """Assemble a manifest, deriving per-source counts from the records."""
    return DatasetManifest(
        name=name,
        records=tuple(records),
        per_source_counts=count_per_source(records),
        provenance=provenance,
    )


# --- serialization ---------------------------------------------------------

def _evidence_to_json(e: ModalityEvidence) -> dict:
    return {
        "kind": e.kind.value,
        "text": e.text,
        "backend_id": e.backend_id,
        "tracklet_id": e.tracklet_id,
    }


def _audit_to_json(a: ReviewAuditEntry) -> dict:
    return {
        "verdict": a.verdict,
        "reviewer_id": a.reviewer_id,
        "timestamp": a.timestamp,
        "prior_reason": a.prior_reason,
        "prior_labels": list(a.prior_labels) if a.prior_labels is not None else None,
        "prior_intensity": a.prior_intensity,
    }


def record_to_json(record: ReasoningAnnotation) -> dict:
    return {
        "clip_id": record.clip_id,
        "source_dataset": record.source_dataset.value,
        "evidence": [_evidence_to_json(e) for e in record.evidence],
        "reason": record.reason,
        "open_vocab_labels": sorted(record.open_vocab_labels),
        "intensity": record.intensity,
        "alignment_score": record.alignment_score,
        "review_status": record.review_status.value,
        "audit": [_audit_to_json(a) for a in record.audit],
    }


def record_from_json(payload: dict) -> ReasoningAnnotation:
    try:
        evidence = tuple(
            ModalityEvidence(
                kind=EvidenceKind(e["kind"]),
                text=e["text"],
                backend_id=e["backend_id"],
                tracklet_id=e.get("tracklet_id"),
            )
            for e in payload["evidence"]
        )
        audit = tuple(
            ReviewAuditEntry(
                verdict=a["verdict"],
                reviewer_id=a["reviewer_id"],
                timestamp=a["timestamp"],
                prior_reason=a.get("prior_reason"),
                prior_labels=tuple(a["prior_labels"]) if a.get("prior_labels") is not None else None,
                prior_intensity=a.get("prior_intensity"),
            )
            for a in payload.get("audit", [])
        )
        return ReasoningAnnotation(
            clip_id=payload["clip_id"],
            source_dataset=SourceDataset(payload["source_dataset"]),
            evidence=evidence,
            reason=payload["reason"],
            open_vocab_labels=frozenset(payload["open_vocab_labels"]),
            intensity=payload["intensity"],
            alignment_score=payload.get("alignment_score"),
            review_status=ReviewStatus(payload["review_status"]),
            audit=audit,
        )
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"record is missing or has malformed field: {exc}") from exc


def _provenance_to_json(p: Provenance) -> dict:
    return {
        "score_threshold": p.score_threshold,
        "random_seed": p.random_seed,
        "backend_ids": list(p.backend_ids),
        "created_at": p.created_at,
        "template_hash": p.template_hash,
    }


def _provenance_from_json(payload: dict) -> Provenance:
    return Provenance(
        score_threshold=payload["score_threshold"],
        random_seed=payload["random_seed"],
        backend_ids=tuple(payload.get("backend_ids", ())),
        created_at=payload.get("created_at"),
        template_hash=payload.get("template_hash"),
    )


def _header_path(destination: Path) -> Path:
    stem = destination.name
    if stem.endswith(".jsonl"):
        stem = stem[: -len(".jsonl")]
    return destination.with_name(stem + ".header.json")


def write_manifest(manifest: DatasetManifest, destination: str | Path) -> Path:
    """Write records as sorted JSONL plus a sibling header file.

    Records are sorted by clip_id and serialized with sorted keys, so output
    bytes depend only on manifest content. Returns the record file path.
    """
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    records = sorted(manifest.records, key=lambda r: r.clip_id)
    lines = [
        json.dumps(record_to_json(r), sort_keys=True, separators=(",", ":")) for r in records
    ]
    destination.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    header = {
        "name": manifest.name,
        "record_count": len(records),
        "per_source_counts": {
            k: v for k, v in sorted(manifest.per_source_counts.items()) if v
        },
        "provenance": _provenance_to_json(manifest.provenance),
    }
    _header_path(destination).write_text(
        json.dumps(header, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return destination


def read_manifest(source: str | Path) -> DatasetManifest:
    """Read a manifest written by :func:`write_manifest`.

    Round-trips field-for-field. Malformed record lines raise
    :class:`ManifestParseError` carrying the 1-based line number; a missing or
    inconsistent header raises :class:`ManifestFormatError`.
    """
    source = Path(source)
    header_path = _header_path(source)
    if not header_path.exists():
        raise ManifestFormatError(f"missing manifest header {header_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"unreadable manifest header: {exc}") from exc

    records = []
    with source.open(encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON: {exc}", line_number) from exc
            try:
                records.append(record_from_json(payload))
            except ValidationError as exc:
                raise ManifestParseError(str(exc), line_number) from exc

    if header.get("record_count") != len(records):
        raise ManifestFormatError(
            f"header record_count {header.get('record_count')} disagrees with "
            f"{len(records)} record lines"
        )
    return DatasetManifest(
        name=header["name"],
        records=tuple(records),
        per_source_counts=dict(header.get("per_source_counts", {})),
        provenance=_provenance_from_json(header["provenance"]),
    )


# --- clip listings ---------------------------------------------------------

def clip_to_json(clip: MediaClip) -> dict:
    return {
        "clip_id": clip.clip_id,
        "source_dataset": clip.source_dataset.value,
        "media_uri": clip.media_uri,
        "duration_s": clip.duration_s,
        "fps": clip.fps,
        "ground_truth_label": clip.ground_truth_label,
        "subtitle": clip.subtitle,
    }


def clip_from_json(payload: dict) -> MediaClip:
    try:
        return MediaClip(
            clip_id=payload["clip_id"],
            source_dataset=SourceDataset(payload["source_dataset"]),
            media_uri=payload["media_uri"],
            duration_s=payload["duration_s"],
            fps=payload["fps"],
            ground_truth_label=payload.get("ground_truth_label"),
            subtitle=payload.get("subtitle"),
        )
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"clip is missing or has malformed field: {exc}") from exc


def write_clips(clips: Sequence[MediaClip], destination: str | Path) -> Path:
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    for clip in clips:
        if clip.clip_id in seen:
            raise ValidationError(f"duplicate clip_id {clip.clip_id}")
        seen.add(clip.clip_id)
    lines = [
        json.dumps(clip_to_json(c), sort_keys=True, separators=(",", ":"))
        for c in sorted(clips, key=lambda c: c.clip_id)
    ]
    destination.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return destination


def read_clips(source: str | Path) -> list[MediaClip]:
    clips: list[MediaClip] = []
    seen: set[str] = set()
    with Path(source).open(encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                clip = clip_from_json(json.loads(line))
            except (json.JSONDecodeError, ValidationError) as exc:
                raise ManifestParseError(str(exc), line_number) from exc
            if clip.clip_id in seen:
                raise ManifestParseError(f"duplicate clip_id {clip.clip_id}", line_number)
            seen.add(clip.clip_id)
            clips.append(clip)
    return clips
