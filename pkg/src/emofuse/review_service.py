"""HTTP review service for human verdicts over self-reviewed records.

A small FastAPI app over an in-memory :class:`ReviewStore`. Reviewers pull
work from a queue with short leases so two reviewers never hold the same
record, and every verdict POST carries the record version it was based on;
a stale version is rejected with 409 so edits can never clobber each other.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel

from .corpus import (
    MediaClip,
    ReasoningAnnotation,
    ReviewStatus,
    ValidationError,
    record_to_json,
)
from .curation import ReviewEdits, ReviewStateError, ReviewVerdict, record_review

DEFAULT_LEASE_S = 300.0


class StaleVersionError(RuntimeError):
    def __init__(self, clip_id: str, given: int, current: int):
        super().__init__(
            f"{clip_id}: verdict was based on version {given}, current is {current}"
        )
        self.current = current


@dataclass(frozen=True)
class StoredRecord:
    record: ReasoningAnnotation
    version: int


class ReviewStore:
    """Versioned record store with per-record reviewer leases."""

    def __init__(
        self,
        records: dict[str, ReasoningAnnotation],
        clips: Optional[dict[str, MediaClip]] = None,
        lease_timeout_s: float = DEFAULT_LEASE_S,
        now_fn=time.monotonic,
    ):
        self._lock = threading.Lock()
        self._records = dict(records)
        self._versions = {clip_id: 0 for clip_id in records}
        self._leases: dict[str, tuple[str, float]] = {}
        self.clips = dict(clips or {})
        self.lease_timeout_s = lease_timeout_s
        self.now_fn = now_fn

    def _lease_holder(self, clip_id: str, now: float) -> Optional[str]:
        lease = self._leases.get(clip_id)
        if lease is None or lease[1] <= now:
            return None
        return lease[0]

    def queue_next(self, reviewer_id: str) -> Optional[StoredRecord]:
        """Lease the next reviewable record to ``reviewer_id``.

        A reviewer holding an unexpired lease gets the same record again;
        records leased to someone else are skipped.
        """
        with self._lock:
            now = self.now_fn()
            candidates = []
            for clip_id in sorted(self._records):
                record = self._records[clip_id]
                if record.review_status is not ReviewStatus.SELF_REVIEWED:
                    continue
                holder = self._lease_holder(clip_id, now)
                if holder == reviewer_id:
                    self._leases[clip_id] = (reviewer_id, now + self.lease_timeout_s)
                    return StoredRecord(record, self._versions[clip_id])
                if holder is None:
                    candidates.append(clip_id)
            if not candidates:
                return None
            clip_id = candidates[0]
            self._leases[clip_id] = (reviewer_id, now + self.lease_timeout_s)
            return StoredRecord(self._records[clip_id], self._versions[clip_id])

    def get(self, clip_id: str) -> StoredRecord:
        with self._lock:
            return StoredRecord(self._records[clip_id], self._versions[clip_id])

    def apply_review(
        self,
        clip_id: str,
        verdict: ReviewVerdict,
        reviewer_id: str,
        record_version: int,
        edits: Optional[ReviewEdits] = None,
    ) -> StoredRecord:
        with self._lock:
            record = self._records[clip_id]
            current = self._versions[clip_id]
            if record_version != current:
                raise StaleVersionError(clip_id, record_version, current)
            updated = record_review(record, verdict, reviewer_id, edits)
            self._records[clip_id] = updated
            self._versions[clip_id] = current + 1
            self._leases.pop(clip_id, None)
            return StoredRecord(updated, current + 1)

    def records(self) -> dict[str, ReasoningAnnotation]:
        with self._lock:
            return dict(self._records)

    def status_counts(self) -> dict[str, int]:
        with self._lock:
            counts: dict[str, int] = {}
            for record in self._records.values():
                key = record.review_status.value
                counts[key] = counts.get(key, 0) + 1
            return counts


class EditsBody(BaseModel):
    reason: Optional[str] = None
    labels: Optional[list[str]] = None
    intensity: Optional[int] = None

    def to_edits(self) -> ReviewEdits:
        return ReviewEdits(
            reason=self.reason,
            labels=frozenset(self.labels) if self.labels is not None else None,
            intensity=self.intensity,
        )


class ReviewBody(BaseModel):
    verdict: str
    reviewer_id: str
    record_version: int
    edits: Optional[EditsBody] = None


def _record_payload(stored: StoredRecord) -> dict:
    payload = record_to_json(stored.record)
    payload["record_version"] = stored.version
    return payload


def create_app(store: ReviewStore) -> FastAPI:
    app = FastAPI(title="emofuse review service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.store = store

    @app.get("/api/queue/next")
    def queue_next(reviewer: str):
        if not reviewer:
            return JSONResponse({"detail": "reviewer must be non-empty"}, status_code=400)
        stored = store.queue_next(reviewer)
        if stored is None:
            return Response(status_code=204)
        return _record_payload(stored)

    @app.get("/api/queue/stats")
    def queue_stats():
        return {"status_counts": store.status_counts(), "total": len(store.records())}

    @app.get("/api/record/{clip_id}")
    def get_record(clip_id: str):
        try:
            stored = store.get(clip_id)
        except KeyError:
            return JSONResponse({"detail": f"unknown clip_id {clip_id}"}, status_code=404)
        return _record_payload(stored)

    @app.post("/api/record/{clip_id}/review")
    def post_review(clip_id: str, body: ReviewBody):
        try:
            verdict = ReviewVerdict(body.verdict)
        except ValueError:
            return JSONResponse(
                {"detail": f"verdict must be one of APPROVE/REJECT/EDIT, got {body.verdict!r}"},
                status_code=400,
            )
        edits = body.edits.to_edits() if body.edits is not None else None
        try:
            stored = store.apply_review(
                clip_id, verdict, body.reviewer_id, body.record_version, edits
            )
        except KeyError:
            return JSONResponse({"detail": f"unknown clip_id {clip_id}"}, status_code=404)
        except StaleVersionError as exc:
            return JSONResponse(
                {
                    "detail": str(exc),
                    "reason": "stale_version",
                    "current_version": exc.current,
                },
                status_code=409,
            )
        except ReviewStateError as exc:
            return JSONResponse(
                {"detail": str(exc), "reason": "already_reviewed"}, status_code=409
            )
        except (ValidationError, ValueError) as exc:
            return JSONResponse({"detail": str(exc)}, status_code=400)
        return _record_payload(stored)

    @app.get("/api/media/{clip_id}")
    def get_media(clip_id: str):
        clip = store.clips.get(clip_id)
        if clip is None:
            return JSONResponse({"detail": f"unknown clip_id {clip_id}"}, status_code=404)
        path = Path(clip.media_uri)
        if not path.exists():
            return JSONResponse(
                {"detail": f"no local media for {clip_id}"}, status_code=404
            )
        return FileResponse(path)

    return app
