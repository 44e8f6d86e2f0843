"""A small scripted corpus for demos, smoke tests, and the CLI mock mode.

Twelve clips across six sources, one of them from the excluded studio-only
source. The scripted judge gives three clips alignment scores below the
default threshold, so the demo SRE always lands on the same eight records.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

from .backends import BackendRegistry, build_mock_registry
from .corpus import MediaClip, SourceDataset, write_clips
from .curation import CurationConfig
from .media import SyntheticDecoder

#: (clip_id, source, duration_s, ground truth, has audio)
_DEMO_ROWS = [
    ("clip-001", SourceDataset.DFEW, 4.0, "happy", True),
    ("clip-002", SourceDataset.DFEW, 6.5, "sad", True),
    ("clip-003", SourceDataset.DFEW, 3.0, "angry", True),
    ("clip-004", SourceDataset.MAFW, 5.0, "surprised", True),
    ("clip-005", SourceDataset.MAFW, 7.0, "neutral", True),
    ("clip-006", SourceDataset.MAFW, 4.5, "fearful", False),
    ("clip-007", SourceDataset.MER24, 5.5, "happy", True),
    ("clip-008", SourceDataset.MER24, 6.0, "disgusted", True),
    ("clip-009", SourceDataset.CAER, 3.5, "sad", True),
    ("clip-010", SourceDataset.CAER, 8.0, "angry", True),
    ("clip-011", SourceDataset.FERV39K, 4.0, "neutral", True),
    ("clip-012", SourceDataset.RAVDESS, 3.5, "calm", True),
]

#: Demo clips the scripted judge scores below the default threshold of 5.
BELOW_THRESHOLD_CLIP_IDS = ("clip-004", "clip-007", "clip-010")

_SCRIPTED_SCORES = {
    "clip-001": 5,  # exactly at the threshold: kept
    "clip-002": 8,
    "clip-003": 9,
    "clip-004": 3,
    "clip-005": 7,
    "clip-006": 6,
    "clip-007": 2,
    "clip-008": 10,
    "clip-009": 6,
    "clip-010": 4,  # just under the threshold: filtered
    "clip-011": 8,
    "clip-012": 9,  # high score, but the source is excluded
}


def demo_clips() -> list[MediaClip]:
    clips = []
    for clip_id, source, duration, label, has_audio in _DEMO_ROWS:
        uri = f"mem://{clip_id}" + ("" if has_audio else "#noaudio")
        clips.append(
            MediaClip(
                clip_id=clip_id,
                source_dataset=source,
                media_uri=uri,
                duration_s=duration,
                fps=25.0,
                ground_truth_label=label,
                subtitle=f"demo subtitle for {clip_id}" if has_audio else None,
            )
        )
    return clips


def demo_judge_rules() -> list[tuple[Sequence[str], str]]:
    """Alignment answers per clip; other judge tasks fall back to defaults."""
    return [
        (("rate annotation quality", clip_id), f"Score: {score}")
        for clip_id, score in _SCRIPTED_SCORES.items()
    ]


def build_demo_registry() -> BackendRegistry:
    return build_mock_registry(judge_rules=demo_judge_rules())


def demo_config(**overrides) -> CurationConfig:
    defaults = dict(random_seed=20240817, max_workers=4)
    defaults.update(overrides)
    return CurationConfig(**defaults)


def demo_decoder() -> SyntheticDecoder:
    return SyntheticDecoder()


def write_demo_fixture(destination: str | Path) -> Path:
    """Write the demo clip listing as JSONL; returns the file path."""
    return write_clips(demo_clips(), destination)


def expected_sre_clip_ids() -> list[str]:
    kept = [
        clip_id
        for clip_id, score in _SCRIPTED_SCORES.items()
        if score >= 5 and clip_id != "clip-012"
    ]
    return sorted(kept)
