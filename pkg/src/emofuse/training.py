"""Three-phase instruction training: example builders and the phase runner.

Phase 1 aligns the audio projector on captioning/transcription pairs,
phase 2 aligns the facial projector on option-list emotion questions, and
phase 3 fine-tunes the three projectors plus the decoder on curated
reasoning records. Freezing is exact: only the configured parameter
blocks may change during a phase.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from .corpus import ReasoningAnnotation, ReviewStatus
from .media import AUDIO_RATE, compute_log_mel
from .model import (
    TRAINABLE_BLOCKS,
    EmoFuseModel,
    Modality,
    save_checkpoint,
    set_trainable,
)

logger = logging.getLogger(__name__)


class TrainingConfigError(Exception):
    """Phase configuration that cannot be run."""


class TrainingDataError(Exception):
    """Input records that cannot be turned into instruction examples."""


class TrainingPhase(Enum):
    AUDIO_ALIGN = 1
    FACIAL_ALIGN = 2
    MULTIMODAL_SFT = 3


# --- prompt pools -----------------------------------------------------------------

AUDIO_CAPTION_PROMPTS = (
    "Listen to this audio clip and provide its caption in English.",
    "Could you summarise what's happening in this audio?",
    "Please describe the audio in English.",
    "Describe the following audio in a caption.",
)

AUDIO_TRANSCRIPT_PROMPTS = (
    "Write down the content of the speech you heard.",
    "Give me the transcription of the speech you heard.",
    "Please transcribe the speech into a written format.",
    "Recognize the speech and write it down in a written format.",
    "Recognize the speech and give me the transcription.",
)

EMOTION_OPTION_PROMPTS = (
    "As an emotional recognition expert, when you observe the video, what is "
    "the primary emotion exhibited by the characters?",
    "Which emotion exhibited by the characters can you confirm as the primary "
    "emotion?",
    "What primary emotion conveyed by the characters can you clearly identify?",
    "Which emotion can you recognize being expressed by the characters?",
)

REASONING_PROMPTS = (
    "What insights can we gain about the character's emotional state from "
    "their actions and facial expressions, as well as the accompanying audio "
    "and visual cues in the video? Please provide a detailed analysis.",
    "Based on the character's physical actions and emotional expressions, "
    "along with the video's sound and visual context, what can we deduce "
    "about their emotional state? Please elaborate thoroughly.",
    "What can we interpret about the character's emotional state through "
    "their expressive actions and visual cues, as well as the audio elements "
    "present in the video? Please provide an in-depth analysis.",
)

OPEN_VOCAB_PROMPTS = (
    "Which emotions does the person in the video display? Answer with a "
    "comma-separated list of emotion words.",
    "List every emotion conveyed by the person in this clip, separated by "
    "commas.",
)


class _TemplateCycle:
    """Deal templates round-robin after one seeded shuffle of the pool."""

    def __init__(self, pool: Sequence[str], seed, salt: str):
        order = list(pool)
        random.Random(f"{seed}:{salt}").shuffle(order)
        self._order = order
        self._dealt = 0

    def take(self) -> str:
        template = self._order[self._dealt % len(self._order)]
        self._dealt += 1
        return template


# --- example records --------------------------------------------------------------

_TEXT_MODALITIES = frozenset({Modality.VISUAL, Modality.AUDIO})


@dataclass(frozen=True)
class InstructionExample:
    media_id: str
    prompt: str
    answer: str
    modalities: frozenset

    def __post_init__(self):
        if not self.media_id:
            raise TrainingDataError("media_id must be non-empty")
        if not self.prompt.strip() or not self.answer.strip():
            raise TrainingDataError(
                f"{self.media_id}: prompt and answer must be non-empty"
            )
        if not self.modalities or not self.modalities <= _TEXT_MODALITIES:
            raise TrainingDataError(
                f"{self.media_id}: modalities must be a non-empty subset of "
                "{VISUAL, AUDIO}"
            )


@dataclass(frozen=True)
class AudioRecord:
    """A captioned or transcribed audio snippet for phase-1 alignment."""

    audio_id: str
    caption: Optional[str] = None
    transcript: Optional[str] = None


@dataclass(frozen=True)
class ClassificationRecord:
    """A categorically labelled clip plus its dataset's label space."""

    clip_id: str
    label: str
    label_space: tuple

    def __post_init__(self):
        if not self.label_space:
            raise TrainingDataError(f"{self.clip_id}: empty label space")
        if len(set(self.label_space)) != len(self.label_space):
            raise TrainingDataError(f"{self.clip_id}: duplicate options")


# --- builders ---------------------------------------------------------------------


def build_phase1_examples(records: Sequence[AudioRecord], seed=0) -> list:
    """Pair each audio record with caption and/or transcript prompts."""
    captions = _TemplateCycle(AUDIO_CAPTION_PROMPTS, seed, "caption")
    transcripts = _TemplateCycle(AUDIO_TRANSCRIPT_PROMPTS, seed, "transcript")
    examples = []
    for record in records:
        matched = False
        if record.caption and record.caption.strip():
            examples.append(
                InstructionExample(
                    media_id=record.audio_id,
                    prompt=captions.take(),
                    answer=record.caption.strip(),
                    modalities=frozenset({Modality.AUDIO}),
                )
            )
            matched = True
        if record.transcript and record.transcript.strip():
            examples.append(
                InstructionExample(
                    media_id=record.audio_id,
                    prompt=transcripts.take(),
                    answer=record.transcript.strip(),
                    modalities=frozenset({Modality.AUDIO}),
                )
            )
            matched = True
        if not matched:
            logger.info(
                "skipping %s: neither caption nor transcript", record.audio_id
            )
    return examples


def build_phase2_examples(records: Sequence[ClassificationRecord], seed=0) -> list:
    """Render option-list emotion questions; the answer is the exact label."""
    stems = _TemplateCycle(EMOTION_OPTION_PROMPTS, seed, "options")
    examples = []
    for record in records:
        if record.label not in record.label_space:
            raise TrainingDataError(
                f"{record.clip_id}: label {record.label!r} not in the option list"
            )
        options = list(record.label_space)
        random.Random(f"{seed}:{record.clip_id}:options").shuffle(options)
        prompt = f"{stems.take()} {', '.join(options)}"
        examples.append(
            InstructionExample(
                media_id=record.clip_id,
                prompt=prompt,
                answer=record.label,
                modalities=frozenset({Modality.VISUAL}),
            )
        )
    return examples


def build_phase3_examples(
    sre_records: Sequence[ReasoningAnnotation],
    hre_records: Sequence[ReasoningAnnotation],
    seed=0,
) -> list:
    """Two examples per curated record: free-form reasoning and label listing.

    Records a reviewer rejected contribute nothing.
    """
    reasoning = _TemplateCycle(REASONING_PROMPTS, seed, "reasoning")
    listing = _TemplateCycle(OPEN_VOCAB_PROMPTS, seed, "labels")
    both = frozenset({Modality.VISUAL, Modality.AUDIO})
    examples = []
    for record in list(sre_records) + list(hre_records):
        if record.review_status is ReviewStatus.HUMAN_REJECTED:
            continue
        examples.append(
            InstructionExample(
                media_id=record.clip_id,
                prompt=reasoning.take(),
                answer=record.reason,
                modalities=both,
            )
        )
        examples.append(
            InstructionExample(
                media_id=record.clip_id,
                prompt=listing.take(),
                answer=", ".join(record.sorted_labels()),
                modalities=both,
            )
        )
    return examples


# --- tokenization -----------------------------------------------------------------

RESERVED_TOKEN_IDS = 4  # 0 pad, 1 bos, 2 sep, 3 eos
EOS_ID = 3

_WORD_RE = re.compile(r"[a-z0-9']+")


class ToyTokenizer:
    """Stable word-hash tokenizer; ids below RESERVED_TOKEN_IDS are control slots."""

    def __init__(self, vocab_size: int):
        if vocab_size <= RESERVED_TOKEN_IDS:
            raise ValueError(f"vocab_size must exceed {RESERVED_TOKEN_IDS}")
        self.vocab_size = vocab_size

    def encode(self, text: str) -> list:
        span = self.vocab_size - RESERVED_TOKEN_IDS
        ids = []
        for word in _WORD_RE.findall(text.lower()):
            digest = hashlib.sha1(word.encode("utf-8")).digest()
            ids.append(RESERVED_TOKEN_IDS + int.from_bytes(digest[:8], "big") % span)
        return ids


# --- media provisioning -----------------------------------------------------------


def uniform_frame_times(duration_s: float, count: int) -> list:
    """Midpoints of `count` equal slices of the clip."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    step = duration_s / count
    return [(k + 0.5) * step for k in range(count)]


class MediaProvider(Protocol):
    def log_mel(self, media_id: str) -> np.ndarray: ...

    def frames(self, media_id: str, count: int) -> list: ...

    def face_crops(self, media_id: str, count: int) -> list: ...


class SyntheticMediaProvider:
    """Deterministic stand-in media keyed on the media id.

    Frames and crops are generated at uniformly spaced timestamps so the
    sampling contract is observable without real video files.
    """

    def __init__(self, duration_s=1.0, frame_size=16, crop_size=12):
        self.duration_s = duration_s
        self.frame_size = frame_size
        self.crop_size = crop_size

    def _rng(self, media_id: str, salt: str) -> np.random.Generator:
        digest = hashlib.sha256(f"{media_id}:{salt}".encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def log_mel(self, media_id: str) -> np.ndarray:
        samples = int(AUDIO_RATE * self.duration_s)
        wave = self._rng(media_id, "audio").standard_normal(samples)
        return compute_log_mel(wave).values

    def _image(self, media_id: str, salt: str, size: int) -> np.ndarray:
        rng = self._rng(media_id, salt)
        return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)

    def frames(self, media_id: str, count: int) -> list:
        times = uniform_frame_times(self.duration_s, count)
        return [
            self._image(media_id, f"frame:{t:.6f}", self.frame_size) for t in times
        ]

    def face_crops(self, media_id: str, count: int) -> list:
        times = uniform_frame_times(self.duration_s, count)
        return [
            self._image(media_id, f"crop:{t:.6f}", self.crop_size) for t in times
        ]


# --- phase configuration ------------------------------------------------------------

_PHASE_DEFAULTS = {
    TrainingPhase.AUDIO_ALIGN: dict(
        epochs=1,
        learning_rate=1e-3,
        batch_size=256,
        frames_per_video=8,
        trainable_blocks=frozenset({"audio_projector"}),
        dataset_selector="audio_instructions",
    ),
    TrainingPhase.FACIAL_ALIGN: dict(
        epochs=1,
        learning_rate=1e-3,
        batch_size=256,
        frames_per_video=8,
        trainable_blocks=frozenset({"facial_projector"}),
        dataset_selector="emotion_classification",
    ),
    TrainingPhase.MULTIMODAL_SFT: dict(
        epochs=3,
        learning_rate=1e-5,
        batch_size=128,
        frames_per_video=8,
        trainable_blocks=frozenset(
            {"audio_projector", "facial_projector", "visual_projector", "decoder"}
        ),
        dataset_selector="curated_reasoning",
    ),
}


@dataclass(frozen=True)
class PhaseConfig:
    phase: TrainingPhase
    epochs: int
    learning_rate: float
    batch_size: int
    frames_per_video: int
    trainable_blocks: frozenset
    dataset_selector: str

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingConfigError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise TrainingConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainingConfigError("batch_size must be at least 1")
        if self.frames_per_video < 1:
            raise TrainingConfigError("frames_per_video must be at least 1")
        if not self.trainable_blocks:
            raise TrainingConfigError("trainable_blocks must be non-empty")
        unknown = sorted(set(self.trainable_blocks) - set(TRAINABLE_BLOCKS))
        if unknown:
            raise TrainingConfigError(f"unknown trainable blocks: {unknown}")

    @classmethod
    def defaults(cls, phase: TrainingPhase) -> "PhaseConfig":
        return cls(phase=phase, **_PHASE_DEFAULTS[phase])

    def to_json(self) -> dict:
        return {
            "phase": self.phase.value,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "frames_per_video": self.frames_per_video,
            "trainable_blocks": sorted(self.trainable_blocks),
            "dataset_selector": self.dataset_selector,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "PhaseConfig":
        """Build from a config mapping; omitted keys fall back to defaults."""
        try:
            phase = TrainingPhase(int(payload["phase"]))
        except (KeyError, ValueError) as exc:
            raise TrainingConfigError(f"bad phase selector: {exc}") from None
        merged = dict(_PHASE_DEFAULTS[phase])
        for key in (
            "epochs",
            "learning_rate",
            "batch_size",
            "frames_per_video",
            "dataset_selector",
        ):
            if key in payload:
                merged[key] = payload[key]
        if "trainable_blocks" in payload:
            merged["trainable_blocks"] = frozenset(payload["trainable_blocks"])
        return cls(phase=phase, **merged)


# --- phase runner -----------------------------------------------------------------


def example_loss(
    model: EmoFuseModel,
    example: InstructionExample,
    provider: MediaProvider,
    tokenizer: ToyTokenizer,
    frames_per_video: int,
) -> torch.Tensor:
    """Teacher-forced loss of one example through the full fusion path."""
    audio_seq = None
    vision_seq = None
    if Modality.AUDIO in example.modalities:
        audio_seq = model.encode_audio(provider.log_mel(example.media_id))
    if Modality.VISUAL in example.modalities:
        frames = provider.frames(example.media_id, frames_per_video)
        crops = provider.face_crops(example.media_id, frames_per_video)
        vision_seq = model.fuse_video(
            model.encode_frames(frames), model.encode_faces(crops)
        )
    wrapped = model.wrap_modalities(vision_seq, audio_seq)
    prompt_ids = tokenizer.encode(example.prompt)
    target_ids = tokenizer.encode(example.answer) + [EOS_ID]
    return model.next_token_loss(wrapped, prompt_ids, target_ids)


@dataclass(frozen=True)
class TrainingResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    final_loss: float


def run_phase(
    config: PhaseConfig,
    model: EmoFuseModel,
    examples: Sequence[InstructionExample],
    provider: MediaProvider,
    tokenizer: ToyTokenizer,
    out_dir,
    optimizer: str = "sgd",
    micro_batch_size: int = 8,
    seed: int = 0,
) -> TrainingResult:
    """Optimize the configured blocks; everything else stays bit-identical.

    Batch sizes are honored logically: each step accumulates gradients over
    micro-batches until batch_size examples contributed, then updates once.
    """
    if not examples:
        raise TrainingDataError("no training examples for this phase")
    if micro_batch_size < 1:
        raise TrainingConfigError("micro_batch_size must be at least 1")
    if config.frames_per_video > model.config.max_frames:
        raise TrainingConfigError(
            f"frames_per_video {config.frames_per_video} exceeds the model's "
            f"max_frames {model.config.max_frames}"
        )
    try:
        set_trainable(model, sorted(config.trainable_blocks))
    except ValueError as exc:
        raise TrainingConfigError(str(exc)) from None
    params = [p for p in model.parameters() if p.requires_grad]
    if optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=config.learning_rate)
    elif optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        raise TrainingConfigError(f"unknown optimizer {optimizer!r}")

    order = []
    for epoch in range(config.epochs):
        indices = list(range(len(examples)))
        random.Random(f"{seed}:{epoch}").shuffle(indices)
        order.extend(indices)
    steps_total = math.ceil(len(examples) * config.epochs / config.batch_size)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phase_no = config.phase.value
    log_path = out_dir / f"phase{phase_no}-train.jsonl"
    final_loss = math.nan
    with log_path.open("w", encoding="utf-8") as log:
        for step in range(steps_total):
            batch = order[step * config.batch_size : (step + 1) * config.batch_size]
            opt.zero_grad(set_to_none=True)
            step_loss = 0.0
            for start in range(0, len(batch), micro_batch_size):
                chunk = batch[start : start + micro_batch_size]
                micro = sum(
                    example_loss(
                        model,
                        examples[i],
                        provider,
                        tokenizer,
                        config.frames_per_video,
                    )
                    for i in chunk
                ) / len(batch)
                micro.backward()
                step_loss += float(micro.detach())
            opt.step()
            final_loss = step_loss
            log.write(
                json.dumps(
                    {
                        "step": step + 1,
                        "phase": phase_no,
                        "loss": step_loss,
                        "lr": config.learning_rate,
                    }
                )
                + "\n"
            )
    checkpoint = save_checkpoint(model, out_dir / f"phase{phase_no}-step{steps_total}")
    return TrainingResult(
        checkpoint_path=checkpoint,
        log_path=log_path,
        steps=steps_total,
        final_loss=final_loss,
    )
