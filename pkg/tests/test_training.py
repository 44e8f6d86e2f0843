import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from emofuse.corpus import ReasoningAnnotation, ReviewStatus, SourceDataset
from emofuse.model import EmoFuseModel, ModelConfig
from emofuse.training import (
    AUDIO_CAPTION_PROMPTS,
    AUDIO_TRANSCRIPT_PROMPTS,
    EMOTION_OPTION_PROMPTS,
    EOS_ID,
    OPEN_VOCAB_PROMPTS,
    REASONING_PROMPTS,
    RESERVED_TOKEN_IDS,
    AudioRecord,
    ClassificationRecord,
    InstructionExample,
    Modality,
    PhaseConfig,
    SyntheticMediaProvider,
    ToyTokenizer,
    TrainingConfigError,
    TrainingDataError,
    TrainingPhase,
    build_phase1_examples,
    build_phase2_examples,
    build_phase3_examples,
    example_loss,
    run_phase,
    uniform_frame_times,
)


def train_config(**over):
    fields = dict(
        d_model=8,
        vocab_size=23,
        frames_per_video=2,
        visual_grid=2,
        facial_grid=1,
        face_scales=(2,),
        d_audio_enc=6,
        d_face=5,
        d_visual=7,
        decoder_layers=1,
        max_positions=256,
        max_frames=8,
        seed=3,
    )
    fields.update(over)
    return ModelConfig(**fields)


def annotation(clip_id, labels, reason="looks tense and speaks sharply", status=ReviewStatus.SELF_REVIEWED):
    return ReasoningAnnotation(
        clip_id=clip_id,
        source_dataset=SourceDataset.DFEW,
        evidence=(),
        reason=reason,
        open_vocab_labels=frozenset(labels),
        intensity=3,
        alignment_score=7,
        review_status=status,
    )


# --- phase 1 examples ---------------------------------------------------------------


class TestPhase1Builder:
    def test_caption_record_pairs_caption_prompt_with_caption_answer(self):
        records = [AudioRecord("a-1", caption="Wind and a man speaking")]
        examples = build_phase1_examples(records, seed=7)
        assert len(examples) == 1
        assert examples[0].prompt in AUDIO_CAPTION_PROMPTS
        assert examples[0].answer == "Wind and a man speaking"
        assert examples[0].modalities == frozenset({Modality.AUDIO})

    def test_transcript_record_uses_transcription_pool(self):
        records = [AudioRecord("a-2", transcript="hello there")]
        examples = build_phase1_examples(records, seed=7)
        assert examples[0].prompt in AUDIO_TRANSCRIPT_PROMPTS
        assert examples[0].answer == "hello there"

    def test_record_with_both_texts_yields_two_examples(self):
        records = [AudioRecord("a-3", caption="rain", transcript="we should go")]
        examples = build_phase1_examples(records, seed=0)
        assert len(examples) == 2
        assert examples[0].prompt in AUDIO_CAPTION_PROMPTS
        assert examples[1].prompt in AUDIO_TRANSCRIPT_PROMPTS

    def test_record_with_neither_is_skipped_with_log_entry(self, caplog):
        records = [
            AudioRecord("a-4"),
            AudioRecord("a-5", caption="door slam"),
            AudioRecord("a-6", caption="  ", transcript=""),
        ]
        with caplog.at_level("INFO", logger="emofuse.training"):
            examples = build_phase1_examples(records, seed=0)
        assert [e.media_id for e in examples] == ["a-5"]
        skipped = [r for r in caplog.records if "skipping" in r.getMessage()]
        assert len(skipped) == 2

    def test_same_seed_reproduces_assignment_exactly(self):
        records = [AudioRecord(f"a-{i}", caption=f"sound {i}") for i in range(9)]
        first = build_phase1_examples(records, seed=11)
        second = build_phase1_examples(records, seed=11)
        assert first == second

    def test_templates_are_dealt_round_robin(self):
        # pool of 4 caption prompts: position i gets template i mod 4
        records = [AudioRecord(f"a-{i}", caption=f"sound {i}") for i in range(8)]
        examples = build_phase1_examples(records, seed=2)
        prompts = [e.prompt for e in examples]
        assert prompts[:4] == prompts[4:]
        assert len(set(prompts[:4])) == 4

    def test_different_seeds_change_the_deal_order(self):
        records = [AudioRecord(f"a-{i}", caption=f"sound {i}") for i in range(4)]
        deals = {tuple(e.prompt for e in build_phase1_examples(records, seed=s)) for s in range(8)}
        assert len(deals) > 1


# --- phase 2 examples ---------------------------------------------------------------

SEVEN_WAY = ("happy", "sad", "neutral", "angry", "surprise", "disgust", "fear")


class TestPhase2Builder:
    def test_answer_is_exact_label_and_prompt_lists_options(self):
        records = [ClassificationRecord("c-1", "neutral", SEVEN_WAY)]
        examples = build_phase2_examples(records, seed=5)
        assert examples[0].answer == "neutral"
        stem = next(s for s in EMOTION_OPTION_PROMPTS if examples[0].prompt.startswith(s))
        options = examples[0].prompt[len(stem):].strip().split(", ")
        assert sorted(options) == sorted(SEVEN_WAY)
        assert examples[0].modalities == frozenset({Modality.VISUAL})

    def test_option_list_always_contains_the_answer(self):
        records = [
            ClassificationRecord(f"c-{i}", SEVEN_WAY[i % 7], SEVEN_WAY)
            for i in range(20)
        ]
        for seed in range(5):
            for example in build_phase2_examples(records, seed=seed):
                assert example.answer in example.prompt

    def test_eleven_class_space_renders_eleven_options(self):
        space = SEVEN_WAY + ("anxious", "helpless", "disappointed", "contemptuous")
        examples = build_phase2_examples([ClassificationRecord("c-2", "helpless", space)], seed=1)
        rendered = examples[0].prompt.split("? ", 1)[1]
        assert len(rendered.split(", ")) == 11

    def test_label_missing_from_option_list_is_a_build_error(self):
        with pytest.raises(TrainingDataError, match="not in the option list"):
            build_phase2_examples([ClassificationRecord("c-3", "bored", SEVEN_WAY)])

    def test_option_shuffle_is_seeded_per_record(self):
        records = [ClassificationRecord("c-4", "sad", SEVEN_WAY)]
        a = build_phase2_examples(records, seed=3)
        b = build_phase2_examples(records, seed=3)
        assert a == b
        orders = {build_phase2_examples(records, seed=s)[0].prompt for s in range(10)}
        assert len(orders) > 1

    def test_duplicate_options_rejected(self):
        with pytest.raises(TrainingDataError, match="duplicate"):
            ClassificationRecord("c-5", "sad", ("sad", "sad", "happy"))


# --- phase 3 examples ---------------------------------------------------------------


class TestPhase3Builder:
    def test_each_record_yields_reasoning_and_label_examples(self):
        sre = [annotation("clip-a", {"angry"}), annotation("clip-b", {"sad", "tired"})]
        hre = [annotation("clip-c", {"happy"})]
        examples = build_phase3_examples(sre, hre, seed=0)
        assert len(examples) == 6
        by_clip = {}
        for e in examples:
            by_clip.setdefault(e.media_id, []).append(e)
        assert set(by_clip) == {"clip-a", "clip-b", "clip-c"}
        for pair in by_clip.values():
            assert pair[0].prompt in REASONING_PROMPTS
            assert pair[1].prompt in OPEN_VOCAB_PROMPTS
            assert pair[0].modalities == frozenset({Modality.VISUAL, Modality.AUDIO})

    def test_label_answer_is_sorted_comma_joined(self):
        sre = [annotation("clip-d", {"surprised", "angry", "dissatisfied"})]
        examples = build_phase3_examples(sre, [], seed=0)
        assert examples[1].answer == "angry, dissatisfied, surprised"

    def test_reasoning_answer_is_the_reason_text(self):
        sre = [annotation("clip-e", {"calm"}, reason="steady voice and a relaxed posture")]
        examples = build_phase3_examples(sre, [], seed=0)
        assert examples[0].answer == "steady voice and a relaxed posture"

    def test_rejected_records_contribute_nothing(self):
        sre = [
            annotation("clip-f", {"angry"}),
            annotation("clip-g", {"sad"}, status=ReviewStatus.HUMAN_REJECTED),
        ]
        examples = build_phase3_examples(sre, [], seed=0)
        assert {e.media_id for e in examples} == {"clip-f"}

    def test_example_count_is_a_pure_function_of_inputs(self):
        sre = [annotation(f"clip-{i}", {"calm"}) for i in range(5)]
        hre = [annotation(f"clip-h{i}", {"glad"}) for i in range(3)]
        for seed in range(4):
            assert len(build_phase3_examples(sre, hre, seed=seed)) == 16


# --- example record validation --------------------------------------------------------


class TestInstructionExample:
    def test_empty_answer_rejected(self):
        with pytest.raises(TrainingDataError, match="non-empty"):
            InstructionExample("m-1", "what?", "  ", frozenset({Modality.AUDIO}))

    def test_modalities_must_be_audio_or_visual(self):
        with pytest.raises(TrainingDataError, match="subset"):
            InstructionExample("m-2", "what?", "ok", frozenset({Modality.FUSED}))
        with pytest.raises(TrainingDataError, match="subset"):
            InstructionExample("m-3", "what?", "ok", frozenset())


# --- tokenizer ------------------------------------------------------------------------


class TestToyTokenizer:
    def test_ids_fall_in_the_unreserved_range(self):
        tok = ToyTokenizer(23)
        ids = tok.encode("Listen to this audio clip and provide its caption.")
        assert ids
        assert all(RESERVED_TOKEN_IDS <= i < 23 for i in ids)

    def test_same_word_same_id_regardless_of_case(self):
        tok = ToyTokenizer(101)
        assert tok.encode("Happy")[0] == tok.encode("happy")[0]
        assert tok.encode("happy sad happy") [0] == tok.encode("happy sad happy")[2]

    def test_eos_is_reserved(self):
        assert EOS_ID < RESERVED_TOKEN_IDS

    def test_punctuation_only_text_encodes_empty(self):
        assert ToyTokenizer(23).encode("?!— …") == []

    def test_vocab_must_exceed_reserved_ids(self):
        with pytest.raises(ValueError):
            ToyTokenizer(RESERVED_TOKEN_IDS)


# --- media provisioning ---------------------------------------------------------------


class TestFrameSampling:
    def test_eight_uniform_midpoints(self):
        times = uniform_frame_times(2.0, 8)
        assert len(times) == 8
        assert times[0] == pytest.approx(0.125)
        assert np.allclose(np.diff(times), 0.25)

    def test_times_stay_inside_the_clip(self):
        times = uniform_frame_times(3.7, 8)
        assert all(0 < t < 3.7 for t in times)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            uniform_frame_times(2.0, 0)
        with pytest.raises(ValueError):
            uniform_frame_times(0.0, 8)


class TestSyntheticMediaProvider:
    def test_log_mel_has_mel_rows_and_is_deterministic(self):
        provider = SyntheticMediaProvider(duration_s=1.0)
        a = provider.log_mel("clip-x")
        b = provider.log_mel("clip-x")
        assert a.shape[0] == 128
        assert np.array_equal(a, b)
        assert not np.array_equal(a, provider.log_mel("clip-y"))

    def test_frames_and_crops_honor_the_requested_count(self):
        provider = SyntheticMediaProvider(frame_size=8, crop_size=6)
        frames = provider.frames("clip-x", 8)
        crops = provider.face_crops("clip-x", 8)
        assert len(frames) == 8 and len(crops) == 8
        assert frames[0].shape == (8, 8, 3)
        assert crops[0].shape == (6, 6, 3)
        assert not np.array_equal(frames[0], frames[1])


# --- phase configuration ---------------------------------------------------------------


class TestPhaseConfig:
    def test_audio_align_defaults(self):
        config = PhaseConfig.defaults(TrainingPhase.AUDIO_ALIGN)
        assert config.epochs == 1
        assert config.learning_rate == pytest.approx(1e-3)
        assert config.batch_size == 256
        assert config.trainable_blocks == frozenset({"audio_projector"})

    def test_facial_align_defaults(self):
        config = PhaseConfig.defaults(TrainingPhase.FACIAL_ALIGN)
        assert config.epochs == 1
        assert config.learning_rate == pytest.approx(1e-3)
        assert config.batch_size == 256
        assert config.trainable_blocks == frozenset({"facial_projector"})

    def test_multimodal_sft_defaults(self):
        config = PhaseConfig.defaults(TrainingPhase.MULTIMODAL_SFT)
        assert config.epochs == 3
        assert config.learning_rate == pytest.approx(1e-5)
        assert config.batch_size == 128
        assert config.frames_per_video == 8
        assert config.trainable_blocks == frozenset(
            {"audio_projector", "facial_projector", "visual_projector", "decoder"}
        )

    def test_unknown_block_rejected_at_construction(self):
        with pytest.raises(TrainingConfigError, match="unknown trainable blocks"):
            replace(
                PhaseConfig.defaults(TrainingPhase.AUDIO_ALIGN),
                trainable_blocks=frozenset({"audio_projector", "mystery"}),
            )

    def test_scalar_validation(self):
        base = PhaseConfig.defaults(TrainingPhase.AUDIO_ALIGN)
        with pytest.raises(TrainingConfigError):
            replace(base, epochs=0)
        with pytest.raises(TrainingConfigError):
            replace(base, learning_rate=0.0)
        with pytest.raises(TrainingConfigError):
            replace(base, batch_size=0)
        with pytest.raises(TrainingConfigError):
            replace(base, trainable_blocks=frozenset())

    def test_from_json_merges_over_defaults(self):
        config = PhaseConfig.from_json({"phase": 3, "batch_size": 4, "epochs": 1})
        assert config.phase is TrainingPhase.MULTIMODAL_SFT
        assert config.batch_size == 4
        assert config.epochs == 1
        assert config.learning_rate == pytest.approx(1e-5)

    def test_from_json_round_trips(self):
        config = PhaseConfig.defaults(TrainingPhase.FACIAL_ALIGN)
        assert PhaseConfig.from_json(config.to_json()) == config

    def test_from_json_bad_phase(self):
        with pytest.raises(TrainingConfigError, match="bad phase selector"):
            PhaseConfig.from_json({"phase": 9})
        with pytest.raises(TrainingConfigError, match="bad phase selector"):
            PhaseConfig.from_json({})


# --- phase runner -----------------------------------------------------------------------


def phase1_examples(n=4):
    records = [AudioRecord(f"a-{i}", caption=f"speaker number {i} talking") for i in range(n)]
    return build_phase1_examples(records, seed=0)


def phase2_examples(n=4):
    records = [ClassificationRecord(f"c-{i}", SEVEN_WAY[i % 7], SEVEN_WAY) for i in range(n)]
    return build_phase2_examples(records, seed=0)


def phase3_examples(n=2):
    sre = [annotation(f"clip-{i}", {"angry", "tense"}) for i in range(n)]
    return build_phase3_examples(sre, [], seed=0)


def tiny_phase(phase, examples, **over):
    base = PhaseConfig.defaults(phase)
    fields = dict(batch_size=len(examples), epochs=1, frames_per_video=2)
    fields.update(over)
    return replace(base, **fields)


def snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def changed_blocks(before, after):
    """Parameter-diff oracle: block names whose tensors are not bit-identical."""
    changed = set()
    for key in before:
        if not torch.equal(before[key], after[key]):
            changed.add(key.split(".")[0])
    return changed


class TestRunPhaseFreezing:
    @pytest.mark.parametrize(
        "phase,examples_fn,expected",
        [
            (TrainingPhase.AUDIO_ALIGN, phase1_examples, {"audio_projector"}),
            (TrainingPhase.FACIAL_ALIGN, phase2_examples, {"facial_projector"}),
            (
                TrainingPhase.MULTIMODAL_SFT,
                phase3_examples,
                {"audio_projector", "facial_projector", "visual_projector", "decoder"},
            ),
        ],
    )
    def test_exactly_the_configured_blocks_change(self, tmp_path, phase, examples_fn, expected):
        model = EmoFuseModel(train_config())
        examples = examples_fn()
        config = tiny_phase(phase, examples)
        before = snapshot(model)
        run_phase(
            config,
            model,
            examples,
            SyntheticMediaProvider(frame_size=8, crop_size=6),
            ToyTokenizer(model.config.vocab_size),
            tmp_path,
        )
        assert changed_blocks(before, snapshot(model)) == expected


class TestRunPhaseDescent:
    @pytest.mark.parametrize(
        "phase,examples_fn",
        [
            (TrainingPhase.AUDIO_ALIGN, phase1_examples),
            (TrainingPhase.FACIAL_ALIGN, phase2_examples),
            (TrainingPhase.MULTIMODAL_SFT, phase3_examples),
        ],
    )
    def test_single_batch_loss_decreases_monotonically_over_20_steps(
        self, tmp_path, phase, examples_fn
    ):
        model = EmoFuseModel(train_config())
        examples = examples_fn(2)
        # batch == dataset, so every step optimizes the same batch
        config = tiny_phase(phase, examples, epochs=20)
        result = run_phase(
            config,
            model,
            examples,
            SyntheticMediaProvider(frame_size=8, crop_size=6),
            ToyTokenizer(model.config.vocab_size),
            tmp_path,
        )
        losses = [
            json.loads(line)["loss"]
            for line in result.log_path.read_text().splitlines()
        ]
        assert len(losses) == 20
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestRunPhaseMechanics:
    def test_step_count_is_ceil_of_examples_times_epochs_over_batch(self, tmp_path):
        model = EmoFuseModel(train_config())
        examples = phase1_examples(10)
        config = tiny_phase(TrainingPhase.AUDIO_ALIGN, examples, batch_size=4, epochs=2)
        result = run_phase(
            config, model, examples, SyntheticMediaProvider(),
            ToyTokenizer(model.config.vocab_size), tmp_path,
        )
        assert result.steps == math.ceil(10 * 2 / 4) == 5
        lines = [json.loads(l) for l in result.log_path.read_text().splitlines()]
        assert [l["step"] for l in lines] == [1, 2, 3, 4, 5]
        assert all(l["phase"] == 1 for l in lines)
        assert all(l["lr"] == pytest.approx(config.learning_rate) for l in lines)
        assert all(isinstance(l["loss"], float) for l in lines)

    def test_20_examples_at_default_batch_make_one_step(self, tmp_path):
        model = EmoFuseModel(train_config())
        examples = phase1_examples(20)
        config = replace(
            PhaseConfig.defaults(TrainingPhase.AUDIO_ALIGN), frames_per_video=2
        )
        result = run_phase(
            config, model, examples, SyntheticMediaProvider(),
            ToyTokenizer(model.config.vocab_size), tmp_path,
        )
        assert result.steps == 1

    def test_checkpoint_named_by_phase_and_step(self, tmp_path):
        model = EmoFuseModel(train_config())
        examples = phase2_examples(3)
        config = tiny_phase(TrainingPhase.FACIAL_ALIGN, examples)
        result = run_phase(
            config, model, examples, SyntheticMediaProvider(frame_size=8, crop_size=6),
            ToyTokenizer(model.config.vocab_size), tmp_path,
        )
        assert result.checkpoint_path.name == "phase2-step1"
        assert (tmp_path / "phase2-step1.npz").exists()
        assert (tmp_path / "phase2-step1.meta.json").exists()

    def test_gradient_accumulation_matches_single_shot_batch(self, tmp_path):
        # same logical batch, different micro-batch splits, identical update
        examples = phase1_examples(6)
        outcomes = []
        for micro in (1, 2, 6):
            model = EmoFuseModel(train_config())
            config = tiny_phase(TrainingPhase.AUDIO_ALIGN, examples)
            run_phase(
                config, model, examples, SyntheticMediaProvider(),
                ToyTokenizer(model.config.vocab_size), tmp_path / str(micro),
                micro_batch_size=micro,
            )
            outcomes.append(snapshot(model))
        for key in outcomes[0]:
            assert torch.allclose(outcomes[0][key], outcomes[1][key], atol=1e-6)
            assert torch.allclose(outcomes[0][key], outcomes[2][key], atol=1e-6)

    def test_multimodal_phase_requests_the_configured_frame_count(self, tmp_path):
        class RecordingProvider(SyntheticMediaProvider):
            def __init__(self, *a, **k):
                super().__init__(*a, **k)
                self.frame_requests = []

            def frames(self, media_id, count):
                self.frame_requests.append(count)
                return super().frames(media_id, count)

        model = EmoFuseModel(train_config())
        examples = phase3_examples(1)
        provider = RecordingProvider(frame_size=8, crop_size=6)
        config = tiny_phase(TrainingPhase.MULTIMODAL_SFT, examples, frames_per_video=8)
        run_phase(
            config, model, examples, provider,
            ToyTokenizer(model.config.vocab_size), tmp_path,
        )
        assert provider.frame_requests
        assert set(provider.frame_requests) == {8}

    def test_no_examples_is_a_data_error(self, tmp_path):
        model = EmoFuseModel(train_config())
        config = PhaseConfig.defaults(TrainingPhase.AUDIO_ALIGN)
        with pytest.raises(TrainingDataError, match="no training examples"):
            run_phase(
                config, model, [], SyntheticMediaProvider(),
                ToyTokenizer(model.config.vocab_size), tmp_path,
            )

    def test_unknown_optimizer_rejected_before_any_step(self, tmp_path):
        model = EmoFuseModel(train_config())
        examples = phase1_examples(2)
        before = snapshot(model)
        config = tiny_phase(TrainingPhase.AUDIO_ALIGN, examples)
        with pytest.raises(TrainingConfigError, match="unknown optimizer"):
            run_phase(
                config, model, examples, SyntheticMediaProvider(),
                ToyTokenizer(model.config.vocab_size), tmp_path, optimizer="rmsprop",
            )
        assert changed_blocks(before, snapshot(model)) == set()

    def test_frames_beyond_model_table_rejected(self, tmp_path):
        model = EmoFuseModel(train_config(max_frames=4))
        examples = phase3_examples(1)
        config = tiny_phase(TrainingPhase.MULTIMODAL_SFT, examples, frames_per_video=8)
        with pytest.raises(TrainingConfigError, match="max_frames"):
            run_phase(
                config, model, examples, SyntheticMediaProvider(),
                ToyTokenizer(model.config.vocab_size), tmp_path,
            )

    def test_adaptive_optimizer_option_runs(self, tmp_path):
        model = EmoFuseModel(train_config())
        examples = phase1_examples(2)
        config = tiny_phase(TrainingPhase.AUDIO_ALIGN, examples)
        before = snapshot(model)
        run_phase(
            config, model, examples, SyntheticMediaProvider(),
            ToyTokenizer(model.config.vocab_size), tmp_path, optimizer="adam",
        )
        assert changed_blocks(before, snapshot(model)) == {"audio_projector"}

    def test_run_is_deterministic_for_a_fixed_seed(self, tmp_path):
        examples = phase1_examples(5)
        results = []
        for run in range(2):
            model = EmoFuseModel(train_config())
            config = tiny_phase(TrainingPhase.AUDIO_ALIGN, examples, batch_size=2)
            run_phase(
                config, model, examples, SyntheticMediaProvider(),
                ToyTokenizer(model.config.vocab_size), tmp_path / str(run), seed=9,
            )
            results.append(snapshot(model))
        for key in results[0]:
            assert torch.equal(results[0][key], results[1][key])


class TestExampleLoss:
    def test_audio_only_example_runs_without_video(self):
        model = EmoFuseModel(train_config())
        example = phase1_examples(1)[0]
        loss = example_loss(
            model, example, SyntheticMediaProvider(),
            ToyTokenizer(model.config.vocab_size), frames_per_video=2,
        )
        assert math.isfinite(float(loss.detach()))

    def test_visual_only_example_runs_without_audio(self):
        model = EmoFuseModel(train_config())
        example = phase2_examples(1)[0]
        loss = example_loss(
            model, example, SyntheticMediaProvider(frame_size=8, crop_size=6),
            ToyTokenizer(model.config.vocab_size), frames_per_video=2,
        )
        assert math.isfinite(float(loss.detach()))
