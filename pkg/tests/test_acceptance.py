"""Acceptance gate: the shipped guarantees, one labelled PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -s` to see the per-check lines.
Each check is independent and uses only the packaged mock backends.
"""

import functools
import json
import math
import random
import time

import numpy as np
import pytest
import torch

from emofuse.corpus import SourceDataset, read_manifest
from emofuse.curation import run_curation
from emofuse.evaluation import (
    GroupMap,
    OvMetrics,
    classification_metrics,
    ov_metrics,
)
from emofuse.fixtures import build_demo_registry, demo_clips, demo_config, demo_decoder
from emofuse.media import HOP_SAMPLES, MEL_CHANNELS, WINDOW_SAMPLES, compute_log_mel
from emofuse.model import (
    AUDIO_POOL_STRIDE,
    EmoFuseModel,
    Modality,
    ModelConfig,
    TokenSequence,
    set_trainable,
)
from emofuse.training import (
    AudioRecord,
    ClassificationRecord,
    PhaseConfig,
    SyntheticMediaProvider,
    ToyTokenizer,
    TrainingPhase,
    build_phase1_examples,
    build_phase2_examples,
    build_phase3_examples,
    run_phase,
)

SEVEN_WAY = ("happy", "sad", "neutral", "angry", "surprised", "disgusted", "afraid")


def reported(label):
    """Print one `acceptance <label>: PASS|FAIL` line per check."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"acceptance {label}: FAIL")
                raise
            print(f"acceptance {label}: PASS")
            return result

        return run

    return wrap


def tiny_model_config(**over):
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


# --- open-vocabulary metric oracle ------------------------------------------------


def brute_force_ov(truth, prediction, mapping):
    truth_groups = set()
    for label in truth:
        truth_groups.add(mapping[label])
    predicted_groups = set()
    for label in prediction:
        predicted_groups.add(mapping[label])
    hits = 0
    for group in predicted_groups:
        if group in truth_groups:
            hits += 1
    precision = hits / len(predicted_groups) if predicted_groups else 0.0
    recall = hits / len(truth_groups)
    return precision, recall


def random_grouping(rng):
    size = rng.randint(2, 12)
    labels = [f"emotion{i}" for i in range(size)]
    group_count = rng.randint(1, size)
    mapping = {}
    for i, label in enumerate(labels):
        # the first labels claim every group id once, keeping ids dense
        mapping[label] = i if i < group_count else rng.randrange(group_count)
    return labels, mapping


@reported("group-intersection metrics match brute force")
def test_ov_metrics_match_brute_force_oracle():
    rng = random.Random(20260815)
    started = time.perf_counter()
    for _ in range(1000):
        labels, mapping = random_grouping(rng)
        truth = rng.sample(labels, rng.randint(1, len(labels)))
        prediction = rng.sample(labels, rng.randint(0, len(labels)))
        got = ov_metrics(truth, prediction, GroupMap(mapping))
        want_p, want_r = brute_force_ov(truth, prediction, mapping)
        assert abs(got.precision - want_p) < 1e-12
        assert abs(got.recall - want_r) < 1e-12
    assert time.perf_counter() - started < 5.0


@reported("precision/recall average reproduces published rows")
def test_avg_formula_matches_published_rows():
    assert OvMetrics(precision=47.5, recall=65.7).avg == 56.6
    assert round(OvMetrics(precision=61.3, recall=70.6).avg, 1) == 65.9


# --- recall-rate metric oracle ----------------------------------------------------


def brute_force_uar_war(predictions, ground_truths, class_list):
    correct = 0
    for predicted, truth in zip(predictions, ground_truths):
        if predicted == truth:
            correct += 1
    war = correct / len(ground_truths)
    recalls = []
    for cls in class_list:
        total = sum(1 for t in ground_truths if t == cls)
        if total == 0:
            continue
        hit = sum(1 for p, t in zip(predictions, ground_truths) if t == cls and p == cls)
        recalls.append(hit / total)
    return sum(recalls) / len(recalls), war


@reported("per-class recall rates match brute force")
def test_classification_metrics_match_brute_force_oracle():
    rng = random.Random(20260816)
    for _ in range(1000):
        classes = SEVEN_WAY[: rng.randint(2, 7)]
        n = rng.randint(1, 40)
        ground_truths = [rng.choice(classes) for _ in range(n)]
        predictions = [
            rng.choice(classes + ("offlist",)) for _ in range(n)
        ]
        got = classification_metrics(predictions, ground_truths, classes)
        want_uar, want_war = brute_force_uar_war(predictions, ground_truths, classes)
        assert got.uar == want_uar
        assert got.war == want_war

    # on a balanced set every class recall is weighted equally either way
    for seed in range(20):
        rng = random.Random(seed)
        classes = SEVEN_WAY[:4]
        ground_truths = [cls for cls in classes for _ in range(5)]
        predictions = [rng.choice(classes) for _ in ground_truths]
        got = classification_metrics(predictions, ground_truths, classes)
        assert got.uar == pytest.approx(got.war)


# --- curation pipeline --------------------------------------------------------------


@reported("curation is deterministic and filters excluded records")
def test_curation_deterministic_and_filtered(tmp_path):
    clips = demo_clips()
    config = demo_config()
    started = time.perf_counter()
    reports = []
    for run_index in range(3):
        out = tmp_path / f"run{run_index}"
        reports.append(
            run_curation(clips, build_demo_registry(), config, out, decoder=demo_decoder())
        )
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0

    first = tmp_path / "run0"
    for name in ("sre.jsonl", "hre.jsonl"):
        reference_bytes = (first / name).read_bytes()
        assert (tmp_path / "run1" / name).read_bytes() == reference_bytes
        assert (tmp_path / "run2" / name).read_bytes() == reference_bytes

    sre = read_manifest(first / "sre.jsonl")
    hre = read_manifest(first / "hre.jsonl")
    for record in sre.records:
        assert record.alignment_score >= config.score_threshold
    for record in sre.records + hre.records:
        assert record.source_dataset is not SourceDataset.RAVDESS
    sre_ids = {record.clip_id for record in sre.records}
    hre_ids = {record.clip_id for record in hre.records}
    assert sre_ids and not (sre_ids & hre_ids)


@reported("per-source counts add up")
def test_per_source_counts_sum(tmp_path):
    published = {
        "FERV39K": 10302,
        "MAFW": 5006,
        "DFEW": 3700,
        "CAER": 2903,
        "AFEW_VA": 1176,
        "MER24": 1050,
    }
    assert sum(published.values()) == 24137
    assert all(name in {s.value for s in SourceDataset} for name in published)

    # loaded manifests enforce the same arithmetic against their records
    run_curation(
        demo_clips(), build_demo_registry(), demo_config(), tmp_path,
        decoder=demo_decoder(),
    )
    manifest = read_manifest(tmp_path / "sre.jsonl")
    assert sum(manifest.per_source_counts.values()) == len(manifest.records)


# --- audio frontend --------------------------------------------------------------


def expected_mel_frames(num_samples):
    if num_samples < WINDOW_SAMPLES:
        return 1
    return (num_samples - WINDOW_SAMPLES) // HOP_SAMPLES + 1


def expected_audio_tokens(num_samples):
    frames = expected_mel_frames(num_samples)
    conv_steps = len(range(0, frames + 2 - 3 + 1, 2))  # kernel 3, stride 2, pad 1
    return conv_steps // AUDIO_POOL_STRIDE


@reported("audio frontend shapes follow the closed forms")
def test_audio_frontend_shapes():
    rng = np.random.default_rng(20260817)
    model = EmoFuseModel(tiny_model_config())

    durations = rng.uniform(0.01, 12.0, size=50)
    for duration in durations:
        n = int(duration * 16000)
        mel = compute_log_mel(rng.standard_normal(max(n, 1)))
        assert mel.values.shape[0] == MEL_CHANNELS == 128
        assert mel.num_frames == expected_mel_frames(max(n, 1))

    for seconds in range(1, 31):
        n = seconds * 16000
        tokens = expected_audio_tokens(n)
        assert abs(tokens - seconds * 1000 / 60.0) <= 2, seconds

    # the model agrees with the closed form end to end
    for seconds in (0.4, 1.0, 3.7):
        n = int(seconds * 16000)
        mel = compute_log_mel(rng.standard_normal(n))
        encoded = model.encode_audio(mel.values)
        assert encoded.tokens.shape[0] == expected_audio_tokens(n)


# --- fusion contracts ---------------------------------------------------------------


@reported("fusion variants share one length contract")
def test_fusion_contracts():
    generator = torch.Generator().manual_seed(20260818)
    visual = torch.randn(8, 196, 256, generator=generator)
    facial = torch.randn(8, 16, 256, generator=generator)
    for variant in ("frame_concat", "cross_attention", "video_concat"):
        model = EmoFuseModel(ModelConfig(fusion_variant=variant))
        fused = model.fuse_video(visual, facial)
        assert fused.tokens.shape == (1696, 256)
        assert fused.modality is Modality.FUSED

    attention_model = EmoFuseModel(ModelConfig(fusion_variant="cross_attention"))
    _, weights = attention_model.fusion.cross_attend(facial[0], visual[0])
    assert weights.shape == (16, 196)
    assert torch.all((weights.sum(dim=-1) - 1.0).abs() < 1e-6)

    # a missing modality is represented by exactly one zero token
    model = EmoFuseModel(tiny_model_config())
    vision = TokenSequence(
        torch.randn(6, model.config.d_model, generator=generator), Modality.FUSED
    )
    wrapped = model.wrap_modalities(vision, None)
    start, end = wrapped.audio_span
    assert end - start == 1
    assert torch.all(wrapped.tokens[start] == 0)


# --- phase freezing ---------------------------------------------------------------


def phase_fixture(phase):
    if phase is TrainingPhase.AUDIO_ALIGN:
        records = [AudioRecord(f"a-{i}", caption=f"speaker number {i}") for i in range(4)]
        return build_phase1_examples(records, seed=0)
    if phase is TrainingPhase.FACIAL_ALIGN:
        records = [
            ClassificationRecord(f"c-{i}", SEVEN_WAY[i % 7], SEVEN_WAY) for i in range(4)
        ]
        return build_phase2_examples(records, seed=0)
    from emofuse.corpus import ReasoningAnnotation, ReviewStatus

    sre = [
        ReasoningAnnotation(
            clip_id=f"clip-{i}",
            source_dataset=SourceDataset.DFEW,
            evidence=(),
            reason="looks tense and speaks sharply",
            open_vocab_labels=frozenset({"angry", "tense"}),
            intensity=3,
            alignment_score=7,
            review_status=ReviewStatus.SELF_REVIEWED,
        )
        for i in range(2)
    ]
    return build_phase3_examples(sre, [], seed=0)


EXPECTED_TRAINED = {
    TrainingPhase.AUDIO_ALIGN: {"audio_projector"},
    TrainingPhase.FACIAL_ALIGN: {"facial_projector"},
    TrainingPhase.MULTIMODAL_SFT: {
        "audio_projector",
        "facial_projector",
        "visual_projector",
        "decoder",
    },
}


@reported("each phase trains exactly its declared blocks")
def test_phase_freezing_exactness(tmp_path):
    started = time.perf_counter()
    for phase in TrainingPhase:
        examples = phase_fixture(phase)
        config = PhaseConfig.from_json(
            {"phase": phase.value, "epochs": 1, "frames_per_video": 2}
        )
        model = EmoFuseModel(tiny_model_config())
        before = {k: v.detach().clone() for k, v in model.state_dict().items()}
        run_phase(
            config,
            model,
            examples,
            SyntheticMediaProvider(),
            ToyTokenizer(model.config.vocab_size),
            tmp_path / f"phase{phase.value}",
        )
        after = model.state_dict()
        changed = {
            key.split(".")[0]
            for key in before
            if not torch.equal(before[key], after[key])
        }
        assert changed == EXPECTED_TRAINED[phase], phase
    assert time.perf_counter() - started < 60.0


# --- gradient validity ---------------------------------------------------------------


def pipeline_loss(model):
    rng = np.random.default_rng(11)
    mel = compute_log_mel(rng.standard_normal(16000))
    audio = model.encode_audio(mel.values)
    frames = [rng.random((8, 8, 3)) for _ in range(model.config.frames_per_video)]
    crops = [rng.random((6, 6, 3)) for _ in range(model.config.frames_per_video)]
    fused = model.fuse_video(model.encode_frames(frames), model.encode_faces(crops))
    wrapped = model.wrap_modalities(fused, audio)
    return model.next_token_loss(wrapped, [1, 2], [3, 4, 5])


@reported("analytic gradients agree with finite differences")
def test_gradients_match_finite_differences():
    model = EmoFuseModel(tiny_model_config()).double()
    blocks = ["audio_projector", "facial_projector", "visual_projector", "decoder"]
    set_trainable(model, blocks)
    pipeline_loss(model).backward()

    rng = np.random.default_rng(7)
    h = 1e-5
    checked = set()
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        assert param.grad is not None, name
        flat = param.data.reshape(-1)
        flat_grad = param.grad.reshape(-1)
        magnitudes = flat_grad.abs()
        peak = int(magnitudes.argmax())
        assert magnitudes[peak] > 0, name
        comparable = torch.nonzero(magnitudes >= 0.01 * magnitudes[peak]).reshape(-1)
        extra = int(comparable[int(rng.integers(len(comparable)))])
        for idx in {peak, extra}:
            original = flat[idx].item()
            flat[idx] = original + h
            up = pipeline_loss(model).item()
            flat[idx] = original - h
            down = pipeline_loss(model).item()
            flat[idx] = original
            numeric = (up - down) / (2 * h)
            analytic = flat_grad[idx].item()
            scale = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / scale <= 1e-4, f"{name}[{idx}]"
        checked.add(name.split(".")[0])
    assert checked == set(blocks)


@reported("uniform logits cost exactly log vocab")
def test_uniform_logits_cost_log_vocab():
    config = tiny_model_config()
    model = EmoFuseModel(config).double()
    with torch.no_grad():
        model.decoder.head_W.zero_()
        model.decoder.head_b.zero_()
    vision = TokenSequence(torch.randn(6, config.d_model).double(), Modality.FUSED)
    wrapped = model.wrap_modalities(vision, None)
    loss = model.next_token_loss(wrapped, [1, 2], [3, 4, 5])
    assert abs(loss.item() - math.log(config.vocab_size)) < 1e-12


# --- training sanity ------------------------------------------------------------


@reported("single-batch loss descends for twenty steps in every phase")
def test_single_batch_descent(tmp_path):
    for phase in TrainingPhase:
        examples = phase_fixture(phase)
        config = PhaseConfig.from_json(
            {
                "phase": phase.value,
                "epochs": 20,
                "batch_size": len(examples),
                "frames_per_video": 2,
            }
        )
        model = EmoFuseModel(tiny_model_config())
        result = run_phase(
            config,
            model,
            examples,
            SyntheticMediaProvider(),
            ToyTokenizer(model.config.vocab_size),
            tmp_path / f"descent{phase.value}",
        )
        losses = [
            json.loads(line)["loss"]
            for line in result.log_path.read_text().splitlines()
        ]
        assert len(losses) == 20
        assert all(b < a for a, b in zip(losses, losses[1:])), phase
