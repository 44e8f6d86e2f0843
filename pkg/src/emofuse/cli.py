"""Command-line entry point: curate, train, eval, review-serve.

Exit codes: 0 ok, 1 fatal runtime error, 2 usage/config error. Backend
identity problems are usage errors and are reported before any work runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import (
    BackendDescriptor,
    BackendRegistry,
    Capability,
    HttpBackend,
)
from .config import (
    ConfigError,
    RunConfig,
    resolve_run_config,
    write_config_snapshot,
)
from .corpus import (
    ManifestFormatError,
    ManifestParseError,
    ValidationError,
    read_clips,
    read_manifest,
    record_from_json,
    record_to_json,
)
from .curation import CurationConfig, run_curation
from .evaluation import (
    EvalError,
    GroupMapError,
    build_group_map,
    evaluate_classification,
    evaluate_emer_ov,
    evaluate_overlap,
    read_predictions,
)
from .fixtures import build_demo_registry, demo_decoder
from .media import FileDecoder
from .model import EmoFuseModel, ModelConfig
from .training import (
    AudioRecord,
    ClassificationRecord,
    PhaseConfig,
    SyntheticMediaProvider,
    ToyTokenizer,
    TrainingConfigError,
    TrainingDataError,
    build_phase1_examples,
    build_phase2_examples,
    build_phase3_examples,
    run_phase,
)

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad flags or config keys; exit code 2."""


class FatalError(Exception):
    """Runtime failure after a well-formed invocation; exit code 1."""


# --- plumbing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emofuse",
        description="Emotion dataset curation, fusion-model training, and evaluation.",
    )
    parser.add_argument("--config", help="TOML or JSON config file")
    parser.add_argument("--seed", type=int, help="run seed (overrides the config file)")
    parser.add_argument("--workers", type=int, help="worker count for parallel stages")
    parser.add_argument(
        "--registry", choices=["mock", "http"], help="backend registry selection"
    )
    parser.add_argument("--out", help="output directory")
    commands = parser.add_subparsers(dest="command", required=True)

    curate = commands.add_parser("curate", help="build SRE/HRE manifests from a clip list")
    curate.add_argument("--clips", help="clip manifest JSONL (overrides [curate].clips)")

    train = commands.add_parser("train", help="run one training phase")
    train.add_argument("--phase", type=int, required=True, choices=[1, 2, 3])

    evaluate = commands.add_parser("eval", help="run one evaluation task")
    evaluate.add_argument(
        "--task", required=True, choices=["emer-ov", "cls", "overlap"]
    )
    evaluate.add_argument("--predictions", help="prediction JSONL path")
    evaluate.add_argument("--references", help="reference JSONL path")

    serve = commands.add_parser("review-serve", help="serve the human review API")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--host", default="127.0.0.1")
    return parser


def _build_registry(run: RunConfig) -> BackendRegistry:
    if run.registry == "mock":
        return build_demo_registry()
    entries = run.sections.get("backends")
    if not entries:
        raise UsageError("registry 'http' requires a [[backends]] list in the config")
    registry = BackendRegistry()
    for entry in entries:
        try:
            descriptor = BackendDescriptor(
                backend_id=entry["id"],
                capability=Capability[entry["capability"]],
                timeout_s=float(entry.get("timeout_s", 30.0)),
                max_retries=int(entry.get("max_retries", 2)),
                backoff_base_s=float(entry.get("backoff_base_s", 1.0)),
                endpoint=entry.get("endpoint"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"bad backend entry {entry!r}: {exc}") from None
        registry.register(descriptor, HttpBackend(descriptor))
    return registry


def _require(section: dict, key: str, section_name: str):
    if key not in section:
        raise UsageError(f"missing config key [{section_name}].{key}")
    return section[key]


def _existing_path(value, what: str) -> Path:
    path = Path(value)
    if not path.exists():
        raise FatalError(f"{what} not found: {path}")
    return path


def _read_jsonl(path: Path, what: str) -> list:
    rows = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FatalError(f"{what} line {line_no}: bad JSON: {exc}") from None
    return rows


# --- subcommands ------------------------------------------------------------------


def cmd_curate(run: RunConfig, args) -> int:
    section = run.section("curate")
    registry = _build_registry(run)
    overrides = {}
    for key in ("score_threshold", "hre_quota_per_source", "random_seed", "max_workers"):
        if key in section:
            overrides[key] = section[key]
    if "excluded_sources" in section:
        overrides["excluded_sources"] = frozenset(section["excluded_sources"])
    for key in (
        "visual_backend",
        "face_backend",
        "audio_backend",
        "agegender_backend",
        "detector_backend",
        "judge_backend",
    ):
        if key in section:
            overrides[key] = section[key]
    overrides.setdefault("random_seed", run.seed)
    overrides.setdefault("max_workers", run.workers)
    try:
        config = CurationConfig(**overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    missing = [b for b in config.backend_ids() if b not in registry]
    if missing:
        raise UsageError(f"unknown backend ids: {missing}")

    clips_value = args.clips or section.get("clips")
    if clips_value is None:
        raise UsageError("missing config key [curate].clips")
    clips_path = _existing_path(clips_value, "clip manifest")
    try:
        clips = read_clips(clips_path)
    except (ValidationError, ManifestParseError) as exc:
        raise FatalError(f"bad clip manifest: {exc}") from None

    decoder_kind = section.get("decoder", "synthetic")
    if decoder_kind == "synthetic":
        decoder = demo_decoder()
    elif decoder_kind == "file":
        decoder = FileDecoder()
    else:
        raise UsageError(f"unknown decoder {decoder_kind!r}")

    report = run_curation(clips, registry, config, run.out_dir, decoder=decoder)
    write_config_snapshot(run, {"curation": config.backend_ids()})
    print(
        f"curated {len(clips)} clips -> "
        f"SRE {len(report.sre.records)}, HRE {len(report.hre.records)}"
    )
    print(f"outputs in {run.out_dir}")
    return 0


def _model_from_section(section: dict) -> ModelConfig:
    fields = dict(section)
    if "face_scales" in fields:
        fields["face_scales"] = tuple(fields["face_scales"])
    try:
        return ModelConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [model] section: {exc}") from None


def _phase_examples(phase: int, train_section: dict, seed: int) -> list:
    if phase == 1:
        path = _existing_path(
            _require(train_section, "audio_records", "train"), "audio record file"
        )
        records = []
        for row in _read_jsonl(path, "audio records"):
            records.append(
                AudioRecord(
                    audio_id=row.get("audio_id", ""),
                    caption=row.get("caption"),
                    transcript=row.get("transcript"),
                )
            )
        return build_phase1_examples(records, seed=seed)
    if phase == 2:
        path = _existing_path(
            _require(train_section, "classification_records", "train"),
            "classification record file",
        )
        records = []
        for row in _read_jsonl(path, "classification records"):
            try:
                records.append(
                    ClassificationRecord(
                        clip_id=row.get("clip_id", ""),
                        label=row.get("label", ""),
                        label_space=tuple(row.get("label_space", ())),
                    )
                )
            except TrainingDataError as exc:
                raise FatalError(str(exc)) from None
        return build_phase2_examples(records, seed=seed)
    sre_path = _existing_path(
        _require(train_section, "sre_manifest", "train"), "SRE manifest"
    )
    hre_path = _existing_path(
        _require(train_section, "hre_manifest", "train"), "HRE manifest"
    )
    try:
        sre = read_manifest(sre_path)
        hre = read_manifest(hre_path)
    except (ManifestFormatError, ManifestParseError) as exc:
        raise FatalError(f"bad manifest: {exc}") from None
    return build_phase3_examples(sre.records, hre.records, seed=seed)


def cmd_train(run: RunConfig, args) -> int:
    train_section = run.section("train")
    phase_overrides = train_section.get(f"phase{args.phase}", {})
    if not isinstance(phase_overrides, dict):
        raise UsageError(f"config section [train.phase{args.phase}] must be a table")
    try:
        phase_config = PhaseConfig.from_json({"phase": args.phase, **phase_overrides})
    except TrainingConfigError as exc:
        raise UsageError(str(exc)) from None

    model = EmoFuseModel(_model_from_section(run.section("model")))
    examples = _phase_examples(args.phase, train_section, run.seed)
    provider = SyntheticMediaProvider(
        duration_s=float(train_section.get("media_duration_s", 1.0))
    )
    tokenizer = ToyTokenizer(model.config.vocab_size)
    try:
        result = run_phase(
            phase_config,
            model,
            examples,
            provider,
            tokenizer,
            run.out_dir,
            optimizer=train_section.get("optimizer", "sgd"),
            micro_batch_size=int(train_section.get("micro_batch_size", 8)),
            seed=run.seed,
        )
    except TrainingConfigError as exc:
        raise UsageError(str(exc)) from None
    except TrainingDataError as exc:
        raise FatalError(str(exc)) from None
    write_config_snapshot(run, {"phase": phase_config.to_json()})
    print(f"phase {args.phase}: {result.steps} steps, final loss {result.final_loss:.6f}")
    print(f"checkpoint {result.checkpoint_path}")
    return 0


def _paired_rows(predictions_path: Path, references_path: Path):
    predictions = read_predictions(predictions_path)
    references = {row["id"]: row for row in read_predictions(references_path)}
    pairs = []
    for row in predictions:
        if row["id"] not in references:
            raise FatalError(f"prediction id {row['id']!r} has no reference row")
        pairs.append((row, references[row["id"]]))
    return pairs


def cmd_eval(run: RunConfig, args) -> int:
    section = run.section("eval")
    predictions_value = args.predictions or section.get("predictions")
    references_value = args.references or section.get("references")
    if predictions_value is None:
        raise UsageError("missing config key [eval].predictions")
    if references_value is None:
        raise UsageError("missing config key [eval].references")
    predictions_path = _existing_path(predictions_value, "prediction file")
    references_path = _existing_path(references_value, "reference file")
    pairs = _paired_rows(predictions_path, references_path)

    if args.task == "emer-ov":
        source = section.get("group_source", "static_table")
        if source == "judge":
            registry = _build_registry(run)
            judge_id = section.get("judge_backend", "mock-judge")
            if judge_id not in registry:
                raise UsageError(f"unknown backend ids: ['{judge_id}']")
            universe = sorted(
                {
                    str(label).strip().lower()
                    for _, reference in pairs
                    for label in reference.get("labels", [])
                }
            )
            group_map = build_group_map(
                universe, source="judge",
                judge=registry.get(judge_id), cache_dir=run.out_dir,
            )
        else:
            group_map = build_group_map(source=source)
        samples = [
            (row["id"], reference.get("labels", []), row.get("labels", []))
            for row, reference in pairs
        ]
        report = evaluate_emer_ov(samples, group_map)
    elif args.task == "cls":
        class_list = section.get("class_list")
        if not class_list:
            raise UsageError("missing config key [eval].class_list")
        samples = [
            (row["id"], reference.get("label", ""), row.get("label", ""))
            for row, reference in pairs
        ]
        report = evaluate_classification(samples, class_list)
    else:
        registry = _build_registry(run)
        judge_id = section.get("judge_backend", "mock-judge")
        if judge_id not in registry:
            raise UsageError(f"unknown backend ids: ['{judge_id}']")
        samples = [
            (row["id"], row.get("description", ""), reference.get("description", ""))
            for row, reference in pairs
        ]
        report = evaluate_overlap(
            samples, registry.get(judge_id), descriptor=registry.descriptor(judge_id)
        )

    run.out_dir.mkdir(parents=True, exist_ok=True)
    json_path = run.out_dir / f"report-{args.task}.json"
    csv_path = run.out_dir / f"per_sample-{args.task}.csv"
    report.write(json_path, csv_path)
    write_config_snapshot(run, {"task": args.task})
    for name in sorted(report.metrics):
        print(f"{name}: {report.metrics[name]:.4f}")
    print(f"report {json_path}")
    return 0


def _load_review_records(path: Path) -> dict:
    try:
        manifest = read_manifest(path)
        return {record.clip_id: record for record in manifest.records}
    except ManifestFormatError:
        pass  # plain record JSONL without a manifest header
    records = {}
    for line_no, row in enumerate(_read_jsonl(path, "record file"), 1):
        try:
            record = record_from_json(row)
        except ValidationError as exc:
            raise FatalError(f"record line {line_no}: {exc}") from None
        records[record.clip_id] = record
    return records


def cmd_review_serve(run: RunConfig, args) -> int:
    import uvicorn

    from .review_service import ReviewStore, create_app

    section = run.section("review")
    records_path = _existing_path(
        _require(section, "records", "review"), "record file"
    )
    records = _load_review_records(records_path)
    clips = {}
    if "clips" in section:
        clips = {
            clip.clip_id: clip
            for clip in read_clips(_existing_path(section["clips"], "clip manifest"))
        }
    store = ReviewStore(
        records, clips=clips, lease_timeout_s=float(section.get("lease_timeout_s", 60.0))
    )
    app = create_app(store)
    write_config_snapshot(run, {"records": str(records_path)})
    out_path = run.out_dir / "reviewed.jsonl"
    print(f"serving review API on {args.host}:{args.port}; reviewed records -> {out_path}")
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except (OSError, SystemExit) as exc:
        raise FatalError(f"could not serve on {args.host}:{args.port}: {exc}") from None
    finally:
        flushed = sorted(store.records().values(), key=lambda r: r.clip_id)
        lines = [
            json.dumps(record_to_json(record), sort_keys=True, separators=(",", ":"))
            for record in flushed
        ]
        run.out_dir.mkdir(parents=True, exist_ok=True)
        out_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return 0


# --- entry point --------------------------------------------------------------------

_COMMANDS = {
    "curate": cmd_curate,
    "train": cmd_train,
    "eval": cmd_eval,
    "review-serve": cmd_review_serve,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        run = resolve_run_config(args.command, args)
        return _COMMANDS[args.command](run, args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FatalError, EvalError, GroupMapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
