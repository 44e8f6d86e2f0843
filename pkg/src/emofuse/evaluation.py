"""Evaluation protocols for emotion outputs.

Three independent protocols: grouped open-vocabulary set metrics
(precision/recall/avg over synonym group ids), classification recall
metrics (UAR/WAR), and judge-scored overlap between free-form emotion
descriptions. Pure metric code never calls a backend; overlap scoring
does and flags judge failures instead of hiding them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .backends import BackendError, ScoringError, judge_score, judge_text, text_checksum
from .curation import load_template

logger = logging.getLogger(__name__)


class EvalError(Exception):
    """Metric preconditions or report invariants violated."""


class GroupMapError(EvalError):
    """A synonym group map could not be built or applied."""


class UnknownLabelPolicy(Enum):
    SINGLETON = "SINGLETON"
    ERROR = "ERROR"


# --- synonym grouping -------------------------------------------------------------


@dataclass(frozen=True)
class GroupMap:
    """Label -> dense group id over a declared universe.

    Unknown labels either get fresh singleton groups (deterministically,
    sorted order) or raise, depending on the policy.
    """

    mapping: Mapping[str, int]
    policy: UnknownLabelPolicy = UnknownLabelPolicy.SINGLETON

    def __post_init__(self):
        if not self.mapping:
            raise GroupMapError("label universe must be non-empty")
        ids = set(self.mapping.values())
        if ids != set(range(len(ids))):
            raise GroupMapError("group ids must be dense integers starting at 0")
        for label in self.mapping:
            if not label or label != label.strip().lower():
                raise GroupMapError(f"labels must be trimmed lowercase, got {label!r}")

    @property
    def universe(self) -> frozenset:
        return frozenset(self.mapping)

    @property
    def group_count(self) -> int:
        return len(set(self.mapping.values()))

    def resolve(self, *label_sets) -> list:
        """Map each label set to its group-id set, consistently across sets.

        Unknown labels are assigned fresh ids above the known range, one per
        distinct label, in sorted order over all sets of this call.
        """
        cleaned = [
            {str(label).strip().lower() for label in labels} for labels in label_sets
        ]
        unknown = sorted(
            {label for labels in cleaned for label in labels} - set(self.mapping)
        )
        if unknown and self.policy is UnknownLabelPolicy.ERROR:
            raise GroupMapError(f"unknown labels: {unknown}")
        fresh_base = self.group_count
        extension = {label: fresh_base + i for i, label in enumerate(unknown)}
        return [
            frozenset(
                self.mapping.get(label, extension.get(label)) for label in labels
            )
            for labels in cleaned
        ]


def load_default_synonym_table() -> list:
    payload = json.loads(
        resources.files("emofuse").joinpath("data", "emotion_groups.json").read_text(
            encoding="utf-8"
        )
    )
    return payload["groups"]


def _map_from_groups(groups: Iterable, policy) -> GroupMap:
    mapping = {}
    for group_id, group in enumerate(groups):
        labels = [str(label).strip().lower() for label in group]
        if not labels:
            raise GroupMapError(f"group {group_id} is empty")
        for label in labels:
            if label in mapping:
                raise GroupMapError(f"label {label!r} appears in two groups")
            mapping[label] = group_id
    return GroupMap(mapping=mapping, policy=policy)


GROUPING_TEMPLATE = "label_grouping.txt"

_GROUP_LINE_RE = re.compile(r"^group\s*\d*\s*:\s*(.+)$", re.IGNORECASE)

GROUP_CACHE_FORMAT_VERSION = 1


def _parse_judge_grouping(response: str, universe) -> list:
    groups = []
    for line in response.splitlines():
        match = _GROUP_LINE_RE.match(line.strip())
        if not match:
            continue
        labels = [
            part.strip().lower() for part in match.group(1).split(",") if part.strip()
        ]
        if labels:
            groups.append(labels)
    seen = [label for group in groups for label in group]
    if sorted(seen) != sorted(universe):
        raise GroupMapError(
            "judge grouping must mention every label exactly once; "
            f"got {sorted(seen)} for universe {sorted(universe)}"
        )
    return groups


def build_group_map(
    label_lists=None,
    source: str = "static_table",
    policy: UnknownLabelPolicy = UnknownLabelPolicy.SINGLETON,
    judge=None,
    cache_dir=None,
) -> GroupMap:
    """Build the synonym map from the curated table or from a judge.

    For ``static_table``, ``label_lists`` is an iterable of synonym groups
    (defaults to the shipped table). For ``judge``, it is the flat label
    universe to group; responses are cached by universe + template version
    and a judge failure is an error, never a silent identity map.
    """
    if source == "static_table":
        groups = label_lists if label_lists is not None else load_default_synonym_table()
        groups = list(groups)
        if not groups:
            raise GroupMapError("label universe must be non-empty")
        return _map_from_groups(groups, policy)
    if source != "judge":
        raise GroupMapError(f"unknown group map source {source!r}")

    if judge is None:
        raise GroupMapError("judge source requires a judge backend")
    universe = sorted({str(label).strip().lower() for label in (label_lists or [])})
    if not universe:
        raise GroupMapError("label universe must be non-empty")
    template = load_template(GROUPING_TEMPLATE)
    cache_key = hashlib.sha256(
        json.dumps(
            {"labels": universe, "template": text_checksum(template)},
            sort_keys=True,
        ).encode("utf-8")
    ).hexdigest()[:16]
    cache_path = Path(cache_dir) / f"group-map-{cache_key}.json" if cache_dir else None
    if cache_path is not None and cache_path.exists():
        cached = json.loads(cache_path.read_text(encoding="utf-8"))
        if cached.get("format_version") == GROUP_CACHE_FORMAT_VERSION:
            return _map_from_groups(cached["groups"], policy)
    prompt = template.format(labels=", ".join(universe))
    try:
        response = judge_text(judge, prompt)
    except BackendError as exc:
        raise GroupMapError(f"judge grouping failed: {exc}") from exc
    groups = _parse_judge_grouping(response, universe)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(
            json.dumps(
                {
                    "format_version": GROUP_CACHE_FORMAT_VERSION,
                    "labels": universe,
                    "template_checksum": text_checksum(template),
                    "groups": groups,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    return _map_from_groups(groups, policy)


# --- open-vocabulary set metrics -----------------------------------------------------


@dataclass(frozen=True)
class OvMetrics:
    precision: float
    recall: float

    @property
    def avg(self) -> float:
        return (self.precision + self.recall) / 2


def ov_metrics(truth, prediction, group_map: GroupMap) -> OvMetrics:
    """Grouped set precision/recall for one sample.

    Precision is defined as 0 when the prediction set is empty; an empty
    truth set is a caller error.
    """
    truth = set(truth)
    if not truth:
        raise EvalError("truth label set must be non-empty")
    truth_groups, predicted_groups = group_map.resolve(truth, set(prediction))
    hits = len(truth_groups & predicted_groups)
    precision = hits / len(predicted_groups) if predicted_groups else 0.0
    recall = hits / len(truth_groups)
    return OvMetrics(precision=precision, recall=recall)


def corpus_ov_metrics(samples, group_map: GroupMap) -> dict:
    """Mean per-sample metrics as percentages over (truth, prediction) pairs."""
    samples = list(samples)
    if not samples:
        raise EvalError("no samples to evaluate")
    scores = [ov_metrics(truth, prediction, group_map) for truth, prediction in samples]
    n = len(scores)
    return {
        "precision": 100.0 * sum(s.precision for s in scores) / n,
        "recall": 100.0 * sum(s.recall for s in scores) / n,
        "avg": 100.0 * sum(s.avg for s in scores) / n,
    }


# --- classification metrics ----------------------------------------------------------


@dataclass(frozen=True)
class ClassificationMetrics:
    uar: float
    war: float
    out_of_list: int


def classification_metrics(predictions, ground_truths, class_list) -> ClassificationMetrics:
    """Unweighted average recall over represented classes, plus accuracy.

    Predictions outside the class list can never match and are tallied.
    """
    predictions = list(predictions)
    ground_truths = list(ground_truths)
    if len(predictions) != len(ground_truths):
        raise EvalError(
            f"got {len(predictions)} predictions for {len(ground_truths)} ground truths"
        )
    if not ground_truths:
        raise EvalError("no samples to evaluate")
    classes = list(class_list)
    class_set = set(classes)
    if len(class_set) != len(classes):
        raise EvalError("class_list must be unique")
    bad = sorted({truth for truth in ground_truths if truth not in class_set})
    if bad:
        raise EvalError(f"ground truths outside class_list: {bad}")

    out_of_list = sum(1 for p in predictions if p not in class_set)
    if out_of_list:
        logger.warning("%d predictions outside the class list", out_of_list)

    totals = {c: 0 for c in classes}
    correct = {c: 0 for c in classes}
    for predicted, truth in zip(predictions, ground_truths):
        totals[truth] += 1
        if predicted == truth:
            correct[truth] += 1
    recalls = [correct[c] / totals[c] for c in classes if totals[c] > 0]
    uar = sum(recalls) / len(recalls)
    war = sum(correct.values()) / len(ground_truths)
    return ClassificationMetrics(uar=uar, war=war, out_of_list=out_of_list)


# --- judge-scored description overlap -------------------------------------------------

CLUE_TEMPLATE = "clue_overlap.txt"
LABEL_TEMPLATE = "label_overlap.txt"


@dataclass(frozen=True)
class OverlapScore:
    clue_overlap: int
    label_overlap: int
    judge_rationale: str


def overlap_scores(predicted_description: str, reference_description: str, judge, **judge_kwargs) -> OverlapScore:
    """Two judge calls, one per overlap dimension, with versioned templates."""
    if not predicted_description.strip() or not reference_description.strip():
        raise EvalError("descriptions must be non-empty")
    responses = []
    scores = []
    for template_name in (CLUE_TEMPLATE, LABEL_TEMPLATE):
        prompt = load_template(template_name).format(
            reference=reference_description, candidate=predicted_description
        )
        scores.append(judge_score(judge, prompt, **judge_kwargs))
        responses.append(f"[{template_name}] prompt checksum {text_checksum(prompt)}")
    return OverlapScore(
        clue_overlap=scores[0],
        label_overlap=scores[1],
        judge_rationale="; ".join(responses),
    )


def corpus_overlap_scores(samples, judge, **judge_kwargs) -> dict:
    """Mean overlap over (sample_id, prediction, reference) triples.

    Samples whose judge call fails are excluded from the means and counted.
    """
    samples = list(samples)
    if not samples:
        raise EvalError("no samples to evaluate")
    per_sample = []
    flagged = []
    for sample_id, prediction, reference in samples:
        try:
            score = overlap_scores(prediction, reference, judge, **judge_kwargs)
        except (ScoringError, BackendError) as exc:
            logger.warning("overlap judging failed for %s: %s", sample_id, exc)
            flagged.append({"id": sample_id, "error": str(exc)})
            continue
        per_sample.append((sample_id, score))
    metrics = {"scored": float(len(per_sample)), "flagged": float(len(flagged))}
    if per_sample:
        metrics["clue_overlap"] = sum(s.clue_overlap for _, s in per_sample) / len(per_sample)
        metrics["label_overlap"] = sum(s.label_overlap for _, s in per_sample) / len(per_sample)
    return {"metrics": metrics, "per_sample": per_sample, "flagged": flagged}


# --- reports ---------------------------------------------------------------------------


class EvalTask(Enum):
    EMER_OV = "EMER_OV"
    EMOTION_CLS = "EMOTION_CLS"
    REASONING_OVERLAP = "REASONING_OVERLAP"


@dataclass(frozen=True)
class EvalReport:
    task: EvalTask
    metrics: dict
    per_sample: tuple

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not math.isfinite(value):
                raise EvalError(f"metric {name} is not finite: {value}")
        ids = [row["id"] for row in self.per_sample]
        if len(ids) != len(set(ids)):
            raise EvalError("per_sample ids must be unique")

    def to_json(self) -> dict:
        return {
            "task": self.task.value,
            "metrics": dict(sorted(self.metrics.items())),
            "per_sample": list(self.per_sample),
        }

    def write(self, json_path, csv_path) -> None:
        json_path = Path(json_path)
        csv_path = Path(csv_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(
            json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        columns = ["id"] + sorted(
            {key for row in self.per_sample for key in row} - {"id"}
        )
        with csv_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=columns)
            writer.writeheader()
            for row in self.per_sample:
                writer.writerow(row)


def read_predictions(path) -> list:
    """Read prediction JSONL rows of {id, labels?, label?, description?}."""
    rows = []
    seen = set()
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EvalError(f"line {line_no}: bad JSON: {exc}") from None
        if not isinstance(row, dict) or "id" not in row:
            raise EvalError(f"line {line_no}: each row needs an 'id'")
        if row["id"] in seen:
            raise EvalError(f"line {line_no}: duplicate id {row['id']!r}")
        seen.add(row["id"])
        rows.append(row)
    return rows


# --- task runners ------------------------------------------------------------------


def evaluate_emer_ov(samples, group_map: GroupMap) -> EvalReport:
    """samples: (sample_id, truth labels, predicted labels) triples."""
    samples = list(samples)
    per_sample = []
    pairs = []
    for sample_id, truth, prediction in samples:
        metrics = ov_metrics(truth, prediction, group_map)
        pairs.append((truth, prediction))
        per_sample.append(
            {
                "id": sample_id,
                "truth": ", ".join(sorted({str(t).strip().lower() for t in truth})),
                "prediction": ", ".join(
                    sorted({str(p).strip().lower() for p in prediction})
                ),
                "precision": metrics.precision,
                "recall": metrics.recall,
                "avg": metrics.avg,
            }
        )
    return EvalReport(
        task=EvalTask.EMER_OV,
        metrics=corpus_ov_metrics(pairs, group_map),
        per_sample=tuple(per_sample),
    )


def evaluate_classification(samples, class_list) -> EvalReport:
    """samples: (sample_id, ground truth, prediction) triples."""
    samples = list(samples)
    truths = [truth for _, truth, _ in samples]
    predictions = [prediction for _, _, prediction in samples]
    metrics = classification_metrics(predictions, truths, class_list)
    per_sample = tuple(
        {
            "id": sample_id,
            "truth": truth,
            "prediction": prediction,
            "correct": int(prediction == truth),
        }
        for sample_id, truth, prediction in samples
    )
    return EvalReport(
        task=EvalTask.EMOTION_CLS,
        metrics={
            "uar": metrics.uar,
            "war": metrics.war,
            "out_of_list": float(metrics.out_of_list),
        },
        per_sample=per_sample,
    )


def evaluate_overlap(samples, judge, **judge_kwargs) -> EvalReport:
    """samples: (sample_id, prediction text, reference text) triples."""
    outcome = corpus_overlap_scores(samples, judge, **judge_kwargs)
    per_sample = [
        {
            "id": sample_id,
            "clue_overlap": score.clue_overlap,
            "label_overlap": score.label_overlap,
        }
        for sample_id, score in outcome["per_sample"]
    ]
    per_sample.extend(
        {"id": row["id"], "error": row["error"]} for row in outcome["flagged"]
    )
    return EvalReport(
        task=EvalTask.REASONING_OVERLAP,
        metrics=outcome["metrics"],
        per_sample=tuple(per_sample),
    )
