"""Answer, retrieval, and decomposition metrics plus run-level reporting.

Free-text answers are scored with normalized token F1 and exact match taken
as the max over gold answers. Boolean answers are mapped to yes/no by literal
prefix and scored as accuracy. Retrieval is scored with recall@k and evidence
set F1 against gold evidence id sets. Decompositions are scored with SARI
against gold decompositions, both sides joined into a single string.

`evaluate_run` aligns answer records with QA instances by question id,
computes a per-dataset-profile metric block per instance, and aggregates by
plain mean. Reports render as a human table (values scaled to 0..100, one
decimal) and as machine-readable JSON lines.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from statistics import mean
from typing import Callable, Iterable, Sequence

from .corpus import UNANSWERABLE, QaInstance
from .errors import EvaluationError
from .pipeline import AnswerRecord

DATASET_PROFILES = ("iirc", "qasper", "strategyqa")

DECOMPOSITION_JOINER = " ; "

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCTUATION = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower().translate(_PUNCTUATION)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def token_f1(prediction: str, gold: str) -> float:
    prediction_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not prediction_tokens and not gold_tokens:
        return 1.0
    if not prediction_tokens or not gold_tokens:
        return 0.0
    overlap = Counter(prediction_tokens) & Counter(gold_tokens)
    n_same = sum(overlap.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(prediction_tokens)
    recall = n_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction: str, gold: str) -> float:
    return float(normalize_answer(prediction) == normalize_answer(gold))


def max_over_golds(
    golds: Sequence[str], prediction: str, metric: Callable[[str, str], float]
) -> float:
    if not golds:
        raise EvaluationError("max_over_golds requires at least one gold answer")
    return max(metric(prediction, gold) for gold in golds)


def accuracy_boolean(prediction: str, gold: str) -> float:
    """Map free text to yes/no by literal prefix; unmappable predictions score 0."""
    gold_label = normalize_answer(gold)
    if gold_label not in ("yes", "no"):
        raise EvaluationError(f"boolean gold answer must be yes or no, got {gold!r}")
    normalized = normalize_answer(prediction)
    if normalized.startswith("yes") or normalized.startswith("true"):
        predicted = "yes"
    elif normalized.startswith("no") or normalized.startswith("false"):
        predicted = "no"
    else:
        return 0.0
    return float(predicted == gold_label)


def recall_at_k(
    retrieved_ids: Sequence[str], gold_sets: Sequence[Iterable[str]], k: int
) -> float:
    """Max over gold sets of the fraction found in the first k retrieved ids."""
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    sets = [set(gold) for gold in gold_sets if set(gold)]
    if not sets:
        raise EvaluationError("recall_at_k requires at least one non-empty gold set")
    top = set(retrieved_ids[:k])
    return max(len(top & gold) / len(gold) for gold in sets)


def evidence_f1(
    predicted_ids: Iterable[str], gold_sets: Sequence[Iterable[str]]
) -> float:
    """Max over gold sets of set-overlap F1 against the predicted id set."""
    sets = [set(gold) for gold in gold_sets if set(gold)]
    if not sets:
        raise EvaluationError("evidence_f1 requires at least one non-empty gold set")
    predicted = set(predicted_ids)
    best = 0.0
    for gold in sets:
        n_same = len(predicted & gold)
        if n_same == 0:
            continue
        precision = n_same / len(predicted)
        recall = n_same / len(gold)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


# ---------------------------------------------------------------------------
# SARI


def _gram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _ratio_sum(numerator: Counter, denominator: Counter) -> float:
    """Macro-average of per-gram numerator/denominator over denominator grams.

    A zero denominator scores 1 when the numerator is also empty, else 0.
    """
    if not denominator:
        return 1.0 if not numerator else 0.0
    total = sum(numerator[gram] / count for gram, count in denominator.items())
    return total / len(denominator)


def _binary_ratio(numerator: set, denominator: set) -> float:
    if not denominator:
        return 1.0 if not numerator else 0.0
    return len(numerator) / len(denominator)


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _sari_ngram(
    source: Counter, prediction: Counter, reference: Counter, n_refs: int
) -> float:
    # Scale the single-sentence counts so they are comparable with reference
    # counts summed over all references.
    source_rep = Counter({gram: count * n_refs for gram, count in source.items()})
    prediction_rep = Counter(
        {gram: count * n_refs for gram, count in prediction.items()}
    )

    keep = source_rep & prediction_rep
    keep_good = keep & reference
    keep_all = source_rep & reference
    keep_f1 = _f1(_ratio_sum(keep_good, keep), _ratio_sum(keep_good, keep_all))

    deleted = source_rep - prediction_rep
    deleted_good = deleted - reference
    delete_precision = _ratio_sum(deleted_good, deleted)

    added = set(prediction) - set(source)
    added_good = added & set(reference)
    added_all = set(reference) - set(source)
    add_f1 = _f1(
        _binary_ratio(added_good, added), _binary_ratio(added_good, added_all)
    )

    return (keep_f1 + delete_precision + add_f1) / 3.0


def sari(source: str, prediction: str, references: Sequence[str]) -> float:
    """SARI over n-grams of size 1..4, averaged across n.

    Each n contributes the mean of keep F1, delete precision, and add F1.
    Reference n-gram counts are pooled across references, with the source and
    prediction counts scaled by the reference count to match.
    """
    if not references:
        raise EvaluationError("sari requires at least one reference")
    source_tokens = source.lower().split()
    prediction_tokens = prediction.lower().split()
    reference_token_lists = [reference.lower().split() for reference in references]

    total = 0.0
    for n in range(1, 5):
        reference_grams: Counter = Counter()
        for tokens in reference_token_lists:
            reference_grams += _gram_counts(tokens, n)
        total += _sari_ngram(
            _gram_counts(source_tokens, n),
            _gram_counts(prediction_tokens, n),
            reference_grams,
            len(references),
        )
    return total / 4.0


def join_decomposition(subquestions: Sequence[str]) -> str:
    return DECOMPOSITION_JOINER.join(subquestions)


# ---------------------------------------------------------------------------
# Run-level evaluation


@dataclass
class EvalReport:
    """Per-instance metric blocks plus aggregate means and breakdowns."""

    profile: str
    per_instance: list[tuple[str, dict[str, float]]]
    aggregate: dict[str, float]
    breakdowns: dict[str, dict[str, float]] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)


def _align(
    records: Sequence[AnswerRecord], instances: Sequence[QaInstance]
) -> list[tuple[AnswerRecord, QaInstance]]:
    if not records:
        raise EvaluationError("no answer records to evaluate")
    record_ids = [record.question_id for record in records]
    instance_ids = [instance.question_id for instance in instances]
    duplicates = sorted(
        qid for qid, count in Counter(record_ids).items() if count > 1
    )
    if duplicates:
        raise EvaluationError(f"duplicate answer records for: {', '.join(duplicates)}")
    by_id = {instance.question_id: instance for instance in instances}
    missing = sorted(set(record_ids) - set(instance_ids))
    extra = sorted(set(instance_ids) - set(record_ids))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"records without instances: {', '.join(missing)}")
        if extra:
            parts.append(f"instances without records: {', '.join(extra)}")
        raise EvaluationError("; ".join(parts))
    return [(record, by_id[record.question_id]) for record in records]


def _answer_scores(record: AnswerRecord, instance: QaInstance) -> tuple[float, float]:
    """Token F1 and exact match, with the unanswerable special case."""
    if instance.gold_answers == [UNANSWERABLE]:
        hit = float(normalize_answer(record.answer) == UNANSWERABLE)
        return hit, hit
    f1 = max_over_golds(instance.gold_answers, record.answer, token_f1)
    em = max_over_golds(instance.gold_answers, record.answer, exact_match)
    return f1, em


def _retrieved_ids(record: AnswerRecord) -> list[str]:
    return [passage_id for passage_id, _ in record.contexts_used]


def _has_gold_evidence(instance: QaInstance) -> bool:
    return any(set(gold) for gold in instance.gold_evidence_ids)


def evaluate_run(
    records: Sequence[AnswerRecord],
    instances: Sequence[QaInstance],
    profile: str,
) -> EvalReport:
    """Score a run against gold instances under a dataset profile.

    Records and instances must cover exactly the same question ids. Metrics
    whose inputs are absent from every instance are dropped from the report
    and listed in `absent`; instances lacking the input for an otherwise
    present metric are skipped for that metric only.
    """
    if profile not in DATASET_PROFILES:
        raise EvaluationError(
            f"unknown dataset profile {profile!r}; expected one of {DATASET_PROFILES}"
        )
    pairs = _align(records, instances)
    per_instance: list[tuple[str, dict[str, float]]] = []
    absent: list[str] = []
    breakdowns: dict[str, dict[str, float]] = {}

    if profile == "iirc":
        for record, instance in pairs:
            f1, em = _answer_scores(record, instance)
            per_instance.append((record.question_id, {"f1": f1, "em": em}))

    elif profile == "qasper":
        by_type: dict[str, list[float]] = {}
        for record, instance in pairs:
            f1, _ = _answer_scores(record, instance)
            metrics = {"answer_f1": f1}
            if _has_gold_evidence(instance):
                metrics["evidence_f1"] = evidence_f1(
                    _retrieved_ids(record), instance.gold_evidence_ids
                )
            per_instance.append((record.question_id, metrics))
            by_type.setdefault(instance.answer_type, []).append(f1)
        if not any("evidence_f1" in metrics for _, metrics in per_instance):
            absent.append("evidence_f1")
        breakdowns["answer_f1_by_type"] = {
            answer_type: mean(values) for answer_type, values in sorted(by_type.items())
        }

    else:  # strategyqa
        for record, instance in pairs:
            if not instance.gold_answers:
                raise EvaluationError(
                    f"{instance.question_id}: boolean instance has no gold answer"
                )
            metrics = {
                "accuracy": accuracy_boolean(record.answer, instance.gold_answers[0])
            }
            if record.contexts_used and _has_gold_evidence(instance):
                metrics["recall_at_10"] = recall_at_k(
                    _retrieved_ids(record), instance.gold_evidence_ids, 10
                )
            if instance.gold_decompositions:
                metrics["sari"] = sari(
                    instance.question,
                    join_decomposition(record.subquestions),
                    [
                        join_decomposition(gold)
                        for gold in instance.gold_decompositions
                    ],
                )
            per_instance.append((record.question_id, metrics))
        for name in ("recall_at_10", "sari"):
            if not any(name in metrics for _, metrics in per_instance):
                absent.append(name)

    aggregate: dict[str, float] = {}
    names = sorted({name for _, metrics in per_instance for name in metrics})
    for name in names:
        values = [metrics[name] for _, metrics in per_instance if name in metrics]
        aggregate[name] = mean(values)
    return EvalReport(
        profile=profile,
        per_instance=per_instance,
        aggregate=aggregate,
        breakdowns=breakdowns,
        absent=absent,
    )


def format_report(report: EvalReport) -> str:
    """Human-readable table, values scaled to 0..100 with one decimal."""
    lines = [f"profile: {report.profile}", f"instances: {len(report.per_instance)}"]
    width = max(
        [len(name) for name in report.aggregate]
        + [len(name) for block in report.breakdowns.values() for name in block]
        + [1]
    )
    for name, value in sorted(report.aggregate.items()):
        lines.append(f"{name:<{width}}  {100 * value:.1f}")
    for block_name, block in sorted(report.breakdowns.items()):
        lines.append(f"-- {block_name}")
        for name, value in sorted(block.items()):
            lines.append(f"{name:<{width}}  {100 * value:.1f}")
    for name in report.absent:
        lines.append(f"{name:<{width}}  absent")
    return "\n".join(lines)


def report_to_json_lines(report: EvalReport) -> str:
    """One JSON line per instance, then a summary line."""
    lines = [
        json.dumps(
            {"question_id": question_id, "metrics": metrics}, sort_keys=True
        )
        for question_id, metrics in report.per_instance
    ]
    lines.append(
        json.dumps(
            {
                "profile": report.profile,
                "aggregate": report.aggregate,
                "breakdowns": report.breakdowns,
                "absent": report.absent,
            },
            sort_keys=True,
        )
    )
    return "\n".join(lines) + "\n"
