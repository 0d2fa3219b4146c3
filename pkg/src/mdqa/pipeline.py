"""End-to-end multi-document question answering.

One question flows through four stages: decompose it into subquestions,
retrieve and rerank passages per subquestion, assemble the few-shot
aggregation prompt under the token budget, and parse the completion into
evidence and answer. `run_batch` applies this to a dataset with bounded
parallelism and produces input-ordered records plus a run manifest.

Context sources:

* ``gold``: the first non-empty gold evidence set, verbatim; no index or
  scorer is touched.
* ``linked_intersection``: BM25 candidates restricted to the instance's
  linked articles, then reranked.
* ``full_retrieval``: BM25 over the whole corpus, then reranked.
* ``rerank_only``: every passage of the instance's grounding article,
  reranked.

Serialized answer records deliberately exclude per-stage timings so that
repeated runs with deterministic providers produce byte-identical output;
timings stay on the in-memory records.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Passage, QaInstance
from .decompose import decompose
from .errors import (
    ConfigError,
    CompletionParseError,
    DuplicateIdError,
    MdqaError,
    RetrievalError,
    StageError,
)
from .index import Bm25Params, Index, search
from .prompting import (
    AGGREGATION_STOP,
    PromptExample,
    TokenBudget,
    build_aggregation_prompt,
    knn_select,
    parse_aggregation_output,
)
from .providers import CompletionClient, CompletionRequest, EmbeddingClient
from .rerank import RelevanceScorer, ScoredPassage, rerank

CONTEXT_SOURCES = ("gold", "linked_intersection", "full_retrieval", "rerank_only")
PROMPT_MODES = ("static", "dynamic")
RECORD_STATUSES = ("ok", "parse_failed", "failed")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run's behavior, apart from the data."""

    decomposition_enabled: bool = True
    context_source: str = "full_retrieval"
    cot: bool = True
    bm25_depth: int = 1000
    contexts_per_question: int = 5
    shots: int = 4
    prompt_mode: str = "dynamic"
    budget: TokenBudget = field(default_factory=TokenBudget)
    bm25: Bm25Params = field(default_factory=Bm25Params)

    def __post_init__(self):
        if self.context_source not in CONTEXT_SOURCES:
            raise ConfigError(
                f"context_source must be one of {CONTEXT_SOURCES}, "
                f"got {self.context_source!r}"
            )
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(
                f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}"
            )
        if self.bm25_depth < 1:
            raise ConfigError(f"bm25_depth must be >= 1, got {self.bm25_depth}")
        if self.contexts_per_question < 1:
            raise ConfigError(
                f"contexts_per_question must be >= 1, got {self.contexts_per_question}"
            )
        if self.shots < 0:
            raise ConfigError(f"shots must be >= 0, got {self.shots}")


def config_to_dict(config: RunConfig) -> dict:
    return {
        "decomposition_enabled": config.decomposition_enabled,
        "context_source": config.context_source,
        "cot": config.cot,
        "bm25_depth": config.bm25_depth,
        "contexts_per_question": config.contexts_per_question,
        "shots": config.shots,
        "prompt_mode": config.prompt_mode,
        "budget": {
            "model_limit": config.budget.model_limit,
            "reserved_output": config.budget.reserved_output,
        },
        "bm25": {"k1": config.bm25.k1, "b": config.bm25.b},
    }


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a possibly partial dict; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    defaults = config_to_dict(RunConfig())
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**defaults, **data}
    budget = {**defaults["budget"], **(merged["budget"] or {})}
    bm25 = {**defaults["bm25"], **(merged["bm25"] or {})}
    unknown = sorted(set(budget) - set(defaults["budget"])) + sorted(
        set(bm25) - set(defaults["bm25"])
    )
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(
            decomposition_enabled=bool(merged["decomposition_enabled"]),
            context_source=merged["context_source"],
            cot=bool(merged["cot"]),
            bm25_depth=int(merged["bm25_depth"]),
            contexts_per_question=int(merged["contexts_per_question"]),
            shots=int(merged["shots"]),
            prompt_mode=merged["prompt_mode"],
            budget=TokenBudget(
                model_limit=int(budget["model_limit"]),
                reserved_output=int(budget["reserved_output"]),
            ),
            bm25=Bm25Params(k1=float(bm25["k1"]), b=float(bm25["b"])),
        )
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid config value: {error}") from error


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as error:
        raise ConfigError(f"{path}: not valid JSON: {error}") from error
    return config_from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config_to_dict(config), handle, indent=2, sort_keys=True)
        handle.write("\n")


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class AnswerRecord:
    """Outcome of one question: what was asked, used, and produced.

    `timings` (seconds per stage) is excluded from serialization so record
    files depend only on inputs and providers.
    """

    question_id: str
    subquestions: list[str]
    contexts_used: list[tuple[str, float]]  # (passage id, relevance)
    evidence: str
    answer: str
    prompt_hash: str
    status: str = "ok"
    error: str = ""
    timings: dict[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.status not in RECORD_STATUSES:
            raise ValueError(
                f"status must be one of {RECORD_STATUSES}, got {self.status!r}"
            )


def record_to_dict(record: AnswerRecord) -> dict:
    return {
        "question_id": record.question_id,
        "subquestions": list(record.subquestions),
        "contexts_used": [[pid, score] for pid, score in record.contexts_used],
        "evidence": record.evidence,
        "answer": record.answer,
        "prompt_hash": record.prompt_hash,
        "status": record.status,
        "error": record.error,
    }


def record_from_dict(data: dict) -> AnswerRecord:
    return AnswerRecord(
        question_id=data["question_id"],
        subquestions=list(data["subquestions"]),
        contexts_used=[(pid, float(score)) for pid, score in data["contexts_used"]],
        evidence=data["evidence"],
        answer=data["answer"],
        prompt_hash=data["prompt_hash"],
        status=data.get("status", "ok"),
        error=data.get("error", ""),
    )


def save_records(records: Sequence[AnswerRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(
                json.dumps(record_to_dict(record), sort_keys=True, ensure_ascii=False)
            )
            handle.write("\n")


def load_records(path: str | Path) -> list[AnswerRecord]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(record_from_dict(json.loads(line)))
    return records


@dataclass
class PipelineServices:
    """Shared collaborators for a run; which ones are required depends on the
    context source (gold needs neither index nor scorer) and prompt mode
    (dynamic needs the embedder)."""

    completion: CompletionClient
    passages: dict[str, Passage]
    example_pool: list[PromptExample] = field(default_factory=list)
    embedder: EmbeddingClient | None = None
    scorer: RelevanceScorer | None = None
    index: Index | None = None
    decomposition_examples: list[tuple[str, list[str]]] | None = None


def passages_by_id(passages: Iterable[Passage]) -> dict[str, Passage]:
    by_id: dict[str, Passage] = {}
    for passage in passages:
        if passage.id in by_id:
            raise DuplicateIdError(f"duplicate passage id {passage.id!r}")
        by_id[passage.id] = passage
    return by_id


def interleave_ranked(
    ranked_lists: Sequence[Sequence[ScoredPassage]],
) -> list[ScoredPassage]:
    """Merge per-subquestion rankings by alternating rank positions.

    All rank-1 passages come first (in subquestion order), then rank-2, and
    so on; duplicates keep their first occurrence. Ranks are reassigned to
    the merged order, relevance scores are kept as scored.
    """
    merged: list[ScoredPassage] = []
    seen: set[str] = set()
    longest = max((len(ranking) for ranking in ranked_lists), default=0)
    for position in range(longest):
        for ranking in ranked_lists:
            if position >= len(ranking):
                continue
            scored = ranking[position]
            if scored.passage.id in seen:
                continue
            seen.add(scored.passage.id)
            merged.append(scored)
    return [
        ScoredPassage(passage=scored.passage, relevance=scored.relevance, rank=rank)
        for rank, scored in enumerate(merged, start=1)
    ]


def _gold_contexts(
    instance: QaInstance, passages: dict[str, Passage]
) -> list[ScoredPassage]:
    reference = next((ids for ids in instance.gold_evidence_ids if ids), None)
    if reference is None:
        raise RetrievalError(
            f"gold: instance {instance.question_id!r} has no gold evidence ids"
        )
    contexts = []
    seen: set[str] = set()
    for passage_id in reference:
        if passage_id in seen:
            continue
        seen.add(passage_id)
        if passage_id not in passages:
            raise RetrievalError(
                f"gold: evidence passage {passage_id!r} not in the corpus"
            )
        contexts.append(
            ScoredPassage(
                passage=passages[passage_id],
                relevance=0.0,
                rank=len(contexts) + 1,
            )
        )
    return contexts


def _candidate_passages(
    subquestion: str,
    instance: QaInstance,
    config: RunConfig,
    services: PipelineServices,
) -> list[Passage]:
    source = config.context_source
    if source == "rerank_only":
        if not instance.grounding_article_id:
            raise RetrievalError(
                f"rerank_only: instance {instance.question_id!r} has no "
                "grounding article id"
            )
        candidates = sorted(
            (
                passage
                for passage in services.passages.values()
                if passage.article_id == instance.grounding_article_id
            ),
            key=lambda passage: (passage.window_index, passage.id),
        )
    else:
        if services.index is None:
            raise RetrievalError(f"{source}: no index available")
        hits = search(services.index, subquestion, config.bm25_depth)
        candidates = []
        for hit in hits:
            passage = services.passages.get(hit.passage_id)
            if passage is None:
                raise RetrievalError(
                    f"{source}: indexed passage {hit.passage_id!r} not in the corpus"
                )
            candidates.append(passage)
        if source == "linked_intersection":
            linked = set(instance.linked_article_ids)
            candidates = [
                passage for passage in candidates if passage.article_id in linked
            ]
    if not candidates:
        raise RetrievalError(
            f"{source}: no candidate passages for subquestion {subquestion!r}"
        )
    return candidates


def retrieve_contexts(
    instance: QaInstance,
    subquestions: Sequence[str],
    config: RunConfig,
    services: PipelineServices,
) -> list[ScoredPassage]:
    """Contexts for the aggregation prompt, at most contexts_per_question per
    subquestion, merged by rank interleaving."""
    if config.context_source == "gold":
        return _gold_contexts(instance, services.passages)
    if not subquestions:
        raise RetrievalError("no subquestions to retrieve for")
    if services.scorer is None:
        raise RetrievalError(f"{config.context_source}: no relevance scorer available")
    per_subquestion = []
    for subquestion in subquestions:
        candidates = _candidate_passages(subquestion, instance, config, services)
        per_subquestion.append(
            rerank(
                subquestion,
                candidates,
                services.scorer,
                top_k=config.contexts_per_question,
            )
        )
    return interleave_ranked(per_subquestion)


def select_examples(
    question: str, config: RunConfig, services: PipelineServices
) -> list[PromptExample]:
    """Static mode takes the pool head; dynamic mode picks nearest neighbors."""
    if config.shots == 0 or not services.example_pool:
        return []
    if config.prompt_mode == "static":
        return list(services.example_pool[: config.shots])
    if services.embedder is None:
        raise ConfigError("dynamic prompt mode requires an embedding client")
    return knn_select(question, services.example_pool, config.shots, services.embedder)


def answer_question(
    instance: QaInstance, config: RunConfig, services: PipelineServices
) -> AnswerRecord:
    """Run one instance through decompose, retrieve, prompt, and generate.

    Stage failures are re-raised as StageError naming the stage; an
    unparseable completion produces a record with status "parse_failed"
    rather than an exception.
    """
    timings: dict[str, float] = {}

    start = time.perf_counter()
    try:
        decomposition = decompose(
            instance.question,
            services.completion,
            enabled=config.decomposition_enabled,
            examples=services.decomposition_examples,
        )
    except MdqaError as error:
        raise StageError("decompose", error) from error
    timings["decompose"] = time.perf_counter() - start
    subquestions = list(decomposition.subquestions)

    start = time.perf_counter()
    try:
        contexts = retrieve_contexts(instance, subquestions, config, services)
    except MdqaError as error:
        raise StageError("retrieve", error) from error
    timings["retrieve"] = time.perf_counter() - start

    start = time.perf_counter()
    try:
        examples = select_examples(instance.question, config, services)
        prompt = build_aggregation_prompt(
            examples,
            contexts,
            instance.question,
            cot=config.cot,
            budget=config.budget,
            count_tokens=services.completion.count_tokens,
        )
    except MdqaError as error:
        raise StageError("prompt", error) from error
    timings["prompt"] = time.perf_counter() - start

    start = time.perf_counter()
    try:
        completion = services.completion.complete(
            CompletionRequest(
                prompt=prompt,
                max_tokens=config.budget.reserved_output,
                temperature=0.0,
                stop_sequences=AGGREGATION_STOP,
            )
        )
    except (MdqaError, KeyError) as error:
        raise StageError("generate", error) from error
    timings["generate"] = time.perf_counter() - start

    status, error_message = "ok", ""
    try:
        evidence, answer = parse_aggregation_output(completion, cot=config.cot)
    except CompletionParseError as error:
        evidence, answer = "", ""
        status, error_message = "parse_failed", str(error)

    return AnswerRecord(
        question_id=instance.question_id,
        subquestions=subquestions,
        contexts_used=[(scored.passage.id, scored.relevance) for scored in contexts],
        evidence=evidence,
        answer=answer,
        prompt_hash=hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
        status=status,
        error=error_message,
        timings=timings,
    )


def corpus_hash(passages: Iterable[Passage]) -> str:
    digest = hashlib.sha256()
    for passage in sorted(passages, key=lambda passage: passage.id):
        for part in (passage.id, passage.title, passage.text):
            digest.update(part.encode("utf-8"))
            digest.update(b"\x00")
        digest.update(b"\x01")
    return digest.hexdigest()


def build_manifest(
    config: RunConfig, services: PipelineServices, records: Sequence[AnswerRecord]
) -> dict:
    """Deterministic description of a finished run; no wall-clock content."""
    status_counts = Counter(record.status for record in records)
    return {
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "corpus_hash": corpus_hash(services.passages.values()),
        "corpus_size": len(services.passages),
        "example_pool_size": len(services.example_pool),
        "providers": {
            "completion": services.completion.provider_id,
            "embedding": services.embedder.provider_id if services.embedder else None,
            "scorer": services.scorer.scorer_id if services.scorer else None,
        },
        "instances": len(records),
        "status_counts": {status: status_counts[status] for status in sorted(status_counts)},
    }


@dataclass
class RunResult:
    records: list[AnswerRecord]
    manifest: dict


def _failure_record(instance: QaInstance, error: Exception) -> AnswerRecord:
    return AnswerRecord(
        question_id=instance.question_id,
        subquestions=[],
        contexts_used=[],
        evidence="",
        answer="",
        prompt_hash="",
        status="failed",
        error=str(error),
    )


def run_batch(
    instances: Sequence[QaInstance],
    config: RunConfig,
    services: PipelineServices,
    workers: int = 1,
) -> RunResult:
    """Answer every instance, capturing per-instance failures as records.

    Output order always matches input order, regardless of worker count.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")

    def answer_one(instance: QaInstance) -> AnswerRecord:
        try:
            return answer_question(instance, config, services)
        except Exception as error:  # captured: one bad instance must not kill the run
            return _failure_record(instance, error)

    if workers == 1 or len(instances) <= 1:
        records = [answer_one(instance) for instance in instances]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(answer_one, instances))
    return RunResult(
        records=records, manifest=build_manifest(config, services, records)
    )
