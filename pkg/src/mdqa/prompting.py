"""Few-shot example selection and aggregation prompt assembly.

The aggregation prompt concatenates an instruction header, worked examples
("Example i:" + documents + "Question:" [+ "Evidence:"] + "Answer:"), and a
target block that ends with the cue the model must continue: "Evidence:"
when chain-of-thought is on, "Answer:" otherwise. Instruction headers are
versioned text fixtures shipped with the package.

Estimated size is held under the model's token budget by a fixed truncation
ladder: cap each retrieved passage, then drop the lowest-ranked passages
down to one, then drop demonstrations starting from the least similar.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .corpus import QaInstance
from .errors import BootstrapAborted, BudgetError, CompletionParseError, ProtocolError, TransportError
from .providers import (
    CompletionClient,
    CompletionRequest,
    EmbeddingClient,
    EmbeddingVector,
    estimate_tokens,
)
from .rerank import ScoredPassage

logger = logging.getLogger(__name__)

DEFAULT_MODEL_LIMIT = 4000
DEFAULT_RESERVED_OUTPUT = 512
DEFAULT_CONTEXT_CHAR_CAP = 1600
AGGREGATION_STOP = ("Example",)

ANSWER_MARKER = "Answer:"

BOOTSTRAP_INSTRUCTION = (
    "Read the documents, the question, and the answer. Write an evidence "
    "paragraph that explains, citing the documents, why the answer is correct."
)


@dataclass
class PromptExample:
    """A worked demonstration: documents, question, evidence paragraph, answer."""

    contexts: list[tuple[str, str]]
    question: str
    evidence: str
    answer: str
    embedding: EmbeddingVector | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.answer:
            raise ValueError("example answer must be non-empty")


@dataclass(frozen=True)
class TokenBudget:
    model_limit: int = DEFAULT_MODEL_LIMIT
    reserved_output: int = DEFAULT_RESERVED_OUTPUT

    def __post_init__(self):
        if self.reserved_output < 1:
            raise ValueError("reserved_output must be positive")
        if self.reserved_output >= self.model_limit:
            raise ValueError("reserved_output must be smaller than model_limit")

    @property
    def prompt_limit(self) -> int:
        return self.model_limit - self.reserved_output


@lru_cache(maxsize=None)
def aggregation_header(cot: bool) -> str:
    name = "aggregation_header_cot.txt" if cot else "aggregation_header_direct.txt"
    return resources.files("mdqa").joinpath(f"data/{name}").read_text(encoding="utf-8").rstrip("\n")


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    norm_a = math.sqrt(sum(x * x for x in a))
    norm_b = math.sqrt(sum(y * y for y in b))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return dot / (norm_a * norm_b)


def knn_select(
    question: str,
    pool: Sequence[PromptExample],
    k: int,
    embedder: EmbeddingClient,
) -> list[PromptExample]:
    """Pick the k pool examples most similar to the question by cosine.

    Ties break by ascending pool index. The result is ordered for prompt use:
    most similar LAST, i.e. closest to the target block. Missing pool
    embeddings are computed once (one batch) and cached on the examples.
    """
    if not pool:
        raise ValueError("example pool must be non-empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    missing = [example for example in pool if example.embedding is None]
    if missing:
        vectors = embedder.embed([example.question for example in missing])
        for example, vector in zip(missing, vectors):
            example.embedding = vector
    question_vector = embedder.embed([question])[0]
    similarities = [
        cosine_similarity(question_vector.values, example.embedding.values)
        for example in pool
    ]
    ranked = sorted(range(len(pool)), key=lambda i: (-similarities[i], i))[:k]
    return [pool[i] for i in reversed(ranked)]


def render_context_block(contexts: Sequence[tuple[str, str]]) -> str:
    """Render documents as "[Document i]: Title: {title}. Content: {text}"."""
    if not contexts:
        raise ValueError("contexts must be non-empty")
    return "\n\n".join(
        f"[Document {i}]: Title: {title}. Content: {text}"
        for i, (title, text) in enumerate(contexts, start=1)
    )


def _render_example(
    position: int,
    contexts: Sequence[tuple[str, str]],
    question: str,
    cot: bool,
    evidence: str | None = None,
    answer: str | None = None,
) -> str:
    parts = [f"Example {position}:", render_context_block(contexts), f"Question: {question}"]
    if answer is None:
        # Target block: end with the cue the model continues from.
        parts.append("Evidence:" if cot else ANSWER_MARKER)
    else:
        if cot:
            parts.append(f"Evidence: {evidence}")
        parts.append(f"{ANSWER_MARKER} {answer}")
    return "\n\n".join(parts)


def _assemble(
    examples: Sequence[PromptExample],
    contexts: Sequence[tuple[str, str]],
    question: str,
    cot: bool,
) -> str:
    blocks = [aggregation_header(cot)]
    for position, example in enumerate(examples, start=1):
        blocks.append(
            _render_example(
                position,
                example.contexts,
                example.question,
                cot,
                evidence=example.evidence,
                answer=example.answer,
            )
        )
    blocks.append(_render_example(len(examples) + 1, contexts, question, cot))
    return "\n\n".join(blocks)


def build_aggregation_prompt(
    examples: Sequence[PromptExample],
    contexts: Sequence[ScoredPassage],
    question: str,
    cot: bool,
    budget: TokenBudget,
    count_tokens: Callable[[str], int] = estimate_tokens,
    context_char_cap: int = DEFAULT_CONTEXT_CHAR_CAP,
) -> str:
    """Assemble the aggregation prompt, guaranteed to fit the token budget.

    When over budget, the truncation ladder applies in order: (1) cap each
    retrieved passage at ``context_char_cap`` characters, (2) drop the
    lowest-ranked passages down to one, (3) drop demonstrations starting from
    the least similar (the front of ``examples``). Raises BudgetError when
    even one capped context and zero examples do not fit. Surviving contexts
    are always a prefix of the given ranked order.
    """
    if not contexts:
        raise ValueError("contexts must be non-empty")
    if cot:
        for example in examples:
            if not example.evidence:
                raise ValueError("chain-of-thought prompts require example evidence")

    context_texts = [(sp.passage.title, sp.passage.text) for sp in contexts]
    active_examples = list(examples)

    prompt = _assemble(active_examples, context_texts, question, cot)
    if count_tokens(prompt) <= budget.prompt_limit:
        return prompt

    context_texts = [(title, text[:context_char_cap]) for title, text in context_texts]
    prompt = _assemble(active_examples, context_texts, question, cot)
    while count_tokens(prompt) > budget.prompt_limit and len(context_texts) > 1:
        context_texts.pop()
        prompt = _assemble(active_examples, context_texts, question, cot)
    while count_tokens(prompt) > budget.prompt_limit and active_examples:
        active_examples.pop(0)
        prompt = _assemble(active_examples, context_texts, question, cot)
    if count_tokens(prompt) > budget.prompt_limit:
        raise BudgetError(
            f"prompt needs {count_tokens(prompt)} tokens even with one capped "
            f"context and no examples; limit is {budget.prompt_limit}"
        )
    return prompt


def parse_aggregation_output(completion: str, cot: bool) -> tuple[str, str]:
    """Split a completion into (evidence, answer).

    The answer is the first line after the LAST "Answer:" marker. With
    chain-of-thought, the evidence is everything before that marker and a
    missing marker is a parse error; without, a missing marker means the
    whole trimmed completion is the answer.
    """
    position = completion.rfind(ANSWER_MARKER)
    if position == -1:
        if cot:
            raise CompletionParseError("completion has no 'Answer:' marker")
        return "", completion.strip()
    tail = completion[position + len(ANSWER_MARKER) :].strip()
    answer = tail.split("\n", 1)[0].strip()
    evidence = completion[:position].strip() if cot else ""
    return evidence, answer


def bootstrap_example_pool(
    training: Sequence[tuple[QaInstance, list[tuple[str, str]]]],
    client: CompletionClient,
    fraction: float,
    seed: int = 13,
    budget: TokenBudget | None = None,
    out_path: str | Path | None = None,
) -> list[PromptExample]:
    """Generate evidence paragraphs for a seeded sample of training instances.

    Each sampled (instance, gold contexts) pair is prompted with its contexts,
    question, and gold answer; the completion becomes the example's evidence.
    Instances whose generation fails locally (budget, missing mock response,
    empty output) are skipped and counted; a transport or protocol failure
    aborts, persisting the partial pool to ``out_path`` when given.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    budget = budget or TokenBudget()
    rng = random.Random(seed)
    sample_size = int(round(len(training) * fraction))
    indices = sorted(rng.sample(range(len(training)), sample_size))
    pool: list[PromptExample] = []
    skipped = 0
    for position in indices:
        instance, contexts = training[position]
        if not contexts or not instance.gold_answers:
            skipped += 1
            continue
        answer = instance.gold_answers[0]
        prompt = "\n\n".join(
            [
                BOOTSTRAP_INSTRUCTION,
                render_context_block(contexts),
                f"Question: {instance.question}",
                f"{ANSWER_MARKER} {answer}",
                "Evidence:",
            ]
        )
        try:
            evidence = client.complete(
                CompletionRequest(
                    prompt=prompt,
                    max_tokens=budget.reserved_output,
                    temperature=0.0,
                    stop_sequences=AGGREGATION_STOP,
                )
            ).strip()
        except (TransportError, ProtocolError) as exc:
            if out_path is not None:
                save_example_pool(pool, out_path)
            raise BootstrapAborted(
                f"provider failure after {len(pool)} examples: {exc}", len(pool)
            ) from exc
        except (BudgetError, KeyError) as exc:
            logger.warning(
                "skipping %s: %s", instance.question_id, exc
            )
            skipped += 1
            continue
        if not evidence:
            logger.warning("skipping %s: empty evidence", instance.question_id)
            skipped += 1
            continue
        pool.append(
            PromptExample(
                contexts=list(contexts),
                question=instance.question,
                evidence=evidence,
                answer=answer,
            )
        )
    if skipped:
        logger.warning("bootstrap skipped %d of %d sampled instances", skipped, len(indices))
    if out_path is not None:
        save_example_pool(pool, out_path)
    return pool


def save_example_pool(pool: Sequence[PromptExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for example in pool:
            record = {
                "question": example.question,
                "evidence": example.evidence,
                "answer": example.answer,
                "contexts": [[title, text] for title, text in example.contexts],
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_example_pool(path: str | Path) -> list[PromptExample]:
    pool = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            record = json.loads(line)
            pool.append(
                PromptExample(
                    contexts=[(title, text) for title, text in record["contexts"]],
                    question=record["question"],
                    evidence=record.get("evidence", ""),
                    answer=record["answer"],
                )
            )
    return pool
