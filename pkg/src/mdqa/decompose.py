"""Few-shot decomposition of a question into simpler subquestions.

The prompt shows worked examples, each a "Question:" line followed by
numbered subquestion lines, then the target question and the cue "1:". The
default example pool is a frozen five-example fixture shipped with the
package so runs are reproducible.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import CompletionParseError
from .providers import CompletionClient, CompletionRequest

logger = logging.getLogger(__name__)

DECOMPOSITION_MAX_TOKENS = 256

_NUMBERED_LINE = re.compile(r"^\s*(\d+):\s*(\S.*)$")
_LEADING_MARKER = re.compile(r"\s*\d+:")


@dataclass(frozen=True)
class Decomposition:
    question: str
    subquestions: tuple[str, ...]
    decomposed: bool

    def __post_init__(self):
        if not self.subquestions:
            raise ValueError("subquestions must be non-empty")
        if any(not subquestion for subquestion in self.subquestions):
            raise ValueError("subquestions must not contain empty strings")
        identity = self.subquestions == (self.question,)
        if self.decomposed == identity:
            raise ValueError("decomposed flag must be False exactly when "
                             "subquestions equal [question]")


def identity_decomposition(question: str) -> Decomposition:
    return Decomposition(question=question, subquestions=(question,), decomposed=False)


def load_decomposition_examples(path: str | Path | None = None) -> list[tuple[str, list[str]]]:
    """Load (question, subquestions) example pairs; defaults to the packaged fixture."""
    if path is None:
        fixture = resources.files("mdqa").joinpath("data/decomposition_examples.jsonl")
        text = fixture.read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    examples = []
    for line in text.splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        examples.append((record["question"], list(record["subquestions"])))
    return examples


def build_decomposition_prompt(
    question: str, examples: list[tuple[str, list[str]]]
) -> str:
    """Render the few-shot decomposition prompt ending with the cue "1:"."""
    if not examples:
        raise ValueError("examples must be non-empty")
    blocks = []
    for example_question, subquestions in examples:
        lines = [f"Question: {example_question}"]
        lines.extend(f"{i}: {sub}" for i, sub in enumerate(subquestions, start=1))
        blocks.append("\n".join(lines))
    blocks.append(f"Question: {question}\n1:")
    return "\n\n".join(blocks)


def parse_subquestions(completion: str) -> list[str]:
    """Extract "<digits>: <text>" lines, stopping at the first non-matching
    line or non-ascending number; raises CompletionParseError if none match."""
    subquestions = []
    previous_number = 0
    for line in completion.splitlines():
        match = _NUMBERED_LINE.match(line)
        if not match:
            break
        number = int(match.group(1))
        if number <= previous_number:
            break
        previous_number = number
        subquestions.append(match.group(2).strip())
    if not subquestions:
        raise CompletionParseError("no numbered subquestion lines in completion")
    return subquestions


def decompose(
    question: str,
    client: CompletionClient,
    enabled: bool,
    examples: list[tuple[str, list[str]]] | None = None,
) -> Decomposition:
    """Decompose a question via the completion client.

    With enabled=False, or when the model output cannot be parsed, returns
    the identity decomposition. A model output equal to the single original
    question also counts as "not decomposed".
    """
    if not enabled:
        return identity_decomposition(question)
    prompt = build_decomposition_prompt(question, examples or load_decomposition_examples())
    completion = client.complete(
        CompletionRequest(
            prompt=prompt,
            max_tokens=DECOMPOSITION_MAX_TOKENS,
            temperature=0.0,
            stop_sequences=("Question:",),
        )
    )
    # The prompt ends with the cue "1:", so a well-behaved model continues
    # after it; models that restate the numbering are handled as-is.
    text = completion if _LEADING_MARKER.match(completion) else "1:" + completion
    try:
        subquestions = parse_subquestions(text)
    except CompletionParseError:
        logger.warning("could not parse decomposition for %r; using the question as-is", question)
        return identity_decomposition(question)
    if subquestions == [question]:
        return identity_decomposition(question)
    return Decomposition(question=question, subquestions=tuple(subquestions), decomposed=True)
