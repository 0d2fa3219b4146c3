"""Canonical data schema, corpus ingestion, and article-to-passage windowing.

File formats (all UTF-8, one JSON object per line):

* corpus file — ``{"id": str, "title": str, "contents": str}``. For passage
  files the id must look like ``"<article_id>#<window_index>"``; article id
  and window index are recovered from it.
* QA file — ``{"question_id": str, "question": str, "gold_answers": [str],
  "answer_type": str, "gold_evidence_ids": [[str]], "linked_article_ids":
  [str], "grounding_article_id": str|null, "gold_decompositions": [[str]]}``.
  The last three fields are optional.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, CorpusFormatError, DuplicateIdError

ANSWER_TYPES = ("span", "binary", "numeric", "abstractive", "extractive", "boolean", "none")

UNANSWERABLE = "unanswerable"

# A sentence ends at '.', '!' or '?' followed by whitespace or end of text.
# Deliberately no abbreviation guard: the rule must be reproducible.
_SENTENCE_BREAK = re.compile(r"(?<=[.!?]) ")


@dataclass
class Article:
    """A source document as provided by a dataset."""

    id: str
    title: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise CorpusFormatError("article id must be non-empty")
        if not self.text and not self.title:
            raise CorpusFormatError(f"article {self.id!r}: text and title both empty")


@dataclass
class Passage:
    """An indexed retrieval unit: a window of sentences from one article."""

    id: str
    article_id: str
    title: str
    text: str
    window_index: int

    def __post_init__(self):
        if not self.id:
            raise CorpusFormatError("passage id must be non-empty")
        if self.window_index < 0:
            raise CorpusFormatError(f"passage {self.id!r}: negative window_index")


@dataclass
class QaInstance:
    """One question with its gold annotations.

    ``gold_evidence_ids`` holds one id list per annotator reference; lists may
    be empty. ``gold_decompositions`` (optional) holds reference subquestion
    lists used for decomposition scoring.
    """

    question_id: str
    question: str
    gold_answers: list[str]
    answer_type: str
    gold_evidence_ids: list[list[str]] = field(default_factory=list)
    linked_article_ids: list[str] = field(default_factory=list)
    grounding_article_id: str | None = None
    gold_decompositions: list[list[str]] | None = None

    def __post_init__(self):
        if not self.question_id:
            raise CorpusFormatError("question_id must be non-empty")
        if self.answer_type not in ANSWER_TYPES:
            raise CorpusFormatError(
                f"question {self.question_id!r}: unknown answer_type {self.answer_type!r}"
            )
        unanswerable = self.gold_answers == [UNANSWERABLE]
        if (self.answer_type == "none") != unanswerable:
            raise CorpusFormatError(
                f"question {self.question_id!r}: answer_type 'none' requires gold_answers "
                f"[{UNANSWERABLE!r}] and vice versa"
            )
        if not self.gold_answers:
            raise CorpusFormatError(f"question {self.question_id!r}: gold_answers empty")


def split_sentences(text: str) -> list[str]:
    """Split whitespace-normalized text into sentences.

    A sentence is a maximal span ending at '.', '!' or '?' followed by
    whitespace or end of input; a trailing fragment without a terminator is
    kept as a final sentence. Joining the result with single spaces
    reproduces the whitespace-normalized input.
    """
    normalized = " ".join(text.split())
    if not normalized:
        return []
    return _SENTENCE_BREAK.split(normalized)


def window_split(article: Article, window_size: int = 3) -> list[Passage]:
    """Split an article into non-overlapping windows of ``window_size`` sentences.

    Every window except possibly the last holds exactly ``window_size``
    sentences; window indexes run 0..n-1. An article with no sentences yields
    no passages.
    """
    if window_size < 1:
        raise ValueError(f"window_size must be >= 1, got {window_size}")
    sentences = split_sentences(article.text)
    passages = []
    for index, start in enumerate(range(0, len(sentences), window_size)):
        window = sentences[start : start + window_size]
        passages.append(
            Passage(
                id=f"{article.id}#{index}",
                article_id=article.id,
                title=article.title,
                text=" ".join(window),
                window_index=index,
            )
        )
    return passages


def passage_from_paragraph(article_id: str, title: str, paragraph: str, index: int) -> Passage:
    """Wrap one pre-segmented paragraph as a Passage (no windowing)."""
    return Passage(
        id=f"{article_id}#{index}",
        article_id=article_id,
        title=title,
        text=paragraph,
        window_index=index,
    )


def _iter_json_lines(path: str | Path):
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", line_number) from exc
            if not isinstance(record, dict):
                raise CorpusFormatError("record is not a JSON object", line_number)
            yield line_number, record


def _require(record: dict, field_name: str, line_number: int):
    if field_name not in record:
        raise CorpusFormatError(f"missing required field {field_name!r}", line_number)
    return record[field_name]


def load_articles(path: str | Path) -> list[Article]:
    """Load an article corpus file, rejecting duplicate ids."""
    articles = []
    seen: set[str] = set()
    for line_number, record in _iter_json_lines(path):
        article_id = _require(record, "id", line_number)
        title = _require(record, "title", line_number)
        contents = _require(record, "contents", line_number)
        if article_id in seen:
            raise DuplicateIdError(f"duplicate id {article_id!r}", line_number)
        seen.add(article_id)
        try:
            articles.append(Article(id=article_id, title=title, text=contents))
        except CorpusFormatError as exc:
            raise CorpusFormatError(str(exc), line_number) from exc
    return articles


def _parse_passage_id(passage_id: str, line_number: int) -> tuple[str, int]:
    article_id, sep, index_part = passage_id.rpartition("#")
    if not sep or not article_id or not index_part.isdigit():
        raise CorpusFormatError(
            f"passage id {passage_id!r} is not of the form '<article_id>#<window_index>'",
            line_number,
        )
    return article_id, int(index_part)


def load_passages(path: str | Path) -> list[Passage]:
    """Load a passage corpus file, rejecting duplicate ids."""
    passages = []
    seen: set[str] = set()
    for line_number, record in _iter_json_lines(path):
        passage_id = _require(record, "id", line_number)
        title = _require(record, "title", line_number)
        contents = _require(record, "contents", line_number)
        if passage_id in seen:
            raise DuplicateIdError(f"duplicate id {passage_id!r}", line_number)
        seen.add(passage_id)
        article_id, window_index = _parse_passage_id(passage_id, line_number)
        passages.append(
            Passage(
                id=passage_id,
                article_id=article_id,
                title=title,
                text=contents,
                window_index=window_index,
            )
        )
    return passages


def load_corpus(path: str | Path, format: str) -> list[Article] | list[Passage]:
    """Load a corpus file in the declared format ('article_jsonl' or 'passage_jsonl')."""
    if format == "article_jsonl":
        return load_articles(path)
    if format == "passage_jsonl":
        return load_passages(path)
    raise ConfigError(f"unknown corpus format {format!r}")


def save_articles(articles: Iterable[Article], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for article in articles:
            record = {"id": article.id, "title": article.title, "contents": article.text}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def save_passages(passages: Iterable[Passage], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for passage in passages:
            record = {"id": passage.id, "title": passage.title, "contents": passage.text}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_qa_instances(path: str | Path) -> list[QaInstance]:
    """Load a QA file, rejecting duplicate question ids."""
    instances = []
    seen: set[str] = set()
    for line_number, record in _iter_json_lines(path):
        question_id = _require(record, "question_id", line_number)
        question = _require(record, "question", line_number)
        gold_answers = _require(record, "gold_answers", line_number)
        answer_type = _require(record, "answer_type", line_number)
        if question_id in seen:
            raise DuplicateIdError(f"duplicate question_id {question_id!r}", line_number)
        seen.add(question_id)
        try:
            instances.append(
                QaInstance(
                    question_id=question_id,
                    question=question,
                    gold_answers=list(gold_answers),
                    answer_type=answer_type,
                    gold_evidence_ids=[list(ids) for ids in record.get("gold_evidence_ids", [])],
                    linked_article_ids=list(record.get("linked_article_ids", [])),
                    grounding_article_id=record.get("grounding_article_id"),
                    gold_decompositions=(
                        [list(sub) for sub in record["gold_decompositions"]]
                        if record.get("gold_decompositions") is not None
                        else None
                    ),
                )
            )
        except CorpusFormatError as exc:
            raise CorpusFormatError(str(exc), line_number) from exc
    return instances


def save_qa_instances(instances: Iterable[QaInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for instance in instances:
            record = {
                "question_id": instance.question_id,
                "question": instance.question,
                "gold_answers": instance.gold_answers,
                "answer_type": instance.answer_type,
                "gold_evidence_ids": instance.gold_evidence_ids,
                "linked_article_ids": instance.linked_article_ids,
                "grounding_article_id": instance.grounding_article_id,
            }
            if instance.gold_decompositions is not None:
                record["gold_decompositions"] = instance.gold_decompositions
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def validate_evidence_ids(instances: Iterable[QaInstance], passage_ids: set[str]) -> None:
    """Check that every gold evidence id resolves in the loaded corpus."""
    for instance in instances:
        for reference in instance.gold_evidence_ids:
            for evidence_id in reference:
                if evidence_id not in passage_ids:
                    raise CorpusFormatError(
                        f"question {instance.question_id!r}: gold evidence id "
                        f"{evidence_id!r} not present in corpus"
                    )
