"""Pipeline wiring: config round trips, record serialization, per-source
retrieval, stage error tagging, and batch execution."""

import dataclasses
import json

import pytest

from mdqa.corpus import Passage, QaInstance
from mdqa.errors import (
    ConfigError,
    DuplicateIdError,
    RetrievalError,
    StageError,
    TransportError,
)
from mdqa.index import Bm25Params, build_index
from mdqa.pipeline import (
    AnswerRecord,
    PipelineServices,
    RunConfig,
    answer_question,
    build_manifest,
    config_from_dict,
    config_hash,
    config_to_dict,
    corpus_hash,
    interleave_ranked,
    load_config,
    load_records,
    passages_by_id,
    record_from_dict,
    record_to_dict,
    retrieve_contexts,
    run_batch,
    save_config,
    save_records,
    select_examples,
)
from mdqa.prompting import PromptExample, TokenBudget, knn_select
from mdqa.providers import (
    CompletionClient,
    MockCompletionClient,
    MockEmbeddingClient,
)
from mdqa.rerank import OverlapScorer, RelevanceScorer, ScoredPassage

SPLIT_MARKER = "Which river flows past the Quarry Garden and where does that river begin?"


def default_rule(prompt: str) -> str:
    """Identity decomposition, except one question that splits in two; CoT
    aggregation output otherwise."""
    if prompt.endswith("1:"):
        question = prompt.rstrip().splitlines()[-2][len("Question: ") :]
        if question == SPLIT_MARKER:
            return " Which river flows past the Quarry Garden?\n2: Where does that river begin?"
        return f" {question}"
    return " The documents support one reading.\nAnswer: forty-two"


def make_services(passages, **overrides) -> PipelineServices:
    by_id = passages_by_id(passages)
    defaults = dict(
        completion=MockCompletionClient(rule=default_rule),
        passages=by_id,
        example_pool=[],
        embedder=MockEmbeddingClient(dimension=8),
        scorer=OverlapScorer(),
        index=build_index(passages, Bm25Params()),
    )
    defaults.update(overrides)
    return PipelineServices(**defaults)


def make_pool(n: int) -> list[PromptExample]:
    return [
        PromptExample(
            contexts=[(f"Title {i}", f"Fact {i}.")],
            question=f"Pool question {i}?",
            evidence=f"Evidence {i}.",
            answer=f"answer {i}",
        )
        for i in range(n)
    ]


def instance_by_id(questions, question_id: str) -> QaInstance:
    return next(q for q in questions if q.question_id == question_id)


class TestRunConfig:
    def test_defaults(self):
        config = RunConfig()
        assert config.decomposition_enabled is True
        assert config.context_source == "full_retrieval"
        assert config.cot is True
        assert config.bm25_depth == 1000
        assert config.contexts_per_question == 5
        assert config.shots == 4
        assert config.prompt_mode == "dynamic"
        assert config.budget == TokenBudget()
        assert config.bm25 == Bm25Params()

    def test_frozen(self):
        with pytest.raises(dataclasses.FrozenInstanceError):
            RunConfig().shots = 1

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"context_source": "oracle"},
            {"prompt_mode": "fancy"},
            {"bm25_depth": 0},
            {"contexts_per_question": 0},
            {"shots": -1},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            RunConfig(**kwargs)


class TestConfigSerialization:
    def test_round_trip(self):
        config = RunConfig(
            shots=2,
            cot=False,
            prompt_mode="static",
            budget=TokenBudget(model_limit=2048, reserved_output=128),
            bm25=Bm25Params(k1=1.2, b=0.75),
        )
        assert config_from_dict(config_to_dict(config)) == config

    def test_partial_dict_uses_defaults(self):
        config = config_from_dict({"shots": 2})
        assert config.shots == 2
        assert config.context_source == "full_retrieval"
        assert config.budget == TokenBudget()

    def test_nested_partial(self):
        config = config_from_dict({"budget": {"model_limit": 2000}})
        assert config.budget.model_limit == 2000
        assert config.budget.reserved_output == 512

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys: depth"):
            config_from_dict({"depth": 5})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="temperature"):
            config_from_dict({"budget": {"temperature": 0.5}})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="invalid config value"):
            config_from_dict({"shots": "many"})

    def test_non_dict_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict([1, 2])

    def test_file_round_trip(self, tmp_path):
        config = RunConfig(shots=1, context_source="gold")
        path = tmp_path / "config.json"
        save_config(config, path)
        assert load_config(path) == config
        assert path.read_text().endswith("\n")

    def test_load_rejects_bad_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)

    def test_hash_tracks_content(self):
        assert config_hash(RunConfig()) == config_hash(RunConfig())
        assert config_hash(RunConfig()) != config_hash(RunConfig(shots=3))
        assert len(config_hash(RunConfig())) == 64


class TestAnswerRecordSerialization:
    def record(self) -> AnswerRecord:
        return AnswerRecord(
            question_id="q1",
            subquestions=["a?", "b?"],
            contexts_used=[("p#0", -0.5), ("p#1", -1.0)],
            evidence="Because.",
            answer="yes",
            prompt_hash="ab" * 32,
            timings={"decompose": 0.01},
        )

    def test_serialized_form_has_no_timings(self):
        data = record_to_dict(self.record())
        assert "timings" not in data
        assert data["contexts_used"] == [["p#0", -0.5], ["p#1", -1.0]]

    def test_round_trip_ignores_timings(self):
        record = self.record()
        restored = record_from_dict(record_to_dict(record))
        assert restored == record  # timings excluded from comparison
        assert restored.timings == {}

    def test_file_round_trip(self, tmp_path):
        records = [self.record(), self.record()]
        records[1].question_id = "q2"
        path = tmp_path / "records.jsonl"
        save_records(records, path)
        assert load_records(path) == records
        assert len(path.read_text().splitlines()) == 2

    def test_invalid_status_rejected(self):
        with pytest.raises(ValueError):
            AnswerRecord(
                question_id="q",
                subquestions=[],
                contexts_used=[],
                evidence="",
                answer="",
                prompt_hash="",
                status="pending",
            )


def sp(pid: str, relevance: float, rank: int) -> ScoredPassage:
    return ScoredPassage(
        passage=Passage(id=pid, article_id=pid.split("#")[0], title=pid, text="t",
                        window_index=0),
        relevance=relevance,
        rank=rank,
    )


class TestInterleaveRanked:
    def test_round_robin_with_dedup(self):
        first = [sp("a#0", -0.1, 1), sp("b#0", -0.2, 2)]
        second = [sp("c#0", -0.3, 1), sp("a#0", -0.4, 2), sp("d#0", -0.5, 3)]
        merged = interleave_ranked([first, second])
        assert [s.passage.id for s in merged] == ["a#0", "c#0", "b#0", "d#0"]
        assert [s.rank for s in merged] == [1, 2, 3, 4]
        # relevance comes from the list that contributed the passage
        assert merged[0].relevance == -0.1

    def test_uneven_lengths(self):
        merged = interleave_ranked([[sp("a#0", -1, 1)], [sp("b#0", -2, 1), sp("c#0", -3, 2)]])
        assert [s.passage.id for s in merged] == ["a#0", "b#0", "c#0"]

    def test_empty(self):
        assert interleave_ranked([]) == []
        assert interleave_ranked([[], []]) == []


class TestPassagesById:
    def test_maps_ids(self, fixture_passages):
        by_id = passages_by_id(fixture_passages)
        assert len(by_id) == len(fixture_passages)
        assert by_id["arden#0"].article_id == "arden"

    def test_duplicate_rejected(self):
        passage = Passage(id="x#0", article_id="x", title="", text="t", window_index=0)
        with pytest.raises(DuplicateIdError):
            passages_by_id([passage, passage])


class CountingScorer(RelevanceScorer):
    scorer_id = "counting"

    def __init__(self):
        self.calls = 0

    def score(self, question, passages):
        self.calls += 1
        return [-1.0] * len(passages)


class TestRetrieveContexts:
    def test_gold_uses_first_nonempty_reference(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages)
        instance = instance_by_id(fixture_questions, "q1")
        contexts = retrieve_contexts(instance, [instance.question], RunConfig(
            context_source="gold"), services)
        reference = next(ids for ids in instance.gold_evidence_ids if ids)
        assert [c.passage.id for c in contexts] == list(dict.fromkeys(reference))
        assert all(c.relevance == 0.0 for c in contexts)
        assert [c.rank for c in contexts] == list(range(1, len(contexts) + 1))

    def test_gold_never_touches_index_or_scorer(
        self, fixture_passages, fixture_questions, monkeypatch
    ):
        import mdqa.pipeline as pipeline_module

        def forbidden_search(*args, **kwargs):
            raise AssertionError("gold mode must not search the index")

        monkeypatch.setattr(pipeline_module, "search", forbidden_search)
        scorer = CountingScorer()
        services = make_services(
            fixture_passages, index=None, scorer=scorer
        )
        instance = instance_by_id(fixture_questions, "q1")
        contexts = retrieve_contexts(
            instance, [instance.question], RunConfig(context_source="gold"), services
        )
        assert contexts
        assert scorer.calls == 0

    def test_gold_missing_passage(self, fixture_passages):
        services = make_services(fixture_passages)
        instance = QaInstance(
            question_id="ghost",
            question="Where?",
            gold_answers=["x"],
            answer_type="span",
            gold_evidence_ids=[["missing#0"]],
        )
        with pytest.raises(RetrievalError, match="missing#0"):
            retrieve_contexts(instance, ["Where?"], RunConfig(context_source="gold"),
                              services)

    def test_gold_without_evidence(self, fixture_passages):
        services = make_services(fixture_passages)
        instance = QaInstance(
            question_id="bare", question="Where?", gold_answers=["x"],
            answer_type="span",
        )
        with pytest.raises(RetrievalError, match="no gold evidence"):
            retrieve_contexts(instance, ["Where?"], RunConfig(context_source="gold"),
                              services)

    def test_full_retrieval_respects_limits(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages)
        config = RunConfig(contexts_per_question=2)
        instance = instance_by_id(fixture_questions, "q1")
        subquestions = ["How tall is the lighthouse at Arden Point?",
                        "How tall is the clock tower in Veldt Square?"]
        contexts = retrieve_contexts(instance, subquestions, config, services)
        assert 1 <= len(contexts) <= config.contexts_per_question * len(subquestions)
        assert [c.rank for c in contexts] == list(range(1, len(contexts) + 1))
        ids = [c.passage.id for c in contexts]
        assert len(set(ids)) == len(ids)

    def test_full_retrieval_needs_scorer(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, scorer=None)
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(RetrievalError, match="scorer"):
            retrieve_contexts(instance, ["lighthouse"], RunConfig(), services)

    def test_full_retrieval_needs_index(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, index=None)
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(RetrievalError, match="index"):
            retrieve_contexts(instance, ["lighthouse"], RunConfig(), services)

    def test_no_subquestions(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages)
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(RetrievalError, match="no subquestions"):
            retrieve_contexts(instance, [], RunConfig(), services)

    def test_no_candidates_names_source_and_subquestion(
        self, fixture_passages, fixture_questions
    ):
        services = make_services(fixture_passages)
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(RetrievalError, match=r"full_retrieval.*zzzqqq"):
            retrieve_contexts(instance, ["zzzqqq"], RunConfig(), services)

    def test_linked_intersection_filters_articles(
        self, fixture_passages, fixture_questions
    ):
        services = make_services(fixture_passages)
        instance = instance_by_id(fixture_questions, "q1")
        config = RunConfig(context_source="linked_intersection",
                           contexts_per_question=10)
        contexts = retrieve_contexts(
            instance, [instance.question], config, services
        )
        linked = set(instance.linked_article_ids)
        assert contexts
        assert all(c.passage.article_id in linked for c in contexts)

    def test_rerank_only_uses_grounding_article(
        self, fixture_passages, fixture_questions
    ):
        services = make_services(fixture_passages, index=None)
        instance = instance_by_id(fixture_questions, "q4")
        config = RunConfig(context_source="rerank_only", contexts_per_question=10)
        contexts = retrieve_contexts(instance, [instance.question], config, services)
        grounding = instance.grounding_article_id
        assert contexts
        assert all(c.passage.article_id == grounding for c in contexts)

    def test_rerank_only_requires_grounding_id(self, fixture_passages):
        services = make_services(fixture_passages)
        instance = QaInstance(
            question_id="bare", question="What?", gold_answers=["x"],
            answer_type="span",
        )
        config = RunConfig(context_source="rerank_only")
        with pytest.raises(RetrievalError, match="grounding"):
            retrieve_contexts(instance, ["What?"], config, services)


class TestSelectExamples:
    def test_zero_shots(self, fixture_passages):
        services = make_services(fixture_passages, example_pool=make_pool(3))
        assert select_examples("q?", RunConfig(shots=0), services) == []

    def test_empty_pool(self, fixture_passages):
        services = make_services(fixture_passages)
        assert select_examples("q?", RunConfig(shots=4), services) == []

    def test_static_takes_pool_head(self, fixture_passages):
        pool = make_pool(5)
        services = make_services(fixture_passages, example_pool=pool)
        config = RunConfig(prompt_mode="static", shots=2)
        assert select_examples("q?", config, services) == pool[:2]

    def test_dynamic_requires_embedder(self, fixture_passages):
        services = make_services(
            fixture_passages, example_pool=make_pool(3), embedder=None
        )
        with pytest.raises(ConfigError, match="embedding"):
            select_examples("q?", RunConfig(shots=2), services)

    def test_dynamic_matches_knn_select(self, fixture_passages):
        pool = make_pool(6)
        services = make_services(fixture_passages, example_pool=pool)
        chosen = select_examples("Pool question 4?", RunConfig(shots=3), services)
        expected = knn_select("Pool question 4?", pool, 3, MockEmbeddingClient(dimension=8))
        assert [e.question for e in chosen] == [e.question for e in expected]
        assert chosen[-1].question == "Pool question 4?"


class FailingClient(CompletionClient):
    provider_id = "failing"

    def _generate(self, request):
        raise TransportError("wire down")


class TestAnswerQuestion:
    def test_ok_record(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, example_pool=make_pool(4))
        instance = instance_by_id(fixture_questions, "q3")
        assert instance.question == SPLIT_MARKER
        record = answer_question(instance, RunConfig(shots=2), services)
        assert record.status == "ok"
        assert record.error == ""
        assert record.question_id == "q3"
        assert record.subquestions == [
            "Which river flows past the Quarry Garden?",
            "Where does that river begin?",
        ]
        assert record.answer == "forty-two"
        assert record.evidence == "The documents support one reading."
        assert len(record.prompt_hash) == 64
        assert record.contexts_used
        assert all(isinstance(pid, str) and isinstance(score, float)
                   for pid, score in record.contexts_used)
        assert set(record.timings) == {"decompose", "retrieve", "prompt", "generate"}

    def test_prompt_hash_stable(self, fixture_passages, fixture_questions):
        instance = instance_by_id(fixture_questions, "q1")
        hashes = set()
        for _ in range(2):
            services = make_services(fixture_passages, example_pool=make_pool(4))
            record = answer_question(instance, RunConfig(shots=2), services)
            hashes.add(record.prompt_hash)
        assert len(hashes) == 1

    def test_parse_failure_marks_record(self, fixture_passages, fixture_questions):
        def rule(prompt: str) -> str:
            if prompt.endswith("1:"):
                return f" {prompt.rstrip().splitlines()[-2][len('Question: '):]}"
            return " rambling with no marker"

        services = make_services(
            fixture_passages, completion=MockCompletionClient(rule=rule)
        )
        instance = instance_by_id(fixture_questions, "q1")
        record = answer_question(instance, RunConfig(shots=0), services)
        assert record.status == "parse_failed"
        assert record.evidence == ""
        assert record.answer == ""
        assert "Answer" in record.error

    def test_decompose_stage_error(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, completion=FailingClient())
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(StageError, match=r"\[decompose\]") as excinfo:
            answer_question(instance, RunConfig(), services)
        assert excinfo.value.stage == "decompose"

    def test_retrieve_stage_error(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, scorer=None)
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(StageError, match=r"\[retrieve\]"):
            answer_question(instance, RunConfig(), services)

    def test_prompt_stage_error(self, fixture_passages, fixture_questions):
        services = make_services(
            fixture_passages, example_pool=make_pool(2), embedder=None
        )
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(StageError, match=r"\[prompt\]"):
            answer_question(instance, RunConfig(shots=2), services)

    def test_generate_stage_error_from_keyerror(
        self, fixture_passages, fixture_questions
    ):
        def rule(prompt: str) -> str:
            if prompt.endswith("1:"):
                return f" {prompt.rstrip().splitlines()[-2][len('Question: '):]}"
            raise KeyError("no canned aggregation")

        services = make_services(
            fixture_passages, completion=MockCompletionClient(rule=rule)
        )
        instance = instance_by_id(fixture_questions, "q1")
        with pytest.raises(StageError, match=r"\[generate\]"):
            answer_question(instance, RunConfig(shots=0), services)


class TestCorpusHash:
    def test_order_invariant(self, fixture_passages):
        forward = corpus_hash(fixture_passages)
        assert corpus_hash(list(reversed(fixture_passages))) == forward

    def test_sensitive_to_text(self, fixture_passages):
        altered = list(fixture_passages)
        first = altered[0]
        altered[0] = Passage(
            id=first.id, article_id=first.article_id, title=first.title,
            text=first.text + " More.", window_index=first.window_index,
        )
        assert corpus_hash(altered) != corpus_hash(fixture_passages)


class TestRunBatch:
    def test_order_preserved_across_workers(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, example_pool=make_pool(4))
        result = run_batch(fixture_questions, RunConfig(shots=2), services, workers=4)
        assert [r.question_id for r in result.records] == [
            q.question_id for q in fixture_questions
        ]

    def test_failures_become_records(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, index=None, scorer=None)
        broken = QaInstance(
            question_id="broken", question="Where?", gold_answers=["x"],
            answer_type="span", gold_evidence_ids=[["missing#0"]],
        )
        instances = [fixture_questions[0], broken]
        result = run_batch(
            instances, RunConfig(context_source="gold", shots=0), services
        )
        statuses = {r.question_id: r.status for r in result.records}
        assert statuses["broken"] == "failed"
        assert statuses[fixture_questions[0].question_id] == "ok"
        failed = result.records[1]
        assert "missing#0" in failed.error
        assert result.manifest["status_counts"] == {"failed": 1, "ok": 1}

    def test_workers_validated(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages)
        with pytest.raises(ConfigError):
            run_batch(fixture_questions, RunConfig(), services, workers=0)

    def test_manifest_contents(self, fixture_passages, fixture_questions):
        services = make_services(fixture_passages, example_pool=make_pool(3))
        config = RunConfig(shots=2)
        result = run_batch(fixture_questions[:4], config, services)
        manifest = result.manifest
        assert manifest["config"] == config_to_dict(config)
        assert manifest["config_hash"] == config_hash(config)
        assert manifest["corpus_hash"] == corpus_hash(fixture_passages)
        assert manifest["corpus_size"] == len(fixture_passages)
        assert manifest["example_pool_size"] == 3
        assert manifest["providers"] == {
            "completion": "mock-completion",
            "embedding": "mock-embedding",
            "scorer": "overlap-fallback",
        }
        assert manifest["instances"] == 4
        assert sum(manifest["status_counts"].values()) == 4
        assert "timing" not in json.dumps(manifest)

    def test_records_byte_identical_across_worker_counts(
        self, tmp_path, fixture_passages, fixture_questions
    ):
        outputs = []
        for workers in (1, 3):
            services = make_services(fixture_passages, example_pool=make_pool(4))
            result = run_batch(
                fixture_questions, RunConfig(shots=2), services, workers=workers
            )
            path = tmp_path / f"records-{workers}.jsonl"
            save_records(result.records, path)
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1]
