import math

import numpy as np
import pytest

from core.embedding_client import Verdict
from core.errors import (
    BackendError,
    MalformedKind,
    MalformedToolCall,
    PreconditionError,
    ScreeningFailed,
)
from core.guidelines import Disease, Finding
from core.llm_client import Completion, Conversation, FinishReason, LLMBackend, SamplingParams
from core.pipeline import PatientRecord
from core.screening import (
    ScreeningAgent,
    ScreeningStop,
    build_screening_prompt,
    naive_negation,
    parse_tool_call,
    run_screening,
)
from core.tracing import TraceWriter

CARDIOMEGALY = Disease("Cardiomegaly", (Finding("Enlarged cardiac silhouette"), Finding("Widened heart shadow")))
PNEUMOTHORAX = Disease("Pneumothorax", (Finding("Visible pleural line"), Finding("Absent lung markings")))

FIRST_CALL = ("CLIP: There is an enlarged cardiac silhouette indicating Cardiomegaly. / "
              "There is a normal cardiac silhouette indicating no Cardiomegaly. ->")
SECOND_CALL = ("CLIP: There is a widened heart shadow indicating Cardiomegaly. / "
               "There is a narrow heart shadow indicating no Cardiomegaly. ->")


class TestPrompt:
    def test_substitution(self):
        prompt = build_screening_prompt(CARDIOMEGALY).turns[0].content
        assert "indicative of the presence or absence of Cardiomegaly" in prompt
        assert "Enlarged cardiac silhouette\nWidened heart shadow" in prompt
        assert "<condition>" not in prompt
        assert "<xplainer_findings>" not in prompt

    def test_prompts_differ_only_at_substitution_sites(self):
        one = build_screening_prompt(CARDIOMEGALY).turns[0].content
        other = build_screening_prompt(PNEUMOTHORAX).turns[0].content
        normalized = other.replace("Visible pleural line\nAbsent lung markings",
                                   "Enlarged cardiac silhouette\nWidened heart shadow")
        assert normalized.replace("Pneumothorax", "Cardiomegaly") == one


class TestParseToolCall:
    def test_example_call(self):
        segment = ("CLIP: There is an increased width of the heart shadow indicating an enlarged "
                   "cardiomediastinum. / There is a normal heart shadow indicating no enlarged "
                   "cardiomediastinum. ")
        call = parse_tool_call(segment)
        assert call.positive == ("There is an increased width of the heart shadow indicating an "
                                 "enlarged cardiomediastinum.")
        assert call.negative == "There is a normal heart shadow indicating no enlarged cardiomediastinum."

    def test_uses_last_clip_line(self):
        segment = "CLIP: old / call -> Positive\nSome thought.\nCLIP: new one / new negation "
        call = parse_tool_call(segment, offset=10)
        assert (call.positive, call.negative) == ("new one", "new negation")
        assert call.source_span[0] == 10 + segment.rfind("CLIP:")

    @pytest.mark.parametrize("segment, kind", [
        ("There is something / else ", MalformedKind.NO_CLIP_KEYWORD),
        ("CLIP: There is something without a separator ", MalformedKind.NO_SLASH_SEPARATOR),
        ("CLIP:  / something", MalformedKind.EMPTY_DESCRIPTION),
        ("CLIP: something /   ", MalformedKind.EMPTY_DESCRIPTION),
        ("CLIP: same / same ", MalformedKind.IDENTICAL_DESCRIPTIONS),
    ])
    def test_malformed(self, segment, kind):
        with pytest.raises(MalformedToolCall) as info:
            parse_tool_call(segment)
        assert info.value.kind == kind
        assert info.value.segment == segment

    def test_fuzzed_round_trip(self):
        rng = np.random.default_rng(7)
        alphabet = list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,;:'()-éüß")
        for _ in range(1000):
            def phrase() -> str:
                while True:
                    length = int(rng.integers(1, 60))
                    text = "".join(rng.choice(alphabet, size=length)).strip()
                    if text and "->" not in text and "CLIP:" not in text:
                        return text

            positive, negative = phrase(), phrase()
            if positive == negative:
                continue
            lead = "Next finding.\n" if rng.random() < 0.5 else ""
            call = parse_tool_call(f"{lead}CLIP: {positive} / {negative} ")
            assert (call.positive, call.negative) == (positive, negative)


class TestNaiveNegation:
    def test_examples(self):
        assert naive_negation("Abnormal contour of the heart border") == "No abnormal contour of the heart border"
        assert naive_negation("edema present") == "No edema present"

    def test_not_idempotent(self):
        assert naive_negation(naive_negation("Edema present")) == "No no edema present"

    def test_rejects_empty(self):
        with pytest.raises(PreconditionError):
            naive_negation("")


class TestScreeningAgent:
    def test_two_probes_follow_oracle_truth(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm([FIRST_CALL, SECOND_CALL, "Both findings have been evaluated."])
        transcript = run_screening(PatientRecord("p02", "img02"), CARDIOMEGALY, agent_config(), llm, scorer)

        assert [o.verdict for o in transcript.observations] == [Verdict.NEGATIVE, Verdict.POSITIVE]
        assert transcript.stop_reason == ScreeningStop.END_OF_MESSAGE
        assert transcript.parse_failures == []
        assert transcript.text == (FIRST_CALL + " Negative\n" + SECOND_CALL + " Positive\n"
                                   "Both findings have been evaluated.")

    def test_injected_result_prefix(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm(["CLIP: There is a visible pleural line / There is no pleural line->", "done"])
        transcript = run_screening(PatientRecord("p05", "img05"), PNEUMOTHORAX, agent_config(), llm, scorer)
        assert transcript.turns[1].text == " -> Positive\n"

    def test_no_tool_calls(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm(["I will not call any tool."])
        transcript = run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY, agent_config(), llm, scorer)
        assert transcript.observations == []
        assert transcript.stop_reason == ScreeningStop.END_OF_MESSAGE

    def test_malformed_call_then_recovery(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm([
            "CLIP: There is an enlarged cardiac silhouette without a separator ->",
            FIRST_CALL,
            SECOND_CALL,
            "Done.",
        ])
        transcript = run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY, agent_config(), llm, scorer)
        assert len(transcript.observations) == 2
        assert transcript.parse_failures == [{
            "kind": "NoSlashSeparator",
            "segment": "CLIP: There is an enlarged cardiac silhouette without a separator ",
        }]
        assert "-> Error: malformed call, continue.\n" in transcript.text

    def test_consecutive_malformed_calls_fail(self, sequential_llm, scorer, agent_config):
        bad = "CLIP: no separator here ->"
        llm = sequential_llm([bad, bad, bad, bad])
        with pytest.raises(ScreeningFailed) as info:
            run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY,
                          agent_config(**{"screening.max_tool_calls": 10}), llm, scorer)
        assert info.value.transcript.failed
        assert len(info.value.transcript.parse_failures) == 3

    def test_tool_call_cap(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm([FIRST_CALL] * 10)
        transcript = run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY, agent_config(), llm, scorer)
        assert len(transcript.observations) == 4
        assert transcript.stop_reason == ScreeningStop.MAX_TOOL_CALLS

    def test_token_budget(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm([FIRST_CALL] * 10)
        transcript = run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY,
                                   agent_config(**{"screening.token_budget": 5}), llm, scorer)
        assert len(transcript.observations) == 1
        assert transcript.stop_reason == ScreeningStop.TOKEN_BUDGET

    def test_unanswered_trailing_call_counts_as_tool_call(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm([
            "CLIP: There is an enlarged cardiac silhouette / There is a normal heart",
            "Done.",
        ])
        transcript = run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY, agent_config(), llm, scorer)
        assert len(transcript.observations) == 1

    def test_naive_negation_replaces_agent_negation(self, sequential_llm, scorer, agent_config):
        llm = sequential_llm([FIRST_CALL, "Done."])
        cfg = agent_config(**{"screening.negation_mode": "naive"})
        transcript = run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY, cfg, llm, scorer)
        observation = transcript.observations[0]
        assert observation.probe.negative == naive_negation(observation.probe.positive)
        assert observation.p_positive == pytest.approx(0.5)

    def test_trace_records(self, sequential_llm, scorer, agent_config):
        writer = TraceWriter()
        llm = sequential_llm([FIRST_CALL, "Done."])
        run_screening(PatientRecord("p01", "img01"), CARDIOMEGALY, agent_config(), llm, scorer,
                      writer.bind("p01").for_disease("Cardiomegaly"))
        kinds = [r["kind"] for r in writer.records]
        assert kinds == ["prompt", "completion", "tool_call", "tool_result", "completion", "stage_result"]
        assert all(r["disease"] == "Cardiomegaly" and r["patient_id"] == "p01" for r in writer.records)
        assert [r["seq"] for r in writer.records] == list(range(6))

    def test_backend_error_carries_partial_transcript(self, scorer, agent_config):
        class Flaky(LLMBackend):
            name = "flaky"

            def generate(self, conv: Conversation, params: SamplingParams) -> Completion:
                return Completion(FIRST_CALL[:-2], FinishReason.STOP_SEQUENCE, 0)

            def continue_generation(self, conv, partial, params):
                raise BackendError("connection reset")

        agent = ScreeningAgent(Flaky(), scorer, agent_config())
        with pytest.raises(BackendError) as info:
            agent.run(PatientRecord("p01", "img01"), CARDIOMEGALY)
        assert len(info.value.transcript.observations) == 1

    def test_bundled_agents_screen_every_finding(self, world_agents, scorer, agent_config):
        transcript = run_screening(PatientRecord("p06", "img06"), PNEUMOTHORAX, agent_config(),
                                   world_agents, scorer)
        assert [o.verdict for o in transcript.observations] == [Verdict.POSITIVE, Verdict.POSITIVE]
        assert transcript.mean_p_positive == pytest.approx(1.0 / (1.0 + math.exp(-1.0 / math.sqrt(2))), abs=1e-12)
