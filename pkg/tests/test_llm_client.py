import pytest
import requests

from conftest import FakeResponse, chat_payload
from core.config import RunConfig
from core.errors import (
    BackendError,
    BackendTimeout,
    ConfigError,
    PreconditionError,
    ProtocolError,
    UnsupportedByBackend,
)
from core.llm_client import (
    ChatCompletionsClient,
    Conversation,
    FinishReason,
    SamplingParams,
    ScriptedMockBackend,
    apply_stop_sequences,
    build_llm_backend,
    resume,
)

ARROW = SamplingParams(temperature=0.0, max_tokens=64, stop_sequences=("->",))
PLAIN = SamplingParams(temperature=0.0, max_tokens=64)


def client(session, sleep=lambda _: None, **kwargs):
    return ChatCompletionsClient("http://llm.local/", "test-model", session=session, sleep=sleep,
                                 max_attempts=3, **kwargs)


class TestConversation:
    def test_roles_must_alternate(self):
        conv = Conversation.from_user("hi").with_assistant("hello").with_user("again")
        assert [m["role"] for m in conv.to_messages()] == ["user", "assistant", "user"]
        with pytest.raises(PreconditionError):
            Conversation.from_user("hi").with_user("twice")

    def test_system_entry_comes_first(self):
        conv = Conversation.from_user("question", system="be brief")
        assert conv.to_messages()[0] == {"role": "system", "content": "be brief"}

    def test_render_with_partial(self):
        conv = Conversation.from_user("prompt")
        assert conv.render() == "user: prompt"
        assert conv.render("CLIP: A / B ") == "user: prompt\n\nassistant: CLIP: A / B "


class TestSamplingParams:
    @pytest.mark.parametrize("temperature", [-0.1, 2.5])
    def test_temperature_range(self, temperature):
        with pytest.raises(PreconditionError):
            SamplingParams(temperature=temperature, max_tokens=10)

    def test_stop_sequences_limits(self):
        with pytest.raises(PreconditionError):
            SamplingParams(0.0, 10, stop_sequences=("",))
        with pytest.raises(PreconditionError):
            SamplingParams(0.0, 10, stop_sequences=tuple(str(i) for i in range(17)))


def test_apply_stop_sequences_earliest_wins():
    assert apply_stop_sequences("abc -> def", ["->"]) == ("abc ", 0)
    assert apply_stop_sequences("x END y ->", ["->", "END"]) == ("x ", 1)
    assert apply_stop_sequences("nothing", ["->"]) == ("nothing", None)


class TestScriptedMock:
    def test_ok_reply(self, mock_llm):
        llm = mock_llm([("reply with", "OK.")])
        completion = llm.generate(Conversation.from_user("Please reply with “OK.” only."), ARROW)
        assert completion.text == "OK."
        assert completion.finish_reason == FinishReason.END_OF_MESSAGE

    def test_stop_truncation(self, mock_llm):
        llm = mock_llm(default="CLIP: A / B -> rest")
        completion = llm.generate(Conversation.from_user("go"), ARROW)
        assert completion.text == "CLIP: A / B "
        assert completion.finish_reason == FinishReason.STOP_SEQUENCE
        assert completion.stop_index == 0

    def test_no_stop_sequences(self, mock_llm):
        completion = mock_llm(default="hello").generate(Conversation.from_user("go"), PLAIN)
        assert (completion.text, completion.finish_reason) == ("hello", FinishReason.END_OF_MESSAGE)

    def test_continuation_sees_partial(self, mock_llm):
        llm = mock_llm([(r"-> Positive\n\Z", "CLIP: C / D ->")], regex=True)
        completion = llm.continue_generation(Conversation.from_user("go"), "CLIP: A / B -> Positive\n", ARROW)
        assert completion.text == "CLIP: C / D "
        assert completion.finish_reason == FinishReason.STOP_SEQUENCE

    def test_continuation_needs_partial(self, mock_llm):
        with pytest.raises(PreconditionError):
            mock_llm().continue_generation(Conversation.from_user("go"), "", ARROW)

    def test_immediate_stop_after_resume(self, mock_llm):
        completion = mock_llm(default="-> more").continue_generation(
            Conversation.from_user("go"), "partial", ARROW)
        assert completion.text == ""
        assert completion.finish_reason == FinishReason.STOP_SEQUENCE

    def test_regex_reply_expands_groups(self, mock_llm):
        llm = mock_llm([(r"have (?P<c>\w+)\?", r"About \g<c>.")], regex=True)
        assert llm.generate(Conversation.from_user("Does he have Edema?"), PLAIN).text == "About Edema."

    def test_first_matching_rule_wins_and_history_is_kept(self, mock_llm):
        llm = mock_llm([("alpha", "first"), ("alpha beta", "second")], default="fallback")
        assert llm.generate(Conversation.from_user("alpha beta"), PLAIN).text == "first"
        assert llm.generate(Conversation.from_user("gamma"), PLAIN).text == "fallback"
        assert llm.call_count == 2
        assert llm.call_history[1] == {"prompt": "user: gamma", "reply": "fallback"}

    def test_requires_a_pending_user_turn(self, mock_llm):
        with pytest.raises(PreconditionError):
            mock_llm().generate(Conversation.from_user("a").with_assistant("b"), PLAIN)

    def test_from_file_accepts_both_layouts(self, tmp_path):
        listed = tmp_path / "list.json"
        listed.write_text('[{"match": "x", "reply": "y"}]', encoding="utf-8")
        assert ScriptedMockBackend.from_file(listed).generate(Conversation.from_user("x"), PLAIN).text == "y"
        wrapped = tmp_path / "wrapped.json"
        wrapped.write_text('{"default": "d", "rules": []}', encoding="utf-8")
        assert ScriptedMockBackend.from_file(wrapped).generate(Conversation.from_user("x"), PLAIN).text == "d"
        bad = tmp_path / "bad.json"
        bad.write_text('{"nope": 1}', encoding="utf-8")
        with pytest.raises(ConfigError):
            ScriptedMockBackend.from_file(bad)

    @pytest.mark.parametrize("content", [b"{not json", b"\xff\xfe[]"])
    def test_from_file_rejects_undecodable_scripts(self, tmp_path, content):
        path = tmp_path / "agents.json"
        path.write_bytes(content)
        with pytest.raises(ConfigError) as info:
            ScriptedMockBackend.from_file(path)
        assert info.value.key == "llm.script"

    def test_call_history_is_bounded(self):
        llm = ScriptedMockBackend([], default_reply="x", history_limit=2)
        for prompt in ("a", "b", "c"):
            llm.generate(Conversation.from_user(prompt), PLAIN)
        assert llm.call_count == 3
        assert [call["prompt"] for call in llm.call_history] == ["user: b", "user: c"]


def test_resume_falls_back_to_continue_prompt(sequential_llm):
    llm = sequential_llm(["more text"], resumable=False)
    completion = resume(llm, Conversation.from_user("prompt"), "partial", PLAIN)
    assert completion.text == "more text"
    assert llm.prompts == ["user: prompt\n\nassistant: partial\n\nuser: Continue."]


class TestChatCompletionsClient:
    def test_request_body_and_stop_mapping(self, fake_session, monkeypatch):
        monkeypatch.setenv("DXAGENTS_LLM_TOKEN", "secret")
        session = fake_session(FakeResponse(200, chat_payload("CLIP: A / B ", "stop", stop_reason="->")))
        completion = client(session).generate(Conversation.from_user("hi"), ARROW)

        assert completion.text == "CLIP: A / B "
        assert completion.finish_reason == FinishReason.STOP_SEQUENCE
        assert completion.stop_index == 0
        post = session.posts[0]
        assert post["url"] == "http://llm.local/v1/chat/completions"
        assert post["json"]["stop"] == ["->"]
        assert post["json"]["messages"] == [{"role": "user", "content": "hi"}]
        assert post["headers"]["Authorization"] == "Bearer secret"

    def test_no_token_no_header(self, fake_session, monkeypatch):
        monkeypatch.delenv("DXAGENTS_LLM_TOKEN", raising=False)
        session = fake_session(FakeResponse(200, chat_payload("hello")))
        client(session).generate(Conversation.from_user("hi"), PLAIN)
        assert "Authorization" not in session.posts[0]["headers"]

    def test_client_side_truncation_when_service_ignores_stop(self, fake_session):
        session = fake_session(FakeResponse(200, chat_payload("CLIP: A / B -> Positive and more")))
        completion = client(session).generate(Conversation.from_user("hi"), ARROW)
        assert completion.text == "CLIP: A / B "
        assert completion.finish_reason == FinishReason.STOP_SEQUENCE

    def test_length_maps_to_max_tokens(self, fake_session):
        session = fake_session(FakeResponse(200, chat_payload("cut", "length")))
        assert client(session).generate(Conversation.from_user("hi"), PLAIN).finish_reason == FinishReason.MAX_TOKENS

    def test_plain_stop_is_end_of_message(self, fake_session):
        session = fake_session(FakeResponse(200, chat_payload("done", "stop")))
        assert client(session).generate(Conversation.from_user("hi"), ARROW).finish_reason == \
            FinishReason.END_OF_MESSAGE

    def test_retries_transient_failures(self, fake_session, no_sleep):
        sleep, delays = no_sleep
        session = fake_session(
            FakeResponse(503),
            requests.ConnectionError("reset"),
            FakeResponse(200, chat_payload("fine")),
        )
        completion = client(session, sleep=sleep).generate(Conversation.from_user("hi"), PLAIN)
        assert completion.text == "fine"
        assert len(session.posts) == 3
        assert delays == [0.5, 1.0]

    def test_gives_up_after_max_attempts(self, fake_session):
        session = fake_session(FakeResponse(429), FakeResponse(500), FakeResponse(502))
        with pytest.raises(BackendError) as info:
            client(session).generate(Conversation.from_user("hi"), PLAIN)
        assert info.value.attempts == 3

    def test_timeouts_surface_as_backend_timeout(self, fake_session):
        session = fake_session(*(requests.Timeout("slow") for _ in range(3)))
        with pytest.raises(BackendTimeout):
            client(session).generate(Conversation.from_user("hi"), PLAIN)

    @pytest.mark.parametrize("response", [
        FakeResponse(400, text="bad request"),
        FakeResponse(200, ValueError("not json")),
        FakeResponse(200, {"choices": []}),
        FakeResponse(200, {"choices": [{"message": {"content": 42}}]}),
    ])
    def test_protocol_errors_are_not_retried(self, fake_session, response):
        session = fake_session(response)
        with pytest.raises(ProtocolError):
            client(session).generate(Conversation.from_user("hi"), PLAIN)
        assert len(session.posts) == 1

    def test_prefill_disabled_raises_unsupported(self, fake_session):
        with pytest.raises(UnsupportedByBackend):
            client(fake_session()).continue_generation(Conversation.from_user("hi"), "part", ARROW)

    def test_prefill_sends_trailing_assistant_message(self, fake_session):
        session = fake_session(FakeResponse(200, chat_payload(" rest")))
        completion = client(session, assistant_prefill=True).continue_generation(
            Conversation.from_user("hi"), "part", PLAIN)
        assert completion.text == " rest"
        body = session.posts[0]["json"]
        assert body["messages"][-1] == {"role": "assistant", "content": "part"}
        assert body["continue_final_message"] is True

    def test_ping_failure(self, fake_session):
        session = fake_session()
        session.get_error = requests.ConnectionError("refused")
        with pytest.raises(BackendError):
            client(session).ping()

    def test_ping_server_error(self, fake_session):
        session = fake_session()
        session.get_status = 503
        with pytest.raises(BackendError):
            client(session).ping()
        session.get_status = 404
        client(session).ping()


def test_build_llm_backend_requirements(tmp_path):
    with pytest.raises(ConfigError) as info:
        build_llm_backend(RunConfig(llm_backend="mock"))
    assert info.value.key == "llm.script"
    with pytest.raises(ConfigError) as info:
        build_llm_backend(RunConfig(llm_backend="remote"))
    assert info.value.key == "llm.base_url"
    remote = build_llm_backend(RunConfig(llm_backend="remote", llm_base_url="http://x", llm_model="m"))
    assert isinstance(remote, ChatCompletionsClient)
