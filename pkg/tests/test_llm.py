import json
import random
import threading

import httpx
import pytest

from bioqa import prompts
from bioqa.core import GenerationProfile
from bioqa.errors import AuthError, ScriptMiss, TransportExhausted
from bioqa.llm import (
    ChatExchange,
    ChatMessage,
    Gateway,
    HttpBackend,
    RecorderBackend,
    Rule,
    ScriptedBackend,
    complete,
    fingerprint,
    profile_for,
    strip_completion,
    system_prompt,
    user_exchange,
)
from bioqa.retry import Backoff, call_with_retry

from conftest import gateway_for


def ex(content="hello?", model="gpt-4", step="answering"):
    return user_exchange(model, content, step)


def test_system_prompts_exact():
    assert system_prompt("bioasq").content == (
        "You are BioASQ-GPT, an AI expert in question answering, research, and information "
        "retrieval in the biomedical domain."
    )
    assert system_prompt("medprocner").content.startswith(
        "Eres un asistente útil que extrae procedimientos médicos"
    )
    assert system_prompt("bioasq").content.encode() == system_prompt("bioasq").content.encode()
    assert system_prompt("bioasq").role == "system"


@pytest.mark.parametrize(
    "step,fp,pp",
    [("expansion", 0.5, 0.1), ("reformulation", 0.6, 0.2), ("reranking", 0.3, 0.1), ("answering", 0.0, 0.0)],
)
def test_profiles(step, fp, pp):
    assert profile_for(step) == GenerationProfile(0.0, fp, pp)


def test_exchange_requires_system_first():
    with pytest.raises(ValueError):
        ChatExchange("m", (ChatMessage("user", "x"),), GenerationProfile())
    with pytest.raises(ValueError):
        ChatMessage("user", "")


def test_fingerprint_stability():
    a = ex("same")
    b = ex("same")
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != ex("same", model="gpt-3.5-turbo").fingerprint()
    assert a.fingerprint() != ex("same", step="expansion").fingerprint()
    assert len(a.fingerprint()) == 64
    assert fingerprint(a.model_id, a.messages, a.profile) == a.fingerprint()


def test_scripted_echo():
    e = ex()
    backend = ScriptedBackend({e.fingerprint(): "hello"})
    assert complete(backend, e) == "hello"


def test_scripted_rules_and_miss():
    backend = ScriptedBackend(rules=[Rule("Herceptin", "HER2")])
    gw = gateway_for(backend)
    assert gw.complete(ex("Which protein is targeted by Herceptin?")) == "HER2"
    with pytest.raises(ScriptMiss):
        gw.complete(ex("something else"))


def _mock_http(statuses, body="ok", seen=None):
    it = iter(statuses)

    def handler(request: httpx.Request) -> httpx.Response:
        if seen is not None:
            seen.append(request)
        status = next(it)
        if status == 200:
            return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": body}}]})
        return httpx.Response(status, text="error")

    return httpx.MockTransport(handler)


def test_http_retry_then_success():
    seen = []
    backend = HttpBackend("https://api.example/v1", "sk-x", transport=_mock_http([500, 500, 200], seen=seen))
    sleeps = []
    gw = Gateway(backend, retry_max=3, sleep=sleeps.append, backoff=Backoff(0.5, rng=random.Random(1)))
    done = gw.send(ex())
    assert done.response == "ok"
    assert done.attempt_count == 3
    assert len(sleeps) == 2
    body = json.loads(seen[0].content)
    assert body["temperature"] == 0.0
    assert set(body) == {"model", "messages", "temperature", "frequency_penalty", "presence_penalty"}
    assert seen[0].url.path == "/v1/chat/completions"
    assert seen[0].headers["authorization"] == "Bearer sk-x"


def test_http_auth_error_not_retried():
    seen = []
    backend = HttpBackend("https://api.example/v1", "bad", transport=_mock_http([401, 200], seen=seen))
    with pytest.raises(AuthError):
        gateway_for(backend, retry_max=3).complete(ex())
    assert len(seen) == 1


def test_http_exhausted():
    backend = HttpBackend("https://api.example/v1", None, transport=_mock_http([503] * 4))
    with pytest.raises(TransportExhausted) as info:
        gateway_for(backend, retry_max=3).complete(ex())
    assert info.value.attempts == 4


def test_http_timeout_is_transient():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "late"}}]})

    backend = HttpBackend("https://api.example/v1", None, transport=httpx.MockTransport(handler))
    assert gateway_for(backend, retry_max=1).complete(ex()) == "late"


def test_backoff_monotone():
    for seed in range(50):
        b = Backoff(base=0.25, max_delay=8.0, rng=random.Random(seed))
        delays = b.schedule(11)
        assert all(d2 >= d1 for d1, d2 in zip(delays, delays[1:]))
        assert all(0 < d <= 8.0 for d in delays)


def test_retry_sleeps_never_shrink():
    from bioqa.errors import TransientError

    def fn():
        raise TransientError("x")

    for seed in range(20):
        sleeps = []
        with pytest.raises(TransportExhausted):
            call_with_retry(fn, 10, Backoff(1.0, max_delay=4.0, rng=random.Random(seed)), sleep=sleeps.append)
        assert len(sleeps) == 10
        assert sleeps == sorted(sleeps)


def test_retry_max_zero_means_single_attempt():
    from bioqa.errors import TransientError

    calls = []

    def fn():
        calls.append(1)
        raise TransientError("x")

    with pytest.raises(TransportExhausted):
        call_with_retry(fn, 0, Backoff(0), sleep=lambda s: None)
    assert len(calls) == 1


def test_temperature_zero_enforced():
    bad = ChatExchange("m", (system_prompt("bioasq"), ChatMessage("user", "x")), GenerationProfile(0.7))
    with pytest.raises(ValueError):
        gateway_for(ScriptedBackend(rules=[Rule("x", "y")])).complete(bad)


def test_cache_one_network_call_per_fingerprint(tmp_path):
    backend = ScriptedBackend(rules=[Rule("q", "answer")])
    e = ex("q")
    gw = gateway_for(backend, cache_dir=tmp_path)
    assert gw.complete(e) == "answer"
    # a fresh gateway over the same directory must not hit the backend again
    gw2 = gateway_for(backend, cache_dir=tmp_path)
    assert gw2.send(e).attempt_count == 0
    assert gw2.complete(e) == "answer"
    assert len(backend.calls) == 1
    assert list(tmp_path.glob("*.json")) == [tmp_path / f"{e.fingerprint()}.json"]


def test_cache_coherent_under_threads(tmp_path):
    backend = ScriptedBackend(rules=[Rule("q", "answer")])
    gw = gateway_for(backend, cache_dir=tmp_path, concurrency_limit=8)
    threads = [threading.Thread(target=gw.complete, args=(ex("q"),)) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(backend.calls) == 1


def test_recorder_round_trip(tmp_path):
    cassette = tmp_path / "c.json"
    inner = ScriptedBackend(rules=[Rule("a", "reply A"), Rule("b", "reply B ü")])
    rec = RecorderBackend(cassette, inner, mode="record")
    assert rec(ex("a")) == "reply A"
    assert rec(ex("b")) == "reply B ü"
    replay = RecorderBackend(cassette, mode="replay")
    assert replay(ex("a")) == "reply A"
    assert replay(ex("b")).encode() == "reply B ü".encode()
    with pytest.raises(ScriptMiss):
        replay(ex("c"))


def test_strip_completion():
    assert strip_completion("```\nfoo AND bar\n```") == "foo AND bar"
    assert strip_completion("```sql\nfoo\n```") == "foo"
    assert strip_completion("  'foo AND bar' ") == "foo AND bar"
    assert strip_completion('"foo"') == "foo"
    assert strip_completion('"a" OR "b"') == '"a" OR "b"'
    assert strip_completion("") == ""


def test_prompt_templates_exact():
    assert prompts.expansion("Q?") == (
        "Expand this search query:\n'Q?' for PubMed by incorporating synonyms and additional terms that "
        "closely relate to the main topic and help reduce ambiguity. Assume that phrases are not stemmed; "
        "therefore, generate useful variations. Return only the query that can directly be used without any "
        "explanation text. Focus on maintaining the query's precision and relevance to the original question."
    )
    assert prompts.reformulation("Q?", "A AND B").endswith("Original question: 'Q?', Original query: 'A AND B'.")
    assert prompts.reformulation("Q?", "x").startswith(
        "Given that the following search query for PubMed has returned\nno documents, please generate a broader query"
    )
    rr = prompts.rerank(["T one", "T two"], "Q?", 2)
    assert rr == (
        "1. T one\n2. T two \n\n Given these articles and the question: 'Q?'. Rerank the articles based on "
        "their relevance to the question and return the top 2 most relevant articles as a comma separated "
        "list of their index ids. Don't explain your answer, return only this list, for example: '1, 2, 3, 4' "
    )
    assert prompts.yesno("S", "B?") == (
        " S\n\n\\ 'B?'. You *must answer* only with lowercase 'yes' or 'no' even if you are not sure about the answer."
    )
    assert prompts.factoid("", "B?").startswith(" \n\n\\ 'B?'. Answer this question by returning only a JSON string array")
    assert "at max 5 elements" in prompts.factoid("", "B?")
    assert "no more than 100 entries of no more than 100 characters each" in prompts.listans("", "B?")
    assert "The maximum allowed length of the answer is 200 words." in prompts.ideal("", "B?")
    assert prompts.medproc_final("texto") == (
        "Extraiga todos los procedimientos médicos del texto delimitado por tres comillas invertidas. "
        "Devuelve una lista vacía si no se menciona ninguno. texto"
    )


def test_prompt_braces_are_literal():
    assert "{x}" in prompts.expansion("What is {x}?")
