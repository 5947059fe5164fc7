import json
import math

import numpy as np
import pytest
import requests

from iconclassify.errors import (
    EmptyResponseError,
    EmptyTextError,
    ProviderUnavailableError,
)
from iconclassify.providers import (
    DescriptionCache,
    DescriptionMode,
    DescriptionRecord,
    DescriptionRequest,
    EmbeddingCache,
    EmbeddingProviderConfig,
    OfflineHashEmbedder,
    RemoteChatProvider,
    RemoteEmbeddingProvider,
    _sniff_mime,
    build_selection_prompt,
    describe_image,
    embed_many,
    embed_text,
    make_embedding_provider,
    now_iso,
    offline_embed,
    offline_select,
    prompt_for_mode,
    select_with_llm,
)
from iconclassify.retrieval import cosine_distance
from iconclassify.taxonomy import parse_code

PNG_STUB = b"\x89PNG\r\n\x1a\n" + b"\x00" * 16


class CountingChat:
    """ChatProvider fake that records prompts and plays back canned replies."""

    def __init__(self, replies=("a woodcut of Noah's ark",)):
        self.model_id = "fake-chat"
        self.calls = 0
        self.prompts = []
        self.images = []
        self._replies = list(replies)

    def complete(self, prompt, image_bytes=None):
        self.prompts.append(prompt)
        self.images.append(image_bytes)
        reply = self._replies[min(self.calls, len(self._replies) - 1)]
        self.calls += 1
        return reply


class CountingEmbedder:
    provider_id = "fake-embed"

    def __init__(self, dim=4):
        self.dim = dim
        self.calls = 0
        self.batches = []

    def embed(self, text):
        return self.embed_many([text])[0]

    def embed_many(self, texts):
        self.calls += 1
        self.batches.append(list(texts))
        return [[float(len(t)), 1.0, 0.0, 0.0] for t in texts]


class FakeResponse:
    def __init__(self, status_code=200, body=None):
        self.status_code = status_code
        self._body = body if body is not None else {}

    def json(self):
        if isinstance(self._body, Exception):
            raise self._body
        return self._body


# ---------------------------------------------------------------- offline embedding

def test_offline_embed_is_unit_norm_and_deterministic():
    a = offline_embed("Christ washes Peter's feet")
    b = offline_embed("Christ washes Peter's feet")
    assert a == b
    assert len(a) == 256
    assert math.isclose(float(np.linalg.norm(a)), 1.0, abs_tol=1e-9)


def test_offline_embed_frozen_components():
    # 8 trigrams of the lowercased text land in 8 distinct buckets of a
    # 16-dim space, so every hit is +-1/sqrt(8)
    expected = [
        -0.35355339059327373, -0.35355339059327373, -0.35355339059327373,
        0.35355339059327373, 0.0, 0.0, -0.35355339059327373,
        -0.35355339059327373, 0.35355339059327373, 0.35355339059327373,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ]
    assert offline_embed("noah's ark", dim=16) == expected


def test_offline_embed_is_case_insensitive():
    assert offline_embed("NOAH'S ARK") == offline_embed("noah's ark")


def test_offline_embed_groups_related_texts():
    near = cosine_distance(offline_embed("noah ark"), offline_embed("noah's ark"))
    far = cosine_distance(offline_embed("noah ark"), offline_embed("crucifixion of christ"))
    assert near < far


def test_offline_embed_respects_dim():
    assert len(offline_embed("story of noah", dim=64)) == 64
    with pytest.raises(ValueError):
        offline_embed("story of noah", dim=8)


def test_offline_embed_rejects_short_text():
    with pytest.raises(EmptyTextError):
        offline_embed("ab")
    with pytest.raises(EmptyTextError):
        offline_embed("")


def test_offline_hash_embedder_provider_id_and_batching():
    embedder = OfflineHashEmbedder(dim=32)
    assert embedder.provider_id == "offline-hash-32"
    outs = embedder.embed_many(["noah ark", "david goliath"])
    assert outs[0] == offline_embed("noah ark", 32)
    assert outs[1] == offline_embed("david goliath", 32)
    with pytest.raises(ValueError):
        OfflineHashEmbedder(dim=4)


def test_make_embedding_provider():
    offline = make_embedding_provider(EmbeddingProviderConfig(kind="offline-hash", dim=64))
    assert isinstance(offline, OfflineHashEmbedder)
    assert offline.dim == 64
    remote = make_embedding_provider(
        EmbeddingProviderConfig(kind="remote", endpoint="http://h", model="m")
    )
    assert remote.provider_id == "remote:m"
    with pytest.raises(ValueError):
        make_embedding_provider(EmbeddingProviderConfig(kind="remote"))
    with pytest.raises(ValueError):
        make_embedding_provider(EmbeddingProviderConfig(kind="???"))


# ---------------------------------------------------------------- prompts

def test_full_page_prompt_asks_for_page_context():
    prompt = prompt_for_mode(DescriptionMode.FULL_PAGE)
    for needle in ("surrounding text", "captions", "headings", "chapter numbers"):
        assert needle in prompt


def test_illustration_prompt_forbids_page_context():
    prompt = prompt_for_mode(DescriptionMode.ILLUSTRATION)
    assert "Do not refer to any surrounding page text" in prompt
    assert "chapter numbers" not in prompt


def test_selection_prompt_numbers_candidates_and_keeps_braces():
    candidates = [
        (parse_code("73D2"), "the episode of the Last Supper"),
        (parse_code("71B32"), "the building of the ark"),
    ]
    prompt = build_selection_prompt("a scene with {braces} in it", candidates)
    assert "1. 73D2: the episode of the Last Supper" in prompt
    assert "2. 71B32: the building of the ark" in prompt
    assert "a scene with {braces} in it" in prompt
    assert "{description}" not in prompt
    assert "{candidates}" not in prompt


# ---------------------------------------------------------------- describe_image

def test_describe_image_calls_provider_once_then_caches(tmp_path):
    cache = DescriptionCache(tmp_path / "desc.jsonl")
    chat = CountingChat()
    request = DescriptionRequest(image_id="img001", image_bytes=PNG_STUB, mode=DescriptionMode.FULL_PAGE)
    first = describe_image(request, chat, cache)
    second = describe_image(request, chat, cache)
    assert chat.calls == 1
    assert first.text == "a woodcut of Noah's ark"
    assert second is first or second.text == first.text
    assert first.model_id == "fake-chat"
    assert first.prompt_version == "v1"
    # the mode's template went out with the image attached
    assert "chapter numbers" in chat.prompts[0]
    assert chat.images[0] == PNG_STUB


def test_describe_image_modes_cache_separately(tmp_path):
    cache = DescriptionCache(tmp_path / "desc.jsonl")
    chat = CountingChat(replies=("page view", "crop view"))
    for mode in (DescriptionMode.FULL_PAGE, DescriptionMode.ILLUSTRATION):
        describe_image(
            DescriptionRequest(image_id="img001", image_bytes=PNG_STUB, mode=mode), chat, cache
        )
    assert chat.calls == 2
    assert cache.get("img001", DescriptionMode.FULL_PAGE).text == "page view"
    assert cache.get("img001", DescriptionMode.ILLUSTRATION).text == "crop view"


def test_describe_image_rejects_empty_inputs(tmp_path):
    with pytest.raises(ValueError):
        describe_image(
            DescriptionRequest(image_id="x", image_bytes=b"", mode=DescriptionMode.FULL_PAGE),
            CountingChat(),
        )
    with pytest.raises(EmptyResponseError):
        describe_image(
            DescriptionRequest(image_id="x", image_bytes=PNG_STUB, mode=DescriptionMode.FULL_PAGE),
            CountingChat(replies=("   ",)),
        )


def test_description_cache_persists_and_first_record_wins(tmp_path):
    path = tmp_path / "desc.jsonl"
    cache = DescriptionCache(path)
    rec = DescriptionRecord(
        image_id="img002", mode=DescriptionMode.ILLUSTRATION,
        text="David with a sling", model_id="m", created_at=now_iso(),
    )
    cache.put(rec)
    cache.put(DescriptionRecord(
        image_id="img002", mode=DescriptionMode.ILLUSTRATION,
        text="overwritten?", model_id="m", created_at=now_iso(),
    ))
    reloaded = DescriptionCache(path)
    assert len(reloaded) == 1
    assert reloaded.get("img002", DescriptionMode.ILLUSTRATION).text == "David with a sling"
    # only one line was ever appended
    assert len(path.read_text().strip().splitlines()) == 1


# ---------------------------------------------------------------- embedding cache

def test_embed_text_caches_by_content(tmp_path):
    cache = EmbeddingCache(tmp_path / "emb.jsonl")
    embedder = CountingEmbedder()
    v1 = embed_text("story of noah", embedder, cache)
    v2 = embed_text("story of noah", embedder, cache)
    assert embedder.calls == 1
    assert v1 == v2
    # a different provider id misses the cache
    other = CountingEmbedder()
    other.provider_id = "fake-embed-2"
    embed_text("story of noah", other, cache)
    assert other.calls == 1


def test_embed_text_rejects_empty():
    for bad in ("", "   "):
        with pytest.raises(EmptyTextError):
            embed_text(bad, CountingEmbedder())


def test_embed_many_batches_only_misses(tmp_path):
    cache = EmbeddingCache(tmp_path / "emb.jsonl")
    embedder = CountingEmbedder()
    embed_text("bb", embedder, cache)
    outs = embed_many(["a" * 1, "bb", "ccc"], embedder, cache)
    assert [v[0] for v in outs] == [1.0, 2.0, 3.0]  # manifest order kept
    assert embedder.batches[-1] == ["a", "ccc"]     # cached text not re-sent
    assert embedder.calls == 2


def test_embedding_cache_round_trips_floats(tmp_path):
    path = tmp_path / "emb.jsonl"
    cache = EmbeddingCache(path)
    vec = offline_embed("the building of the ark", 32)
    cache.put("offline-hash-32", "the building of the ark", vec)
    reloaded = EmbeddingCache(path)
    assert reloaded.get("offline-hash-32", "the building of the ark") == vec
    assert reloaded.get("offline-hash-32", "something else") is None


# ---------------------------------------------------------------- candidate selection

CANDS = [
    (parse_code("73D2"), "the episode of the Last Supper"),
    (parse_code("73D23"), "Christ washes the feet of the apostles"),
    (parse_code("71B32"), "the building of the ark"),
]


def test_select_with_llm_exact_echo():
    code, fallback = select_with_llm("desc", CANDS, CountingChat(replies=("73D23",)))
    assert code.raw == "73D23"
    assert fallback is False


def test_select_with_llm_finds_code_in_chatter():
    chat = CountingChat(replies=("The best match is 71B32, the ark scene.",))
    code, fallback = select_with_llm("desc", CANDS, chat)
    assert (code.raw, fallback) == ("71B32", False)


def test_select_with_llm_longest_code_wins_at_same_position():
    # "73D2" is a prefix of "73D23": the longer candidate must win
    code, _ = select_with_llm("desc", CANDS, CountingChat(replies=("73D23 is right",)))
    assert code.raw == "73D23"


def test_select_with_llm_earliest_mention_wins():
    chat = CountingChat(replies=("71B32 not 73D2",))
    code, _ = select_with_llm("desc", CANDS, chat)
    assert code.raw == "71B32"


def test_select_with_llm_falls_back_to_rank_one():
    chat = CountingChat(replies=("none of these fit",))
    code, fallback = select_with_llm("desc", CANDS, chat)
    assert code.raw == "73D2"
    assert fallback is True


def test_select_with_llm_ignores_codes_outside_candidates():
    chat = CountingChat(replies=("I pick 99Z99, or maybe 71B32",))
    code, fallback = select_with_llm("desc", CANDS, chat)
    assert code.raw == "71B32"
    assert fallback is False


def test_select_with_llm_sends_selection_prompt():
    chat = CountingChat(replies=("73D2",))
    select_with_llm("a supper scene", CANDS, chat)
    assert "a supper scene" in chat.prompts[0]
    assert "2. 73D23: Christ washes the feet of the apostles" in chat.prompts[0]
    with pytest.raises(ValueError):
        select_with_llm("desc", [], chat)


def test_offline_select_prefers_highest_overlap():
    # description shares 2 of 4 union tokens with the ark candidate and
    # fewer with the others
    code, fallback = offline_select("the ark under construction", CANDS)
    assert code.raw == "71B32"
    assert fallback is False


def test_offline_select_verbatim_candidate_text():
    for code, text in CANDS:
        got, _ = offline_select(text, CANDS)
        assert got.raw == code.raw


def test_offline_select_zero_overlap_keeps_rank_one():
    code, fallback = offline_select("zebra quagga okapi", CANDS)
    assert (code.raw, fallback) == ("73D2", False)


def test_offline_select_tie_keeps_earlier_rank():
    cands = [
        (parse_code("73D2"), "supper table"),
        (parse_code("73D23"), "supper table"),
    ]
    code, _ = offline_select("supper table", cands)
    assert code.raw == "73D2"


def test_offline_select_requires_candidates():
    with pytest.raises(ValueError):
        offline_select("desc", [])


# ---------------------------------------------------------------- remote transport

def test_mime_sniffing():
    assert _sniff_mime(PNG_STUB) == "image/png"
    assert _sniff_mime(b"GIF89a...") == "image/gif"
    assert _sniff_mime(b"\xff\xd8\xff\xe0") == "image/jpeg"


def test_remote_chat_retries_then_succeeds(monkeypatch):
    attempts = []

    def fake_post(url, json=None, headers=None, timeout=None):
        attempts.append(url)
        if len(attempts) < 3:
            raise requests.ConnectionError("boom")
        return FakeResponse(body={"choices": [{"message": {"content": "a woodcut"}}]})

    monkeypatch.setattr(requests, "post", fake_post)
    chat = RemoteChatProvider("http://host/v1", "m", backoff=0.0)
    assert chat.complete("hi") == "a woodcut"
    assert len(attempts) == 3
    assert attempts[0] == "http://host/v1/chat/completions"


def test_remote_chat_gives_up_after_three_attempts(monkeypatch):
    attempts = []

    def fake_post(url, json=None, headers=None, timeout=None):
        attempts.append(url)
        return FakeResponse(status_code=503)

    monkeypatch.setattr(requests, "post", fake_post)
    chat = RemoteChatProvider("http://host", "m", backoff=0.0)
    with pytest.raises(ProviderUnavailableError, match="HTTP 503"):
        chat.complete("hi")
    assert len(attempts) == 3


def test_remote_chat_attaches_image_as_data_url(monkeypatch):
    seen = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        seen["payload"] = json
        seen["headers"] = headers
        return FakeResponse(body={"choices": [{"message": {"content": "ok"}}]})

    monkeypatch.setattr(requests, "post", fake_post)
    chat = RemoteChatProvider("http://host", "vision-model", api_key="sk-test", backoff=0.0)
    chat.complete("look", image_bytes=PNG_STUB)
    content = seen["payload"]["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "look"}
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
    assert seen["payload"]["model"] == "vision-model"
    assert seen["headers"]["Authorization"] == "Bearer sk-test"


def test_remote_chat_rejects_malformed_or_empty_body(monkeypatch):
    bodies = [{"choices": []}, {"choices": [{"message": {"content": "  "}}]}, {}]

    for body in bodies:
        monkeypatch.setattr(
            requests, "post", lambda url, json=None, headers=None, timeout=None, b=body: FakeResponse(body=b)
        )
        chat = RemoteChatProvider("http://host", "m", backoff=0.0)
        with pytest.raises(EmptyResponseError):
            chat.complete("hi")


def test_remote_embeddings_sorts_by_index(monkeypatch):
    body = {
        "data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]},
        ]
    }
    monkeypatch.setattr(
        requests, "post", lambda url, json=None, headers=None, timeout=None: FakeResponse(body=body)
    )
    emb = RemoteEmbeddingProvider("http://host", "embed-model", backoff=0.0)
    assert emb.embed_many(["a", "b"]) == [[1.0, 0.0], [0.0, 1.0]]
    assert emb.provider_id == "remote:embed-model"


def test_remote_embeddings_rejects_wrong_count(monkeypatch):
    body = {"data": [{"index": 0, "embedding": [1.0]}]}
    monkeypatch.setattr(
        requests, "post", lambda url, json=None, headers=None, timeout=None: FakeResponse(body=body)
    )
    emb = RemoteEmbeddingProvider("http://host", "m", backoff=0.0)
    with pytest.raises(EmptyResponseError):
        emb.embed_many(["a", "b"])
    assert emb.embed_many([]) == []


def test_remote_retries_on_invalid_json(monkeypatch):
    calls = []

    def fake_post(url, json=None, headers=None, timeout=None):
        calls.append(url)
        if len(calls) == 1:
            return FakeResponse(body=ValueError("not json"))
        return FakeResponse(body={"data": [{"index": 0, "embedding": [1.0]}]})

    monkeypatch.setattr(requests, "post", fake_post)
    emb = RemoteEmbeddingProvider("http://host", "m", backoff=0.0)
    assert emb.embed_many(["a"]) == [[1.0]]
    assert len(calls) == 2
