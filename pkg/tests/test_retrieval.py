import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolgate.errors import ConfigurationError, EmbeddingIntegrityError, FingerprintMismatchError, ProviderError, RegistryIntegrityError
from toolgate.registry import ToolRegistry
from toolgate.retrieval import (
    EmbedderConfig,
    EmbeddingVector,
    HashingEmbedder,
    RemoteEmbedder,
    RetrievalQuery,
    ToolIndex,
    build_index,
    canonical_tool_text,
    cosine_similarity,
    embed,
    load_index,
    save_index,
    search,
)
from toolgate.synthetic import WORDS, synthetic_registry
from toolgate.toolspec import ToolSpec

from oracles import brute_force_top_k, cosine

LOCAL = EmbedderConfig(dimension=256, seed=0)


# -- canonical text ----------------------------------------------------------


def test_canonical_text_deterministic_and_sensitive(gitlab_tools):
    t = gitlab_tools[0]
    assert canonical_tool_text(t) == canonical_tool_text(t)
    other = ToolSpec(t.name, t.description + " more", t.arguments, t.binding, t.service)
    assert canonical_tool_text(other) != canonical_tool_text(t)
    assert " " not in canonical_tool_text(ToolSpec("a", "x", {"type": "object", "properties": {}}, t.binding, "s"))


def test_canonical_text_contains_nested_property_names(gitlab_tools):
    t = next(x for x in gitlab_tools if x.name == "gitlab_create_project")
    text = canonical_tool_text(t)
    for prop in ["name", "visibility", "tags", "settings", "approvals", "rule", "users"]:
        assert f'"{prop}"' in text


# -- embedders ---------------------------------------------------------------


def test_local_embedder_deterministic_and_normalised():
    a, b = embed(["delete the virtual machine", "delete the virtual machine"], LOCAL)
    assert np.array_equal(a.values, b.values)
    assert abs(a.norm - 1.0) <= 1e-9
    assert a.dimension == 256


def test_local_embedder_seed_changes_vectors():
    a = embed(["list projects"], LOCAL)[0]
    b = embed(["list projects"], EmbedderConfig(dimension=256, seed=1))[0]
    assert not np.array_equal(a.values, b.values)


def test_fallback_dimension_floor():
    with pytest.raises(ConfigurationError):
        EmbedderConfig(dimension=32)


def test_remote_config_needs_model():
    with pytest.raises(ConfigurationError):
        EmbedderConfig(provider="remote", endpoint="http://x")


# -- cosine ------------------------------------------------------------------


def test_cosine_basics():
    v = EmbeddingVector.of([3.0, 4.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(EmbeddingVector.of([1, 0]), EmbeddingVector.of([0, 1])) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity(EmbeddingVector.of([1, 0]), EmbeddingVector.of([1, 0, 0]))
    with pytest.raises(ValueError):
        cosine_similarity(EmbeddingVector.of([0, 0]), v)


def test_cosine_random_pairs_match_reference():
    rng = random.Random(7)
    for _ in range(50):
        a = [rng.gauss(0, 1) for _ in range(64)]
        b = [rng.gauss(0, 1) for _ in range(64)]
        assert abs(cosine_similarity(EmbeddingVector.of(a), EmbeddingVector.of(b)) - cosine(a, b)) <= 1e-12


def test_cosine_clamped():
    rng = random.Random(3)
    for _ in range(200):
        v = EmbeddingVector.of([rng.uniform(-1, 1) for _ in range(7)])
        assert -1.0 <= cosine_similarity(v, v) <= 1.0
        assert -1.0 <= cosine_similarity(v, EmbeddingVector.of(-v.values)) <= 1.0


# -- index -------------------------------------------------------------------


def test_build_1000(tmp_path):
    reg = synthetic_registry(1000, seed=1)
    idx = build_index(reg, LOCAL)
    assert len(idx) == 1000 and idx.names == reg.names()
    save_index(idx, tmp_path / "a.jsonl")
    save_index(build_index(reg, LOCAL), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = load_index(tmp_path / "a.jsonl")
    assert back.names == idx.names and np.array_equal(back.matrix, idx.matrix)


def test_empty_registry_rejected():
    with pytest.raises(Exception, match="empty"):
        build_index(ToolRegistry(), LOCAL)


def test_zero_vector_rejected():
    with pytest.raises(EmbeddingIntegrityError):
        ToolIndex(["a", "b"], np.array([[1.0, 0.0], [0.0, 0.0]]), LOCAL)


def test_fingerprint_mismatch(gitlab_registry):
    idx = build_index(gitlab_registry, LOCAL)
    other = HashingEmbedder(EmbedderConfig(dimension=256, seed=9))
    with pytest.raises(FingerprintMismatchError):
        search(idx, RetrievalQuery("merge"), other)


def test_tampered_index_header(tmp_path, gitlab_registry):
    p = tmp_path / "i.jsonl"
    save_index(build_index(gitlab_registry, LOCAL), p)
    lines = p.read_text().splitlines(keepends=True)
    header = json.loads(lines[0])
    header["embedder"]["seed"] = 5
    p.write_text(json.dumps(header) + "\n" + "".join(lines[1:]))
    with pytest.raises(RegistryIntegrityError):
        load_index(p)


def test_self_query_ranks_first(gitlab_registry):
    idx = build_index(gitlab_registry, LOCAL)
    emb = HashingEmbedder(LOCAL)
    for t in gitlab_registry:
        res = search(idx, RetrievalQuery(canonical_tool_text(t), 3), emb)
        assert res.hits[0].name == t.name
        assert abs(res.hits[0].score - 1.0) <= 1e-9


def test_k_larger_than_index(gitlab_registry):
    idx = build_index(gitlab_registry, LOCAL)
    res = search(idx, RetrievalQuery("project", 100), HashingEmbedder(LOCAL))
    assert len(res.hits) == 12
    scores = [h.score for h in res.hits]
    assert scores == sorted(scores, reverse=True)


def test_ties_break_by_name():
    m = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    idx = ToolIndex(["d", "b", "c", "a"], m, LOCAL)
    hits = idx.top_k(np.array([1.0, 0.0]), 3)
    assert [h.name for h in hits] == ["b", "c", "d"]


def test_query_validation():
    with pytest.raises(ValueError):
        RetrievalQuery("")
    with pytest.raises(ValueError):
        RetrievalQuery("x", 0)


def random_text(rng, lo=1, hi=12):
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(lo, hi)))


def random_index(rng, n, dim=64):
    cfg = EmbedderConfig(dimension=dim, seed=rng.randint(0, 99))
    emb = HashingEmbedder(cfg)
    texts = []
    while len(texts) < n:
        t = random_text(rng) + f" w{rng.randint(0, 50)}"
        texts.append(t)
    names = [f"tool_{i:05d}" for i in rng.sample(range(100_000), n)]
    return ToolIndex(names, emb.embed(texts), cfg), emb


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 10**6))
def test_search_matches_brute_force(n, k, seed):
    rng = random.Random(seed)
    idx, emb = random_index(rng, n)
    q = random_text(rng) + " w1"
    res = search(idx, RetrievalQuery(q, k), emb)
    qvec = emb.embed([q])[0].tolist()
    expected = brute_force_top_k(idx.names, idx.matrix.tolist(), qvec, k)
    assert res.names == [name for name, _ in expected]
    assert all(abs(h.score - s) <= 1e-9 for h, (_, s) in zip(res.hits, expected))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(1, 30), st.integers(0, 10**6))
def test_scale_invariance_and_monotone_k(n, k, seed):
    rng = random.Random(seed)
    idx, emb = random_index(rng, n)
    qvec = emb.embed([random_text(rng) + " w2"])[0]
    base = idx.top_k(qvec, k)
    factors = np.array([rng.choice([0.5, 1.0, 3.0, 1e3]) for _ in range(n)])[:, None]
    scaled = ToolIndex(idx.names, idx.matrix * factors, idx.config).top_k(qvec, k)
    assert [h.name for h in scaled] == [h.name for h in base]
    bigger = idx.top_k(qvec, k + 1)
    assert [h.name for h in bigger][: len(base)] == [h.name for h in base]
    assert idx.top_k(qvec, k) == base


# -- remote provider stub ----------------------------------------------------


class EmbeddingStub:
    def __init__(self, script=None, dim=4):
        self.calls = []
        self.script = list(script or [])
        self.dim = dim
        stub = self

        class H(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.calls.append({"body": body, "auth": self.headers.get("Authorization")})
                status, payload = stub.script.pop(0) if stub.script else (200, None)
                if payload is None:
                    data = [{"index": i, "embedding": [float(len(t)), 1.0, 0.0, float(i + 1)][: stub.dim]} for i, t in enumerate(body["input"])]
                    data.reverse()  # provider may reorder; client must sort by index
                    payload = {"data": data}
                raw = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), H)
        threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True).start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/embeddings"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub():
    s = EmbeddingStub()
    yield s
    s.close()


def remote_cfg(url, **kw):
    return EmbedderConfig(provider="remote", endpoint=url, model="text-embedding-3-large", dimension=None, auth_env="TG_TEST_KEY", backoff=0.01, **kw)


def test_remote_vectors_stored_verbatim(stub, monkeypatch):
    monkeypatch.setenv("TG_TEST_KEY", "sekrit")
    out = RemoteEmbedder(remote_cfg(stub.url, batch_size=2)).embed(["a", "bbb", "cc"])
    assert out.tolist() == [[1.0, 1.0, 0.0, 1.0], [3.0, 1.0, 0.0, 2.0], [2.0, 1.0, 0.0, 1.0]]
    assert len(stub.calls) == 2
    assert stub.calls[0]["auth"] == "Bearer sekrit"
    assert stub.calls[0]["body"]["model"] == "text-embedding-3-large"


def test_remote_missing_credentials(stub, monkeypatch):
    monkeypatch.delenv("TG_TEST_KEY", raising=False)
    with pytest.raises(ConfigurationError):
        RemoteEmbedder(remote_cfg(stub.url)).embed(["a"])


def test_remote_auth_failure(stub, monkeypatch):
    monkeypatch.setenv("TG_TEST_KEY", "bad")
    stub.script = [(401, {"error": {"message": "invalid key"}})]
    with pytest.raises(ConfigurationError, match="invalid key"):
        RemoteEmbedder(remote_cfg(stub.url)).embed(["a"])


def test_remote_non_retryable(stub, monkeypatch):
    monkeypatch.setenv("TG_TEST_KEY", "k")
    stub.script = [(400, {"error": {"message": "input too long"}})]
    with pytest.raises(ProviderError, match="input too long"):
        RemoteEmbedder(remote_cfg(stub.url)).embed(["a"])
    assert len(stub.calls) == 1


def test_remote_retries_transient(stub, monkeypatch):
    monkeypatch.setenv("TG_TEST_KEY", "k")
    stub.script = [(503, {"error": "busy"}), (429, {"error": "slow down"})]
    out = RemoteEmbedder(remote_cfg(stub.url)).embed(["abc"])
    assert out.tolist() == [[3.0, 1.0, 0.0, 1.0]]
    assert len(stub.calls) == 3


def test_remote_retries_are_bounded(stub, monkeypatch):
    monkeypatch.setenv("TG_TEST_KEY", "k")
    stub.script = [(503, {"error": "busy"})] * 10
    with pytest.raises(ProviderError, match="after 3 attempts"):
        RemoteEmbedder(remote_cfg(stub.url, max_retries=2)).embed(["abc"])
    assert len(stub.calls) == 3


def test_remote_dimension_drift(stub, monkeypatch):
    monkeypatch.setenv("TG_TEST_KEY", "k")
    stub.script = [(200, {"data": [{"index": 0, "embedding": [1.0, 2.0]}, {"index": 1, "embedding": [1.0]}]})]
    with pytest.raises(EmbeddingIntegrityError):
        RemoteEmbedder(remote_cfg(stub.url)).embed(["a", "b"])


def test_remote_index_and_search(stub, monkeypatch, gitlab_registry):
    monkeypatch.setenv("TG_TEST_KEY", "k")
    cfg = remote_cfg(stub.url)
    emb = RemoteEmbedder(cfg)
    idx = build_index(gitlab_registry, cfg, emb)
    assert len(idx) == 12
    res = search(idx, RetrievalQuery("anything", 2), emb)
    assert len(res.hits) == 2


def test_float_noise_ties_use_name_order():
    # two rows with the same cosine up to rounding
    m = np.array([[0.1, 0.2, 0.3], [0.3, 0.2, 0.1], [0.2, 0.1, 0.3]])
    idx = ToolIndex(["zeta", "alpha", "mid"], m, LOCAL)
    hits = idx.top_k(np.array([1.0, 1.0, 1.0]), 3)
    assert [h.name for h in hits] == ["alpha", "mid", "zeta"]
    assert len({h.score for h in hits}) == 1


def test_cancelling_tokens_do_not_yield_zero_vector():
    emb = HashingEmbedder(EmbedderConfig(dimension=64, seed=0))
    slots = {}
    pair = None
    for i in range(10_000):
        idx, sign = emb._slot(f"tok{i}")
        other = slots.get((idx, -sign))
        if other:
            pair = (other, f"tok{i}")
            break
        slots[(idx, sign)] = f"tok{i}"
    assert pair is not None
    vec = emb.embed_one(" ".join(pair))
    assert abs(np.linalg.norm(vec) - 1.0) <= 1e-9


def test_all_stopword_query_is_rejected(gitlab_registry):
    idx = build_index(gitlab_registry, LOCAL)
    with pytest.raises(ValueError, match="no indexable content"):
        search(idx, RetrievalQuery("the of and"), HashingEmbedder(LOCAL))
