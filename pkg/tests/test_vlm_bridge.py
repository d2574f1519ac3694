import json

import httpx
import pytest

from vlad import annotator as an
from vlad import dataset as ds
from vlad import sim, teacher
from vlad import vlm_bridge as vb
from vlad.errors import ConfigError

URL = "http://vlm.test/v1/chat/completions"


def _reply(text, pt=60, ct=40):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}],
                                     "usage": {"prompt_tokens": pt, "completion_tokens": ct}})


def _anchored(request: httpx.Request) -> httpx.Response:
    body = json.loads(request.content)
    user = body["messages"][-1]["content"]
    phase = user.split("\n")[0].removeprefix("Phase: ")
    if "Keyframes" in user:
        return _reply(f"The {phase} step moves the handle out. element=drawer-handle, direction=outward")
    return _reply(f"The robot is in the {phase} phase. It moves carefully.")


def _client(handler, tmp_path=None, **kw):
    cfg = vb.VlmConfig(enabled=True, endpoint=URL, unit_cost=1e-6,
                       cache_path=str(tmp_path / "cache.jsonl") if tmp_path else None, **kw)
    return vb.VlmClient(cfg, transport=httpx.MockTransport(handler))


@pytest.fixture(scope="module")
def episode():
    return teacher.rollout(sim.make_task("drawer_open"), 0, teacher.TeacherConfig())


def test_disabled_equals_template(episode, tax9):
    client = vb.VlmClient(vb.VlmConfig())
    fr = episode.frames[0]
    tmpl = an.render_description("approaching", fr, None, tax9)
    req = client.request("single_frame", "approaching", [vb.frame_summary(fr.state)])
    res = client.annotate_frame(req, tmpl)
    assert res.text == tmpl and not res.fallback
    assert client.calls == 0
    recs = vb.annotate_trajectory(episode, tax9, client)
    assert [r.to_dict() for r in recs] == [r.to_dict() for r in an.annotate_trajectory(episode, tax9)]


def test_cache_hit_makes_no_call_and_no_new_cost(tmp_path):
    client = _client(_anchored, tmp_path)
    req = client.request("single_frame", "holding", ["gripper closed"])
    a = client.annotate_frame(req, "fallback")
    before = client.cost_report()
    b = client.annotate_frame(req, "fallback")
    assert a.text == b.text and b.cached
    assert client.calls == 1
    assert client.cost_report() == before
    # the cache survives a restart
    again = _client(lambda r: pytest.fail("network used despite cache"), tmp_path)
    assert again.annotate_frame(req, "fallback").text == a.text


def test_missing_anchor_retries_then_falls_back():
    calls = []

    def handler(request):
        calls.append(1)
        return _reply("A robot does something.")

    client = _client(handler)
    res = client.annotate_frame(client.request("single_frame", "placing", ["x"]), "template text")
    assert res.fallback and res.text == "template text"
    assert len(calls) == 3  # first try plus two retries
    assert client.cost_report().requests == 0


def test_auth_and_network_failures_fall_back():
    client = _client(lambda r: httpx.Response(401, json={"error": "no"}))
    res = client.annotate_frame(client.request("single_frame", "idle", ["x"]), "tmpl")
    assert res.fallback and client.calls == 1

    def boom(request):
        raise httpx.ConnectError("unreachable")

    res = _client(boom).annotate_frame(client.request("single_frame", "idle", ["x"]), "tmpl")
    assert res.fallback and res.text == "tmpl"
    res = _client(lambda r: httpx.Response(200, json={"nope": 1})).annotate_frame(
        client.request("single_frame", "idle", ["x"]), "tmpl")
    assert res.fallback


def test_request_body_and_auth_header(monkeypatch):
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return _anchored(request)

    monkeypatch.setenv("VLAD_VLM_API_KEY", "sk-test")
    client = _client(handler)
    client.annotate_frame(client.request("single_frame", "grasping", ["x"]), "t")
    assert set(seen["body"]) == {"model", "messages", "max_tokens", "temperature"}
    assert seen["body"]["temperature"] == 0.0
    assert seen["auth"] == "Bearer sk-test"


def test_request_validation_and_key():
    with pytest.raises(ConfigError):
        vb.VlmRequest("multi_frame", "operating", tuple("abcdef"), URL, "m")
    with pytest.raises(ConfigError):
        vb.VlmRequest("single_frame", "operating", ("a", "b"), URL, "m")
    a = vb.VlmRequest("single_frame", "idle", ("a",), URL, "m1")
    assert a.key != vb.VlmRequest("single_frame", "idle", ("a",), URL, "m2").key
    assert a.key != vb.VlmRequest("single_frame", "idle", ("b",), URL, "m1").key
    with pytest.raises(ConfigError):
        vb.VlmConfig(enabled=True)


def test_cost_report_sums():
    assert vb.cost_report({}).as_tuple() == (0, 0, 0)
    c = 0.002
    entries = [vb.VlmCacheEntry(str(i), "x", 60, 40, c, 0.0) for i in range(2)]
    rep = vb.cost_report(entries)
    assert (rep.requests, rep.tokens) == (2, 200)
    assert rep.cost == pytest.approx(200 * c)


def test_vlm_annotation_keeps_anchor_and_tuple(episode, tax9):
    recs = vb.annotate_trajectory(episode, tax9, _client(_anchored))
    for r in recs:
        assert r.phase in r.description and not r.fallback
    ops = [r for r in recs if r.phase == "operating"]
    assert ops and all(r.description.endswith("element=drawer-handle, direction=outward") for r in ops)


def test_all_fallback_pipeline_is_byte_identical(episode, tax9):
    client = _client(lambda r: httpx.Response(500))
    vlm = vb.annotate_trajectory(episode, tax9, client)
    tmpl = an.annotate_trajectory(episode, tax9)
    assert all(r.fallback for r in vlm)
    assert [r.description for r in vlm] == [r.description for r in tmpl]
    a = ds.build_dataset([episode], [vlm], K=5)
    b = ds.build_dataset([episode], [tmpl], K=5)
    assert a.spec.hash == b.spec.hash and a.vocab.hash == b.vocab.hash
    for x, y in zip(a.samples, b.samples):
        assert x.description_tokens == y.description_tokens
        assert (x.targets == y.targets).all()


def test_concurrency_bound_respected():
    import threading
    import time

    live, peak, lock = [0], [0], threading.Lock()

    def handler(request):
        with lock:
            live[0] += 1
            peak[0] = max(peak[0], live[0])
        time.sleep(0.01)
        with lock:
            live[0] -= 1
        return _anchored(request)

    client = _client(handler, concurrency=2)
    reqs = [client.request("single_frame", "idle", [f"frame {i}"]) for i in range(12)]
    out = client.annotate_many(reqs, ["t"] * 12)
    assert all(not r.fallback for r in out)
    assert peak[0] <= 2
