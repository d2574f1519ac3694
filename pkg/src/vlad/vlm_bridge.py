"""Optional chat-completion VLM client for phase-anchored descriptions.

Frames are sent as structured text summaries (the simulator has no renderer).
Every response must contain the anchor phase word; otherwise the request is
retried and finally replaced by the deterministic template, so enabling the
bridge never changes what a failed call produces.

Prompt wording below is our own construction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Sequence

import httpx
import numpy as np

from . import annotator as an
from . import sim
from .errors import ConfigError
from .sim import SimConfig, WorldState

log = logging.getLogger(__name__)

SYSTEM_PROMPT = ("You describe frames of a robot manipulation episode. You are given the current phase label; "
                 "use that exact word and describe only what the frame summary supports.")
_TUPLE_RE = re.compile(r"element\s*=\s*([A-Za-z-]+)\s*,\s*direction\s*=\s*([A-Za-z]+)")


@dataclass(frozen=True)
class VlmConfig:
    enabled: bool = False
    endpoint: str = ""
    model: str = "vlm-small"
    api_key_env: str = "VLAD_VLM_API_KEY"
    max_tokens: int = 128
    temperature: float = 0.0
    retries: int = 2
    concurrency: int = 4
    timeout: float = 30.0
    # cost per token, for accounting only
    unit_cost: float = 0.0
    cache_path: str | None = None

    def __post_init__(self):
        if self.enabled and not self.endpoint:
            raise ConfigError("VLM enabled without an endpoint")
        if self.retries < 0 or self.concurrency < 1 or self.max_tokens < 1:
            raise ConfigError("retries must be >= 0, concurrency and max_tokens >= 1")


@dataclass(frozen=True)
class VlmRequest:
    prompt_kind: Literal["single_frame", "multi_frame"]
    anchor: str
    frames: tuple[str, ...]
    endpoint: str
    model: str
    max_tokens: int = 128
    temperature: float = 0.0

    def __post_init__(self):
        if self.prompt_kind == "single_frame" and len(self.frames) != 1:
            raise ConfigError("single-frame requests carry exactly one frame summary")
        if self.prompt_kind == "multi_frame" and not 1 <= len(self.frames) <= 5:
            raise ConfigError("multi-frame requests carry the segment keyframes (at most 5)")
        if self.prompt_kind not in ("single_frame", "multi_frame"):
            raise ConfigError(f"unknown prompt kind {self.prompt_kind!r}")
        if not self.anchor:
            raise ConfigError("anchor phase label is required")

    def messages(self) -> list[dict]:
        if self.prompt_kind == "single_frame":
            user = (f"Phase: {self.anchor}\nFrame: {self.frames[0]}\n"
                    f"Write two or three sentences. Begin with: The robot is in the {self.anchor} phase.")
        else:
            shots = "\n".join(f"{i + 1}. {f}" for i, f in enumerate(self.frames))
            user = (f"Phase: {self.anchor}\nKeyframes spanning the segment:\n{shots}\n"
                    "Which articulated element moves and in which direction? Answer in one sentence that "
                    f"contains the word {self.anchor} and ends with element=<element>, direction=<direction>, "
                    f"where direction is one of {', '.join(an.DIRECTIONS)}.")
        return [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": user}]

    def body(self) -> dict:
        return {"model": self.model, "messages": self.messages(), "max_tokens": self.max_tokens,
                "temperature": self.temperature}

    @property
    def key(self) -> str:
        return hashlib.sha256(json.dumps(self.body(), sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class VlmCacheEntry:
    key: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    unit_cost: float
    timestamp: float

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class VlmResult:
    text: str
    fallback: bool
    cached: bool = False


@dataclass
class CostReport:
    requests: int
    tokens: int
    cost: float

    def as_tuple(self):
        return self.requests, self.tokens, self.cost


def cost_report(cache) -> CostReport:
    entries = list(cache.values()) if isinstance(cache, dict) else list(cache)
    return CostReport(len(entries), sum(e.tokens for e in entries), float(sum(e.tokens * e.unit_cost for e in entries)))


def frame_summary(state: WorldState, cfg: SimConfig = sim.DEFAULT_SIM) -> str:
    """Discretized text rendering of the signals a camera frame would show."""
    parts = [f"gripper {'open' if state.gripper_open >= 0.5 else 'closed'} ({state.gripper_open:.1f})",
             "end effector at ({:.2f}, {:.2f}, {:.2f})".format(*state.ee_pos)]
    rel = cfg.handle_pos(state.drawer_q) - state.ee_pos
    parts.append(f"drawer {state.drawer_q:.2f} open, handle {an.relative_direction_word(rel)} "
                 f"{float(np.linalg.norm(rel)):.2f} away")
    for o in state.objects:
        if o.held:
            parts.append("block in the gripper")
        else:
            r = o.pos - state.ee_pos
            parts.append(f"block {an.relative_direction_word(r)} {float(np.linalg.norm(r)):.2f} away")
    return "; ".join(parts)


class VlmClient:
    """Cached, validated, concurrency-bounded chat-completion client."""

    def __init__(self, cfg: VlmConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self.cache: dict[str, VlmCacheEntry] = {}
        self._cache_lock = threading.Lock()
        self._transport = transport
        self._http: httpx.Client | None = None
        self.calls = 0  # network round trips, including failed ones
        if cfg.cache_path and Path(cfg.cache_path).exists():
            for line in Path(cfg.cache_path).read_text().splitlines():
                if line.strip():
                    e = VlmCacheEntry(**json.loads(line))
                    self.cache[e.key] = e

    def close(self):
        if self._http is not None:
            self._http.close()
            self._http = None

    def _client(self) -> httpx.Client:
        with self._cache_lock:
            if self._http is None:
                self._http = httpx.Client(transport=self._transport, timeout=self.cfg.timeout)
            self.calls += 1
            return self._http

    def request(self, kind: str, anchor: str, frames: Sequence[str]) -> VlmRequest:
        return VlmRequest(kind, anchor, tuple(frames), self.cfg.endpoint, self.cfg.model, self.cfg.max_tokens,
                          self.cfg.temperature)

    def _store(self, entry: VlmCacheEntry):
        with self._cache_lock:
            self.cache[entry.key] = entry
            if self.cfg.cache_path:
                with open(self.cfg.cache_path, "a") as fh:
                    fh.write(json.dumps(asdict(entry)) + "\n")

    def _post(self, req: VlmRequest) -> tuple[str, int, int]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        r = self._client().post(req.endpoint, json=req.body(), headers=headers)
        r.raise_for_status()
        data = r.json()
        text = data["choices"][0]["message"]["content"]
        if not isinstance(text, str):
            raise ValueError("response content is not text")
        usage = data.get("usage") or {}
        pt = int(usage.get("prompt_tokens", sum(len(m["content"].split()) for m in req.messages())))
        ct = int(usage.get("completion_tokens", len(text.split())))
        return text.strip(), pt, ct

    def annotate_frame(self, req: VlmRequest, fallback_text: str) -> VlmResult:
        """Anchored text for one request, or ``fallback_text`` flagged as a fallback."""
        if not self.cfg.enabled:
            return VlmResult(fallback_text, fallback=False)
        with self._cache_lock:
            hit = self.cache.get(req.key)
        if hit is not None:
            return VlmResult(hit.response, fallback=False, cached=True)
        for attempt in range(self.cfg.retries + 1):
            try:
                text, pt, ct = self._post(req)
            except httpx.HTTPStatusError as e:
                log.warning("VLM request failed with HTTP %s", e.response.status_code)
                if e.response.status_code in (401, 403):
                    break
                continue
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as e:
                log.warning("VLM request failed: %s", e)
                continue
            if req.anchor in text:
                self._store(VlmCacheEntry(req.key, text, pt, ct, self.cfg.unit_cost, time.time()))
                return VlmResult(text, fallback=False)
            log.info("VLM response lacks anchor %r (attempt %d)", req.anchor, attempt + 1)
        return VlmResult(fallback_text, fallback=True)

    def annotate_many(self, reqs: Sequence[VlmRequest], fallbacks: Sequence[str]) -> list[VlmResult]:
        if not self.cfg.enabled or len(reqs) <= 1:
            return [self.annotate_frame(r, f) for r, f in zip(reqs, fallbacks)]
        with ThreadPoolExecutor(max_workers=self.cfg.concurrency) as pool:
            return list(pool.map(self.annotate_frame, reqs, fallbacks))

    def cost_report(self) -> CostReport:
        with self._cache_lock:
            return cost_report(self.cache)


def parse_tuple(text: str) -> tuple[str, str] | None:
    m = _TUPLE_RE.search(text)
    if not m:
        return None
    element, direction = m.group(1), m.group(2)
    if element not in an.ELEMENTS or direction not in an.DIRECTIONS:
        return None
    return element, direction


def annotate_trajectory(traj, taxonomy: an.Taxonomy, client: VlmClient | None,
                        cfg: SimConfig = sim.DEFAULT_SIM) -> list[an.AnnotationRecord]:
    """Like the template annotator, with VLM text where available.

    Operating segments get one multi-frame query for the (element, direction)
    tuple; every frame gets one single-frame query anchored on its phase.
    """
    base = an.annotate_trajectory(traj, taxonomy, cfg)
    if client is None or not client.cfg.enabled:
        return base
    fine = an.label_trajectory(traj, cfg)
    tuples: dict[int, tuple[str, str]] = {}
    seg_fallback: dict[int, bool] = {}
    segments = an.extract_segments(fine)
    if segments:
        reqs, fbs = [], []
        for seg in segments:
            states = an.segment_states(traj, seg, cfg)
            oracle = an.infer_direction(states)
            reqs.append(client.request("multi_frame", "operating", [frame_summary(st, cfg) for st in states]))
            fbs.append(f"element={oracle[0]}, direction={oracle[1]}")
        for seg, res, fb in zip(segments, client.annotate_many(reqs, fbs), fbs):
            tup = parse_tuple(res.text)
            failed = res.fallback or tup is None
            tup = parse_tuple(fb) if tup is None else tup
            for t in range(seg.start, seg.end + 1):
                tuples[t] = tup
                seg_fallback[t] = failed

    reqs = [client.request("single_frame", r.phase, [frame_summary(fr.state, cfg)])
            for r, fr in zip(base, traj.frames)]
    fallbacks = [an.render_description(r.phase, fr, None, taxonomy, cfg) for r, fr in zip(base, traj.frames)]
    out = []
    for r, res in zip(base, client.annotate_many(reqs, fallbacks)):
        tup = tuples.get(r.frame_index)
        text = res.text
        if tup is not None:
            text += f" Operating element={tup[0]}, direction={tup[1]}"
        failed = res.fallback or seg_fallback.get(r.frame_index, False)
        out.append(an.AnnotationRecord(r.frame_index, r.phase, text, *(tup if tup else (None, None)),
                                       fallback=failed))
    return out
