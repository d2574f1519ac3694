"""Action discretization, tokenization, chunked samples and on-disk formats.

On-disk layout of a collected episode directory::

    <episode>/trajectory.jsonl    one frame per line: {t, obs, action, state, clean_gripper, injected, executed?}
    <episode>/meta.json           {task, seed, success, teacher_id, stats, final_state}
    <episode>/annotations.t<N>.jsonl   {t, phase, description, element?, direction?}
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import sim
from .annotator import AnnotationRecord, DIRECTIONS, ELEMENTS, GRANULARITIES, make_taxonomy
from .errors import DataError, InputError
from .sim import ActionContinuous, Observation, TaskSpec, WorldState
from .teacher import Frame, Trajectory

BINS = 256
ACTION_DIM = 7
NULL_ID = 0
UNK_ID = 1
NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r" ?[A-Za-z]+| ?\d+| ?[^\sA-Za-z\d]|\s+")


# --------------------------------------------------------------------------- discretization

@dataclass(frozen=True)
class DiscretizationSpec:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    bins: int = BINS

    def __post_init__(self):
        if len(self.lo) != ACTION_DIM or len(self.hi) != ACTION_DIM:
            raise InputError("discretization bounds must have 7 entries")
        if not all(np.isfinite(self.lo)) or not all(np.isfinite(self.hi)):
            raise InputError("discretization bounds must be finite")
        if any(lo >= hi for lo, hi in zip(self.lo, self.hi)):
            raise InputError(f"need lo < hi per dimension: {self.lo} {self.hi}")

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "bins": self.bins}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscretizationSpec":
        return cls(tuple(float(v) for v in d["lo"]), tuple(float(v) for v in d["hi"]), int(d["bins"]))

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def fit_spec(actions: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0, floor: float = 1e-3) -> DiscretizationSpec:
    """Symmetrized percentile bounds; the gripper channel is fixed to (-1, 1)."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, ACTION_DIM)
    p_lo = np.percentile(actions[:, :6], lo_pct, axis=0)
    p_hi = np.percentile(actions[:, :6], hi_pct, axis=0)
    b = np.maximum(np.maximum(np.abs(p_lo), np.abs(p_hi)), floor)
    lo = tuple(float(-v) for v in b) + (-1.0,)
    hi = tuple(float(v) for v in b) + (1.0,)
    return DiscretizationSpec(lo, hi)


def discretize(a, spec: DiscretizationSpec) -> np.ndarray:
    """bin_j = clamp(floor((a_j - lo_j) / (hi_j - lo_j) * bins), 0, bins - 1); works on (..., 7)."""
    if isinstance(a, ActionContinuous):
        a = a.as_array()
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InputError("cannot discretize non-finite action")
    lo, hi = np.asarray(spec.lo), np.asarray(spec.hi)
    b = np.floor((a - lo) / (hi - lo) * spec.bins)
    return np.clip(b, 0, spec.bins - 1).astype(np.int64)


def undiscretize(bins, spec: DiscretizationSpec) -> np.ndarray:
    lo, hi = np.asarray(spec.lo), np.asarray(spec.hi)
    return lo + (np.asarray(bins, dtype=np.float64) + 0.5) * (hi - lo) / spec.bins


# --------------------------------------------------------------------------- text

def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:2] != (NULL_TOKEN, UNK_TOKEN):
            raise InputError("vocabulary must start with the NULL and UNK tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self._index.get(t, UNK_ID) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i not in (NULL_ID,))

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(list(self.tokens)).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]))


def base_corpus() -> list[str]:
    """Instructions, phase words of every taxonomy, and element/direction words."""
    texts = list(sim.INSTRUCTIONS.values())
    for n in GRANULARITIES:
        texts += [f" {lab}" for lab in make_taxonomy(n).labels]
    texts += [f" {w}" for w in ELEMENTS + DIRECTIONS]
    return texts


def build_vocab(texts: Iterable[str]) -> Vocabulary:
    toks = set()
    for t in list(texts) + base_corpus():
        toks.update(tokenize(t))
    return Vocabulary((NULL_TOKEN, UNK_TOKEN) + tuple(sorted(toks)))


# --------------------------------------------------------------------------- samples

@dataclass
class ChunkedSample:
    obs_features: np.ndarray
    instruction_tokens: list[int]
    description_tokens: list[int]
    targets: np.ndarray  # (K, 7) int bins
    valid_mask: np.ndarray  # (K,) 0/1
    episode_id: int = 0
    frame_index: int = 0
    task_id: str = ""


def make_chunks(traj: Trajectory, ann: Sequence[AnnotationRecord], K: int, spec: DiscretizationSpec,
                vocab: Vocabulary, episode_id: int = 0) -> list[ChunkedSample]:
    """One sample per frame with targets at offsets 0..K-1, masked past the episode end."""
    n = len(traj.frames)
    if len(ann) != n:
        raise DataError(f"annotation count {len(ann)} does not match frame count {n}")
    if K < 1:
        raise InputError("K must be >= 1")
    bins = discretize(np.stack([f.action.as_array() for f in traj.frames]), spec)
    instr = vocab.encode(traj.task.instruction)
    out = []
    for t, (fr, rec) in enumerate(zip(traj.frames, ann)):
        if rec.frame_index != t:
            raise DataError(f"annotation frame index {rec.frame_index} at position {t}")
        targets = np.zeros((K, ACTION_DIM), dtype=np.int64)
        valid = np.zeros(K, dtype=np.int64)
        m = min(K, n - t)
        targets[:m] = bins[t : t + m]
        valid[:m] = 1
        out.append(ChunkedSample(fr.obs.vector, list(instr), vocab.encode(rec.description), targets, valid,
                                 episode_id, t, traj.task.task_id))
    return out


def split(samples: Sequence[ChunkedSample], val_fraction: float = 0.1, seed: int = 0):
    """Episode-granular train/val split; deterministic per seed."""
    episodes = sorted({s.episode_id for s in samples})
    if len(episodes) < 10:
        raise DataError(f"need at least 10 episodes to split, got {len(episodes)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(episodes))
    n_val = max(1, int(round(val_fraction * len(episodes))))
    val_eps = {episodes[i] for i in order[:n_val]}
    train = [s for s in samples if s.episode_id not in val_eps]
    val = [s for s in samples if s.episode_id in val_eps]
    return train, val


# --------------------------------------------------------------------------- persistence

def write_trajectory(directory: str | Path, traj: Trajectory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "trajectory.jsonl", "w") as fh:
        for t, f in enumerate(traj.frames):
            row = {
                "t": t,
                "obs": f.obs.vector.tolist(),
                "action": f.action.as_array().tolist(),
                "state": f.state.to_dict(),
                "clean_gripper": f.clean_gripper,
                "injected": f.injected,
            }
            if f.executed is not None:
                row["executed"] = f.executed.as_array().tolist()
            fh.write(json.dumps(row) + "\n")
    meta = {
        "task": traj.task.to_dict(),
        "seed": traj.seed,
        "success": traj.success,
        "teacher_id": traj.teacher_id,
        "stats": traj.stats,
        "final_state": traj.final_state.to_dict() if traj.final_state is not None else None,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    return d


def read_trajectory(directory: str | Path) -> Trajectory:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        lines = (d / "trajectory.jsonl").read_text().splitlines()
    except FileNotFoundError as e:
        raise DataError(f"incomplete episode directory {d}: {e}") from None
    frames = []
    for line in lines:
        r = json.loads(line)
        frames.append(Frame(Observation.from_vector(r["obs"]), ActionContinuous.from_array(r["action"]),
                            WorldState.from_dict(r["state"]), float(r.get("clean_gripper", 0.0)),
                            bool(r.get("injected", False)),
                            ActionContinuous.from_array(r["executed"]) if "executed" in r else None))
    final = WorldState.from_dict(meta["final_state"]) if meta.get("final_state") else None
    return Trajectory(TaskSpec.from_dict(meta["task"]), frames, bool(meta["success"]), int(meta["seed"]),
                      meta.get("teacher_id", ""), final, meta.get("stats", {}))


def annotation_path(episode_dir: str | Path, granularity: int) -> Path:
    return Path(episode_dir) / f"annotations.t{granularity}.jsonl"


def write_annotations(path: str | Path, records: Sequence[AnnotationRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_annotations(path: str | Path) -> list[AnnotationRecord]:
    try:
        return [AnnotationRecord.from_dict(json.loads(l)) for l in Path(path).read_text().splitlines()]
    except FileNotFoundError:
        raise DataError(f"missing annotation file {path}") from None


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


@dataclass
class DatasetManifest:
    episodes: list[str]
    spec: DiscretizationSpec
    vocab_hash: str
    K: int
    taxonomy: int
    file_hashes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"episodes": self.episodes, "spec": self.spec.to_dict(), "spec_hash": self.spec.hash,
                "vocab_hash": self.vocab_hash, "K": self.K, "taxonomy": self.taxonomy,
                "file_hashes": self.file_hashes}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        spec = DiscretizationSpec.from_dict(d["spec"])
        if d.get("spec_hash") not in (None, spec.hash):
            raise DataError("dataset manifest spec hash does not match its bounds")
        return cls(list(d["episodes"]), spec, d["vocab_hash"], int(d["K"]), int(d["taxonomy"]),
                   d.get("file_hashes", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise DataError(f"missing dataset manifest {path}") from None


@dataclass
class Dataset:
    """In-memory training corpus: samples plus the discretization and vocabulary that produced them."""

    samples: list[ChunkedSample]
    spec: DiscretizationSpec
    vocab: Vocabulary
    K: int

    @property
    def n_episodes(self) -> int:
        return len({s.episode_id for s in self.samples})


def build_dataset(trajs: Sequence[Trajectory], anns: Sequence[Sequence[AnnotationRecord]], K: int = 5,
                  spec: DiscretizationSpec | None = None, vocab: Vocabulary | None = None) -> Dataset:
    if len(trajs) != len(anns):
        raise DataError("one annotation list per trajectory required")
    bad = [tr.seed for tr in trajs if not tr.success]
    if bad:
        raise DataError(f"dataset may only contain successful episodes; failed seeds {bad}")
    if spec is None:
        spec = fit_spec(np.concatenate([[f.action.as_array() for f in tr.frames] for tr in trajs]))
    if vocab is None:
        vocab = build_vocab([tr.task.instruction for tr in trajs] + [r.description for a in anns for r in a])
    samples = []
    for i, (tr, an) in enumerate(zip(trajs, anns)):
        samples += make_chunks(tr, an, K, spec, vocab, episode_id=i)
    return Dataset(samples, spec, vocab, K)
