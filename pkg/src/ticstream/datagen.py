"""Synthetic timestamped image-text pair streams with controlled drift.

Each class has a unit latent prototype. Drifting classes live in one fixed
2-plane of latent space and rotate by a constant angle per step; static
classes never move. A record samples a latent point around its class
prototype (the perturbation is shared between modalities, so the paired
text stays retrievable), then maps it through fixed seeded mixing matrices
into image and text feature space. Eval splits are drawn before the
training split at every step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .model import FormatError
from .numerics import Rng

STREAM_MAGIC = b"TICD"
STREAM_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    num_steps: int
    per_step_train_size: int
    per_step_eval_size: int
    image_dim: int
    text_dim: int
    latent_dim: int
    class_birth_schedule: tuple[tuple[int, int], ...]
    drift_angle: float
    noise_sigma: float
    static_class_count: int
    seed: int

    def validate(self) -> None:
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if min(self.per_step_train_size, self.per_step_eval_size) < 1:
            raise ConfigError("split sizes must be >= 1")
        if min(self.image_dim, self.text_dim, self.latent_dim) < 1:
            raise ConfigError("dims must be >= 1")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2 for the drift plane")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not (0 <= self.drift_angle < np.pi):
            raise ConfigError("drift_angle must be in [0, pi)")
        for step, count in self.class_birth_schedule:
            if not (1 <= step <= self.num_steps) or count < 1:
                raise ConfigError(f"bad birth schedule entry ({step}, {count})")
        if self.static_class_count + sum(c for _, c in self.class_birth_schedule) < 1:
            raise ConfigError("at least one class required")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_birth_schedule"] = [list(e) for e in self.class_birth_schedule]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "StreamConfig":
        d = dict(d)
        d["class_birth_schedule"] = tuple(tuple(e) for e in d.get("class_birth_schedule", ()))
        return cls(**d)


@dataclass(frozen=True)
class PairRecord:
    image_vec: np.ndarray
    text_vec: np.ndarray
    class_id: int
    timestep: int


@dataclass
class RecordBatch:
    """Column-wise store for a set of pair records."""

    class_ids: np.ndarray  # (n,) int64
    images: np.ndarray  # (n, image_dim)
    texts: np.ndarray  # (n, text_dim)
    timesteps: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.class_ids)

    def take(self, idx) -> "RecordBatch":
        return RecordBatch(self.class_ids[idx], self.images[idx], self.texts[idx], self.timesteps[idx])

    def record(self, i: int) -> PairRecord:
        return PairRecord(self.images[i], self.texts[i], int(self.class_ids[i]), int(self.timesteps[i]))

    @classmethod
    def concat(cls, batches) -> "RecordBatch":
        return cls(
            np.concatenate([b.class_ids for b in batches]),
            np.concatenate([b.images for b in batches]),
            np.concatenate([b.texts for b in batches]),
            np.concatenate([b.timesteps for b in batches]),
        )

    @classmethod
    def empty(cls, image_dim: int, text_dim: int) -> "RecordBatch":
        return cls(
            np.zeros(0, dtype=np.int64),
            np.zeros((0, image_dim)),
            np.zeros((0, text_dim)),
            np.zeros(0, dtype=np.int64),
        )


@dataclass
class TimestepDataset:
    timestep: int
    train: RecordBatch
    eval_retrieval: RecordBatch
    eval_classification: RecordBatch
    prototype_ids: np.ndarray  # (c,) int64, classes alive at this step
    prototypes: np.ndarray  # (c, text_dim) canonical text vectors


class _ClassTable:
    """Class ids, birth steps, and latent prototypes for one stream."""

    def __init__(self, cfg: StreamConfig):
        rng = Rng(cfg.seed, 0).split("classes")
        self.static_ids = list(range(cfg.static_class_count))
        self.birth_step: dict[int, int] = {c: 1 for c in self.static_ids}
        self.is_static: dict[int, bool] = {c: True for c in self.static_ids}
        next_id = cfg.static_class_count
        for step, count in sorted(cfg.class_birth_schedule):
            for _ in range(count):
                self.birth_step[next_id] = step
                self.is_static[next_id] = False
                next_id += 1
        # drift plane: first two axes of a seeded random orthonormal frame
        g = rng.split("plane").normal((cfg.latent_dim, 2))
        q, _ = np.linalg.qr(g)
        self.plane = q  # (latent_dim, 2) orthonormal
        self.base_latent: dict[int, np.ndarray] = {}
        self.phase: dict[int, float] = {}
        for c in sorted(self.birth_step):
            sub = rng.split("proto", c)
            if self.is_static[c]:
                z = sub.normal(cfg.latent_dim)
                self.base_latent[c] = z / np.linalg.norm(z)
            else:
                self.phase[c] = float(sub.uniform(1)[0] * 2 * np.pi)
        self.drift_angle = cfg.drift_angle

    def alive(self, t: int) -> list[int]:
        return sorted(c for c, b in self.birth_step.items() if b <= t)

    def latent(self, c: int, t: int) -> np.ndarray:
        if self.is_static[c]:
            return self.base_latent[c]
        angle = self.phase[c] + (t - self.birth_step[c]) * self.drift_angle
        return self.plane[:, 0] * np.cos(angle) + self.plane[:, 1] * np.sin(angle)


def _mixing_maps(cfg: StreamConfig):
    rng = Rng(cfg.seed, 0).split("mixing")
    a = rng.split("image").normal((cfg.image_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    b = rng.split("text").normal((cfg.text_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    return a, b


def _draw_batch(cfg, table, a, b, t, n, rng) -> RecordBatch:
    alive = table.alive(t)
    picks = np.floor(rng.split("cls").uniform(n) * len(alive)).astype(np.int64)
    class_ids = np.asarray([alive[i] for i in picks], dtype=np.int64)
    protos = np.stack([table.latent(c, t) for c in class_ids]) if n else np.zeros((0, cfg.latent_dim))
    # latent perturbation is shared between modalities (keeps the paired
    # text retrievable); ambient noise is independent per modality
    eps = rng.split("noise").normal((n, cfg.latent_dim))
    latents = protos + cfg.noise_sigma * eps
    images = latents @ a.T + cfg.noise_sigma * rng.split("img_noise").normal((n, cfg.image_dim))
    texts = latents @ b.T + cfg.noise_sigma * rng.split("txt_noise").normal((n, cfg.text_dim))
    return RecordBatch(
        class_ids=class_ids,
        images=images,
        texts=texts,
        timesteps=np.full(n, t, dtype=np.int64),
    )


def generate_stream(cfg: StreamConfig) -> list[TimestepDataset]:
    """Deterministic stream of per-step datasets; pure function of cfg."""
    cfg.validate()
    table = _ClassTable(cfg)
    a, b = _mixing_maps(cfg)
    root = Rng(cfg.seed, 0)
    datasets = []
    for t in range(1, cfg.num_steps + 1):
        step_rng = root.split("step", t)
        # eval splits first, then training data
        eval_r = _draw_batch(cfg, table, a, b, t, cfg.per_step_eval_size, step_rng.split("eval_retrieval"))
        eval_c = _draw_batch(cfg, table, a, b, t, cfg.per_step_eval_size, step_rng.split("eval_classification"))
        train = _draw_batch(cfg, table, a, b, t, cfg.per_step_train_size, step_rng.split("train"))
        alive = table.alive(t)
        protos = np.stack([table.latent(c, t) for c in alive]) @ b.T
        datasets.append(
            TimestepDataset(
                timestep=t,
                train=train,
                eval_retrieval=eval_r,
                eval_classification=eval_c,
                prototype_ids=np.asarray(alive, dtype=np.int64),
                prototypes=protos,
            )
        )
    return datasets


def aggregate_early_steps(datasets: list[TimestepDataset], merge_first_k: int) -> list[TimestepDataset]:
    """Merge the first k steps into one dataset stamped with timestep k."""
    t_total = len(datasets)
    if not (1 <= merge_first_k <= t_total):
        raise ConfigError(f"merge_first_k={merge_first_k} out of range for T={t_total}")
    if merge_first_k == 1:
        return list(datasets)
    head = datasets[:merge_first_k]
    merged = TimestepDataset(
        timestep=merge_first_k,
        train=RecordBatch.concat([d.train for d in head]),
        eval_retrieval=RecordBatch.concat([d.eval_retrieval for d in head]),
        eval_classification=RecordBatch.concat([d.eval_classification for d in head]),
        prototype_ids=head[-1].prototype_ids,
        prototypes=head[-1].prototypes,
    )
    return [merged] + list(datasets[merge_first_k:])


# ---------------------------------------------------------------------------
# On-disk format: magic "TICD", version u32, timestep u32, image_dim u32,
# text_dim u32; three record sections (train, eval_retrieval,
# eval_classification) each "count u32, then (class_id u32, image f64s,
# text f64s) per record"; prototype section "count u32, then (class_id u32,
# text_dim f64s)". Little-endian throughout.
# ---------------------------------------------------------------------------


def write_timestep_file(ds: TimestepDataset, path) -> None:
    image_dim = ds.train.images.shape[1]
    text_dim = ds.train.texts.shape[1]
    chunks = [STREAM_MAGIC, struct.pack("<IIII", STREAM_VERSION, ds.timestep, image_dim, text_dim)]
    for batch in (ds.train, ds.eval_retrieval, ds.eval_classification):
        chunks.append(struct.pack("<I", len(batch)))
        for i in range(len(batch)):
            chunks.append(struct.pack("<I", int(batch.class_ids[i])))
            chunks.append(batch.images[i].astype("<f8").tobytes())
            chunks.append(batch.texts[i].astype("<f8").tobytes())
    chunks.append(struct.pack("<I", len(ds.prototype_ids)))
    for i in range(len(ds.prototype_ids)):
        chunks.append(struct.pack("<I", int(ds.prototype_ids[i])))
        chunks.append(ds.prototypes[i].astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_timestep_file(path) -> TimestepDataset:
    from .model import _Cursor  # shared binary cursor

    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf)
    if cur.take(4) != STREAM_MAGIC:
        raise FormatError("bad magic", 0)
    version, timestep, image_dim, text_dim = struct.unpack("<IIII", cur.take(16))
    if version != STREAM_VERSION:
        raise FormatError(f"unsupported stream version {version}", 4)

    def read_section() -> RecordBatch:
        n = cur.u32()
        class_ids = np.zeros(n, dtype=np.int64)
        images = np.zeros((n, image_dim))
        texts = np.zeros((n, text_dim))
        for i in range(n):
            class_ids[i] = cur.u32()
            images[i] = cur.f64s(image_dim)
            texts[i] = cur.f64s(text_dim)
        return RecordBatch(class_ids, images, texts, np.full(n, timestep, dtype=np.int64))

    train = read_section()
    eval_r = read_section()
    eval_c = read_section()
    pc = cur.u32()
    proto_ids = np.zeros(pc, dtype=np.int64)
    protos = np.zeros((pc, text_dim))
    for i in range(pc):
        proto_ids[i] = cur.u32()
        protos[i] = cur.f64s(text_dim)
    if cur.pos != len(buf):
        raise FormatError("trailing bytes", cur.pos)
    return TimestepDataset(timestep, train, eval_r, eval_c, proto_ids, protos)


def write_stream(datasets: list[TimestepDataset], cfg: StreamConfig, out_dir) -> Path:
    """Write per-step files plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for ds in datasets:
        p = out / f"step_{ds.timestep:03d}.ticd"
        write_timestep_file(ds, p)
        paths.append(p.name)
    manifest = {"num_steps": len(datasets), "config": cfg.to_json(), "files": paths}
    mpath = out / "stream_manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2))
    return mpath


def load_stream(data_dir) -> tuple[list[TimestepDataset], StreamConfig]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "stream_manifest.json").read_text())
    cfg = StreamConfig.from_json(manifest["config"])
    datasets = [read_timestep_file(data_dir / name) for name in manifest["files"]]
    return datasets, cfg
