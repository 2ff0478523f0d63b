"""Synthetic audio-like datasets and the non-iid client partitioner.

Clips are frame x band matrices of log-energy-like values. Each generator
family builds class identity from a different ingredient (band profile,
temporal envelope, or noise texture), which gives the downstream suite
heterogeneous tasks whose generators are disjoint from the pretext set's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError
from .seeding import rng_for

PRETEXT_NOISE_STD = 0.1


@dataclass
class Clip:
    """One synthetic clip: features[frames, bands], a class label, and an id."""

    features: Tensor
    label: int
    clip_id: int

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def bands(self) -> int:
        return self.features.shape[1]


@dataclass
class SynthDataset:
    clips: list[Clip]
    n_classes: int
    generator: dict[str, np.ndarray]
    split: str = "train"
    _by_id: dict[int, Clip] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {c.clip_id: c for c in self.clips}
        if len(self._by_id) != len(self.clips):
            raise ContractError("duplicate clip_ids in dataset")

    def __len__(self) -> int:
        return len(self.clips)

    def by_id(self, clip_id: int) -> Clip:
        return self._by_id[clip_id]

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    def feature_matrix(self) -> np.ndarray:
        """All clips flattened row-major into an (n, frames*bands) matrix."""
        return np.stack([c.features.data.reshape(-1) for c in self.clips])


def features_flat(clip: Clip) -> Tensor:
    """Row-major flattening of the clip's feature matrix."""
    return Tensor(clip.features.data.reshape(-1))


def resample_frames(features: np.ndarray, target_frames: int) -> np.ndarray:
    """Nearest-frame resampling along the time axis to a fixed frame count.

    Identity when the frame count already matches, so unaugmented clips pass
    through bit-exactly.
    """
    frames = features.shape[0]
    if frames == target_frames:
        return features
    idx = (np.arange(target_frames) * frames) // target_frames
    return features[idx]


def _band_profile(rng: np.random.Generator, bands: int) -> np.ndarray:
    """Smooth band-energy profile: mixture of two Gaussian bumps."""
    centers = rng.uniform(0, bands, size=2)
    widths = rng.uniform(bands / 12.0, bands / 5.0, size=2)
    amps = rng.uniform(0.7, 1.3, size=2)
    b = np.arange(bands, dtype=np.float64)
    prof = np.zeros(bands)
    for c, w, a in zip(centers, widths, amps):
        prof += a * np.exp(-0.5 * ((b - c) / w) ** 2)
    return prof


def _envelope(rng: np.random.Generator, frames: int) -> np.ndarray:
    """Periodic temporal envelope 1 + depth*sin(2*pi*freq*t/frames + phase)."""
    freq = rng.integers(1, 5)
    phase = rng.uniform(0, 2 * np.pi)
    depth = rng.uniform(0.3, 0.7)
    t = np.arange(frames, dtype=np.float64)
    return 1.0 + depth * np.sin(2 * np.pi * freq * t / frames + phase)


def synth_dataset(
    n_classes: int,
    n_per_class: int,
    frames: int,
    bands: int,
    seed: int,
    split: str = "train",
    id_offset: int = 0,
    noise_std: float = PRETEXT_NOISE_STD,
) -> SynthDataset:
    """Pretext-style generator: per-class band profile x temporal envelope + noise."""
    if min(n_classes, n_per_class, frames, bands) < 1:
        raise ContractError("n_classes, n_per_class, frames, bands must all be >= 1")
    gen_rng = rng_for(seed, "synth-generator")
    profiles = np.stack([_band_profile(gen_rng, bands) for _ in range(n_classes)])
    envelopes = np.stack([_envelope(gen_rng, frames) for _ in range(n_classes)])
    clip_rng = rng_for(seed, "synth-clips")
    clips = []
    cid = id_offset
    for c in range(n_classes):
        base = np.outer(envelopes[c], profiles[c])
        for _ in range(n_per_class):
            feats = base + clip_rng.normal(0.0, noise_std, size=(frames, bands))
            clips.append(Clip(features=Tensor(feats), label=c, clip_id=cid))
            cid += 1
    generator = {
        "kind": np.array([0.0]),  # 0 = profile-x-envelope mixture family
        "profiles": profiles,
        "envelopes": envelopes,
        "noise_std": np.array([noise_std]),
    }
    return SynthDataset(clips=clips, n_classes=n_classes, generator=generator, split=split)


def _texture_clip(rng, frames, bands, smooth, scale, base):
    noise = rng.normal(0.0, 1.0, size=(frames, bands))
    width = min(max(int(smooth), 1), bands)  # convolve("same") needs kernel <= signal
    kernel = np.ones(width) / width
    for t in range(frames):
        noise[t] = np.convolve(noise[t], kernel, mode="same")
    return base + scale * noise


def _make_task(
    kind: str,
    seed: int,
    n_classes: int,
    n_train: int,
    n_test: int,
    frames: int,
    bands: int,
) -> tuple[SynthDataset, SynthDataset]:
    gen_rng = rng_for(seed, f"task-{kind}-generator")
    if kind == "bandprofile":
        profiles = np.stack([_band_profile(gen_rng, bands) for _ in range(n_classes)])
        shared_env = _envelope(gen_rng, frames)
        generator = {"kind": np.array([1.0]), "profiles": profiles, "envelope": shared_env}
        noise_std = 0.35

        def make(rng, c):
            return np.outer(shared_env, profiles[c]) + rng.normal(0.0, noise_std, size=(frames, bands))

    elif kind == "temporal":
        shared_profile = _band_profile(gen_rng, bands)
        envelopes = np.stack([_envelope(gen_rng, frames) for _ in range(n_classes)])
        generator = {"kind": np.array([2.0]), "profile": shared_profile, "envelopes": envelopes}
        noise_std = 0.25

        def make(rng, c):
            return np.outer(envelopes[c], shared_profile) + rng.normal(0.0, noise_std, size=(frames, bands))

    elif kind == "texture":
        smooths = gen_rng.permutation(np.arange(1, n_classes + 1)) * 2
        scales = gen_rng.uniform(0.5, 1.0, size=n_classes)
        base = 0.3 * np.outer(_envelope(gen_rng, frames), _band_profile(gen_rng, bands))
        generator = {"kind": np.array([3.0]), "smooths": smooths.astype(float), "scales": scales}

        def make(rng, c):
            return _texture_clip(rng, frames, bands, smooths[c], scales[c], base)

    else:
        raise ContractError(f"unknown task kind {kind!r}")

    def build(split: str, n_each: int, id_offset: int) -> SynthDataset:
        rng = rng_for(seed, f"task-{kind}-{split}")
        clips = []
        cid = id_offset
        for c in range(n_classes):
            for _ in range(n_each):
                clips.append(Clip(features=Tensor(make(rng, c)), label=c, clip_id=cid))
                cid += 1
        return SynthDataset(clips=clips, n_classes=n_classes, generator=generator, split=split)

    train = build("train", n_train, 0)
    test = build("test", n_test, n_classes * n_train)
    return train, test


def downstream_suite(
    seed: int, frames: int = 32, bands: int = 16
) -> list[tuple[str, SynthDataset, SynthDataset]]:
    """Three retrieval tasks whose class identity lives in different ingredients."""
    tasks = []
    for kind in ("bandprofile", "temporal", "texture"):
        train, test = _make_task(kind, seed, n_classes=4, n_train=30, n_test=10, frames=frames, bands=bands)
        tasks.append((kind, train, test))
    return tasks


@dataclass
class Partition:
    """Disjoint clip-id shards, one per client; union covers the dataset."""

    shards: list[list[int]]

    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


def dirichlet_partition(dataset: SynthDataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """Class-wise Dirichlet split: per class, client proportions ~ Dir(alpha).

    Lower alpha concentrates each class on few clients (more heterogeneity).
    Empty shards are repaired by stealing one clip from the largest shard so
    every client holds data.
    """
    if n_clients < 1:
        raise ContractError(f"n_clients must be >= 1, got {n_clients}")
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    if len(dataset) < n_clients:
        raise ContractError(f"dataset of {len(dataset)} clips cannot cover {n_clients} clients")
    rng = rng_for(seed, "dirichlet-partition")
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    labels = dataset.labels()
    ids = np.array([c.clip_id for c in dataset.clips], dtype=np.int64)
    for c in range(dataset.n_classes):
        class_ids = ids[labels == c]
        if class_ids.size == 0:
            continue
        p = rng.dirichlet(np.full(n_clients, alpha))
        assign = rng.choice(n_clients, size=class_ids.size, p=p)
        for cid, client in zip(class_ids, assign):
            shards[int(client)].append(int(cid))
    # Repair: every shard must be non-empty.
    while True:
        empties = [i for i, s in enumerate(shards) if not s]
        if not empties:
            break
        donor = max(range(n_clients), key=lambda i: (len(shards[i]), -i))
        shards[empties[0]].append(shards[donor].pop())
    return Partition(shards=shards)


def label_entropy(labels: np.ndarray) -> float:
    """Shannon entropy (nats) of the label distribution; 0 for a single class."""
    if len(labels) == 0:
        return 0.0
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    q = counts / counts.sum()
    return float(-(q * np.log(q)).sum() + 0.0)  # +0.0 normalizes -0.0


def partition_label_entropies(dataset: SynthDataset, partition: Partition) -> list[float]:
    return [
        label_entropy(np.array([dataset.by_id(cid).label for cid in shard]))
        for shard in partition.shards
    ]
