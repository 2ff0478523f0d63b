"""Pretext tasks: view augmentation, batch assembly, and the three losses.

Feature-matching tasks (contrastive pairs and cross-correlation matching)
consume two augmented views per clip; the predictive task shuffles clip
segments and classifies which permutation was applied. All losses are built
from the autodiff primitives so their gradients come from the tape, and all
use max-subtraction where a log-sum-exp appears.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model
from .autodiff import Tensor
from .data import Clip, resample_frames
from .errors import ContractError

ACOP_SEGMENTS = 3

# Additive mask that zeroes self-similarity terms after exp(); finite so it
# survives tensor validation, small enough that exp underflows to exactly 0.
_NEG_MASK = -1e30

# Row-norm guard for the contrastive loss. ReLU-terminated encoders can emit
# exactly-zero rows; the guard bounds the normalization gradient at 1/eps.
_NORM_EPS = 1e-6


@dataclass(frozen=True)
class AugmentPolicy:
    """Stochastic view policy: time-crop fraction, additive noise, band dropout."""

    crop_fraction: float = 0.7
    noise_std: float = 0.05
    band_mask_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ContractError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if self.noise_std < 0:
            raise ContractError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.band_mask_prob <= 1.0:
            raise ContractError(f"band_mask_prob must be in [0, 1], got {self.band_mask_prob}")


def augment(clip: Clip, policy: AugmentPolicy, rng: np.random.Generator) -> Tensor:
    """One flattened view: crop + nearest-frame resample, noise, band dropout.

    Pure in (clip, policy, rng state); the identity policy (1.0, 0, 0)
    returns the original features bit-exactly.
    """
    feats = clip.features.data
    frames, bands = feats.shape
    if frames < 2:
        raise ContractError("augment needs a clip with >= 2 frames")
    crop_len = max(1, int(round(policy.crop_fraction * frames)))
    if crop_len >= frames:
        crop = feats
    else:
        start = int(rng.integers(0, frames - crop_len + 1))
        crop = feats[start:start + crop_len]
    view = resample_frames(crop, frames)
    if policy.noise_std > 0:
        view = view + rng.normal(0.0, policy.noise_std, size=view.shape)
    else:
        view = view.copy()
    if policy.band_mask_prob > 0:
        masked = rng.uniform(size=bands) < policy.band_mask_prob
        view[:, masked] = 0.0
    return Tensor(view.reshape(-1))


def two_view_batch(clips: list[Clip], policy: AugmentPolicy, rng: np.random.Generator) -> Tensor:
    """Interleaved view matrix: rows (2i, 2i+1) are the two views of clip i."""
    rows = []
    for clip in clips:
        rows.append(augment(clip, policy, rng).data)
        rows.append(augment(clip, policy, rng).data)
    return Tensor(np.stack(rows))


def nt_xent_loss(z: Tensor, tau: float) -> Tensor:
    """Contrastive pair loss over an interleaved 2n x d embedding matrix.

    Rows are row-normalized; each anchor's positive is its pair partner and
    every other row is a negative. Returns the mean over all 2n anchors.
    """
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    two_n = z.shape[0]
    if two_n % 2 != 0 or two_n < 4:
        raise ContractError(f"need an even number >= 4 of rows (pairs), got {two_n}")
    zn = ad.l2_normalize_rows(z, eps=_NORM_EPS)
    sims = ad.div(ad.matmul(zn, ad.transpose(zn)), tau)
    mask = Tensor(np.diag(np.full(two_n, _NEG_MASK)))
    masked = ad.add(sims, mask)
    mx = ad.detached_rowmax(masked)
    lse = ad.add(ad.log(ad.sum_axis(ad.exp(ad.sub(masked, mx)), axis=1)), mx)
    even = ad.gather_rows(zn, np.arange(0, two_n, 2))
    odd = ad.gather_rows(zn, np.arange(1, two_n, 2))
    pos = ad.sum_axis(ad.mul(even, odd), axis=1)
    pos_per_anchor = ad.gather_rows(pos, np.repeat(np.arange(two_n // 2), 2))
    return ad.mean_all(ad.sub(lse, ad.div(pos_per_anchor, tau)))


def barlow_twins_loss(za: Tensor, zb: Tensor, lam: float, eps: float = 1e-9) -> Tensor:
    """Cross-correlation redundancy loss between two view embeddings.

    Columns are standardized to mean 0 / std 1 (population std, guarded by
    eps); the n x d inputs give C = (1/n) za_std^T zb_std and the loss
    sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2.
    """
    if za.shape != zb.shape or za.data.ndim != 2:
        raise ContractError(f"view embeddings must share an (n, d) shape, got {za.shape} and {zb.shape}")
    n, d = za.shape
    if n < 2:
        raise ContractError(f"need >= 2 samples to standardize columns, got {n}")
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")

    def standardize(z):
        mu = ad.div(ad.sum_axis(z, axis=0), float(n))
        centered = ad.sub(z, mu)
        var = ad.div(ad.sum_axis(ad.mul(centered, centered), axis=0), float(n))
        return ad.div(centered, ad.sqrt(ad.maximum_const(var, eps * eps)))

    c = ad.div(ad.matmul(ad.transpose(standardize(za)), standardize(zb)), float(n))
    eye = Tensor(np.eye(d))
    off_mask = Tensor(1.0 - np.eye(d))
    diag_err = ad.sub(eye, c)
    on_diag = ad.sum_all(ad.mul(ad.mul(diag_err, diag_err), eye))
    off_diag = ad.sum_all(ad.mul(ad.mul(c, c), off_mask))
    return ad.add(on_diag, ad.mul(off_diag, lam))


def canonical_permutations(m: int) -> tuple[tuple[int, ...], ...]:
    """All permutations of range(m) in lexicographic order; index = class label."""
    return tuple(itertools.permutations(range(m)))


@dataclass
class AcopBatch:
    """Segment rows grouped per clip in presented order, plus permutation labels."""

    segments: Tensor  # (n*m, frames*bands)
    labels: np.ndarray  # (n,) ints in [0, n_perms)
    m: int
    n_perms: int


def acop_make_batch(
    clips: list[Clip],
    m: int,
    perm_table: tuple[tuple[int, ...], ...],
    rng: np.random.Generator,
) -> AcopBatch:
    """Split each clip into m equal segments and present them shuffled.

    The permutation index is sampled uniformly and becomes the class label.
    Segments are nearest-frame resampled back to the clip's frame count so
    the shared backbone sees its usual input width.
    """
    if m < 2:
        raise ContractError(f"need m >= 2 segments, got {m}")
    if not clips:
        raise ContractError("acop_make_batch needs at least one clip")
    n_perms = len(perm_table)
    rows = []
    labels = []
    for clip in clips:
        frames = clip.frames
        seg_len = frames // m
        if seg_len < 2:
            raise ContractError(f"clip {clip.clip_id} too short for {m} segments ({frames} frames)")
        feats = clip.features.data
        segs = [feats[i * seg_len:(i + 1) * seg_len] for i in range(m)]
        p = int(rng.integers(0, n_perms))
        labels.append(p)
        for j in perm_table[p]:
            rows.append(resample_frames(segs[j], frames).reshape(-1))
    return AcopBatch(
        segments=Tensor(np.stack(rows)),
        labels=np.array(labels, dtype=np.int64),
        m=m,
        n_perms=n_perms,
    )


def acop_loss(params: model.ParamTree, batch: AcopBatch) -> Tensor:
    """Softmax cross-entropy of the order classifier over shared-backbone features."""
    emb = model.encode(params, batch.segments)
    n = len(batch.labels)
    embed_dim = emb.shape[1]
    concat = ad.reshape(emb, (n, batch.m * embed_dim))
    logits = model.acop_logits(params, concat)
    mx = ad.detached_rowmax(logits)
    lse = ad.add(ad.log(ad.sum_axis(ad.exp(ad.sub(logits, mx)), axis=1)), mx)
    onehot = np.zeros((n, batch.n_perms))
    onehot[np.arange(n), batch.labels] = 1.0
    picked = ad.sum_axis(ad.mul(logits, Tensor(onehot)), axis=1)
    return ad.mean_all(ad.sub(lse, picked))
