"""Desk-scale tokenizers: a patch-grid vector quantizer for images and a
closed-vocabulary whitespace tokenizer for reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class VocabError(ValueError):
    """Raised for words outside the closed report vocabulary."""


# reserved special tokens, ids 0..6 in every vocab
PAD_TOKEN = "<pad>"
REPORT_START, REPORT_STOP = "<start-report>", "<stop-report>"
IMAGE_START, IMAGE_STOP = "<start-image>", "<stop-image>"
PRIOR_START, PRIOR_STOP = "<start-prior>", "<stop-prior>"
RESERVED_TOKENS = (PAD_TOKEN, REPORT_START, REPORT_STOP,
                   IMAGE_START, IMAGE_STOP, PRIOR_START, PRIOR_STOP)


@dataclass(frozen=True)
class Codebook:
    """K x D matrix of quantization vectors for image patches."""

    entries: np.ndarray

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2:
            raise ValueError(f"codebook entries must be 2-d, got shape {e.shape}")
        if not np.isfinite(e).all():
            raise ValueError("codebook entries must be finite")
        if len(np.unique(e, axis=0)) != e.shape[0]:
            raise ValueError("codebook entries must be pairwise distinct")

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def D(self) -> int:
        return self.entries.shape[1]


def validate_image(img: np.ndarray) -> None:
    if img.ndim != 2:
        raise ValueError(f"image must be 2-d, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image pixels must lie in [0, 1]")


def image_to_patches(img: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping row-major patches, each flattened to length patch^2."""
    h, w = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    return (img.reshape(h // patch, patch, w // patch, patch)
               .transpose(0, 2, 1, 3)
               .reshape(-1, patch * patch))


def patches_to_image(patches: np.ndarray, patch: int, h: int, w: int) -> np.ndarray:
    return (patches.reshape(h // patch, w // patch, patch, patch)
                   .transpose(0, 2, 1, 3)
                   .reshape(h, w))


def vq_encode(img: np.ndarray, cb: Codebook, patch: int) -> np.ndarray:
    """Map each patch to its nearest codebook entry (L2, ties to lower index)."""
    validate_image(img)
    if cb.D != patch * patch:
        raise ValueError(f"codebook dimension {cb.D} != patch^2 = {patch * patch}")
    p = image_to_patches(img, patch)
    # |p - e|^2 = |p|^2 - 2 p.e + |e|^2; |p|^2 constant per patch
    d2 = (cb.entries * cb.entries).sum(axis=1)[None, :] - 2.0 * (p @ cb.entries.T)
    return d2.argmin(axis=1)


def vq_decode(tokens: np.ndarray, cb: Codebook, patch: int, h: int, w: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    expect = (h // patch) * (w // patch)
    if tokens.shape != (expect,):
        raise ValueError(f"expected {expect} tokens for {h}x{w}/patch {patch}, got {tokens.shape}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cb.K:
        raise ValueError(f"token id out of range for codebook of size {cb.K}")
    img = patches_to_image(cb.entries[tokens], patch, h, w)
    return np.clip(img, 0.0, 1.0)


def fit_codebook(images: list[np.ndarray], K: int, patch: int, seed: int,
                 max_iter: int = 50) -> Codebook:
    """Seeded k-means (k-means++ init) over all training patches."""
    patches = np.concatenate([image_to_patches(img, patch) for img in images], axis=0)
    if len(np.unique(patches, axis=0)) < K:
        raise ValueError(f"need at least {K} distinct patches to fit a codebook of size {K}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((K, patches.shape[1]))
    centers[0] = patches[rng.integers(len(patches))]
    d2 = ((patches - centers[0]) ** 2).sum(axis=1)
    for i in range(1, K):
        probs = d2 / d2.sum()
        centers[i] = patches[rng.choice(len(patches), p=probs)]
        d2 = np.minimum(d2, ((patches - centers[i]) ** 2).sum(axis=1))

    sq = (patches * patches).sum(axis=1)
    for _ in range(max_iter):
        dist = (centers * centers).sum(axis=1)[None, :] - 2.0 * (patches @ centers.T)
        assign = dist.argmin(axis=1)
        new_centers = centers.copy()
        # deterministic refill order for empty clusters: farthest points first
        far_order = iter(np.argsort(-(dist[np.arange(len(patches)), assign] + sq)))
        for k in range(K):
            members = patches[assign == k]
            if len(members):
                new_centers[k] = members.mean(axis=0)
            else:
                new_centers[k] = patches[next(far_order)]
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    return Codebook(entries=centers)


@dataclass(frozen=True)
class ReportVocab:
    """Closed word vocabulary with reserved pad/start/stop ids 0..6."""

    tokens: tuple[str, ...]  # full id->string table, reserved first

    def __post_init__(self):
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError("vocab must start with the reserved special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")

    @classmethod
    def from_words(cls, words: list[str]) -> "ReportVocab":
        return cls(tokens=RESERVED_TOKENS + tuple(sorted(set(words))))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def word_ids(self) -> range:
        return range(len(RESERVED_TOKENS), len(self.tokens))

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise VocabError(f"word not in vocabulary: {token!r}")

    def encode(self, report: str) -> list[int]:
        lut = {t: i for i, t in enumerate(self.tokens)}
        ids = []
        for word in report.split():
            if word not in lut or lut[word] < len(RESERVED_TOKENS):
                raise VocabError(f"word not in vocabulary: {word!r}")
            ids.append(lut[word])
        return ids

    def decode(self, ids: list[int]) -> str:
        words = []
        for i in ids:
            if not (len(RESERVED_TOKENS) <= i < len(self.tokens)):
                raise VocabError(f"id {i} is not a word id")
            words.append(self.tokens[i])
        return " ".join(words)


def save_vocab(vocab: ReportVocab, path) -> None:
    """One token per line; line number = id."""
    with open(path, "w") as f:
        for t in vocab.tokens:
            f.write(t + "\n")


def load_vocab(path) -> ReportVocab:
    with open(path) as f:
        tokens = tuple(line.rstrip("\n") for line in f if line.strip())
    return ReportVocab(tokens=tokens)
