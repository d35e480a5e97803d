"""Input sequence assembly: temporal token first, shuffled modality segments
with START/STOP framing, learnable padding for missing prior scans, cls last.

Also owns the unified token id space (text ids, then image codes, then
temporal buckets, then per-position pad-segment tokens, then cls) and the
positional-embedding schemes (text sinusoid, learned axial grid, global
sinusoid over absolute positions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, concat as t_concat, embedding_lookup
from .tokenizers import RESERVED_TOKENS

PAD_ID = 0
REPORT_START_ID, REPORT_STOP_ID = 1, 2
IMAGE_START_ID, IMAGE_STOP_ID = 3, 4
PRIOR_START_ID, PRIOR_STOP_ID = 5, 6

N_DELTA_BUCKETS = 9  # bucket 0 = no prior study

KIND_REPORT = "current_report"
KIND_CURRENT = "current_image"
KIND_PREVIOUS = "previous_image"
KIND_PAD = "previous_pad"

SCHEME_TEXT = "sinusoidal_text"
SCHEME_AXIAL = "axial_image"
SCHEME_PAD = "learned_pad"

MODE_TRAIN = "train"
MODE_INFER_REPORT = "infer_report"
MODE_INFER_IMAGE = "infer_image"


@dataclass(frozen=True)
class ToyGeometry:
    """Fixed toy dimensions for images, reports and labels."""

    image_size: int = 32
    patch: int = 4
    codebook_size: int = 64
    n_report_tokens: int = 36
    n_labels: int = 4

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image size must be divisible by patch")
        if self.grid * self.grid != self.n_image_tokens:
            raise ValueError("image token count must be a perfect square")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_image_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        # TT + report segment + two image-sized segments + cls
        return 1 + (self.n_report_tokens + 2) + 2 * (self.n_image_tokens + 2) + 1


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint id ranges of the unified vocabulary."""

    n_text: int
    geometry: ToyGeometry

    @property
    def image_offset(self) -> int:
        return self.n_text

    @property
    def tt_offset(self) -> int:
        return self.n_text + self.geometry.codebook_size

    @property
    def pad_offset(self) -> int:
        return self.tt_offset + N_DELTA_BUCKETS

    @property
    def cls_id(self) -> int:
        return self.pad_offset + self.geometry.n_image_tokens

    @property
    def total(self) -> int:
        return self.cls_id + 1

    def image_id(self, code: int) -> int:
        return self.image_offset + code

    def tt_id(self, bucket: int) -> int:
        return self.tt_offset + bucket

    @property
    def word_id_range(self) -> range:
        return range(len(RESERVED_TOKENS), self.n_text)

    @property
    def image_id_range(self) -> range:
        return range(self.image_offset, self.image_offset + self.geometry.codebook_size)

    def report_legal_ids(self) -> np.ndarray:
        """Ids a report inner slot may take during decoding."""
        ids = list(self.word_id_range) + [PAD_ID, REPORT_STOP_ID]
        return np.array(sorted(ids))

    def image_legal_ids(self) -> np.ndarray:
        return np.array(list(self.image_id_range))


def bucketize_delta(delta_days: float | None) -> int:
    """Log2-scale day buckets: none -> 0, <=1d -> 1, <=2d -> 2, ... >64d -> 8."""
    if delta_days is None:
        return 0
    if delta_days <= 0:
        raise ValueError(f"delta must be positive, got {delta_days}")
    return min(N_DELTA_BUCKETS - 1, 1 + max(0, math.ceil(math.log2(delta_days))))


@dataclass(frozen=True)
class PlacedSegment:
    kind: str
    scheme: str
    start: int
    length: int


@dataclass
class AssembledSequence:
    """Token ids plus per-position metadata for one model input."""

    ids: np.ndarray
    loss_mask: np.ndarray  # True where the token is scored as a next-token target
    segments: list[PlacedSegment]
    tt_bucket: int
    mode: str
    order: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.ids)

    def segment(self, kind: str) -> PlacedSegment:
        for s in self.segments:
            if s.kind == kind:
                return s
        raise KeyError(f"no segment of kind {kind!r}")

    @property
    def target_span(self) -> tuple[int, int]:
        """(start, length) of the generated segment for inference modes."""
        if self.mode == MODE_INFER_REPORT:
            s = self.segment(KIND_REPORT)
        elif self.mode == MODE_INFER_IMAGE:
            s = self.segment(KIND_CURRENT)
        else:
            raise ValueError("target_span is defined for inference modes only")
        return s.start, s.length


def _report_ids(word_ids, geom: ToyGeometry, vl: VocabLayout) -> np.ndarray:
    n_r = geom.n_report_tokens
    if word_ids is None:
        inner = [PAD_ID] * n_r  # placeholder slots, filled by the decoder
    else:
        word_ids = list(word_ids)
        if len(word_ids) > n_r:
            raise ValueError(f"report has {len(word_ids)} tokens, limit is {n_r}")
        for w in word_ids:
            if w not in vl.word_id_range:
                raise ValueError(f"report token id {w} outside the word range")
        inner = word_ids + [PAD_ID] * (n_r - len(word_ids))
    return np.array([REPORT_START_ID] + inner + [REPORT_STOP_ID])


def _image_ids(codes, kind: str, geom: ToyGeometry, vl: VocabLayout) -> np.ndarray:
    start, stop = ((IMAGE_START_ID, IMAGE_STOP_ID) if kind == KIND_CURRENT
                   else (PRIOR_START_ID, PRIOR_STOP_ID))
    if codes is None:
        inner = [PAD_ID] * geom.n_image_tokens  # placeholder slots
    else:
        codes = np.asarray(codes)
        if codes.shape != (geom.n_image_tokens,):
            raise ValueError(f"expected {geom.n_image_tokens} image tokens, got {codes.shape}")
        if codes.min() < 0 or codes.max() >= geom.codebook_size:
            raise ValueError("image code out of codebook range")
        inner = list(vl.image_offset + codes)
    return np.array([start] + inner + [stop])


def _pad_ids(geom: ToyGeometry, vl: VocabLayout) -> np.ndarray:
    inner = list(range(vl.pad_offset, vl.pad_offset + geom.n_image_tokens))
    return np.array([PRIOR_START_ID] + inner + [PRIOR_STOP_ID])


def assemble(report_word_ids, current_image_codes, previous_image_codes,
             delta_days: float | None, mode: str, rng: np.random.Generator | None,
             geom: ToyGeometry, vl: VocabLayout) -> AssembledSequence:
    """Build the full input sequence for one sample.

    Training shuffles the three middle segments uniformly; inference places
    the segment to be generated last (its slots hold placeholders) and
    rejects a provided target segment. A missing prior scan becomes the
    learnable pad segment so the sequence length never varies.
    """
    if (previous_image_codes is None) != (delta_days is None):
        raise ValueError("previous image and delta must be provided together")
    bucket = bucketize_delta(delta_days)

    if previous_image_codes is not None:
        prev = (KIND_PREVIOUS, SCHEME_AXIAL, _image_ids(previous_image_codes, KIND_PREVIOUS, geom, vl))
    else:
        prev = (KIND_PAD, SCHEME_PAD, _pad_ids(geom, vl))

    if mode == MODE_TRAIN:
        if report_word_ids is None or current_image_codes is None:
            raise ValueError("train mode requires both the report and the current image")
        if rng is None:
            raise ValueError("train mode requires an rng for segment shuffling")
        middle = [
            (KIND_REPORT, SCHEME_TEXT, _report_ids(report_word_ids, geom, vl)),
            (KIND_CURRENT, SCHEME_AXIAL, _image_ids(current_image_codes, KIND_CURRENT, geom, vl)),
            prev,
        ]
        middle = [middle[i] for i in rng.permutation(3)]
    elif mode == MODE_INFER_REPORT:
        if report_word_ids is not None:
            raise ValueError("infer_report must not be given the report segment")
        if current_image_codes is None:
            raise ValueError("infer_report requires the current image")
        middle = [
            prev,
            (KIND_CURRENT, SCHEME_AXIAL, _image_ids(current_image_codes, KIND_CURRENT, geom, vl)),
            (KIND_REPORT, SCHEME_TEXT, _report_ids(None, geom, vl)),
        ]
    elif mode == MODE_INFER_IMAGE:
        if current_image_codes is not None:
            raise ValueError("infer_image must not be given the current image segment")
        if report_word_ids is None:
            raise ValueError("infer_image requires the report")
        middle = [
            prev,
            (KIND_REPORT, SCHEME_TEXT, _report_ids(report_word_ids, geom, vl)),
            (KIND_CURRENT, SCHEME_AXIAL, _image_ids(None, KIND_CURRENT, geom, vl)),
        ]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    ids = [np.array([vl.tt_id(bucket)])]
    segments: list[PlacedSegment] = []
    pos = 1
    for kind, scheme, seg_ids in middle:
        segments.append(PlacedSegment(kind=kind, scheme=scheme, start=pos, length=len(seg_ids)))
        ids.append(seg_ids)
        pos += len(seg_ids)
    ids.append(np.array([vl.cls_id]))
    ids = np.concatenate(ids)
    assert len(ids) == geom.seq_len

    loss_mask = np.zeros(len(ids), dtype=bool)
    for s in segments:
        if s.kind != KIND_PAD:
            loss_mask[s.start:s.start + s.length] = True
    return AssembledSequence(ids=ids, loss_mask=loss_mask, segments=segments,
                             tt_bucket=bucket, mode=mode,
                             order=tuple(s.kind for s in segments))


def sinusoid_table(n_pos: int, d_model: int) -> np.ndarray:
    """PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(same)."""
    pos = np.arange(n_pos)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((n_pos, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : table[:, 1::2].shape[1]])
    return table


def constant_positional(seq: AssembledSequence, geom: ToyGeometry, d_model: int) -> np.ndarray:
    """Non-learned positional content: global sinusoid over absolute position
    plus the text sinusoid over the report segment's intra-segment index."""
    out = sinusoid_table(seq.length, d_model).copy()
    for s in seq.segments:
        if s.scheme == SCHEME_TEXT:
            out[s.start:s.start + s.length] += sinusoid_table(s.length, d_model)
    return out


def axial_indices(seq: AssembledSequence, geom: ToyGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Per-position row/col ids for image grid cells; grid-size sentinel elsewhere."""
    g = geom.grid
    rows = np.full(seq.length, g, dtype=np.int64)
    cols = np.full(seq.length, g, dtype=np.int64)
    for s in seq.segments:
        if s.scheme == SCHEME_AXIAL:
            cells = np.arange(geom.n_image_tokens)
            rows[s.start + 1:s.start + 1 + geom.n_image_tokens] = cells // g
            cols[s.start + 1:s.start + 1 + geom.n_image_tokens] = cells % g
    return rows, cols


def positional_embed(seq: AssembledSequence, row_emb: Tensor, col_emb: Tensor,
                     geom: ToyGeometry, d_model: int) -> Tensor:
    """Full positional tensor for one sequence: constants plus learned axial
    row/col embeddings at image grid cells (axial(r,c) = row[r] + col[c])."""
    if row_emb.shape != (geom.grid, d_model) or col_emb.shape != (geom.grid, d_model):
        raise ValueError("axial tables must have shape (grid, d_model)")
    const = Tensor(constant_positional(seq, geom, d_model))
    rows, cols = axial_indices(seq, geom)
    zero_row = Tensor(np.zeros((1, d_model)))
    row_ext = t_concat([row_emb, zero_row], axis=0)
    col_ext = t_concat([col_emb, zero_row], axis=0)
    return const + embedding_lookup(row_ext, rows) + embedding_lookup(col_ext, cols)
