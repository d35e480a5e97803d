"""Sequence-assembly invariants: TT first, cls last, shuffling, pad handling."""

import itertools

import numpy as np
import pytest

from longigen.layout import (
    KIND_CURRENT,
    KIND_PAD,
    KIND_PREVIOUS,
    KIND_REPORT,
    MODE_INFER_IMAGE,
    MODE_INFER_REPORT,
    MODE_TRAIN,
    PAD_ID,
    REPORT_STOP_ID,
    ToyGeometry,
    VocabLayout,
    assemble,
    axial_indices,
    bucketize_delta,
    constant_positional,
    positional_embed,
    sinusoid_table,
)
from longigen.tensor import Tensor

GEOM = ToyGeometry()
VL = VocabLayout(n_text=31, geometry=GEOM)


def sample_inputs(rng, with_prior=True):
    report = list(rng.integers(7, VL.n_text, size=10))
    cur = rng.integers(0, GEOM.codebook_size, size=GEOM.n_image_tokens)
    prev = rng.integers(0, GEOM.codebook_size, size=GEOM.n_image_tokens) if with_prior else None
    delta = 3.5 if with_prior else None
    return report, cur, prev, delta


class TestBucketize:
    @pytest.mark.parametrize("delta,bucket", [
        (None, 0), (0.4, 1), (1.0, 1), (1.5, 2), (2.0, 2), (2.1, 3), (4.0, 3),
        (8.0, 4), (16.0, 5), (32.0, 6), (64.0, 7), (65.0, 8), (100.0, 8), (1e6, 8),
    ])
    def test_boundaries(self, delta, bucket):
        assert bucketize_delta(delta) == bucket

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            bucketize_delta(0.0)
        with pytest.raises(ValueError):
            bucketize_delta(-1.0)


class TestAssemble:
    def test_infer_report_canonical_order(self):
        rng = np.random.default_rng(0)
        _, cur, prev, delta = sample_inputs(rng)
        seq = assemble(None, cur, prev, delta, MODE_INFER_REPORT, None, GEOM, VL)
        assert seq.order == (KIND_PREVIOUS, KIND_CURRENT, KIND_REPORT)
        assert seq.ids[0] == VL.tt_id(bucketize_delta(delta))
        assert seq.ids[-1] == VL.cls_id

    def test_train_shuffle_uniform(self):
        rng = np.random.default_rng(1)
        report, cur, prev, delta = sample_inputs(rng)
        counts = {}
        n = 6000
        for _ in range(n):
            seq = assemble(report, cur, prev, delta, MODE_TRAIN, rng, GEOM, VL)
            counts[seq.order] = counts.get(seq.order, 0) + 1
        assert len(counts) == 6
        for order, c in counts.items():
            assert abs(c / n - 1 / 6) < 0.02, order

    def test_missing_prior_uses_pad_segment(self):
        rng = np.random.default_rng(2)
        report, cur, _, _ = sample_inputs(rng, with_prior=False)
        seq = assemble(report, cur, None, None, MODE_TRAIN, rng, GEOM, VL)
        assert KIND_PAD in seq.order and KIND_PREVIOUS not in seq.order
        assert seq.length == GEOM.seq_len
        assert seq.tt_bucket == 0
        pad = seq.segment(KIND_PAD)
        assert not seq.loss_mask[pad.start:pad.start + pad.length].any()

    def test_tt_first_cls_last_all_modes(self):
        rng = np.random.default_rng(3)
        for with_prior in (True, False):
            report, cur, prev, delta = sample_inputs(rng, with_prior)
            for mode, r_arg, c_arg in [
                (MODE_TRAIN, report, cur),
                (MODE_INFER_REPORT, None, cur),
                (MODE_INFER_IMAGE, report, None),
            ]:
                for _ in range(50):
                    seq = assemble(r_arg, c_arg, prev, delta, mode, rng, GEOM, VL)
                    assert VL.tt_offset <= seq.ids[0] < VL.tt_offset + 9
                    assert seq.ids[-1] == VL.cls_id
                    assert seq.length == GEOM.seq_len

    def test_shuffle_moves_only_middle_segments(self):
        rng = np.random.default_rng(4)
        report, cur, prev, delta = sample_inputs(rng)
        first, last = set(), set()
        for _ in range(200):
            seq = assemble(report, cur, prev, delta, MODE_TRAIN, rng, GEOM, VL)
            first.add(int(seq.ids[0]))
            last.add(int(seq.ids[-1]))
        assert first == {VL.tt_id(bucketize_delta(delta))}
        assert last == {VL.cls_id}

    def test_infer_modes_reject_target(self):
        rng = np.random.default_rng(5)
        report, cur, prev, delta = sample_inputs(rng)
        with pytest.raises(ValueError):
            assemble(report, cur, prev, delta, MODE_INFER_REPORT, None, GEOM, VL)
        with pytest.raises(ValueError):
            assemble(report, cur, prev, delta, MODE_INFER_IMAGE, None, GEOM, VL)

    def test_infer_image_places_current_last(self):
        rng = np.random.default_rng(6)
        report, _, prev, delta = sample_inputs(rng)
        seq = assemble(report, None, prev, delta, MODE_INFER_IMAGE, None, GEOM, VL)
        assert seq.order == (KIND_PREVIOUS, KIND_REPORT, KIND_CURRENT)
        start, length = seq.target_span
        assert length == GEOM.n_image_tokens + 2

    def test_report_framing_and_padding(self):
        rng = np.random.default_rng(7)
        report, cur, prev, delta = sample_inputs(rng)
        seq = assemble(report, cur, prev, delta, MODE_TRAIN, rng, GEOM, VL)
        s = seq.segment(KIND_REPORT)
        ids = seq.ids[s.start:s.start + s.length]
        assert ids[0] == 1 and ids[-1] == REPORT_STOP_ID
        assert list(ids[1:1 + len(report)]) == report
        assert (ids[1 + len(report):-1] == PAD_ID).all()

    def test_overlong_report_rejected(self):
        rng = np.random.default_rng(8)
        _, cur, prev, delta = sample_inputs(rng)
        too_long = [7] * (GEOM.n_report_tokens + 1)
        with pytest.raises(ValueError):
            assemble(too_long, cur, prev, delta, MODE_TRAIN, rng, GEOM, VL)

    def test_prior_delta_consistency(self):
        rng = np.random.default_rng(9)
        report, cur, prev, _ = sample_inputs(rng)
        with pytest.raises(ValueError):
            assemble(report, cur, prev, None, MODE_TRAIN, rng, GEOM, VL)
        with pytest.raises(ValueError):
            assemble(report, cur, None, 2.0, MODE_TRAIN, rng, GEOM, VL)

    def test_loss_mask_excludes_tt_cls_pad_only(self):
        rng = np.random.default_rng(10)
        report, cur, prev, delta = sample_inputs(rng)
        seq = assemble(report, cur, prev, delta, MODE_TRAIN, rng, GEOM, VL)
        assert not seq.loss_mask[0] and not seq.loss_mask[-1]
        assert seq.loss_mask[1:-1].all()  # no pad segment here
        seq2 = assemble(report, cur, None, None, MODE_TRAIN, rng, GEOM, VL)
        pad = seq2.segment(KIND_PAD)
        covered = np.zeros(seq2.length, dtype=bool)
        covered[pad.start:pad.start + pad.length] = True
        assert not (seq2.loss_mask & covered).any()
        assert seq2.loss_mask.sum() == seq2.length - 2 - pad.length


class TestPositional:
    def test_global_sinusoid_closed_form(self):
        table = sinusoid_table(4, 8)
        assert table[0, 0] == 0.0  # sin(0)
        assert table[0, 1] == 1.0  # cos(0)
        assert abs(table[2, 0] - np.sin(2.0)) < 1e-12

    def test_axial_additive_structure(self):
        rng = np.random.default_rng(11)
        report, cur, prev, delta = sample_inputs(rng)
        seq = assemble(None, cur, prev, delta, MODE_INFER_REPORT, None, GEOM, VL)
        d = 16
        row = Tensor(rng.standard_normal((GEOM.grid, d)))
        col = Tensor(rng.standard_normal((GEOM.grid, d)))
        emb = positional_embed(seq, row, col, GEOM, d).data
        const = constant_positional(seq, GEOM, d)
        s = seq.segment(KIND_CURRENT)
        g = GEOM.grid

        def cell_pos(r, c):
            return s.start + 1 + r * g + c

        # axial(r, c) = row[r] + col[c]
        for r, c in [(0, 0), (3, 5), (7, 7)]:
            expect = const[cell_pos(r, c)] + row.data[r] + col.data[c]
            assert np.allclose(emb[cell_pos(r, c)], expect, atol=1e-12)
        # same row, different columns: difference is purely the column embeddings
        diff = emb[cell_pos(2, 1)] - emb[cell_pos(2, 6)]
        const_diff = const[cell_pos(2, 1)] - const[cell_pos(2, 6)]
        assert np.allclose(diff - const_diff, col.data[1] - col.data[6], atol=1e-12)
        # same column, different rows: difference is purely the row embeddings
        diff = emb[cell_pos(1, 4)] - emb[cell_pos(6, 4)]
        const_diff = const[cell_pos(1, 4)] - const[cell_pos(6, 4)]
        assert np.allclose(diff - const_diff, row.data[1] - row.data[6], atol=1e-12)

    def test_non_image_positions_have_no_axial(self):
        rng = np.random.default_rng(12)
        report, cur, _, _ = sample_inputs(rng, with_prior=False)
        seq = assemble(report, cur, None, None, MODE_TRAIN, rng, GEOM, VL)
        rows, cols = axial_indices(seq, GEOM)
        pad = seq.segment(KIND_PAD)
        assert (rows[pad.start:pad.start + pad.length] == GEOM.grid).all()
        assert rows[0] == GEOM.grid and rows[-1] == GEOM.grid

    def test_invalid_geometry_rejected(self):
        with pytest.raises(ValueError):
            ToyGeometry(image_size=30, patch=4)

    def test_wrong_axial_table_shape_rejected(self):
        rng = np.random.default_rng(13)
        report, cur, prev, delta = sample_inputs(rng)
        seq = assemble(report, cur, prev, delta, MODE_TRAIN, rng, GEOM, VL)
        bad = Tensor(np.zeros((GEOM.grid + 1, 8)))
        with pytest.raises(ValueError):
            positional_embed(seq, bad, bad, GEOM, 8)
