"""Generative-rule oracles and round-trip tests for the synthetic corpus."""

import itertools

import numpy as np
import pytest

from longigen.corpus import (
    CorpusFormatError,
    detect_labels_from_image,
    generate_corpus,
    labels_from_report,
    load_corpus,
    max_report_words,
    pair_with_prior,
    recount,
    report_text,
    save_corpus,
    split_report_words,
    temporal_clause,
)


class TestGenerate:
    def test_fraction_zero_means_no_deltas(self):
        records, manifest = generate_corpus(seed=0, n_patients=20, two_study_fraction=0.0)
        assert all(r.delta is None for r in records)
        assert manifest.n_two_study == 0

    def test_labels_match_image_redetection(self):
        records, _ = generate_corpus(seed=1, n_patients=100, two_study_fraction=0.5)
        for r in records:
            assert np.array_equal(detect_labels_from_image(r.image), r.labels)

    def test_clause_matches_label_diff(self):
        records, _ = generate_corpus(seed=2, n_patients=80, two_study_fraction=1.0)
        for rec, prior in pair_with_prior(records):
            if rec.delta is None:
                continue
            _, clause = split_report_words(rec.report.split())
            assert clause == temporal_clause(prior.labels, rec.labels).split()

    def test_first_study_has_no_clause(self):
        records, _ = generate_corpus(seed=3, n_patients=30, two_study_fraction=0.5)
        for r in records:
            if r.delta is None:
                _, clause = split_report_words(r.report.split())
                assert clause == []

    def test_deterministic_per_seed(self):
        a, _ = generate_corpus(seed=4, n_patients=25, two_study_fraction=0.6)
        b, _ = generate_corpus(seed=4, n_patients=25, two_study_fraction=0.6)
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.image, rb.image)
            assert ra.report == rb.report
            assert ra.delta == rb.delta

    def test_two_study_count_exact(self):
        records, manifest = generate_corpus(seed=5, n_patients=40, two_study_fraction=0.73)
        one, two = recount(records)
        assert two == round(40 * 0.73)
        assert (manifest.n_one_study, manifest.n_two_study) == (one, two)

    def test_delta_range_and_positivity(self):
        records, _ = generate_corpus(seed=6, n_patients=50, two_study_fraction=1.0)
        deltas = [r.delta for r in records if r.delta is not None]
        assert deltas and all(1.0 <= d <= 128.0 for d in deltas)

    def test_background_constant_within_patient(self):
        records, _ = generate_corpus(seed=7, n_patients=40, two_study_fraction=1.0)
        for rec, prior in pair_with_prior(records):
            if prior is None:
                continue
            # corner cell is always glyph-free background
            assert abs(rec.image[:4, 12:16].mean() - prior.image[:4, 12:16].mean()) < 0.05

    def test_report_length_bound(self):
        records, _ = generate_corpus(seed=8, n_patients=120, two_study_fraction=0.8)
        for r in records:
            assert len(r.report.split()) <= max_report_words()

    def test_c_validated(self):
        with pytest.raises(ValueError):
            generate_corpus(seed=0, n_patients=1, two_study_fraction=0.0, c=5)


class TestReportRule:
    def test_labels_from_report_inverts_findings(self):
        for cur in itertools.product([0, 1], repeat=4):
            for prev in [None, (1, 0, 1, 0)]:
                text = report_text(np.array(cur), None if prev is None else np.array(prev))
                assert np.array_equal(labels_from_report(text), np.array(cur))

    def test_unchanged_clause(self):
        labels = np.array([1, 0, 1, 0])
        assert temporal_clause(labels, labels) == "unchanged"

    def test_new_and_resolved(self):
        clause = temporal_clause(np.array([1, 0, 0, 0]), np.array([0, 0, 1, 0]))
        assert clause == "resolved disc new cross"


class TestPersistence:
    def test_roundtrip_100_records(self, tmp_path):
        records, manifest = generate_corpus(seed=9, n_patients=70, two_study_fraction=0.5)
        assert len(records) >= 100
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, records, manifest)
        loaded, m2 = load_corpus(path)
        assert m2 == manifest
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded):
            assert np.array_equal(a.image, b.image)  # 8-bit grid is lossless
            assert a.report == b.report
            assert np.array_equal(a.labels, b.labels)
            assert a.delta == b.delta

    def test_empty_corpus(self, tmp_path):
        records, manifest = generate_corpus(seed=0, n_patients=0, two_study_fraction=0.0)
        path = tmp_path / "empty.jsonl"
        save_corpus(path, records, manifest)
        loaded, m2 = load_corpus(path)
        assert loaded == [] and m2.n_patients == 0

    def test_manifest_counts_equal_recount(self, tmp_path):
        records, manifest = generate_corpus(seed=10, n_patients=33, two_study_fraction=0.4)
        one, two = recount(records)
        assert (manifest.n_one_study, manifest.n_two_study) == (one, two)

    def test_malformed_line_reports_number(self, tmp_path):
        records, manifest = generate_corpus(seed=11, n_patients=2, two_study_fraction=0.0)
        path = tmp_path / "bad.jsonl"
        save_corpus(path, records, manifest)
        lines = path.read_text().splitlines()
        lines[1] = '{"patient_id": 1}'
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusFormatError, match="line 2"):
            load_corpus(path)
