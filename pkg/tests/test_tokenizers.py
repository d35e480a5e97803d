"""Oracle tests for the patch vector-quantizer and the report tokenizer."""

import itertools

import numpy as np
import pytest

from longigen.corpus import build_vocab, report_text
from longigen.tokenizers import (
    Codebook,
    ReportVocab,
    VocabError,
    fit_codebook,
    load_vocab,
    save_vocab,
    vq_decode,
    vq_encode,
)


def random_codebook(rng, K=8, D=16, lo=0.3, hi=0.7) -> Codebook:
    return Codebook(entries=rng.uniform(lo, hi, size=(K, D)))


def tile_image(cb: Codebook, tokens: np.ndarray, patch=4, size=32) -> np.ndarray:
    return vq_decode(tokens, cb, patch, size, size)


class TestVQ:
    def test_tiled_image_encodes_to_its_entry(self):
        rng = np.random.default_rng(0)
        cb = random_codebook(rng)
        img = tile_image(cb, np.full(64, 3))
        assert (vq_encode(img, cb, 4) == 3).all()

    def test_half_black_half_white(self):
        cb = Codebook(entries=np.stack([np.zeros(16), np.ones(16)]))
        img = np.zeros((32, 32))
        img[16:] = 1.0
        tokens = vq_encode(img, cb, 4)
        assert (tokens[:32] == 0).all() and (tokens[32:] == 1).all()

    def test_matches_brute_force_nearest_neighbor(self):
        rng = np.random.default_rng(1)
        cb = random_codebook(rng, K=12)
        img = rng.uniform(0, 1, size=(32, 32))
        tokens = vq_encode(img, cb, 4)
        # exhaustive oracle
        from longigen.tokenizers import image_to_patches
        patches = image_to_patches(img, 4)
        for i, p in enumerate(patches):
            dists = [float(((p - e) ** 2).sum()) for e in cb.entries]
            assert tokens[i] == int(np.argmin(dists))

    def test_decode_encode_roundtrip_on_grid(self):
        rng = np.random.default_rng(2)
        cb = random_codebook(rng)
        tokens = rng.integers(0, cb.K, size=64)
        img = tile_image(cb, tokens)
        assert np.array_equal(vq_encode(img, cb, 4), tokens)

    def test_decode_constant(self):
        rng = np.random.default_rng(3)
        cb = random_codebook(rng)
        img = tile_image(cb, np.full(64, 5))
        assert np.allclose(img[:4, :4].reshape(-1), cb.entries[5])

    def test_projection_idempotent(self):
        rng = np.random.default_rng(4)
        cb = random_codebook(rng)
        img = rng.uniform(0, 1, size=(32, 32))
        once = tile_image(cb, vq_encode(img, cb, 4))
        twice = tile_image(cb, vq_encode(once, cb, 4))
        assert np.array_equal(once, twice)

    def test_stability_at_quantization_centers(self):
        rng = np.random.default_rng(5)
        cb = random_codebook(rng)
        gaps = [np.linalg.norm(a - b) for a, b in itertools.combinations(cb.entries, 2)]
        min_gap = min(gaps)
        tokens = rng.integers(0, cb.K, size=64)
        img = tile_image(cb, tokens)
        # per-pixel shift of alpha moves a patch by at most 4*alpha in L2
        alpha = 0.99 * (min_gap / 2) / 4
        perturbed = img + rng.uniform(-alpha / 2, alpha / 2, size=img.shape)
        assert np.array_equal(vq_encode(np.clip(perturbed, 0, 1), cb, 4), tokens)

    def test_dimension_mismatch_rejected(self):
        cb = Codebook(entries=np.random.default_rng(0).uniform(size=(4, 9)))
        with pytest.raises(ValueError):
            vq_encode(np.zeros((32, 32)), cb, 4)

    def test_out_of_range_id_rejected(self):
        rng = np.random.default_rng(6)
        cb = random_codebook(rng, K=4)
        with pytest.raises(ValueError):
            vq_decode(np.array([0] * 63 + [4]), cb, 4, 32, 32)

    def test_duplicate_entries_rejected(self):
        with pytest.raises(ValueError):
            Codebook(entries=np.zeros((2, 4)))


class TestFitCodebook:
    def test_recovers_constructed_clusters(self):
        values = [0.1, 0.4, 0.6, 0.9]
        rng = np.random.default_rng(7)
        images = []
        for _ in range(6):
            tokens = rng.integers(0, 4, size=64)
            img = np.repeat(np.repeat(
                np.array(values)[tokens].reshape(8, 8), 4, axis=0), 4, axis=1)
            images.append(img)
        cb = fit_codebook(images, K=4, patch=4, seed=0)
        got = sorted(cb.entries.mean(axis=1))
        assert np.allclose(got, values, atol=1e-9)
        # quantization error ~ 0
        err = 0.0
        for img in images:
            rec = vq_decode(vq_encode(img, cb, 4), cb, 4, 32, 32)
            err = max(err, np.abs(rec - img).max())
        assert err < 1e-9

    def test_k1_gives_mean_patch(self):
        rng = np.random.default_rng(8)
        images = [rng.uniform(0, 1, size=(8, 8)) for _ in range(3)]
        cb = fit_codebook(images, K=1, patch=4, seed=0)
        from longigen.tokenizers import image_to_patches
        allp = np.concatenate([image_to_patches(i, 4) for i in images])
        assert np.allclose(cb.entries[0], allp.mean(axis=0), atol=1e-12)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(9)
        images = [rng.uniform(0, 1, size=(16, 16)) for _ in range(4)]
        cb1 = fit_codebook(images, K=6, patch=4, seed=11)
        cb2 = fit_codebook(images, K=6, patch=4, seed=11)
        assert np.array_equal(cb1.entries, cb2.entries)

    def test_insufficient_distinct_patches(self):
        images = [np.zeros((8, 8))]
        with pytest.raises(ValueError):
            fit_codebook(images, K=3, patch=4, seed=0)


class TestReportVocab:
    def test_empty_report(self):
        assert build_vocab().encode("") == []

    def test_roundtrip_over_grammar(self):
        vocab = build_vocab()
        labels = list(itertools.product([0, 1], repeat=4))
        for cur in labels:
            for prev in [None] + labels:
                text = report_text(np.array(cur), None if prev is None else np.array(prev))
                assert vocab.decode(vocab.encode(text)) == text

    def test_known_report_ids_match_table(self):
        vocab = build_vocab()
        ids = vocab.encode("no acute findings unchanged disc")
        assert ids == [vocab.tokens.index(w) for w in
                       ["no", "acute", "findings", "unchanged", "disc"]]
        assert len(ids) == 5

    def test_oov_names_the_word(self):
        with pytest.raises(VocabError, match="cardiomegaly"):
            build_vocab().encode("cardiomegaly")

    def test_decode_rejects_special_ids(self):
        with pytest.raises(VocabError):
            build_vocab().decode([0])

    def test_vocab_file_roundtrip(self, tmp_path):
        vocab = build_vocab()
        path = tmp_path / "vocab.txt"
        save_vocab(vocab, path)
        loaded = load_vocab(path)
        assert loaded.tokens == vocab.tokens
        # line number = id
        lines = path.read_text().splitlines()
        assert lines[vocab.id_of("disc")] == "disc"

    def test_reserved_ids_disjoint_from_words(self):
        vocab = build_vocab()
        assert min(vocab.word_ids) == 7
        assert ReportVocab.from_words(["alpha"]).tokens[7] == "alpha"
