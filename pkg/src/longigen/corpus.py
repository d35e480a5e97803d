"""Synthetic longitudinal corpus with a known image<->report<->label rule.

Each patient gets one or two studies. Four "pathologies" render as geometric
glyphs at fixed quadrants of a 32x32 image over a patient-constant background
level; the report is a deterministic function of the labels plus, for second
studies, a temporal clause derived from the label diff. The background level
is deliberately absent from the report: it is recoverable only from the prior
scan, so prior-conditioned generation has signal by construction.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .tokenizers import ReportVocab

SCHEMA_VERSION = 1
RULE_VERSION = "glyph-v1"

IMAGE_SIZE = 32
CELL = 4  # glyph geometry is aligned to the 4x4 patch grid
GLYPH_NAMES = ("disc", "bar", "cross", "ring")
GLYPH_CELLS = {
    "disc": ((1, 1), (1, 2), (2, 1), (2, 2)),
    "bar": ((2, 4), (2, 5), (2, 6)),
    "cross": ((4, 1), (5, 0), (5, 1), (5, 2), (6, 1)),
    "ring": ((4, 4), (4, 5), (4, 6), (5, 4), (5, 6), (6, 4), (6, 5), (6, 6)),
}
GLYPH_SENTENCES = {
    "disc": "round disc opacity in upper left zone",
    "bar": "linear bar density in upper right zone",
    "cross": "cruciform cross marker in lower left zone",
    "ring": "annular ring shadow in lower right zone",
}
NO_FINDINGS = "no acute findings"
CLAUSE_KEYWORDS = ("new", "resolved", "unchanged")

BACKGROUND_LEVELS = (0.15, 0.25, 0.35, 0.45, 0.55)
GLYPH_INTENSITY = 0.9
NOISE_AMPLITUDE = 0.02
DETECT_THRESHOLD = 0.75
LABEL_FLIP_PROB = 0.2
DELTA_RANGE_DAYS = (1.0, 128.0)


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files, carrying the offending line number."""


@dataclass
class StudyRecord:
    """One patient visit: image grid, report, label vector, interval to prior."""

    patient_id: int
    time_step: int
    image: np.ndarray  # [32, 32] floats in [0,1], 8-bit quantized
    report: str
    labels: np.ndarray  # {0,1}^4
    delta: float | None  # days since the prior study, None for the first


@dataclass
class CorpusManifest:
    split: str
    seed: int
    n_patients: int
    n_one_study: int
    n_two_study: int
    two_study_fraction: float
    rule_version: str = RULE_VERSION
    schema_version: int = SCHEMA_VERSION


def build_vocab() -> ReportVocab:
    words = set(NO_FINDINGS.split()) | set(CLAUSE_KEYWORDS)
    for s in GLYPH_SENTENCES.values():
        words |= set(s.split())
    return ReportVocab.from_words(sorted(words))


def render_image(labels: np.ndarray, background: float, rng: np.random.Generator) -> np.ndarray:
    """Glyphs for active labels over a constant background, plus pixel noise.

    Pixels are quantized to the 8-bit grid at render time so that disk
    round-trips are bitwise lossless.
    """
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), background)
    for name, active in zip(GLYPH_NAMES, labels):
        if active:
            for r, c in GLYPH_CELLS[name]:
                img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = GLYPH_INTENSITY
    img += rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def detect_labels_from_image(img: np.ndarray) -> np.ndarray:
    """Rendering-inverse oracle: template match at the known quadrants."""
    labels = np.zeros(len(GLYPH_NAMES), dtype=np.int64)
    for i, name in enumerate(GLYPH_NAMES):
        vals = [img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL].mean()
                for r, c in GLYPH_CELLS[name]]
        labels[i] = int(np.mean(vals) > DETECT_THRESHOLD)
    return labels


def temporal_clause(prev_labels: np.ndarray, labels: np.ndarray) -> str:
    parts = []
    for name, before, after in zip(GLYPH_NAMES, prev_labels, labels):
        if after and not before:
            parts.append(f"new {name}")
        elif before and not after:
            parts.append(f"resolved {name}")
    return " ".join(parts) if parts else "unchanged"


def report_text(labels: np.ndarray, prev_labels: np.ndarray | None) -> str:
    sentences = [GLYPH_SENTENCES[name] for name, on in zip(GLYPH_NAMES, labels) if on]
    if not sentences:
        sentences = [NO_FINDINGS]
    if prev_labels is not None:
        sentences.append(temporal_clause(prev_labels, labels))
    return " ".join(sentences)


def split_report_words(words: list[str]) -> tuple[list[str], list[str]]:
    """Split a report into (findings, temporal clause) at the first clause keyword."""
    for i, w in enumerate(words):
        if w in CLAUSE_KEYWORDS:
            return words[:i], words[i:]
    return words, []


def labels_from_report(report: str) -> np.ndarray:
    """Text labeler: glyph mentioned in the findings part => label 1."""
    findings, _ = split_report_words(report.split())
    found = set(findings)
    return np.array([int(name in found) for name in GLYPH_NAMES], dtype=np.int64)


def max_report_words() -> int:
    glyphs = sum(len(GLYPH_SENTENCES[n].split()) for n in GLYPH_NAMES)
    return glyphs + 2 * len(GLYPH_NAMES)  # all glyphs active, all flipped


def generate_corpus(seed: int, n_patients: int, two_study_fraction: float,
                    c: int = 4, split: str = "train",
                    patient_id_start: int = 0) -> tuple[list[StudyRecord], CorpusManifest]:
    """Deterministic corpus: a pure function of (seed, n_patients, fraction, c)."""
    if n_patients < 0:
        raise ValueError("n_patients must be >= 0")
    if not 0.0 <= two_study_fraction <= 1.0:
        raise ValueError("two_study_fraction must be in [0, 1]")
    if c != len(GLYPH_NAMES):
        raise ValueError(f"the glyph rule defines c={len(GLYPH_NAMES)} pathologies")
    rng = np.random.default_rng(seed)
    n_two = round(n_patients * two_study_fraction)
    two_flags = np.array([True] * n_two + [False] * (n_patients - n_two))
    rng.shuffle(two_flags)

    records: list[StudyRecord] = []
    for i in range(n_patients):
        pid = patient_id_start + i
        background = BACKGROUND_LEVELS[rng.integers(len(BACKGROUND_LEVELS))]
        labels1 = rng.integers(0, 2, size=c)
        img1 = render_image(labels1, background, rng)
        records.append(StudyRecord(patient_id=pid, time_step=0, image=img1,
                                   report=report_text(labels1, None),
                                   labels=labels1, delta=None))
        if two_flags[i]:
            flips = rng.random(c) < LABEL_FLIP_PROB
            labels2 = labels1 ^ flips
            lo, hi = DELTA_RANGE_DAYS
            delta = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
            img2 = render_image(labels2, background, rng)
            records.append(StudyRecord(patient_id=pid, time_step=1, image=img2,
                                       report=report_text(labels2, labels1),
                                       labels=labels2, delta=delta))
    manifest = CorpusManifest(split=split, seed=seed, n_patients=n_patients,
                              n_one_study=n_patients - n_two, n_two_study=n_two,
                              two_study_fraction=two_study_fraction)
    return records, manifest


def recount(records: list[StudyRecord]) -> tuple[int, int]:
    """(one-study, two-study) patient counts recomputed from records."""
    studies: dict[int, int] = {}
    for r in records:
        studies[r.patient_id] = studies.get(r.patient_id, 0) + 1
    one = sum(1 for v in studies.values() if v == 1)
    two = sum(1 for v in studies.values() if v == 2)
    return one, two


def _manifest_path(path):
    import pathlib
    return pathlib.Path(path).with_suffix(".manifest.json")


def save_corpus(path, records: list[StudyRecord], manifest: CorpusManifest) -> None:
    """JSONL, one record per line; manifest as sidecar JSON."""
    with open(path, "w") as f:
        for r in records:
            pixels = np.round(r.image * 255.0).astype(np.uint8)
            f.write(json.dumps({
                "patient_id": r.patient_id,
                "time_step": r.time_step,
                "h": r.image.shape[0],
                "w": r.image.shape[1],
                "image": base64.b64encode(pixels.tobytes()).decode("ascii"),
                "report": r.report,
                "labels": [int(x) for x in r.labels],
                "delta": r.delta,
            }) + "\n")
    with open(_manifest_path(path), "w") as f:
        json.dump(asdict(manifest), f, indent=2)
        f.write("\n")


def load_corpus(path) -> tuple[list[StudyRecord], CorpusManifest]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                pixels = np.frombuffer(base64.b64decode(d["image"]), dtype=np.uint8)
                img = pixels.reshape(d["h"], d["w"]).astype(np.float64) / 255.0
                records.append(StudyRecord(
                    patient_id=int(d["patient_id"]), time_step=int(d["time_step"]),
                    image=img, report=d["report"],
                    labels=np.array(d["labels"], dtype=np.int64),
                    delta=None if d["delta"] is None else float(d["delta"])))
            except (KeyError, ValueError, TypeError) as e:
                raise CorpusFormatError(f"malformed record at line {lineno}: {e}") from e
    with open(_manifest_path(path)) as f:
        m = json.load(f)
    manifest = CorpusManifest(**m)
    if manifest.schema_version != SCHEMA_VERSION:
        raise CorpusFormatError(f"unsupported schema version {manifest.schema_version}")
    return records, manifest


def pair_with_prior(records: list[StudyRecord]) -> list[tuple[StudyRecord, StudyRecord | None]]:
    """(record, prior record or None) pairs; the prior is the patient's earlier study."""
    by_patient: dict[int, dict[int, StudyRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, {})[r.time_step] = r
    out = []
    for r in records:
        prior = by_patient[r.patient_id].get(r.time_step - 1) if r.delta is not None else None
        if r.delta is not None and prior is None:
            raise ValueError(f"record for patient {r.patient_id} has delta but no prior study")
        out.append((r, prior))
    return out
