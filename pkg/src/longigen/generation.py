"""Autoregressive bidirectional inference: report-from-images and
image-from-report(+prior), with nucleus sampling, incremental decoding over
per-layer prefix states, and pixel-entropy ensemble selection for images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import PrefixState, _phi_np
from .layout import (
    MODE_INFER_IMAGE,
    MODE_INFER_REPORT,
    PAD_ID,
    REPORT_STOP_ID,
    AssembledSequence,
    assemble,
    axial_indices,
    constant_positional,
)
from .model import Model
from .tensor import _ln_forward
from .tokenizers import Codebook, vq_decode


@dataclass(frozen=True)
class SamplerConfig:
    """Nucleus sampling knobs; greedy mode ignores p and temperature."""

    p: float = 0.9
    temperature: float = 0.7
    max_tokens: int | None = None
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError("nucleus mass p must be in (0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


def top_p_sample(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Temperature-scaled softmax, smallest prefix with cumulative mass >= p,
    renormalized and sampled. Ties break toward the lower token id."""
    if not np.isfinite(logits).all() and not (logits == -np.inf).any():
        raise ValueError("logits must be finite (or -inf for masked ids)")
    if cfg.greedy:
        return int(np.argmax(logits))  # argmax takes the lowest id on ties
    z = logits / cfg.temperature
    z = z - z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    keep = int(np.searchsorted(cum, cfg.p, side="left")) + 1
    kept = order[:keep]
    renorm = probs[kept] / probs[kept].sum()
    return int(kept[rng.choice(len(kept), p=renorm)])


def mask_logits(logits: np.ndarray, legal_ids: np.ndarray) -> np.ndarray:
    out = np.full_like(logits, -np.inf)
    out[legal_ids] = logits[legal_ids]
    return out


class IncrementalDecoder:
    """Token-at-a-time decoding over carried per-layer prefix states.

    Prefill runs the vectorized forward over the prompt (collecting each
    layer's final PrefixState); every subsequent token costs O(m*d) per layer.
    Matches the cache-free reference forward to ~1e-12.
    """

    def __init__(self, model: Model, seq: AssembledSequence):
        self.model = model
        self.cfg = model.config
        geom, d = self.cfg.geometry, self.cfg.d_model
        rows, cols = axial_indices(seq, geom)
        axial = np.zeros((seq.length, d))
        g = geom.grid
        axial[rows < g] += model.p["axial_row"].data[rows[rows < g]]
        axial[cols < g] += model.p["axial_col"].data[cols[cols < g]]
        self.pos = constant_positional(seq, geom, d) + axial
        self.seq = seq
        self.states: list[PrefixState] = []
        self.next_pos = 0
        self.last_logits: np.ndarray | None = None

    def prefill(self, prompt_len: int) -> np.ndarray:
        """Process seq.ids[:prompt_len]; returns logits at the last position."""
        ids = self.seq.ids[:prompt_len][None, :]
        pos = T.Tensor(self.pos[None, :prompt_len])
        with T.no_grad():
            states: list = []
            hf = self.model.hidden_states(ids, pos, train=False, attn_states=states)
            logits = hf @ self.model.p["head.w"] + self.model.p["head.b"]
        # states are [B=1, H, m, dh]; drop the batch axis
        self.states = [PrefixState(S=s.S[0], z=s.z[0]) for s in states]
        self.next_pos = prompt_len
        self.last_logits = logits.data[0, -1]
        return self.last_logits

    def step(self, token_id: int) -> np.ndarray:
        """Feed one token at the current position; returns next-token logits."""
        cfg, p = self.cfg, self.model.p
        d, H, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
        scale = dh ** -0.25
        x = p["embed"].data[token_id] + self.pos[self.next_pos]
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            a, _, _ = _ln_forward(x, p[pre + "ln1.g"].data, p[pre + "ln1.b"].data, cfg.ln_eps)
            qkv = a @ p[pre + "wqkv"].data + p[pre + "bqkv"].data
            q, k, v = (qkv[j * d:(j + 1) * d].reshape(H, dh) for j in range(3))
            qp = _phi_np(q * scale, self.model.fmaps[i])
            kp = _phi_np(k * scale, self.model.fmaps[i])
            st = self.states[i]
            st.update(kp, v)
            att = st.readout(qp, cfg.attn_eps).reshape(d)
            x = x + (att @ p[pre + "wo"].data + p[pre + "bo"].data)
            a2, _, _ = _ln_forward(x, p[pre + "ln2.g"].data, p[pre + "ln2.b"].data, cfg.ln_eps)
            mlp = np.maximum(a2 @ p[pre + "w1"].data + p[pre + "b1"].data, 0.0)
            x = x + (mlp @ p[pre + "w2"].data + p[pre + "b2"].data)
        hf, _, _ = _ln_forward(x, p["lnf.g"].data, p["lnf.b"].data, cfg.ln_eps)
        self.next_pos += 1
        self.last_logits = hf @ p["head.w"].data + p["head.b"].data
        return self.last_logits


@dataclass
class GenerationResult:
    tokens: list[int]        # inner content ids (report: word ids, pads stripped)
    emitted: list[int]       # every sampled id, in order
    stopped: bool            # True if the STOP token terminated decoding
    truncated: bool          # True if the length cap fired without a STOP


def generate_report(model: Model, current_codes: np.ndarray,
                    previous_codes: np.ndarray | None, delta: float | None,
                    sampler: SamplerConfig) -> GenerationResult:
    """Sample report tokens after the report-START until STOP or the length cap.

    Illegal ids (image range, TT, framing other than the report STOP) are
    masked to zero probability at every step.
    """
    cfg = model.config
    seq = assemble(None, current_codes, previous_codes, delta,
                   MODE_INFER_REPORT, None, cfg.geometry, cfg.vocab_layout)
    start, _ = seq.target_span
    legal = cfg.vocab_layout.report_legal_ids()
    rng = np.random.default_rng(sampler.seed)
    dec = IncrementalDecoder(model, seq)
    logits = dec.prefill(start + 1)  # prompt ends at the report START token
    n_r = cfg.geometry.n_report_tokens
    cap = min(sampler.max_tokens, n_r + 1) if sampler.max_tokens else n_r + 1
    emitted: list[int] = []
    stopped = False
    for _ in range(cap):
        tok = top_p_sample(mask_logits(logits, legal), sampler, rng)
        emitted.append(tok)
        if tok == REPORT_STOP_ID:
            stopped = True
            break
        logits = dec.step(tok)
    words = [t for t in emitted if t in cfg.vocab_layout.word_id_range]
    return GenerationResult(tokens=words, emitted=emitted,
                            stopped=stopped, truncated=not stopped)


def generate_image(model: Model, report_word_ids: list[int],
                   previous_codes: np.ndarray | None, delta: float | None,
                   sampler: SamplerConfig) -> GenerationResult:
    """Sample exactly N_x image-code tokens; no early STOP is accepted mid-grid."""
    cfg = model.config
    vl = cfg.vocab_layout
    seq = assemble(report_word_ids, None, previous_codes, delta,
                   MODE_INFER_IMAGE, None, cfg.geometry, vl)
    start, _ = seq.target_span
    legal = vl.image_legal_ids()
    rng = np.random.default_rng(sampler.seed)
    dec = IncrementalDecoder(model, seq)
    logits = dec.prefill(start + 1)
    emitted: list[int] = []
    for _ in range(cfg.geometry.n_image_tokens):
        tok = top_p_sample(mask_logits(logits, legal), sampler, rng)
        emitted.append(tok)
        logits = dec.step(tok)
    codes = [t - vl.image_offset for t in emitted]
    return GenerationResult(tokens=codes, emitted=emitted, stopped=True, truncated=False)


def pixel_entropy(img: np.ndarray, bins: int = 256) -> float:
    """Shannon entropy (nats) of the binned pixel histogram."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    hist, _ = np.histogram(img, bins=bins, range=(0.0, 1.0))
    p = hist / hist.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class EnsembleConfig:
    checkpoint_paths: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not self.checkpoint_paths:
            raise ValueError("ensemble needs at least one checkpoint")


@dataclass
class EnsembleResult:
    image: np.ndarray
    codes: np.ndarray
    member_index: int
    entropies: list[float]


def ensemble_generate_image_from_members(
        members: list[tuple[Model, Codebook]], report_word_ids: list[int],
        previous_codes: np.ndarray | None, delta: float | None,
        sampler: SamplerConfig) -> EnsembleResult:
    """One image per member; the decoded image with maximal pixel entropy wins
    (ties to the first member). Each member gets an independent derived seed."""
    seeds = np.random.SeedSequence(sampler.seed).generate_state(len(members))
    images, codes, entropies = [], [], []
    for (model, cb), s in zip(members, seeds):
        member_sampler = SamplerConfig(p=sampler.p, temperature=sampler.temperature,
                                       max_tokens=sampler.max_tokens, seed=int(s),
                                       greedy=sampler.greedy)
        result = generate_image(model, report_word_ids, previous_codes, delta, member_sampler)
        geom = model.config.geometry
        img = vq_decode(np.array(result.tokens), cb, geom.patch, geom.image_size, geom.image_size)
        images.append(img)
        codes.append(np.array(result.tokens))
        entropies.append(pixel_entropy(img))
    best = int(np.argmax(entropies))  # argmax ties to the first member
    return EnsembleResult(image=images[best], codes=codes[best],
                          member_index=best, entropies=entropies)


def load_ensemble(checkpoint_paths) -> list[tuple[Model, Codebook]]:
    """Load members, skipping unreadable checkpoints with a warning."""
    from .checkpoint import load_checkpoint
    members = []
    for path in checkpoint_paths:
        try:
            model, cb, _ = load_checkpoint(path)
            members.append((model, cb))
        except Exception as e:  # noqa: BLE001 - any member failure is skippable
            warnings.warn(f"skipping ensemble member {path}: {e}")
    if not members:
        raise RuntimeError("no ensemble member could be loaded")
    return members
