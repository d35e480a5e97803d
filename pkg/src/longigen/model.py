"""The autoregressive transformer: unified embeddings, stacked causal
linear-attention blocks, a next-token head over the unified vocabulary, and
a cls head predicting the multi-label diagnosis vector.

Training minimizes  mean masked next-token CE  +  lambda * multi-label BCE.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import RandomFeatureMap, causal_linear_attention
from .corpus import StudyRecord, pair_with_prior
from .layout import (
    MODE_TRAIN,
    AssembledSequence,
    ToyGeometry,
    VocabLayout,
    assemble,
    axial_indices,
    constant_positional,
)
from .tensor import Tensor, cross_entropy_logits, binary_cross_entropy_logits, embedding_lookup, layer_norm


class TrainingDivergence(RuntimeError):
    """Raised when the loss goes non-finite; carries step/lr/grad-norm."""

    def __init__(self, step: int, lr: float, grad_norm: float):
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e}, last grad norm={grad_norm:.3e})")
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    m_features: int = 64
    mlp_ratio: int = 4
    dropout: float = 0.1
    lambda_cls: float = 1.0
    n_text: int = 31  # text vocabulary size incl. reserved ids
    geometry: ToyGeometry = field(default_factory=ToyGeometry)
    attn_eps: float = 1e-6
    ln_eps: float = 1e-5
    chunk: int = 64
    redraw_features: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.lambda_cls < 0:
            raise ValueError("lambda_cls must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab_layout(self) -> VocabLayout:
        return VocabLayout(n_text=self.n_text, geometry=self.geometry)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["geometry"] = dataclasses.asdict(self.geometry)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["geometry"] = ToyGeometry(**d["geometry"])
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape map of every trainable parameter."""
    d, v = config.d_model, config.vocab_layout.total
    g, h = config.geometry.grid, config.mlp_ratio * config.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (v, d),
        "axial_row": (g, d),
        "axial_col": (g, d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wqkv": (d, 3 * d), p + "bqkv": (3 * d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, h), p + "b1": (h,),
            p + "w2": (h, d), p + "b2": (d,),
        })
    shapes.update({
        "lnf.g": (d,), "lnf.b": (d,),
        "head.w": (d, v), "head.b": (v,),
        "cls.w": (d, config.geometry.n_labels), "cls.b": (config.geometry.n_labels,),
    })
    return shapes


def param_count(config: ModelConfig) -> int:
    """Published closed form; asserted against the live model in tests.

    V*d + 2*g*d
    + n_layers * (4d + d*3d + 3d + d*d + d + 2*(d*h) + h + d)   with h = mlp_ratio*d
    + 2d + d*V + V + d*c + c
    """
    d, v = config.d_model, config.vocab_layout.total
    g, h, c = config.geometry.grid, config.mlp_ratio * config.d_model, config.geometry.n_labels
    per_layer = 4 * d + d * 3 * d + 3 * d + d * d + d + 2 * (d * h) + h + d
    return v * d + 2 * g * d + config.n_layers * per_layer + 2 * d + d * v + v + d * c + c


class Model:
    """Parameters plus the forward/loss computation (single model instance)."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 fmaps: list[RandomFeatureMap]):
        self.config = config
        self.p = params
        self.fmaps = fmaps

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        ss = np.random.SeedSequence(seed)
        w_rng = np.random.default_rng(ss.spawn(1)[0])
        params: dict[str, Tensor] = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".g") or name == "lnf.g":
                data = np.ones(shape)
            elif name.endswith((".b", ".bias")) or name.split(".")[-1].startswith("b"):
                data = np.zeros(shape)
            else:
                data = w_rng.standard_normal(shape) * 0.02
            params[name] = Tensor(data, requires_grad=True)
        fmaps = cls.draw_feature_maps(config, seed)
        return cls(config, params, fmaps)

    @staticmethod
    def draw_feature_maps(config: ModelConfig, seed: int) -> list[RandomFeatureMap]:
        base = np.random.SeedSequence([seed, 0xFEA7]).generate_state(config.n_layers)
        return [RandomFeatureMap.draw(config.head_dim, config.m_features,
                                      seed=int(s), orthogonal=True)
                for s in base]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.p.values())

    # -- forward -----------------------------------------------------------

    def _dropout(self, x: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        p = self.config.dropout
        if not train or p <= 0.0:
            return x
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * Tensor(mask)

    def _positional(self, seqs: list[AssembledSequence]) -> Tensor:
        geom, d = self.config.geometry, self.config.d_model
        const = np.stack([constant_positional(s, geom, d) for s in seqs])
        rows = np.stack([axial_indices(s, geom)[0] for s in seqs])
        cols = np.stack([axial_indices(s, geom)[1] for s in seqs])
        zero = Tensor(np.zeros((1, d)))
        row_ext = T.concat([self.p["axial_row"], zero], axis=0)
        col_ext = T.concat([self.p["axial_col"], zero], axis=0)
        return Tensor(const) + embedding_lookup(row_ext, rows) + embedding_lookup(col_ext, cols)

    def hidden_states(self, ids: np.ndarray, pos: Tensor, train: bool = False,
                      rng: np.random.Generator | None = None,
                      fmaps: list[RandomFeatureMap] | None = None,
                      attn_states: list | None = None) -> Tensor:
        """Final layer-normed hidden states [B, L, d]."""
        cfg = self.config
        B, L = ids.shape
        d, H, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
        fmaps = fmaps if fmaps is not None else self.fmaps
        h = embedding_lookup(self.p["embed"], ids) + pos
        h = self._dropout(h, train, rng)
        # rows flattened to [B*L, d] so dense projections run as single GEMMs
        h = h.reshape(B * L, d)
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            a = layer_norm(h, self.p[pre + "ln1.g"], self.p[pre + "ln1.b"], cfg.ln_eps)
            qkv = a @ self.p[pre + "wqkv"] + self.p[pre + "bqkv"]
            q = qkv.narrow(1, 0, d).reshape(B, L, H, dh).swapaxes(1, 2)
            k = qkv.narrow(1, d, d).reshape(B, L, H, dh).swapaxes(1, 2)
            v = qkv.narrow(1, 2 * d, d).reshape(B, L, H, dh).swapaxes(1, 2)
            att = causal_linear_attention(q, k, v, fmaps[i], eps=cfg.attn_eps,
                                          chunk=cfg.chunk, state_out=attn_states)
            att = att.swapaxes(1, 2).reshape(B * L, d)
            h = h + self._dropout(att @ self.p[pre + "wo"] + self.p[pre + "bo"], train, rng)
            a2 = layer_norm(h, self.p[pre + "ln2.g"], self.p[pre + "ln2.b"], cfg.ln_eps)
            mlp = (a2 @ self.p[pre + "w1"] + self.p[pre + "b1"]).relu() @ self.p[pre + "w2"] + self.p[pre + "b2"]
            h = h + self._dropout(mlp, train, rng)
        hf = layer_norm(h, self.p["lnf.g"], self.p["lnf.b"], cfg.ln_eps)
        return hf.reshape(B, L, d)

    def forward_batch(self, seqs: list[AssembledSequence], train: bool = False,
                      rng: np.random.Generator | None = None,
                      fmaps: list[RandomFeatureMap] | None = None) -> tuple[Tensor, Tensor]:
        """(logits [B, L, V_total], cls_logits [B, c])."""
        ids = np.stack([s.ids for s in seqs])
        B, L = ids.shape
        d = self.config.d_model
        hf = self.hidden_states(ids, self._positional(seqs), train, rng, fmaps)
        logits = (hf.reshape(B * L, d) @ self.p["head.w"] + self.p["head.b"])
        logits = logits.reshape(B, L, self.config.vocab_layout.total)
        cls_h = hf.narrow(1, L - 1, 1).reshape(B, d)
        cls_logits = cls_h @ self.p["cls.w"] + self.p["cls.b"]
        return logits, cls_logits

    def forward(self, seq: AssembledSequence) -> tuple[Tensor, Tensor]:
        """Single-sequence eval forward: (logits [L, V_total], cls_logits [c])."""
        with T.no_grad():
            logits, cls_logits = self.forward_batch([seq])
        L, V = logits.shape[1], logits.shape[2]
        return logits.reshape(L, V), cls_logits.reshape(self.config.geometry.n_labels)

    def loss_batch(self, seqs: list[AssembledSequence], labels: np.ndarray,
                   train: bool = False, rng: np.random.Generator | None = None,
                   fmaps: list[RandomFeatureMap] | None = None) -> tuple[Tensor, float, float]:
        """(total loss, generation CE, cls BCE). Targets are the sequence
        shifted by one; positions whose target is masked out are excluded."""
        logits, cls_logits = self.forward_batch(seqs, train, rng, fmaps)
        ids = np.stack([s.ids for s in seqs])
        mask = np.stack([s.loss_mask for s in seqs])
        B, L, V = logits.shape
        flat = logits.narrow(1, 0, L - 1).reshape(B * (L - 1), V)
        ce = cross_entropy_logits(flat, ids[:, 1:].reshape(-1), mask[:, 1:].reshape(-1))
        bce = binary_cross_entropy_logits(cls_logits, labels.astype(np.float64))
        total = ce + bce.scale(self.config.lambda_cls)
        return total, float(ce.data), float(bce.data)


# -- training -------------------------------------------------------------------


@dataclass
class Sample:
    """A tokenized training instance built from one study record."""

    report_ids: list[int]
    current_codes: np.ndarray
    previous_codes: np.ndarray | None
    delta: float | None
    labels: np.ndarray


def tokenize_records(records: list[StudyRecord], codebook, vocab, geom: ToyGeometry) -> list[Sample]:
    from .tokenizers import vq_encode
    code_cache: dict[int, np.ndarray] = {}

    def codes_of(rec: StudyRecord) -> np.ndarray:
        key = id(rec)
        if key not in code_cache:
            code_cache[key] = vq_encode(rec.image, codebook, geom.patch)
        return code_cache[key]

    samples = []
    for rec, prior in pair_with_prior(records):
        samples.append(Sample(
            report_ids=vocab.encode(rec.report),
            current_codes=codes_of(rec),
            previous_codes=None if prior is None else codes_of(prior),
            delta=rec.delta,
            labels=rec.labels.astype(np.int64),
        ))
    return samples


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    keep_checkpoints: int = 5


@dataclass
class LogRow:
    epoch: int
    split: str
    gen_ce: float
    cls_bce: float
    total: float

    def as_csv(self) -> str:
        return f"{self.epoch},{self.split},{self.gen_ce:.6f},{self.cls_bce:.6f},{self.total:.6f}"


LOG_CSV_HEADER = ["epoch", "split", "gen_ce", "cls_bce", "total"]


def assemble_sample(sample: Sample, mode: str, rng, config: ModelConfig) -> AssembledSequence:
    return assemble(sample.report_ids, sample.current_codes, sample.previous_codes,
                    sample.delta, mode, rng, config.geometry, config.vocab_layout)


def train(train_samples: list[Sample], val_samples: list[Sample], config: ModelConfig,
          settings: TrainSettings, checkpoint_fn=None,
          progress_fn=None) -> tuple[Model, list[LogRow]]:
    """Deterministic-per-seed training loop.

    `checkpoint_fn(epoch, model)` is invoked for each of the last
    `keep_checkpoints` epochs (the ensemble members). Raises
    TrainingDivergence on a non-finite loss.
    """
    ss = np.random.SeedSequence([settings.seed, 0x7A17])
    init_child, order_child, layout_child, drop_child, redraw_child = ss.spawn(5)
    model = Model.init(config, seed=settings.seed)
    order_rng = np.random.default_rng(order_child)
    layout_rng = np.random.default_rng(layout_child)
    drop_rng = np.random.default_rng(drop_child)
    redraw_rng = np.random.default_rng(redraw_child)

    steps_per_epoch = max(1, math.ceil(len(train_samples) / settings.batch_size))
    opt = T.AdamW(model.p, lr=settings.lr, betas=settings.betas, eps=settings.adam_eps,
                  weight_decay=settings.weight_decay,
                  total_steps=settings.epochs * steps_per_epoch)

    log: list[LogRow] = []
    step = 0
    last_grad_norm = float("nan")
    for epoch in range(1, settings.epochs + 1):
        order = order_rng.permutation(len(train_samples))
        sums = np.zeros(2)
        n_batches = 0
        for start in range(0, len(train_samples), settings.batch_size):
            batch = [train_samples[i] for i in order[start:start + settings.batch_size]]
            seqs = [assemble_sample(s, MODE_TRAIN, layout_rng, config) for s in batch]
            labels = np.stack([s.labels for s in batch])
            fmaps = (Model.draw_feature_maps(config, int(redraw_rng.integers(2**31)))
                     if config.redraw_features else None)
            total, ce, bce = model.loss_batch(seqs, labels, train=True, rng=drop_rng, fmaps=fmaps)
            step += 1
            if not np.isfinite(total.data):
                raise TrainingDivergence(step, opt.current_lr(), last_grad_norm)
            opt.zero_grad()
            total.backward()
            last_grad_norm = math.sqrt(sum(float((p.grad * p.grad).sum())
                                           for p in model.p.values() if p.grad is not None))
            opt.step()
            sums += (ce, bce)
            n_batches += 1
        gen_ce, cls_bce = sums / n_batches
        log.append(LogRow(epoch, "train", gen_ce, cls_bce, gen_ce + config.lambda_cls * cls_bce))
        val_ce, val_bce = evaluate_loss(model, val_samples, settings.batch_size, layout_rng)
        log.append(LogRow(epoch, "val", val_ce, val_bce, val_ce + config.lambda_cls * val_bce))
        if progress_fn is not None:
            progress_fn(epoch, log[-2], log[-1])
        if checkpoint_fn is not None and epoch > settings.epochs - settings.keep_checkpoints:
            checkpoint_fn(epoch, model)
    return model, log


def evaluate_loss(model: Model, samples: list[Sample], batch_size: int,
                  layout_rng: np.random.Generator) -> tuple[float, float]:
    """Mean eval-mode losses over a sample list (teacher-forced)."""
    if not samples:
        return float("nan"), float("nan")
    sums = np.zeros(2)
    n = 0
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            seqs = [assemble_sample(s, MODE_TRAIN, layout_rng, model.config) for s in batch]
            labels = np.stack([s.labels for s in batch])
            _, ce, bce = model.loss_batch(seqs, labels, train=False)
            sums += (ce, bce)
            n += 1
    return tuple(sums / n)
