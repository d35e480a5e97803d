"""Unidirectional causal linear attention with positive random features.

The softmax kernel exp(q.k/sqrt(d)) is estimated by phi(q).phi(k) with
phi(x) = exp(omega.x - |x|^2/2)/sqrt(m), queries and keys pre-scaled by
d^(-1/4). Causality comes from prefix sums over phi(k_j) v_j^T, giving an
O(n*m*d) pass instead of the O(n^2*d) exact form. An exact-softmax oracle
and wall-clock scaling benchmarks live alongside for verification.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad

_TRIL_CACHE: dict = {}


def _tril(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    if key not in _TRIL_CACHE:
        _TRIL_CACHE[key] = np.tril(np.ones((n, n), dtype=dtype))
    return _TRIL_CACHE[key]


@dataclass(frozen=True)
class RandomFeatureMap:
    """Fixed projection matrix for the positive random-feature map."""

    omega: np.ndarray  # [m, d]
    seed: int
    orthogonal: bool = False

    @property
    def m(self) -> int:
        return self.omega.shape[0]

    @property
    def d(self) -> int:
        return self.omega.shape[1]

    @classmethod
    def draw(cls, d: int, m: int, seed: int, orthogonal: bool = False) -> "RandomFeatureMap":
        if m < 1:
            raise ValueError(f"feature count must be >= 1, got {m}")
        rng = np.random.default_rng(seed)
        if not orthogonal:
            omega = rng.standard_normal((m, d))
        else:
            # Block-orthogonal rows: QR per d-row block, all rows rescaled to
            # norm sqrt(d) so each block Gram is exactly a scaled identity.
            blocks = []
            for start in range(0, m, d):
                rows = min(d, m - start)
                g = rng.standard_normal((d, d))
                q, r = np.linalg.qr(g)
                q = q * np.sign(np.diag(r))  # deterministic sign convention
                blocks.append(q.T[:rows] * np.sqrt(d))
            omega = np.concatenate(blocks, axis=0)
        return cls(omega=omega, seed=seed, orthogonal=orthogonal)


def _phi_np(x: np.ndarray, fmap: RandomFeatureMap) -> np.ndarray:
    proj = x @ fmap.omega.T.astype(x.dtype, copy=False)
    sq = 0.5 * (x * x).sum(axis=-1, keepdims=True)
    return np.exp(proj - sq) / np.sqrt(fmap.m, dtype=x.dtype)


def feature_map(x, fmap: RandomFeatureMap):
    """phi(x) = exp(omega.x - |x|^2/2)/sqrt(m), strictly positive.

    Accepts a Tensor (differentiable) or a plain ndarray.
    """
    if isinstance(x, np.ndarray):
        return _phi_np(x, fmap)
    proj = x @ Tensor(fmap.omega.T)
    sq = (x * x).sum(axis=-1, keepdims=True).scale(0.5)
    return (proj - sq).exp().scale(1.0 / np.sqrt(fmap.m))


@dataclass
class PrefixState:
    """Running sums S = sum phi(k_j) v_j^T and z = sum phi(k_j) over j <= i.

    Leading dimensions are free (e.g. heads); the last two of S are [m, dv].
    """

    S: np.ndarray
    z: np.ndarray

    @classmethod
    def zeros(cls, m: int, dv: int, lead: tuple[int, ...] = (), dtype=np.float64) -> "PrefixState":
        return cls(S=np.zeros(lead + (m, dv), dtype=dtype), z=np.zeros(lead + (m,), dtype=dtype))

    def update(self, kp: np.ndarray, v: np.ndarray) -> None:
        self.S += kp[..., :, None] * v[..., None, :]
        self.z += kp

    def readout(self, qp: np.ndarray, eps: float) -> np.ndarray:
        num = (qp[..., :, None] * self.S).sum(axis=-2)
        den = (qp * self.z).sum(axis=-1) + eps
        return num / den[..., None]


def causal_scan_reference(qp: np.ndarray, kp: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """One-pass sequential prefix scan over feature-mapped inputs (reference)."""
    n = qp.shape[-2]
    state = PrefixState.zeros(qp.shape[-1], v.shape[-1], lead=qp.shape[:-2], dtype=qp.dtype)
    out = np.empty(v.shape, dtype=v.dtype)
    for i in range(n):
        state.update(kp[..., i, :], v[..., i, :])
        out[..., i, :] = state.readout(qp[..., i, :], eps)
    return out


def _causal_core_forward(qp, kp, v, eps, chunk):
    """Chunked block scan: per-block causal GEMMs plus carried prefix state.

    Returns (out, den, block states) with entry states saved per block for
    the backward pass.
    """
    lead = qp.shape[:-2]
    n, m = qp.shape[-2:]
    dv = v.shape[-1]
    B = int(np.prod(lead)) if lead else 1
    Q = qp.reshape(B, n, m)
    K = kp.reshape(B, n, m)
    V = v.reshape(B, n, dv)
    S = np.zeros((B, m, dv), dtype=qp.dtype)
    z = np.zeros((B, m), dtype=qp.dtype)
    out = np.empty((B, n, dv), dtype=v.dtype)
    den = np.empty((B, n), dtype=qp.dtype)
    entry_states = []
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        entry_states.append((S, z))
        qb, kb, vb = Q[:, s:e], K[:, s:e], V[:, s:e]
        att = qb @ np.swapaxes(kb, -1, -2)
        att *= _tril(e - s, att.dtype)
        num = att @ vb + qb @ S
        den[:, s:e] = att.sum(axis=-1) + (qb @ z[:, :, None])[:, :, 0] + eps
        out[:, s:e] = num / den[:, s:e, None]
        S = S + np.swapaxes(kb, -1, -2) @ vb
        z = z + kb.sum(axis=1)
    return out.reshape(lead + (n, dv)), den.reshape(lead + (n,)), entry_states


def _causal_core_backward(qp, kp, v, out, den, entry_states, grad, eps, chunk):
    lead = qp.shape[:-2]
    n, m = qp.shape[-2:]
    dv = v.shape[-1]
    B = int(np.prod(lead)) if lead else 1
    Q = qp.reshape(B, n, m)
    K = kp.reshape(B, n, m)
    V = v.reshape(B, n, dv)
    O = out.reshape(B, n, dv)
    D = den.reshape(B, n)
    g = grad.reshape(B, n, dv)

    G = g / D[:, :, None]
    dD = -(g * O).sum(axis=-1) / D
    dQ = np.empty_like(Q)
    dK = np.empty_like(K)
    dV = np.empty_like(V)
    A = np.zeros((B, m, dv), dtype=qp.dtype)   # suffix sum of qp_i G_i^T
    Bz = np.zeros((B, m), dtype=qp.dtype)      # suffix sum of dD_i qp_i

    starts = list(range(0, n, chunk))
    for bi in range(len(starts) - 1, -1, -1):
        s = starts[bi]
        e = min(s + chunk, n)
        S_prev, z_prev = entry_states[bi]
        qb, kb, vb = Q[:, s:e], K[:, s:e], V[:, s:e]
        Gb, dDb = G[:, s:e], dD[:, s:e]
        tril = _tril(e - s, qp.dtype)
        M = (Gb @ np.swapaxes(vb, -1, -2) + dDb[:, :, None]) * tril
        att = (qb @ np.swapaxes(kb, -1, -2)) * tril
        dQ[:, s:e] = M @ kb + Gb @ np.swapaxes(S_prev, -1, -2) + dDb[:, :, None] * z_prev[:, None, :]
        dK[:, s:e] = np.swapaxes(M, -1, -2) @ qb + vb @ np.swapaxes(A, -1, -2) + Bz[:, None, :]
        dV[:, s:e] = np.swapaxes(att, -1, -2) @ Gb + kb @ A
        A = A + np.swapaxes(qb, -1, -2) @ Gb
        Bz = Bz + (np.swapaxes(qb, -1, -2) @ dDb[:, :, None])[:, :, 0]
    return dQ.reshape(qp.shape), dK.reshape(kp.shape), dV.reshape(v.shape)


def causal_linear_attention(q, k, v, fmap: RandomFeatureMap, eps: float = 1e-6,
                            chunk: int = 64, state_out: list | None = None):
    """out_i = (phi(q_i)^T S_i) / (phi(q_i)^T z_i + eps) with prefix sums over j <= i.

    q, k: [..., n, d]; v: [..., n, dv]. Queries and keys are scaled by
    d^(-1/4) before the feature map. Differentiable when given Tensors;
    ndarrays take a tape-free path. When `state_out` is given, the final
    PrefixState is appended (used to seed incremental decoding).
    """
    if eps <= 0:
        raise ValueError("denominator stabilizer eps must be positive")
    raw = isinstance(q, np.ndarray)
    qd = q if raw else q.data
    kd = k if raw else k.data
    vd = v if raw else v.data
    if qd.shape != kd.shape or qd.shape[:-1] != vd.shape[:-1]:
        raise ValueError(f"q/k/v shapes incompatible: {qd.shape}, {kd.shape}, {vd.shape}")
    scale = qd.shape[-1] ** -0.25

    if raw:
        qp = _phi_np(qd * scale, fmap)
        kp = _phi_np(kd * scale, fmap)
        out, _, states = _causal_core_forward(qp, kp, vd, eps, chunk)
        if state_out is not None:
            _append_final_state(state_out, states, kp, vd, chunk)
        return out

    qp = feature_map(q.scale(scale), fmap)
    kp = feature_map(k.scale(scale), fmap)
    out_data, den, entry_states = _causal_core_forward(qp.data, kp.data, v.data, eps, chunk)
    if state_out is not None:
        _append_final_state(state_out, entry_states, kp.data, v.data, chunk)
    out = Tensor._from_op(out_data, (qp, kp, v), "causal_linear_attention")
    if out.requires_grad:
        def _bw():
            dqp, dkp, dvv = _causal_core_backward(
                qp.data, kp.data, v.data, out_data, den, entry_states, out.grad, eps, chunk)
            if qp.requires_grad:
                qp._accum(dqp, own=True)
            if kp.requires_grad:
                kp._accum(dkp, own=True)
            if v.requires_grad:
                v._accum(dvv, own=True)
        out._backward = _bw
    return out


def _append_final_state(state_out: list, entry_states, kp: np.ndarray, v: np.ndarray, chunk: int):
    lead = kp.shape[:-2]
    n, m = kp.shape[-2:]
    last_start = ((n - 1) // chunk) * chunk if n else 0
    S_prev, z_prev = entry_states[-1] if entry_states else (0.0, 0.0)
    B = int(np.prod(lead)) if lead else 1
    kb = kp.reshape(B, n, m)[:, last_start:]
    vb = v.reshape(B, n, -1)[:, last_start:]
    S = (S_prev + np.swapaxes(kb, -1, -2) @ vb).reshape(lead + (m, v.shape[-1]))
    z = (z_prev + kb.sum(axis=1)).reshape(lead + (m,))
    state_out.append(PrefixState(S=S, z=z))


def exact_causal_softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Reference oracle: out_i = sum_{j<=i} softmax(q_i.k_j/sqrt(d)) v_j, explicit loop."""
    n, d = q.shape[-2], q.shape[-1]
    out = np.empty_like(v)
    for i in range(n):
        logits = (k[..., : i + 1, :] @ q[..., i, :, None])[..., 0] / np.sqrt(d)
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        out[..., i, :] = (w[..., None] * v[..., : i + 1, :]).sum(axis=-2)
    return out


def exact_causal_softmax_attention_fast(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized masked-softmax form of the oracle (used for benchmarking)."""
    d = q.shape[-1]
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(d, dtype=q.dtype)
    n = q.shape[-2]
    mask = np.tril(np.ones((n, n), dtype=bool))
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


BENCH_CSV_HEADER = ["n", "method", "median_ms", "p10_ms", "p90_ms"]


@dataclass
class BenchRow:
    n: int
    method: str
    median_ms: float
    p10_ms: float
    p90_ms: float

    def as_csv(self) -> str:
        return f"{self.n},{self.method},{self.median_ms:.4f},{self.p10_ms:.4f},{self.p90_ms:.4f}"


def bench_scaling(n_values: list[int], m: int = 64, d: int = 64, repeats: int = 5,
                  methods: tuple[str, ...] = ("favor", "exact"), seed: int = 0) -> list[BenchRow]:
    """Median wall-times of the linear kernel vs exact attention per sequence length.

    float32 inputs (benchmark mode); one warmup run per cell before timing.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    fmap = RandomFeatureMap.draw(d, m, seed=seed)
    rows = []
    for n in n_values:
        q = rng.standard_normal((1, n, d)).astype(np.float32)
        k = rng.standard_normal((1, n, d)).astype(np.float32)
        v = rng.standard_normal((1, n, d)).astype(np.float32)
        for method in methods:
            if method == "favor":
                run = lambda: causal_linear_attention(q, k, v, fmap, chunk=128)
            elif method == "exact":
                run = lambda: exact_causal_softmax_attention_fast(q, k, v)
            else:
                raise ValueError(f"unknown bench method {method!r}")
            run()  # warmup
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                times.append((time.perf_counter() - t0) * 1e3)
            rows.append(BenchRow(n=n, method=method,
                                 median_ms=float(np.median(times)),
                                 p10_ms=float(np.percentile(times, 10)),
                                 p90_ms=float(np.percentile(times, 90))))
    return rows


def write_bench_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w") as f:
        f.write(",".join(BENCH_CSV_HEADER) + "\n")
        for r in rows:
            f.write(r.as_csv() + "\n")
