"""One self-attention block, forward and analytic backward, with four
dropout modes on the attention matrix.

Modes:
  NONE        plain scaled dot-product attention.
  WEIGHTS     a binary mask multiplies the post-softmax weights. No
              inverted-dropout rescale by default; kept rows simply sum to
              less than one.
  SCORES      an additive {0, NEG_INF} mask hits the pre-softmax scores, so
              the surviving weights renormalize to one.
  ALL_DROPPED every unit removed. The attention matrix degenerates to the
              constant 1/L, every output row (pre output projection) is the
              column mean of V, and the query/key projections plus their dot
              product are skipped entirely.

One mask is shared across all heads of a layer: the decision space is the
L x L attention matrix of the layer, not per head.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numkernel import (
    NEG_INF,
    ContractViolation,
    ShapeError,
    matmul,
    softmax_rows,
)

_DROP_SENTINEL_CUTOFF = -1e29


class MaskMode(enum.Enum):
    NONE = "none"
    WEIGHTS = "weights"
    SCORES = "scores"
    ALL_DROPPED = "all_dropped"


@dataclass
class MaskMatrix:
    """Per-layer dropout mask for one sample.

    entries is L x L and binary {0,1} in WEIGHTS mode (1 = keep), or
    {0, NEG_INF} in SCORES mode (NEG_INF = dropped). NONE and ALL_DROPPED
    carry no entries.
    """

    mode: MaskMode
    entries: np.ndarray | None = None

    @staticmethod
    def none() -> "MaskMatrix":
        return MaskMatrix(MaskMode.NONE)

    @staticmethod
    def all_dropped() -> "MaskMatrix":
        return MaskMatrix(MaskMode.ALL_DROPPED)

    @staticmethod
    def weights(keep: np.ndarray) -> "MaskMatrix":
        return MaskMatrix(MaskMode.WEIGHTS, np.asarray(keep, dtype=np.float64))

    @staticmethod
    def scores_from_drop_bits(bits: np.ndarray) -> "MaskMatrix":
        entries = np.where(np.asarray(bits) != 0, NEG_INF, 0.0)
        return MaskMatrix(MaskMode.SCORES, entries)

    @staticmethod
    def from_drop_bits(bits: np.ndarray) -> "MaskMatrix":
        """Build a SCORES mask from drop bits (1 = drop), escalating to
        ALL_DROPPED when the whole matrix is dropped.

        A row with every unit dropped cannot be expressed in SCORES mode
        (its softmax is undefined), so such a mask also escalates the whole
        layer to the constant-attention path.
        """
        bits = np.asarray(bits)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ShapeError(f"drop bits must be square, got {bits.shape}")
        if np.all(bits != 0) or np.any(np.all(bits != 0, axis=1)):
            return MaskMatrix.all_dropped()
        return MaskMatrix.scores_from_drop_bits(bits)


@dataclass
class AttentionParams:
    """Projections of one attention layer; all four are d_model x d_model."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    num_heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}")
        if self.num_heads < 1 or d % self.num_heads != 0:
            raise ShapeError(
                f"d_model={d} not divisible by num_heads={self.num_heads}"
            )

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class AttentionCache:
    """Forward intermediates needed by attn_backward."""

    mode: MaskMode
    params: AttentionParams
    x: np.ndarray
    pre: np.ndarray                      # L x d_model, input to w_o
    valid_len: int | None = None
    # regular modes
    qh: np.ndarray | None = None         # (H, L, d_k)
    kh: np.ndarray | None = None
    vh: np.ndarray | None = None
    scores: np.ndarray | None = None     # (H, L, L), as fed to softmax
    attn: np.ndarray | None = None       # (H, L, L), post-softmax
    attn_used: np.ndarray | None = None  # post-mask weights (WEIGHTS mode)
    mask_entries: np.ndarray | None = None
    weights_rescale: float | None = None
    fallback_rows: np.ndarray | None = None
    # ALL_DROPPED mode
    v_full: np.ndarray | None = None


@dataclass
class AttentionGrads:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


def _split_heads(m: np.ndarray, num_heads: int) -> np.ndarray:
    length, d = m.shape
    return np.ascontiguousarray(
        m.reshape(length, num_heads, d // num_heads).transpose(1, 0, 2)
    )


def _merge_heads(t: np.ndarray) -> np.ndarray:
    num_heads, length, d_k = t.shape
    return np.ascontiguousarray(t.transpose(1, 0, 2).reshape(length, num_heads * d_k))


def _validate_mask(mask: MaskMatrix, length: int) -> None:
    if mask.mode in (MaskMode.NONE, MaskMode.ALL_DROPPED):
        if mask.entries is not None:
            raise ContractViolation(f"{mask.mode} mask must not carry entries")
        return
    e = mask.entries
    if e is None or e.shape != (length, length):
        shape = None if e is None else e.shape
        raise ShapeError(f"mask entries must be {length}x{length}, got {shape}")
    if mask.mode is MaskMode.WEIGHTS:
        if not np.all((e == 0.0) | (e == 1.0)):
            raise ContractViolation("WEIGHTS mask entries must be in {0, 1}")
    else:
        if not np.all((e == 0.0) | (e == NEG_INF)):
            raise ContractViolation("SCORES mask entries must be in {0, NEG_INF}")
        if np.any(np.all(e == NEG_INF, axis=1)):
            raise ContractViolation(
                "SCORES mask has a fully dropped row; use MaskMode.ALL_DROPPED"
            )


def constant_attention(v: np.ndarray, params: AttentionParams | None = None,
                       valid_len: int | None = None) -> np.ndarray:
    """Attention output when every unit is dropped.

    The softmax of an all-dropped score matrix is the constant 1/L, so each
    output row is the column mean of the value matrix v. With params given,
    the output projection is applied; without, the pre-projection rows are
    returned. The query/key projections never run on this path.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1:
        raise ShapeError(f"value matrix must be 2-D and nonempty, got {v.shape}")
    length = v.shape[0] if valid_len is None else valid_len
    if not 1 <= length <= v.shape[0]:
        raise ShapeError(f"valid_len {valid_len} out of range for L={v.shape[0]}")
    mean = v[:length].mean(axis=0)
    pre = np.tile(mean, (v.shape[0], 1))
    if params is None:
        return pre
    return matmul(pre, params.w_o)


def attn_forward(x: np.ndarray, params: AttentionParams,
                 mask: MaskMatrix | None = None,
                 valid_len: int | None = None,
                 weights_rescale: float | None = None) -> tuple[np.ndarray, AttentionCache]:
    """Run one attention layer under the given dropout mask.

    valid_len marks the prefix of real (non padding) positions: padding
    columns get an additive NEG_INF composed with the mask before softmax.
    A row left with no surviving score (only possible when a SCORES mask
    combines with padding) falls back to constant uniform weights over the
    valid positions, the same limit the all-dropped path takes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"input must be L x d_model with L >= 1, got {x.shape}")
    length, d = x.shape
    if d != params.d_model:
        raise ShapeError(f"input width {d} != d_model {params.d_model}")
    if valid_len is not None and not 1 <= valid_len <= length:
        raise ShapeError(f"valid_len {valid_len} out of range for L={length}")
    mask = MaskMatrix.none() if mask is None else mask
    _validate_mask(mask, length)

    if mask.mode is MaskMode.ALL_DROPPED:
        v = matmul(x, params.w_v)
        pre = constant_attention(v, valid_len=valid_len)
        y = matmul(pre, params.w_o)
        cache = AttentionCache(mask.mode, params, x, pre, valid_len=valid_len, v_full=v)
        return y, cache

    num_heads, d_k = params.num_heads, params.d_k
    qh = _split_heads(matmul(x, params.w_q), num_heads)
    kh = _split_heads(matmul(x, params.w_k), num_heads)
    vh = _split_heads(matmul(x, params.w_v), num_heads)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(d_k)

    additive = mask.entries if mask.mode is MaskMode.SCORES else None
    if valid_len is not None and valid_len < length:
        validity = np.zeros((length, length))
        validity[:, valid_len:] = NEG_INF
        additive = validity if additive is None else additive + validity

    fallback_rows = None
    if additive is not None:
        scores = scores + additive[None, :, :]
        row_dead = np.all(additive <= _DROP_SENTINEL_CUTOFF, axis=1)
        if valid_len is not None and valid_len < length:
            # padding columns never count as survivors
            live = additive[:, :valid_len] > _DROP_SENTINEL_CUTOFF
            row_dead = ~np.any(live, axis=1)
        if np.any(row_dead):
            fallback_rows = row_dead
            lv = length if valid_len is None else valid_len
            scores[:, row_dead, :] = 0.0
            if lv < length:
                scores[:, row_dead, lv:] = NEG_INF

    attn = softmax_rows(scores.reshape(num_heads * length, length)).reshape(
        num_heads, length, length
    )

    attn_used = attn
    if mask.mode is MaskMode.WEIGHTS:
        attn_used = attn * mask.entries[None, :, :]
        if weights_rescale is not None:
            attn_used = attn_used * weights_rescale

    pre = _merge_heads(attn_used @ vh)
    y = matmul(pre, params.w_o)
    cache = AttentionCache(
        mask.mode, params, x, pre, valid_len=valid_len,
        qh=qh, kh=kh, vh=vh, scores=scores, attn=attn,
        attn_used=attn_used if mask.mode is MaskMode.WEIGHTS else None,
        mask_entries=mask.entries, weights_rescale=weights_rescale,
        fallback_rows=fallback_rows,
    )
    return y, cache


def attn_backward(cache: AttentionCache, dy: np.ndarray,
                  dscores_extra: np.ndarray | None = None) -> tuple[np.ndarray, AttentionGrads]:
    """Reverse-mode pass matching a prior attn_forward.

    Mask entries are constants: no gradient flows through dropped units.
    dscores_extra, if given, is an extra gradient injected directly on the
    pre-softmax score matrix (single-head layers only); the mask generator
    uses this to differentiate its action log-probabilities.
    """
    dy = np.asarray(dy, dtype=np.float64)
    params = cache.params
    length, d = cache.x.shape
    if dy.shape != (length, d):
        raise ShapeError(f"dy shape {dy.shape} does not match output {(length, d)}")

    if cache.mode is MaskMode.ALL_DROPPED:
        if dscores_extra is not None:
            raise ContractViolation("no score matrix exists on the all-dropped path")
        dpre = dy @ params.w_o.T
        dw_o = cache.pre.T @ dy
        lv = length if cache.valid_len is None else cache.valid_len
        dmean = dpre.sum(axis=0)
        dv = np.zeros_like(cache.v_full)
        dv[:lv] = dmean / lv
        dw_v = cache.x.T @ dv
        dx = dv @ params.w_v.T
        zeros = np.zeros_like(params.w_q)
        return dx, AttentionGrads(zeros, zeros.copy(), dw_v, dw_o)

    num_heads, d_k = params.num_heads, params.d_k
    dpre = dy @ params.w_o.T
    dw_o = cache.pre.T @ dy
    dout_h = _split_heads(dpre, num_heads)

    attn_used = cache.attn_used if cache.attn_used is not None else cache.attn
    d_attn_used = dout_h @ cache.vh.transpose(0, 2, 1)
    dvh = attn_used.transpose(0, 2, 1) @ dout_h

    d_attn = d_attn_used
    if cache.mode is MaskMode.WEIGHTS:
        d_attn = d_attn_used * cache.mask_entries[None, :, :]
        if cache.weights_rescale is not None:
            d_attn = d_attn * cache.weights_rescale

    attn = cache.attn
    dscores = attn * (d_attn - (d_attn * attn).sum(axis=2, keepdims=True))
    if cache.fallback_rows is not None:
        dscores[:, cache.fallback_rows, :] = 0.0
    if dscores_extra is not None:
        if num_heads != 1:
            raise ContractViolation("score-gradient injection needs a single head")
        dscores = dscores + np.asarray(dscores_extra, dtype=np.float64)[None, :, :]

    dscores = dscores / np.sqrt(d_k)
    dqh = dscores @ cache.kh
    dkh = dscores.transpose(0, 2, 1) @ cache.qh

    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    dw_q = cache.x.T @ dq
    dw_k = cache.x.T @ dk
    dw_v = cache.x.T @ dv
    dx = dq @ params.w_q.T + dk @ params.w_k.T + dv @ params.w_v.T
    return dx, AttentionGrads(dw_q, dw_k, dw_v, dw_o)
