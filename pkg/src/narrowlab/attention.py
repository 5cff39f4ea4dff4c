"""Textual, dual and masked-dual cross-attention with target-token recording.

Shapes are batched and channel-last: image features ``f_i`` are (B, h*w, c),
text features (B, n_t, c_t), selected image features (B, n, c_i).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class AttentionBlockWeights:
    W_Q: Tensor   # c x d
    W_K: Tensor   # c_t x d
    W_V: Tensor   # c_t x c
    W_Ki: Tensor  # c_i x d
    W_Vi: Tensor  # c_i x c

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]


@dataclass
class AttentionRecord:
    block_id: int
    resolution: tuple[int, int]
    map: np.ndarray  # (B, h, w)


def _target_column(probs: np.ndarray, target_index) -> np.ndarray:
    B, N, n_t = probs.shape
    idx = np.broadcast_to(np.asarray(target_index), (B,))
    if np.any(idx < 0) or np.any(idx >= n_t):
        raise IndexError(f"target_index {target_index} outside {n_t} tokens")
    return probs[np.arange(B), :, idx]


def _attend(q: Tensor, keys: Tensor, values: Tensor) -> tuple[Tensor, Tensor]:
    d = q.shape[-1]
    logits = nx.mul(nx.matmul(q, nx.transpose(keys)), 1.0 / math.sqrt(d))
    probs = nx.softmax(logits, axis=-1)
    return nx.matmul(probs, values), probs


def _textual(f_i, f_ct, w: AttentionBlockWeights):
    q = nx.matmul(f_i, w.W_Q)
    out, probs = _attend(q, nx.matmul(f_ct, w.W_K), nx.matmul(f_ct, w.W_V))
    return q, out, probs


def visual_term(q: Tensor, f_ci, w: AttentionBlockWeights) -> Tensor:
    f_ci = nx.as_tensor(f_ci)
    if f_ci.shape[-2] == 0:
        raise ValueError("visual cross-attention needs a nonempty feature selection")
    out, _ = _attend(q, nx.matmul(f_ci, w.W_Ki), nx.matmul(f_ci, w.W_Vi))
    return out


def _record(probs: Tensor, target_index, hw, block_id) -> AttentionRecord:
    col = _target_column(probs.data, target_index)
    return AttentionRecord(block_id, tuple(hw), col.reshape(col.shape[0], *hw).copy())


def textual_cross_attention(f_i, f_ct, w: AttentionBlockWeights, target_index,
                            hw: tuple[int, int], block_id: int = 0):
    f_i, f_ct = nx.as_tensor(f_i), nx.as_tensor(f_ct)
    _, out, probs = _textual(f_i, f_ct, w)
    return out, _record(probs, target_index, hw, block_id)


def dual_cross_attention(f_i, f_ct, f_ci, w: AttentionBlockWeights, target_index,
                         hw: tuple[int, int], block_id: int = 0):
    f_i, f_ct = nx.as_tensor(f_i), nx.as_tensor(f_ct)
    q, text, probs = _textual(f_i, f_ct, w)
    out = nx.add(text, visual_term(q, f_ci, w))
    return out, _record(probs, target_index, hw, block_id)


def masked_dual_cross_attention(f_i, f_ct, f_ci, w: AttentionBlockWeights, scope,
                                target_index, hw: tuple[int, int], block_id: int = 0):
    """Visual term gated per query location by ``scope`` (B, R, R) resized to ``hw``."""
    f_i, f_ct = nx.as_tensor(f_i), nx.as_tensor(f_ct)
    q, text, probs = _textual(f_i, f_ct, w)
    gate = scope_at(scope, hw)
    out = nx.add(text, nx.mul(visual_term(q, f_ci, w), gate))
    return out, _record(probs, target_index, hw, block_id)


def scope_at(scope, hw: tuple[int, int]) -> np.ndarray:
    """Resize a (B, R, R) scope to (B, h*w, 1), ready to broadcast over channels."""
    scope = np.asarray(scope, dtype=np.float64)
    if scope.ndim == 2:
        scope = scope[None]
    g = nx.resize_grid(scope, hw)
    return g.reshape(g.shape[0], -1, 1)


def aggregate_records(recs: list[AttentionRecord], canonical: int) -> np.ndarray:
    """Resize every record to canonical x canonical and average over blocks."""
    if not recs:
        raise ValueError("aggregate_records: no records")
    total = None
    for r in recs:
        m = nx.resize_grid(r.map, (canonical, canonical))
        total = m if total is None else total + m
    return total / len(recs)
