"""Cross-attention against a persistent repository of source features.

The repository is built once per input pair: source features are
projected to a latent token matrix Z, and keys/values are projected from
Z. Every attention stage then reads the same repository; queries come
from per-modality patch features. Ablation variants bypass the latent
projection (keys/values straight from source features), the key/value
projections (attend against Z itself), or the repository entirely
(self-attention over the query features).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .instrumentation import bump

VARIANTS = ("full", "no_z", "no_kv", "no_pr")


def _kaiming_mat(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


class Linear:
    """Dense projection on token matrices: y = W x + b, x is (in, T)."""

    def __init__(self, rng: np.random.Generator, d_out: int, d_in: int, prefix: str,
                 bias: bool = True):
        self.w = Tensor(_kaiming_mat(rng, d_out, d_in), requires_grad=True, name=f"{prefix}.w")
        self.b = Tensor(np.zeros((d_out, 1)), requires_grad=True, name=f"{prefix}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(self.w, x)
        return y + self.b if self.b is not None else y

    def named(self):
        out = [(self.w.name, self.w)]
        if self.b is not None:
            out.append((self.b.name, self.b))
        return out


class AttentionParams:
    """Parameters for one attention stage.

    Query projections are modality specific; head recombination and the
    two-modality merge are shared. Repository projections (latent Z,
    keys, values) exist only on the stage that owns repository
    construction, or on every stage for the repository-free variant.
    """

    def __init__(self, rng: np.random.Generator, d: int, c_in: int, heads: int,
                 head_dim: int, prefix: str, own_z: bool, own_kv: bool):
        if heads * head_dim != d:
            raise ContractError(f"token width {d} != heads {heads} x head_dim {head_dim}")
        self.d = d
        self.heads = heads
        self.head_dim = head_dim
        self.q_vis = Linear(rng, d, c_in, f"{prefix}.q_vis")
        self.q_ir = Linear(rng, d, c_in, f"{prefix}.q_ir")
        self.attn_out = Linear(rng, d, d, f"{prefix}.attn_out")
        self.merge = Linear(rng, d, 2 * d, f"{prefix}.merge")
        self.z_proj = Linear(rng, d, d, f"{prefix}.z") if own_z else None
        # key bias omitted: under row softmax it shifts every logit in a
        # row by the same amount, so it can never influence the output
        self.kv_k = Linear(rng, d, d, f"{prefix}.k", bias=False) if own_kv else None
        self.kv_v = Linear(rng, d, d, f"{prefix}.v") if own_kv else None

    def named(self):
        out = []
        for blk in (self.q_vis, self.q_ir, self.attn_out, self.merge,
                    self.z_proj, self.kv_k, self.kv_v):
            if blk is not None:
                out.extend(blk.named())
        return out


@dataclass
class PersistentRepository:
    """Read-only latent memory shared by every attention stage of a pair."""

    z: Tensor
    k: Tensor
    v: Tensor

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in (self.z, self.k, self.v):
            h.update(t.data.tobytes())
        return h.hexdigest()


def build_repository(f_src: Tensor, p: AttentionParams, variant: str = "full") -> PersistentRepository:
    """Project (c, H, W) source features into the token repository.

    `no_z` keeps the raw source tokens as the latent matrix; `no_kv`
    degrades keys and values to the latent matrix itself.
    """
    if variant not in ("full", "no_z", "no_kv"):
        raise ContractError(f"unknown repository variant {variant!r}")
    c, h, w = f_src.shape
    tokens = ad.reshape(f_src, (c, h * w))
    if variant == "no_z":
        z = tokens
        if c != p.d:
            raise ShapeError(f"no_z needs source channels {c} == token width {p.d}")
    else:
        if p.z_proj is None:
            raise ContractError("this stage does not own a latent projection")
        z = p.z_proj(tokens)
    if variant == "no_kv":
        k, v = z, z
    else:
        if p.kv_k is None:
            raise ContractError("this stage does not own key/value projections")
        k = p.kv_k(z)
        v = p.kv_v(z)
    return PersistentRepository(z=z, k=k, v=v)


def cross_attend(f_q: Tensor, repo: PersistentRepository | None, p: AttentionParams,
                 modality: str, weights_sink: list | None = None) -> Tensor:
    """Multi-head attention of per-modality query features against the repository.

    Queries are projected from (c, H, W) features; each head computes
    softmax(Q_h^T K_h / sqrt(head_dim)) V_h^T over repository tokens. With
    `repo=None` the features attend to themselves through the stage's own
    key/value projections (the repository-free ablation).
    """
    bump("attention")
    if modality not in ("vis", "ir"):
        raise ContractError(f"modality must be 'vis' or 'ir', got {modality!r}")
    c, h, w = f_q.shape
    tokens = ad.reshape(f_q, (c, h * w))
    q = (p.q_vis if modality == "vis" else p.q_ir)(tokens)
    if repo is None:
        if p.kv_k is None:
            raise ContractError("repository-free attention needs stage-owned k/v projections")
        if c != p.d:
            raise ShapeError(f"repository-free attention needs channels {c} == width {p.d}")
        k = p.kv_k(tokens)
        v = p.kv_v(tokens)
    else:
        k, v = repo.k, repo.v
    scale = 1.0 / np.sqrt(p.head_dim)
    heads = []
    for i in range(p.heads):
        lo, hi = i * p.head_dim, (i + 1) * p.head_dim
        qh = ad.rows(q, lo, hi)
        kh = ad.rows(k, lo, hi)
        vh = ad.rows(v, lo, hi)
        weights = ad.softmax_rows(ad.matmul(ad.transpose2d(qh), kh) * scale)
        if weights_sink is not None:
            weights_sink.append(weights)
        heads.append(ad.matmul(vh, ad.transpose2d(weights)))
    out = p.attn_out(ad.concat(heads, axis=0))
    return ad.reshape(out, (p.d, h, w))


def attention_stage(vis_feats: Tensor, ir_feats: Tensor,
                    repo: PersistentRepository | None,
                    p: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """One stage: attend each modality, merge into a fused feature map.

    Returns (merged, vis_attended, ir_attended); the attended maps feed
    the next stage's queries.
    """
    bump("attention")
    if vis_feats.shape != ir_feats.shape:
        raise ShapeError(f"modality features differ: {vis_feats.shape} vs {ir_feats.shape}")
    av = cross_attend(vis_feats, repo, p, "vis")
    ai = cross_attend(ir_feats, repo, p, "ir")
    d, h, w = av.shape
    both = ad.concat([ad.reshape(av, (d, h * w)), ad.reshape(ai, (d, h * w))], axis=0)
    merged = ad.reshape(p.merge(both), (d, h, w))
    return merged, av, ai
