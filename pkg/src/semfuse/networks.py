"""Teacher and student fusion networks.

The teacher encodes the stacked source pair, builds the persistent
repository once, runs the configured number of attention stages over
per-modality patch features, and decodes the final stage to a fused
image. The student is a compact stem / dense-block / transition stack
with a sigmoid head; 1x1 stride-2 adapters expose per-block features in
the same shape as the teacher's per-stage features so the distillation
terms can compare them directly.

Both networks map [0, 1] inputs of any size >= 3x3 to an output of
exactly the input size.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, build_repository, attention_stage
from .autodiff import Tensor
from .errors import CheckpointError, ContractError, ShapeError

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class TeacherConfig:
    base_channels: int = 16
    token_width: int = 32          # channel width of source features and attention tokens
    stages: int = 3
    heads: int = 4
    head_dim: int = 8
    variant: str = "full"          # full | no_z | no_kv | no_pr

    def __post_init__(self):
        if self.heads * self.head_dim != self.token_width:
            raise ContractError(
                f"token_width {self.token_width} != heads {self.heads} x head_dim {self.head_dim}")
        if self.variant not in ("full", "no_z", "no_kv", "no_pr"):
            raise ContractError(f"unknown attention variant {self.variant!r}")
        if self.stages < 1:
            raise ContractError("need at least one attention stage")


@dataclass(frozen=True)
class StudentConfig:
    stem_channels: int = 32
    growth: int = 16
    layers_per_block: int = 4
    blocks: int = 3
    tap_width: int = 32            # adapter output channels, matches teacher token_width


def _kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


class ParamModule:
    """Ordered named parameters; declaration order fixes the checkpoint layout."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def _conv(self, rng, name: str, c_out: int, c_in: int, k: int) -> tuple[Tensor, Tensor]:
        w = Tensor(_kaiming_conv(rng, c_out, c_in, k), requires_grad=True, name=f"{name}.w")
        b = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")
        self._params[w.name] = w
        self._params[b.name] = b
        return w, b

    def _adopt(self, named: list[tuple[str, Tensor]]) -> None:
        for name, t in named:
            self._params[name] = t

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def config_digest(self) -> str:
        raise NotImplementedError

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def param_count(net: ParamModule) -> int:
    """Total trainable scalar count."""
    return sum(t.data.size for t in net.parameters())


def _conv_block(x: Tensor, w: Tensor, b: Tensor, padding: int, stride: int = 1,
                activate: bool = True) -> Tensor:
    out = ad.conv2d(x, w, padding=padding, stride=stride) + ad.reshape(b, (b.size, 1, 1))
    return ad.leaky_relu(out, LEAKY_SLOPE) if activate else out


def dense_block(x: Tensor, layer_params: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Densely connected conv layers: each consumes every prior feature map.

    Output channels = input channels + growth * len(layer_params).
    """
    feats = [x]
    for w, b in layer_params:
        cur = feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)
        feats.append(_conv_block(cur, w, b, padding=1))
    return ad.concat(feats, axis=0)


class TeacherNet(ParamModule):
    """Fusion network with repository cross-attention over semantic patches."""

    def __init__(self, cfg: TeacherConfig = TeacherConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        cb, d = cfg.base_channels, cfg.token_width
        self.enc1 = self._conv(rng, "enc1", cb, 2, 3)
        self.enc2 = self._conv(rng, "enc2", d, cb, 3)
        self.pvis1 = self._conv(rng, "patch_vis1", cb, 1, 3)
        self.pvis2 = self._conv(rng, "patch_vis2", d, cb, 3)
        self.pir1 = self._conv(rng, "patch_ir1", cb, 1, 3)
        self.pir2 = self._conv(rng, "patch_ir2", d, cb, 3)
        self.stages: list[AttentionParams] = []
        for m in range(cfg.stages):
            own_repo = (m == 0) if cfg.variant != "no_pr" else False
            own_kv = own_repo or cfg.variant == "no_pr"
            own_z = own_repo and cfg.variant != "no_z"
            p = AttentionParams(rng, d, d, cfg.heads, cfg.head_dim,
                                f"stage{m}", own_z=own_z, own_kv=own_kv)
            self.stages.append(p)
            self._adopt(p.named())
        self.dec1 = self._conv(rng, "dec1", cb, d, 3)
        self.dec2 = self._conv(rng, "dec2", 1, cb, 3)

    def _encode_pair(self, vis: Tensor, ir: Tensor) -> Tensor:
        both = ad.concat([vis, ir], axis=0)
        h = _conv_block(both, *self.enc1, padding=1)
        return _conv_block(h, *self.enc2, padding=1, stride=2)

    def _encode_patches(self, patches: list, which: str) -> Tensor:
        w1, b1 = (self.pvis1 if which == "vis" else self.pir1)
        w2, b2 = (self.pvis2 if which == "vis" else self.pir2)
        total = None
        for p in patches:
            t = p if isinstance(p, Tensor) else Tensor(np.asarray(p)[None])
            if t.data.ndim == 2:
                t = ad.reshape(t, (1,) + t.shape)
            f = _conv_block(_conv_block(t, w1, b1, padding=1), w2, b2, padding=1, stride=2)
            total = f if total is None else total + f
        return total

    def forward(self, vis, ir, patches_vis: list, patches_ir: list
                ) -> tuple[Tensor, list[Tensor]]:
        """Fuse one pair. Returns (fused image (1, H, W), per-stage features)."""
        vis = vis if isinstance(vis, Tensor) else Tensor(np.asarray(vis)[None])
        ir = ir if isinstance(ir, Tensor) else Tensor(np.asarray(ir)[None])
        if vis.shape != ir.shape:
            raise ShapeError(f"source shapes differ: {vis.shape} vs {ir.shape}")
        if not patches_vis and not patches_ir:
            raise ContractError("both patch lists are empty")
        _, h, w = vis.shape
        f_src = self._encode_pair(vis, ir)
        # A modality with no patches queries from the shared source features.
        f_pvis = self._encode_patches(patches_vis, "vis") if patches_vis else f_src
        f_pir = self._encode_patches(patches_ir, "ir") if patches_ir else f_src
        repo = None
        if self.cfg.variant != "no_pr":
            repo = build_repository(f_src, self.stages[0], variant=self.cfg.variant)
        feats = []
        cur_vis, cur_ir = f_pvis, f_pir
        for p in self.stages:
            merged, cur_vis, cur_ir = attention_stage(cur_vis, cur_ir, repo, p)
            feats.append(merged)
        up = ad.crop2d(ad.upsample_nearest2(feats[-1]), h, w)
        out = _conv_block(up, *self.dec1, padding=1)
        out = _conv_block(out, *self.dec2, padding=1, activate=False)
        return ad.sigmoid(out), feats

    def config_digest(self) -> str:
        return hashlib.sha256(f"teacher:{self.cfg}".encode()).hexdigest()


class StudentNet(ParamModule):
    """Compact dense-block fusion network, runs without any prior machinery."""

    def __init__(self, cfg: StudentConfig = StudentConfig(), seed: int = 1):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        sc, g = cfg.stem_channels, cfg.growth
        self.stem = self._conv(rng, "stem", sc, 2, 3)
        self.blocks: list[list[tuple[Tensor, Tensor]]] = []
        self.adapters: list[tuple[Tensor, Tensor]] = []
        self.transitions: list[tuple[Tensor, Tensor]] = []
        block_out = sc + g * cfg.layers_per_block
        for b in range(cfg.blocks):
            layers = [self._conv(rng, f"block{b}.layer{j}", g, sc + g * j, 3)
                      for j in range(cfg.layers_per_block)]
            self.blocks.append(layers)
            self.adapters.append(self._conv(rng, f"adapter{b}", cfg.tap_width, block_out, 1))
            self.transitions.append(self._conv(rng, f"transition{b}", sc, block_out, 1))
        self.head = self._conv(rng, "head", 1, sc, 3)

    def forward(self, vis, ir) -> tuple[Tensor, list[Tensor]]:
        """Fuse one pair. Returns (fused image (1, H, W), per-block adapted features)."""
        vis = vis if isinstance(vis, Tensor) else Tensor(np.asarray(vis)[None])
        ir = ir if isinstance(ir, Tensor) else Tensor(np.asarray(ir)[None])
        if vis.shape != ir.shape:
            raise ShapeError(f"source shapes differ: {vis.shape} vs {ir.shape}")
        cur = _conv_block(ad.concat([vis, ir], axis=0), *self.stem, padding=1)
        taps = []
        for layers, adapter, transition in zip(self.blocks, self.adapters, self.transitions):
            blocked = dense_block(cur, layers)
            taps.append(_conv_block(blocked, *adapter, padding=0, stride=2, activate=False))
            cur = _conv_block(blocked, *transition, padding=0)
        out = _conv_block(cur, *self.head, padding=1, activate=False)
        return ad.sigmoid(out), taps

    def config_digest(self) -> str:
        return hashlib.sha256(f"student:{self.cfg}".encode()).hexdigest()


# ---------------------------------------------------------------------------
# checkpoint format: MAGIC, 32-byte config digest, then per parameter in
# declaration order: u16 name length, name, u8 ndim, u32 dims, float64 LE data.

MAGIC = b"SMFUSE01"


def save_checkpoint(path, net: ParamModule) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += bytes.fromhex(net.config_digest())
    for name, t in net.named_parameters():
        enc = name.encode()
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", t.data.ndim)
        for dim in t.data.shape:
            blob += struct.pack("<I", dim)
        blob += t.data.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path, net: ParamModule) -> None:
    """Restore parameters in place; the net must match the checkpoint's config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
    digest = blob[8:40].hex()
    if digest != net.config_digest():
        raise CheckpointError("checkpoint config digest does not match this network")
    pos = 40
    for name, t in net.named_parameters():
        if pos + 2 > len(blob):
            raise CheckpointError(f"checkpoint truncated before parameter {name}")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        got = blob[pos:pos + nlen].decode()
        pos += nlen
        if got != name:
            raise CheckpointError(f"parameter order mismatch: expected {name}, found {got}")
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        if shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} vs {t.data.shape}")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        t.data = arr.astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last parameter")
