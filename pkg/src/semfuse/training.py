"""Alternating teacher/student optimization with adaptive updates.

One alternating step is: teacher update on the full objective with the
student frozen, then student update on the distillation objective with
the teacher frozen. First-order only; neither phase unrolls through the
other's update.
"""
from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .data import random_crop
from .errors import ContractError, NonFiniteError, TrainingAbort
from .losses import CSV_HEADER, LossBreakdown
from .networks import StudentNet, TeacherNet
from .priors import PriorProvider, make_patches, synth_labels

CLIP_NORM = 10.0
DIVERGENCE_FACTOR = 10.0
# warmup runs at one constant rate for both nets, high enough that a short
# budget produces a visible source-fidelity gain before annealing starts
PRETRAIN_LR = 5e-3


@dataclass(frozen=True)
class Ablations:
    """Switches matching the ablation study rows."""

    no_sam: bool = False
    no_z: bool = False
    no_kv: bool = False
    no_pr: bool = False
    no_fea: bool = False
    no_cont: bool = False
    no_cs: bool = False
    offline: bool = False

    def variant(self) -> str:
        picked = [name for name, flag in
                  (("no_z", self.no_z), ("no_kv", self.no_kv), ("no_pr", self.no_pr))
                  if flag]
        if len(picked) > 1:
            raise ContractError(f"attention variants are mutually exclusive: {picked}")
        return picked[0] if picked else "full"


@dataclass
class TrainConfig:
    lr_main: float = 5e-4
    lr_sub: float = 2e-3
    lr_floor: float = 1e-5
    batch: int = 4
    distill_epochs: int = 5
    pretrain_epochs: int = 0
    seed: int = 0
    crop: int = 32
    steps: int | None = None
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_sub <= 0 or self.lr_floor <= 0:
            raise ContractError("learning rates must be positive")
        if self.lr_floor > min(self.lr_main, self.lr_sub):
            raise ContractError(
                f"lr_floor {self.lr_floor} exceeds a peak learning rate")
        if self.batch < 1:
            raise ContractError(f"batch must be >= 1, got {self.batch}")
        if self.distill_epochs < 0 or self.pretrain_epochs < 0:
            raise ContractError("epoch counts must be >= 0")
        if self.steps is not None and self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.crop < 16:
            raise ContractError(f"crop must be >= 16, got {self.crop}")
        ab = self.ablations
        ab.variant()
        if ab.no_fea and ab.no_cont and ab.no_cs:
            raise ContractError("at least one distillation term must stay enabled")


def cosine_lr(step: int, total_steps: int, lr0: float, lr_floor: float) -> float:
    """Cosine annealing from lr0 down to lr_floor over total_steps."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    # exact endpoints: floating point does not guarantee x + (y - x) == y
    if step == 0:
        return lr0
    if step >= total_steps:
        return lr_floor
    return lr_floor + 0.5 * (lr0 - lr_floor) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Bias-corrected adaptive-moment updates over a named parameter dict."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ContractError(f"lr must be positive, got {lr}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(
                    f"non-finite gradient for parameter {name}", term=name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(params, max_norm: float = CLIP_NORM) -> float:
    """Rescale all gradients so their joint norm is at most max_norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        # scaling by max_norm/inf would silently zero every gradient
        raise TrainingAbort("gradient norm is non-finite", term="grad-norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@contextmanager
def frozen(tensors):
    """Temporarily clear requires_grad; restores on exit even after errors."""
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def diverged(prev_epoch_mean, cur_epoch_mean) -> bool:
    """True when the distillation loss grew past the epoch guard factor."""
    if prev_epoch_mean is None:
        return False
    return cur_epoch_mean > DIVERGENCE_FACTOR * prev_epoch_mean


@dataclass
class TrainState:
    """Everything one training run threads through its phases."""

    teacher: TeacherNet
    student: StudentNet
    cfg: TrainConfig
    provider: PriorProvider
    adam_m: Adam
    adam_s: Adam
    rng: np.random.Generator

    @property
    def enc(self):
        return self.provider.encoder

    @property
    def stub(self):
        return self.provider.stub


def make_state(teacher: TeacherNet, student: StudentNet, cfg: TrainConfig,
               provider: PriorProvider | None = None) -> TrainState:
    if provider is None:
        provider = PriorProvider(random_patches=cfg.ablations.no_sam)
    return TrainState(
        teacher=teacher, student=student, cfg=cfg, provider=provider,
        adam_m=Adam(dict(teacher.named_parameters())),
        adam_s=Adam(dict(student.named_parameters())),
        rng=np.random.default_rng([cfg.seed, 404]))


def _guard(term: str, fn):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingAbort(
            f"non-finite value while computing {term}: {exc}", term=term) from exc


def _priors(state: TrainState, vis, ir):
    mv = state.provider.masks_for(vis, "vis", rng=state.rng)
    mi = state.provider.masks_for(ir, "ir", rng=state.rng)
    return mv, mi, make_patches(vis, mv).patches, make_patches(ir, mi).patches


_TERM_KEYS = ("fea", "grad", "mse", "cs_ir", "cs_vis", "seg")


def _sample_terms(state: TrainState, vis, ir, need_seg: bool) -> dict:
    """All loss terms for one pair as graph scalars, None where ablated."""
    ab = state.cfg.ablations
    mv, mi, pv, pi = _priors(state, vis, ir)
    ref, feats = _guard("teacher-forward",
                        lambda: state.teacher.forward(vis, ir, pv, pi))
    fus, taps = _guard("student-forward",
                       lambda: state.student.forward(vis, ir))
    vt, it_ = Tensor(vis[None]), Tensor(ir[None])
    out = dict.fromkeys(_TERM_KEYS)
    if not ab.no_fea:
        out["fea"] = _guard("fea", lambda: losses.loss_fea(taps, feats))
    if not ab.no_cont:
        out["grad"], out["mse"] = _guard(
            "context", lambda: losses.context_bundle(ref, fus, vt, it_))
    if not ab.no_cs:
        out["cs_ir"], out["cs_vis"] = _guard(
            "cs", lambda: losses.loss_cs(fus, ref, vt, it_, mv, mi, state.enc))
    if need_seg:
        out["seg"] = _guard(
            "seg", lambda: losses.loss_seg(
                state.stub.forward(ref),
                synth_labels(mv, mi, state.stub.n_classes)))
    out["gap"] = float(np.mean(np.abs(fus.data - ref.data)))
    return out


def _batch_objective(state: TrainState, batch, need_seg: bool):
    """Mean loss terms over a batch: (total Tensor, float parts, mean gap)."""
    sums = dict.fromkeys(_TERM_KEYS)
    gaps = []
    for vis, ir in batch:
        terms = _sample_terms(state, vis, ir, need_seg)
        gaps.append(terms.pop("gap"))
        for key, t in terms.items():
            if t is None:
                continue
            sums[key] = t if sums[key] is None else sums[key] + t
    inv = 1.0 / len(batch)
    total = None
    for key, t in sums.items():
        if t is None:
            continue
        total = t if total is None else total + t
    total = total * inv
    # max with 0: every term is non-negative up to roundoff, and the log
    # rejects negative entries outright
    parts = {key: (max(0.0, float(t.data) * inv) if t is not None else 0.0)
             for key, t in sums.items()}
    return total, parts, float(np.mean(gaps))


def main_phase(state: TrainState, batch, lr: float):
    """One teacher update on the full objective; student untouched."""
    state.teacher.zero_grad()
    with frozen(p for _, p in state.student.named_parameters()):
        total, parts, gap = _batch_objective(state, batch, need_seg=True)
        ad.backward(total)
    clip_global_norm([p for _, p in state.teacher.named_parameters()])
    state.adam_m.step(lr)
    return parts, gap


def sub_phase(state: TrainState, batch, lr: float) -> float:
    """One student update on the distillation objective; teacher untouched."""
    state.student.zero_grad()
    with frozen(p for _, p in state.teacher.named_parameters()):
        total, parts, _ = _batch_objective(state, batch, need_seg=False)
        ad.backward(total)
    clip_global_norm([p for _, p in state.student.named_parameters()])
    state.adam_s.step(lr)
    return float(total.data)


@dataclass
class TrainReport:
    """Per-step loss rows plus epoch summaries and the final state digest."""

    rows: list
    epoch_sub: list
    epoch_gap: list
    diverged: bool
    checksum: str

    def write_csv(self, path) -> None:
        lines = [CSV_HEADER] + [r.csv_row() for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")


def _crop_pair(state: TrainState, vis, ir):
    size = state.cfg.crop
    if vis.shape == (size, size):
        return vis, ir
    return random_crop(vis, ir, size, state.rng)


def _progress(step, lds, ldm, lr_m, lr_s):
    print(f"step={step} Lds={lds:.6f} Ldm={ldm:.6f} lr_m={lr_m:.6g} lr_s={lr_s:.6g}",
          flush=True)


def _state_digest(teacher, student) -> str:
    joint = teacher.state_checksum() + student.state_checksum()
    return hashlib.sha256(joint.encode()).hexdigest()


def alternate_train(teacher: TeacherNet, student: StudentNet, pairs, cfg: TrainConfig,
                    provider: PriorProvider | None = None,
                    verbose: bool = True) -> TrainReport:
    """Run the full alternating schedule over a list of (vis, ir) pairs."""
    if not pairs:
        raise ContractError("training needs at least one image pair")
    if cfg.ablations.offline:
        return _offline_train(teacher, student, pairs, cfg, provider, verbose)
    state = make_state(teacher, student, cfg, provider)
    n = len(pairs)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total = cfg.steps if cfg.steps is not None else cfg.distill_epochs * steps_per_epoch
    if total < 1:
        raise ContractError("schedule resolves to zero steps")
    rows, epoch_sub, epoch_gap = [], [], []
    prev_mean = None
    halted = False
    step = 0
    while step < total and not halted:
        order = state.rng.permutation(n)
        esub, egap = [], []
        for start in range(0, n, cfg.batch):
            if step >= total:
                break
            batch = [_crop_pair(state, *pairs[i]) for i in order[start:start + cfg.batch]]
            lr_m = cosine_lr(step, total, cfg.lr_main, cfg.lr_floor)
            lr_s = cosine_lr(step, total, cfg.lr_sub, cfg.lr_floor)
            parts, gap = main_phase(state, batch, lr_m)
            sub_phase(state, batch, lr_s)
            step += 1
            row = LossBreakdown.from_parts(step=step, lr_main=lr_m, lr_sub=lr_s, **parts)
            rows.append(row)
            esub.append(row.total_sub)
            egap.append(gap)
            if verbose:
                _progress(step, row.total_sub, row.total_main, lr_m, lr_s)
        if esub:
            cur = float(np.mean(esub))
            epoch_sub.append(cur)
            epoch_gap.append(float(np.mean(egap)))
            if diverged(prev_mean, cur):
                halted = True
            prev_mean = cur
    return TrainReport(rows=rows, epoch_sub=epoch_sub, epoch_gap=epoch_gap,
                       diverged=halted, checksum=_state_digest(teacher, student))


def _teacher_only_objective(state: TrainState, batch):
    """Source fidelity plus segmentation for the teacher alone."""
    g_sum = m_sum = seg_sum = None
    for vis, ir in batch:
        mv, mi, pv, pi = _priors(state, vis, ir)
        ref, _ = _guard("teacher-forward",
                        lambda: state.teacher.forward(vis, ir, pv, pi))
        vt, it_ = Tensor(vis[None]), Tensor(ir[None])
        for src in (vt, it_):
            g, m = _guard("context", lambda: losses.loss_context(ref, src))
            g_sum = g if g_sum is None else g_sum + g
            m_sum = m if m_sum is None else m_sum + m
        seg = _guard("seg", lambda: losses.loss_seg(
            state.stub.forward(ref), synth_labels(mv, mi, state.stub.n_classes)))
        seg_sum = seg if seg_sum is None else seg_sum + seg
    inv = 1.0 / len(batch)
    total = (g_sum + m_sum + seg_sum) * inv
    return total, float(g_sum.data) * inv, float(m_sum.data) * inv, float(seg_sum.data) * inv


def _offline_train(teacher, student, pairs, cfg, provider, verbose) -> TrainReport:
    """Ablation: finish the teacher first, then distill into the student.

    Each phase gets the same step budget the alternating run would use,
    with its own cosine schedule.
    """
    state = make_state(teacher, student, cfg, provider)
    n = len(pairs)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total = cfg.steps if cfg.steps is not None else cfg.distill_epochs * steps_per_epoch
    if total < 1:
        raise ContractError("schedule resolves to zero steps")
    rows, epoch_sub, epoch_gap = [], [], []
    step = 0
    while step < total:
        order = state.rng.permutation(n)
        for start in range(0, n, cfg.batch):
            if step >= total:
                break
            batch = [_crop_pair(state, *pairs[i]) for i in order[start:start + cfg.batch]]
            lr_m = cosine_lr(step, total, cfg.lr_main, cfg.lr_floor)
            state.teacher.zero_grad()
            total_t, g, m, seg = _teacher_only_objective(state, batch)
            ad.backward(total_t)
            clip_global_norm([p for _, p in teacher.named_parameters()])
            state.adam_m.step(lr_m)
            step += 1
            row = LossBreakdown.from_parts(step=step, lr_main=lr_m, lr_sub=0.0,
                                           fea=0.0, grad=g, mse=m,
                                           cs_ir=0.0, cs_vis=0.0, seg=seg)
            rows.append(row)
            if verbose:
                _progress(step, row.total_sub, row.total_main, lr_m, 0.0)
    prev_mean = None
    halted = False
    sstep = 0
    with frozen(p for _, p in teacher.named_parameters()):
        while sstep < total and not halted:
            order = state.rng.permutation(n)
            esub, egap = [], []
            for start in range(0, n, cfg.batch):
                if sstep >= total:
                    break
                batch = [_crop_pair(state, *pairs[i])
                         for i in order[start:start + cfg.batch]]
                lr_s = cosine_lr(sstep, total, cfg.lr_sub, cfg.lr_floor)
                state.student.zero_grad()
                total_s, parts, gap = _batch_objective(state, batch, need_seg=False)
                ad.backward(total_s)
                clip_global_norm([p for _, p in student.named_parameters()])
                state.adam_s.step(lr_s)
                sstep += 1
                row = LossBreakdown.from_parts(step=total + sstep, lr_main=0.0,
                                               lr_sub=lr_s, **parts)
                rows.append(row)
                esub.append(row.total_sub)
                egap.append(gap)
                if verbose:
                    _progress(total + sstep, row.total_sub, row.total_main, 0.0, lr_s)
            if esub:
                cur = float(np.mean(esub))
                epoch_sub.append(cur)
                epoch_gap.append(float(np.mean(egap)))
                if diverged(prev_mean, cur):
                    halted = True
                prev_mean = cur
    return TrainReport(rows=rows, epoch_sub=epoch_sub, epoch_gap=epoch_gap,
                       diverged=halted, checksum=_state_digest(teacher, student))


def _net_source_loss(state: TrainState, net_forward, vis, ir):
    out = net_forward(vis, ir)
    vt, it_ = Tensor(vis[None]), Tensor(ir[None])
    total = None
    for src in (vt, it_):
        g, m = _guard("context", lambda: losses.loss_context(out, src))
        term = g + m
        total = term if total is None else total + term
    return total


def _teacher_out(state: TrainState):
    def run(vis, ir):
        mv, mi, pv, pi = _priors(state, vis, ir)
        ref, _ = _guard("teacher-forward",
                        lambda: state.teacher.forward(vis, ir, pv, pi))
        return ref
    return run


def _student_out(state: TrainState):
    def run(vis, ir):
        fus, _ = _guard("student-forward", lambda: state.student.forward(vis, ir))
        return fus
    return run


def pretrain(teacher: TeacherNet, student: StudentNet, pairs, cfg: TrainConfig,
             provider: PriorProvider | None = None, verbose: bool = False) -> None:
    """Independent source-fidelity warmup for both networks, constant lr."""
    if cfg.pretrain_epochs == 0:
        return
    state = make_state(teacher, student, cfg, provider)
    state.rng = np.random.default_rng([cfg.seed, 331])
    n = len(pairs)
    total = cfg.pretrain_epochs * math.ceil(n / cfg.batch)
    runners = ((teacher, state.adam_m, PRETRAIN_LR, _teacher_out(state)),
               (student, state.adam_s, PRETRAIN_LR, _student_out(state)))
    step = 0
    while step < total:
        order = state.rng.permutation(n)
        for start in range(0, n, cfg.batch):
            if step >= total:
                break
            batch = [_crop_pair(state, *pairs[i]) for i in order[start:start + cfg.batch]]
            for net, adam, lr, forward in runners:
                net.zero_grad()
                loss = None
                for vis, ir in batch:
                    term = _net_source_loss(state, forward, vis, ir)
                    loss = term if loss is None else loss + term
                loss = loss * (1.0 / len(batch))
                ad.backward(loss)
                clip_global_norm([p for _, p in net.named_parameters()])
                adam.step(lr)
            step += 1
            if verbose:
                print(f"pretrain step={step}", flush=True)


def source_fidelity(state: TrainState, pairs) -> tuple:
    """Mean context loss of each net's output against both sources."""
    t_params = [p for _, p in state.teacher.named_parameters()]
    s_params = [p for _, p in state.student.named_parameters()]
    totals = []
    with frozen(t_params), frozen(s_params):
        for forward in (_teacher_out(state), _student_out(state)):
            vals = []
            for vis, ir in pairs:
                vals.append(float(_net_source_loss(state, forward, vis, ir).data))
            totals.append(float(np.mean(vals)))
    return totals[0], totals[1]
