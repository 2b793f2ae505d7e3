"""Command-line surface: train, fuse, eval, gradcheck, info.

Configuration is a flat key=value overlay: defaults, then an optional
config file, then explicit flags, highest last. Every run prints the
fully resolved configuration before doing anything, so logs are
self-describing. Exit codes: 0 success, 1 usage or contract error,
2 numerical abort.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import discover_pairs, load_pair, synth_pair
from .errors import (CheckpointError, ContractError, NonFiniteError,
                     PnmParseError, TrainingAbort)
from .gradcheck import build_suite
from .imageio import Image, load_image, rgb_to_ycbcr, save_image, ycbcr_to_rgb
from .instrumentation import delta, snapshot
from .metrics import evaluate_triple
from .networks import (StudentConfig, StudentNet, TeacherConfig, TeacherNet,
                       load_checkpoint, param_count, save_checkpoint)
from .priors import PriorProvider, make_patches
from .training import (Ablations, TrainConfig, alternate_train, frozen,
                       pretrain)

EVAL_HEADER = "path,en,sd,scd,ms_ssim_mean,ms_ssim_sum"


class UsageError(ValueError):
    """Bad flags, bad config keys, or missing inputs. Exit code 1."""


@dataclass
class RunConfig:
    """Flat configuration shared by all commands; unknown keys rejected."""

    command: str = ""
    data: str = ""
    out: str = "out"
    ckpt: str = ""
    fused: str = ""
    synthetic: int = 0
    steps: int = 0                  # 0 = derive from epochs
    epochs: int = 5
    pretrain_epochs: int = 0
    batch: int = 4
    crop: int = 32
    seed: int = 0
    lr_main: float = 5e-4
    lr_sub: float = 2e-3
    lr_floor: float = 1e-5
    term: str = ""
    quiet: bool = False
    no_sam: bool = False
    no_z: bool = False
    no_kv: bool = False
    no_pr: bool = False
    no_fea: bool = False
    no_cont: bool = False
    no_cs: bool = False
    offline: bool = False

    def ablations(self) -> Ablations:
        return Ablations(no_sam=self.no_sam, no_z=self.no_z, no_kv=self.no_kv,
                         no_pr=self.no_pr, no_fea=self.no_fea,
                         no_cont=self.no_cont, no_cs=self.no_cs,
                         offline=self.offline)

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(lr_main=self.lr_main, lr_sub=self.lr_sub,
                           lr_floor=self.lr_floor, batch=self.batch,
                           distill_epochs=self.epochs,
                           pretrain_epochs=self.pretrain_epochs,
                           seed=self.seed, crop=self.crop,
                           steps=self.steps or None,
                           ablations=self.ablations())


_TYPES = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(
            f"config key {key!r} expects {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str) -> dict:
    """key=value lines; # comments; unknown keys rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key == "command" or key not in _TYPES:
            raise UsageError(f"unknown config key {key!r} (line {lineno})")
        out[key] = _coerce(key, val.strip())
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    overlay = {}
    path = getattr(args, "config", None)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        overlay.update(parse_config_text(text))
    for key, val in vars(args).items():
        if key in ("command", "config"):
            continue
        overlay[key] = val
    for key, val in overlay.items():
        setattr(cfg, key, val)
    return cfg


def _echo(cfg: RunConfig) -> None:
    print(f"command={cfg.command}")
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        if f.name == "command":
            continue
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        print(f"{f.name}={val}")


# ---------------------------------------------------------------------------
# commands


def _training_pairs(cfg: RunConfig) -> list:
    if cfg.synthetic and cfg.data:
        raise UsageError("--synthetic and --data are mutually exclusive")
    if cfg.synthetic:
        size = cfg.crop
        return [synth_pair(cfg.seed + i, size, size) for i in range(cfg.synthetic)]
    if not cfg.data:
        raise UsageError("training needs --data DIR or --synthetic N")
    pairs = []
    for _stem, vis_path, ir_path in discover_pairs(cfg.data):
        vis, ir, _chroma = load_pair(vis_path, ir_path)
        pairs.append((vis, ir))
    return pairs


def cmd_train(cfg: RunConfig) -> int:
    pairs = _training_pairs(cfg)
    train_cfg = cfg.to_train_config()
    teacher = TeacherNet(TeacherConfig(variant=train_cfg.ablations.variant()),
                         seed=cfg.seed + 1)
    student = StudentNet(StudentConfig(), seed=cfg.seed + 2)
    if train_cfg.pretrain_epochs:
        pretrain(teacher, student, pairs, train_cfg)
    report = alternate_train(teacher, student, pairs, train_cfg,
                             verbose=not cfg.quiet)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "main.ckpt", teacher)
    save_checkpoint(out / "sub.ckpt", student)
    report.write_csv(out / "train.csv")
    if report.diverged:
        print(f"halted after {len(report.rows)} steps: epoch-mean loss grew "
              f"past the divergence guard; artifacts still written to {out}")
    print(f"wrote {out / 'main.ckpt'}, {out / 'sub.ckpt'}, {out / 'train.csv'}")
    print(f"final total_sub={report.rows[-1].total_sub!r} checksum={report.checksum}")
    return 0


def _resolve_checkpoint(cfg: RunConfig) -> Path:
    base = Path(cfg.ckpt) if cfg.ckpt else Path(cfg.out)
    path = base / "sub.ckpt" if base.is_dir() else base
    if not path.exists():
        raise UsageError(f"missing checkpoint {path}; train first or pass --ckpt")
    return path


def cmd_fuse(cfg: RunConfig) -> int:
    """Student-only inference. The prior/attention machinery must not run."""
    if not cfg.data:
        raise UsageError("fuse needs --data DIR with paired sources")
    ckpt = _resolve_checkpoint(cfg)
    student = StudentNet(StudentConfig(), seed=0)
    load_checkpoint(ckpt, student)
    entries = discover_pairs(cfg.data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    before = snapshot()
    written = []
    with frozen(student.parameters()):
        for stem, vis_path, ir_path in entries:
            vis, ir, chroma = load_pair(vis_path, ir_path)
            fused, _taps = student.forward(vis, ir)
            luma = Image(fused.data[0])
            if chroma is not None:
                target = out / f"{stem}.fused.ppm"
                save_image(ycbcr_to_rgb(luma, chroma), target)
            else:
                target = out / f"{stem}.fused.pgm"
                save_image(luma, target)
            written.append(target)
    moved = {k: v for k, v in delta(before).items() if v}
    if moved:
        raise ContractError(
            f"decoupled inference touched excluded paths: {moved}")
    print(f"fused {len(written)} pairs -> {out} "
          f"(provider/attention ops: 0, checked)")
    return 0


def _fused_gray(path: Path) -> np.ndarray:
    img = load_image(path)
    if img.channels == 3:
        y, _ = rgb_to_ycbcr(img)
        return y.data
    return img.data


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.data:
        raise UsageError("eval needs --data DIR with the source pairs")
    fused_dir = Path(cfg.fused) if cfg.fused else Path(cfg.out)
    entries = discover_pairs(cfg.data)
    missing, rows = [], []
    for stem, vis_path, ir_path in entries:
        candidates = [fused_dir / f"{stem}.fused.pgm", fused_dir / f"{stem}.fused.ppm"]
        found = [c for c in candidates if c.exists()]
        if not found:
            missing.append(stem)
            continue
        fused = _fused_gray(found[0])
        vis, ir, _chroma = load_pair(vis_path, ir_path)
        rep = evaluate_triple(fused, vis, ir)
        rows.append(f"{found[0]},{rep.en!r},{rep.sd!r},{rep.scd!r},"
                    f"{rep.ms_ssim_mean!r},{rep.ms_ssim_sum!r}")
    if missing:
        raise UsageError(f"missing fused images for: {', '.join(missing)}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    csv_path.write_text("\n".join([EVAL_HEADER] + rows) + "\n")
    print(f"evaluated {len(rows)} triples -> {csv_path}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    suite = build_suite(seed=cfg.seed)
    if cfg.term:
        names = [n for n, _ in suite]
        if cfg.term not in names:
            raise UsageError(
                f"unknown term {cfg.term!r}; known: {', '.join(names)}")
        suite = [(n, r) for n, r in suite if n == cfg.term]
    t0 = time.perf_counter()
    all_ok = True
    for _name, runner in suite:
        res = runner()
        print(res.line())
        all_ok = all_ok and res.passed
    print(f"suite finished in {time.perf_counter() - t0:.1f}s")
    return 0 if all_ok else 1


def cmd_info(cfg: RunConfig) -> int:
    variant = Ablations(no_z=cfg.no_z, no_kv=cfg.no_kv, no_pr=cfg.no_pr).variant()
    teacher = TeacherNet(TeacherConfig(variant=variant), seed=cfg.seed + 1)
    student = StudentNet(StudentConfig(), seed=cfg.seed + 2)
    for label, net in (("main", teacher), ("sub", student)):
        for name, t in net.named_parameters():
            print(f"{label} {name} {t.data.size}")
        print(f"{label} total {param_count(net)}")
    vis, ir = synth_pair(cfg.seed, 32, 32)
    provider = PriorProvider()
    masks_vis = provider.masks_for(vis, "vis")
    masks_ir = provider.masks_for(ir, "ir")
    with frozen(teacher.parameters()), frozen(student.parameters()):
        ref, feats = teacher.forward(vis, ir,
                                     make_patches(vis, masks_vis).patches,
                                     make_patches(ir, masks_ir).patches)
        fus, taps = student.forward(vis, ir)
    print(f"main output {tuple(ref.shape)}")
    for i, f in enumerate(feats):
        print(f"main stage{i} features {tuple(f.shape)}")
    print(f"sub output {tuple(fus.shape)}")
    for i, t in enumerate(taps):
        print(f"sub tap{i} features {tuple(t.shape)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")


def _add_ablation_flags(p: argparse.ArgumentParser) -> None:
    for flag in ("no-sam", "no-z", "no-kv", "no-pr",
                 "no-fea", "no-cont", "no-cs", "offline"):
        p.add_argument(f"--{flag}", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semfuse",
                     description="semantic-prior fusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    train = sub.add_parser("train", argument_default=argparse.SUPPRESS,
                           help="alternating teacher/student optimization")
    train.add_argument("--data", help="directory of <stem>.vis.pgm/.ir.pgm pairs")
    train.add_argument("--synthetic", type=int, metavar="N",
                       help="train on N seeded synthetic pairs instead of --data")
    train.add_argument("--steps", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    train.add_argument("--batch", type=int)
    train.add_argument("--crop", type=int)
    train.add_argument("--lr-main", type=float, dest="lr_main")
    train.add_argument("--lr-sub", type=float, dest="lr_sub")
    train.add_argument("--lr-floor", type=float, dest="lr_floor")
    _add_ablation_flags(train)
    _add_common(train)

    fuse = sub.add_parser("fuse", argument_default=argparse.SUPPRESS,
                          help="student-only inference")
    fuse.add_argument("--data")
    fuse.add_argument("--ckpt", help="checkpoint file or its directory")
    _add_common(fuse)

    evl = sub.add_parser("eval", argument_default=argparse.SUPPRESS,
                         help="fusion metrics over fused/source triples")
    evl.add_argument("--data")
    evl.add_argument("--fused", help="directory of <stem>.fused images")
    _add_common(evl)

    grad = sub.add_parser("gradcheck", argument_default=argparse.SUPPRESS,
                          help="finite-difference verification suite")
    grad.add_argument("--term", help="run a single named check")
    _add_common(grad)

    info = sub.add_parser("info", argument_default=argparse.SUPPRESS,
                          help="parameter counts and feature shapes")
    _add_ablation_flags(info)
    _add_common(info)
    return parser


_DISPATCH = {
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
        _echo(cfg)
        return _DISPATCH[cfg.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ContractError, CheckpointError, PnmParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
