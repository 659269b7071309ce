"""Command-line entry point: train, eval, infer, viz, gradcheck, ablate.

Runs are configured by a flat ``key=value`` file (``#`` starts a comment);
``--set key=value`` overrides single keys. Unknown keys are rejected. Every
command that writes outputs archives the resolved configuration next to them.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import augment, coteach, data, flowio, gradsuite
from .network import PyramidConfig, load_checkpoint

# --------------------------------------------------------------------------
# RunConfig schema


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    vals = tuple(int(x) for x in s.split(",") if x.strip())
    if not vals:
        raise ValueError("empty integer list")
    return vals


def _size(s: str) -> tuple[int, int]:
    h, w = s.lower().split("x")
    return int(h), int(w)


def _opt_size(s: str):
    return None if s.strip().lower() in ("auto", "none", "") else _size(s)


def _opt_float(s: str):
    return None if s.strip().lower() in ("none", "") else float(s)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str
    fmt: Callable[[Any], str] = _fmt


def _fmt_size(v) -> str:
    return "auto" if v is None else f"{v[0]}x{v[1]}"


_desk = PyramidConfig.desk()

SCHEMA: dict[str, Key] = {
    # co-teaching
    "tau": Key(float, 0.8, "final filtering strength; R falls from 1 to 1 - tau"),
    "t_k_frac": Key(float, 0.1, "fraction of t_max over which R decreases"),
    "t_max": Key(int, 30, "epochs"),
    "n_max": Key(int, 0, "iterations per epoch (0 = all full batches)"),
    "batch_size": Key(int, 4, "pairs per batch"),
    "lr": Key(float, 1e-4, "initial learning rate"),
    "lr_final": Key(float, 1e-5, "learning rate at the last epoch"),
    "lambda1": Key(float, 2.0, "smoothness weight"),
    "lambda2_max": Key(float, 0.15, "final self-supervision weight"),
    "lambda2_ramp_start": Key(float, 0.4, "epoch fraction where the self-supervision ramp starts"),
    "lambda2_ramp_end": Key(float, 0.6, "epoch fraction where the ramp reaches lambda2_max"),
    "seed_a": Key(int, 1, "initialisation seed of network A"),
    "seed_b": Key(int, 2, "initialisation seed of network B"),
    "shuffle_seed": Key(int, 0, "per-epoch shuffling stream"),
    "swap": Key(_bool, True, "exchange occlusion maps between the networks"),
    # augmentation
    "augment_mode": Key(str, "full", "full | crop | none"),
    "augment_crop": Key(_opt_size, None, "HxW crop of augmented samples, or auto", _fmt_size),
    "max_rotation": Key(float, 10.0, "degrees"),
    "scale_min": Key(float, 0.9, "smallest zoom"),
    "scale_max": Key(float, 1.15, "largest zoom"),
    "max_occluders": Key(int, 3, "rectangles erased in the second augmented image"),
    "occluder_fill": Key(str, "mean", "mean | noise"),
    # network
    "levels": Key(int, _desk.levels, "pyramid levels"),
    "channels": Key(_ints, _desk.channels, "feature channels per level"),
    "radius": Key(int, _desk.radius, "correlation radius"),
    "fmm": Key(_bool, True, "flow modulation module"),
    "cmm": Key(_bool, True, "cost volume modulation module"),
    "context": Key(_bool, True, "context refinement network"),
    "finest_level": Key(int, _desk.finest_level, "finest decoded pyramid level"),
    "estimator_channels": Key(_ints, _desk.estimator_channels, "flow estimator widths"),
    "context_channels": Key(_ints, _desk.context_channels, "context network widths"),
    "context_dilations": Key(_ints, _desk.context_dilations, "context network dilations"),
    "cmm_kernel": Key(int, _desk.cmm_kernel, "CMM kernel size"),
    # synthetic data
    "image_size": Key(_size, (64, 64), "HxW of synthetic images", _fmt_size),
    "n_train": Key(int, 500, "synthetic training pairs"),
    "n_val": Key(int, 100, "synthetic validation pairs"),
    "data_seed": Key(int, 100, "training set seed"),
    "val_seed": Key(int, 200, "validation set seed"),
    "max_translation": Key(float, 8.0, "largest layer translation, px"),
    "patches_min": Key(int, 1, "fewest foreground patches"),
    "patches_max": Key(int, 3, "most foreground patches"),
    "texture_wl_min": Key(float, 18.0, "shortest texture wavelength, px"),
    "texture_wl_max": Key(float, 48.0, "longest texture wavelength, px"),
    "texture_components": Key(int, 6, "sinusoids per texture"),
    "occlusion_target": Key(_opt_float, None, "preferred occluded fraction, or none"),
    # paths
    "data_dir": Key(str, "", "training directory (empty = synthetic)"),
    "layout": Key(str, "synth-cache", "sintel | kitti | synth-cache"),
    "val_dir": Key(str, "", "validation directory (empty = synthetic)"),
    "val_layout": Key(str, "synth-cache", "layout of val_dir"),
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Validated flat configuration; attribute access by key."""

    def __init__(self, values: dict[str, Any] | None = None):
        object.__setattr__(self, "_v", {k: s.default for k, s in SCHEMA.items()})
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            self._v[k] = v
        self.validate()

    def __getattr__(self, k):
        try:
            return self._v[k]
        except KeyError:
            raise AttributeError(k) from None

    def __setattr__(self, k, v):
        raise AttributeError("RunConfig is immutable; use replace()")

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._v == other._v

    def as_dict(self) -> dict[str, Any]:
        return dict(self._v)

    def replace(self, **kw) -> "RunConfig":
        d = self.as_dict()
        for k, v in kw.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = v
        return RunConfig(d)

    @classmethod
    def parse_pairs(cls, lines, base: "RunConfig | None" = None, where: str = "config") -> "RunConfig":
        d = base.as_dict() if base is not None else {}
        for n, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{where}:{n}: expected key=value, got {raw.strip()!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in SCHEMA:
                raise ConfigError(f"{where}:{n}: unknown config key {k!r}")
            try:
                d[k] = SCHEMA[k].parse(v)
            except ValueError as exc:
                raise ConfigError(f"{where}:{n}: bad value for {k}: {exc}") from None
        return cls(d)

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.parse_pairs(Path(path).read_text().splitlines(), base, where=str(path))

    def to_text(self) -> str:
        return "".join(f"{k}={SCHEMA[k].fmt(v)}\n" for k, v in self._v.items())

    def validate(self) -> None:
        try:
            self.coteach()
            self.pyramid()
            self.synth()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.layout not in data.LAYOUTS or self.val_layout not in data.LAYOUTS:
            raise ConfigError(f"layout must be one of {data.LAYOUTS}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")

    def coteach(self) -> coteach.CoteachConfig:
        return coteach.CoteachConfig(
            tau=self.tau, t_k_frac=self.t_k_frac, t_max=self.t_max, n_max=self.n_max or None,
            batch_size=self.batch_size, lr=self.lr, lr_final=self.lr_final, lambda1=self.lambda1,
            lambda2_max=self.lambda2_max, lambda2_ramp=(self.lambda2_ramp_start, self.lambda2_ramp_end),
            seed_a=self.seed_a, seed_b=self.seed_b, shuffle_seed=self.shuffle_seed, swap_enabled=self.swap,
            augment=augment.AugmentConfig(mode=self.augment_mode, crop_size=self.augment_crop,
                                          max_rotation_deg=self.max_rotation,
                                          scale_range=(self.scale_min, self.scale_max),
                                          max_occluders=self.max_occluders, occluder_fill=self.occluder_fill))

    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(levels=self.levels, channels=self.channels, radius=self.radius, fmm=self.fmm,
                             cmm=self.cmm, context=self.context, finest_level=self.finest_level,
                             estimator_channels=self.estimator_channels, context_channels=self.context_channels,
                             context_dilations=self.context_dilations, cmm_kernel=self.cmm_kernel)

    def synth(self, seed: int | None = None) -> data.SynthConfig:
        return data.SynthConfig(size=self.image_size, texture_wavelength=(self.texture_wl_min, self.texture_wl_max),
                                texture_components=self.texture_components,
                                patches=(self.patches_min, self.patches_max), max_translation=self.max_translation,
                                occlusion_target=self.occlusion_target,
                                seed=self.data_seed if seed is None else seed)

    def train_set(self):
        if self.data_dir:
            return data.load_dataset(self.data_dir, self.layout)
        return data.synth_dataset(self.synth(), self.n_train, self.data_seed)

    def val_set(self):
        if self.val_dir:
            return data.load_dataset(self.val_dir, self.val_layout)
        if self.data_dir:
            return None
        return data.synth_dataset(self.synth(), self.n_val, self.val_seed)


def schema_text() -> str:
    rows = [f"{k:<20s} {SCHEMA[k].fmt(s.default):<16s} {s.doc}" for k, s in SCHEMA.items()]
    return "\n".join(rows)


# --------------------------------------------------------------------------
# shared helpers


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    sets = getattr(args, "set", None) or []
    if sets:
        cfg = RunConfig.parse_pairs(sets, base=cfg, where="--set")
    return cfg


def _table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)
    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _pad_to(img: torch.Tensor, mult: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = img.shape[-2:]
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        img = torch.nn.functional.pad(img, (0, pw, 0, ph), mode="replicate")
    return img, (h, w)


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    train_set = cfg.train_set()
    val = cfg.val_set()
    t0 = time.perf_counter()

    def report(row):
        print(f"epoch {row['epoch']:3d}  R={row['R']:.3f}  eta={row['eta']:.2e}  lambda2={row['lambda2']:.3f}  "
              f"total_a={row['total_a']:.4f}  total_b={row['total_b']:.4f}  "
              f"val_a={row['val_aepe_a']:.4f}  val_b={row['val_aepe_b']:.4f}  "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)

    coteach.train(cfg.coteach(), train_set, val, cfg.pyramid(), out_dir=out, on_epoch=None if args.quiet else report,
                  checkpoint_every=args.checkpoint_every)
    print(f"checkpoints: {out / 'net_a'}  {out / 'net_b'}")
    return 0


def _evaluate_rows(ckpts: list[str], pairs) -> list[dict]:
    rows = []
    for ck in ckpts:
        net = load_checkpoint(ck)
        epes, f1s = [], []
        for s in range(0, len(pairs), 16):
            chunk = [pairs[k] for k in range(s, min(s + 16, len(pairs)))]
            b = data.collate(chunk)
            if b.gt_flow is None:
                raise ValueError("eval: dataset has no ground truth flow")
            est = coteach.predict(net, b.i1, b.i2)
            for k, p in enumerate(chunk):
                e = flowio.tensor_to_flow(est[k])
                epes.append(flowio.aepe(e, p.gt_flow, p.valid))
                f1s.append(flowio.f1_rate(e, p.gt_flow, p.valid))
        rows.append({"checkpoint": ck, "pairs": len(pairs), "aepe": float(np.mean(epes)), "f1": float(np.mean(f1s))})
    return rows


def cmd_eval(args) -> int:
    if args.data:
        pairs = data.load_dataset(args.data, args.layout)
    else:
        cfg = _load_config(args)
        pairs = cfg.val_set()
        if pairs is None:
            raise UsageError("eval: give --data or a config describing a validation set")
    rows = _evaluate_rows(args.checkpoint, pairs)
    if len(rows) > 1:
        rows.append({"checkpoint": "mean", "pairs": len(pairs), "aepe": float(np.mean([r["aepe"] for r in rows])),
                     "f1": float(np.mean([r["f1"] for r in rows]))})
    cols = ["checkpoint", "pairs", "aepe", "f1"]
    print(_table(rows, cols))
    if args.csv:
        Path(args.csv).write_text(_csv(rows, cols))
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=1))
    return 0


def cmd_infer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    a = flowio.read_image(args.i1)
    b = flowio.read_image(args.i2)
    if a.shape != b.shape:
        raise ValueError(f"infer: image shapes differ {a.shape} vs {b.shape}")
    if a.shape[2] == 1:
        a, b = np.repeat(a, 3, 2), np.repeat(b, 3, 2)
    mult = 2 ** net.cfg.levels
    t1, (h, w) = _pad_to(flowio.image_to_tensor(a), mult)
    t2, _ = _pad_to(flowio.image_to_tensor(b), mult)
    flow = flowio.tensor_to_flow(coteach.predict(net, t1, t2)[:, :, :h, :w])
    flowio.write_flo(flow, args.out)
    if args.color:
        flowio.write_image(flowio.flow_to_color(flow), args.color)
    mag = np.sqrt((flow.astype(np.float64) ** 2).sum(-1))
    print(f"wrote {args.out}  mean |flow| = {mag.mean():.4f} px  max = {mag.max():.4f} px")
    return 0


def cmd_viz(args) -> int:
    flow = flowio.read_flo(args.flo)
    rgb = flowio.flow_to_color(flow, args.max_mag)
    flowio.write_image(rgb, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    suite = gradsuite.SUITE
    if args.only:
        unknown = [n for n in args.only if n not in suite]
        if unknown:
            raise UsageError(f"unknown gradcheck case(s): {', '.join(unknown)}")
        suite = {n: suite[n] for n in args.only}
    t0 = time.perf_counter()
    ok, _ = gradsuite.run_suite(suite, log=print)
    print(f"{'PASS' if ok else 'FAIL'}: {len(suite)} cases in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# ablation grid

GRID_KEYS = {"tau": float, "t_k_frac": float, "fmm": _bool, "cmm": _bool, "swap": _bool}


def parse_grid(text: str) -> list[tuple[str, list]]:
    """``"tau=0.6,0.8 fmm=on,off"`` (``;`` also separates axes)."""
    axes = []
    for part in text.replace(";", " ").split():
        if "=" not in part:
            raise UsageError(f"grid axis must be key=v1,v2,...: {part!r}")
        k, vals = part.split("=", 1)
        if k not in GRID_KEYS:
            raise UsageError(f"grid key must be one of {sorted(GRID_KEYS)}, got {k!r}")
        if any(k == a for a, _ in axes):
            raise UsageError(f"grid key {k!r} given twice")
        try:
            parsed = [GRID_KEYS[k](v) for v in vals.split(",") if v]
        except ValueError as exc:
            raise UsageError(f"bad grid value for {k}: {exc}") from None
        if not parsed:
            raise UsageError(f"grid axis {k!r} has no values")
        axes.append((k, parsed))
    return axes


def grid_cells(base: RunConfig, axes) -> list[tuple[dict, RunConfig]]:
    """Cartesian product in axis order; cell i shifts every seed by 1000 * i."""
    cells = []
    keys = [k for k, _ in axes]
    for i, combo in enumerate(itertools.product(*[v for _, v in axes]) if axes else [()]):
        over = dict(zip(keys, combo))
        cfg = base.replace(**over, seed_a=base.seed_a + 1000 * i, seed_b=base.seed_b + 1000 * i,
                           shuffle_seed=base.shuffle_seed + 1000 * i)
        cells.append((over, cfg))
    return cells


def run_cell(index: int, cfg_text: str, out_dir: str) -> dict:
    torch.set_num_threads(1)
    cfg = RunConfig.parse_pairs(cfg_text.splitlines())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    t0 = time.perf_counter()
    res = coteach.train(cfg.coteach(), cfg.train_set(), cfg.val_set(), cfg.pyramid(), out_dir=out)
    last = res.log[-1]
    return {"cell": index, "seed_a": cfg.seed_a, "seed_b": cfg.seed_b, "val_aepe_a": last["val_aepe_a"],
            "val_aepe_b": last["val_aepe_b"], "val_aepe": (last["val_aepe_a"] + last["val_aepe_b"]) / 2,
            "seconds": round(time.perf_counter() - t0, 1)}


def cmd_ablate(args) -> int:
    base = _load_config(args)
    axes = parse_grid(args.grid)
    cells = grid_cells(base, axes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "base_config.txt").write_text(base.to_text())
    keys = [k for k, _ in axes]
    cols = ["cell", *keys, "seed_a", "seed_b", "val_aepe_a", "val_aepe_b", "val_aepe", "seconds"]
    rows: list[dict] = []

    def flush():
        ordered = sorted(rows, key=lambda r: r["cell"])
        (out / "results.csv").write_text(_csv(ordered, cols))
        (out / "results.txt").write_text(_table(ordered, cols) + "\n")

    def record(row, over):
        row.update({k: _fmt(v) for k, v in over.items()})
        rows.append(row)
        flush()
        print(f"cell {row['cell']}: {over} -> val AEPE {row['val_aepe']:.4f} "
              f"(seeds {row['seed_a']}/{row['seed_b']})", flush=True)

    flush()
    try:
        if args.parallel > 1:
            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                futs = {pool.submit(run_cell, i, cfg.to_text(), str(out / f"cell{i:03d}")): (i, over)
                        for i, (over, cfg) in enumerate(cells)}
                for fut in as_completed(futs):
                    record(fut.result(), futs[fut][1])
        else:
            for i, (over, cfg) in enumerate(cells):
                record(run_cell(i, cfg.to_text(), str(out / f"cell{i:03d}")), over)
    except KeyboardInterrupt:
        flush()
        print(f"interrupted: {len(rows)} of {len(cells)} cells written to {out / 'results.csv'}", file=sys.stderr)
        return 130
    print(_table(sorted(rows, key=lambda r: r["cell"]), cols))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotamflow", description="co-teaching optical flow toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("train", help="co-teach two networks")
    config_flags(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AEPE / F1 of checkpoints on a dataset")
    config_flags(sp)
    sp.add_argument("--checkpoint", action="append", required=True, help="checkpoint directory (repeatable)")
    sp.add_argument("--data", help="dataset directory (default: the config's validation set)")
    sp.add_argument("--layout", default="synth-cache", choices=data.LAYOUTS)
    sp.add_argument("--csv", help="write the table as CSV")
    sp.add_argument("--json", help="write the table as JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="flow between two images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--i1", required=True)
    sp.add_argument("--i2", required=True)
    sp.add_argument("--out", required=True, help=".flo output")
    sp.add_argument("--color", help="optional color-coded PNG")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("viz", help="color render of a .flo file")
    sp.add_argument("--flo", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-mag", type=float, default=None)
    sp.set_defaults(func=cmd_viz)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--only", nargs="+", metavar="CASE")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train one co-teaching run per grid cell")
    config_flags(sp)
    sp.add_argument("--grid", required=True, help='e.g. "tau=0.6,0.8 fmm=on,off swap=on,off"')
    sp.add_argument("--out", required=True)
    sp.add_argument("--parallel", type=int, default=1, metavar="N")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("schema", help="print every config key with its default")
    sp.set_defaults(func=lambda a: print(schema_text()) or 0)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(args.func(args) or 0)
    except (UsageError, ConfigError) as exc:
        print(f"cotamflow {args.command}: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"cotamflow {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
