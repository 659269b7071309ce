"""Co-teaching of two flow networks that exchange occlusion maps.

Per step, every network predicts forward and backward flow on the batch; the
range-map occlusion of one network masks the photometric loss of the other.
Once the self-supervision weight is positive, both networks also run on an
augmented copy of the batch (shared augmentation) and the newly occluded
pixels of one network weight the distillation loss of the other. A dynamic
threshold R(T) hard-sets pixels with occlusion above R to fully occluded.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment as aug
from . import data as data_mod
from . import flowio
from .losses import LossBreakdown, total_loss
from .network import AMFlow, PyramidConfig, init_params, save_checkpoint
from .occlusion import OcclusionEstimator, occlusion_map, selfsup_occlusion

LOG_COLUMNS = ("epoch", "iter", "l_ph_a", "l_sm_a", "l_ss_a", "total_a", "l_ph_b", "l_sm_b", "l_ss_b", "total_b",
               "R", "eta", "lambda2", "val_aepe_a", "val_aepe_b")


class DivergenceError(RuntimeError):
    """Raised on a non-finite loss; ``dump_path`` holds the offending batch."""

    def __init__(self, msg: str, dump_path: str | None = None):
        super().__init__(msg)
        self.dump_path = dump_path


@dataclass(frozen=True)
class CoteachConfig:
    tau: float = 0.8
    t_k_frac: float = 0.1
    t_max: int = 30
    n_max: int | None = None            # iterations per epoch; None = every full batch
    batch_size: int = 4
    lr: float = 1e-4
    lr_final: float = 1e-5
    lambda1: float = 2.0
    lambda2_max: float = 0.15
    lambda2_ramp: tuple[float, float] = (0.4, 0.6)
    seed_a: int = 1
    seed_b: int = 2
    shuffle_seed: int = 0
    swap_enabled: bool = True
    allow_equal_seeds: bool = False     # only for the symmetry check
    augment: aug.AugmentConfig = aug.AugmentConfig()

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 < self.t_k_frac < 1:
            raise ValueError("t_k_frac must lie in (0, 1)")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.seed_a == self.seed_b and not self.allow_equal_seeds:
            raise ValueError("seed_a and seed_b must differ")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        lo, hi = self.lambda2_ramp
        if not 0 <= lo < hi <= 1:
            raise ValueError("lambda2_ramp must satisfy 0 <= start < end <= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def t_k(self) -> float:
        return self.t_k_frac * self.t_max


# --------------------------------------------------------------------------
# schedules (pure functions of the epoch)


def _frac(x) -> Fraction:
    # exact decimal value of the float literal the user wrote (0.8 -> 4/5)
    return Fraction(repr(float(x))) if not isinstance(x, Fraction) else x


def threshold(t: int, tau: float, t_k: float) -> float:
    """R used during epoch ``t`` (1-based): ``1 - tau * min((t - 1) / t_k, 1)``."""
    if t < 1:
        raise ValueError("epoch index starts at 1")
    if t_k <= 0:
        raise ValueError("t_k must be positive")
    ramp = min(Fraction(t - 1) / _frac(t_k), Fraction(1))
    return float(1 - _frac(tau) * ramp)


def filter_occlusion(o: torch.Tensor, r: float) -> torch.Tensor:
    """Pixels with occlusion strictly above ``r`` become fully occluded."""
    if not 0 <= r <= 1:
        raise ValueError("r must lie in [0, 1]")
    return torch.where(o > r, torch.ones_like(o), o)


def lambda2_schedule(t: int, cfg: CoteachConfig) -> float:
    """0 up to the ramp start, linear to ``lambda2_max`` at the ramp end, constant after."""
    if not 1 <= t <= cfg.t_max:
        raise ValueError(f"epoch {t} outside [1, {cfg.t_max}]")
    x = Fraction(t, cfg.t_max)
    lo, hi = _frac(cfg.lambda2_ramp[0]), _frac(cfg.lambda2_ramp[1])
    top = _frac(cfg.lambda2_max)
    if x <= lo:
        return 0.0
    if x >= hi:
        return float(top)
    return float(top * (x - lo) / (hi - lo))


def lr_schedule(t: int, cfg: CoteachConfig) -> float:
    """Exponential decay from ``lr`` at epoch 1 to ``lr_final`` at ``t_max``."""
    if not 1 <= t <= cfg.t_max:
        raise ValueError(f"epoch {t} outside [1, {cfg.t_max}]")
    if t == 1 or cfg.t_max == 1:
        return float(cfg.lr)
    if t == cfg.t_max:
        return float(cfg.lr_final)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** ((t - 1) / (cfg.t_max - 1))


# --------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    net_a: AMFlow
    net_b: AMFlow
    opt_a: torch.optim.Optimizer
    opt_b: torch.optim.Optimizer
    epoch: int = 1
    iteration: int = 0
    r: float = 1.0
    eta: float = 1e-4
    lambda2: float = 0.0
    counters: dict[str, int] = field(default_factory=lambda: {"forward": 0, "backward_flow": 0,
                                                               "aug_forward": 0, "aug_backward_flow": 0})

    def set_epoch(self, t: int, cfg: CoteachConfig) -> None:
        self.epoch = t
        self.r = threshold(t, cfg.tau, cfg.t_k)
        self.eta = lr_schedule(t, cfg)
        self.lambda2 = lambda2_schedule(t, cfg)
        for opt in (self.opt_a, self.opt_b):
            for g in opt.param_groups:
                g["lr"] = self.eta


def init_state(cfg: CoteachConfig, pyramid: PyramidConfig | None = None) -> TrainState:
    pyramid = pyramid or PyramidConfig.desk()
    net_a = init_params(cfg.seed_a, pyramid)
    net_b = init_params(cfg.seed_b, pyramid)
    opt_a = torch.optim.Adam(net_a.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    opt_b = torch.optim.Adam(net_b.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    state = TrainState(net_a, net_b, opt_a, opt_b)
    state.set_epoch(1, cfg)
    return state


# --------------------------------------------------------------------------
# one step


@dataclass
class _NetPass:
    f12: torch.Tensor
    occ: torch.Tensor
    f_teacher_t: torch.Tensor | None = None
    f_student: torch.Tensor | None = None
    occ_ss: torch.Tensor | None = None


def _forward_net(net: AMFlow, i1, i2, state: TrainState, sample_params, estimator: OcclusionEstimator,
                 aug_images) -> _NetPass:
    f12 = net(i1, i2).final
    with torch.no_grad():
        f21 = net(i2, i1).final
    state.counters["forward"] += 1
    state.counters["backward_flow"] += 1
    occ = estimator(f12.detach(), f21)
    out = _NetPass(f12, occ)
    if sample_params is not None:
        t1, t2 = aug_images
        sample = aug.build_selfsup_sample(i1, i2, f12.detach(), occ, sample_params, images=aug_images)
        f_s = net(t1, t2).final
        with torch.no_grad():
            f_s21 = net(t2, t1).final
        state.counters["aug_forward"] += 1
        state.counters["aug_backward_flow"] += 1
        o_aug = estimator(f_s.detach(), f_s21)
        out.f_teacher_t = sample.f_teacher_t
        out.f_student = f_s
        out.occ_ss = selfsup_occlusion(sample.o_teacher_t, o_aug)
    return out


def default_crop(frame: tuple[int, int], levels: int) -> tuple[int, int]:
    """Largest multiple of ``2**levels`` not above 3/4 of each side (at least one stride)."""
    s = 2 ** levels
    return tuple(max(s, (3 * n // 4) // s * s) for n in frame)


def _aug_params(batch: data_mod.Batch, state: TrainState, cfg: CoteachConfig):
    rng = np.random.default_rng([cfg.seed_a, cfg.seed_b, state.epoch, state.iteration])
    frame = tuple(batch.i1.shape[-2:])
    acfg = cfg.augment
    if acfg.crop_size is None and acfg.mode != "none":
        acfg = dataclasses.replace(acfg, crop_size=default_crop(frame, state.net_a.cfg.levels))
    params = aug.sample_batch_params(rng, len(batch), frame, acfg)
    return params, aug.transform_images(batch.i1, batch.i2, params)


def compute_losses(state: TrainState, batch: data_mod.Batch, cfg: CoteachConfig,
                   estimator: OcclusionEstimator = occlusion_map) -> tuple[LossBreakdown, LossBreakdown]:
    """Forward both networks and build their losses without stepping the optimizers."""
    i1, i2 = batch.i1, batch.i2
    params = images = None
    if state.lambda2 > 0:
        params, images = _aug_params(batch, state, cfg)
    pa = _forward_net(state.net_a, i1, i2, state, params, estimator, images)
    pb = _forward_net(state.net_b, i1, i2, state, params, estimator, images)

    def filt(x):
        return None if x is None else filter_occlusion(x, state.r)

    occ_a, occ_b = filt(pa.occ), filt(pb.occ)
    ss_a, ss_b = filt(pa.occ_ss), filt(pb.occ_ss)
    if cfg.swap_enabled:
        occ_a, occ_b = occ_b, occ_a
        ss_a, ss_b = ss_b, ss_a
    la = total_loss(i1, i2, pa.f12, occ_a, pa.f_teacher_t, pa.f_student, ss_a, cfg.lambda1, state.lambda2)
    lb = total_loss(i1, i2, pb.f12, occ_b, pb.f_teacher_t, pb.f_student, ss_b, cfg.lambda1, state.lambda2)
    return la, lb


def _dump_batch(batch: data_mod.Batch, state: TrainState, dump_dir: str | None) -> str:
    d = dump_dir or tempfile.gettempdir()
    os.makedirs(d, exist_ok=True)
    path = os.path.join(d, f"diverged_e{state.epoch}_i{state.iteration}.npz")
    np.savez(path, i1=batch.i1.numpy(), i2=batch.i2.numpy(), indices=np.asarray(batch.indices),
             epoch=state.epoch, iteration=state.iteration)
    return path


def train_step(state: TrainState, batch: data_mod.Batch, cfg: CoteachConfig,
               estimator: OcclusionEstimator = occlusion_map,
               dump_dir: str | None = None) -> tuple[TrainState, LossBreakdown, LossBreakdown]:
    la, lb = compute_losses(state, batch, cfg, estimator)
    for name, lo in (("A", la), ("B", lb)):
        if not torch.isfinite(lo.total):
            path = _dump_batch(batch, state, dump_dir)
            raise DivergenceError(
                f"network {name}: non-finite loss at epoch {state.epoch} iteration {state.iteration} "
                f"({lo.as_floats()}); batch dumped to {path}",
                path)
    state.opt_a.zero_grad(set_to_none=True)
    state.opt_b.zero_grad(set_to_none=True)
    la.total.backward()
    lb.total.backward()
    state.opt_a.step()
    state.opt_b.step()
    state.iteration += 1
    return state, la, lb


# --------------------------------------------------------------------------
# evaluation and the outer loop


@torch.no_grad()
def predict(net: AMFlow, i1: torch.Tensor, i2: torch.Tensor) -> torch.Tensor:
    net.eval()
    return net(i1, i2).final


@torch.no_grad()
def evaluate(net: AMFlow, pairs: Sequence[data_mod.SamplePair], batch_size: int = 16) -> float:
    """Mean over pairs of the per-pair AEPE on valid pixels."""
    if len(pairs) == 0:
        raise ValueError("evaluate: empty dataset")
    errs = []
    for s in range(0, len(pairs), batch_size):
        chunk = [pairs[k] for k in range(s, min(s + batch_size, len(pairs)))]
        b = data_mod.collate(chunk)
        if b.gt_flow is None:
            raise ValueError("evaluate: ground truth flow required")
        est = predict(net, b.i1, b.i2)
        for k, p in enumerate(chunk):
            errs.append(flowio.aepe(flowio.tensor_to_flow(est[k]), p.gt_flow, p.valid))
    return float(np.mean(errs))


def zero_flow_aepe(pairs: Sequence[data_mod.SamplePair]) -> float:
    return float(np.mean([flowio.aepe(np.zeros_like(p.gt_flow), p.gt_flow, p.valid) for p in pairs]))


@dataclass
class TrainResult:
    net_a: AMFlow
    net_b: AMFlow
    log: list[dict]
    state: TrainState

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow(row)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def train(
    cfg: CoteachConfig,
    dataset: Sequence[data_mod.SamplePair],
    val: Sequence[data_mod.SamplePair] | None = None,
    pyramid: PyramidConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    estimator: OcclusionEstimator = occlusion_map,
    on_epoch: Callable[[dict], None] | None = None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Run ``t_max`` epochs. With ``out_dir`` the metrics log is appended per epoch and
    final checkpoints land in ``out_dir/net_a`` and ``out_dir/net_b``."""
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"train: dataset of {len(dataset)} pairs is smaller than one batch")
    torch.manual_seed(0)
    state = init_state(cfg, pyramid)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.csv"
        log_path.write_text(",".join(LOG_COLUMNS) + "\n")
    log = []
    for t in range(1, cfg.t_max + 1):
        state.set_epoch(t, cfg)
        state.net_a.train()
        state.net_b.train()
        sums = np.zeros(8)
        n = 0
        for k, batch in enumerate(data_mod.batches(dataset, cfg.batch_size, cfg.shuffle_seed, t)):
            if cfg.n_max is not None and k >= cfg.n_max:
                break
            state, la, lb = train_step(state, batch, cfg, estimator, dump_dir=str(out) if out else None)
            fa, fb = la.as_floats(), lb.as_floats()
            sums += [fa["l_ph"], fa["l_sm"], fa["l_ss"], fa["total"], fb["l_ph"], fb["l_sm"], fb["l_ss"], fb["total"]]
            n += 1
        means = sums / max(n, 1)
        va = vb = float("nan")
        if val is not None and len(val) and val[0].gt_flow is not None:
            va = evaluate(state.net_a, val)
            vb = evaluate(state.net_b, val)
        row = dict(zip(LOG_COLUMNS, [t, state.iteration, *means.tolist(), state.r, state.eta, state.lambda2, va, vb]))
        log.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(",".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
        if on_epoch is not None:
            on_epoch(row)
        if out is not None and checkpoint_every and t % checkpoint_every == 0 and t != cfg.t_max:
            save_checkpoint(state.net_a, out / f"epoch{t:03d}" / "net_a")
            save_checkpoint(state.net_b, out / f"epoch{t:03d}" / "net_b")
    if out is not None:
        save_checkpoint(state.net_a, out / "net_a")
        save_checkpoint(state.net_b, out / "net_b")
    return TrainResult(state.net_a, state.net_b, log, state)


def config_dict(cfg: CoteachConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["augment"] = dataclasses.asdict(cfg.augment)
    return d
