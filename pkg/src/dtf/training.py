"""Losses, optimizer, schedules and the two training procedures.

``train_inverter`` pretrains the inverter on ground-truth backward/forward
pairs with a mean squared error.  ``train_pipeline`` then optimizes inverter
and fusion jointly with the robust loss applied to the forward estimate, the
inverted backward estimate and the fused result.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BACKWARD, FORWARD, FrameTripletSample, SceneFlowField
from .estimator import EstimatorConfig, estimate
from .fusion import FusionNetwork, build_fusion, get_variant
from .inversion import InverterNetwork, build_inverter
from .metrics import EvalReport, aggregate, evaluate
from .netsubstrate import NetworkParams, load_checkpoint, pairwise_softmax, pairwise_softmax_backward

log = logging.getLogger(__name__)


# --- losses ---------------------------------------------------------------


@dataclass(frozen=True)
class RobustLossConfig:
    epsilon: float = 0.01
    exponent: float = 0.4

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.exponent <= 1:
            raise ValueError("exponent must lie in (0, 1]")


def robust_loss_and_grad(est, gt, valid, cfg: RobustLossConfig = RobustLossConfig()):
    """Loss and its gradient with respect to ``est`` on raw ``(..., 4)`` arrays.

    Mean over valid pixels of ``(|est - gt|_1 + eps) ** q``.  The L1 kink uses
    the subgradient 0 on channels with exactly zero error.
    """
    est = np.asarray(est)
    diff = est - np.asarray(gt, dtype=est.dtype)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), diff.shape[:-1])
    n = int(valid.sum())
    if n == 0:
        raise ValueError("robust loss needs at least one valid pixel")
    base = np.abs(diff).sum(axis=-1) + cfg.epsilon
    terms = base ** cfg.exponent
    loss = float(terms[valid].sum(dtype=np.float64) / n)
    coef = np.where(valid, cfg.exponent * base ** (cfg.exponent - 1.0) / n, 0.0)
    grad = (coef[..., None] * np.sign(diff)).astype(est.dtype, copy=False)
    return loss, grad


def robust_loss(est: SceneFlowField, gt: SceneFlowField, valid, cfg: RobustLossConfig = RobustLossConfig()) -> float:
    if est.shape != gt.shape or np.shape(valid) != gt.shape:
        raise ValueError("estimate, ground truth and mask must share their shape")
    return robust_loss_and_grad(est.data, gt.data, valid, cfg)[0]


def loss_terms(fw, inv, fused, gt, valid, cfg: RobustLossConfig = RobustLossConfig()) -> Dict[str, float]:
    return {
        "fw": robust_loss(fw, gt, valid, cfg),
        "inv": robust_loss(inv, gt, valid, cfg),
        "fused": robust_loss(fused, gt, valid, cfg),
    }


def total_loss(fw, inv, fused, gt, valid, cfg: RobustLossConfig = RobustLossConfig()) -> float:
    """Sum of the robust losses of forward, inverted and fused estimates."""
    t = loss_terms(fw, inv, fused, gt, valid, cfg)
    return t["fw"] + t["inv"] + t["fused"]


def mse_and_grad(out, target, valid):
    diff = out - np.asarray(target, dtype=out.dtype)
    mask = np.broadcast_to(np.asarray(valid, dtype=bool)[..., None], diff.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels for the L2 loss")
    diff = np.where(mask, diff, 0)
    loss = float(np.square(diff, dtype=np.float64).sum() / n)
    return loss, (2.0 / n) * diff


# --- optimizer and schedules ----------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 1
    lr_stages: Tuple[Tuple[int, float], ...] = ((0, 1e-4), (20, 1e-5))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        stages = tuple((int(e), float(r)) for e, r in self.lr_stages)
        object.__setattr__(self, "lr_stages", stages)
        if not stages or stages[0][0] != 0:
            raise ValueError("the first learning-rate stage must start at epoch 0")
        for (e0, r0), (e1, r1) in zip(stages, stages[1:]):
            if not (e1 > e0 and r1 < r0):
                raise ValueError("learning-rate stages must increase in epoch and decrease in rate")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")

    def lr_at(self, epoch: int) -> float:
        rate = self.lr_stages[0][1]
        for start, r in self.lr_stages:
            if epoch >= start:
                rate = r
        return rate


SCHEDULE_PRESETS = {
    "paper-inverter": TrainSchedule(40, 4, ((0, 1e-4), (20, 5e-5), (30, 1e-5))),
    "paper-finetune": TrainSchedule(100, 1, ((0, 5e-5), (75, 1e-5))),
    "desk": TrainSchedule(30, 1, ((0, 1e-4), (20, 1e-5))),
}


def schedule_preset(name: str, **overrides) -> TrainSchedule:
    try:
        base = SCHEDULE_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}") from None
    if not overrides:
        return base
    kwargs = {f: getattr(base, f) for f in base.__dataclass_fields__}
    kwargs.update(overrides)
    return TrainSchedule(**kwargs)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: NetworkParams) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)

    def to_extra(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}adam.step": np.array(float(self.step))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}adam.m{i:02d}"] = m
            out[f"{prefix}adam.v{i:02d}"] = v
        return out

    @classmethod
    def from_extra(cls, extra: Dict[str, np.ndarray], prefix: str, params: NetworkParams) -> "AdamState":
        n = len(params.arrays())
        dtype = params.weights[0].dtype
        m = [extra[f"{prefix}adam.m{i:02d}"].astype(dtype) for i in range(n)]
        v = [extra[f"{prefix}adam.v{i:02d}"].astype(dtype) for i in range(n)]
        return cls(m, v, int(extra[f"{prefix}adam.step"]))


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState, lr: float,
              schedule: TrainSchedule = TrainSchedule()) -> Tuple[NetworkParams, AdamState]:
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(p_arrays) != len(g_arrays):
        raise ValueError("parameter and gradient structures differ")
    for i, g in enumerate(g_arrays):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {i // 2} ({'weight' if i % 2 == 0 else 'bias'})")
    state.step += 1
    b1, b2 = schedule.beta1, schedule.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        with np.errstate(over="ignore"):
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + schedule.eps)).astype(p.dtype, copy=False)
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("parameters became non-finite after an update")
    return params, state


# --- training log ----------------------------------------------------------


class MetricsLog:
    """Plain-text training log, one ``key=value`` record per line."""

    def __init__(self, path=None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def write(self, **record):
        self.records.append(record)
        line = " ".join(f"{k}={_fmt(v)}" for k, v in record.items())
        log.info(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


# --- inverter pretraining -------------------------------------------------


def _inverter_arrays(samples: Sequence[FrameTripletSample]):
    xs, ys, ms = [], [], []
    for s in samples:
        if not s.has_backward:
            raise ValueError(f"sample {s.sample_id!r} has no backward ground truth")
        xs.append(s.gt_backward.data)
        ys.append(s.gt_forward.data)
        ms.append(s.valid_fw & s.valid_bw)
    return np.stack(xs), np.stack(ys), np.stack(ms)


def inverter_step(net: InverterNetwork, bw, target, valid, params=None):
    """MSE loss and gradients for one batch of backward fields."""
    tapes = []
    out = net.forward(net.prepare_input(bw), params, tapes)
    loss, g = mse_and_grad(out, target, valid)
    grads, _ = net.backward(g, tapes, params)
    return loss, grads


def save_training_state(path, net, state: AdamState, epoch: int, meta=None):
    m = {"epoch": epoch}
    m.update(meta or {})
    net.save(path, extra=state.to_extra(""), meta=m)


def train_inverter(
    dataset: Sequence[FrameTripletSample],
    schedule: TrainSchedule = SCHEDULE_PRESETS["desk"],
    net: Optional[InverterNetwork] = None,
    dtype=np.float32,
    log_path=None,
    checkpoint_dir=None,
    resume: bool = False,
    validation: Optional[Sequence[FrameTripletSample]] = None,
    stop_after: Optional[int] = None,
) -> InverterNetwork:
    """Supervised pretraining: backward ground truth in, forward ground truth out.

    With ``checkpoint_dir`` the full optimizer state is written after every
    epoch to ``last.ckpt`` (plus ``best.ckpt`` when a validation set is given);
    ``resume`` continues from ``last.ckpt`` on an identical trajectory.
    ``stop_after`` ends the run after that many epochs, as an interruption would.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("empty training set")
    bw, fw, valid = _inverter_arrays(samples)
    bw = bw.astype(dtype)
    fw = fw.astype(dtype)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    start = 0
    state = None
    if resume and ckdir is not None and (ckdir / "last.ckpt").exists():
        ck = load_checkpoint(ckdir / "last.ckpt", dtype)
        net = InverterNetwork(ck.params)
        state = AdamState.from_extra(ck.extra, "", net.params)
        start = int(ck.meta["epoch"]) + 1
    if net is None:
        net = build_inverter(schedule.seed, dtype)
    elif net.dtype != dtype:
        net = InverterNetwork(net.params.astype(dtype))
    if state is None:
        state = AdamState.for_params(net.params)
    mlog = MetricsLog(ckdir / "metrics.log" if ckdir is not None and log_path is None else log_path, append=start > 0)
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    best = math.inf
    if start > 0 and ckdir is not None and (ckdir / "best.ckpt").exists():
        best = float(load_checkpoint(ckdir / "best.ckpt").meta.get("val_of", math.inf))
    bs = schedule.batch_size
    end = schedule.epochs if stop_after is None else min(schedule.epochs, start + stop_after)
    for epoch in range(start, end):
        lr = schedule.lr_at(epoch)
        order = _epoch_order(len(samples), schedule.seed, epoch)
        losses = []
        for b in range(0, len(order), bs):
            idx = np.sort(order[b:b + bs])
            loss, grads = inverter_step(net, bw[idx], fw[idx], valid[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite inverter loss at epoch {epoch}")
            adam_step(net.params, grads, state, lr, schedule)
            losses.append(loss)
        record = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        val_of = None
        if validation:
            val_of = evaluate_inverter(net, validation).rate("OF", "all")
            record["val_OF"] = val_of
        mlog.write(**record)
        if ckdir is not None:
            save_training_state(ckdir / "last.ckpt", net, state, epoch)
            if val_of is not None and val_of < best:
                best = val_of
                save_training_state(ckdir / "best.ckpt", net, state, epoch, {"val_of": val_of})
    net.history = mlog.records
    return net


def evaluate_inverter(net, samples: Sequence[FrameTripletSample], inverter: Optional[Callable] = None) -> EvalReport:
    """Aggregate report of inverted backward ground truth against forward ground truth."""
    from .inversion import invert

    fn = inverter or (lambda bw: invert(net, bw))
    reports = []
    for s in samples:
        out = fn(s.gt_backward)
        reports.append(evaluate(out, s.gt_forward, s.valid_fw, s.noc_fw))
    return aggregate(reports)


# --- joint pipeline --------------------------------------------------------


@dataclass
class PipelineOutputs:
    inv: np.ndarray
    w_fw: np.ndarray
    w_bw: np.ndarray
    fused: np.ndarray
    terms: Dict[str, float]


def pipeline_step(
    inverter: InverterNetwork,
    fusion: FusionNetwork,
    fw,
    bw,
    gt,
    valid,
    cfg: RobustLossConfig = RobustLossConfig(),
    inv_params: Optional[NetworkParams] = None,
    fus_params: Optional[NetworkParams] = None,
    train_inverter_params: bool = True,
):
    """Forward and backward pass of the full fusion pipeline on one batch.

    Returns ``(outputs, inverter_grads, fusion_grads)``; the loss is the sum
    of the robust losses of ``fw``, the inverted ``bw`` and the fused result.
    The inverter also receives the gradient that flows back through the
    fusion network's input.
    """
    dtype = fusion.dtype
    fw = np.asarray(fw, dtype=dtype)
    if fw.ndim == 3:
        fw, bw, gt, valid = fw[None], np.asarray(bw)[None], np.asarray(gt)[None], np.asarray(valid)[None]
    inv_tapes: list = []
    inv = inverter.forward(inverter.prepare_input(bw), inv_params, inv_tapes)
    fus_tapes: list = []
    logits = fusion.forward(fusion.prepare_input(fw, inv), fus_params, fus_tapes)
    la, lb = fusion.split_logits(logits)
    w_fw, w_bw = pairwise_softmax(la, lb)
    fused = w_fw * fw + w_bw * inv

    l_fw, _ = robust_loss_and_grad(fw, gt, valid, cfg)
    l_inv, g_inv = robust_loss_and_grad(inv, gt, valid, cfg)
    l_fused, g_fused = robust_loss_and_grad(fused, gt, valid, cfg)

    k = w_fw.shape[-1]
    g_wfw = g_fused * fw
    g_wbw = g_fused * inv
    if k == 1:
        g_wfw = g_wfw.sum(axis=-1, keepdims=True)
        g_wbw = g_wbw.sum(axis=-1, keepdims=True)
    ga, gb = pairwise_softmax_backward(w_fw, w_bw, g_wfw, g_wbw)
    fus_grads, g_in = fusion.backward(np.concatenate([ga, gb], axis=-1), fus_tapes, fus_params)
    inv_grads = None
    if train_inverter_params:
        g_inv = g_inv + g_fused * w_bw + g_in[..., 4:8]
        inv_grads, _ = inverter.backward(g_inv, inv_tapes, inv_params)
    terms = {"fw": l_fw, "inv": l_inv, "fused": l_fused}
    terms["total"] = l_fw + l_inv + l_fused
    return PipelineOutputs(inv, w_fw, w_bw, fused, terms), inv_grads, fus_grads


@dataclass
class PreparedSample:
    sample_id: str
    fw: np.ndarray
    bw: np.ndarray
    gt: np.ndarray
    valid: np.ndarray
    noc: np.ndarray


def prepare_samples(dataset: Sequence[FrameTripletSample], estimator_config: EstimatorConfig) -> List[PreparedSample]:
    out = []
    for s in dataset:
        fw = estimate(s, FORWARD, estimator_config)
        bw = estimate(s, BACKWARD, estimator_config)
        valid = s.valid_fw & fw.mask & bw.mask
        out.append(PreparedSample(s.sample_id, fw.data, bw.data, s.gt_forward.data, valid, s.noc_fw))
    return out


def run_pipeline(inverter: InverterNetwork, fusion: FusionNetwork, fw: SceneFlowField, bw: SceneFlowField):
    """Inference: ``(inverted, weights_fw, weights_bw, fused)`` as raw arrays."""
    inv = inverter.forward(inverter.prepare_input(bw.data))
    logits = fusion.forward(fusion.prepare_input(fw.data, inv))
    la, lb = fusion.split_logits(logits)
    w_fw, w_bw = pairwise_softmax(la, lb)
    fused = w_fw * fw.data.astype(fusion.dtype) + w_bw * inv
    return inv[0], w_fw[0], w_bw[0], fused[0]


def evaluate_pipeline(inverter, fusion, prepared: Sequence[PreparedSample]) -> Dict[str, EvalReport]:
    """Aggregated reports for the forward, inverted and fused estimates."""
    reps: Dict[str, List[EvalReport]] = {"fw": [], "inv": [], "fused": []}
    for p in prepared:
        fw = SceneFlowField(p.fw, FORWARD)
        bw = SceneFlowField(p.bw, BACKWARD)
        gt = SceneFlowField(p.gt, FORWARD)
        inv, _, _, fused = run_pipeline(inverter, fusion, fw, bw)
        for name, arr in (("fw", p.fw), ("inv", inv), ("fused", fused)):
            reps[name].append(evaluate(SceneFlowField(arr.astype(np.float64)), gt, p.valid, p.noc))
    return {k: aggregate(v) for k, v in reps.items()}


def train_pipeline(
    dataset: Sequence[FrameTripletSample],
    estimator_config: EstimatorConfig,
    variant="basic",
    schedule: TrainSchedule = SCHEDULE_PRESETS["desk"],
    inverter: Optional[InverterNetwork] = None,
    fusion: Optional[FusionNetwork] = None,
    loss_cfg: RobustLossConfig = RobustLossConfig(),
    dtype=np.float32,
    log_path=None,
    checkpoint_dir=None,
    resume: bool = False,
    validation: Optional[Sequence[FrameTripletSample]] = None,
    stop_after: Optional[int] = None,
) -> Tuple[InverterNetwork, FusionNetwork]:
    """Joint fine-tuning of inverter and fusion network on estimator outputs."""
    v = get_variant(variant)
    prepared = prepare_samples(dataset, estimator_config)
    if not prepared:
        raise ValueError("empty training set")
    val_prepared = prepare_samples(validation, estimator_config) if validation else None
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    start = 0
    inv_state = fus_state = None
    if resume and ckdir is not None and (ckdir / "last_fusion.ckpt").exists():
        ck_i = load_checkpoint(ckdir / "last_inverter.ckpt", dtype)
        ck_f = load_checkpoint(ckdir / "last_fusion.ckpt", dtype)
        inverter = InverterNetwork(ck_i.params)
        fusion = FusionNetwork(v, ck_f.params)
        inv_state = AdamState.from_extra(ck_i.extra, "", inverter.params)
        fus_state = AdamState.from_extra(ck_f.extra, "", fusion.params)
        start = int(ck_f.meta["epoch"]) + 1
    if inverter is None:
        inverter = build_inverter(schedule.seed, dtype)
    elif inverter.dtype != dtype:
        inverter = InverterNetwork(inverter.params.astype(dtype))
    else:
        inverter = InverterNetwork(inverter.params.copy())
    if fusion is None:
        fusion = build_fusion(v, schedule.seed + 1, dtype)
    elif fusion.dtype != dtype:
        fusion = FusionNetwork(v, fusion.params.astype(dtype))
    inv_state = inv_state or AdamState.for_params(inverter.params)
    fus_state = fus_state or AdamState.for_params(fusion.params)
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    mlog = MetricsLog(ckdir / "metrics.log" if ckdir is not None and log_path is None else log_path, append=start > 0)
    best = math.inf
    if start > 0 and ckdir is not None and (ckdir / "best_fusion.ckpt").exists():
        best = float(load_checkpoint(ckdir / "best_fusion.ckpt").meta.get("val_sf", math.inf))
    bs = schedule.batch_size
    end = schedule.epochs if stop_after is None else min(schedule.epochs, start + stop_after)
    for epoch in range(start, end):
        lr = schedule.lr_at(epoch)
        order = _epoch_order(len(prepared), schedule.seed, epoch)
        sums = {"fw": 0.0, "inv": 0.0, "fused": 0.0}
        for b in range(0, len(order), bs):
            batch = [prepared[i] for i in np.sort(order[b:b + bs])]
            out, g_i, g_f = pipeline_step(
                inverter,
                fusion,
                np.stack([p.fw for p in batch]),
                np.stack([p.bw for p in batch]),
                np.stack([p.gt for p in batch]),
                np.stack([p.valid for p in batch]),
                loss_cfg,
            )
            if not math.isfinite(out.terms["total"]):
                raise FloatingPointError(f"non-finite pipeline loss at epoch {epoch}")
            adam_step(inverter.params, g_i, inv_state, lr, schedule)
            adam_step(fusion.params, g_f, fus_state, lr, schedule)
            for k in sums:
                sums[k] += out.terms[k] * len(batch)
        n = len(prepared)
        record = {"epoch": epoch, "lr": lr, "L_fw": sums["fw"] / n, "L_inv": sums["inv"] / n, "L_fused": sums["fused"] / n}
        val_sf = None
        if val_prepared:
            reports = evaluate_pipeline(inverter, fusion, val_prepared)
            val_sf = reports["fused"].rate("SF", "all")
            for comp in ("D1", "D2", "OF", "SF"):
                for region in ("all", "noc", "occ"):
                    r = reports["fused"].rates[(comp, region)]
                    record[f"val.{comp}.{region}"] = "absent" if r is None else r
        mlog.write(**record)
        if ckdir is not None:
            save_training_state(ckdir / "last_inverter.ckpt", inverter, inv_state, epoch)
            save_training_state(ckdir / "last_fusion.ckpt", fusion, fus_state, epoch)
            if val_sf is not None and val_sf < best:
                best = val_sf
                save_training_state(ckdir / "best_inverter.ckpt", inverter, inv_state, epoch, {"val_sf": val_sf})
                save_training_state(ckdir / "best_fusion.ckpt", fusion, fus_state, epoch, {"val_sf": val_sf})
    fusion.history = mlog.records
    return inverter, fusion
