"""``dtf`` command line: generate, train-inverter, train, fuse, eval.

Every command reads an optional INI run config (``--config``), applies the
command-line overrides, and writes the resolved config to ``<out>/run.cfg``.
Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import synth
from .core import BACKWARD, FORWARD, SceneFlowField
from .data_io import (
    iterate_samples,
    load_external_field,
    load_manifest,
    save_dataset,
    write_field,
    write_image_png,
    write_mask_png,
)
from .estimator import EstimatorConfig, estimate
from .fusion import VARIANTS, FusionNetwork, get_variant, oracle_fuse, predict_weights, weighted_average
from .inversion import InverterNetwork, constant_linear_invert, invert
from .metrics import EvalReport, NocRatio, aggregate, evaluate, reconstruct_report
from .training import TrainSchedule, schedule_preset, train_inverter, train_pipeline
from .viz import error_map, flow_to_rgb, occlusion_image

log = logging.getLogger("dtf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


DEFAULTS: Dict[str, Dict[str, str]] = {
    "run": {"seed": "0", "out": "run"},
    "generate": {"n": "10", "preset": "driving", "height": "32", "width": "64", "split": "train"},
    "estimator": {
        "kind": "noisy_oracle",
        "sigma_flow": "0.5",
        "sigma_disp": "0.2",
        "occ_corruption": "large_noise",
        "occ_sigma": "10.0",
        "noise_length": "4.0",
        "root": "",
    },
    "schedule": {"preset": "", "epochs": "", "batch_size": "", "lr_stages": ""},
    "data": {"train": "", "validation": "", "dataset": ""},
    "model": {"variant": "basic", "inverter": "learned", "inverter_checkpoint": "", "fusion_checkpoint": ""},
    "eval": {"estimates": "", "error_maps": "true", "flow_images": "false", "reconstruct_occ": ""},
}


@dataclass
class RunConfig:
    """Sectioned string settings; ``from_text(to_text())`` restores it exactly."""

    sections: Dict[str, Dict[str, str]] = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({name: dict(values) for name, values in DEFAULTS.items()})

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        cp = _parser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise UsageError(f"malformed config: {exc}") from None
        out = base.copy() if base is not None else cls()
        for name in cp.sections():
            out.sections.setdefault(name, {}).update(cp[name])
        return out

    @classmethod
    def from_file(cls, path, base: Optional["RunConfig"] = None) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), base)

    def to_text(self) -> str:
        cp = _parser()
        for name, values in self.sections.items():
            cp[name] = values
        lines: List[str] = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    def copy(self) -> "RunConfig":
        return RunConfig({k: dict(v) for k, v in self.sections.items()})

    def set(self, section: str, key: str, value):
        self.sections.setdefault(section, {})[key] = str(value)

    def get(self, section: str, key: str, default: str = "") -> str:
        return self.sections.get(section, {}).get(key, default).strip()

    def get_int(self, section: str, key: str) -> int:
        return _convert(self, section, key, int)

    def get_float(self, section: str, key: str) -> float:
        return _convert(self, section, key, float)

    def get_bool(self, section: str, key: str) -> bool:
        value = self.get(section, key).lower()
        if value in ("1", "true", "yes", "on"):
            return True
        if value in ("0", "false", "no", "off", ""):
            return False
        raise UsageError(f"[{section}] {key}: expected a boolean, got {value!r}")


def _parser():
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def _convert(cfg: RunConfig, section: str, key: str, kind):
    raw = cfg.get(section, key)
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


# --- config helpers ---------------------------------------------------------


def estimator_config(cfg: RunConfig) -> EstimatorConfig:
    try:
        return EstimatorConfig(
            kind=cfg.get("estimator", "kind"),
            sigma_flow=cfg.get_float("estimator", "sigma_flow"),
            sigma_disp=cfg.get_float("estimator", "sigma_disp"),
            occ_corruption=cfg.get("estimator", "occ_corruption"),
            occ_sigma=cfg.get_float("estimator", "occ_sigma"),
            noise_length=cfg.get_float("estimator", "noise_length"),
            seed=cfg.get_int("run", "seed"),
            root=cfg.get("estimator", "root") or None,
        )
    except ValueError as exc:
        raise UsageError(f"[estimator] {exc}") from None


def parse_lr_stages(text: str):
    """``"0:1e-4, 20:1e-5"`` -> ``((0, 1e-4), (20, 1e-5))``."""
    stages = []
    for part in text.split(","):
        epoch, sep, rate = part.strip().partition(":")
        if not sep:
            raise UsageError(f"learning-rate stage {part.strip()!r} is not of the form epoch:rate")
        stages.append((int(epoch), float(rate)))
    return tuple(stages)


def schedule_from(cfg: RunConfig, default_preset: str) -> TrainSchedule:
    overrides = {"seed": cfg.get_int("run", "seed")}
    if cfg.get("schedule", "epochs"):
        overrides["epochs"] = cfg.get_int("schedule", "epochs")
    if cfg.get("schedule", "batch_size"):
        overrides["batch_size"] = cfg.get_int("schedule", "batch_size")
    if cfg.get("schedule", "lr_stages"):
        try:
            overrides["lr_stages"] = parse_lr_stages(cfg.get("schedule", "lr_stages"))
        except ValueError:
            raise UsageError("[schedule] lr_stages must look like '0:1e-4, 20:1e-5'") from None
    if not cfg.get("schedule", "preset"):
        cfg.set("schedule", "preset", default_preset)
    try:
        return schedule_preset(cfg.get("schedule", "preset"), **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_ratio(text: str) -> NocRatio:
    key, sep, value = text.partition("=")
    if not sep or key.strip() != "ratio":
        raise UsageError(f"--reconstruct-occ expects ratio=R, got {text!r}")
    try:
        return NocRatio(float(value))
    except ValueError as exc:
        raise UsageError(f"--reconstruct-occ: {exc}") from None


def _load_dataset(cfg: RunConfig, key: str, required: bool = True):
    path = cfg.get("data", key)
    if not path:
        if required:
            raise UsageError(f"[data] {key} must name a dataset manifest")
        return None
    return list(iterate_samples(load_manifest(path)))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.get("run", "out") or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())
    return out


# --- commands ---------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    n = cfg.get_int("generate", "n")
    if n < 0:
        raise UsageError("[generate] n must be non-negative")
    seed = cfg.get_int("run", "seed")
    h, w = cfg.get_int("generate", "height"), cfg.get_int("generate", "width")
    preset = cfg.get("generate", "preset")
    split = cfg.get("generate", "split")
    try:
        if "scene" in cfg.sections:
            body = "\n".join(f"{k} = {v}" for k, v in cfg.sections["scene"].items())
            base = synth.SceneConfig.from_text(body)
            samples = [
                synth.generate_sample(replace(base, seed=seed + i), sample_id=f"{seed + i:06d}") for i in range(n)
            ]
        else:
            samples = synth.generate_dataset(n, seed, preset, h, w)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid scene configuration: {exc}") from None
    out = _out_dir(cfg)
    generator = {"seed": seed, "preset": "scene" if "scene" in cfg.sections else preset}
    try:
        save_dataset(out, samples, split, {"generator": generator})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"samples = {len(samples)}")
    for direction in (FORWARD, BACKWARD):
        total = sum(int(s.masks(direction)[0].sum()) for s in samples)
        occ = sum(int((s.masks(direction)[0] & ~s.masks(direction)[1]).sum()) for s in samples)
        print(f"occ_fraction.{direction} = {occ / total if total else 0.0:.6f}")
    print(f"manifest = {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_train_inverter(cfg: RunConfig, resume: bool = False) -> int:
    train = _load_dataset(cfg, "train")
    val = _load_dataset(cfg, "validation", required=False)
    schedule = schedule_from(cfg, "paper-inverter")
    out = _out_dir(cfg)
    net = train_inverter(train, schedule, checkpoint_dir=out, resume=resume, validation=val)
    last = net.history[-1] if net.history else {}
    print(f"epochs = {schedule.epochs}")
    print(f"final_loss = {last.get('loss', float('nan')):.6g}")
    print(f"checkpoint = {out / 'last.ckpt'}")
    return EXIT_OK


def _load_inverter(cfg: RunConfig) -> Optional[InverterNetwork]:
    path = cfg.get("model", "inverter_checkpoint")
    if not path:
        return None
    try:
        return InverterNetwork.load(path)
    except FileNotFoundError:
        raise DataError(f"inverter checkpoint not found: {path}") from None


def _variant(cfg: RunConfig):
    try:
        return get_variant(cfg.get("model", "variant"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    variant = _variant(cfg)
    train = _load_dataset(cfg, "train")
    val = _load_dataset(cfg, "validation", required=False)
    schedule = schedule_from(cfg, "desk")
    est = estimator_config(cfg)
    inverter = _load_inverter(cfg)
    out = _out_dir(cfg)
    _, fusion = train_pipeline(
        train, est, variant, schedule, inverter=inverter, checkpoint_dir=out, resume=resume, validation=val
    )
    last = fusion.history[-1] if fusion.history else {}
    for key in ("L_fw", "L_inv", "L_fused"):
        if key in last:
            print(f"{key} = {last[key]:.6g}")
    print(f"checkpoint = {out / 'last_fusion.ckpt'}")
    return EXIT_OK


def cmd_fuse(cfg: RunConfig, oracle: bool = False) -> int:
    variant = _variant(cfg)
    samples = _load_dataset(cfg, "dataset")
    est = estimator_config(cfg)
    mode = cfg.get("model", "inverter")
    if mode not in ("learned", "constant-linear"):
        raise UsageError(f"[model] inverter must be learned or constant-linear, got {mode!r}")
    inverter = _load_inverter(cfg) if mode == "learned" else None
    if mode == "learned" and inverter is None:
        raise UsageError("a learned inverter needs [model] inverter_checkpoint (or use --inverter constant-linear)")
    fusion = None
    if not oracle:
        path = cfg.get("model", "fusion_checkpoint")
        if not path:
            raise UsageError("fusion needs [model] fusion_checkpoint unless --oracle is given")
        try:
            fusion = FusionNetwork.load(path, variant)
        except FileNotFoundError:
            raise DataError(f"fusion checkpoint not found: {path}") from None
    out = _out_dir(cfg)
    for s in samples:
        fw = estimate(s, FORWARD, est)
        bw = estimate(s, BACKWARD, est)
        inv = invert(inverter, bw) if inverter is not None else constant_linear_invert(bw)
        inv = inv.replace(valid=fw.mask & inv.mask)
        if oracle:
            fused, selection = oracle_fuse(fw, inv, s.gt_forward, s.valid_fw & fw.mask)
            write_mask_png(out / "selection" / f"{s.sample_id}.png", selection)
        else:
            weights = predict_weights(fusion, fw, inv)
            fused = weighted_average(fw, inv, weights)
            write_image_png(out / "occlusion" / f"{s.sample_id}.png",
                            np.repeat(occlusion_image(weights.w_bw)[..., None], 3, axis=-1) / 255.0)
        for name, fld in (("forward", fw), ("inverted", inv), ("fused", fused)):
            write_field(out / name, s.sample_id, fld.replace(valid=fw.mask), clip=True)
    print(f"samples = {len(samples)}")
    print(f"fused = {out / 'fused'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, report_path: Optional[str] = None, ratio_text: Optional[str] = None) -> int:
    ratio_text = ratio_text or cfg.get("eval", "reconstruct_occ") or None
    ratio = parse_ratio(ratio_text) if ratio_text else None
    if report_path is not None:
        p = Path(report_path)
        if not p.is_file():
            raise DataError(f"report not found: {p}")
        report = EvalReport.from_text(p.read_text())
        print(report.table())
        if ratio is not None:
            _print_reconstruction(report, ratio)
        return EXIT_OK

    samples = _load_dataset(cfg, "dataset")
    root = cfg.get("eval", "estimates")
    if not root:
        raise UsageError("[eval] estimates must name a directory of forward estimates")
    out = _out_dir(cfg)
    maps = cfg.get_bool("eval", "error_maps")
    flows = cfg.get_bool("eval", "flow_images")
    reports = []
    for s in samples:
        try:
            est = load_external_field(root, FORWARD, s.sample_id)
        except FileNotFoundError as exc:
            raise DataError(f"missing estimate for sample {s.sample_id}: {exc}") from None
        if est.shape != s.gt_forward.shape:
            raise DataError(f"sample {s.sample_id}: estimate is {est.shape}, ground truth {s.gt_forward.shape}")
        rep = evaluate(est, s.gt_forward, s.valid_fw, s.noc_fw)
        reports.append(rep)
        (out / "reports").mkdir(exist_ok=True)
        (out / "reports" / f"{s.sample_id}.txt").write_text(rep.to_text())
        if maps:
            write_image_png(out / "error_maps" / f"{s.sample_id}.png",
                            error_map(est, s.gt_forward, s.valid_fw) / 255.0)
        if flows:
            rgb, peak = flow_to_rgb(est.data[..., :2], s.valid_fw)
            write_image_png(out / "flow" / f"{s.sample_id}_max{peak:.2f}.png", rgb / 255.0)
    if not reports:
        raise DataError("dataset is empty; nothing to evaluate")
    total = aggregate(reports)
    (out / "report.txt").write_text(total.to_text())
    (out / "table.txt").write_text(total.table() + "\n")
    print(total.table())
    if ratio is not None:
        lines = _print_reconstruction(total, ratio)
        (out / "reconstructed_occ.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _print_reconstruction(report: EvalReport, ratio: NocRatio) -> List[str]:
    lines = []
    for comp, value in reconstruct_report(report, ratio).items():
        lines.append(f"{comp}.occ_reconstructed = {'absent' if value is None else f'{value:.2f}'}")
    print("\n".join(lines))
    return lines


# --- argument parsing -------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run config")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="output directory, overrides [run] out")
    common.add_argument("--variant", choices=sorted(VARIANTS))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dtf", description="Multi-frame scene flow fusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    for name, text in (("train-inverter", "pretrain the temporal inverter"), ("train", "train the fusion pipeline")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    p = sub.add_parser("fuse", parents=[common], help="fuse forward and inverted backward estimates")
    p.add_argument("--inverter", choices=["learned", "constant-linear"])
    p.add_argument("--oracle", action="store_true", help="select with ground truth instead of the network")
    p = sub.add_parser("eval", parents=[common], help="outlier rates, reports and error maps")
    p.add_argument("--reconstruct-occ", metavar="ratio=R", help="derive occ rates from all/noc rates")
    p.add_argument("--report", help="existing report file to summarize instead of evaluating estimates")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.defaults()
    if args.config:
        cfg = RunConfig.from_file(args.config, cfg)
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.out is not None:
        cfg.set("run", "out", args.out)
    if args.variant is not None:
        cfg.set("model", "variant", args.variant)
    if getattr(args, "inverter", None):
        cfg.set("model", "inverter", args.inverter)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train-inverter":
            return cmd_train_inverter(cfg, args.resume)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "fuse":
            return cmd_fuse(cfg, args.oracle)
        return cmd_eval(cfg, args.report, args.reconstruct_occ)
    except UsageError as exc:
        print(f"dtf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"dtf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"dtf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
