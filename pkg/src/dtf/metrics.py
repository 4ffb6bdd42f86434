"""KITTI-style outlier rates for disparity, optical flow and scene flow."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import D0, D1, SceneFlowField, derive_occ_mask

COMPONENTS = ("D1", "D2", "OF", "SF")
REGIONS = ("all", "noc", "occ")

ABS_THRESHOLD = 3.0
REL_THRESHOLD = 0.05

DEFAULT_NOC_RATIO = 0.843


def _check_shapes(est: SceneFlowField, gt: SceneFlowField, *masks):
    if est.shape != gt.shape:
        raise ValueError(f"estimate {est.shape} and ground truth {gt.shape} differ in shape")
    for m in masks:
        if m is not None and np.shape(m) != gt.shape:
            raise ValueError(f"mask {np.shape(m)} does not match field {gt.shape}")


def component_errors(est: np.ndarray, gt: np.ndarray, component: str):
    """Per-pixel ``(error, magnitude)`` for one component on raw ``(..., 4)`` arrays."""
    if component == "D1":
        return np.abs(est[..., D0] - gt[..., D0]), np.abs(gt[..., D0])
    if component == "D2":
        return np.abs(est[..., D1] - gt[..., D1]), np.abs(gt[..., D1])
    if component == "OF":
        err = np.hypot(est[..., 0] - gt[..., 0], est[..., 1] - gt[..., 1])
        return err, np.hypot(gt[..., 0], gt[..., 1])
    raise ValueError(f"unknown component {component!r}")


def outlier_from_errors(err, mag):
    return (err > ABS_THRESHOLD) & (err > REL_THRESHOLD * mag)


def component_outlier_map(
    est: SceneFlowField, gt: SceneFlowField, valid: np.ndarray, component: str
) -> np.ndarray:
    """Outlier mask for ``D1``, ``D2`` or ``OF``, restricted to valid pixels.

    A pixel is an outlier when its error exceeds both 3 px and 5 % of the
    ground-truth magnitude.  For ``D2`` the target-time disparities are
    compared directly on the reference grid.
    """
    _check_shapes(est, gt, valid)
    err, mag = component_errors(est.data, gt.data, component)
    return outlier_from_errors(err, mag) & np.asarray(valid, dtype=bool)


def outlier_maps(est: SceneFlowField, gt: SceneFlowField, valid: np.ndarray) -> Dict[str, np.ndarray]:
    maps = {c: component_outlier_map(est, gt, valid, c) for c in ("D1", "D2", "OF")}
    maps["SF"] = maps["D1"] | maps["D2"] | maps["OF"]
    return maps


@dataclass
class EvalReport:
    """Outlier rates in percent keyed by ``(component, region)``.

    ``rates`` holds ``None`` for a region without valid pixels.
    ``pixel_counts`` holds the number of valid pixels in each region and
    ``outlier_counts`` the number of outliers, so reports can be merged exactly.
    """

    rates: Dict[Tuple[str, str], Optional[float]]
    pixel_counts: Dict[Tuple[str, str], int]
    outlier_counts: Dict[Tuple[str, str], int] = field(default_factory=dict)

    def rate(self, component: str, region: str = "all") -> Optional[float]:
        return self.rates[(component, region)]

    def to_text(self) -> str:
        lines = []
        for comp in COMPONENTS:
            for region in REGIONS:
                r = self.rates.get((comp, region))
                lines.append(f"{comp}.{region} = {'absent' if r is None else repr(float(r))}")
        for comp in COMPONENTS:
            for region in REGIONS:
                lines.append(f"count.{comp}.{region} = {self.pixel_counts.get((comp, region), 0)}")
                if (comp, region) in self.outlier_counts:
                    lines.append(f"outliers.{comp}.{region} = {self.outlier_counts[(comp, region)]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        rates, counts, outliers = {}, {}, {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            parts = key.split(".")
            if parts[0] == "count":
                counts[(parts[1], parts[2])] = int(value)
            elif parts[0] == "outliers":
                outliers[(parts[1], parts[2])] = int(value)
            elif len(parts) == 2 and parts[0] in COMPONENTS:
                rates[(parts[0], parts[1])] = None if value == "absent" else float(value)
        return cls(rates, counts, outliers)

    def table(self) -> str:
        head = "      " + "".join(f"{c:>9}" for c in COMPONENTS)
        rows = [head]
        for region in REGIONS:
            cells = []
            for comp in COMPONENTS:
                r = self.rates.get((comp, region))
                cells.append(f"{'--':>9}" if r is None else f"{r:9.2f}")
            rows.append(f"{region:<6}" + "".join(cells))
        return "\n".join(rows)


def evaluate(est: SceneFlowField, gt: SceneFlowField, valid: np.ndarray, noc: np.ndarray) -> EvalReport:
    """Outlier rates of every component over the all/noc/occ regions."""
    valid = np.asarray(valid, dtype=bool)
    noc = np.asarray(noc, dtype=bool)
    _check_shapes(est, gt, valid, noc)
    maps = outlier_maps(est, gt, valid)
    regions = {"all": valid, "noc": valid & noc, "occ": derive_occ_mask(valid, noc)}
    rates, counts, outliers = {}, {}, {}
    for region, mask in regions.items():
        n = int(mask.sum())
        for comp, omap in maps.items():
            k = int((omap & mask).sum())
            counts[(comp, region)] = n
            outliers[(comp, region)] = k
            rates[(comp, region)] = 100.0 * k / n if n else None
    return EvalReport(rates, counts, outliers)


def aggregate(reports: Sequence) -> EvalReport:
    """Pixel-weighted average of several reports.

    Accepts ``EvalReport`` objects or ``(report, pixel_counts)`` pairs.  Rates
    of regions that are empty in every report stay absent.
    """
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    pairs: List[Tuple[EvalReport, Dict]] = []
    for item in reports:
        if isinstance(item, EvalReport):
            pairs.append((item, item.pixel_counts))
        else:
            rep, cnt = item
            pairs.append((rep, cnt))
    keys = set()
    for rep, _ in pairs:
        keys.update(rep.rates)
    rates, counts, outliers = {}, {}, {}
    for key in sorted(keys):
        n_total = 0
        k_total = 0.0
        exact = True
        for rep, cnt in pairs:
            n = int(cnt.get(key, 0))
            r = rep.rates.get(key)
            if n == 0 or r is None:
                continue
            n_total += n
            if key in rep.outlier_counts and cnt is rep.pixel_counts:
                k_total += rep.outlier_counts[key]
            else:
                exact = False
                k_total += r * n / 100.0
        counts[key] = n_total
        if n_total:
            rates[key] = 100.0 * k_total / n_total
            if exact:
                outliers[key] = int(k_total)
        else:
            rates[key] = None
    return EvalReport(rates, counts, outliers)


@dataclass(frozen=True)
class NocRatio:
    """Fraction of valid pixels that are non-occluded."""

    ratio: float = DEFAULT_NOC_RATIO

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"noc ratio must lie strictly between 0 and 1, got {self.ratio}")


def reconstruct_occ_rate(all_rate: float, noc_rate: float, ratio=DEFAULT_NOC_RATIO) -> float:
    """Recover the occluded-only rate from all/noc rates and the noc area share."""
    r = ratio.ratio if isinstance(ratio, NocRatio) else NocRatio(float(ratio)).ratio
    occ = (all_rate - noc_rate * r) / (1.0 - r)
    if occ < 0:
        warnings.warn(
            f"reconstructed occ rate {occ:.3f} is negative; all={all_rate} and noc={noc_rate} "
            f"are inconsistent with noc ratio {r}",
            RuntimeWarning,
            stacklevel=2,
        )
    return occ


def reconstruct_report(report: EvalReport, ratio=DEFAULT_NOC_RATIO) -> Dict[str, Optional[float]]:
    """Reconstructed occ rate per component, keyed by component name."""
    out = {}
    for comp in COMPONENTS:
        a, n = report.rates.get((comp, "all")), report.rates.get((comp, "noc"))
        out[comp] = None if a is None or n is None else reconstruct_occ_rate(a, n, ratio)
    return out


def measure_noc_ratio(masks: Iterable[Tuple[np.ndarray, np.ndarray]]) -> NocRatio:
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one (valid, noc) pair")
    n_valid = 0
    n_noc = 0
    for valid, noc in masks:
        valid = np.asarray(valid, dtype=bool)
        n_valid += int(valid.sum())
        n_noc += int((valid & np.asarray(noc, dtype=bool)).sum())
    if n_valid == 0:
        raise ValueError("no valid pixels to measure the noc ratio on")
    return NocRatio(n_noc / n_valid)

