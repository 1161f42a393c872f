"""Overlap, map-error and cohort statistics, plus the loss-weight grid search."""
from __future__ import annotations

import csv
import json
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .case import DwiCase
from .errors import DegenerateInputError, GridSearchError, InvalidArgumentError, ShapeMismatchError
from .joint import OptConfig, optimize_case
from .losses import LossConfig
from .model import DEFAULT_BOUNDS, PARAM_NAMES, IvimMaps, ParamBounds
from .warp import warp_mask_nearest

log = logging.getLogger(__name__)

CANALICULAR_MAX_GA = 26.0
MIN_SUBSET = 3
DEFAULT_GRID = {
    "alpha1": (0.5, 1.0, 5.0, 10.0),
    "alpha2": (0.015, 0.03),
    "alpha3": (0.1, 0.8, 5.0),
}
CRITERIA = ("rmse_f", "r2_f")


def dice(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def mask_alignment_score(masks: Union[DwiCase, np.ndarray], deformations=None) -> float:
    """Mean Dice of each warped mask i >= 1 against the b=0 mask.

    ``deformations`` has one field per b > 0 image; None means identity,
    which gives the pre-registration score.
    """
    if isinstance(masks, DwiCase):
        if masks.lung_masks is None:
            raise InvalidArgumentError("case has no per-image lung masks")
        masks = masks.lung_masks
    if masks is None:
        raise InvalidArgumentError("per-image masks are required")
    masks = np.asarray(masks).astype(bool)
    if masks.ndim != 3 or masks.shape[0] < 2:
        raise ShapeMismatchError("need one mask per image and at least two images")
    moved = masks[1:].astype(np.float64)
    if deformations is not None:
        deformations = np.asarray(deformations, dtype=np.float64)
        if deformations.shape != (masks.shape[0] - 1, 2, *masks.shape[1:]):
            raise ShapeMismatchError(
                f"deformations {deformations.shape} do not match {masks.shape[0] - 1} masks of {masks.shape[1:]}")
        moved = warp_mask_nearest(moved, deformations)
    return float(np.mean([dice(m > 0.5, masks[0]) for m in moved]))


def param_rmse(est: IvimMaps, gt: IvimMaps, mask) -> dict:
    mask = np.asarray(mask).astype(bool)
    if est.D.shape != gt.D.shape or mask.shape != gt.D.shape:
        raise ShapeMismatchError("maps and mask must share one shape")
    if not mask.any():
        raise InvalidArgumentError("RMSE mask is empty")
    return {p: float(np.sqrt(np.mean((getattr(est, p)[mask] - getattr(gt, p)[mask]) ** 2)))
            for p in PARAM_NAMES}


def roi_means(maps: IvimMaps, roi) -> dict:
    roi = np.asarray(roi).astype(bool)
    if not roi.any():
        raise InvalidArgumentError("ROI is empty")
    return {p: float(getattr(maps, p)[roi].mean()) for p in PARAM_NAMES}


@dataclass(frozen=True)
class CohortRecord:
    case_id: str
    ga_weeks: float
    mean_D: float
    mean_Dstar: float
    mean_f: float
    method: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.ga_weeks) and self.ga_weeks > 0):
            raise InvalidArgumentError(f"{self.case_id}: gestational age must be positive")

    def check_bounds(self, bounds: ParamBounds = DEFAULT_BOUNDS):
        for p in PARAM_NAMES:
            lo, hi = getattr(bounds, p)
            v = getattr(self, "mean_" + p)
            if not lo <= v <= hi:
                raise InvalidArgumentError(f"{self.case_id}: mean {p}={v} outside [{lo}, {hi}]")
        return self

    def value(self, parameter: str) -> float:
        return getattr(self, "mean_" + parameter)

    @classmethod
    def from_maps(cls, case_id, ga_weeks, maps: IvimMaps, roi, method=""):
        m = roi_means(maps, roi)
        return cls(case_id, float(ga_weeks), m["D"], m["Dstar"], m["f"], method)


@dataclass(frozen=True)
class SubsetFit:
    n: int
    sufficient: bool
    r2: float = float("nan")
    r: float = float("nan")
    slope: float = float("nan")
    intercept: float = float("nan")


@dataclass(frozen=True)
class CorrelationReport:
    parameter: str
    canalicular: SubsetFit
    saccular: SubsetFit

    def to_dict(self):
        return asdict(self)


def linear_fit(x, y) -> SubsetFit:
    """Ordinary least-squares line with R² and Pearson r.

    Constant ``y`` has no variance to explain: R² and r are defined as 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < MIN_SUBSET:
        return SubsetFit(n, False)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy, sxy = dx @ dx, dy @ dy, dx @ dy
    if sxx <= 1e-12 * max(1.0, float(x @ x)):
        raise DegenerateInputError("gestational ages have zero variance")
    slope = sxy / sxx
    intercept = y.mean() - slope * x.mean()
    if syy <= 1e-30 * max(1.0, float(y @ y)):
        return SubsetFit(n, True, 0.0, 0.0, 0.0, float(y.mean()))
    r = float(np.clip(sxy / math.sqrt(sxx * syy), -1.0, 1.0))
    return SubsetFit(n, True, r * r, r, float(slope), float(intercept))


def correlate_ga(records: Sequence[CohortRecord], parameter: Union[str, Callable] = "f") -> CorrelationReport:
    """Parameter-vs-GA regression, separately for canalicular and saccular cases."""
    if callable(parameter):
        get, name = parameter, getattr(parameter, "__name__", "custom")
    elif parameter in PARAM_NAMES:
        get, name = (lambda r: r.value(parameter)), parameter
    else:
        raise InvalidArgumentError(f"unknown parameter {parameter!r}")
    subsets = ([r for r in records if r.ga_weeks < CANALICULAR_MAX_GA],
               [r for r in records if r.ga_weeks >= CANALICULAR_MAX_GA])
    fits = [linear_fit([r.ga_weeks for r in s], [get(r) for r in s]) for s in subsets]
    return CorrelationReport(name, *fits)


RECORD_COLUMNS = ("case_id", "ga_weeks", "method", "mean_D", "mean_Dstar", "mean_f")


def write_records(records: Sequence[CohortRecord], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: getattr(r, k) for k in RECORD_COLUMNS})


def read_records(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RECORD_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InvalidArgumentError(f"{path}: missing columns {sorted(missing)}")
        return [CohortRecord(row["case_id"], float(row["ga_weeks"]), float(row["mean_D"]),
                             float(row["mean_Dstar"]), float(row["mean_f"]), row["method"])
                for row in reader]


def write_table(rows: Sequence[dict], path):
    rows = list(rows)
    keys = list(dict.fromkeys(k for row in rows for k in row))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


@dataclass
class EvalCase:
    """A case for scoring; ``truth`` is only known for phantoms."""

    case: DwiCase
    truth: Optional[IvimMaps] = None
    roi: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.roi is None:
            self.roi = self.case.roi


@dataclass
class GridResult:
    best: LossConfig
    best_score: float
    table: list = field(default_factory=list)


def expand_grid(grid: dict) -> list:
    """Grid points in fixed order (alpha1 slowest)."""
    try:
        axes = [tuple(float(a) for a in grid[k]) for k in ("alpha1", "alpha2", "alpha3")]
    except KeyError as exc:
        raise InvalidArgumentError(f"grid lacks {exc.args[0]}") from None
    if any(len(a) == 0 for a in axes):
        raise InvalidArgumentError("every grid axis needs at least one value")
    return list(itertools.product(*axes))


def score_cases(results, cases: Sequence[EvalCase], criterion: str) -> float:
    """Higher is better: negative mean ROI f-RMSE, or canalicular R² of f vs GA."""
    if criterion == "rmse_f":
        errs = []
        for r, c in zip(results, cases):
            if c.truth is None or c.roi is None:
                raise InvalidArgumentError("rmse_f needs ground-truth maps and an ROI")
            errs.append(param_rmse(r.maps, c.truth, c.roi)["f"])
        return -float(np.mean(errs))
    if criterion == "r2_f":
        if any(c.case.ga_weeks is None for c in cases):
            raise InvalidArgumentError("r2_f needs a gestational age for every case")
        recs = [CohortRecord.from_maps(c.case.case_id, c.case.ga_weeks, r.maps, c.roi)
                for r, c in zip(results, cases)]
        fit = correlate_ga(recs, "f").canalicular
        if not fit.sufficient:
            raise InvalidArgumentError(f"only {fit.n} canalicular cases; need {MIN_SUBSET}")
        return fit.r2
    raise InvalidArgumentError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


def grid_search(cases: Sequence[EvalCase], grid: dict = DEFAULT_GRID, criterion: str = "rmse_f",
                base: OptConfig = OptConfig(), threads: int = 1,
                runner: Callable = optimize_case) -> GridResult:
    """Exhaustive search over loss weights.

    Every point runs ``runner(case, config)`` on every case. Points whose
    optimization or scoring fails are kept in the table with their error.
    """
    if criterion not in CRITERIA:
        raise InvalidArgumentError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    cases = list(cases)
    if not cases:
        raise InvalidArgumentError("grid search needs at least one case")
    points = expand_grid(grid)

    def evaluate(point):
        a1, a2, a3 = point
        row = {"alpha1": a1, "alpha2": a2, "alpha3": a3}
        try:
            loss = replace(base.loss, alpha1=a1, alpha2=a2, alpha3=a3)
            cfg = replace(base, loss=loss)
            results = [runner(c.case, cfg) for c in cases]
            row["score"] = score_cases(results, cases, criterion)
            if not math.isfinite(row["score"]):
                raise DegenerateInputError("non-finite score")
            row["status"] = "ok"
        except Exception as exc:  # failed points stay in the table
            log.warning("grid point %s failed: %s", point, exc)
            row.update(score=float("nan"), status="failed", error=str(exc))
        return row

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            table = list(pool.map(evaluate, points))
    else:
        table = [evaluate(p) for p in points]
    ok = [r for r in table if r["status"] == "ok"]
    if not ok:
        raise GridSearchError("criterion failed on every grid point", table)
    top = max(r["score"] for r in ok)
    best = min((r for r in ok if r["score"] == top), key=lambda r: (r["alpha1"], r["alpha2"], r["alpha3"]))
    return GridResult(replace(base.loss, alpha1=best["alpha1"], alpha2=best["alpha2"], alpha3=best["alpha3"]),
                      top, table)


def save_report(obj, path: Union[str, Path]):
    Path(path).write_text(json.dumps(obj, indent=2, default=float))
