"""
Frequency-accuracy analysis: logistic F1 curves, confidence bands,
correlations and low-support phoneme matching.
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from scipy.special import expit
from scipy.stats import rankdata

from app.models.schemas import FreqF1Point, LowSupportReport, MatchedPair, PhonemeReportRow, SigmoidFit, WorstPhoneme
from app.utils.errors import DegenerateJacobian, InsufficientPoints, SingularCovariance, ValidationError
from app.utils.logger import log_data_warning

logger = logging.getLogger(__name__)

MIN_POINTS = 4
L_BOUNDS = (1e-6, 1.5)
LAMBDA_START = 1e-3
LAMBDA_MAX = 1e10
MAX_ITERATIONS = 200
REL_TOL = 1e-10
TINY_OBJECTIVE = 1e-30
Z_95 = 1.96
LOW_SUPPORT = 10**1.6
HIGH_SUPPORT = 10**1.9
GOOD_F1 = 0.8
CURVE_POINTS = 200
CURVE_MARGIN = 0.2


def sigmoid(x: np.ndarray, params: Sequence[float]) -> np.ndarray:
    L, k, x0 = params
    return L * expit(k * (np.asarray(x, dtype=float) - x0))


def sigmoid_jacobian(x: np.ndarray, params: Sequence[float]) -> np.ndarray:
    """Columns are df/dL, df/dk and df/dx0."""
    L, k, x0 = params
    x = np.asarray(x, dtype=float)
    s = expit(k * (x - x0))
    slope = L * s * (1.0 - s)
    return np.column_stack([s, (x - x0) * slope, -k * slope])


def _project(params: np.ndarray) -> np.ndarray:
    L, k, x0 = params
    return np.array([min(max(L, L_BOUNDS[0]), L_BOUNDS[1]), max(k, 0.0), x0])


def _objective(x, y, w, params) -> float:
    r = y - sigmoid(x, params)
    return float(np.sum(w * r * r))


def levenberg_marquardt(x, y, w, start, trace: Optional[List[float]] = None) -> Tuple[np.ndarray, float, bool, int]:
    """Damped Gauss-Newton with Marquardt diagonal scaling and bound projection.

    When ``trace`` is given, the objective of the start and of every accepted step is appended to it.
    """
    params = _project(np.asarray(start, dtype=float))
    sse = _objective(x, y, w, params)
    if trace is not None:
        trace.append(sse)
    lam = LAMBDA_START
    converged = False
    iterations = 0

    while iterations < MAX_ITERATIONS:
        iterations += 1
        if sse < TINY_OBJECTIVE:
            converged = True
            break

        jac = sigmoid_jacobian(x, params)
        r = y - sigmoid(x, params)
        jtj = jac.T @ (w[:, None] * jac)
        grad = jac.T @ (w * r)
        scale = np.maximum(np.diag(jtj), 1e-12 * max(1.0, float(np.max(np.diag(jtj)))))

        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(scale), grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = _project(params + step)
            candidate_sse = _objective(x, y, w, candidate)
            if candidate_sse < sse:
                accepted = True
                break
            lam *= 10.0

        if not accepted:
            # no descent direction left at any damping
            converged = True
            break

        relative = (sse - candidate_sse) / max(sse, TINY_OBJECTIVE)
        params, sse = candidate, candidate_sse
        if trace is not None:
            trace.append(sse)
        lam = max(lam / 10.0, 1e-15)
        if relative < REL_TOL:
            converged = True
            break

    return params, sse, converged, iterations


def _default_starts(x: np.ndarray, y: np.ndarray) -> List[np.ndarray]:
    """The documented start plus a half-maximum crossing start."""
    L0 = max(float(y.max()), L_BOUNDS[0])
    starts = [np.array([L0, 1.0, float(np.median(x))])]
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    above = np.nonzero(ys >= L0 / 2.0)[0]
    if above.size:
        x_half = float(xs[above[0]])
        starts.append(np.array([L0, 1.0, x_half]))
        starts.append(np.array([L0, 4.0, x_half]))
    return starts


def split_fit_points(points: Iterable[FreqF1Point]) -> Tuple[List[FreqF1Point], List[FreqF1Point]]:
    """Split points into fit-eligible ones and those excluded for zero train or test frequency."""
    used, excluded = [], []
    for p in points:
        (used if p.train_freq >= 1 and p.test_freq >= 1 else excluded).append(p)
    return used, excluded


def fit_sigmoid(
    points: Sequence[FreqF1Point],
    init: Optional[Tuple[float, float, float]] = None,
    weight_by_test_freq: bool = False,
) -> SigmoidFit:
    """Least-squares logistic fit of F1 against log10 training frequency."""
    usable = [p for p in points if p.x is not None]
    x = np.array([p.x for p in usable], dtype=float)
    y = np.array([p.f1 for p in usable], dtype=float)
    w = np.array([p.test_freq + 1.0 for p in usable]) if weight_by_test_freq else np.ones(len(usable))

    if len(usable) >= MIN_POINTS and np.ptp(x) == 0.0:
        raise DegenerateJacobian("all x values are equal")
    distinct = len(np.unique(x))
    if distinct < MIN_POINTS:
        raise InsufficientPoints(distinct, MIN_POINTS)

    starts = [np.asarray(init, dtype=float)] if init is not None else _default_starts(x, y)
    best = None
    for start in starts:
        result = levenberg_marquardt(x, y, w, start)
        if best is None or result[1] < best[1]:
            best = result
    params, sse, converged, iterations = best

    if not converged:
        log_data_warning("fit", "sigmoid fit hit the iteration limit", {"iterations": iterations})

    n = len(usable)
    jac = sigmoid_jacobian(x, params)
    jtj = jac.T @ (w[:, None] * jac)
    covariance = None
    try:
        if np.linalg.cond(jtj) < 1e15:
            covariance = ((sse / (n - 3)) * np.linalg.inv(jtj)).tolist()
    except np.linalg.LinAlgError:
        covariance = None

    fit = SigmoidFit(
        L=float(params[0]),
        k=float(params[1]),
        x0=float(params[2]),
        covariance=covariance,
        n_points=n,
        converged=converged,
        iterations=iterations,
        sse=sse,
    )
    fit.r2 = r_squared(fit, usable)
    logger.info(f"Sigmoid fit L={fit.L:.4f} k={fit.k:.4f} x0={fit.x0:.4f} R2={fit.r2:.4f} n={n}")
    return fit


def r_squared(fit: SigmoidFit, points: Sequence[FreqF1Point]) -> float:
    """Coefficient of determination; NaN when observed F1 has zero variance."""
    usable = [p for p in points if p.x is not None]
    y = np.array([p.f1 for p in usable], dtype=float)
    pred = sigmoid(np.array([p.x for p in usable], dtype=float), fit.params)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        log_data_warning("fit", "R2 undefined: observed F1 has zero variance")
        return float("nan")
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def confidence_band(fit: SigmoidFit, xs: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Delta-method 95% band f(x) +/- 1.96 sqrt(g' C g)."""
    if fit.covariance is None:
        raise SingularCovariance()
    xs = np.asarray(xs, dtype=float)
    grads = sigmoid_jacobian(xs, fit.params)
    cov = np.asarray(fit.covariance)
    var = np.einsum("ij,jk,ik->i", grads, cov, grads)
    half = Z_95 * np.sqrt(np.clip(var, 0.0, None))
    f = sigmoid(xs, fit.params)
    return f - half, f + half


def point_size(point: FreqF1Point) -> float:
    return float(np.log10(point.test_freq + 1.0))


def curve_table(fit: SigmoidFit, points: Sequence[FreqF1Point], n: int = CURVE_POINTS) -> pd.DataFrame:
    """Fitted curve and band sampled on a grid spanning the data with a margin."""
    xs_data = [p.x for p in points if p.x is not None]
    grid = np.linspace(min(xs_data) - CURVE_MARGIN, max(xs_data) + CURVE_MARGIN, n)
    if fit.covariance is None:
        lo = hi = np.full(n, np.nan)
    else:
        lo, hi = confidence_band(fit, grid)
    return pd.DataFrame({"x": grid, "f": sigmoid(grid, fit.params), "ci_lo": lo, "ci_hi": hi})


def fit_report(fit: SigmoidFit) -> pd.DataFrame:
    se_L, se_k, se_x0 = fit.standard_errors
    return pd.DataFrame(
        [
            {
                "L": fit.L,
                "k": fit.k,
                "x0": fit.x0,
                "se_L": se_L,
                "se_k": se_k,
                "se_x0": se_x0,
                "r2": fit.r2,
                "n_points": fit.n_points,
                "converged": fit.converged,
                "iterations": fit.iterations,
            }
        ]
    )


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Product-moment correlation; NaN when either side has zero variance."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValidationError("xs", len(x), "need two equal-length samples of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if denom == 0.0:
        log_data_warning("correlation", "zero variance, correlation undefined")
        return float("nan")
    return float(np.clip(np.sum(dx * dy) / denom, -1.0, 1.0))


def spearman_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties."""
    return pearson_r(rankdata(xs), rankdata(ys))


def match_low_support(
    points: Sequence[FreqF1Point],
    low_cutoff: float = LOW_SUPPORT,
    high_cutoff: float = HIGH_SUPPORT,
    good_f1: float = GOOD_F1,
) -> LowSupportReport:
    """Pair low-support phonemes with the most frequent high-support phoneme sharing their base."""
    lows = sorted((p for p in points if p.train_freq < low_cutoff), key=lambda p: p.surface)
    highs: Dict[str, FreqF1Point] = {}
    for p in points:
        if p.train_freq > high_cutoff:
            current = highs.get(p.base)
            if current is None or (p.train_freq, _neg(p.surface)) > (current.train_freq, _neg(current.surface)):
                highs[p.base] = p

    pairs, unmatched = [], []
    for low in lows:
        high = highs.get(low.base)
        if high is None:
            unmatched.append(low.surface)
            continue
        pairs.append(
            MatchedPair(
                low=low.surface,
                high=high.surface,
                base=low.base,
                low_f1=low.f1,
                high_f1=high.f1,
                low_train_freq=low.train_freq,
                high_train_freq=high.train_freq,
            )
        )

    rho = float("nan")
    if len(pairs) >= 2:
        rho = spearman_r([p.low_f1 for p in pairs], [p.high_f1 for p in pairs])
    return LowSupportReport(
        pairs=pairs,
        unmatched=unmatched,
        spearman=rho,
        n_low=len(lows),
        n_low_good=sum(1 for p in lows if p.f1 > good_f1),
    )


def _neg(surface: str) -> Tuple[int, ...]:
    # lexicographically smaller surfaces win ties on train_freq
    return tuple(-ord(c) for c in surface) + (0,)


def worst_phonemes(scores: Iterable[Union[PhonemeReportRow, WorstPhoneme]], k: int = 10) -> List[WorstPhoneme]:
    """Ascending F1, then descending test frequency, then surface."""
    ranked = sorted(scores, key=lambda s: (s.f1, -s.test_freq, s.surface))
    return [WorstPhoneme(surface=s.surface, f1=s.f1, test_freq=s.test_freq) for s in ranked[:k]]


def format_triplets(worst: Sequence[WorstPhoneme]) -> str:
    return ", ".join(f"({w.surface}, {w.f1:.2f}, {w.test_freq})" for w in worst)


def render_svg(
    points: Sequence[FreqF1Point], fit: Optional[SigmoidFit], path: Union[str, Path], title: Optional[str] = None
) -> None:
    """Scatter of F1 against log10 train frequency with the fitted curve and band.

    Marker radius is proportional to log10(test_freq + 1).
    """
    usable = [p for p in points if p.x is not None]
    x = np.array([p.x for p in usable], dtype=float)
    y = np.array([p.f1 for p in usable], dtype=float)
    radius = np.array([point_size(p) for p in usable], dtype=float)
    sizes = (6.0 * radius) ** 2

    with matplotlib.rc_context({"svg.hashsalt": "ipa-asr", "svg.fonttype": "none"}):
        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot(1, 1, 1)
        if fit is not None and len(x):
            grid = np.linspace(x.min() - CURVE_MARGIN, x.max() + CURVE_MARGIN, CURVE_POINTS)
            ax.plot(grid, sigmoid(grid, fit.params), color="tab:red", gid="fitted-curve")
            if fit.covariance is not None:
                lo, hi = confidence_band(fit, grid)
                ax.fill_between(grid, lo, hi, color="tab:red", alpha=0.2, gid="confidence-band")
        ax.scatter(x, y, s=sizes, alpha=0.7, gid="phoneme-points")
        ax.set_xlabel("log10 training frequency")
        ax.set_ylabel("F1")
        if title:
            ax.set_title(title)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
