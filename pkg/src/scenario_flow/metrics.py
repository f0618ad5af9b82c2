"""Evaluation metrics comparing a generated scenario set with a real one.

Distribution level: KL divergence of value histograms, biased MMD² with
an RBF kernel, and the Fréchet distance between Gaussian fits of the two
sets (identity feature map: each series is its own feature vector).
Shape level: dynamic time warping between paired series and the
distance between log-average power spectra (PSDD). ``marr`` is the mean
absolute ramp rate of a single series, used here and by the dataset
tooling as the volatility measure.

Sets are ``[n, L]`` arrays. ``evaluate`` assembles everything into a
``MetricReport``, which exports to a one-row CSV at round-trip precision
and to a JSON report that also records the ``MetricConfig`` used.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist, pdist
from typing_extensions import Self

from .common import (
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    format_float,
    logger,
    parse_float,
    read_jsonl,
)

__all__ = [
    "MetricConfig",
    "MetricReport",
    "marr",
    "kl_from_histograms",
    "kl_divergence",
    "mmd2",
    "frechet_from_moments",
    "frechet_distance",
    "dtw",
    "dtw_mean",
    "psdd",
    "evaluate",
    "write_metric_csv",
    "read_metric_csv",
    "write_metric_json",
    "print_metric_report",
    "load_series_set",
    "run_eval",
]


DOMAIN_TOLERANCE = 1e-9
METRIC_COLUMNS = ["kl", "mmd2", "fd", "dtw_mean", "psdd", "marr_mean", "marr_gap"]


@dataclass(frozen=True)
class MetricConfig:
    kl_bins: int = 50
    kl_epsilon: float = 1e-10
    # "median_heuristic" or a fixed gamma.
    mmd_bandwidth: str | float = "median_heuristic"
    psdd_epsilon: float = 1e-12
    dtw_pairing: str = "index_paired"  # index_paired | nearest
    fd_feature: str = "identity"

    def __post_init__(self):
        if self.kl_bins < 2:
            raise ConfigError(f"kl_bins must be >= 2, got {self.kl_bins}")
        if self.kl_epsilon <= 0 or self.psdd_epsilon <= 0:
            raise ConfigError("kl_epsilon and psdd_epsilon must be positive")
        if isinstance(self.mmd_bandwidth, str):
            if self.mmd_bandwidth != "median_heuristic":
                raise ConfigError(f"unknown mmd_bandwidth {self.mmd_bandwidth!r}")
        elif not self.mmd_bandwidth > 0:
            raise ConfigError("a fixed mmd_bandwidth (gamma) must be positive")
        if self.dtw_pairing not in ("index_paired", "nearest"):
            raise ConfigError(f"unknown dtw_pairing {self.dtw_pairing!r}")
        if self.fd_feature != "identity":
            raise ConfigError(f"unknown fd_feature {self.fd_feature!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid metric config: {e}") from e


@dataclass
class MetricReport:
    kl: float
    mmd2: float
    fd: float | None  # None when either set has fewer than 2 series
    dtw_mean: float
    psdd: float
    marr_mean: float  # mean ramp rate of the generated set
    marr_gap: float  # |mean ramp rate generated - mean ramp rate real|
    config: MetricConfig = field(default_factory=MetricConfig)

    def values(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


def _as_set(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name} must be a non-empty [n, L] array, got shape {arr.shape}")
    return arr


# --- Single-series ---------------------------------------------------------------


def marr(x) -> float:
    """Mean absolute first difference."""
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape[0] < 2:
        raise ValueError(f"ramp rate needs at least 2 points, got {arr.shape[0]}")
    return float(np.mean(np.abs(np.diff(arr))))


def dtw(x, y) -> float:
    """Classic DTW with ``|a - b|`` cost, anchored at both ends."""
    a = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ShapeError("dtw needs two non-empty sequences")
    local_cost = cdist(a, b, "cityblock")
    n, m = local_cost.shape
    # Padded by one row and column of inf; cost[i + 1, j + 1] covers a[:i+1], b[:j+1].
    cost = np.full((n + 1, m + 1), np.inf)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = local_cost[i - 1, j - 1] + min(
                cost[i - 1, j], cost[i, j - 1], cost[i - 1, j - 1]
            )
    return float(cost[n, m])


# --- Set-level -------------------------------------------------------------------


def kl_from_histograms(p, q, epsilon: float = 1e-10) -> float:
    """KL(P || Q) after adding ``epsilon`` to every bin and renormalising."""
    p = np.asarray(p, dtype=np.float64) + epsilon
    q = np.asarray(q, dtype=np.float64) + epsilon
    if p.shape != q.shape:
        raise ShapeError(f"histograms differ in length ({p.shape} vs {q.shape})")
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def _unit_interval_values(values: np.ndarray, name: str) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if lo < -DOMAIN_TOLERANCE or hi > 1.0 + DOMAIN_TOLERANCE:
        raise DomainError(f"{name} has values outside [0, 1] (min {lo:.6g}, max {hi:.6g})")
    return np.clip(values, 0.0, 1.0)


def kl_divergence(real_set, gen_set, cfg: MetricConfig | None = None) -> float:
    cfg = cfg or MetricConfig()
    real = _unit_interval_values(_as_set(real_set, "real set").reshape(-1), "real set")
    gen = _unit_interval_values(_as_set(gen_set, "generated set").reshape(-1), "generated set")
    p, _ = np.histogram(real, bins=cfg.kl_bins, range=(0.0, 1.0))
    q, _ = np.histogram(gen, bins=cfg.kl_bins, range=(0.0, 1.0))
    return kl_from_histograms(p, q, cfg.kl_epsilon)


def _rbf_gamma(x: np.ndarray, y: np.ndarray, cfg: MetricConfig) -> float:
    if not isinstance(cfg.mmd_bandwidth, str):
        return float(cfg.mmd_bandwidth)
    pooled = np.vstack([x, y])
    if pooled.shape[0] < 2:
        return 1.0
    median = float(np.median(pdist(pooled)))
    if median <= 0.0:
        return 1.0
    return 1.0 / (2.0 * median * median)


def mmd2(real_set, gen_set, cfg: MetricConfig | None = None) -> float:
    """Biased (V-statistic) MMD² with an RBF kernel, diagonal terms included."""
    cfg = cfg or MetricConfig()
    x = _as_set(real_set, "real set")
    y = _as_set(gen_set, "generated set")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"series lengths differ ({x.shape[1]} vs {y.shape[1]})")
    gamma = _rbf_gamma(x, y, cfg)
    k_xx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    k_yy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    k_xy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    return float(k_xx.mean() + k_yy.mean() - 2.0 * k_xy.mean())


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    w, v = scipy.linalg.eigh(matrix)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_r, cov_r, mu_g, cov_g) -> float:
    """``|mu_r - mu_g|² + Tr(S_r + S_g - 2 (S_r S_g)^½)`` via symmetric eigensolves."""
    mu_r, mu_g = np.atleast_1d(np.asarray(mu_r, float)), np.atleast_1d(np.asarray(mu_g, float))
    cov_r, cov_g = np.atleast_2d(np.asarray(cov_r, float)), np.atleast_2d(np.asarray(cov_g, float))
    if mu_r.shape != mu_g.shape or cov_r.shape != cov_g.shape:
        raise ShapeError("moment shapes differ between the two sets")
    try:
        root_r = _psd_sqrt(cov_r)
        middle = root_r @ cov_g @ root_r
        eigenvalues = scipy.linalg.eigvalsh((middle + middle.T) / 2.0)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericError(f"covariance eigensolve failed: {e}") from e
    trace_sqrt = float(np.sum(np.sqrt(np.clip(eigenvalues, 0.0, None))))
    diff = mu_r - mu_g
    fd = float(diff @ diff) + float(np.trace(cov_r) + np.trace(cov_g)) - 2.0 * trace_sqrt
    return max(fd, 0.0)


def frechet_distance(real_set, gen_set) -> float:
    x = _as_set(real_set, "real set")
    y = _as_set(gen_set, "generated set")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("Fréchet distance needs at least 2 series in each set")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"series lengths differ ({x.shape[1]} vs {y.shape[1]})")
    return frechet_from_moments(
        x.mean(axis=0), np.cov(x, rowvar=False), y.mean(axis=0), np.cov(y, rowvar=False)
    )


def dtw_mean(real_set, gen_set, pairing: str = "index_paired") -> float:
    """Average DTW over pairs of series.

    ``index_paired`` sorts both sets by energy and pairs by rank (sets of
    different sizes are matched by rank quantile); ``nearest`` takes, for
    each generated series, the smallest DTW to any real series.
    """
    x = _as_set(real_set, "real set")
    y = _as_set(gen_set, "generated set")
    if pairing == "nearest":
        return float(np.mean([min(dtw(g, r) for r in x) for g in y]))
    if pairing != "index_paired":
        raise ConfigError(f"unknown dtw pairing {pairing!r}")
    x = x[np.argsort(np.sum(x * x, axis=1), kind="stable")]
    y = y[np.argsort(np.sum(y * y, axis=1), kind="stable")]
    n_real, n_gen = x.shape[0], y.shape[0]
    distances = []
    for i in range(n_gen):
        j = 0 if n_gen == 1 else round(i * (n_real - 1) / (n_gen - 1))
        distances.append(dtw(x[j], y[i]))
    return float(np.mean(distances))


def psdd(real_set, gen_set, cfg: MetricConfig | None = None) -> float:
    """Squared distance between the log-average one-sided power spectra."""
    cfg = cfg or MetricConfig()
    x = _as_set(real_set, "real set")
    y = _as_set(gen_set, "generated set")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"series lengths differ ({x.shape[1]} vs {y.shape[1]})")
    power_x = np.mean(np.abs(np.fft.rfft(x, axis=1)) ** 2, axis=0)
    power_y = np.mean(np.abs(np.fft.rfft(y, axis=1)) ** 2, axis=0)
    diff = np.log(power_x + cfg.psdd_epsilon) - np.log(power_y + cfg.psdd_epsilon)
    return float(diff @ diff)


def evaluate(real_set, gen_set, cfg: MetricConfig | None = None) -> MetricReport:
    cfg = cfg or MetricConfig()
    x = _as_set(real_set, "real set")
    y = _as_set(gen_set, "generated set")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"series lengths differ ({x.shape[1]} vs {y.shape[1]})")

    fd = None
    if x.shape[0] >= 2 and y.shape[0] >= 2:
        fd = frechet_distance(x, y)
    else:
        logger.warning("Fréchet distance not applicable: a set has fewer than 2 series")

    marr_real = float(np.mean([marr(s) for s in x]))
    marr_gen = float(np.mean([marr(s) for s in y]))
    return MetricReport(
        kl=kl_divergence(x, y, cfg),
        mmd2=mmd2(x, y, cfg),
        fd=fd,
        dtw_mean=dtw_mean(x, y, cfg.dtw_pairing),
        psdd=psdd(x, y, cfg),
        marr_mean=marr_gen,
        marr_gap=abs(marr_gen - marr_real),
        config=cfg,
    )


# --- Export ----------------------------------------------------------------------


def write_metric_csv(report: MetricReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        writer.writerow([format_float(v) for v in report.values().values()])


def read_metric_csv(path: Path, config: MetricConfig | None = None) -> MetricReport:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if len(rows) != 2 or rows[0] != METRIC_COLUMNS:
        raise FormatError(f"{path}: expected a header and one row of {METRIC_COLUMNS}")
    values = {name: parse_float(cell) for name, cell in zip(rows[0], rows[1], strict=True)}
    missing = [k for k, v in values.items() if v is None and k != "fd"]
    if missing:
        raise FormatError(f"{path}: missing values for {missing}")
    return MetricReport(**values, config=config or MetricConfig())


def write_metric_json(report: MetricReport, path: Path) -> None:
    payload = {"version": 1, "metrics": report.values(), "config": report.config.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def print_metric_report(report: MetricReport, real_count: int, gen_count: int) -> None:
    """Print a human-readable metric summary to stdout."""
    print(f"\n{'='*60}")
    print("SCENARIO EVALUATION")
    print(f"{'='*60}")
    print(f"Real series:       {real_count:>10,}")
    print(f"Generated series:  {gen_count:>10,}")
    print(f"{'-'*60}")
    for name, value in report.values().items():
        shown = "n/a" if value is None else f"{value:.6g}"
        print(f"{name + ':':<19}{shown:>10}")
    print(f"{'='*60}\n")


# --- Command -----------------------------------------------------------------------


def load_series_set(path: Path) -> np.ndarray:
    """Stack the ``series`` field of every record in a JSONL dataset into ``[n, L]``."""
    rows = []
    for line_no, record in read_jsonl(Path(path)):
        series = record.get("series")
        if not isinstance(series, list) or not series:
            raise FormatError(f"{path}:{line_no} (id={record.get('id')!r}): missing series")
        rows.append(series)
    if not rows:
        raise FormatError(f"{path}: no records")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: series lengths differ across records")
    try:
        values = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: series values are not numbers") from e
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: series contain non-finite values")
    return values


def run_eval(
    real_path: Path, generated_path: Path, output_dir: Path, cfg: MetricConfig | None = None
) -> int:
    """Compare a generated dataset with a real one and write metrics.csv/.json."""
    for label, path in (("Real dataset", real_path), ("Generated dataset", generated_path)):
        if not path.is_file():
            logger.error(f"{label} not found: {path}")
            return 1
    real = load_series_set(real_path)
    generated = load_series_set(generated_path)
    report = evaluate(real, generated, cfg)

    csv_path = output_dir / "metrics.csv"
    json_path = output_dir / "metrics.json"
    write_metric_csv(report, csv_path)
    write_metric_json(report, json_path)
    print_metric_report(report, real.shape[0], generated.shape[0])
    logger.info(f"Wrote metrics to: {csv_path}")
    return 0
