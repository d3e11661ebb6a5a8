"""Listening-test statistics: MOS summaries, one-way ANOVA, Tukey HSD and violin-plot data."""

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, special, stats

from dryrecover.errors import AudioIOError, ValidationError

DIMENSIONS = ("AQ", "DL")
FIELDS = ("rater_id", "system_id", "item_id", "dimension", "score")
VIOLIN_GRID = (0.5, 5.5)
MIN_BANDWIDTH = 0.05


@dataclass(frozen=True)
class Rating:
    rater_id: str
    system_id: str
    item_id: str
    dimension: str
    score: int


@dataclass
class RatingsTable:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        clean = []
        for r in self.rows:
            if not isinstance(r, Rating):
                r = Rating(**r) if isinstance(r, dict) else Rating(*r)
            score = int(r.score)
            if score != r.score or score not in (1, 2, 3, 4, 5):
                raise ValidationError(f"score must be an integer 1-5, got {r.score!r}")
            if r.dimension not in DIMENSIONS:
                raise ValidationError(f"dimension must be one of {DIMENSIONS}, got {r.dimension!r}")
            key = (str(r.rater_id), str(r.system_id), str(r.item_id), r.dimension)
            if key in seen:
                raise ValidationError(f"duplicate rating {key}")
            seen.add(key)
            clean.append(Rating(*key, score))
        self.rows = clean

    @classmethod
    def from_csv(cls, path, delimiter=None):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise AudioIOError(f"cannot read ratings {path}: {exc}") from exc
        if delimiter is None:
            delimiter = "\t" if "\t" in text.splitlines()[0] else ","
        reader = csv.DictReader(text.splitlines(), delimiter=delimiter)
        missing = set(FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"ratings header lacks {sorted(missing)}")
        rows = []
        for line in reader:
            try:
                score = int(line["score"])
            except ValueError as exc:
                raise ValidationError(f"non-integer score {line['score']!r}") from exc
            rows.append(Rating(line["rater_id"], line["system_id"], line["item_id"], line["dimension"], score))
        return cls(rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(FIELDS)
            for r in self.rows:
                writer.writerow([r.rater_id, r.system_id, r.item_id, r.dimension, r.score])

    def groups(self, dimension):
        """``{system_id: scores}`` for one dimension, systems in sorted order."""
        out = {}
        for r in self.rows:
            if r.dimension == dimension:
                out.setdefault(r.system_id, []).append(r.score)
        if not out:
            raise ValidationError(f"no ratings for dimension {dimension!r}")
        return {k: np.asarray(out[k], dtype=np.float64) for k in sorted(out)}


def _groups(data, dimension):
    if isinstance(data, RatingsTable):
        return data.groups(dimension)
    groups = {str(k): np.asarray(v, dtype=np.float64) for k, v in dict(data).items()}
    if not groups:
        raise ValidationError("no groups given")
    return groups


def format_mos(mean, std):
    return f"{mean:.2f} ± {std:.2f}"


def mos_summary(table, dimension):
    """Per-system mean, population std and count."""
    out = {}
    for system, scores in _groups(table, dimension).items():
        if scores.size == 0:
            raise ValidationError(f"system {system} has no ratings")
        mean, std = float(scores.mean()), float(scores.std(ddof=0))
        out[system] = {"mean": mean, "std": std, "n": int(scores.size), "display": format_mos(mean, std)}
    return out


def anova_oneway(table, dimension=None):
    """Fixed-effects one-way ANOVA of scores grouped by system.

    Zero within-group variance with distinct means gives ``F = inf, p = 0``;
    when every score is identical ``F = 0, p = 1``.
    """
    groups = _groups(table, dimension)
    if len(groups) < 2 or any(g.size < 2 for g in groups.values()):
        raise ValidationError("ANOVA needs at least two systems with two ratings each")
    values = list(groups.values())
    n_total = sum(g.size for g in values)
    grand = np.concatenate(values).mean()
    ss_between = float(sum(g.size * (g.mean() - grand) ** 2 for g in values))
    ss_within = float(sum(((g - g.mean()) ** 2).sum() for g in values))
    df_between, df_within = len(values) - 1, n_total - len(values)
    if ss_within == 0:
        f_stat, p = (np.inf, 0.0) if ss_between > 0 else (0.0, 1.0)
    else:
        f_stat = (ss_between / df_between) / (ss_within / df_within)
        p = float(stats.f.sf(f_stat, df_between, df_within))
    return {
        "F": float(f_stat),
        "p": float(p),
        "df_between": df_between,
        "df_within": df_within,
        "ss_between": ss_between,
        "ss_within": ss_within,
        "ms_within": ss_within / df_within,
    }


# -- studentized range distribution ---------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(256)
_Z_LIMIT = 9.0


def _range_cdf(w, k):
    """P(range of k iid N(0,1) <= w), vectorised over ``w``."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    z = _Z_LIMIT * _GL_NODES
    phi = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    inner = special.ndtr(z)[None, :] - special.ndtr(z[None, :] - w[:, None])
    vals = k * np.sum(_GL_WEIGHTS * _Z_LIMIT * phi * np.clip(inner, 0, 1) ** (k - 1), axis=1)
    return np.clip(vals, 0.0, 1.0)


def _chi_scale_logpdf(s, df):
    # density of sqrt(chi2_df / df)
    return (
        (df / 2) * np.log(df) - special.gammaln(df / 2) - (df / 2 - 1) * np.log(2)
        + (df - 1) * np.log(s) - df * s * s / 2
    )


def studentized_range_cdf(q, k, df):
    """CDF of the studentized range statistic by numerical integration.

    ``P(Q <= q) = int_0^inf f_s(s) * P(range_k <= q s) ds`` with ``s`` the
    sqrt(chi2_df / df) scale; ``df = inf`` reduces to the normal range.
    """
    if k < 2:
        raise ValidationError("studentized range needs k >= 2")
    if q <= 0:
        return 0.0
    if not np.isfinite(q):
        return 1.0
    if not np.isfinite(df) or df > 1e5:
        return float(_range_cdf(q, k)[0])
    spread = 1.0 / np.sqrt(2.0 * df)
    lo, hi = max(1e-12, 1 - 14 * spread), 1 + 14 * spread
    if df < 30:
        lo, hi = 1e-12, 1 + 14 * max(spread, 0.4)
    integrand = lambda s: np.exp(_chi_scale_logpdf(s, df)) * _range_cdf(q * s, k)[0]  # noqa: E731
    mode = np.sqrt((df - 1) / df) if df > 1 else 0.5
    val = sum(
        integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-11, limit=200)[0]
        for a, b in ((lo, mode), (mode, hi))
    )
    return float(np.clip(val, 0.0, 1.0))


def studentized_range_sf(q, k, df):
    return max(0.0, 1.0 - studentized_range_cdf(q, k, df))


def studentized_range_ppf(p, k, df):
    """Quantile (critical value) of the studentized range distribution."""
    if not 0 < p < 1:
        raise ValidationError("p must lie in (0, 1)")
    return float(optimize.brentq(lambda q: studentized_range_cdf(q, k, df) - p, 1e-6, 200.0, xtol=1e-10))


def tukey_hsd(table, dimension=None, alpha=0.05):
    """Tukey-Kramer pairwise comparisons after a one-way ANOVA.

    ``diff`` is ``mean(b) - mean(a)`` for each sorted pair ``(a, b)``.
    """
    groups = _groups(table, dimension)
    aov = anova_oneway(groups)
    k, df, mse = len(groups), aov["df_within"], aov["ms_within"]
    crit = studentized_range_ppf(1 - alpha, k, df)
    out = []
    for a, b in itertools.combinations(groups, 2):
        ga, gb = groups[a], groups[b]
        diff = float(gb.mean() - ga.mean())
        se = np.sqrt(mse / 2.0 * (1.0 / ga.size + 1.0 / gb.size))
        if se == 0:
            q, p_adj = (np.inf, 0.0) if diff != 0 else (0.0, 1.0)
        else:
            q = abs(diff) / se
            p_adj = studentized_range_sf(q, k, df)
        half_width = crit * se
        out.append({
            "a": a,
            "b": b,
            "diff": diff,
            "q": float(q),
            "p_adj": float(min(1.0, max(0.0, p_adj))),
            "ci_low": diff - half_width,
            "ci_high": diff + half_width,
            "significant": bool(p_adj < alpha),
        })
    return out


def significance_stars(p):
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "n.s."


# -- violin data -------------------------------------------------------------------

def scott_bandwidth(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        return MIN_BANDWIDTH
    return max(MIN_BANDWIDTH, float(scores.std(ddof=1)) * scores.size ** (-1.0 / 5.0))


def reflected_kde(scores, grid, bandwidth, bounds=VIOLIN_GRID):
    """Gaussian KDE with reflection at both grid bounds (keeps all mass inside)."""
    lo, hi = bounds
    centres = np.concatenate([scores, 2 * lo - scores, 2 * hi - scores])
    z = (grid[:, None] - centres[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (scores.size * bandwidth * np.sqrt(2 * np.pi))


def violin_export(table, dimension=None, n_grid=501):
    """Per-system density curve on a fixed [0.5, 5.5] grid plus quartiles."""
    grid = np.linspace(*VIOLIN_GRID, n_grid)
    out = {}
    for system, scores in _groups(table, dimension).items():
        if scores.size == 0:
            raise ValidationError(f"system {system} has no ratings")
        bw = scott_bandwidth(scores)
        q1, med, q3 = np.percentile(scores, [25, 50, 75])
        out[system] = {
            "grid": grid.tolist(),
            "density": reflected_kde(scores, grid, bw).tolist(),
            "bandwidth": bw,
            "quartiles": [float(q1), float(med), float(q3)],
            "min": float(scores.min()),
            "max": float(scores.max()),
            "mean": float(scores.mean()),
            "n": int(scores.size),
        }
    return out


def analyze(table, dimension, alpha=0.05):
    """Everything the ``mos-analyze`` command reports, as one JSON-ready dict."""
    groups = table.groups(dimension)
    report = {"dimension": dimension, "summary": mos_summary(table, dimension)}
    if len(groups) >= 2 and all(g.size >= 2 for g in groups.values()):
        report["anova"] = anova_oneway(table, dimension)
        pairs = tukey_hsd(table, dimension, alpha)
        for p in pairs:
            p["stars"] = significance_stars(p["p_adj"])
        report["tukey_hsd"] = pairs
    report["violin"] = violin_export(table, dimension)
    return report


def dump_report(report, path):
    Path(path).write_text(json.dumps(report, indent=2, allow_nan=True) + "\n")
