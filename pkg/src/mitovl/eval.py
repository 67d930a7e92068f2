"""Metrics, paired significance tests and Table-style reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc

from mitovl import kernels
from mitovl.ingest import Label

PREDICTION_COLUMNS = (
    "tile",
    "slide_id",
    "true_label",
    "pred_label",
    "score",
    "parse_ok",
    "exact_match",
    "generated",
)


class EvalError(ValueError):
    pass


@dataclass
class PredictionSet:
    """One record per test tile. ``exact_match`` is None unless captions were scored."""

    true_labels: np.ndarray  # bool, True = MITOTIC
    pred_labels: np.ndarray  # bool
    scores: np.ndarray  # float in [0, 1]
    parse_ok: np.ndarray  # bool
    seed: int = 0
    family: str = ""
    tile_ids: list[str] = field(default_factory=list)
    slide_ids: list[str] = field(default_factory=list)
    exact_match: np.ndarray | None = None
    generated: list[str] | None = None

    def __post_init__(self):
        self.true_labels = np.asarray(self.true_labels, dtype=bool)
        self.pred_labels = np.asarray(self.pred_labels, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.parse_ok = np.asarray(self.parse_ok, dtype=bool)
        n = len(self.true_labels)
        if not (len(self.pred_labels) == len(self.scores) == len(self.parse_ok) == n):
            raise EvalError("prediction arrays differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise EvalError("scores must be finite")
        if self.exact_match is not None:
            self.exact_match = np.asarray(self.exact_match, dtype=bool)

    def __len__(self):
        return len(self.true_labels)

    @classmethod
    def from_labels(cls, true, pred, scores, parse_ok=None, **kw) -> "PredictionSet":
        conv = lambda xs: [x is Label.MITOTIC or x == Label.MITOTIC.value or x is True for x in xs]  # noqa: E731
        true, pred = conv(true), conv(pred)
        if parse_ok is None:
            parse_ok = [True] * len(true)
        return cls(true, pred, scores, parse_ok, **kw)


def confusion(preds: PredictionSet) -> dict[str, int]:
    t, p = preds.true_labels, preds.pred_labels
    return {
        "tp": int(np.sum(t & p)),
        "fp": int(np.sum(~t & p)),
        "fn": int(np.sum(t & ~p)),
        "tn": int(np.sum(~t & ~p)),
    }


def f1_score(preds: PredictionSet) -> float:
    """Binary F1 with MITOTIC positive; 0 when there are no predicted or no true positives."""
    if len(preds) == 0:
        raise EvalError("F1 needs at least one tile")
    c = confusion(preds)
    if c["tp"] + c["fp"] == 0 or c["tp"] + c["fn"] == 0:
        return 0.0
    return 2 * c["tp"] / (2 * c["tp"] + c["fp"] + c["fn"])


def auc(preds: PredictionSet) -> float:
    """ROC AUC as the Mann-Whitney probability, ties counted one half."""
    pos = preds.true_labels
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC is undefined for a single-class test set")
    u = kernels.mann_whitney_u(np.ascontiguousarray(preds.scores), np.ascontiguousarray(pos))
    return float(u) / (n_pos * n_neg)


def exact_match_accuracy(preds: PredictionSet) -> float | None:
    if preds.exact_match is None or len(preds) == 0:
        return None
    return float(np.mean(preds.exact_match))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: str | None = None


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided p for Student's t via the regularised incomplete beta function."""
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def paired_t_test(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise EvalError("paired t-test needs two equal-length sequences of >= 2 values")
    d = a - b
    n = len(d)
    df = n - 1
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, "all differences are zero")
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, "zero-variance differences")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, df), df)


# ---------------------------------------------------------------------------
# aggregation and reports


@dataclass
class MetricsReport:
    """Per-seed metrics for one model family."""

    family: str
    pretraining: str
    finetuning: str
    seeds: list[int]
    f1: list[float]
    auc: list[float]
    exact_match: list[float] | None = None
    parse_failures: list[int] | None = None

    @property
    def n_seeds(self) -> int:
        return len(self.seeds)

    def summary(self) -> dict:
        out = {
            "n_seeds": self.n_seeds,
            "f1_mean": _mean(self.f1),
            "f1_sd": _sd(self.f1),
            "auc_mean": _mean(self.auc),
            "auc_sd": _sd(self.auc),
        }
        if self.exact_match is not None:
            out["exact_match_mean"] = _mean(self.exact_match)
            out["exact_match_sd"] = _sd(self.exact_match)
        return out

    def to_dict(self) -> dict:
        d = {
            "family": self.family,
            "pretraining": self.pretraining,
            "finetuning": self.finetuning,
            "seeds": list(self.seeds),
            "f1": list(self.f1),
            "auc": list(self.auc),
        }
        if self.exact_match is not None:
            d["exact_match"] = list(self.exact_match)
        if self.parse_failures is not None:
            d["parse_failures"] = list(self.parse_failures)
        return d


def _mean(xs) -> float:
    return float(np.mean(np.asarray(xs, dtype=np.float64)))


def _sd(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def metrics_for(family: str, pretraining: str, finetuning: str, predictions) -> MetricsReport:
    predictions = sorted(predictions, key=lambda p: p.seed)
    ems = [exact_match_accuracy(p) for p in predictions]
    return MetricsReport(
        family=family,
        pretraining=pretraining,
        finetuning=finetuning,
        seeds=[p.seed for p in predictions],
        f1=[f1_score(p) for p in predictions],
        auc=[auc(p) for p in predictions],
        exact_match=None if any(e is None for e in ems) else ems,
        parse_failures=[int(np.sum(~p.parse_ok)) for p in predictions],
    )


def _fmt_cell(mean: float, sd: float) -> str:
    return f"{mean:.3f} ({float(f'{sd:.3g}'):g})"


@dataclass
class Report:
    rows: list[dict]
    per_seed: list[dict]
    pairwise: list[dict]

    def table_csv(self) -> str:
        return _to_csv(self.rows)

    def per_seed_csv(self) -> str:
        return _to_csv(self.per_seed)

    def pairwise_csv(self) -> str:
        return _to_csv(self.pairwise)

    def table_text(self) -> str:
        header = ["Pre-training", "Finetuning", "F1 score (SD)", "AUC (SD)"]
        body = [[r["pretraining"], r["finetuning"], r["f1_cell"], r["auc_cell"]] for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"  # noqa: E731
        out = [line(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
        out += [line(b) for b in body]
        out.append("")
        out.append("*: paired t-test p < 0.05 against every other family in the table (best mean only).")
        em = [r for r in self.rows if r.get("exact_match_mean") is not None]
        for r in em:
            out.append(
                f"{r['family']}: whole-caption exact match {r['exact_match_mean']:.3f} ± {r['exact_match_sd']:.3g}"
            )
        return "\n".join(out) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {
            "table.csv": self.table_csv(),
            "table.md": self.table_text(),
            "per_seed.csv": self.per_seed_csv(),
            "pairwise.csv": self.pairwise_csv(),
        }
        paths = {}
        for name, text in files.items():
            (out_dir / name).write_text(text, encoding="utf-8")
            paths[name] = out_dir / name
        return paths


def _to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (_num(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(round(x, 12))


def _significant_best(reports: list[MetricsReport], metric: str, alpha: float, tests) -> set[str]:
    if len(reports) < 2 or not tests:
        return set()
    means = {r.family: _mean(getattr(r, metric)) for r in reports}
    best = max(means.values())
    leaders = [f for f, m in means.items() if m == best]
    if len(leaders) != 1:
        return set()
    lead = leaders[0]
    for r in reports:
        if r.family == lead:
            continue
        res = tests[(lead, r.family, metric)]
        if not res.p < alpha:
            return set()
    return {lead}


def build_report(runs: list[MetricsReport], alpha: float = 0.05) -> Report:
    """Rows ``(pretraining, finetuning, F1 (SD), AUC (SD))`` plus per-seed and pairwise tables."""
    if not runs:
        raise EvalError("no runs to report")
    seed_sets = {tuple(r.seeds) for r in runs}
    if len(seed_sets) != 1:
        raise EvalError(f"families were evaluated on different seed sets: {sorted(seed_sets)}")

    tests = {}
    pairwise = []
    # a single seed gives no paired test; the table is still written, without stars
    paired = len(runs[0].seeds) >= 2
    for i, a in enumerate(runs if paired else []):
        for b in runs[i + 1 :]:
            for metric in ("f1", "auc"):
                res = paired_t_test(getattr(a, metric), getattr(b, metric))
                tests[(a.family, b.family, metric)] = res
                tests[(b.family, a.family, metric)] = TTestResult(-res.t, res.p, res.df, res.degenerate)
                pairwise.append(
                    {
                        "family_a": a.family,
                        "family_b": b.family,
                        "metric": metric,
                        "t": res.t,
                        "p": res.p,
                        "df": res.df,
                        "significant": res.p < alpha,
                        "degenerate": res.degenerate or "",
                    }
                )
    star_f1 = _significant_best(runs, "f1", alpha, tests)
    star_auc = _significant_best(runs, "auc", alpha, tests)

    rows, per_seed = [], []
    for r in runs:
        s = r.summary()
        rows.append(
            {
                "family": r.family,
                "pretraining": r.pretraining,
                "finetuning": r.finetuning,
                "n_seeds": s["n_seeds"],
                "f1_mean": s["f1_mean"],
                "f1_sd": s["f1_sd"],
                "auc_mean": s["auc_mean"],
                "auc_sd": s["auc_sd"],
                "exact_match_mean": s.get("exact_match_mean"),
                "exact_match_sd": s.get("exact_match_sd"),
                "f1_cell": _fmt_cell(s["f1_mean"], s["f1_sd"]) + ("*" if r.family in star_f1 else ""),
                "auc_cell": _fmt_cell(s["auc_mean"], s["auc_sd"]) + ("*" if r.family in star_auc else ""),
            }
        )
        for k, seed in enumerate(r.seeds):
            per_seed.append(
                {
                    "family": r.family,
                    "seed": seed,
                    "f1": r.f1[k],
                    "auc": r.auc[k],
                    "exact_match": None if r.exact_match is None else r.exact_match[k],
                    "parse_failures": None if r.parse_failures is None else r.parse_failures[k],
                }
            )
    return Report(rows, per_seed, pairwise)


# ---------------------------------------------------------------------------
# prediction files


def write_predictions(preds: PredictionSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lab = lambda b: Label.MITOTIC.value if b else Label.HARD_NEGATIVE.value  # noqa: E731
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for i in range(len(preds)):
            w.writerow(
                [
                    preds.tile_ids[i] if preds.tile_ids else i,
                    preds.slide_ids[i] if preds.slide_ids else "",
                    lab(preds.true_labels[i]),
                    lab(preds.pred_labels[i]),
                    repr(float(preds.scores[i])),
                    int(preds.parse_ok[i]),
                    "" if preds.exact_match is None else int(preds.exact_match[i]),
                    "" if preds.generated is None else preds.generated[i],
                ]
            )


def read_predictions(path, seed: int = 0, family: str = "") -> PredictionSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    em = [r["exact_match"] for r in rows]
    gen = [r["generated"] for r in rows]
    return PredictionSet(
        true_labels=[r["true_label"] == Label.MITOTIC.value for r in rows],
        pred_labels=[r["pred_label"] == Label.MITOTIC.value for r in rows],
        scores=[float(r["score"]) for r in rows],
        parse_ok=[r["parse_ok"] == "1" for r in rows],
        seed=seed,
        family=family,
        tile_ids=[r["tile"] for r in rows],
        slide_ids=[r["slide_id"] for r in rows],
        exact_match=None if any(e == "" for e in em) or not rows else [e == "1" for e in em],
        generated=None if all(g == "" for g in gen) else gen,
    )


def write_metrics(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
