"""Experiment orchestration: generate data, train, fit the model family, report.

The protocol per horizon h (6 or 12 months): fit Cox models on the train split
for (a) baseline cognitive measures, (b) single-visit measures at month h,
(c) LSTM latent trajectory features, and (d) latents plus the imaging risk
score, all with the demographic covariates; evaluate each by concordance index
on the held-out split; compare (c) vs (a) and (d) vs (a)+imaging by paired
bootstrap. Every artifact written is byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .autoencoder import (AutoencoderModel, TrainConfig, extract_features,
                          init_autoencoder, save_model, train)
from .cohort import (MEASURE_NAMES, GenConfig, NormStats, SubjectTrajectory,
                     compute_norm_stats, generate_cohort, load_cohort, normalize,
                     save_cohort, split_cohort, summarize_groups, truncate_visits)
from .exceptions import DataFormatError
from .survival import CovariateSpec, CoxPH, bootstrap_cindex_diff, concordance_index

MODEL_FAMILY = ("baseline", "single_visit", "longitudinal", "longitudinal_imaging")
# fit alongside the family as the comparison target for the imaging-augmented model
_IMAGING_BASELINE = "baseline_imaging"

_BASE_COVARIATES = (("age", True), ("sex", False),
                    ("education_years", True), ("apoe4_count", False))


@dataclass
class ExperimentConfig:
    """Settings for the full experiment; defaults mirror the published recipe."""

    visits_path: str = "visits.csv"
    outcomes_path: str = "outcomes.csv"
    out_dir: str = "out"
    n_subjects: int = 822
    hidden_dim: int = 5
    base_lr: float = 0.01
    max_iters: int = 100000
    batch_size: int = 64
    lr_drop_every: int = 20000
    lr_drop_factor: float = 0.1
    conditioning: str = "none"
    horizons: tuple = (6, 12)
    sweep_dims: tuple = (3, 5, 7, 9)
    n_boot: int = 2000
    seed: int = 1
    train_fraction: float = 383.0 / 822.0

    def __post_init__(self):
        if not set(self.horizons) <= {6, 12} or not self.horizons:
            raise ValueError("horizons must be a nonempty subset of {6, 12}")
        if any(d < 1 for d in self.sweep_dims):
            raise ValueError("sweep dims must be >= 1")


_TUPLE_KEYS = {"horizons", "sweep_dims"}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys rejected."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in _TUPLE_KEYS:
            values[key] = tuple(int(tok) for tok in value.split(",") if tok.strip())
        elif key in ("visits_path", "outcomes_path", "out_dir", "conditioning"):
            values[key] = value
        elif key in ("base_lr", "lr_drop_factor", "train_fraction"):
            values[key] = float(value)
        else:
            values[key] = int(value)
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Config file values, then explicit overrides, on top of the defaults."""
    values: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


@dataclass
class ReportRow:
    model: str
    horizon: int
    c_index: float
    n_subjects: int
    n_events: int


@dataclass
class Comparison:
    model_a: str
    model_b: str
    horizon: int
    delta_c: float
    p_value: float
    n_boot: int


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    comparisons: list[Comparison]
    config: dict
    version: str = __version__

    def to_json(self) -> str:
        payload = {"version": self.version, "config": self.config,
                   "rows": [asdict(r) for r in self.rows],
                   "comparisons": [asdict(c) for c in self.comparisons]}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def row(self, model: str, horizon: int) -> ReportRow:
        for r in self.rows:
            if r.model == model and r.horizon == horizon:
                return r
        raise KeyError(f"no report row for ({model}, {horizon})")


# --- design matrices ---------------------------------------------------------

def _design(kind: str, horizon: int, subjects: list[SubjectTrajectory],
            latents: dict[str, np.ndarray] | None):
    """Covariate matrix for one model kind.

    Returns (X, names, continuous_flags, subjects_used); subjects lacking the
    required visit are dropped (single-visit models only).
    """
    names: list[str] = []
    flags: list[bool] = []
    rows: list[list[float]] = []
    used: list[SubjectTrajectory] = []

    if kind in ("baseline", _IMAGING_BASELINE):
        names += [f"{m}_m0" for m in MEASURE_NAMES]
    elif kind == "single_visit":
        names += [f"{m}_m{horizon}" for m in MEASURE_NAMES]
    elif kind in ("longitudinal", "longitudinal_imaging"):
        k = len(next(iter(latents.values())))
        names += [f"z{j + 1}" for j in range(k)]
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    flags += [True] * len(names)

    for name, cont in _BASE_COVARIATES:
        names.append(name)
        flags.append(cont)
    if kind in (_IMAGING_BASELINE, "longitudinal_imaging"):
        names.append("imaging_risk")
        flags.append(True)

    for s in subjects:
        if kind in ("baseline", _IMAGING_BASELINE):
            lead = list(s.visit_at(0).measures)
        elif kind == "single_visit":
            visit = truncate_visits(s, horizon).visit_at(horizon)
            if visit is None:
                continue
            lead = list(visit.measures)
        else:
            lead = list(latents[s.subject_id])
        row = lead + [s.age, float(s.sex), s.education_years, float(s.apoe4_count)]
        if kind in (_IMAGING_BASELINE, "longitudinal_imaging"):
            row.append(s.imaging_risk)
        rows.append(row)
        used.append(s)
    return np.array(rows, dtype=np.float64), names, flags, used


def _outcome_arrays(subjects):
    return (np.array([s.time_months for s in subjects]),
            np.array([s.event for s in subjects], dtype=bool))


def _fit_and_score(kind: str, horizon: int, train_subjects, test_subjects,
                   latents_train, latents_test):
    """Fit one Cox model on the train split and score the test split."""
    X_tr, names, flags, used_tr = _design(kind, horizon, train_subjects, latents_train)
    X_te, _, _, used_te = _design(kind, horizon, test_subjects, latents_test)
    if X_tr.size == 0 or X_te.size == 0:
        raise ValueError(f"model {kind} at {horizon}m has no eligible subjects")
    spec = CovariateSpec.fit(X_tr, names, flags)
    t_tr, e_tr = _outcome_arrays(used_tr)
    cox = CoxPH(feature_names=names).fit(spec.transform(X_tr), t_tr, e_tr)
    t_te, e_te = _outcome_arrays(used_te)
    risks = cox.predict(spec.transform(X_te))
    c_index = concordance_index(risks, t_te, e_te)
    row = ReportRow(kind, horizon, c_index, len(used_te), int(e_te.sum()))
    return row, cox, spec, risks, used_te


# --- experiment stages -------------------------------------------------------

def run_generate(cfg: ExperimentConfig, gen: GenConfig | None = None) -> list[dict]:
    """Generate the synthetic cohort, write the two CSVs, return group summaries."""
    gen = gen or GenConfig(n_subjects=cfg.n_subjects, seed=cfg.seed)
    cohort = generate_cohort(gen)
    for path in (cfg.visits_path, cfg.outcomes_path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_cohort(cohort, cfg.visits_path, cfg.outcomes_path)
    return summarize_groups(cohort)


def format_summary(rows: list[dict]) -> str:
    lines = [f"{'group':<6} {'n':>5} {'age':>13} {'mmse':>13} {'time_months':>15}"]
    for r in rows:
        lines.append(
            f"{r['group']:<6} {r['n']:>5} "
            f"{r['age_mean']:>7.2f}+-{r['age_sd']:<5.2f} "
            f"{r['mmse_mean']:>7.2f}+-{r['mmse_sd']:<5.2f} "
            f"{r['time_mean']:>8.1f}+-{r['time_sd']:<6.1f}")
    return "\n".join(lines)


def _load_and_split(cfg: ExperimentConfig):
    cohort, diags = load_cohort(cfg.visits_path, cfg.outcomes_path)
    if diags:
        raise DataFormatError(diags)
    if not cohort:
        raise DataFormatError(f"{cfg.visits_path}: no usable subjects")
    train_raw, test_raw = split_cohort(cohort, cfg.train_fraction, cfg.seed)
    stats = compute_norm_stats(train_raw)
    return normalize(train_raw, stats), normalize(test_raw, stats), stats


def _train_autoencoder(cfg: ExperimentConfig, train_subjects, hidden_dim: int,
                       seed: int):
    """Shared autoencoder over every usable (horizon-12 truncated) train trajectory."""
    data = [truncate_visits(s, 12).measure_matrix() for s in train_subjects]
    model = init_autoencoder(len(MEASURE_NAMES), hidden_dim, seed=seed,
                             conditioning=cfg.conditioning)
    tc = TrainConfig(base_lr=cfg.base_lr, max_iters=cfg.max_iters,
                     batch_size=cfg.batch_size, lr_drop_every=cfg.lr_drop_every,
                     lr_drop_factor=cfg.lr_drop_factor, seed=seed)
    return train(model, data, tc)


def _latents_by_id(model: AutoencoderModel, subjects, horizon: int) -> dict[str, np.ndarray]:
    feats, excluded = extract_features(model, subjects, horizon)
    if excluded:
        raise DataFormatError(excluded)
    return {f.subject_id: f.z for f in feats}


class _Outputs:
    """Tracks files written by a stage so failures leave no partial artifacts."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.paths: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, *parts) -> str:
        p = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.paths.append(p)
        return p

    def write_text(self, name: str, text: str) -> str:
        p = self.path(name)
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return p

    def discard_all(self):
        for p in self.paths:
            if os.path.exists(p):
                os.remove(p)


def _csv_text(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Full protocol; writes report/model artifacts under cfg.out_dir."""
    out = _Outputs(cfg.out_dir)
    try:
        return _run_experiment_inner(cfg, out)
    except Exception:
        out.discard_all()
        raise


def _run_experiment_inner(cfg: ExperimentConfig, out: _Outputs) -> ExperimentReport:
    train_subjects, test_subjects, stats = _load_and_split(cfg)
    ae_model, history = _train_autoencoder(cfg, train_subjects, cfg.hidden_dim, cfg.seed)

    save_model(ae_model, out.path("ae_model.npz"))
    out.write_text("norm_stats.json",
                   json.dumps(stats.to_dict(), sort_keys=True, indent=2) + "\n")
    out.write_text("loss_history.csv",
                   _csv_text(["iteration", "lr", "loss"],
                             [[it, float(lr), float(loss)] for it, lr, loss in history]))
    out.write_text("split.csv",
                   _csv_text(["subject_id", "split"],
                             [[s.subject_id, "train"] for s in train_subjects]
                             + [[s.subject_id, "test"] for s in test_subjects]))

    rows: list[ReportRow] = []
    comparisons: list[Comparison] = []
    for horizon in cfg.horizons:
        latents_tr = _latents_by_id(ae_model, train_subjects, horizon)
        latents_te = _latents_by_id(ae_model, test_subjects, horizon)
        risks: dict[str, np.ndarray] = {}
        tails: dict[str, tuple] = {}
        for kind in MODEL_FAMILY + (_IMAGING_BASELINE,):
            row, cox, spec, r, used_te = _fit_and_score(
                kind, horizon, train_subjects, test_subjects, latents_tr, latents_te)
            if kind in MODEL_FAMILY:
                rows.append(row)
            risks[kind] = r
            tails[kind] = _outcome_arrays(used_te)
            out.write_text(os.path.join("models", f"cox_{kind}_{horizon}m.txt"),
                           cox.export_text())
            out.write_text(os.path.join("models", f"spec_{kind}_{horizon}m.json"),
                           json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
        if cfg.n_boot > 0:
            for k, (model_a, model_b) in enumerate(
                    (("longitudinal", "baseline"),
                     ("longitudinal_imaging", _IMAGING_BASELINE))):
                t_te, e_te = tails[model_a]
                delta, p = bootstrap_cindex_diff(
                    risks[model_a], risks[model_b], t_te, e_te,
                    n_boot=cfg.n_boot, seed=cfg.seed * 1000 + horizon * 10 + k)
                comparisons.append(Comparison(model_a, model_b, horizon,
                                              float(delta), float(p), cfg.n_boot))

    report = ExperimentReport(rows, comparisons, config=_config_echo(cfg))
    out.write_text("report.csv",
                   _csv_text(["model_name", "horizon", "c_index", "n_subjects", "n_events"],
                             [[r.model, r.horizon, float(r.c_index), r.n_subjects,
                               r.n_events] for r in rows]))
    out.write_text("report.json", report.to_json())
    return report


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = asdict(cfg)
    echo["horizons"] = list(cfg.horizons)
    echo["sweep_dims"] = list(cfg.sweep_dims)
    return echo


def run_sweep(cfg: ExperimentConfig) -> list[tuple[int, int, float]]:
    """Hidden-size sweep of the imaging-augmented longitudinal model.

    Writes sweep.csv rows (hidden_dim, horizon, c_index).
    """
    out = _Outputs(cfg.out_dir)
    try:
        train_subjects, test_subjects, _ = _load_and_split(cfg)
        results = []
        for dim in cfg.sweep_dims:
            ae_model, _ = _train_autoencoder(cfg, train_subjects, dim, cfg.seed)
            for horizon in cfg.horizons:
                latents_tr = _latents_by_id(ae_model, train_subjects, horizon)
                latents_te = _latents_by_id(ae_model, test_subjects, horizon)
                row, _, _, _, _ = _fit_and_score("longitudinal_imaging", horizon,
                                                 train_subjects, test_subjects,
                                                 latents_tr, latents_te)
                results.append((dim, horizon, row.c_index))
        out.write_text("sweep.csv",
                       _csv_text(["hidden_dim", "horizon", "c_index"],
                                 [[d, h, float(c)] for d, h, c in results]))
        return results
    except Exception:
        out.discard_all()
        raise


def emit_plot_data(report_csv_path, out_dir) -> list[str]:
    """Plot-ready series: grouped bars from report.csv, lines from sweep.csv."""
    if not os.path.exists(report_csv_path):
        raise DataFormatError(f"report not found: {report_csv_path}")
    with open(report_csv_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split(",")[:3] != ["model_name", "horizon", "c_index"]:
        raise DataFormatError(f"{report_csv_path}: not a report.csv")
    out = _Outputs(out_dir)
    written = [out.write_text("fig3_data.csv", "\n".join(
        ["model_name,horizon,c_index"]
        + [",".join(line.split(",")[:3]) for line in lines[1:]]) + "\n")]
    sweep_path = os.path.join(os.path.dirname(report_csv_path), "sweep.csv")
    if os.path.exists(sweep_path):
        with open(sweep_path, encoding="utf-8") as fh:
            sweep_lines = fh.read().splitlines()
        written.append(out.write_text("fig4_data.csv", "\n".join(sweep_lines) + "\n"))
    return written
