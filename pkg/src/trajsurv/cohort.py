"""Data layer: longitudinal cognitive trajectories with time-to-event outcomes.

Covers the synthetic cohort generator (a proportional-hazards simulator whose
summary statistics are calibrated against the published MCI demographics),
CSV ingestion/writing with itemized diagnostics, the per-horizon visit
truncation rule, normalization statistics, and train/test splitting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DataFormatError

MEASURE_NAMES = ("adas13", "ravlt_immediate", "ravlt_learning", "faq", "mmse")
MEASURE_BOUNDS = {
    "adas13": (0.0, 85.0),
    "ravlt_immediate": (0.0, 75.0),
    "ravlt_learning": (-10.0, 15.0),
    "faq": (0.0, 30.0),
    "mmse": (0.0, 30.0),
}
VISIT_MONTHS = (0, 6, 12)
HORIZONS = (6, 12)

VISITS_HEADER = ("subject_id", "visit_month") + MEASURE_NAMES
OUTCOMES_HEADER = ("subject_id", "age", "sex", "education_years", "apoe4_count",
                   "imaging_risk", "time_months", "event", "cohort_tag")


@dataclass(frozen=True)
class VisitRecord:
    """One visit: month on the {0, 6, 12} grid and the 5 cognitive measures."""

    subject_id: str
    visit_month: int
    measures: np.ndarray  # ordered as MEASURE_NAMES

    def measure(self, name: str) -> float:
        return float(self.measures[MEASURE_NAMES.index(name)])


@dataclass
class SubjectTrajectory:
    """A subject's ordered visits, baseline covariates, and outcome."""

    subject_id: str
    visits: list[VisitRecord]
    age: float
    sex: int
    education_years: float
    apoe4_count: int
    imaging_risk: float
    time_months: float
    event: bool
    cohort_tag: str | None = None

    def __post_init__(self):
        months = [v.visit_month for v in self.visits]
        if months != sorted(set(months)):
            raise ValueError(f"subject {self.subject_id}: visit months must be "
                             f"strictly increasing, got {months}")
        if not self.time_months > 0:
            raise ValueError(f"subject {self.subject_id}: time_months must be > 0")

    @property
    def visit_months(self) -> list[int]:
        return [v.visit_month for v in self.visits]

    def measure_matrix(self) -> np.ndarray:
        """Visits stacked as a (T, 5) array in time order."""
        return np.array([v.measures for v in self.visits], dtype=np.float64)

    def visit_at(self, month: int) -> VisitRecord | None:
        for v in self.visits:
            if v.visit_month == month:
                return v
        return None


@dataclass
class GenConfig:
    """Synthetic cohort generator settings.

    Latent disease severity s_t = s0 + slope * t drives all five measures
    through per-measure affine maps; the conversion hazard is proportional in
    (standardized slope, s0, imaging signal, APOE4 count) with a Weibull
    baseline whose scale is calibrated to hit the target event fraction.
    Published cohort statistics (event fraction, conversion/censor time
    moments, baseline measure means) are the calibration targets.
    """

    n_subjects: int = 822
    seed: int = 0
    # outcome model
    target_event_fraction: float = 0.383
    event_fraction_tol: float = 0.04
    weibull_shape: float = 1.6
    weibull_scale: float = 80.0
    # censoring draw moments; selection (conversion removes late censors) brings
    # the observed censored-subject mean down to the published ~49 months
    censor_time_mean: float = 60.0
    censor_time_sd: float = 36.6
    conversion_time_mean: float = 30.5
    conversion_time_sd: float = 25.6
    max_followup_months: float = 120.0
    gamma_slope: float = 1.3
    gamma_s0: float = 0.7
    gamma_imaging: float = 0.8
    gamma_apoe: float = 0.35
    imaging_noise_sd: float = 0.3
    # severity process
    s0_sd: float = 1.0
    slope_mean: float = 0.05   # per month
    slope_sd: float = 0.05
    visit_noise_sd: float = 0.1
    # measure maps: value = mean + loading * s_t + noise
    measure_means: tuple = (17.0, 32.0, 4.0, 4.0, 27.3)
    measure_loadings: tuple = (6.0, -6.0, -1.5, 3.5, -1.2)
    measure_noise_sds: tuple = (0.8, 1.0, 0.25, 0.5, 0.2)
    noise_scale: float = 1.0
    missing_visit_prob: float = 0.1
    # demographics
    age_mean: float = 73.5
    age_sd: float = 7.3
    male_fraction: float = 0.58
    education_mean: float = 16.0
    education_sd: float = 2.7
    apoe4_probs: tuple = (0.45, 0.40, 0.15)

    def __post_init__(self):
        if self.n_subjects < 10:
            raise ValueError("n_subjects must be >= 10")
        if not 0.0 < self.target_event_fraction < 1.0:
            raise ValueError("target_event_fraction must be in (0, 1)")
        for name in ("event_fraction_tol", "censor_time_sd", "s0_sd", "slope_sd",
                     "weibull_shape", "weibull_scale", "noise_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.missing_visit_prob <= 1.0:
            raise ValueError("missing_visit_prob must be a probability")
        if abs(sum(self.apoe4_probs) - 1.0) > 1e-9:
            raise ValueError("apoe4_probs must sum to 1")


def _round_to_visit_grid(t: np.ndarray) -> np.ndarray:
    """Nearest 6-month multiple, floored at 6."""
    return 6.0 * np.maximum(1.0, np.rint(np.asarray(t) / 6.0))


def generate_cohort(cfg: GenConfig) -> list[SubjectTrajectory]:
    """Draw a synthetic cohort; deterministic for a fixed config."""
    return generate_cohort_with_latents(cfg)[0]


def generate_cohort_with_latents(cfg: GenConfig) -> tuple[list[SubjectTrajectory], dict]:
    """Generate the cohort plus the latent per-subject truth behind it.

    The latents let validation code fit models on the true hazard covariates
    (standardized slope, baseline severity, imaging signal, APOE4 count).
    All randomness is drawn up front so the event-fraction calibration loop
    only rescales the Weibull baseline against fixed uniforms.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_subjects

    s0 = rng.normal(0.0, cfg.s0_sd, size=n)
    slope = rng.normal(cfg.slope_mean, cfg.slope_sd, size=n)
    apoe4 = rng.choice(len(cfg.apoe4_probs), size=n, p=cfg.apoe4_probs)
    img_signal = rng.normal(size=n)
    age = np.clip(rng.normal(cfg.age_mean, cfg.age_sd, size=n), 55.0, 92.0)
    sex = (rng.random(n) < cfg.male_fraction).astype(int)
    education = np.clip(np.rint(rng.normal(cfg.education_mean, cfg.education_sd, size=n)),
                        6.0, 20.0)
    imaging_risk = cfg.gamma_imaging * img_signal + rng.normal(0.0, cfg.imaging_noise_sd, size=n)

    u_conv = rng.random(n)
    cshape = (cfg.censor_time_mean / cfg.censor_time_sd) ** 2
    cscale = cfg.censor_time_sd ** 2 / cfg.censor_time_mean
    censor = np.minimum(rng.gamma(cshape, cscale, size=n), cfg.max_followup_months)

    visit_noise = rng.normal(0.0, cfg.visit_noise_sd, size=(n, len(VISIT_MONTHS)))
    measure_noise = rng.normal(size=(n, len(VISIT_MONTHS), len(MEASURE_NAMES)))
    missing = rng.random((n, len(VISIT_MONTHS))) < cfg.missing_visit_prob
    missing[:, 0] = False  # baseline always observed

    z_slope = (slope - cfg.slope_mean) / cfg.slope_sd
    eta = (cfg.gamma_slope * z_slope + cfg.gamma_s0 * s0
           + cfg.gamma_imaging * img_signal + cfg.gamma_apoe * apoe4)

    scale = cfg.weibull_scale
    frac = None
    for _ in range(10):
        t_conv = scale * (-np.log(u_conv) * np.exp(-eta)) ** (1.0 / cfg.weibull_shape)
        event = t_conv <= censor
        frac = float(event.mean())
        if abs(frac - cfg.target_event_fraction) <= cfg.event_fraction_tol:
            break
        scale *= (frac / cfg.target_event_fraction) ** (1.0 / cfg.weibull_shape)
    else:
        raise ValueError(
            f"event fraction {frac:.3f} did not reach target "
            f"{cfg.target_event_fraction:.3f} +/- {cfg.event_fraction_tol} "
            f"within 10 calibration attempts")

    time_rec = _round_to_visit_grid(np.minimum(t_conv, censor))

    means = np.asarray(cfg.measure_means)
    loadings = np.asarray(cfg.measure_loadings)
    noise_sds = np.asarray(cfg.measure_noise_sds) * cfg.noise_scale
    lo = np.array([MEASURE_BOUNDS[m][0] for m in MEASURE_NAMES])
    hi = np.array([MEASURE_BOUNDS[m][1] for m in MEASURE_NAMES])

    width = len(str(n))
    cohort = []
    for i in range(n):
        sid = f"S{i + 1:0{width}d}"
        visits = []
        for k, month in enumerate(VISIT_MONTHS):
            if missing[i, k]:
                continue
            severity = s0[i] + slope[i] * month + visit_noise[i, k]
            values = np.clip(means + loadings * severity + noise_sds * measure_noise[i, k],
                             lo, hi)
            visits.append(VisitRecord(sid, month, np.round(values, 6)))
        cohort.append(SubjectTrajectory(
            subject_id=sid,
            visits=visits,
            age=round(float(age[i]), 6),
            sex=int(sex[i]),
            education_years=float(education[i]),
            apoe4_count=int(apoe4[i]),
            imaging_risk=round(float(imaging_risk[i]), 6),
            time_months=float(time_rec[i]),
            event=bool(event[i]),
        ))
    latents = {"s0": s0, "slope": slope, "z_slope": z_slope,
               "img_signal": img_signal, "apoe4": apoe4, "eta": eta,
               "t_conversion": t_conv, "t_censor": censor}
    return cohort, latents


# --- CSV ingestion / writing ----------------------------------------------------

def _parse_float(value: str, what: str, line: int, fname: str, diags: list[str]):
    try:
        out = float(value)
    except ValueError:
        diags.append(f"{fname} line {line}: {what}={value!r} is not a number")
        return None
    if not math.isfinite(out):
        diags.append(f"{fname} line {line}: {what}={value!r} is not finite")
        return None
    return out


def _parse_int(value: str, what: str, allowed, line: int, fname: str, diags: list[str]):
    try:
        out = int(value)
    except ValueError:
        diags.append(f"{fname} line {line}: {what}={value!r} is not an integer")
        return None
    if allowed is not None and out not in allowed:
        diags.append(f"{fname} line {line}: {what}={out} not in {sorted(allowed)}")
        return None
    return out


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=1) if row]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0][1]]
    return header, rows[1:]


def load_cohort(visits_path, outcomes_path) -> tuple[list[SubjectTrajectory], list[str]]:
    """Parse and join the two CSVs; returns (trajectories, diagnostics).

    Every rejected line or subject contributes exactly one diagnostic string;
    accepted subjects round-trip exactly through save_cohort.
    """
    diags: list[str] = []

    header, rows = _read_rows(visits_path)
    unknown = [h for h in header if h not in VISITS_HEADER]
    missing_cols = [h for h in VISITS_HEADER if h not in header]
    if unknown or missing_cols:
        raise DataFormatError(
            f"{visits_path}: unknown columns {unknown}, missing columns {missing_cols}")
    col = {name: header.index(name) for name in VISITS_HEADER}

    visits: dict[str, dict[int, VisitRecord]] = {}
    for lineno, row in rows:
        if len(row) != len(header):
            diags.append(f"{visits_path} line {lineno}: expected {len(header)} fields, "
                         f"got {len(row)}")
            continue
        sid = row[col["subject_id"]].strip()
        if not sid:
            diags.append(f"{visits_path} line {lineno}: empty subject_id")
            continue
        month = _parse_int(row[col["visit_month"]], "visit_month", set(VISIT_MONTHS),
                           lineno, visits_path, diags)
        if month is None:
            continue
        values = []
        ok = True
        for name in MEASURE_NAMES:
            v = _parse_float(row[col[name]], name, lineno, visits_path, diags)
            if v is None:
                ok = False
                break
            lo, hi = MEASURE_BOUNDS[name]
            if not lo <= v <= hi:
                diags.append(f"{visits_path} line {lineno}: {name}={v} outside "
                             f"[{lo:g}, {hi:g}]")
                ok = False
                break
            values.append(v)
        if not ok:
            continue
        if month in visits.setdefault(sid, {}):
            diags.append(f"{visits_path} line {lineno}: duplicate visit "
                         f"({sid}, month {month})")
            continue
        visits[sid][month] = VisitRecord(sid, month, np.array(values))

    header, rows = _read_rows(outcomes_path)
    required = [h for h in OUTCOMES_HEADER if h != "cohort_tag"]
    unknown = [h for h in header if h not in OUTCOMES_HEADER]
    missing_cols = [h for h in required if h not in header]
    if unknown or missing_cols:
        raise DataFormatError(
            f"{outcomes_path}: unknown columns {unknown}, missing columns {missing_cols}")
    has_tag = "cohort_tag" in header
    col = {name: header.index(name) for name in header}

    cohort: list[SubjectTrajectory] = []
    seen: set[str] = set()
    for lineno, row in rows:
        if len(row) != len(header):
            diags.append(f"{outcomes_path} line {lineno}: expected {len(header)} fields, "
                         f"got {len(row)}")
            continue
        sid = row[col["subject_id"]].strip()
        if not sid:
            diags.append(f"{outcomes_path} line {lineno}: empty subject_id")
            continue
        if sid in seen:
            diags.append(f"{outcomes_path} line {lineno}: duplicate outcome row for {sid}")
            continue
        seen.add(sid)
        age = _parse_float(row[col["age"]], "age", lineno, outcomes_path, diags)
        sex = _parse_int(row[col["sex"]], "sex", {0, 1}, lineno, outcomes_path, diags)
        edu = _parse_float(row[col["education_years"]], "education_years", lineno,
                           outcomes_path, diags)
        apoe = _parse_int(row[col["apoe4_count"]], "apoe4_count", {0, 1, 2}, lineno,
                          outcomes_path, diags)
        img = _parse_float(row[col["imaging_risk"]], "imaging_risk", lineno,
                           outcomes_path, diags)
        time_months = _parse_float(row[col["time_months"]], "time_months", lineno,
                                   outcomes_path, diags)
        event = _parse_int(row[col["event"]], "event", {0, 1}, lineno, outcomes_path, diags)
        if None in (age, sex, edu, apoe, img, time_months, event):
            continue
        if time_months <= 0:
            diags.append(f"{outcomes_path} line {lineno}: time_months={time_months} "
                         f"must be > 0")
            continue
        tag = None
        if has_tag:
            raw_tag = row[col["cohort_tag"]].strip()
            if raw_tag:
                if raw_tag not in ("train", "test"):
                    diags.append(f"{outcomes_path} line {lineno}: cohort_tag={raw_tag!r} "
                                 f"must be 'train' or 'test'")
                    continue
                tag = raw_tag
        subject_visits = visits.pop(sid, {})
        if 0 not in subject_visits:
            diags.append(f"{outcomes_path} line {lineno}: subject {sid} rejected, "
                         f"no baseline (month 0) visit")
            continue
        ordered = [subject_visits[m] for m in sorted(subject_visits)]
        cohort.append(SubjectTrajectory(sid, ordered, age, sex, edu, apoe, img,
                                        time_months, bool(event), tag))

    for sid in visits:
        diags.append(f"{visits_path}: subject {sid} rejected, no outcome row")
    return cohort, diags


def _fmt(value: float) -> str:
    return repr(float(value))


def save_cohort(cohort: list[SubjectTrajectory], visits_path, outcomes_path) -> None:
    """Write the two canonical CSVs (subject order preserved, visits by month)."""
    tags = [s.cohort_tag for s in cohort]
    if any(t is not None for t in tags) and any(t is None for t in tags):
        raise ValueError("either all subjects or none must carry a cohort_tag")
    with_tag = tags and tags[0] is not None

    with open(visits_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(VISITS_HEADER)
        for subject in cohort:
            for v in subject.visits:
                writer.writerow([subject.subject_id, v.visit_month]
                                + [_fmt(x) for x in v.measures])

    header = OUTCOMES_HEADER if with_tag else OUTCOMES_HEADER[:-1]
    with open(outcomes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for s in cohort:
            row = [s.subject_id, _fmt(s.age), s.sex, _fmt(s.education_years),
                   s.apoe4_count, _fmt(s.imaging_risk), _fmt(s.time_months),
                   int(s.event)]
            if with_tag:
                row.append(s.cohort_tag)
            writer.writerow(row)


# --- transformations -------------------------------------------------------------

def truncate_visits(subject: SubjectTrajectory, horizon_months: int) -> SubjectTrajectory:
    """Visits usable for the given horizon model.

    Keeps visits at months <= horizon; converters additionally lose every visit
    at or after their conversion time. The baseline visit always survives.
    """
    if horizon_months not in HORIZONS:
        raise ValueError(f"horizon_months must be one of {HORIZONS}")
    kept = [v for v in subject.visits if v.visit_month <= horizon_months]
    if subject.event:
        kept = [v for v in kept if v.visit_month < subject.time_months]
    return replace(subject, visits=kept)


@dataclass
class NormStats:
    """Per-measure mean/sd computed on the training split (all visits pooled)."""

    mean: np.ndarray
    sd: np.ndarray

    def to_dict(self) -> dict:
        return {"measures": list(MEASURE_NAMES),
                "mean": [float(x) for x in self.mean],
                "sd": [float(x) for x in self.sd]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64),
                   np.array(d["sd"], dtype=np.float64))


def compute_norm_stats(train: list[SubjectTrajectory]) -> NormStats:
    """Pooled per-measure mean/sd over every visit of the training subjects."""
    if len(train) < 2:
        raise ValueError("need at least 2 training subjects")
    rows = np.concatenate([s.measure_matrix() for s in train], axis=0)
    mean = rows.mean(axis=0)
    sd = rows.std(axis=0)
    flat = np.flatnonzero(sd == 0.0)
    if flat.size:
        raise ValueError(f"measure {MEASURE_NAMES[flat[0]]} has zero variance "
                         f"on the training split")
    return NormStats(mean, sd)


def normalize(cohort: list[SubjectTrajectory], stats: NormStats) -> list[SubjectTrajectory]:
    """Z-score every visit's measures; returns new trajectories."""
    out = []
    for s in cohort:
        visits = [VisitRecord(v.subject_id, v.visit_month,
                              (v.measures - stats.mean) / stats.sd)
                  for v in s.visits]
        out.append(replace(s, visits=visits))
    return out


def split_cohort(cohort: list[SubjectTrajectory], train_fraction: float,
                 seed: int) -> tuple[list[SubjectTrajectory], list[SubjectTrajectory]]:
    """Event-stratified disjoint split, or verbatim cohort_tag assignment.

    When every subject carries a tag the fraction and seed are ignored.
    """
    tags = [s.cohort_tag for s in cohort]
    if any(t is not None for t in tags):
        if any(t is None for t in tags):
            raise ValueError("cohort is only partially tagged; tag all subjects or none")
        train = [s for s in cohort if s.cohort_tag == "train"]
        test = [s for s in cohort if s.cohort_tag == "test"]
    else:
        if not 0.0 < train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        rng = np.random.default_rng(seed)
        idx_event = [i for i, s in enumerate(cohort) if s.event]
        idx_censor = [i for i, s in enumerate(cohort) if not s.event]
        n_train = int(round(train_fraction * len(cohort)))
        n_train_events = int(round(train_fraction * len(idx_event)))
        n_train_events = min(max(n_train_events, n_train - len(idx_censor)), n_train)
        perm_event = rng.permutation(len(idx_event))
        perm_censor = rng.permutation(len(idx_censor))
        chosen = {idx_event[i] for i in perm_event[:n_train_events]}
        chosen |= {idx_censor[i] for i in perm_censor[:n_train - n_train_events]}
        train = [s for i, s in enumerate(cohort) if i in chosen]
        test = [s for i, s in enumerate(cohort) if i not in chosen]
    for name, part in (("train", train), ("test", test)):
        if sum(s.event for s in part) < 2:
            raise ValueError(f"{name} split has fewer than 2 events")
    return train, test


def summarize_groups(cohort: list[SubjectTrajectory]) -> list[dict]:
    """Per-group (sMCI analog = censored, pMCI analog = converters) summary rows."""
    rows = []
    for label, keep_event in (("sMCI", False), ("pMCI", True)):
        group = [s for s in cohort if s.event == keep_event]
        if not group:
            rows.append({"group": label, "n": 0})
            continue
        ages = np.array([s.age for s in group])
        mmse = np.array([s.visits[0].measure("mmse") for s in group])
        times = np.array([s.time_months for s in group])
        rows.append({
            "group": label,
            "n": len(group),
            "age_mean": float(ages.mean()), "age_sd": float(ages.std()),
            "mmse_mean": float(mmse.mean()), "mmse_sd": float(mmse.std()),
            "time_mean": float(times.mean()), "time_sd": float(times.std()),
        })
    return rows
