"""Experiment drivers: full-data inference, leave-one-out cross-validation,
future-year prediction for ungauged catchments, and short-record studies.

All drivers run against one of three observation designs: point data only
(P), areal data only (A), or both (P+A). Folds that fail to fit are
flagged and excluded from averages instead of aborting the experiment.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .geometry import Domain, MeshSettings
from .inference import LatentFit, fit_map
from .linalg import FactorizationError
from .model import (DESIGNS, Hyperparameters, ModelError, ObservationSet,
                    build_structure, default_theta0)
from .prediction import Prediction, predict_area, predict_future_area
from .priors import PriorConfig
from .scoring import ScoreReport, score_target
from .topkriging import KrigingError, default_variogram, fit_variogram, krige
from .inference import InferenceError

FOLD_ERRORS = (InferenceError, FactorizationError, ModelError, np.linalg.LinAlgError)


@dataclass
class ExperimentContext:
    """Shared inputs for the drivers: data, geometry, priors, fit options."""

    dataset: Dataset
    domain: Domain
    prior_config: PriorConfig = field(default_factory=PriorConfig)
    theta0: Hyperparameters = field(default_factory=default_theta0)
    fit_options: dict = field(default_factory=dict)

    @classmethod
    def from_dataset(cls, dataset: Dataset, mesh_settings: MeshSettings | None = None,
                     prior_config: PriorConfig | None = None,
                     theta0: Hyperparameters | None = None,
                     fit_options: dict | None = None) -> "ExperimentContext":
        return cls(dataset=dataset,
                   domain=dataset.build_domain(mesh_settings),
                   prior_config=prior_config or PriorConfig(),
                   theta0=theta0 or default_theta0(),
                   fit_options=fit_options or {})

    def fit(self, obs: ObservationSet, design: str,
            compute_quantiles: bool = False) -> LatentFit:
        structure = build_structure(self.domain, obs, self.prior_config, design)
        return fit_map(structure, self.theta0,
                       compute_quantiles=compute_quantiles, **self.fit_options)


def run_inference(ctx: ExperimentContext, design: str) -> LatentFit:
    """Fit the chosen design to all available observations; quantile table attached."""
    _check_design(design)
    obs = ctx.dataset.observation_set()
    return ctx.fit(obs, design, compute_quantiles=True)


def run_loocv(ctx: ExperimentContext, design: str
              ) -> tuple[ScoreReport, list[Prediction]]:
    """Leave-one-catchment-out spatial prediction of the observed years."""
    _check_design(design)
    full_obs = ctx.dataset.observation_set()
    report = ScoreReport(label=f"loocv design={design}")
    predictions: list[Prediction] = []
    for cid in sorted(ctx.dataset.catchments):
        held_years = full_obs.areal_years_of(cid)
        if not held_years:
            continue
        obs = full_obs.without_catchment(cid)
        try:
            fit = ctx.fit(obs, design)
        except FOLD_ERRORS as exc:
            warnings.warn(f"fold {cid} failed to fit ({exc}); excluded from averages")
            report.failed_targets.append(cid)
            continue
        preds, truths = [], []
        for year in held_years:
            held = full_obs.areal_value(cid, year)
            preds.append(predict_area(fit, cid, year, noise_scale=held.scale))
            truths.append(held.value)
        predictions.extend(preds)
        report.add(score_target(cid, preds, truths))
    return report, predictions


def run_future_ungauged(ctx: ExperimentContext, design: str
                        ) -> tuple[ScoreReport, list[Prediction]]:
    """Future-year prediction with the target catchment left out entirely.

    The future mean is the climatic functional; scoring uses the held-out
    future records of the dataset.
    """
    _check_design(design)
    full_obs = ctx.dataset.observation_set()
    report = ScoreReport(label=f"future design={design}")
    predictions: list[Prediction] = []
    for cid in sorted(ctx.dataset.catchments):
        future = ctx.dataset.future_values(cid)
        if not future:
            continue
        obs = full_obs.without_catchment(cid)
        try:
            fit = ctx.fit(obs, design)
        except FOLD_ERRORS as exc:
            warnings.warn(f"fold {cid} failed to fit ({exc}); excluded from averages")
            report.failed_targets.append(cid)
            continue
        scale = _future_noise_scale(ctx.dataset, cid)
        pred = predict_future_area(fit, cid, noise_scale=scale)
        preds = [pred] * len(future)
        truths = [val for _, val in future]
        predictions.append(pred)
        report.add(score_target(cid, preds, truths))
    return report, predictions


def _future_noise_scale(dataset: Dataset, cid: str) -> float:
    """Variance scale for future measurement noise: mean of the recorded scales."""
    scales = [r.obs_sd_m ** 2 for r in dataset.future_runoff_records
              if r.catchment_id == cid and r.obs_sd_m is not None]
    if not scales:
        scales = [r.obs_sd_m ** 2 for r in dataset.runoff_records
                  if r.catchment_id == cid and r.obs_sd_m is not None]
    if not scales:
        scales = [(dataset.default_areal_sd_fraction * r.runoff_m) ** 2
                  for r in dataset.runoff_records if r.catchment_id == cid]
    return float(np.mean(scales)) if scales else 1e-4


@dataclass
class ShortRecordResult:
    record_length: int
    repeats: int
    report: ScoreReport
    mean_rmse: float
    mean_crps: float
    subsets: dict[str, list[list[int]]]  # catchment -> chosen years per repeat


def run_short_record(ctx: ExperimentContext, design: str, record_length: int,
                     repeats: int = 10, seed: int = 0) -> ShortRecordResult:
    """Future prediction with a short record from the target catchment.

    For each target catchment and repeat, record_length of its observed
    years are drawn without replacement (derived per-(catchment, repeat)
    seed) and added to the likelihood before fitting. record_length = 0
    reduces to the fully ungauged driver.
    """
    _check_design(design)
    if record_length < 0:
        raise ModelError("record length must be nonnegative")
    if record_length == 0:
        report, _ = run_future_ungauged(ctx, design)
        return ShortRecordResult(record_length=0, repeats=1, report=report,
                                 mean_rmse=report.mean_rmse,
                                 mean_crps=report.mean_crps, subsets={})

    full_obs = ctx.dataset.observation_set()
    catchment_ids = sorted(ctx.dataset.catchments)
    per_target_rmse: list[float] = []
    per_target_crps: list[float] = []
    report = ScoreReport(label=f"shortrec i={record_length} design={design}")
    subsets: dict[str, list[list[int]]] = {}
    for c_idx, cid in enumerate(catchment_ids):
        future = ctx.dataset.future_values(cid)
        held_years = full_obs.areal_years_of(cid)
        if not future or not held_years:
            continue
        if record_length > len(held_years):
            raise ModelError(f"record length {record_length} exceeds the "
                             f"{len(held_years)} observed years of {cid}")
        rep_scores = []
        subsets[cid] = []
        for rep in range(repeats):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=(seed, c_idx, rep)))
            chosen = sorted(rng.choice(held_years, size=record_length,
                                       replace=False).tolist())
            subsets[cid].append(chosen)
            obs = full_obs.restricted_to_catchment_years(cid, chosen)
            try:
                fit = ctx.fit(obs, design)
            except FOLD_ERRORS as exc:
                warnings.warn(f"shortrec fold {cid} repeat {rep} failed ({exc}); excluded")
                report.failed_targets.append(f"{cid}#rep{rep}")
                continue
            scale = _future_noise_scale(ctx.dataset, cid)
            pred = predict_future_area(fit, cid, noise_scale=scale)
            truths = [val for _, val in future]
            rep_scores.append(score_target(f"{cid}#rep{rep}", [pred] * len(truths), truths))
        if rep_scores:
            per_target_rmse.append(float(np.mean([s.rmse for s in rep_scores])))
            per_target_crps.append(float(np.mean([s.crps for s in rep_scores])))
            cov = float(np.mean([s.coverage for s in rep_scores]))
            report.add(score_target_like(cid, rep_scores, cov))
    mean_rmse = float(np.mean(per_target_rmse)) if per_target_rmse else float("nan")
    mean_crps = float(np.mean(per_target_crps)) if per_target_crps else float("nan")
    return ShortRecordResult(record_length=record_length, repeats=repeats,
                             report=report, mean_rmse=mean_rmse,
                             mean_crps=mean_crps, subsets=subsets)


def score_target_like(target_id, rep_scores, cov):
    from .scoring import TargetScore

    return TargetScore(target_id=target_id,
                       n=sum(s.n for s in rep_scores),
                       rmse=float(np.mean([s.rmse for s in rep_scores])),
                       crps=float(np.mean([s.crps for s in rep_scores])),
                       coverage=cov)


def run_topkriging_loocv(ctx: ExperimentContext
                         ) -> tuple[ScoreReport, list[Prediction]]:
    """Per-year ordinary-Kriging baseline, leave-one-catchment-out.

    Uses areal observations only. The variogram is fit per year from the
    remaining catchments; predictions carry the kriging sd.
    """
    from .prediction import interval as pred_interval

    dataset = ctx.dataset
    obs_by_year: dict[int, list] = {}
    for rec in dataset.runoff_records:
        obs_by_year.setdefault(rec.year, []).append(rec)
    report = ScoreReport(label="topkriging loocv")
    predictions: list[Prediction] = []
    for cid in sorted(dataset.catchments):
        target = dataset.catchments[cid]
        preds, truths = [], []
        for year in sorted(obs_by_year):
            recs = obs_by_year[year]
            held = [r for r in recs if r.catchment_id == cid]
            others = [r for r in recs if r.catchment_id != cid]
            if not held or not others:
                continue
            cats = [dataset.catchments[r.catchment_id] for r in others]
            values = [r.runoff_m for r in others]
            try:
                model = (fit_variogram(values, cats) if len(cats) >= 3
                         else default_variogram(cats, values))
                result = krige(target, list(zip(cats, values)), model)
            except (KrigingError, np.linalg.LinAlgError) as exc:
                warnings.warn(f"kriging fold {cid} year {year} failed ({exc}); excluded")
                report.failed_targets.append(f"{cid}@{year}")
                continue
            lo, hi = pred_interval(result.mean, result.sd)
            preds.append(Prediction(target_id=cid, year=year, mean=result.mean,
                                    sd_process=result.sd, sd_predictive=result.sd,
                                    lo=lo, hi=hi))
            truths.append(held[0].runoff_m)
        if preds:
            predictions.extend(preds)
            report.add(score_target(cid, preds, truths))
    return report, predictions


def _check_design(design: str) -> None:
    if design not in DESIGNS:
        raise ModelError(f"design must be one of {DESIGNS}, got {design!r}")
