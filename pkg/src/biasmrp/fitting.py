"""
From a survey to posterior draws, and from draws to cell-level predictions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .errors import DataValidationError
from .frame import AdjacencyGraph, CovariateTables, Schema, StratificationFrame, SurveyDataset
from .model import (BERNOULLI, DesignMatrix, ModelData, ModelSpec, PosteriorModel,
                    Standardizer, default_components)
from .sampler import PosteriorDraws, SamplerConfig, load_draws, run_chains, save_draws


def survey_design_inputs(survey: SurveyDataset, covariates: CovariateTables | None):
    """Level matrix (schema order) and raw covariates for each respondent."""
    schema = survey.schema
    area = survey.column(schema.area)
    day = survey.column(schema.time) if schema.time else None
    X = covariates.rows(area, day) if covariates is not None else np.zeros((survey.n, 0))
    return np.asarray(survey.levels), X


def frame_design_inputs(frame: StratificationFrame, covariates: CovariateTables | None,
                        day: int | None = None):
    """Level matrix in schema order for frame cells, with the time attribute
    (if any) set to ``day``."""
    schema = frame.schema
    cols = []
    ci = 0
    for a in schema.attributes:
        if a.name == schema.time:
            if day is None:
                raise DataValidationError("prediction needs a day id for the time attribute")
            if not 0 <= day < a.cardinality:
                raise DataValidationError(f"day {day} outside 0..{a.cardinality - 1}")
            cols.append(np.full(frame.n_cells, day))
        else:
            cols.append(frame.levels[:, ci])
            ci += 1
    levels = np.column_stack(cols) if cols else np.zeros((frame.n_cells, 0), dtype=np.int64)
    area = levels[:, schema.names.index(schema.area)]
    X = covariates.rows(area, day) if covariates is not None else np.zeros((frame.n_cells, 0))
    return levels, X


@dataclass
class FittedModel:
    """A posterior over one model: spec, frozen standardization and draws.

    ``attributes`` maps the model's prior components to schema columns.
    """

    spec: ModelSpec
    standardizer: Standardizer
    draws: PosteriorDraws
    schema_names: tuple[str, ...]
    n_obs: int = 0
    meta: dict = field(default_factory=dict)

    def _design(self, levels, X_raw) -> DesignMatrix:
        idx = [self.schema_names.index(a) for a in self.spec.attributes]
        return DesignMatrix(np.asarray(levels)[:, idx], self.standardizer.transform(X_raw))

    def linear_predictor_draws(self, levels, X_raw, offset: float = 0.0) -> np.ndarray:
        """(draws x rows) or (draws x rows x J-1) linear predictors; the
        offset defaults to 0, i.e. the representative protocol."""
        model = PosteriorModel(self.spec)
        design = self._design(levels, X_raw)
        return np.stack([model.linear_predictor(th, design, offset) for th in self.draws.draws])

    def probabilities(self, levels, X_raw) -> np.ndarray:
        """Choice probabilities, (draws x rows x J') where J' is 1 for a
        Bernoulli model and J for a multinomial one."""
        eta = self.linear_predictor_draws(levels, X_raw, 0.0)
        if self.spec.likelihood == BERNOULLI:
            return expit(eta)[:, :, None]
        full = np.concatenate([eta, np.zeros(eta.shape[:2] + (1,))], axis=2)
        return softmax(full, axis=2)

    @property
    def modeled_choices(self) -> tuple[str, ...]:
        if self.spec.likelihood == BERNOULLI:
            return (self.spec.choices[self.spec.choice],)
        return self.spec.choices

    def save(self, stem) -> None:
        stem = Path(stem)
        save_draws(self.draws, stem)
        with open(stem.with_name(stem.name + ".model.json"), "w") as fh:
            json.dump({"spec": self.spec.to_dict(), "standardizer": self.standardizer.to_dict(),
                       "schema_names": list(self.schema_names), "n_obs": self.n_obs,
                       "meta": self.meta}, fh, indent=2)

    @classmethod
    def load(cls, stem) -> "FittedModel":
        stem = Path(stem)
        with open(stem.with_name(stem.name + ".model.json")) as fh:
            d = json.load(fh)
        return cls(ModelSpec.from_dict(d["spec"]), Standardizer.from_dict(d["standardizer"]),
                   load_draws(stem), tuple(d["schema_names"]), d.get("n_obs", 0), d.get("meta", {}))


def build_model(survey: SurveyDataset, covariates: CovariateTables | None = None,
                graph: AdjacencyGraph | None = None, likelihood: str = BERNOULLI,
                choice: str | None = None, structured: bool = True, offset: float = 0.0,
                attributes=None):
    """Spec, standardizer and posterior for ``survey``.

    Every schema attribute is modeled unless ``attributes`` restricts them.
    """
    schema: Schema = survey.schema
    attributes = tuple(schema.names if attributes is None else attributes)
    comps = default_components(schema, graph, attributes, structured)
    levels, X_raw = survey_design_inputs(survey, covariates)
    std = Standardizer.fit(X_raw)
    names = covariates.names if covariates is not None else ()
    spec = ModelSpec(likelihood=likelihood, choices=schema.choices, components=comps,
                     fixed_names=tuple(names),
                     choice=schema.choice_index(choice) if likelihood == BERNOULLI else None,
                     offset=offset, structured=structured)
    idx = [schema.names.index(a) for a in attributes]
    design = DesignMatrix(levels[:, idx], std.transform(X_raw))
    data = ModelData.from_rows(design, survey.choice, len(schema.choices))
    return spec, std, PosteriorModel(spec, data)


def fit(survey: SurveyDataset, covariates: CovariateTables | None = None,
        graph: AdjacencyGraph | None = None, likelihood: str = BERNOULLI,
        choice: str | None = None, structured: bool = True, offset: float = 0.0,
        sampler: SamplerConfig | None = None, attributes=None) -> FittedModel:
    """Fit one model; Bernoulli models need ``choice`` (a label)."""
    sampler = sampler or SamplerConfig()
    spec, std, model = build_model(survey, covariates, graph, likelihood, choice,
                                   structured, offset, attributes)
    draws = run_chains(model, sampler)
    return FittedModel(spec, std, draws, survey.schema.names, survey.n,
                       {"offset": offset, "likelihood": likelihood, "choice": choice})
