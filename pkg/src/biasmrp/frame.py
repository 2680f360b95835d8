"""
Stratification frames, survey datasets, area adjacency and covariate tables.

All level ids are 1-based in files and 0-based in memory. Loaded objects
hold read-only numpy arrays and can be shared freely between threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DataValidationError

WEIGHT_COLUMN = "weight"
CHOICE_COLUMN = "choice"

US_STATES = (
    "Alabama", "Alaska", "Arizona", "Arkansas", "California", "Colorado",
    "Connecticut", "Delaware", "District of Columbia", "Florida", "Georgia",
    "Hawaii", "Idaho", "Illinois", "Indiana", "Iowa", "Kansas", "Kentucky",
    "Louisiana", "Maine", "Maryland", "Massachusetts", "Michigan", "Minnesota",
    "Mississippi", "Missouri", "Montana", "Nebraska", "Nevada", "New Hampshire",
    "New Jersey", "New Mexico", "New York", "North Carolina", "North Dakota",
    "Ohio", "Oklahoma", "Oregon", "Pennsylvania", "Rhode Island",
    "South Carolina", "South Dakota", "Tennessee", "Texas", "Utah", "Vermont",
    "Virginia", "Washington", "West Virginia", "Wisconsin", "Wyoming",
)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Attribute:
    """A categorical attribute. Labels, when given, take precedence over ids
    when parsing file values."""

    name: str
    cardinality: int
    ordinal: bool = False
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.cardinality < 2:
            raise DataValidationError(f"attribute {self.name!r}: cardinality must be >= 2")
        if self.labels is not None:
            if len(self.labels) != self.cardinality:
                raise DataValidationError(f"attribute {self.name!r}: {len(self.labels)} labels "
                                          f"for cardinality {self.cardinality}")
            if len(set(self.labels)) != len(self.labels):
                raise DataValidationError(f"attribute {self.name!r}: duplicate labels")

    def parse(self, value: str) -> int:
        """Return the 0-based level for a file value (label or 1-based id)."""
        value = value.strip()
        if self.labels is not None and value in self.labels:
            return self.labels.index(value)
        try:
            level = int(value)
        except ValueError:
            raise DataValidationError(
                f"attribute {self.name!r}: unknown level {value!r}") from None
        if not 1 <= level <= self.cardinality:
            raise DataValidationError(
                f"attribute {self.name!r}: level {level} outside 1..{self.cardinality}")
        return level - 1

    def format(self, level: int) -> str:
        if self.labels is not None:
            return self.labels[level]
        return str(level + 1)


@dataclass(frozen=True)
class Schema:
    """Layout of attributes, continuous covariates and the choice set.

    ``area`` names the attribute carrying the spatial structure and ``time``
    the day attribute; the time attribute lives on survey rows only, never on
    frame cells.
    """

    attributes: tuple[Attribute, ...]
    choices: tuple[str, ...]
    area: str = "state"
    time: str | None = "day"
    state_covariates: tuple[str, ...] = ()
    day_covariates: tuple[str, ...] = ()
    state_day_covariates: tuple[str, ...] = ()

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise DataValidationError("attribute names must be unique")
        if len(self.choices) < 2:
            raise DataValidationError("choice set needs at least 2 options")
        if len(set(self.choices)) != len(self.choices):
            raise DataValidationError("choice labels must be unique")
        if self.area not in names:
            raise DataValidationError(f"area attribute {self.area!r} not in schema")
        if self.time is not None and self.time not in names:
            raise DataValidationError(f"time attribute {self.time!r} not in schema")
        cov = self.covariate_names
        if len(set(cov)) != len(cov):
            raise DataValidationError("covariate names must be unique")

    def attribute(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def cell_attributes(self) -> tuple[Attribute, ...]:
        return tuple(a for a in self.attributes if a.name != self.time)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.state_covariates + self.day_covariates + self.state_day_covariates

    @property
    def n_areas(self) -> int:
        return self.attribute(self.area).cardinality

    @property
    def n_days(self) -> int:
        return self.attribute(self.time).cardinality if self.time else 0

    def choice_index(self, label: str) -> int:
        label = label.strip()
        if label in self.choices:
            return self.choices.index(label)
        raise DataValidationError(f"unknown choice label {label!r}")

    def to_dict(self) -> dict:
        return {
            "attributes": [
                {"name": a.name, "cardinality": a.cardinality, "ordinal": a.ordinal,
                 "labels": list(a.labels) if a.labels else None}
                for a in self.attributes
            ],
            "choices": list(self.choices),
            "area": self.area,
            "time": self.time,
            "state_covariates": list(self.state_covariates),
            "day_covariates": list(self.day_covariates),
            "state_day_covariates": list(self.state_day_covariates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        attrs = tuple(
            Attribute(a["name"], int(a["cardinality"]), bool(a.get("ordinal", False)),
                      tuple(a["labels"]) if a.get("labels") else None)
            for a in d["attributes"]
        )
        return cls(
            attributes=attrs,
            choices=tuple(d["choices"]),
            area=d.get("area", "state"),
            time=d.get("time"),
            state_covariates=tuple(d.get("state_covariates", ())),
            day_covariates=tuple(d.get("day_covariates", ())),
            state_day_covariates=tuple(d.get("state_day_covariates", ())),
        )


def election_schema(n_days: int = 30) -> Schema:
    """The 2020 US presidential election layout: 51 areas, six individual
    attributes, 30 days to election and twelve continuous covariates."""
    return Schema(
        attributes=(
            Attribute("state", 51, labels=US_STATES),
            Attribute("gender", 2, labels=("M", "F")),
            Attribute("ethnicity", 5, labels=("White", "Black", "Hispanic", "Asian", "Other")),
            Attribute("age", 6, ordinal=True,
                      labels=("18-24", "25-34", "35-44", "45-54", "55-64", "65+")),
            Attribute("college_degree", 2, labels=("0", "1")),
            Attribute("income", 5, ordinal=True,
                      labels=("0-25k", "25-50k", "50-75k", "75-100k", "100k+")),
            Attribute("vote2016", 4, labels=("R", "D", "other", "stay home")),
            Attribute("day", n_days, ordinal=True),
        ),
        choices=("R", "D", "L", "G", "stay home"),
        area="state",
        time="day",
        state_covariates=("share2016", "share2012", "pct_white", "pct_evangelical",
                          "pct_college", "region_midwest", "region_northeast",
                          "region_south", "region_west"),
        day_covariates=("economic_index", "incumbent_approval"),
        state_day_covariates=("covid_deaths",),
    )


def _read_rows(path) -> tuple[list[str], list[dict[str, str]]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        rows = [{(k or "").strip(): (v if v is not None else "") for k, v in r.items()}
                for r in reader]
    return header, rows


@dataclass(frozen=True, eq=False)
class StratificationFrame:
    """Population cells: 0-based level ids (one column per cell attribute,
    in schema order) and nonnegative, possibly fractional, weights."""

    schema: Schema
    levels: np.ndarray
    weights: np.ndarray
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=float)
        attrs = self.schema.cell_attributes
        if levels.ndim != 2 or levels.shape[1] != len(attrs):
            raise DataValidationError("frame levels must be (cells x cell attributes)")
        if weights.shape != (levels.shape[0],):
            raise DataValidationError("one weight per cell required")
        for k, a in enumerate(attrs):
            col = levels[:, k]
            if col.size and (col.min() < 0 or col.max() >= a.cardinality):
                raise DataValidationError(f"attribute {a.name!r}: level outside domain")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise DataValidationError("weights must be finite and nonnegative")
        if not weights.sum() > 0:
            raise DataValidationError("total weight must be positive")
        index = {}
        for m, key in enumerate(map(tuple, levels.tolist())):
            if key in index:
                raise DataValidationError(f"duplicate cell key {key} (rows {index[key] + 1} and {m + 1})")
            index[key] = m
        object.__setattr__(self, "levels", _readonly(levels))
        object.__setattr__(self, "weights", _readonly(weights))
        object.__setattr__(self, "_index", index)

    @property
    def n_cells(self) -> int:
        return self.levels.shape[0]

    @property
    def total_weight(self) -> float:
        return math.fsum(self.weights.tolist())

    def column(self, name: str) -> np.ndarray:
        names = [a.name for a in self.schema.cell_attributes]
        return self.levels[:, names.index(name)]

    def lookup(self, key: tuple[int, ...]) -> int:
        try:
            return self._index[tuple(int(k) for k in key)]
        except KeyError:
            raise DataValidationError(f"cell not found for attribute tuple {key}") from None

    def summary(self) -> dict:
        return {"cells": self.n_cells, "total_weight": self.total_weight,
                "areas_present": int(np.unique(self.column(self.schema.area)).size)}


def load_frame(path, schema: Schema) -> StratificationFrame:
    """Read a ``cells.csv`` frame: one column per cell attribute plus ``weight``."""
    header, rows = _read_rows(path)
    attrs = schema.cell_attributes
    missing = [c for c in [a.name for a in attrs] + [WEIGHT_COLUMN] if c not in header]
    if missing:
        raise DataValidationError(f"frame {path}: missing column(s) {', '.join(missing)}")
    if not rows:
        raise DataValidationError(f"frame {path}: no cells")
    levels = np.empty((len(rows), len(attrs)), dtype=np.int64)
    weights = np.empty(len(rows))
    for i, row in enumerate(rows):
        try:
            for k, a in enumerate(attrs):
                levels[i, k] = a.parse(row[a.name])
            w = float(row[WEIGHT_COLUMN])
        except (DataValidationError, ValueError) as exc:
            raise DataValidationError(f"frame {path} row {i + 2}: {exc}") from None
        if not math.isfinite(w) or w < 0:
            raise DataValidationError(f"frame {path} row {i + 2}: negative or non-finite weight {w}")
        weights[i] = w
    return StratificationFrame(schema, levels, weights)


def write_frame(frame: StratificationFrame, path) -> None:
    attrs = frame.schema.cell_attributes
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([a.name for a in attrs] + [WEIGHT_COLUMN])
        for lv, wt in zip(frame.levels.tolist(), frame.weights.tolist()):
            w.writerow([a.format(v) for a, v in zip(attrs, lv)] + [repr(float(wt))])


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Respondents: 0-based choice, 0-based levels for every schema attribute
    (schema order) and, when validated against a frame, their cell ids."""

    schema: Schema
    choice: np.ndarray
    levels: np.ndarray
    cells: np.ndarray | None = None
    dropped: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        choice = np.asarray(self.choice, dtype=np.int64)
        levels = np.asarray(self.levels, dtype=np.int64).reshape(len(choice), -1)
        if choice.size == 0:
            raise DataValidationError("no respondents")
        if levels.shape[1] != len(self.schema.attributes):
            raise DataValidationError("survey levels must cover every schema attribute")
        if choice.min() < 0 or choice.max() >= len(self.schema.choices):
            raise DataValidationError("choice id outside choice set")
        for k, a in enumerate(self.schema.attributes):
            if levels[:, k].min() < 0 or levels[:, k].max() >= a.cardinality:
                raise DataValidationError(f"attribute {a.name!r}: level outside domain")
        object.__setattr__(self, "choice", _readonly(choice))
        object.__setattr__(self, "levels", _readonly(levels))
        if self.cells is not None:
            object.__setattr__(self, "cells", _readonly(np.asarray(self.cells, dtype=np.int64)))

    @property
    def n(self) -> int:
        return self.choice.size

    def column(self, name: str) -> np.ndarray:
        return self.levels[:, self.schema.names.index(name)]

    def cell_keys(self) -> np.ndarray:
        idx = [self.schema.names.index(a.name) for a in self.schema.cell_attributes]
        return self.levels[:, idx]

    def subset(self, rows) -> "SurveyDataset":
        rows = np.asarray(rows)
        return SurveyDataset(self.schema, self.choice[rows], self.levels[rows],
                             None if self.cells is None else self.cells[rows])


def cell_index(frame: StratificationFrame, respondent) -> int:
    """0-based frame cell id for a respondent's cell-attribute tuple.

    ``respondent`` is either a mapping ``{attribute: level}`` (0-based) or a
    sequence of 0-based levels in ``frame.schema.cell_attributes`` order.
    """
    if isinstance(respondent, dict):
        key = tuple(respondent[a.name] for a in frame.schema.cell_attributes)
    else:
        key = tuple(respondent)
    return frame.lookup(key)


def load_survey(path, schema: Schema, frame: StratificationFrame | None = None) -> SurveyDataset:
    """Read ``survey.csv``. Invalid rows are dropped and reported in
    ``SurveyDataset.dropped`` as ``(file line, reason)`` pairs."""
    header, rows = _read_rows(path)
    missing = [c for c in (CHOICE_COLUMN,) + schema.names if c not in header]
    if missing:
        raise DataValidationError(f"survey {path}: missing column(s) {', '.join(missing)}")
    choice, levels, cells, dropped = [], [], [], []
    for i, row in enumerate(rows):
        line = i + 2
        try:
            j = schema.choice_index(row[CHOICE_COLUMN])
            lv = [a.parse(row[a.name]) for a in schema.attributes]
        except DataValidationError as exc:
            dropped.append((line, str(exc)))
            continue
        m = None
        if frame is not None:
            key = tuple(lv[schema.names.index(a.name)] for a in schema.cell_attributes)
            try:
                m = frame.lookup(key)
            except DataValidationError as exc:
                dropped.append((line, str(exc)))
                continue
        choice.append(j)
        levels.append(lv)
        cells.append(m)
    if not choice:
        raise DataValidationError(f"survey {path}: no respondents")
    return SurveyDataset(schema, np.array(choice), np.array(levels),
                         np.array(cells) if frame is not None else None, tuple(dropped))


def write_survey(survey: SurveyDataset, path) -> None:
    schema = survey.schema
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([CHOICE_COLUMN] + list(schema.names))
        for j, lv in zip(survey.choice.tolist(), survey.levels.tolist()):
            w.writerow([schema.choices[j]] + [a.format(v) for a, v in zip(schema.attributes, lv)])


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Undirected graph over ``n_nodes`` areas with 0-based edges
    ``node1 < node2``. Components are labelled in order of their smallest
    node, so labels do not depend on edge order."""

    n_nodes: int
    edges: np.ndarray
    components: np.ndarray = field(init=False)
    component_sizes: np.ndarray = field(init=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.n_nodes:
                raise DataValidationError(f"edge node id outside 1..{self.n_nodes}")
            if np.any(edges[:, 0] == edges[:, 1]):
                bad = edges[edges[:, 0] == edges[:, 1]][0, 0] + 1
                raise DataValidationError(f"self-loop at node {bad}")
            edges = np.sort(edges, axis=1)
            edges = np.unique(edges, axis=0)
        n = self.n_nodes
        adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
        _, raw = connected_components(adj, directed=False)
        # relabel by first appearance in node order
        _, first = np.unique(raw, return_index=True)
        order = np.argsort(first)
        relabel = np.empty_like(order)
        relabel[order] = np.arange(order.size)
        comp = relabel[raw]
        object.__setattr__(self, "edges", _readonly(edges))
        object.__setattr__(self, "components", _readonly(comp))
        object.__setattr__(self, "component_sizes", _readonly(np.bincount(comp)))

    @property
    def n_components(self) -> int:
        return self.component_sizes.size

    @property
    def islands(self) -> np.ndarray:
        return self.component_sizes[self.components] == 1

    @property
    def node1(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def node2(self) -> np.ndarray:
        return self.edges[:, 1]

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def adjacency_matrix(self) -> np.ndarray:
        A = np.zeros((self.n_nodes, self.n_nodes))
        A[self.edges[:, 0], self.edges[:, 1]] = 1.0
        A[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return A

    def laplacian(self) -> np.ndarray:
        """Dense read-only graph Laplacian ``D - A`` (cached)."""
        Q = self.__dict__.get("_laplacian")
        if Q is None:
            A = self.adjacency_matrix()
            Q = _readonly(np.diag(A.sum(axis=1)) - A)
            object.__setattr__(self, "_laplacian", Q)
        return Q


def load_adjacency(path, n_nodes: int) -> AdjacencyGraph:
    """Read ``edges.csv`` with 1-based ``node1,node2`` columns."""
    header, rows = _read_rows(path)
    if "node1" not in header or "node2" not in header:
        raise DataValidationError(f"adjacency {path}: need node1,node2 columns")
    edges = []
    for i, row in enumerate(rows):
        try:
            a, b = int(row["node1"]), int(row["node2"])
        except ValueError:
            raise DataValidationError(f"adjacency {path} row {i + 2}: non-integer node id") from None
        if not (1 <= a <= n_nodes and 1 <= b <= n_nodes):
            raise DataValidationError(f"adjacency {path} row {i + 2}: node id outside 1..{n_nodes}")
        edges.append((a - 1, b - 1))
    return AdjacencyGraph(n_nodes, np.array(edges, dtype=np.int64).reshape(-1, 2))


def write_adjacency(graph: AdjacencyGraph, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node1", "node2"])
        for a, b in graph.edges.tolist():
            w.writerow([a + 1, b + 1])


@dataclass(frozen=True, eq=False)
class CovariateTables:
    """Continuous covariates at state, day and state-by-day level.

    Arrays: ``state`` (L x Ps), ``day`` (D x Pd), ``state_day`` (L x D x Psd).
    """

    state: np.ndarray
    day: np.ndarray
    state_day: np.ndarray
    state_names: tuple[str, ...] = ()
    day_names: tuple[str, ...] = ()
    state_day_names: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("state", "day", "state_day"):
            a = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise DataValidationError(f"{name} covariates contain non-finite values")
            object.__setattr__(self, name, _readonly(a))

    @property
    def names(self) -> tuple[str, ...]:
        return self.state_names + self.day_names + self.state_day_names

    def rows(self, area: np.ndarray, day: np.ndarray | None) -> np.ndarray:
        """Raw covariate matrix for 0-based area/day ids."""
        area = np.asarray(area)
        cols = [self.state[area]] if self.state_names else []
        if self.day_names or self.state_day_names:
            if day is None:
                raise DataValidationError("day-level covariates need a day id")
            day = np.broadcast_to(np.asarray(day), area.shape)
            if day.size and (day.min() < 0 or day.max() >= self.day.shape[0]):
                raise DataValidationError("missing day-level covariates for requested day")
            if self.day_names:
                cols.append(self.day[day])
            if self.state_day_names:
                cols.append(self.state_day[area, day])
        if not cols:
            return np.zeros((area.size, 0))
        return np.hstack(cols)

    @classmethod
    def empty(cls, n_areas: int, n_days: int = 0) -> "CovariateTables":
        return cls(np.zeros((n_areas, 0)), np.zeros((n_days, 0)), np.zeros((n_areas, n_days, 0)))


def load_covariates(schema: Schema, state_path=None, day_path=None,
                    state_day_path=None) -> CovariateTables:
    """Read ``state.csv`` / ``day.csv`` / ``state_day.csv`` for the covariates
    the schema names. Every state and every modeled day must be present."""
    L, D = schema.n_areas, max(schema.n_days, 0)
    area = schema.attribute(schema.area)
    tables = {}
    specs = (
        ("state", state_path, schema.state_covariates, (schema.area,)),
        ("day", day_path, schema.day_covariates, ("day",)),
        ("state_day", state_day_path, schema.state_day_covariates, (schema.area, "day")),
    )
    for kind, path, names, keys in specs:
        shape = {"state": (L,), "day": (D,), "state_day": (L, D)}[kind]
        arr = np.full(shape + (len(names),), np.nan)
        if names:
            if path is None:
                raise DataValidationError(f"{kind} covariates {names} need a file")
            header, rows = _read_rows(path)
            missing = [c for c in keys + tuple(names) if c not in header]
            if missing:
                raise DataValidationError(f"{path}: missing column(s) {', '.join(missing)}")
            for i, row in enumerate(rows):
                try:
                    idx = []
                    for k in keys:
                        if k == schema.area:
                            idx.append(area.parse(row[k]))
                        else:
                            d = int(row[k])
                            if not 1 <= d <= D:
                                raise DataValidationError(f"day {d} outside 1..{D}")
                            idx.append(d - 1)
                    vals = [float(row[c]) for c in names]
                except (ValueError, DataValidationError) as exc:
                    raise DataValidationError(f"{path} row {i + 2}: {exc}") from None
                arr[tuple(idx)] = vals
            if np.isnan(arr).any():
                raise DataValidationError(f"{path}: incomplete coverage of {kind} keys")
        tables[kind] = arr
    return CovariateTables(tables["state"], tables["day"], tables["state_day"],
                           tuple(schema.state_covariates), tuple(schema.day_covariates),
                           tuple(schema.state_day_covariates))
