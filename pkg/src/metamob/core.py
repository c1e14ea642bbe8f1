"""Shared data model: IPD datasets, trees, model variants and fitted objects."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

REQUIRED_COLUMNS = ("y", "trt", "trial")


class DataError(ValueError):
    """Malformed input data; the message carries row/column context."""


class ModelSpec(enum.Enum):
    """Node model variant.

    M0: ``gamma_j + theta_j t`` (plain MOB).
    M1: M0 plus a random trial intercept (MOB-RI).
    M2: M1 plus an independent random treatment slope (metaMOB-RI).
    M3: per-trial fixed intercepts ``gamma_jk`` plus a random slope (metaMOB-SI).
    """

    M0 = "M0"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"

    @property
    def random_intercept(self) -> bool:
        return self in (ModelSpec.M1, ModelSpec.M2)

    @property
    def random_slope(self) -> bool:
        return self in (ModelSpec.M2, ModelSpec.M3)

    @property
    def stratified(self) -> bool:
        return self is ModelSpec.M3

    @property
    def n_components(self) -> int:
        return int(self.random_intercept) + int(self.random_slope)

    @property
    def method(self) -> str:
        return _SPEC_TO_METHOD[self]

    @classmethod
    def from_method(cls, name: str) -> "ModelSpec":
        try:
            return _METHOD_TO_SPEC[name.lower()]
        except KeyError:
            raise ValueError(f"unknown method {name!r}; choose from {sorted(_METHOD_TO_SPEC)}") from None


_METHOD_TO_SPEC = {"mob": ModelSpec.M0, "mob-ri": ModelSpec.M1,
                   "metamob-ri": ModelSpec.M2, "metamob-si": ModelSpec.M3}
_SPEC_TO_METHOD = {v: k for k, v in _METHOD_TO_SPEC.items()}
METHODS = tuple(_METHOD_TO_SPEC)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IpdDataset:
    """Pooled subject-level data from K trials.

    ``trial`` holds ids ``1..K``; every id must occur.
    """

    y: np.ndarray
    trt: np.ndarray
    trial: np.ndarray
    X: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        y = _frozen(self.y, float)
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X.setflags(write=False)
        n = len(y)
        if n < 1:
            raise DataError("dataset is empty")
        trt_raw = np.asarray(self.trt)
        trial_raw = np.asarray(self.trial)
        if not (len(trt_raw) == len(trial_raw) == X.shape[0] == n):
            raise DataError(f"column lengths differ: y={n}, trt={len(trt_raw)}, "
                            f"trial={len(trial_raw)}, X={X.shape[0]}")
        if not np.all(np.isin(trt_raw, (0, 1))):
            raise DataError("trt must contain only 0 and 1")
        if np.any(~np.isfinite(y)) or np.any(~np.isfinite(X)):
            raise DataError("missing or non-finite values are not supported")
        if np.any(trial_raw != np.round(trial_raw)):
            raise DataError("trial ids must be integers")
        trial = _frozen(trial_raw, int)
        K = int(trial.max())
        if trial.min() < 1 or len(np.unique(trial)) != K:
            raise DataError(f"trial ids must cover 1..{K} with every id present")
        names = tuple(self.covariate_names) or tuple(f"X{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError("covariate_names does not match the number of covariates")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "trt", _frozen(trt_raw, int))
        object.__setattr__(self, "trial", trial)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return int(self.trial.max())

    def trial_sizes(self) -> np.ndarray:
        return np.bincount(self.trial, minlength=self.K + 1)[1:]

    def with_y(self, y) -> "IpdDataset":
        return IpdDataset(y, self.trt, self.trial, self.X, self.covariate_names)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "IpdDataset":
        """Read a CSV with header; columns ``y``, ``trt``, ``trial`` plus covariates."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            if missing:
                raise DataError(f"{path}: missing required column(s) {missing}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                vals = []
                for col, cell in zip(header, row):
                    try:
                        v = float(cell)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: column {col!r}: not a number: {cell!r}") from None
                    if not math.isfinite(v):
                        raise DataError(f"{path}:{lineno}: column {col!r}: missing or non-finite value")
                    vals.append(v)
                rows.append(vals)
        if not rows:
            raise DataError(f"{path}: no data rows")
        data = np.array(rows)
        col = {name: i for i, name in enumerate(header)}
        cov = [c for c in header if c not in REQUIRED_COLUMNS]
        X = data[:, [col[c] for c in cov]] if cov else np.empty((len(data), 0))
        for name in ("trt", "trial"):
            bad = np.nonzero(data[:, col[name]] != np.round(data[:, col[name]]))[0]
            if len(bad):
                raise DataError(f"{path}:{bad[0] + 2}: column {name!r}: expected an integer")
        bad = np.nonzero(~np.isin(data[:, col["trt"]], (0, 1)))[0]
        if len(bad):
            raise DataError(f"{path}:{bad[0] + 2}: column 'trt': expected 0 or 1")
        return cls(data[:, col["y"]], data[:, col["trt"]].astype(int),
                   data[:, col["trial"]].astype(int), X, tuple(cov))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(REQUIRED_COLUMNS) + list(self.covariate_names))
            for i in range(self.n):
                w.writerow([repr(float(self.y[i])), int(self.trt[i]), int(self.trial[i])]
                           + [repr(float(v)) for v in self.X[i]])


# ---------------------------------------------------------------- trees

@dataclass(frozen=True)
class InternalNode:
    split_var: int
    cutpoint: float
    left: int
    right: int


@dataclass(frozen=True)
class TerminalNode:
    node_id: int
    gamma: Union[float, tuple]
    theta: float
    n_obs: int


@dataclass(frozen=True)
class Tree:
    """Binary partition stored as a node arena; ``nodes[0]`` is the root.

    Observations go left iff ``x[split_var] <= cutpoint``.  Terminal ids run
    1..J in left-to-right depth-first order.
    """

    nodes: tuple
    covariate_names: tuple

    def __post_init__(self):
        ids = [nd.node_id for nd in self.terminals()]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError("terminal ids must be 1..J in depth-first order")

    def _walk(self, i=0):
        nd = self.nodes[i]
        yield nd
        if isinstance(nd, InternalNode):
            yield from self._walk(nd.left)
            yield from self._walk(nd.right)

    def terminals(self) -> list:
        return [nd for nd in self._walk() if isinstance(nd, TerminalNode)]

    @property
    def n_terminals(self) -> int:
        return sum(isinstance(nd, TerminalNode) for nd in self.nodes)

    def predict(self, X) -> np.ndarray:
        """Terminal id for every row of ``X``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.covariate_names):
            raise ValueError(f"expected an array with {len(self.covariate_names)} columns")
        out = np.empty(len(X), dtype=int)

        def route(i, rows):
            nd = self.nodes[i]
            if isinstance(nd, TerminalNode):
                out[rows] = nd.node_id
                return
            go_left = X[rows, nd.split_var] <= nd.cutpoint
            route(nd.left, rows[go_left])
            route(nd.right, rows[~go_left])

        route(0, np.arange(len(X)))
        return out

    def structure(self) -> tuple:
        """Hashable description of the splits only (ignores terminal parameters)."""
        def key(i):
            nd = self.nodes[i]
            if isinstance(nd, TerminalNode):
                return ()
            return (nd.split_var, nd.cutpoint, key(nd.left), key(nd.right))
        return key(0)

    def splits(self) -> list:
        """``(depth, split_var, cutpoint)`` in depth-first order."""
        out = []

        def visit(i, depth):
            nd = self.nodes[i]
            if isinstance(nd, InternalNode):
                out.append((depth, nd.split_var, nd.cutpoint))
                visit(nd.left, depth + 1)
                visit(nd.right, depth + 1)

        visit(0, 0)
        return out

    def with_params(self, gamma: Sequence, theta: Sequence, n_obs: Optional[Sequence] = None) -> "Tree":
        """Copy of the tree with new terminal parameters, indexed by node id - 1."""
        nodes = []
        for nd in self.nodes:
            if isinstance(nd, TerminalNode):
                j = nd.node_id - 1
                g = gamma[j]
                g = tuple(float(v) for v in g) if np.ndim(g) else float(g)
                nd = TerminalNode(nd.node_id, g, float(theta[j]),
                                  nd.n_obs if n_obs is None else int(n_obs[j]))
            nodes.append(nd)
        return Tree(tuple(nodes), self.covariate_names)

    def to_dict(self) -> dict:
        def enc(i):
            nd = self.nodes[i]
            if isinstance(nd, TerminalNode):
                g = nd.gamma
                if isinstance(g, tuple):
                    g = [None if math.isnan(v) else v for v in g]
                return {"node_id": nd.node_id, "gamma": g, "theta": nd.theta, "n_obs": nd.n_obs}
            return {"split_var": self.covariate_names[nd.split_var], "cutpoint": nd.cutpoint,
                    "left": enc(nd.left), "right": enc(nd.right)}
        return {"covariates": list(self.covariate_names), "root": enc(0)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Tree":
        names = tuple(doc["covariates"])
        index = {n: i for i, n in enumerate(names)}
        nodes: list = []

        def dec(d):
            slot = len(nodes)
            nodes.append(None)
            if "split_var" in d:
                left = dec(d["left"])
                right = dec(d["right"])
                nodes[slot] = InternalNode(index[d["split_var"]], float(d["cutpoint"]), left, right)
            else:
                g = d["gamma"]
                g = tuple(float(v) if v is not None else math.nan for v in g) if isinstance(g, list) else float(g)
                nodes[slot] = TerminalNode(int(d["node_id"]), g, float(d["theta"]), int(d["n_obs"]))
            return slot

        dec(doc["root"])
        return cls(tuple(nodes), names)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "Tree":
        return cls.from_dict(json.loads(text))


def build_tree(spec, covariate_names: Sequence[str]) -> Tree:
    """Build a :class:`Tree` from a nested description.

    ``spec`` is either a terminal ``{"gamma": .., "theta": .., "n_obs": ..}``
    or a split ``(var_index, cutpoint, left_spec, right_spec)``.  Terminal ids
    are assigned depth-first.
    """
    nodes: list = []
    counter = [0]

    def add(s):
        slot = len(nodes)
        nodes.append(None)
        if isinstance(s, dict):
            counter[0] += 1
            g = s.get("gamma", 0.0)
            g = tuple(float(v) for v in g) if np.ndim(g) else float(g)
            nodes[slot] = TerminalNode(counter[0], g, float(s.get("theta", 0.0)), int(s.get("n_obs", 0)))
        else:
            var, cut, left, right = s
            li = add(left)
            ri = add(right)
            nodes[slot] = InternalNode(int(var), float(cut), li, ri)
        return slot

    add(spec)
    return Tree(tuple(nodes), tuple(covariate_names))


def predict_node(tree: Tree, x_row) -> int:
    """Terminal id reached by a single covariate vector."""
    x_row = np.asarray(x_row, dtype=float)
    if x_row.shape != (len(tree.covariate_names),):
        raise ValueError(f"x_row must have length {len(tree.covariate_names)}")
    i = 0
    while True:
        nd = tree.nodes[i]
        if isinstance(nd, TerminalNode):
            return nd.node_id
        i = nd.left if x_row[nd.split_var] <= nd.cutpoint else nd.right


# ---------------------------------------------------------------- fitted objects

@dataclass(frozen=True)
class VarianceComponents:
    tau0_sq: float = 0.0
    tau1_sq: float = 0.0
    sigma_sq: float = 1.0


@dataclass(frozen=True, eq=False)
class RandomEffects:
    b0: np.ndarray
    b1: np.ndarray

    @classmethod
    def zeros(cls, K: int) -> "RandomEffects":
        return cls(np.zeros(K), np.zeros(K))

    def offset(self, trial, trt) -> np.ndarray:
        """Per-subject ``z_i' b``."""
        trial = np.asarray(trial) - 1
        return self.b0[trial] + self.b1[trial] * np.asarray(trt)


@dataclass(frozen=True, eq=False)
class LmmFit:
    """Mixed-model fit for a fixed node assignment.

    ``gamma`` has shape ``(J,)`` or ``(J, K)`` for the stratified model (NaN
    where a node holds no subjects of a trial).
    """

    gamma: np.ndarray
    theta: np.ndarray
    vc: VarianceComponents
    re: RandomEffects
    loglik: float
    reml_loglik: float
    converged: bool = True
    warnings: tuple = ()
    beta: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.theta)


def design_vectors(dataset: IpdDataset, assignment, spec: ModelSpec, n_nodes: Optional[int] = None):
    """Fixed-effect design ``X*`` and random-effect design ``Z``.

    ``X*`` holds node intercepts (node x trial intercepts for M3) followed by
    the node treatment columns.  ``Z`` holds trial indicators (columns 1..K)
    and trial x treatment indicators (columns K+1..2K) as the variant requires.
    """
    assignment = np.asarray(assignment, dtype=int)
    if assignment.shape != (dataset.n,):
        raise ValueError("assignment must have one node id per subject")
    J = int(assignment.max()) if n_nodes is None else n_nodes
    if assignment.min() < 1 or assignment.max() > J:
        raise ValueError(f"node ids must lie in 1..{J}")
    n, K = dataset.n, dataset.K
    rows = np.arange(n)
    node = assignment - 1
    trial = dataset.trial - 1
    trt = dataset.trt.astype(float)
    if spec.stratified:
        icpt = np.zeros((n, J * K))
        icpt[rows, node * K + trial] = 1.0
    else:
        icpt = np.zeros((n, J))
        icpt[rows, node] = 1.0
    slope = np.zeros((n, J))
    slope[rows, node] = trt
    Xs = np.hstack([icpt, slope])
    blocks = []
    onehot = np.zeros((n, K))
    onehot[rows, trial] = 1.0
    if spec.random_intercept:
        blocks.append(onehot)
    if spec.random_slope:
        blocks.append(onehot * trt[:, None])
    Z = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return Xs, Z
