"""Reference-based classification rules for histograms on a shared support.

Every rule scores the classes of a :class:`ReferenceSet` against one test
measure. Ties go to the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .coding import CodingProblem, build_problem, solve_lp, solve_qp
from .core import SupportModel, as_weights, stack_weights
from .ot import ibp_barycenter, shift_nonnegative, sinkhorn, sinkhorn_costs

RULES = ("1nn", "mad", "mbl", "mbl_qp", "mc")
TIE_RTOL = 1e-12
MC_TIE_RTOL = 1e-6


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    labels: tuple
    measures: np.ndarray
    class_of: np.ndarray

    @classmethod
    def from_classes(cls, classes, support: SupportModel | None = None) -> "ReferenceSet":
        """``classes`` is a sequence of (label, measures) or a mapping label -> measures."""
        items = list(classes.items()) if isinstance(classes, dict) else list(classes)
        labels, blocks, owner = [], [], []
        for k, (label, measures) in enumerate(items):
            W = stack_weights(measures, support)
            if W.shape[0] == 0:
                raise ValueError(f"class {label!r} has no references")
            labels.append(label)
            blocks.append(W)
            owner.extend([k] * W.shape[0])
        widths = {b.shape[1] for b in blocks}
        if len(widths) != 1:
            raise ValueError("all references must share one support")
        return cls(tuple(labels), np.vstack(blocks), np.asarray(owner))

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.class_of == k)

    def class_measures(self, k: int) -> np.ndarray:
        return self.measures[self.members(k)]


class Decision(NamedTuple):
    label: object
    index: int
    scores: np.ndarray
    rule: str


def _best(scores, minimize=True) -> int:
    s = np.asarray(scores, dtype=np.float64)
    target = s.min() if minimize else s.max()
    tol = TIE_RTOL * max(1.0, float(np.max(np.abs(s))))
    return int(np.flatnonzero(np.abs(s - target) <= tol)[0])


class TestCoding:
    """Per-test quantities shared by all rules: union coding problem over references."""

    __test__ = False

    def __init__(self, test, refs: ReferenceSet, support: SupportModel, iters: int,
                 estimator: str = "plan"):
        self.test = as_weights(test, support)
        self.refs = refs
        self.support = support
        self.iters = iters
        self.estimator = estimator
        self.problem: CodingProblem = build_problem(self.test, refs.measures, support, iters)
        self._class_qp = {}

    @property
    def distances(self) -> np.ndarray:
        """Entropic W2^2 from every reference to the test measure."""
        if self.estimator == "plan":
            return self.problem.cost
        # dual values can be negative; one common shift leaves every argmin alone
        raw = sinkhorn_costs(self.refs.measures, self.test[None], self.support, self.iters, self.estimator)
        return shift_nonnegative(raw)

    def union_weights(self) -> np.ndarray:
        """QP weights over all references, ties among minimizers broken by transport cost.

        The QP minimizer is not unique when several reference mixtures reproduce
        the test equally well (e.g. Dirac references, where only the mean counts);
        among those, keep the one with the smallest cost, as the LP would.
        """
        qp = solve_qp(self.problem)
        tau = qp.objective * (1.0 + MC_TIE_RTOL) + 1e-12
        return solve_lp(self.problem, tau).lam

    def class_qp(self, k: int):
        if k not in self._class_qp:
            self._class_qp[k] = solve_qp(self.problem.restrict(self.refs.members(k)))
        return self._class_qp[k]


def _scores(rule: str, tc: TestCoding) -> np.ndarray:
    refs = tc.refs
    K = refs.n_classes
    if rule == "1nn":
        return np.array([tc.distances[refs.members(k)].min() for k in range(K)])
    if rule == "mad":
        return np.array([tc.distances[refs.members(k)].mean() for k in range(K)])
    if rule == "mbl":
        out = np.empty(K)
        for k in range(K):
            bary = ibp_barycenter(refs.class_measures(k), tc.class_qp(k).lam, tc.support, tc.iters)
            out[k] = sinkhorn(bary, tc.test, tc.support, tc.iters, tc.estimator).cost_estimate
        return shift_nonnegative(out)
    if rule == "mbl_qp":
        return np.array([tc.class_qp(k).objective for k in range(K)])
    if rule == "mc":
        return np.bincount(refs.class_of, weights=tc.union_weights(), minlength=K)
    raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")


def decide(rule: str, tc: TestCoding) -> Decision:
    scores = _scores(rule, tc)
    k = _best(scores, minimize=rule != "mc")
    return Decision(tc.refs.labels[k], k, scores, rule)


def classify(test, refs: ReferenceSet, support: SupportModel, iters: int, rule: str,
             estimator: str = "plan") -> Decision:
    return decide(rule, TestCoding(test, refs, support, iters, estimator))


def classify_1nn(test, refs, support, iters):
    """Class of the nearest reference."""
    return classify(test, refs, support, iters, "1nn").label


def classify_mad(test, refs, support, iters):
    """Class with the smallest mean distance to the test measure."""
    return classify(test, refs, support, iters, "mad").label


def classify_mbl(test, refs, support, iters):
    """Class whose QP-weighted barycenter is closest to the test measure."""
    return classify(test, refs, support, iters, "mbl").label


def classify_mbl_qp(test, refs, support, iters):
    """Class with the smallest barycentric QP objective."""
    return classify(test, refs, support, iters, "mbl_qp").label


def classify_mc(test, refs, support, iters):
    """Class collecting the most QP weight when all references code the test jointly."""
    return classify(test, refs, support, iters, "mc").label


def classify_batch(tests, refs: ReferenceSet, support: SupportModel, iters: int, rules=RULES,
                   test_ids=None) -> list[dict]:
    """Rows of (test id, rule, predicted label, per-class scores) for every test and rule."""
    tests = stack_weights(tests, support)
    ids = list(range(tests.shape[0])) if test_ids is None else list(test_ids)
    rows = []
    for tid, t in zip(ids, tests):
        tc = TestCoding(t, refs, support, iters)
        for rule in rules:
            d = decide(rule, tc)
            row = {"test_id": tid, "rule": rule, "predicted": d.label}
            row.update({f"score_{lab}": float(v) for lab, v in zip(refs.labels, d.scores)})
            rows.append(row)
    return rows
