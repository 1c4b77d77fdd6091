"""Synthetic recovery and document classification experiments at desk scale.

Drivers write deterministic CSV/JSON artifacts; every job (seed, rho, trial)
draws its randomness from a seed derived from the job's coordinates, so results
do not depend on execution order or on the number of workers.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import io
from .classify import RULES, ReferenceSet, TestCoding, decide
from .core import SupportModel, derive_seed, grid_support, seeded_rng, stack_weights, uniform_simplex
from .documents import CorpusSpec, ingest_documents, synthetic_corpus
from .learn import FitConfig, fit, fit_with_restarts
from .ot import exact_nearest, exact_w2_matrix, ibp_barycenters

log = logging.getLogger(__name__)


class _DictConfig:
    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticSpec:
    """Per class: generating atoms (k x N) and the number of samples to draw."""

    classes: tuple
    seed: int = 0

    def __post_init__(self):
        classes = []
        for atoms, count in self.classes:
            A = stack_weights(atoms)
            if A.shape[0] < 1:
                raise ValueError("every class needs at least one generating atom")
            if int(count) < 1:
                raise ValueError("samples per class must be positive")
            classes.append((A, int(count)))
        if len({A.shape[1] for A, _ in classes}) != 1:
            raise ValueError("generating atoms must share one support")
        object.__setattr__(self, "classes", tuple(classes))

    @property
    def atoms(self) -> np.ndarray:
        return np.vstack([A for A, _ in self.classes])

    @property
    def atom_class(self) -> np.ndarray:
        return np.concatenate([np.full(A.shape[0], k) for k, (A, _) in enumerate(self.classes)])


class SyntheticData(NamedTuple):
    data: np.ndarray  # (n, N)
    true_weights: np.ndarray  # (n, total atoms); zero off the sample's class
    labels: np.ndarray  # (n,)


def generate_synthetic(spec: SyntheticSpec, support: SupportModel, iters: int,
                       sampler: str = "gaps") -> SyntheticData:
    """Barycenters of each class's atoms at weights drawn on the class simplex."""
    offsets = np.cumsum([0] + [A.shape[0] for A, _ in spec.classes])
    total = offsets[-1]
    data, weights, labels = [], [], []
    for k, (A, count) in enumerate(spec.classes):
        rng = seeded_rng(derive_seed(spec.seed, k))
        lam = uniform_simplex(rng, count, A.shape[0], method=sampler)
        data.append(ibp_barycenters(stack_weights(A, support), lam, support, iters))
        full = np.zeros((count, total))
        full[:, offsets[k]:offsets[k + 1]] = lam
        weights.append(full)
        labels.append(np.full(count, k))
    return SyntheticData(np.vstack(data), np.vstack(weights), np.concatenate(labels))


def grid_shape_atoms(size: int = 12, width: float = 0.07):
    """Six Gaussian blobs on a size x size grid, two per class.

    Class k owns the vertical segment x = 0.2 + 0.3 k, with blobs at its two ends
    (y = 0.2 and y = 0.8). Blobs are translates of each other, so their
    barycenters are blobs at the weighted mean position: class-k samples fill
    segment k. The middle segment lies inside the hull of the outer classes'
    atoms, which is what makes barycentric weights non-unique without the
    geometric regularizer.

    Returns (atoms (6, size*size), atom_class).
    """
    t = np.linspace(0.0, 1.0, size)
    Y, X = np.meshgrid(t, t, indexing="ij")
    shapes = []
    for k in range(3):
        for y in (0.2, 0.8):
            shapes.append(np.exp(-0.5 * (((X - 0.2 - 0.3 * k) / width) ** 2 + ((Y - y) / width) ** 2)))
    atoms = np.stack([s.ravel() / s.sum() for s in shapes])
    return atoms, np.repeat(np.arange(3), 2)


# --------------------------------------------------------------------------
# Matching and metrics
# --------------------------------------------------------------------------


class MatchResult(NamedTuple):
    permutation: np.ndarray  # learned atom j is matched to true atom permutation[j]
    total_cost: float
    costs: np.ndarray  # full exact W2^2 matrix (learned x truth)


def match_atoms(learned, truth, support: SupportModel) -> MatchResult:
    """Minimum exact-transport-cost bijection between learned and true atoms."""
    L = stack_weights(learned, support)
    T = stack_weights(truth, support)
    if L.shape[0] != T.shape[0]:
        raise ValueError(f"need equal atom counts, got {L.shape[0]} and {T.shape[0]}")
    C = exact_w2_matrix(L, T, support)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(L.shape[0], dtype=int)
    perm[rows] = cols
    return MatchResult(perm, float(C[rows, cols].sum()), C)


def sparsity_histogram(coefficients, threshold: float = 0.95) -> np.ndarray:
    """counts[k-1] = rows whose k largest entries are the fewest reaching ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    lam = np.atleast_2d(np.asarray(coefficients, dtype=np.float64))
    cs = np.cumsum(-np.sort(-lam, axis=1), axis=1)
    # roundoff slack so uniform rows reach threshold 1
    k = np.argmax(cs >= threshold - 1e-12, axis=1) + 1
    return np.bincount(k, minlength=lam.shape[1] + 1)[1:]


def mean_sparsity(histogram) -> float:
    h = np.asarray(histogram, dtype=np.float64)
    return float(np.arange(1, h.size + 1) @ h / h.sum())


def class_mass_confusion(coefficients, atom_class, sample_class, n_classes: int | None = None) -> np.ndarray:
    """Row-normalized mass that class-i samples place on class-j atoms.

    Rows of classes without samples are left at zero.
    """
    lam = np.atleast_2d(np.asarray(coefficients, dtype=np.float64))
    atom_class = list(atom_class)
    if any(c is None or (isinstance(c, (int, np.integer)) and c < 0) for c in atom_class):
        bad = [j for j, c in enumerate(atom_class) if c is None or c < 0]
        raise ValueError(f"unlabeled atoms {bad}")
    ac = np.asarray(atom_class, dtype=int)
    sc = np.asarray(sample_class, dtype=int)
    if ac.shape[0] != lam.shape[1] or sc.shape[0] != lam.shape[0]:
        raise ValueError("label counts do not match the coefficient matrix")
    K = int(max(ac.max(), sc.max()) + 1) if n_classes is None else n_classes
    onehot = np.zeros((lam.shape[1], K))
    onehot[np.arange(ac.size), ac] = 1.0
    per_sample = lam @ onehot  # (n, K)
    M = np.zeros((K, K))
    np.add.at(M, sc, per_sample)
    sums = M.sum(axis=1, keepdims=True)
    return np.divide(M, sums, out=np.zeros_like(M), where=sums > 0)


def diagonal_mass(confusion) -> float:
    """Mean diagonal entry over classes that have samples."""
    C = np.asarray(confusion)
    present = C.sum(axis=1) > 0
    return float(np.mean(np.diag(C)[present]))


def labels_from_matching(match: MatchResult, true_atom_class) -> np.ndarray:
    return np.asarray(true_atom_class)[match.permutation]


def labels_from_nearest_sample(atoms, data, sample_class, support: SupportModel, iters: int = 100) -> np.ndarray:
    """Class of the exact-W2^2 nearest training sample for each atom."""
    X = stack_weights(data, support)
    sc = np.asarray(sample_class)
    return np.array([sc[exact_nearest(a, X, support, iters)[0]] for a in stack_weights(atoms, support)])


# --------------------------------------------------------------------------
# Recovery experiment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RecoveryConfig(_DictConfig):
    grid: int = 12
    samples_per_class: int = 15
    rhos: tuple = (1e-3, 1e-1, 1e1)
    n_seeds: int = 1
    seed: int = 0
    epsilon: float | None = None
    sinkhorn_iters: int = 50
    outer_iters: int = 250
    learning_rate: float = 0.25
    restarts: int = 1
    nearest_labels: bool = True
    workers: int = 1


@dataclass
class RecoveryReport:
    records: list  # one dict per (seed, rho)
    sparsity: list  # rows (seed, rho, k, count)
    confusion: list  # rows (seed, rho, labeling, i, j, mass)
    matches: list  # rows (seed, rho, learned_atom, true_atom, cost)
    summary: dict

    def mean_over_seeds(self, key: str) -> dict:
        out = {}
        for r in self.records:
            out.setdefault(r["rho"], []).append(r[key])
        return {rho: float(np.mean(v)) for rho, v in out.items()}


def _recovery_job(args):
    cfg, seed_idx, rho = args
    support = grid_support((cfg.grid, cfg.grid), cfg.epsilon)
    atoms, atom_class = grid_shape_atoms(cfg.grid)
    data_seed = derive_seed(cfg.seed, seed_idx)
    spec = SyntheticSpec(tuple((atoms[atom_class == k], cfg.samples_per_class) for k in range(3)), data_seed)
    synth = generate_synthetic(spec, support, cfg.sinkhorn_iters)
    fit_cfg = FitConfig(rho=rho, outer_iters=cfg.outer_iters, sinkhorn_iters=cfg.sinkhorn_iters,
                        learning_rate=cfg.learning_rate, seed=derive_seed(cfg.seed, seed_idx, 1))
    runner = fit if cfg.restarts <= 1 else (lambda d, m, s, c: fit_with_restarts(d, m, s, c, cfg.restarts))
    res = runner(synth.data, atoms.shape[0], support, fit_cfg)
    match = match_atoms(res.dictionary, atoms, support)
    hist = sparsity_histogram(res.coefficients)
    conf = {"match": class_mass_confusion(res.coefficients, labels_from_matching(match, atom_class), synth.labels, 3)}
    if cfg.nearest_labels:
        nl = labels_from_nearest_sample(res.dictionary, synth.data, synth.labels, support)
        conf["nearest"] = class_mass_confusion(res.coefficients, nl, synth.labels, 3)
    return {
        "seed_idx": seed_idx, "rho": rho, "hist": hist, "conf": conf, "match": match,
        "final_loss": float(res.loss_trace[-1]), "usage": res.atom_usage,
    }


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def run_recovery_experiment(config: RecoveryConfig = RecoveryConfig(), out_dir=None) -> RecoveryReport:
    """Generate shape data, fit per rho, match atoms, and collect metrics."""
    jobs = [(config, s, float(rho)) for s in range(config.n_seeds) for rho in config.rhos]
    results = _run_jobs(_recovery_job, jobs, config.workers)
    records, sparsity, confusion, matches = [], [], [], []
    for r in results:
        rec = {
            "seed_idx": r["seed_idx"], "rho": r["rho"],
            "mean_sparsity": mean_sparsity(r["hist"]),
            "diag_mass_match": diagonal_mass(r["conf"]["match"]),
            "diag_mass_nearest": diagonal_mass(r["conf"]["nearest"]) if "nearest" in r["conf"] else None,
            "matched_cost": r["match"].total_cost,
            "final_loss": r["final_loss"],
            "atom_usage": r["usage"],
        }
        records.append(rec)
        for k, c in enumerate(r["hist"], start=1):
            sparsity.append({"seed_idx": r["seed_idx"], "rho": r["rho"], "k": k, "count": int(c)})
        for labeling, M in r["conf"].items():
            for i in range(M.shape[0]):
                for j in range(M.shape[1]):
                    confusion.append({"seed_idx": r["seed_idx"], "rho": r["rho"], "labeling": labeling,
                                      "sample_class": i, "atom_class": j, "mass": M[i, j]})
        m = r["match"]
        for j, t in enumerate(m.permutation):
            matches.append({"seed_idx": r["seed_idx"], "rho": r["rho"], "learned_atom": j,
                            "true_atom": int(t), "cost": m.costs[j, t]})
    report = RecoveryReport(records, sparsity, confusion, matches, {})
    keys = ["mean_sparsity", "diag_mass_match", "matched_cost"] + (["diag_mass_nearest"] if config.nearest_labels else [])
    report.summary = {
        "config": config.to_dict(),
        "per_rho": {repr(rho): {k: report.mean_over_seeds(k)[rho] for k in keys} for rho in map(float, config.rhos)},
    }
    if out_dir is not None:
        out = Path(out_dir)
        io.write_rows(out / "recovery_metrics.csv", records)
        io.write_rows(out / "recovery_sparsity.csv", sparsity)
        io.write_rows(out / "recovery_confusion.csv", confusion)
        io.write_rows(out / "recovery_matches.csv", matches)
        io.write_json(out / "recovery_summary.json", report.summary)
    return report


# --------------------------------------------------------------------------
# Document classification experiment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassificationConfig(_DictConfig):
    ref_counts: tuple = (1, 2, 4)
    rhos: tuple = (0.1,)
    trials: int = 10
    test_per_class: int = 4
    train_per_atom: int = 4
    seed: int = 0
    epsilon: float | None = None
    sinkhorn_iters: int = 25
    outer_iters: int = 100
    learning_rate: float = 0.25
    classify_iters: int | None = None
    rules: tuple = RULES
    corpus: dict | None = None  # CorpusSpec overrides for the bundled generator
    workers: int = 1


@dataclass
class ClassificationReport:
    trials: list  # rows (trial, source, rho, ref_count, rule, accuracy)
    table: list  # rows (source, rho, ref_count, rule, mean, std, trials)
    summary: dict

    def accuracy(self, source: str, rule: str, ref_count: int, rho=None) -> float:
        for row in self.table:
            if (row["source"], row["rule"], row["ref_count"]) == (source, rule, ref_count) and (
                source == "random" or row["rho"] == rho
            ):
                return row["mean"]
        raise KeyError((source, rule, ref_count, rho))


def _accuracy_rows(refs, tests, test_labels, support, iters, rules):
    correct = {r: 0 for r in rules}
    for t, y in zip(tests, test_labels):
        tc = TestCoding(t, refs, support, iters)
        for rule in rules:
            correct[rule] += int(decide(rule, tc).label == y)
    return {r: correct[r] / len(tests) for r in rules}


def _classification_job(args):
    cfg, corpus, trial = args
    docs, labels, embeddings = corpus
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    rng = seeded_rng(derive_seed(cfg.seed, trial))
    max_train = cfg.train_per_atom * max(cfg.ref_counts)
    test_idx, pools = [], {}
    for k in classes:
        idx = rng.permutation(np.flatnonzero(labels == k))
        if idx.size < cfg.test_per_class + max_train:
            raise ValueError(f"class {k} has {idx.size} documents; need {cfg.test_per_class + max_train}")
        test_idx.extend(idx[: cfg.test_per_class].tolist())
        pools[k] = idx[cfg.test_per_class: cfg.test_per_class + max_train]
    train_all = np.concatenate([pools[k] for k in classes])
    train = ingest_documents([docs[i] for i in train_all], embeddings, epsilon=cfg.epsilon)
    support = train.support
    test = ingest_documents([docs[i] for i in test_idx], embeddings, train.vocabulary, support=support)
    W = {int(i): m.weights for i, m in zip(train_all, train.measures)}
    tests = [m.weights for m in test.measures]
    test_labels = labels[test_idx].tolist()
    iters = cfg.classify_iters or cfg.sinkhorn_iters
    rows = []
    for m in cfg.ref_counts:
        train_k = {k: np.stack([W[int(i)] for i in pools[k][: cfg.train_per_atom * m]]) for k in classes}
        pick = {k: seeded_rng(derive_seed(cfg.seed, trial, m, int(k))).choice(
            train_k[k].shape[0], size=m, replace=False) for k in classes}
        random_refs = ReferenceSet.from_classes([(k, train_k[k][np.sort(pick[k])]) for k in classes])
        acc = _accuracy_rows(random_refs, tests, test_labels, support, iters, cfg.rules)
        rows += [{"trial": trial, "source": "random", "rho": None, "ref_count": m, "rule": r, "accuracy": a}
                 for r, a in acc.items()]
        for rho in cfg.rhos:
            learned = []
            for k in classes:
                fc = FitConfig(rho=float(rho), outer_iters=cfg.outer_iters, sinkhorn_iters=cfg.sinkhorn_iters,
                               learning_rate=cfg.learning_rate, simplex_sampler="normalized",
                               seed=derive_seed(cfg.seed, trial, m, int(k), 1))
                learned.append((k, fit(train_k[k], m, support, fc).dictionary))
            acc = _accuracy_rows(ReferenceSet.from_classes(learned), tests, test_labels, support, iters, cfg.rules)
            rows += [{"trial": trial, "source": "learned", "rho": float(rho), "ref_count": m, "rule": r,
                      "accuracy": a} for r, a in acc.items()]
    return rows, sum(test.dropped.values())


def run_classification_experiment(config: ClassificationConfig = ClassificationConfig(), out_dir=None,
                                  corpus=None) -> ClassificationReport:
    """Accuracy of all rules with learned versus randomly sampled references.

    ``corpus`` is (documents, labels, embeddings); the bundled synthetic
    generator is used when omitted. Learned dictionaries of m atoms are fit on
    ``train_per_atom * m`` documents per class and random baselines draw m
    references per class from those same documents.
    """
    if corpus is None:
        corpus = synthetic_corpus(CorpusSpec(**(config.corpus or {})))
    jobs = [(config, corpus, t) for t in range(config.trials)]
    results = _run_jobs(_classification_job, jobs, config.workers)
    trial_rows = [row for rows, _ in results for row in rows]
    dropped = int(sum(d for _, d in results))
    groups = {}
    for row in trial_rows:
        groups.setdefault((row["source"], row["rho"], row["ref_count"], row["rule"]), []).append(row["accuracy"])
    table = []
    for (source, rho, m, rule), accs in groups.items():
        table.append({"source": source, "rho": rho, "ref_count": m, "rule": rule,
                      "mean": float(np.mean(accs)), "std": float(np.std(accs)), "trials": len(accs)})
    report = ClassificationReport(trial_rows, table, {})
    gaps = {}
    for rho in map(float, config.rhos):
        for rule in config.rules:
            for m in config.ref_counts:
                gaps[f"rho={rho!r} rule={rule} refs={m}"] = (
                    report.accuracy("learned", rule, m, rho) - report.accuracy("random", rule, m)
                )
    report.summary = {
        "config": config.to_dict(),
        "learned_minus_random": gaps,
        "oov_tokens_dropped": dropped,
        "assumption": "random baselines use exactly ref_count references per class, drawn from the "
                      "train_per_atom * ref_count documents the learned dictionary is fit on",
    }
    if out_dir is not None:
        out = Path(out_dir)
        io.write_rows(out / "classification_trials.csv", trial_rows)
        io.write_rows(out / "classification_accuracy.csv", table)
        io.write_json(out / "classification_summary.json", report.summary)
    return report


# --------------------------------------------------------------------------
# Numerical checks
# --------------------------------------------------------------------------


def extension_sweep(n_instances: int = 200, seed: int = 0, t_per_instance: int = 3, max_points: int = 6):
    """Random 1-D instances of the geodesic-extension inequality.

    For each instance ``mu`` and ``nu_tilde`` are random point clouds and ``nu``
    is their McCann interpolant at a random time ``b``, so ``nu`` lies on the
    geodesic from ``mu`` to ``nu_tilde``. Every tenth instance uses ``b = 1``
    (``nu_tilde = nu``). Returns one row per (instance, t).
    """
    from .ot import mccann_points_1d, verify_geodesic_extension

    rows = []
    for i in range(n_instances):
        rng = seeded_rng(derive_seed(seed, i))
        k1, k2 = rng.integers(1, max_points + 1, size=2)
        mu = (rng.normal(size=k1), uniform_simplex(rng, 1, k1)[0])
        nt = (rng.normal(loc=rng.normal(scale=2.0), size=k2), uniform_simplex(rng, 1, k2)[0])
        b = 1.0 if i % 10 == 0 else float(rng.uniform(0.2, 0.95))
        nu = nt if b == 1.0 else mccann_points_1d(mu, nt, b)
        ts = rng.uniform(0.02, 0.98, size=t_per_instance)
        for c in verify_geodesic_extension(mu, nu, nt, ts):
            rows.append({"instance": i, "b": b, "t": c.t, "s": c.s, "lhs": c.lhs, "rhs": c.rhs,
                         "extended": b != 1.0})
    return rows
