"""Gradient statistics: full gradient, noise covariances, leave-one-out pieces.

Naming: ``single_draw_gnc`` is the covariance of one random per-example
gradient around the full-batch mean (Sigma_t in most derivations);
``minibatch_gnc`` rescales it by the without-replacement factor
``(n - b) / (b (n - 1))`` to give the covariance of a size-b batch mean (C_t).
The leave-one-out quantities use the large-n simplification ``C_t = Sigma_t / b``
throughout, because the enumeration identities they feed are exact only under
that convention; everything else in the package uses the exact factor.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ConfigError

DENSE_DIM_CAP = 512


@dataclass(frozen=True)
class GradSnapshot:
    """All gradient statistics of one training state.

    ``diagonal_only`` marks snapshots taken above the dense-matrix cap, where
    only the diagonals of the covariances are kept (stored as diagonal
    matrices); bounds consuming them flag their reports accordingly.
    """

    step: int
    full_grad: np.ndarray
    single_draw_gnc: np.ndarray
    minibatch_gnc: np.ndarray
    pop_gnc: np.ndarray | None
    grad_norm_sq: float
    trace_c: float
    diagonal_only: bool = False


@dataclass(frozen=True)
class LooQuantities:
    """Subset-J gradient pieces: xi = G_J - G and the subset noise covariance."""

    subset: np.ndarray
    xi: np.ndarray
    loo_gnc: np.ndarray


def full_gradient(problem, w, dataset):
    """Arithmetic mean of the per-example gradients over the whole dataset."""
    if len(dataset) == 0:
        raise ConfigError("dataset must be nonempty")
    return problem.mean_grad(w, dataset.features, dataset.labels)


def _gnc_from_grads(grads):
    n = grads.shape[0]
    mean = grads.mean(axis=0)
    sigma = grads.T @ grads / n - np.outer(mean, mean)
    return (sigma + sigma.T) / 2.0, mean


def empirical_gnc(problem, w, dataset):
    """Single-draw gradient noise covariance on the dataset.

    Second moment of per-example gradients minus the outer product of their
    mean; exactly the zero matrix when all per-example gradients coincide.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset must be nonempty")
    grads = problem.per_example_grads(w, dataset.features, dataset.labels)
    sigma, _ = _gnc_from_grads(grads)
    return sigma


def minibatch_factor(n, b):
    """The without-replacement variance factor (n - b) / (b (n - 1))."""
    if n < 2:
        raise ConfigError(f"need n >= 2 for a batch covariance, got n={n}")
    if not 1 <= b <= n:
        raise ConfigError(f"batch size must satisfy 1 <= b <= n, got b={b}, n={n}")
    return (n - b) / (b * (n - 1))


def minibatch_gnc(sigma, n, b):
    """Covariance of a size-b without-replacement batch mean gradient."""
    return minibatch_factor(n, b) * np.asarray(sigma, dtype=float)


def population_gnc_estimate(problem, w, oracle_sample):
    """Plug-in estimate of the population GNC on the oracle sample."""
    return empirical_gnc(problem, w, oracle_sample)


def loo_quantities(problem, w, dataset, subset, b):
    """Subset-J pieces for the data-dependent prior machinery.

    ``xi = G_J - G`` and ``C_J = (1/b)((1/m) sum_{i in J} g_i g_i^T - G_J G_J^T)``,
    both on the given subset of size m. Requires b < m <= n.
    """
    subset = np.asarray(sorted(int(i) for i in subset), dtype=int)
    n = len(dataset)
    m = subset.shape[0]
    if len(np.unique(subset)) != m:
        raise ConfigError("subset indices must be distinct")
    if m <= b:
        raise ConfigError(f"subset size m={m} must exceed the batch size b={b}")
    if m > n:
        raise ConfigError(f"subset size m={m} exceeds dataset size n={n}")
    grads = problem.per_example_grads(
        w, dataset.features[subset], dataset.labels[subset]
    )
    g_j = grads.mean(axis=0)
    second = grads.T @ grads / m
    c_j = (second - np.outer(g_j, g_j)) / b
    xi = g_j - full_gradient(problem, w, dataset)
    return LooQuantities(subset=subset, xi=xi, loo_gnc=(c_j + c_j.T) / 2.0)


def snapshot(problem, w, dataset, b, step=0, oracle_sample=None,
             dense_cap=DENSE_DIM_CAP, diag_fallback=False):
    """Build a :class:`GradSnapshot` at one state.

    Above ``dense_cap`` parameters the full d x d covariances are not
    materialized; with ``diag_fallback`` the snapshot keeps diagonal
    approximations instead (marked ``diagonal_only``), otherwise this raises.
    """
    n = len(dataset)
    factor = minibatch_factor(n, b)
    grads = problem.per_example_grads(w, dataset.features, dataset.labels)
    mean = grads.mean(axis=0)
    d = grads.shape[1]
    diagonal_only = False
    if d > dense_cap:
        if not diag_fallback:
            raise CapabilityError(
                f"d={d} exceeds the dense-matrix cap {dense_cap}; "
                "enable the diagonal fallback to proceed"
            )
        var = np.mean(grads * grads, axis=0) - mean * mean
        sigma = np.diag(var)
        diagonal_only = True
    else:
        sigma, _ = _gnc_from_grads(grads)
    c = factor * sigma
    pop = None
    if oracle_sample is not None:
        ograds = problem.per_example_grads(
            w, oracle_sample.features, oracle_sample.labels
        )
        omean = ograds.mean(axis=0)
        if diagonal_only:
            pop = np.diag(np.mean(ograds * ograds, axis=0) - omean * omean)
        else:
            pop, _ = _gnc_from_grads(ograds)
    return GradSnapshot(
        step=step,
        full_grad=mean,
        single_draw_gnc=sigma,
        minibatch_gnc=c,
        pop_gnc=pop,
        grad_norm_sq=float(mean @ mean),
        trace_c=float(np.trace(c)),
        diagonal_only=diagonal_only,
    )


def quadratic_moments(spec, w):
    """Re-export of the analytic quadratic moments, for callers living here."""
    from .problems import quadratic_population_moments

    return quadratic_population_moments(spec, w)
