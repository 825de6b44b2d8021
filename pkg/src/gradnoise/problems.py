"""Differentiable learning problems with known data distributions.

Three families cover the assumption regimes the analysis needs:

- quadratic-gaussian: per-example loss ``0.5 (w - z)^T A (w - z)`` with
  ``z ~ N(center, scatter)``. Everything is analytic (gradient, Hessian,
  population gradient-noise covariance), so it anchors the verification of
  every estimator in the package.
- logistic-two-gaussians: binary logistic regression on two Gaussian classes.
  Convex, with optional L2 regularization to keep the minimizer finite; near a
  minimum the Fisher information approximately matches the Hessian.
- mlp-teacher: a one-hidden-layer tanh network with softmax cross-entropy,
  labels sampled from a fixed teacher network. Nonconvex; exercises the
  multiple-minima regime. Gradients and Hessian-vector products are
  hand-written (backpropagation and its forward-over-reverse directional
  derivative); there is no autodiff anywhere in the package.

Population-level expectations are analytic for the quadratic family and are
otherwise estimated on a large "population oracle" sample drawn from a stream
disjoint from every training dataset.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ConfigError
from .seeding import substream


def _as_square(name, value, dim):
    """Normalize a scalar / diagonal vector / full matrix to a (dim, dim) array."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ConfigError(f"{name}: diagonal length {arr.shape[0]} != dim {dim}")
        return np.diag(arr)
    if arr.shape != (dim, dim):
        raise ConfigError(f"{name}: expected shape ({dim}, {dim}), got {arr.shape}")
    return (arr + arr.T) / 2.0


def _require_psd(name, mat):
    eigs = np.linalg.eigvalsh(mat)
    scale = max(1.0, float(np.max(np.abs(eigs))))
    if eigs[0] < -1e-10 * scale:
        raise ConfigError(f"{name} must be positive semidefinite (min eig {eigs[0]:g})")


@dataclass(frozen=True)
class Dataset:
    """An ordered i.i.d. sample: features (n, p) and labels (n,)."""

    features: np.ndarray
    labels: np.ndarray
    seed: int
    spec: object

    def __len__(self):
        return self.features.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.seed, self.spec)


@dataclass(frozen=True)
class QuadraticSpec:
    """Quadratic-gaussian family: loss 0.5 (w - z)^T A (w - z), z ~ N(center, scatter)."""

    curvature: np.ndarray
    center: np.ndarray
    scatter: np.ndarray
    pop_oracle_size: int = 10_000

    family = "quadratic-gaussian"

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        d = center.shape[0]
        a = _as_square("curvature", self.curvature, d)
        s = _as_square("scatter", self.scatter, d)
        _require_psd("scatter", s)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "curvature", a)
        object.__setattr__(self, "scatter", s)

    @property
    def dim(self):
        return self.center.shape[0]


@dataclass(frozen=True)
class LogisticSpec:
    """Two-Gaussian binary classification with a linear logistic model."""

    dim: int
    mean0: np.ndarray
    mean1: np.ndarray
    cov: np.ndarray = 1.0
    balance: float = 0.5
    l2: float = 0.0
    pop_oracle_size: int = 10_000

    family = "logistic-two-gaussians"

    def __post_init__(self):
        m0 = np.asarray(self.mean0, dtype=float)
        m1 = np.asarray(self.mean1, dtype=float)
        if m0.shape != (self.dim,) or m1.shape != (self.dim,):
            raise ConfigError("class means must have shape (dim,)")
        cov = _as_square("cov", self.cov, self.dim)
        _require_psd("cov", cov)
        if not 0.0 < self.balance < 1.0:
            raise ConfigError(f"balance must lie in (0, 1), got {self.balance}")
        if self.l2 < 0.0:
            raise ConfigError("l2 must be nonnegative")
        object.__setattr__(self, "mean0", m0)
        object.__setattr__(self, "mean1", m1)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class MlpSpec:
    """Teacher-student MLP: standard-normal inputs, labels from a fixed teacher."""

    in_dim: int
    hidden: int
    classes: int
    teacher_seed: int = 0
    teacher_scale: float = 1.0
    pop_oracle_size: int = 10_000

    family = "mlp-teacher"

    def __post_init__(self):
        if min(self.in_dim, self.hidden, self.classes) < 1:
            raise ConfigError("in_dim, hidden, classes must all be >= 1")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def _sample(spec, rng, n):
    if isinstance(spec, QuadraticSpec):
        noise = rng.standard_normal((n, spec.dim))
        feats = spec.center + noise @ _psd_sqrt(spec.scatter)
        return feats, np.zeros(n)
    if isinstance(spec, LogisticSpec):
        labels = (rng.random(n) < spec.balance).astype(int)
        noise = rng.standard_normal((n, spec.dim)) @ _psd_sqrt(spec.cov)
        means = np.where(labels[:, None] == 1, spec.mean1, spec.mean0)
        return means + noise, labels
    if isinstance(spec, MlpSpec):
        feats = rng.standard_normal((n, spec.in_dim))
        teacher = _teacher_params(spec)
        logits = np.tanh(feats @ teacher[0].T + teacher[1]) @ teacher[2].T + teacher[3]
        probs = _softmax(logits)
        u = rng.random(n)
        labels = np.minimum(
            (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), spec.classes - 1
        )
        return feats, labels
    raise ConfigError(f"unknown spec type {type(spec).__name__}")


def generate_dataset(spec, seed, n):
    """Draw n i.i.d. examples; bit-identical for equal (spec, seed, n)."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    rng = substream(seed, "train-data")
    feats, labels = _sample(spec, rng, n)
    return Dataset(feats, labels, seed, spec)


def population_oracle_sample(spec, seed):
    """A large held-out sample standing in for the data distribution.

    Drawn from the stream (seed, "population-oracle"), disjoint by construction
    from the training stream (seed, "train-data") even at equal seeds.
    """
    if spec.pop_oracle_size < 1:
        raise ConfigError("pop_oracle_size must be >= 1")
    rng = substream(seed, "population-oracle")
    feats, labels = _sample(spec, rng, spec.pop_oracle_size)
    return Dataset(feats, labels, seed, spec)


def quadratic_population_moments(spec, w):
    """Analytic (population gradient, population GNC, Hessian) for the quadratic family.

    pop_grad = A (w - center); pop_gnc = A scatter A; hessian = A.
    """
    if not isinstance(spec, QuadraticSpec):
        raise CapabilityError(
            "analytic population moments are only available for quadratic-gaussian specs"
        )
    w = np.asarray(w, dtype=float)
    a = spec.curvature
    pop_grad = a @ (w - spec.center)
    pop_gnc = a @ spec.scatter @ a
    return pop_grad, (pop_gnc + pop_gnc.T) / 2.0, a.copy()


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class QuadraticProblem:
    """ℓ(w, z) = 0.5 (w - z)^T A (w - z); Hessian A everywhere."""

    has_exact_hessian = True
    has_accuracy = False
    loss_bound_m = None
    subgaussian_r = None

    def __init__(self, spec):
        self.spec = spec
        self.a = spec.curvature
        self.dim = spec.dim

    def per_example_losses(self, w, features, labels):
        diff = w - features
        return 0.5 * np.sum((diff @ self.a) * diff, axis=1)

    def mean_loss(self, w, features, labels):
        return float(np.mean(self.per_example_losses(w, features, labels)))

    def per_example_grads(self, w, features, labels):
        return (w - features) @ self.a

    def mean_grad(self, w, features, labels):
        return self.a @ (w - features.mean(axis=0))

    def hvp(self, w, features, labels, v):
        return self.a @ np.asarray(v, dtype=float)

    def exact_hessian(self, w, features, labels):
        return self.a.copy()


class LogisticProblem:
    """Binary logistic regression with labels in {0, 1} and optional L2 term."""

    has_exact_hessian = True
    has_accuracy = True
    loss_bound_m = None
    subgaussian_r = None

    def __init__(self, spec):
        self.spec = spec
        self.l2 = spec.l2
        self.dim = spec.dim

    def _margins(self, w, features, labels):
        sign = 2.0 * labels - 1.0
        return sign, sign * (features @ w)

    def per_example_losses(self, w, features, labels):
        _, m = self._margins(w, features, labels)
        return np.logaddexp(0.0, -m) + 0.5 * self.l2 * float(w @ w)

    def mean_loss(self, w, features, labels):
        return float(np.mean(self.per_example_losses(w, features, labels)))

    def per_example_grads(self, w, features, labels):
        sign, m = self._margins(w, features, labels)
        coef = -sign / (1.0 + np.exp(m))  # -sign * sigmoid(-margin)
        return coef[:, None] * features + self.l2 * w

    def mean_grad(self, w, features, labels):
        sign, m = self._margins(w, features, labels)
        coef = -sign / (1.0 + np.exp(m))
        return features.T @ coef / len(coef) + self.l2 * w

    def _curvatures(self, w, features):
        p = 1.0 / (1.0 + np.exp(-(features @ w)))
        return p * (1.0 - p)

    def hvp(self, w, features, labels, v):
        v = np.asarray(v, dtype=float)
        r = self._curvatures(w, features)
        return features.T @ (r * (features @ v)) / len(r) + self.l2 * v

    def exact_hessian(self, w, features, labels):
        r = self._curvatures(w, features)
        h = (features.T * r) @ features / len(r) + self.l2 * np.eye(self.dim)
        return (h + h.T) / 2.0

    def accuracy(self, w, features, labels):
        return float(np.mean((features @ w > 0).astype(int) == labels))


def _teacher_params(spec):
    rng = substream(spec.teacher_seed, "teacher")
    w1 = spec.teacher_scale * rng.standard_normal((spec.hidden, spec.in_dim))
    w1 /= np.sqrt(spec.in_dim)
    b1 = 0.1 * rng.standard_normal(spec.hidden)
    w2 = spec.teacher_scale * rng.standard_normal((spec.classes, spec.hidden))
    w2 /= np.sqrt(spec.hidden)
    b2 = 0.1 * rng.standard_normal(spec.classes)
    return w1, b1, w2, b2


class MlpProblem:
    """One-hidden-layer tanh network with softmax cross-entropy.

    The flat parameter vector packs (W1, b1, W2, b2) in that order. Gradients
    come from hand-derived backpropagation; ``hvp`` applies the R-operator
    (directional derivative of the backward pass), so a Hessian-vector product
    costs roughly two backward passes and needs no second-order symbolic work.
    """

    has_exact_hessian = False
    has_accuracy = True
    loss_bound_m = None
    subgaussian_r = None

    def __init__(self, spec):
        self.spec = spec
        self.p = spec.in_dim
        self.h = spec.hidden
        self.k = spec.classes
        self.dim = self.h * self.p + self.h + self.k * self.h + self.k

    def unpack(self, w):
        p, h, k = self.p, self.h, self.k
        w = np.asarray(w, dtype=float)
        i = 0
        w1 = w[i:i + h * p].reshape(h, p); i += h * p
        b1 = w[i:i + h]; i += h
        w2 = w[i:i + k * h].reshape(k, h); i += k * h
        b2 = w[i:i + k]
        return w1, b1, w2, b2

    def pack(self, w1, b1, w2, b2):
        return np.concatenate([w1.ravel(), b1, w2.ravel(), b2])

    def _forward(self, w, features):
        w1, b1, w2, b2 = self.unpack(w)
        pre = features @ w1.T + b1
        hid = np.tanh(pre)
        logits = hid @ w2.T + b2
        return w1, b1, w2, b2, pre, hid, logits

    def per_example_losses(self, w, features, labels):
        *_, logits = self._forward(w, features)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        idx = np.arange(len(labels))
        return logz - shifted[idx, labels.astype(int)]

    def mean_loss(self, w, features, labels):
        return float(np.mean(self.per_example_losses(w, features, labels)))

    def _backward_seeds(self, logits, labels):
        probs = _softmax(logits)
        d_logits = probs.copy()
        d_logits[np.arange(len(labels)), labels.astype(int)] -= 1.0
        return probs, d_logits

    def per_example_grads(self, w, features, labels):
        w1, b1, w2, b2, pre, hid, logits = self._forward(w, features)
        _, d_logits = self._backward_seeds(logits, labels)
        d_hid = d_logits @ w2
        d_pre = (1.0 - hid * hid) * d_hid
        n = features.shape[0]
        grads = np.empty((n, self.dim))
        grads[:, : self.h * self.p] = np.einsum("nh,np->nhp", d_pre, features).reshape(n, -1)
        i = self.h * self.p
        grads[:, i:i + self.h] = d_pre
        i += self.h
        grads[:, i:i + self.k * self.h] = np.einsum("nk,nh->nkh", d_logits, hid).reshape(n, -1)
        i += self.k * self.h
        grads[:, i:] = d_logits
        return grads

    def mean_grad(self, w, features, labels):
        w1, b1, w2, b2, pre, hid, logits = self._forward(w, features)
        _, d_logits = self._backward_seeds(logits, labels)
        n = features.shape[0]
        d_logits = d_logits / n
        d_hid = d_logits @ w2
        d_pre = (1.0 - hid * hid) * d_hid
        return self.pack(
            d_pre.T @ features, d_pre.sum(axis=0),
            d_logits.T @ hid, d_logits.sum(axis=0),
        )

    def hvp(self, w, features, labels, v):
        w1, b1, w2, b2, pre, hid, logits = self._forward(w, features)
        v1, c1, v2, c2 = self.unpack(v)
        n = features.shape[0]
        probs, d_logits = self._backward_seeds(logits, labels)
        d_hid = d_logits @ w2
        d_pre = (1.0 - hid * hid) * d_hid

        # Forward sweep of the R-operator.
        r_pre = features @ v1.T + c1
        r_hid = (1.0 - hid * hid) * r_pre
        r_logits = hid @ v2.T + r_hid @ w2.T + c2
        r_probs = probs * r_logits - probs * np.sum(probs * r_logits, axis=1, keepdims=True)

        # Backward sweep: differentiate each gradient quantity along v.
        r_dlogits = r_probs
        r_dhid = d_logits @ v2 + r_dlogits @ w2
        r_dpre = (1.0 - hid * hid) * r_dhid - 2.0 * hid * r_hid * d_hid
        return self.pack(
            r_dpre.T @ features / n,
            r_dpre.sum(axis=0) / n,
            (r_dlogits.T @ hid + d_logits.T @ r_hid) / n,
            r_dlogits.sum(axis=0) / n,
        )

    def accuracy(self, w, features, labels):
        *_, logits = self._forward(w, features)
        return float(np.mean(np.argmax(logits, axis=1) == labels.astype(int)))

    def init_from_teacher(self, scale=1.0):
        """Teacher parameters scaled by ``scale``, handy as a warm start."""
        return scale * self.pack(*_teacher_params(self.spec))


def build_problem(spec):
    """Instantiate the problem class matching a data spec."""
    if isinstance(spec, QuadraticSpec):
        return QuadraticProblem(spec)
    if isinstance(spec, LogisticSpec):
        return LogisticProblem(spec)
    if isinstance(spec, MlpSpec):
        return MlpProblem(spec)
    raise ConfigError(f"unknown spec type {type(spec).__name__}")


def dense_hessian(problem, w, features, labels):
    """Dense Hessian: exact when the problem provides it, else HVP columns."""
    if problem.has_exact_hessian:
        return problem.exact_hessian(w, features, labels)
    d = problem.dim
    h = np.empty((d, d))
    basis = np.zeros(d)
    for j in range(d):
        basis[j] = 1.0
        h[:, j] = problem.hvp(w, features, labels, basis)
        basis[j] = 0.0
    return (h + h.T) / 2.0

