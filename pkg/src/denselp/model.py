"""Domain types: label scores, Gaussian kernels, energy models and solver settings.

Label scores are plain ``(n, m)`` float arrays (one row per pixel, one column
per label). The helpers here validate them; no wrapper class is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FEASIBLE_TOL = 1e-9

KERNEL_DIMS = {"spatial": 2, "bilateral": 5}


class ConfigError(ValueError):
    pass


def as_scores(y, feasible: bool = False, tol: float = FEASIBLE_TOL) -> np.ndarray:
    """Return ``y`` as a float64 ``(n, m)`` array, optionally checking it lies in M."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 2:
        raise ValueError(f"label scores must be (n >= 1, m >= 2), got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("label scores contain non-finite entries")
    if feasible and not is_feasible(y, tol):
        raise ValueError("label scores are not on the per-pixel simplex")
    return y


def is_feasible(y: np.ndarray, tol: float = FEASIBLE_TOL) -> bool:
    y = np.asarray(y)
    return bool(np.all(y >= -tol) and np.all(np.abs(y.sum(axis=1) - 1.0) <= tol))


def is_integral(y: np.ndarray) -> bool:
    y = np.asarray(y)
    return bool(np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0))


def argmax_round(y: np.ndarray) -> np.ndarray:
    """Integral labelling putting all mass on each row's best label (ties -> lowest index)."""
    y = as_scores(y)
    out = np.zeros_like(y)
    out[np.arange(y.shape[0]), np.argmax(y, axis=1)] = 1.0
    return out


def labels_to_scores(labels: np.ndarray, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, m))
    out[np.arange(labels.size), labels] = 1.0
    return out


def uniform_scores(n: int, m: int) -> np.ndarray:
    return np.full((n, m), 1.0 / m)


@dataclass(frozen=True)
class GaussianKernel:
    """One mixture component ``weight * exp(-sum_k (df_k / sigma_k)^2 / 2)``.

    ``sigmas`` are standard deviations, either one per feature dimension or
    the short forms ``(sigma,)`` for spatial and ``(sigma_pos, sigma_color)``
    for bilateral kernels.
    """

    weight: float
    kind: str
    sigmas: tuple

    def __post_init__(self):
        if self.kind not in KERNEL_DIMS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if not self.weight >= 0:
            raise ConfigError(f"kernel weight must be >= 0, got {self.weight}")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if not all(s > 0 and np.isfinite(s) for s in self.sigmas):
            raise ConfigError(f"kernel sigmas must be positive, got {self.sigmas}")
        self.feature_sigmas()  # validates arity

    @property
    def dim(self) -> int:
        return KERNEL_DIMS[self.kind]

    def feature_sigmas(self) -> np.ndarray:
        s = self.sigmas
        if self.kind == "spatial":
            if len(s) == 1:
                return np.array([s[0], s[0]])
            if len(s) == 2:
                return np.array(s)
        else:
            if len(s) == 2:
                return np.array([s[0]] * 2 + [s[1]] * 3)
            if len(s) == 5:
                return np.array(s)
        raise ConfigError(f"{self.kind} kernel cannot take {len(s)} sigmas")


@dataclass
class FeatureField:
    """Per-pixel positions (x right, y down, from top-left) and RGB colours."""

    width: int
    height: int
    colors: np.ndarray

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.colors.shape[0] != self.width * self.height:
            raise ValueError(
                f"{self.colors.shape[0]} colours for a {self.width}x{self.height} image"
            )

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def positions(self) -> np.ndarray:
        yy, xx = np.mgrid[0 : self.height, 0 : self.width]
        return np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64)


def make_features(image: FeatureField, kernel: GaussianKernel) -> np.ndarray:
    """Features scaled so that exp(-|f_a - f_b|^2 / 2) is the configured kernel."""
    raw = image.positions
    if kernel.kind == "bilateral":
        raw = np.hstack([raw, image.colors])
    return raw / kernel.feature_sigmas()


@dataclass
class EnergyModel:
    """Unaries plus a Potts-weighted mixture of Gaussian kernels.

    ``features[c]`` is the ``(n, d_c)`` scaled feature matrix of component ``c``
    and ``weights[c]`` its mixture weight. With ``exact=True`` every pairwise
    sum is evaluated by brute force instead of through the lattice; that is
    only meant for small verification problems.
    """

    unaries: np.ndarray
    weights: Sequence[float]
    features: Sequence[np.ndarray]
    exact: bool = False
    _lattices: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.unaries = np.asarray(self.unaries, dtype=np.float64)
        if self.unaries.ndim != 2 or self.unaries.shape[1] < 2:
            raise ValueError(f"unaries must be (n, m>=2), got {self.unaries.shape}")
        if not np.all(np.isfinite(self.unaries)):
            raise ValueError("unaries contain non-finite entries")
        self.weights = [float(w) for w in self.weights]
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        if len(self.weights) != len(self.features):
            raise ValueError("one weight per feature matrix is required")
        for f in self.features:
            if f.ndim != 2 or f.shape[0] != self.n:
                raise ValueError(f"feature matrix {f.shape} does not match n={self.n}")

    @classmethod
    def from_image(cls, unaries, image: FeatureField, kernels: Sequence[GaussianKernel], exact=False):
        return cls(
            unaries,
            [k.weight for k in kernels],
            [make_features(image, k) for k in kernels],
            exact=exact,
        )

    @property
    def n(self) -> int:
        return self.unaries.shape[0]

    @property
    def m(self) -> int:
        return self.unaries.shape[1]

    @property
    def lattices(self) -> list:
        if self._lattices is None:
            from .permutohedral import build_lattice

            self._lattices = [build_lattice(f) for f in self.features]
        return self._lattices

    def with_unaries(self, unaries) -> "EnergyModel":
        """Same pairwise structure (and cached lattices), different unaries."""
        other = EnergyModel(unaries, self.weights, self.features, exact=self.exact)
        other._lattices = self._lattices
        return other

    def kernel_matrix(self) -> np.ndarray:
        """Dense K_ab including the diagonal; O(n^2), for small problems only."""
        from .permutohedral import naive_kernel_matrix

        K = np.zeros((self.n, self.n))
        for w, f in zip(self.weights, self.features):
            K += w * naive_kernel_matrix(f)
        return K


@dataclass
class SolverConfig:
    lam: float = 0.1
    outer_steps: int = 10
    fw_steps: int = 5
    levels: int = 10
    label_prune_threshold: float = 0.01
    uncertain_threshold: float = 0.95
    uncertain_fraction_cap: float = 0.10
    qp_max_iters: int = 100
    qp_tol: float = 1e-8
    switch_after: int = 2

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        for name in ("outer_steps", "fw_steps", "qp_max_iters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if int(self.levels) < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if not 0 <= self.label_prune_threshold < 1:
            raise ConfigError("label_prune_threshold must lie in [0, 1)")
        if not 0 < self.uncertain_threshold < 1:
            raise ConfigError("uncertain_threshold must lie in (0, 1)")
        if not 0 < self.uncertain_fraction_cap <= 1:
            raise ConfigError("uncertain_fraction_cap must lie in (0, 1]")
        if not self.qp_tol >= 0:
            raise ConfigError("qp_tol must be >= 0")
        if int(self.switch_after) < 0:
            raise ConfigError("switch_after must be >= 0")


# config-file key -> SolverConfig field
_CONFIG_KEYS = {
    "lambda": ("lam", float),
    "outer_steps": ("outer_steps", int),
    "fw_steps": ("fw_steps", int),
    "levels": ("levels", int),
    "label_prune_threshold": ("label_prune_threshold", float),
    "uncertain_threshold": ("uncertain_threshold", float),
    "uncertain_fraction_cap": ("uncertain_fraction_cap", float),
    "qp_max_iters": ("qp_max_iters", int),
    "qp_tol": ("qp_tol", float),
    "switch_after": ("switch_after", int),
}


def parse_config(text: str) -> tuple[list[GaussianKernel], SolverConfig]:
    """Parse the ``key = value`` config format.

    ``kernel`` may repeat; its value is ``<kind> <weight> <sigma...>``.
    Everything after ``#`` is a comment.
    """
    kernels = []
    settings = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "kernel":
                kind, weight, *sigmas = value.split()
                kernels.append(GaussianKernel(float(weight), kind, tuple(float(s) for s in sigmas)))
            elif key in _CONFIG_KEYS:
                name, conv = _CONFIG_KEYS[key]
                settings[name] = conv(value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return kernels, SolverConfig(**settings)


def load_config(path) -> tuple[list[GaussianKernel], SolverConfig]:
    return parse_config(Path(path).read_text())


def format_config(kernels: Sequence[GaussianKernel], cfg: SolverConfig) -> str:
    lines = []
    for key, (name, _) in _CONFIG_KEYS.items():
        lines.append(f"{key} = {getattr(cfg, name)}")
    for k in kernels:
        lines.append("kernel = " + " ".join([k.kind, repr(k.weight)] + [repr(s) for s in k.sigmas]))
    return "\n".join(lines) + "\n"
