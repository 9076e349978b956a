"""Numerical verification of the oversmoothing / expressivity inequalities.

The claims are about linearized propagation operators: a plain convolution
multiplies features by the (shifted) normalized adjacency, a residual layer by
(A + I), and a hop-masked residual layer -- in expectation -- by (A pi_l + I).
On that linear level the inequalities are exact theorems, so the harness
asserts them with tight tolerances; any failure is an implementation bug.

The spectral shift (A_hat + I) / 2 enforces the assumed spectrum: eigenvalues
in (0, 1] with the top eigenvalue exactly 1 and unchanged eigenvectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import StickBreakingPrior
from .graph import erdos_renyi, normalize_adjacency

TOP_EIG_TOL = 1e-8
VARIANTS = ("gcn", "res", "bna")


@dataclass
class SpectralDecomposition:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns, orthonormal
    top_multiplicity: int

    @property
    def top_basis(self):
        """Orthonormal basis of the top-eigenvalue subspace U (N x M)."""
        return self.eigenvectors[:, -self.top_multiplicity :]


@dataclass
class TheoremCheck:
    name: str
    passed: bool
    margin: float


@dataclass
class PropagationReport:
    trials: list = field(default_factory=list)  # per-trial list of TheoremCheck
    curves: list = field(default_factory=list)  # (trial, depth, variant, d_m, p_norm, theta)

    @property
    def pass_rate(self):
        flat = [c.passed for trial in self.trials for c in trial]
        return float(np.mean(flat)) if flat else 1.0

    @property
    def all_passed(self):
        return all(c.passed for trial in self.trials for c in trial)


def spectral_shift(a_hat: np.ndarray) -> np.ndarray:
    """(A_hat + I) / 2: maps spectrum (-1, 1] to (0, 1], same eigenvectors."""
    return (a_hat + np.eye(a_hat.shape[0])) / 2.0


def eigendecompose(matrix: np.ndarray) -> SpectralDecomposition:
    matrix = np.asarray(matrix, dtype=np.float64)
    if np.max(np.abs(matrix - matrix.T)) > 1e-10:
        raise ValueError("eigendecompose requires a symmetric matrix")
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    top = eigenvalues[-1]
    multiplicity = int(np.sum(eigenvalues >= top - TOP_EIG_TOL))
    return SpectralDecomposition(eigenvalues, eigenvectors, multiplicity)


def subspace_distance_and_angle(h: np.ndarray, decomp: SpectralDecomposition):
    """Frobenius-geometry distance to U, projection norm, and angle.

    Returns (d_m, p_norm, theta, degenerate). theta = atan2(d_m, p_norm);
    a zero matrix is flagged degenerate with theta defined as 0.
    """
    basis = decomp.top_basis
    p = basis @ (basis.T @ h)
    d_m = float(np.linalg.norm(h - p))
    p_norm = float(np.linalg.norm(p))
    degenerate = d_m == 0.0 and p_norm == 0.0
    theta = 0.0 if degenerate else float(np.arctan2(d_m, p_norm))
    return d_m, p_norm, theta, degenerate


def linear_propagate(variant, a_shifted, h0, depth, pi=None):
    """States H_1..H_depth under the linearized recurrence of one variant.

    gcn: H_l = A H_{l-1};  res: H_l = (A + I) H_{l-1};
    bna: H_l = (pi_l A + I) H_{l-1}.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "bna":
        pi = np.asarray(pi, dtype=np.float64)
        if pi.shape[0] < depth:
            raise ValueError(f"need pi of length >= {depth}, got {pi.shape[0]}")
        if np.any(pi < 0.0) or np.any(pi > 1.0):
            raise ValueError("pi entries must lie in [0, 1]")
    eye = np.eye(a_shifted.shape[0])
    states = []
    h = np.asarray(h0, dtype=np.float64)
    for l in range(depth):
        if variant == "gcn":
            h = a_shifted @ h
        elif variant == "res":
            h = (a_shifted + eye) @ h
        else:
            h = (pi[l] * a_shifted + eye) @ h
        states.append(h)
    return states


def _sub_dominant_eigenvalue(decomp: SpectralDecomposition):
    """Largest eigenvalue strictly below the top cluster (0 if none)."""
    below = decomp.eigenvalues[: -decomp.top_multiplicity]
    return float(below[-1]) if below.size else 0.0


def verify_trial(a_hat, h0, depth, prior: StickBreakingPrior, rng, report=None, trial_idx=0):
    """Run the five inequality checks on one graph; returns list of TheoremCheck."""
    a_s = spectral_shift(a_hat)
    decomp = eigendecompose(a_s)
    lam = _sub_dominant_eigenvalue(decomp)

    pi_mean = prior.expected_sticks(depth)
    gcn = linear_propagate("gcn", a_s, h0, depth)
    res = linear_propagate("res", a_s, h0, depth)
    bna = linear_propagate("bna", a_s, h0, depth, pi=pi_mean)

    geom = {v: [subspace_distance_and_angle(h, decomp) for h in states]
            for v, states in (("gcn", gcn), ("res", res), ("bna", bna))}
    d0 = subspace_distance_and_angle(h0, decomp)[0]

    checks = []
    # (a) exponential convergence bound for the plain convolution
    bound_gap = min(
        lam**l * d0 + 1e-8 - geom["gcn"][l - 1][0] for l in range(1, depth + 1)
    )
    checks.append(TheoremCheck("gcn_convergence_bound", bound_gap >= 0.0, bound_gap))
    # (b) residual widens the angle at final depth
    gap_b = geom["res"][-1][2] - geom["gcn"][-1][2]
    checks.append(TheoremCheck("res_vs_gcn_angle", gap_b >= -1e-10, gap_b))
    # (c) residual angle monotone nonincreasing in depth
    thetas_res = [geom["res"][l][2] for l in range(depth)]
    gap_c = min(thetas_res[l] - thetas_res[l + 1] for l in range(depth - 1))
    checks.append(TheoremCheck("res_angle_monotone", gap_c >= -1e-10, gap_c))
    # (d) masked propagation widens the angle over the residual (prior-mean pi)
    gap_d = geom["bna"][-1][2] - geom["res"][-1][2]
    checks.append(TheoremCheck("bna_vs_res_angle", gap_d >= -1e-10, gap_d))
    # (e) zeroed pi tail freezes the features
    cut = int(rng.integers(1, depth))
    pi_cut = pi_mean.copy()
    pi_cut[cut:] = 0.0
    frozen = linear_propagate("bna", a_s, h0, depth, pi=pi_cut)
    gap_e = -max(float(np.max(np.abs(frozen[l] - frozen[cut - 1]))) for l in range(cut, depth))
    checks.append(TheoremCheck("zero_tail_freezes", gap_e >= -1e-12, gap_e))

    if report is not None:
        for v in VARIANTS:
            for l in range(depth):
                d_m, p_norm, theta, _ = geom[v][l]
                report.curves.append((trial_idx, l + 1, v, d_m, p_norm, theta))
    return checks


def verify_theorems(
    n_trials=100,
    n_nodes=30,
    edge_prob=0.2,
    depth=20,
    width=4,
    prior=StickBreakingPrior(5.0, 2.0),
    seed=0,
) -> PropagationReport:
    """Erdos-Renyi ensemble run of the five checks; disconnected graphs are
    handled natively via the top-eigenvalue multiplicity."""
    rng = np.random.default_rng(seed)
    report = PropagationReport()
    for trial in range(n_trials):
        edges = erdos_renyi(n_nodes, edge_prob, rng)
        a_hat = normalize_adjacency(n_nodes, edges)
        h0 = rng.normal(size=(n_nodes, width))
        report.trials.append(verify_trial(a_hat, h0, depth, prior, rng, report, trial))
    return report
