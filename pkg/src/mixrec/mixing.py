"""Dual-mixing views: disorder, individual mixing and collective mixing.

Random coefficients are drawn once per step (:func:`sample_coefficients`)
and treated as constants; :func:`assemble_views` rebuilds the views from any
final embedding matrix, which is what the gradient check relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import ConfigurationError

BETA_CLAMP = 1e-12
DIRICHLET_RETRIES = 100


@dataclass(frozen=True)
class MixParams:
    alpha: float = 0.1
    mix_neg_count: int = 1
    cm_per_anchor: bool = False
    main_beta_scalar: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if self.mix_neg_count < 1:
            raise ConfigurationError("mix_neg_count must be at least 1")


def sample_beta(alpha: float, rng: np.random.Generator, size=None):
    """Symmetric Beta(alpha, alpha) draw(s), clamped away from exactly 0 and 1."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    draw = rng.beta(alpha, alpha, size=size)
    return np.clip(draw, BETA_CLAMP, 1.0 - BETA_CLAMP)


def sample_dirichlet(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Dirichlet via normalized Gamma(alpha, 1) draws."""
    if n < 1 or not alpha > 0:
        raise ValueError("need n >= 1 and alpha > 0")
    for _ in range(DIRICHLET_RETRIES):
        g = rng.standard_gamma(alpha, size=n)
        total = g.sum()
        if total > 0 and np.isfinite(total):
            return g / total
    raise FloatingPointError(f"Gamma({alpha}) draws underflowed {DIRICHLET_RETRIES} times in a row")


def individual_mix(e: np.ndarray, e_dis: np.ndarray, beta: np.ndarray) -> np.ndarray:
    if e.shape != e_dis.shape or beta.shape != (e.shape[0],):
        raise ConfigurationError(f"shape mismatch: {e.shape}, {e_dis.shape}, beta {beta.shape}")
    b = beta[:, None]
    return b * e + (1.0 - b) * e_dis


def collective_mix(batch_embeddings: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Convex combination ``sum_o theta_o e_o`` of the batch rows (one row of d)."""
    return theta @ batch_embeddings


@dataclass(frozen=True)
class MixCoefficients:
    perm_user: np.ndarray
    perm_item: np.ndarray
    perm_neg: tuple  # one permutation per mixed negative
    beta_user: np.ndarray
    beta_item: np.ndarray
    beta_neg: tuple  # beta_neg[0] is beta_item; extras are fresh draws
    dirichlet_user: np.ndarray  # (B,) or (B, B) with cm_per_anchor
    dirichlet_item: np.ndarray
    main_beta: np.ndarray | None = None  # per-batch scalar under main_beta_scalar

    @property
    def size(self) -> int:
        return len(self.perm_user)


def sample_coefficients(n: int, params: MixParams, rng: np.random.Generator) -> MixCoefficients:
    """Draw every random quantity of one step in a fixed order.

    Order: perm_user, perm_item, perm_neg, beta_user, beta_item,
    dirichlet_user, dirichlet_item, then (perm, beta) for each extra mixed
    negative, then the optional scalar main-loss weight.
    """
    perm_user = rng.permutation(n)
    perm_item = rng.permutation(n)
    perm_neg = rng.permutation(n)
    beta_user = sample_beta(params.alpha, rng, n)
    beta_item = sample_beta(params.alpha, rng, n)
    if params.cm_per_anchor:
        dir_user = np.stack([sample_dirichlet(n, params.alpha, rng) for _ in range(n)])
        dir_item = np.stack([sample_dirichlet(n, params.alpha, rng) for _ in range(n)])
    else:
        dir_user = sample_dirichlet(n, params.alpha, rng)
        dir_item = sample_dirichlet(n, params.alpha, rng)
    perms, betas = [perm_neg], [beta_item]
    for _ in range(params.mix_neg_count - 1):
        perms.append(rng.permutation(n))
        betas.append(sample_beta(params.alpha, rng, n))
    main_beta = sample_beta(params.alpha, rng, 1) if params.main_beta_scalar else None
    return MixCoefficients(perm_user, perm_item, tuple(perms), beta_user, beta_item, tuple(betas),
                           dir_user, dir_item, main_beta)


@dataclass
class MixBatch:
    triplets: np.ndarray  # (B, 3): user, positive item, negative item (dataset indices)
    coeffs: MixCoefficients
    e_u: np.ndarray
    e_i: np.ndarray
    e_j: np.ndarray
    e_u_dis: np.ndarray
    e_i_dis: np.ndarray
    e_j_dis: np.ndarray
    e_u_im: np.ndarray
    e_i_im: np.ndarray
    e_j_im: list  # one (B, d) matrix per mixed negative
    e_u_cm: np.ndarray  # (B, d); identical rows unless cm_per_anchor
    e_i_cm: np.ndarray
    num_users: int = 0
    op_count: int = 0
    degenerate: bool = field(init=False)

    def __post_init__(self):
        self.degenerate = len(self.triplets) < 2

    @property
    def size(self) -> int:
        return len(self.triplets)

    def table_rows(self):
        """Row indices of users, positives and negatives in the (M + N)-row table."""
        t = self.triplets
        return t[:, 0], self.num_users + t[:, 1], self.num_users + t[:, 2]

    def side(self, side: str):
        """(anchor, disorder, individual mix, collective mix, beta, perm, dirichlet) for one side."""
        c = self.coeffs
        if side == "user":
            return self.e_u, self.e_u_dis, self.e_u_im, self.e_u_cm, c.beta_user, c.perm_user, c.dirichlet_user
        if side == "item":
            return self.e_i, self.e_i_dis, self.e_i_im, self.e_i_cm, c.beta_item, c.perm_item, c.dirichlet_item
        raise ValueError(f"unknown side {side!r}")


def _collective(rows: np.ndarray, theta: np.ndarray):
    """Collective-mix matrix (B, d) and its element-operation count."""
    b, d = rows.shape
    if theta.ndim == 1:
        cm = collective_mix(rows, theta)
        return np.broadcast_to(cm, rows.shape).copy(), 2 * b * d + b * d
    return theta @ rows, 2 * b * b * d


def assemble_views(triplets, coeffs: MixCoefficients, final: np.ndarray, num_users: int) -> MixBatch:
    """Gather batch rows from the readout matrix and build all views.

    Rows ``[0, num_users)`` of ``final`` are users, the rest items.
    """
    triplets = np.asarray(triplets, dtype=np.int64)
    if len(triplets) == 0:
        raise ConfigurationError("empty batch")
    if coeffs.size != len(triplets):
        raise ConfigurationError(f"coefficients sized {coeffs.size} for a batch of {len(triplets)}")
    b, d = len(triplets), final.shape[1]
    ops = 0
    e_u = final[triplets[:, 0]]
    e_i = final[num_users + triplets[:, 1]]
    e_j = final[num_users + triplets[:, 2]]
    ops += 3 * b * d
    e_u_dis = e_u[coeffs.perm_user]
    e_i_dis = e_i[coeffs.perm_item]
    e_j_dis = e_j[coeffs.perm_neg[0]]
    ops += 3 * b * d
    e_u_im = individual_mix(e_u, e_u_dis, coeffs.beta_user)
    e_i_im = individual_mix(e_i, e_i_dis, coeffs.beta_item)
    ops += 2 * 3 * b * d
    e_j_im = []
    for m, (perm, beta) in enumerate(zip(coeffs.perm_neg, coeffs.beta_neg)):
        if m == 0:
            partner = e_j_dis
        else:
            partner = e_j[perm]
            ops += b * d
        e_j_im.append(individual_mix(e_j, partner, beta))
        ops += 3 * b * d
    e_u_cm, n_u = _collective(e_u, coeffs.dirichlet_user)
    e_i_cm, n_i = _collective(e_i, coeffs.dirichlet_item)
    ops += n_u + n_i
    return MixBatch(triplets, coeffs, e_u, e_i, e_j, e_u_dis, e_i_dis, e_j_dis, e_u_im, e_i_im, e_j_im,
                    e_u_cm, e_i_cm, num_users=num_users, op_count=ops)


def build_mix_batch(triplets, final: np.ndarray, params: MixParams, rng: np.random.Generator,
                    num_users: int) -> MixBatch:
    coeffs = sample_coefficients(len(triplets), params, rng)
    return assemble_views(triplets, coeffs, final, num_users)
