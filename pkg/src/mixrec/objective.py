"""Dual-mixing contrastive losses, mixed-negative BPR and the joint objective.

All batch losses are sums over the batch. Forward helpers return plain
floats or per-anchor vectors; :func:`loss_and_grad` additionally returns the
exact gradient with respect to the readout embeddings and the table.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .mixing import MixBatch

NORM_EPS = 1e-12


class LossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    lambda1: float = 0.3
    lambda2: float = 1e-4
    no_dmcl_user: bool = False
    no_dmcl_item: bool = False
    no_im: bool = False
    no_cm: bool = False
    reg_full_table: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    l_bpr_pos: float
    l_bpr_neg: float
    l_main: float
    l_user: float
    l_item: float
    l_reg: float
    l_total: float

    def as_log(self, step: int) -> dict:
        return {
            "step": step,
            "bpr_pos": self.l_bpr_pos,
            "bpr_neg": self.l_bpr_neg,
            "main": self.l_main,
            "cl_user": self.l_user,
            "cl_item": self.l_item,
            "reg": self.l_reg,
            "total": self.l_total,
        }

    def check_finite(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise LossError(f"non-finite loss term {name}={value}")
        return self


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1)
    ok = norms >= NORM_EPS
    safe = np.where(ok, norms, 1.0)
    return x / safe[:, None] * ok[:, None], safe, ok


def _unit_rows_backward(grad_hat, x_hat, norms, ok):
    radial = np.sum(grad_hat * x_hat, axis=1, keepdims=True)
    return (grad_hat - radial * x_hat) / norms[:, None] * ok[:, None]


def infonce(anchor_views, partner_views, tau: float) -> float:
    """Mean in-batch InfoNCE between two view matrices (row k is the positive pair)."""
    a, _, _ = _unit_rows(np.asarray(anchor_views, dtype=float))
    b, _, _ = _unit_rows(np.asarray(partner_views, dtype=float))
    logits = a @ b.T / tau
    return float(np.mean(logsumexp(logits, axis=1) - np.diag(logits)))


def mixing_contrast(anchor, positive, negatives, tau, weights=None):
    """Per-anchor ``-log exp(s(a_k, p_k)/tau) / sum_b sum_v exp(s(a_k, n_b,v)/tau)``.

    ``negatives`` is a list of (B, d) blocks; every row of every block is a
    denominator term for every anchor. The positive is not part of the
    denominator. With ``weights`` the gradients of ``sum_k w_k loss_k`` with
    respect to anchor, positive and each block are returned as well.
    """
    a_hat, a_norm, a_ok = _unit_rows(anchor)
    p_hat, p_norm, p_ok = _unit_rows(positive)
    units = [_unit_rows(block) for block in negatives]
    numer = np.sum(a_hat * p_hat, axis=1) / tau
    logits = np.concatenate([a_hat @ n_hat.T for n_hat, _, _ in units], axis=1) / tau
    lse = logsumexp(logits, axis=1)
    loss = lse - numer
    if weights is None:
        return loss

    w = weights[:, None]
    soft = np.exp(logits - lse[:, None]) * w
    b = anchor.shape[0]
    g_a_hat = -w * p_hat / tau
    g_p_hat = -w * a_hat / tau
    g_blocks = []
    for k, (n_hat, n_norm, n_ok) in enumerate(units):
        s_k = soft[:, k * b:(k + 1) * b]
        g_a_hat += s_k @ n_hat / tau
        g_blocks.append(_unit_rows_backward(s_k.T @ a_hat / tau, n_hat, n_norm, n_ok))
    g_anchor = _unit_rows_backward(g_a_hat, a_hat, a_norm, a_ok)
    g_positive = _unit_rows_backward(g_p_hat, p_hat, p_norm, p_ok)
    return loss, g_anchor, g_positive, g_blocks


def _contrast_terms(mix: MixBatch, side: str, use_im: bool, use_cm: bool):
    x, dis, im, cm, beta, _, _ = mix.side(side)
    pos_partner = im if use_im else x
    neg_partner = im if use_im else dis
    pos_blocks = [dis, cm] if use_cm else [dis]
    neg_blocks = [x, cm] if use_cm else [x]
    return (x, pos_partner, pos_blocks), (dis, neg_partner, neg_blocks), beta


def pos_mix_contrastive(mix: MixBatch, side: str, tau: float, use_im=True, use_cm=True) -> np.ndarray:
    """Per-anchor positive mixing loss: anchor e, positive e^im, negatives e^dis and e^cm."""
    (a, p, blocks), _, _ = _contrast_terms(mix, side, use_im, use_cm)
    return mixing_contrast(a, p, blocks, tau)


def neg_mix_contrastive(mix: MixBatch, side: str, tau: float, use_im=True, use_cm=True) -> np.ndarray:
    """Per-anchor negative mixing loss: anchor e^dis, positive e^im, negatives e and e^cm."""
    _, (a, p, blocks), _ = _contrast_terms(mix, side, use_im, use_cm)
    return mixing_contrast(a, p, blocks, tau)


def _side_disabled(config: LossConfig, side: str) -> bool:
    return config.no_dmcl_user if side == "user" else config.no_dmcl_item


def dual_mix_cl(mix: MixBatch, side: str, config: LossConfig) -> float:
    """Beta-weighted sum of the positive and negative mixing losses of one side."""
    if mix.degenerate or _side_disabled(config, side):
        return 0.0
    beta = mix.side(side)[4]
    pos = pos_mix_contrastive(mix, side, config.tau, not config.no_im, not config.no_cm)
    neg = neg_mix_contrastive(mix, side, config.tau, not config.no_im, not config.no_cm)
    return float(np.sum(beta * pos + (1.0 - beta) * neg))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _pos_margin(e_u, e_i, e_j):
    return np.sum(e_u * (e_i - e_j), axis=1)


def _mixed_margin(e_u, e_i, mixed_negs):
    return np.sum(e_u * (e_i - sum(mixed_negs)), axis=1)


def bpr_pos(e_u, e_i, e_j) -> float:
    return float(np.sum(_softplus(-_pos_margin(e_u, e_i, e_j))))


def bpr_neg_mixed(e_u, e_i, mixed_negs) -> float:
    """BPR against the summed scores of every mixed negative of each triplet."""
    if len(mixed_negs) == 0:
        raise ValueError("need at least one mixed-negative matrix")
    return float(np.sum(_softplus(-_mixed_margin(e_u, e_i, mixed_negs))))


def main_weights(mix: MixBatch) -> np.ndarray:
    if mix.coeffs.main_beta is not None:
        return np.full(mix.size, float(mix.coeffs.main_beta[0]))
    return mix.coeffs.beta_item


def main_loss(mix: MixBatch, config: LossConfig) -> float:
    pos = _softplus(-_pos_margin(mix.e_u, mix.e_i, mix.e_j))
    if config.no_im:
        return float(np.sum(pos))
    neg = _softplus(-_mixed_margin(mix.e_u, mix.e_i, mix.e_j_im))
    w = main_weights(mix)
    return float(np.sum(w * pos + (1.0 - w) * neg))


def _reg_rows(mix: MixBatch):
    users, pos, neg = mix.table_rows()
    return np.unique(np.concatenate([users, pos, neg]))


def regularization(mix: MixBatch, table: np.ndarray, config: LossConfig) -> float:
    if config.reg_full_table:
        return float(np.sum(table * table))
    rows = table[_reg_rows(mix)]
    return float(np.sum(rows * rows)) / mix.size


def total_loss(mix: MixBatch, table: np.ndarray, config: LossConfig) -> LossReport:
    """Joint objective; raises :class:`LossError` when any term is non-finite."""
    l_pos = bpr_pos(mix.e_u, mix.e_i, mix.e_j)
    l_neg = 0.0 if config.no_im else bpr_neg_mixed(mix.e_u, mix.e_i, mix.e_j_im)
    l_main = main_loss(mix, config)
    l_user = dual_mix_cl(mix, "user", config)
    l_item = dual_mix_cl(mix, "item", config)
    l_reg = regularization(mix, table, config)
    l_total = l_main + config.lambda1 * (l_user + l_item) + config.lambda2 * l_reg
    return LossReport(l_pos, l_neg, l_main, l_user, l_item, l_reg, l_total).check_finite()


def _side_backward(mix: MixBatch, side: str, config: LossConfig):
    """Dual-mixing loss of one side and its gradient w.r.t. the anchor rows."""
    x, dis, im, cm, beta, perm, theta = mix.side(side)
    use_im, use_cm = not config.no_im, not config.no_cm
    (a1, p1, b1), (a2, p2, b2), _ = _contrast_terms(mix, side, use_im, use_cm)
    l1, g_a1, g_p1, g_b1 = mixing_contrast(a1, p1, b1, config.tau, beta)
    l2, g_a2, g_p2, g_b2 = mixing_contrast(a2, p2, b2, config.tau, 1.0 - beta)
    value = float(np.sum(beta * l1 + (1.0 - beta) * l2))

    g_x = g_a1 + g_b2[0]
    g_dis = g_b1[0] + g_a2
    if use_im:
        g_im = g_p1 + g_p2
        g_x += beta[:, None] * g_im
        g_dis += (1.0 - beta)[:, None] * g_im
    else:
        g_x += g_p1
        g_dis += g_p2
    if use_cm:
        g_cm = g_b1[1] + g_b2[1]
        if theta.ndim == 1:
            g_x += theta[:, None] * g_cm.sum(axis=0)[None, :]
        else:
            g_x += theta.T @ g_cm
    g_x[perm] += g_dis
    return value, g_x


def loss_and_grad(mix: MixBatch, table: np.ndarray, config: LossConfig):
    """Loss report plus gradients.

    Returns ``(report, grad_final, grad_table)``: the gradient with respect
    to the readout embeddings (to be pushed back through propagation) and
    the direct gradient of the regularizer with respect to the table.
    """
    users, pos_rows, neg_rows = mix.table_rows()
    e_u, e_i, e_j = mix.e_u, mix.e_i, mix.e_j
    g_u = np.zeros_like(e_u)
    g_i = np.zeros_like(e_i)
    g_j = np.zeros_like(e_j)

    x_pos = _pos_margin(e_u, e_i, e_j)
    l_pos = float(np.sum(_softplus(-x_pos)))
    if config.no_im:
        w_pos = np.ones(mix.size)
        l_neg = 0.0
        l_main = l_pos
    else:
        w_pos = main_weights(mix)
        x_neg = _mixed_margin(e_u, e_i, mix.e_j_im)
        sp_neg = _softplus(-x_neg)
        l_neg = float(np.sum(sp_neg))
        l_main = float(np.sum(w_pos * _softplus(-x_pos) + (1.0 - w_pos) * sp_neg))
        gn = -(1.0 - w_pos) * expit(-x_neg)
        g_u += gn[:, None] * (e_i - sum(mix.e_j_im))
        g_i += gn[:, None] * e_u
        g_mixed = -gn[:, None] * e_u
        for perm, b in zip(mix.coeffs.perm_neg, mix.coeffs.beta_neg):
            g_j += b[:, None] * g_mixed
            g_j[perm] += (1.0 - b)[:, None] * g_mixed
    gp = -w_pos * expit(-x_pos)
    g_u += gp[:, None] * (e_i - e_j)
    g_i += gp[:, None] * e_u
    g_j -= gp[:, None] * e_u

    l_user = l_item = 0.0
    lam1 = config.lambda1
    if not mix.degenerate:
        if not config.no_dmcl_user:
            l_user, g_side = _side_backward(mix, "user", config)
            g_u += lam1 * g_side
        if not config.no_dmcl_item:
            l_item, g_side = _side_backward(mix, "item", config)
            g_i += lam1 * g_side

    grad_final = np.zeros((table.shape[0], e_u.shape[1]), dtype=e_u.dtype)
    np.add.at(grad_final, users, g_u)
    np.add.at(grad_final, pos_rows, g_i)
    np.add.at(grad_final, neg_rows, g_j)

    grad_table = np.zeros_like(table)
    if config.reg_full_table:
        l_reg = float(np.sum(table * table))
        grad_table += 2.0 * config.lambda2 * table
    else:
        rows = _reg_rows(mix)
        sub = table[rows]
        l_reg = float(np.sum(sub * sub)) / mix.size
        grad_table[rows] = 2.0 * config.lambda2 * sub / mix.size

    l_total = l_main + lam1 * (l_user + l_item) + config.lambda2 * l_reg
    report = LossReport(l_pos, l_neg, l_main, l_user, l_item, l_reg, l_total).check_finite()
    return report, grad_final, grad_table
