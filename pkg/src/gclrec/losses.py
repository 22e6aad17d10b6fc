"""Training objectives: pairwise ranking, multi-pair contrastive,
reconstruction, distribution discrepancy (KL or MMD), and L2 weight decay,
plus their weighted composition.

Every function takes tape nodes and returns a scalar node, so gradients of
the joint objective flow through one backward sweep.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import diffcore as dc
from .diffcore import DiffError

__all__ = [
    "LossReport",
    "bpr_loss",
    "infonce",
    "multi_pair_cl",
    "recon_loss",
    "kl_loss",
    "mmd_loss",
    "median_bandwidth",
    "l2_reg",
    "joint_loss",
]


def bpr_loss(pos_scores, neg_scores):
    """Mean pairwise ranking loss -log sigmoid(s+ - s-), computed through
    softplus so large score gaps cannot overflow."""
    if pos_scores.shape != neg_scores.shape:
        raise dc.ShapeError(
            f"bpr_loss: positive scores {pos_scores.shape} and negative "
            f"scores {neg_scores.shape} differ")
    margin = dc.sub(pos_scores, neg_scores)
    return dc.reduce_mean(dc.softplus(dc.scale(margin, -1.0)))


def infonce(view_a, view_b, tau):
    """Mean contrastive loss with in-batch negatives.

    Row x of view_a is positive with row x of view_b and contrasted
    against every other row of view_b; similarities are raw dot products
    scaled by 1/tau.  The log-sum-exp is max-shifted for stability.
    """
    if view_a.shape != view_b.shape:
        raise dc.ShapeError(
            f"infonce: view shapes {view_a.shape} and {view_b.shape} differ")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    tape = view_a.tape
    inv_tau = 1.0 / tau
    sims = dc.scale(dc.matmul(view_a, view_b, trans_b=True), inv_tau)
    pos = dc.scale(dc.reduce_sum(dc.mul(view_a, view_b), axis=1), inv_tau)
    # the shift is a detached constant; the gradient of lse is exact anyway
    shift = sims.value.max(axis=1, keepdims=True)
    shifted = dc.badd_col(sims, tape.constant(-shift))
    lse = dc.add(dc.log(dc.reduce_sum(dc.exp(shifted), axis=1)),
                 tape.constant(shift))
    return dc.reduce_mean(dc.sub(lse, pos))


def _mean_nodes(nodes):
    acc = nodes[0]
    for n in nodes[1:]:
        acc = dc.add(acc, n)
    return dc.scale(acc, 1.0 / len(nodes))


def multi_pair_cl(user_views, item_views, comp_views, tau, normalize=True):
    """Mean of the per-class contrastive losses.

    Each views argument is a (first-layer, layer-average) node pair;
    ``comp_views`` may be None when the complement channel is off.  With
    ``normalize`` the views are row-normalized first, making similarities
    cosines.
    """
    losses = []
    for views in (user_views, item_views, comp_views):
        if views is None:
            continue
        a, b = views
        if normalize:
            a, b = dc.rownorm(a), dc.rownorm(b)
        losses.append(infonce(a, b, tau))
    if not losses:
        raise ValueError("multi_pair_cl: no view pairs present")
    return _mean_nodes(losses)


def recon_loss(predicted, actual):
    """Mean squared error between predicted and observed entries."""
    tape = predicted.tape
    target = np.asarray(actual, dtype=np.float64).reshape(predicted.shape)
    return dc.reduce_mean(dc.square(dc.sub(predicted, tape.constant(target))))


def kl_loss(mu, sigma2, formula="standard"):
    """Mean divergence of N(mu, sigma^2) from the unit Gaussian.

    standard: (mu^2 + sigma^2 - ln sigma^2 - 1) / 2 per element.
    paper:    ln(1/sigma) + (sigma^2 + mu)/2 - 1/2 per element, the
    printed form this code base also supports; it drops the square on mu
    and is unbounded below, so it is not the default.
    """
    if np.any(sigma2.value <= 0):
        raise ValueError("kl_loss requires sigma2 > 0 elementwise")
    tape = mu.tape
    ones = tape.constant(np.ones(mu.shape))
    if formula == "standard":
        inner = dc.sub(dc.sub(dc.add(dc.square(mu), sigma2),
                              dc.log(sigma2)), ones)
        return dc.scale(dc.reduce_mean(inner), 0.5)
    if formula == "paper":
        inner = dc.sub(dc.add(dc.scale(dc.log(sigma2), -0.5),
                              dc.scale(dc.add(sigma2, mu), 0.5)),
                       dc.scale(ones, 0.5))
        return dc.reduce_mean(inner)
    raise ValueError(f"unknown kl formula {formula!r}")


def median_bandwidth(x_values, y_values):
    """Median pairwise distance over the pooled samples; the standard
    parameter-free RBF bandwidth.  Detached from the tape."""
    pooled = np.vstack([np.asarray(x_values), np.asarray(y_values)])
    dists = pdist(pooled)
    med = float(np.median(dists)) if len(dists) else 0.0
    return med if med > 0 else 1.0


def _pairwise_sq_dists(a, b, sq_a, sq_b):
    # ||x - y||^2 = |x|^2 + |y|^2 - 2 x.y; the (1, B) row of squared norms
    # comes from a 1x1-times-transpose product, keeping gradients intact
    tape = a.tape
    one = tape.constant(np.ones((1, 1)))
    cross = dc.scale(dc.matmul(a, b, trans_b=True), -2.0)
    with_rows = dc.badd_col(cross, sq_a)
    return dc.badd_row(with_rows, dc.matmul(one, sq_b, trans_b=True))


def mmd_loss(gen_samples, prior_samples, bandwidth):
    """Biased V-statistic maximum mean discrepancy with an RBF kernel
    k(a,b) = exp(-|a-b|^2 / (2 bandwidth^2))."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if gen_samples.shape[1] != prior_samples.shape[1]:
        raise dc.ShapeError(
            f"mmd_loss: sample dimensions {gen_samples.shape[1]} and "
            f"{prior_samples.shape[1]} differ")
    if gen_samples.shape[0] == 0 or prior_samples.shape[0] == 0:
        raise ValueError("mmd_loss requires non-empty sample sets")
    coeff = -1.0 / (2.0 * bandwidth * bandwidth)
    x, y = gen_samples, prior_samples
    sq_x = dc.reduce_sum(dc.square(x), axis=1)
    sq_y = dc.reduce_sum(dc.square(y), axis=1)

    def kernel_mean(a, b, sq_a, sq_b):
        return dc.reduce_mean(dc.exp(dc.scale(
            _pairwise_sq_dists(a, b, sq_a, sq_b), coeff)))

    k_xx = kernel_mean(x, x, sq_x, sq_x)
    k_yy = kernel_mean(y, y, sq_y, sq_y)
    k_xy = kernel_mean(x, y, sq_x, sq_y)
    return dc.add(dc.add(k_xx, k_yy), dc.scale(k_xy, -2.0))


def l2_reg(rows, coeff):
    """coeff times the sum of squared entries of the given rows."""
    if coeff < 0:
        raise ValueError(f"regularization coefficient must be >= 0, got {coeff}")
    return dc.scale(dc.reduce_sum(dc.square(rows)), coeff)


@dataclass
class LossReport:
    """Scalar values of every term plus their weighted total."""

    rec: float
    cl: float
    recon: float
    ddl: float
    reg: float
    total: float

    CSV_HEADER = "epoch,step,rec,cl,recon,ddl,reg,total"

    def csv_row(self, epoch, step):
        return (f"{epoch},{step},{self.rec!r},{self.cl!r},{self.recon!r},"
                f"{self.ddl!r},{self.reg!r},{self.total!r}")


def _component_value(node, name):
    if node is None:
        return 0.0
    v = float(node.value[0, 0])
    if not np.isfinite(v):
        raise DiffError(f"loss component {name!r} is not finite: {v}")
    return v


def joint_loss(rec, cl, recon, ddl, reg, lambda_):
    """Compose total = rec + lambda*cl + (recon + ddl) + reg over the terms
    present; absent terms contribute zero.  Returns (report, total node).
    """
    values = {
        "rec": _component_value(rec, "rec"),
        "cl": _component_value(cl, "cl"),
        "recon": _component_value(recon, "recon"),
        "ddl": _component_value(ddl, "ddl"),
        "reg": _component_value(reg, "reg"),
    }
    total = None
    for node, weight in ((rec, 1.0), (cl, lambda_), (recon, 1.0),
                         (ddl, 1.0), (reg, 1.0)):
        if node is None:
            continue
        term = node if weight == 1.0 else dc.scale(node, weight)
        total = term if total is None else dc.add(total, term)
    if total is None:
        raise ValueError("joint_loss: every component is absent")
    report = LossReport(total=float(total.value[0, 0]), **values)
    return report, total
