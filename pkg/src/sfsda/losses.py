"""Differentiable training objectives over probability matrices.

Every loss is a pure function of simplex-row matrices (and constant
side inputs such as mixing coefficients or EMA targets).  Reliability
weights are always computed from detached probabilities: they act as
constants, not optimization paths.  Each loss has a brute-force scalar
oracle in the test suite.
"""

from dataclasses import dataclass

import torch

_LOG_CLAMP = 1e-12
_PR_CLAMP = 1e-6


class NonFiniteLossError(RuntimeError):
    """A loss component became non-finite; carries the component name."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component


@dataclass
class LossWeights:
    lambda_pwc: float = 0.1
    lambda_rmc: float = 0.1
    lambda_pr: float = 3.0
    tau: float = 0.15
    alpha: float = 0.7

    def validate(self):
        for name in ("lambda_pwc", "lambda_rmc", "lambda_pr", "tau"):
            if getattr(self, name) < 0 or (name == "tau" and self.tau <= 0):
                raise ValueError(f"{name} must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def adaptive_weight(p_i, p_k, cat_i, cat_k, same_index: bool) -> float:
    """Pair reliability weight: 1 for the same sample, the probability
    dot product for same-category pairs, 0 otherwise."""
    if same_index:
        return 1.0
    if cat_i == cat_k:
        return float(torch.dot(p_i.detach(), p_k.detach()))
    return 0.0


def _view_partner(n_rows: int) -> torch.Tensor:
    """Row i's other-view index under weak||strong concatenation."""
    half = n_rows // 2
    idx = torch.arange(n_rows)
    return (idx + half) % n_rows


def pair_weight_matrix(P: torch.Tensor, cats: torch.Tensor, partner: torch.Tensor) -> torch.Tensor:
    """Detached weight matrix W[i, k] for all off-diagonal pairs."""
    Pd = P.detach()
    W = torch.zeros(P.shape[0], P.shape[0], dtype=Pd.dtype)
    same_cat = cats.unsqueeze(0) == cats.unsqueeze(1)
    W = torch.where(same_cat, Pd @ Pd.T, W)
    W[torch.arange(P.shape[0]), partner] = 1.0
    W.fill_diagonal_(0.0)
    return W


def pwc_loss(P: torch.Tensor, cats, tau: float, weights: torch.Tensor = None) -> torch.Tensor:
    """Probability-space weighted contrastive loss over concatenated
    weak||strong view predictions.

    Each row is contrasted against every other row; positives are the
    other view of the same sample (weight 1) and same-category rows
    (weight = detached probability dot product).  Normalized by the
    number of positive pairs so the magnitude is batch-size stable.
    """
    n = P.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows (no negatives otherwise)")
    if n % 2 != 0:
        raise ValueError("row count must be even (weak||strong concatenation)")
    cats = torch.as_tensor(cats)
    if weights is None:
        weights = pair_weight_matrix(P, cats, _view_partner(n))

    sim = (P @ P.T) / tau
    neg = sim.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    log_denom = torch.logsumexp(neg, dim=1)  # excludes j == i
    log_frac = sim - log_denom.unsqueeze(1)

    n_pos = int((weights > 0).sum())
    if n_pos == 0:
        return P.sum() * 0.0
    return -(weights * log_frac).sum() / n_pos


def mixup_ce_loss(P_mix: torch.Tensor, y_i, y_j, lam_hat) -> torch.Tensor:
    """Convex-label cross-entropy for patch-mixed samples, averaged over
    the mixed batch."""
    y_i = torch.as_tensor(y_i, dtype=torch.long)
    y_j = torch.as_tensor(y_j, dtype=torch.long)
    lam_hat = torch.as_tensor(lam_hat, dtype=P_mix.dtype)
    if torch.any(lam_hat < 0) or torch.any(lam_hat > 1):
        raise ValueError("lam_hat must lie in [0, 1]")
    logp = torch.log(P_mix.clamp(min=_LOG_CLAMP))
    rows = torch.arange(P_mix.shape[0])
    nll = -(lam_hat * logp[rows, y_i] + (1 - lam_hat) * logp[rows, y_j])
    return nll.mean()


def mixed_pair_weights(
    P_mix: torch.Tensor,
    P_comp: torch.Tensor,
    paired: torch.Tensor,
    anchor_cats: torch.Tensor,
    comp_cats: torch.Tensor,
) -> torch.Tensor:
    """Detached weights between mixed anchors and component rows.

    W[k, r] is 1 when r is the anchor's own paired component, the
    detached dot product for same-category rows, 0 otherwise.
    """
    Pm, Pc = P_mix.detach(), P_comp.detach()
    same_cat = comp_cats.unsqueeze(0) == anchor_cats.unsqueeze(1)
    W = torch.where(same_cat, Pm @ Pc.T, torch.zeros(Pm.shape[0], Pc.shape[0], dtype=Pm.dtype))
    W[torch.arange(Pm.shape[0]), paired] = 1.0
    return W


def mixup_contrastive_loss(
    P_mix: torch.Tensor,
    P_comp: torch.Tensor,
    pairing,
    lam_hat,
    comp_cats,
    tau: float,
    weights_i: torch.Tensor = None,
    weights_j: torch.Tensor = None,
) -> torch.Tensor:
    """Contrastive loss anchored at mixed-sample predictions.

    Two terms per mixed row k with components (i, j): lam_hat[k] times a
    weighted contrast toward component i's row, plus (1 - lam_hat[k])
    times the same toward component j's row.  Candidate/negative pool is
    the component prediction matrix; each term is normalized by its own
    positive-pair count.
    """
    if P_comp.shape[0] < 2:
        raise ValueError("need at least 2 component rows")
    pair_i = torch.as_tensor([p[0] for p in pairing])
    pair_j = torch.as_tensor([p[1] for p in pairing])
    comp_cats = torch.as_tensor(comp_cats)
    lam_hat = torch.as_tensor(lam_hat, dtype=P_mix.dtype)

    if weights_i is None:
        weights_i = mixed_pair_weights(P_mix, P_comp, pair_i, comp_cats[pair_i], comp_cats)
    if weights_j is None:
        weights_j = mixed_pair_weights(P_mix, P_comp, pair_j, comp_cats[pair_j], comp_cats)

    sim = (P_mix @ P_comp.T) / tau
    # anchors are mixed rows, never present in the candidate pool, so the
    # denominator runs over every component row
    log_frac = sim - torch.logsumexp(sim, dim=1, keepdim=True)

    total = P_mix.sum() * 0.0
    for lam_side, W in ((lam_hat, weights_i), (1 - lam_hat, weights_j)):
        n_pos = int((W > 0).sum())
        if n_pos:
            total = total - (lam_side.unsqueeze(1) * W * log_frac).sum() / n_pos
    return total


def rmc_loss(P_mix, y_i, y_j, lam_hat, P_comp, pairing, comp_cats, tau) -> torch.Tensor:
    """Reliability-set mixup objective: mixup cross-entropy plus the
    mixup contrastive term."""
    return mixup_ce_loss(P_mix, y_i, y_j, lam_hat) + mixup_contrastive_loss(
        P_mix, P_comp, pairing, lam_hat, comp_cats, tau
    )


def pr_loss(P: torch.Tensor, ema: torch.Tensor) -> torch.Tensor:
    """Early-learning regularizer against EMA predictions.

    Mean of log(1 - <ema_i, p_i>) with the inner product clamped below 1;
    minimizing it pulls current predictions toward the EMA targets.  The
    EMA rows are constants (no gradient flows into them).
    """
    inner = (P * ema.detach()).sum(dim=1).clamp(max=1 - _PR_CLAMP)
    return torch.log1p(-inner).mean()


def base_loss(P_labeled, y_labeled, P_unlabeled, pseudo_y) -> torch.Tensor:
    """Supervised CE on labeled rows, CE on pseudo-labels, plus an
    information-maximization term (confident per sample, diverse in
    aggregate over the batch)."""
    y_labeled = torch.as_tensor(y_labeled, dtype=torch.long)
    pseudo_y = torch.as_tensor(pseudo_y, dtype=torch.long)
    logp_l = torch.log(P_labeled.clamp(min=_LOG_CLAMP))
    logp_u = torch.log(P_unlabeled.clamp(min=_LOG_CLAMP))
    ce_l = -logp_l[torch.arange(P_labeled.shape[0]), y_labeled].mean()
    ce_u = -logp_u[torch.arange(P_unlabeled.shape[0]), pseudo_y].mean()
    ent_per_sample = -(P_unlabeled * logp_u).sum(dim=1).mean()
    mean_p = P_unlabeled.mean(dim=0)
    ent_mean = -(mean_p * torch.log(mean_p.clamp(min=_LOG_CLAMP))).sum()
    return ce_l + ce_u + (ent_per_sample - ent_mean)


def total_loss(base, pwc, rmc, pr, w: LossWeights) -> torch.Tensor:
    """Weighted sum of the four components; aborts naming any part that
    is not finite."""
    parts = {"base": base, "pwc": pwc, "rmc": rmc, "pr": pr}
    for name, value in parts.items():
        v = float(value)
        if not torch.isfinite(torch.as_tensor(v)):
            raise NonFiniteLossError(name, v)
    return base + w.lambda_pwc * pwc + w.lambda_rmc * rmc + w.lambda_pr * pr
