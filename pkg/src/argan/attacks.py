"""White-box evasion attacks and the surrogate-transfer black-box protocol.

All attacks are untargeted, operate on batched inputs (B, ...) against a
differentiable classifier returning per-class logits, and clip outputs to the
pixel box [0, 1]. ``success`` marks samples whose predicted label changed
relative to the clean prediction under the classifier being attacked (for
transfer attacks: under the target, not the surrogate).

Perturbation-budget semantics differ per family:

* FGSM: one signed-gradient step of size epsilon (an L-inf bound).
* PGD: signed-gradient ascent with per-step projection onto the L2 ball of
  radius epsilon * sqrt(n) and onto the pixel box; step size epsilon / 4.
* DeepFool: computes the minimal boundary-crossing perturbation; epsilon acts
  only as an optional post-hoc L2 cap of epsilon * sqrt(n).
* C&W (L2): has no epsilon; trades ||delta||_2 against a misclassification
  objective with fixed weight c (no binary search at the small iteration
  budgets used here).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F

PIXEL_BOUNDS = (0.0, 1.0)


class AttackFamily(str, Enum):
    FGSM = "fgsm"
    DEEPFOOL = "deepfool"
    CW_L2 = "cw_l2"
    PGD_L2 = "pgd_l2"


class ThreatModel(str, Enum):
    WHITE_BOX = "white_box"
    BLACK_BOX = "black_box"


@dataclass
class AttackConfig:
    family: AttackFamily
    epsilon: float = 0.1
    max_iterations: int = 100
    overshoot: float = 0.02          # DeepFool eta
    confidence_weight: float = 1.0   # C&W c
    step_size: float = 0.01          # C&W learning rate
    threat_model: ThreatModel = ThreatModel.WHITE_BOX

    def __post_init__(self):
        self.family = AttackFamily(self.family)
        self.threat_model = ThreatModel(self.threat_model)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not self.overshoot < 0.5:
            raise ValueError("overshoot must be << 1 (enforced < 0.5)")
        if self.confidence_weight <= 0:
            raise ValueError("confidence_weight must be > 0")


@dataclass
class AttackResult:
    adversarial: torch.Tensor       # (B, ...) clipped to the pixel box
    perturbation: torch.Tensor      # adversarial - original
    success: torch.Tensor           # (B,) bool: prediction changed vs clean input
    iterations_used: torch.Tensor   # (B,) int
    perturbation_l2: torch.Tensor   # (B,)
    perturbation_linf: torch.Tensor # (B,)
    family: AttackFamily

    @property
    def success_rate(self) -> float:
        return self.success.float().mean().item()


def _flat_l2(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).norm(2, dim=1)


def _finish(x: torch.Tensor, adv: torch.Tensor, classifier, family: AttackFamily,
            iterations) -> AttackResult:
    adv = adv.detach().clamp(*PIXEL_BOUNDS)
    delta = adv - x
    with torch.no_grad():
        clean_pred = classifier(x).argmax(dim=1)
        adv_pred = classifier(adv).argmax(dim=1)
    b = x.shape[0]
    if not torch.is_tensor(iterations):
        iterations = torch.full((b,), int(iterations), dtype=torch.long)
    return AttackResult(
        adversarial=adv,
        perturbation=delta,
        success=adv_pred != clean_pred,
        iterations_used=iterations,
        perturbation_l2=_flat_l2(delta),
        perturbation_linf=delta.flatten(1).abs().max(dim=1).values,
        family=family,
    )


def _input_loss_grad(classifier, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    x_var = x.detach().requires_grad_(True)
    loss = F.cross_entropy(classifier(x_var), labels)
    grad, = torch.autograd.grad(loss, x_var)
    return grad


def fgsm(x: torch.Tensor, labels: torch.Tensor, classifier, epsilon: float) -> AttackResult:
    """Single signed-gradient step: clip(x + eps * sign(grad_x loss), 0, 1)."""
    grad = _input_loss_grad(classifier, x, labels)
    adv = x + epsilon * grad.sign()
    return _finish(x, adv, classifier, AttackFamily.FGSM, iterations=1)


def pgd_l2(x: torch.Tensor, labels: torch.Tensor, classifier, epsilon: float,
           max_iterations: int = 100) -> AttackResult:
    """Iterated signed-gradient ascent with L2-ball and pixel-box projection.

    delta_{t+1} = delta_t + (eps/4) * sign(grad), then projected onto
    ||delta||_2 <= eps * sqrt(n) and onto x + delta in [0, 1]. The box
    projection only shrinks coordinates of delta, so the ball constraint
    survives it.
    """
    n = x[0].numel()
    radius = epsilon * (n ** 0.5)
    alpha = epsilon / 4.0
    delta = torch.zeros_like(x)
    for _ in range(max_iterations):
        if radius == 0:
            break
        grad = _input_loss_grad(classifier, x + delta, labels)
        delta = delta + alpha * grad.sign()
        factor = (_flat_l2(delta) / radius).clamp(min=1.0)
        delta = delta / factor.view(-1, *([1] * (x.ndim - 1)))
        delta = (x + delta).clamp(*PIXEL_BOUNDS) - x
    return _finish(x, x + delta, classifier, AttackFamily.PGD_L2, iterations=max_iterations)


def deepfool(x: torch.Tensor, classifier, overshoot: float = 0.02,
             max_iterations: int = 50, epsilon_cap: float | None = None) -> AttackResult:
    """Minimal-L2 attack by iterative linearization of the decision boundary.

    At each step, for the currently predicted class l, the nearest linearized
    boundary over competing classes k is

        argmin_k |f_k - f_l| / ||grad f_k - grad f_l||

    and the update moves exactly onto that boundary. The accumulated
    perturbation is scaled by (1 + overshoot) both when checking for a label
    flip and in the returned delta. If ``epsilon_cap`` is given, the final
    delta is rescaled down to L2 norm epsilon_cap * sqrt(n) when it exceeds it.
    """
    b = x.shape[0]
    n_flat = x[0].numel()
    with torch.no_grad():
        orig_pred = classifier(x).argmax(dim=1)
        n_classes = classifier(x[:1]).shape[1]

    r_total = torch.zeros_like(x)
    iterations = torch.zeros(b, dtype=torch.long)
    active = torch.ones(b, dtype=torch.bool)

    for _ in range(max_iterations):
        if not active.any():
            break
        idx = torch.nonzero(active).flatten()
        x_cur = (x[idx] + (1.0 + overshoot) * r_total[idx]).detach().requires_grad_(True)
        logits = classifier(x_cur)
        still = logits.argmax(dim=1) == orig_pred[idx]
        if not still.any():
            active[idx] = False
            break
        # Per-class input gradients for the active samples.
        grads = []
        for k in range(n_classes):
            g, = torch.autograd.grad(logits[:, k].sum(), x_cur, retain_graph=True)
            grads.append(g)
        grads = torch.stack(grads, dim=1)            # (a, n_classes, ...)
        logits = logits.detach()

        a = idx.shape[0]
        l = orig_pred[idx]
        f_l = logits.gather(1, l.unsqueeze(1)).squeeze(1)
        g_l = grads.gather(1, l.view(a, 1, *([1] * (x.ndim - 1))).expand(a, 1, *x.shape[1:])
                           ).squeeze(1)
        best_dist = torch.full((a,), float("inf"))
        best_step = torch.zeros_like(x[idx])
        for k in range(n_classes):
            mask = k != l
            if not mask.any():
                continue
            w = grads[:, k] - g_l
            f_diff = logits[:, k] - f_l
            w_norm = _flat_l2(w).clamp(min=1e-12)
            dist = f_diff.abs() / w_norm
            step = (f_diff.abs() / (w_norm ** 2)).view(a, *([1] * (x.ndim - 1))) * w
            better = mask & still & (dist < best_dist)
            best_dist = torch.where(better, dist, best_dist)
            best_step = torch.where(better.view(a, *([1] * (x.ndim - 1))), step, best_step)

        r_total[idx[still]] += best_step[still]
        iterations[idx[still]] += 1
        active[idx[~still]] = False

    delta = (1.0 + overshoot) * r_total
    if epsilon_cap is not None:
        cap = epsilon_cap * (n_flat ** 0.5)
        norms = _flat_l2(delta)
        scale = (cap / norms.clamp(min=1e-12)).clamp(max=1.0)
        delta = delta * scale.view(-1, *([1] * (x.ndim - 1)))
    return _finish(x, x + delta, classifier, AttackFamily.DEEPFOOL, iterations=iterations)


def cw_l2(x: torch.Tensor, labels: torch.Tensor, classifier,
          confidence_weight: float = 1.0, step_size: float = 0.01,
          max_iterations: int = 10) -> AttackResult:
    """L2 optimization attack: minimize ||delta||_2 + c * f_obj(x + delta).

    f_obj = max(logit_true - max_other_logit, 0); the pixel box is enforced
    through a tanh change of variables, and c stays fixed (no binary search).
    Returns the iterate with the best objective value seen.
    """
    eps = 1e-6
    x_clamped = x.clamp(PIXEL_BOUNDS[0] + eps, PIXEL_BOUNDS[1] - eps)
    w = torch.atanh((2.0 * x_clamped - 1.0) * (1.0 - eps)).detach().requires_grad_(True)
    optimizer = torch.optim.Adam([w], lr=step_size)

    onehot = F.one_hot(labels, num_classes=classifier(x[:1]).shape[1]).bool()
    best_obj = torch.full((x.shape[0],), float("inf"))
    best_adv = x.clone()

    def objective(adv):
        delta = adv - x
        l2 = (delta.flatten(1).pow(2).sum(dim=1) + 1e-12).sqrt()
        logits = classifier(adv)
        logit_true = logits[onehot]
        max_other = logits.masked_fill(onehot, float("-inf")).max(dim=1).values
        f_obj = (logit_true - max_other).clamp(min=0.0)
        return l2 + confidence_weight * f_obj

    for _ in range(max_iterations + 1):   # evaluates the initial point too
        adv = (torch.tanh(w) + 1.0) / 2.0
        obj = objective(adv)
        with torch.no_grad():
            improved = obj < best_obj
            best_obj = torch.where(improved, obj.detach(), best_obj)
            best_adv = torch.where(improved.view(-1, *([1] * (x.ndim - 1))),
                                   adv.detach(), best_adv)
        optimizer.zero_grad()
        obj.sum().backward()
        optimizer.step()

    return _finish(x, best_adv, classifier, AttackFamily.CW_L2, iterations=max_iterations)


def run_attack(x: torch.Tensor, labels: torch.Tensor, classifier,
               config: AttackConfig) -> AttackResult:
    """Dispatch one attack family with its configured parameters."""
    classifier.eval()
    if config.family == AttackFamily.FGSM:
        return fgsm(x, labels, classifier, config.epsilon)
    if config.family == AttackFamily.PGD_L2:
        return pgd_l2(x, labels, classifier, config.epsilon, config.max_iterations)
    if config.family == AttackFamily.DEEPFOOL:
        return deepfool(x, classifier, config.overshoot, config.max_iterations,
                        epsilon_cap=config.epsilon)
    if config.family == AttackFamily.CW_L2:
        return cw_l2(x, labels, classifier, config.confidence_weight,
                     config.step_size, config.max_iterations)
    raise ValueError(f"unknown attack family {config.family}")


def black_box_attack(x: torch.Tensor, labels: torch.Tensor, surrogate_classifier,
                     target_classifier, config: AttackConfig) -> AttackResult:
    """Transfer attack: craft white-box against the surrogate, score on the target."""
    if surrogate_classifier is target_classifier:
        warnings.warn("surrogate is the target classifier; this degenerates to a "
                      "white-box attack", stacklevel=2)
    crafted = run_attack(x, labels, surrogate_classifier, config)
    with torch.no_grad():
        clean_pred = target_classifier(x).argmax(dim=1)
        adv_pred = target_classifier(crafted.adversarial).argmax(dim=1)
    return AttackResult(
        adversarial=crafted.adversarial,
        perturbation=crafted.perturbation,
        success=adv_pred != clean_pred,
        iterations_used=crafted.iterations_used,
        perturbation_l2=crafted.perturbation_l2,
        perturbation_linf=crafted.perturbation_linf,
        family=config.family,
    )
