"""Training losses: flow reconstruction, mask consistency, entropy, total.

Reconstruction is the mean over pixels of the per-pixel Euclidean norm of
the 3-channel difference, applied to motion pairs only (the static pair's
zero-flow reconstruction is dropped). Consistency pulls the two motion
masks of a reference frame together and pulls the static mask toward
their average. Entropy pushes opacities toward one-hot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .flowdecoder import LayeredFlow

ENTROPY_LOG_FLOOR = 1e-8


@dataclass
class LossWeights:
    recon: float = 100.0
    entropy: float = 0.01
    consistency: float = 0.01

    def __post_init__(self):
        if min(self.recon, self.entropy, self.consistency) < 0:
            raise ValueError("loss weights must be non-negative")


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel L2 norm of the RGB difference; shapes (..., 3, H, W)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    return diff.square().sum(dim=-3).sqrt().mean()


def consistency_loss(alphas_a: torch.Tensor, alphas_b: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over (slot, pixel) entries; shapes (..., 2, H, W)."""
    if alphas_a.shape != alphas_b.shape:
        raise ValueError(f"shape mismatch {tuple(alphas_a.shape)} vs {tuple(alphas_b.shape)}")
    return (alphas_a - alphas_b).square().mean()


def entropy_loss(alphas: torch.Tensor) -> torch.Tensor:
    """Mean over (slot, pixel) of -alpha*log(alpha), zero for one-hot maps.

    The log argument is floored at 1e-8 so exact one-hot inputs stay finite;
    the alpha multiplier is left unclamped so the zero limit is exact.
    """
    return (-alphas * alphas.clamp(ENTROPY_LOG_FLOOR, 1.0).log()).mean()


@dataclass
class ReferencePairs:
    """The three decoded pairs sharing one reference frame.

    ``motion`` holds the two (i, j), (i, k) reconstructions aligned with
    ``targets`` (colorized flow images); ``static`` is the (i, i) pair.
    """

    static: LayeredFlow
    motion: list[LayeredFlow]
    targets: list[torch.Tensor]

    def validate(self) -> None:
        if len(self.motion) != 2 or len(self.targets) != 2:
            raise ValueError(
                f"each reference needs exactly 2 motion pairs with targets, got "
                f"{len(self.motion)} pairs / {len(self.targets)} targets"
            )
        if self.static.reference is not None and self.static.reference != self.static.target:
            raise ValueError(
                f"static pair must satisfy reference == target, got "
                f"({self.static.reference}, {self.static.target})"
            )


@dataclass
class LossReport:
    """Scalar components plus the per-pair breakdown for one step."""

    recon: float
    cons: float
    entro: float
    total: float
    pairs: list[dict] = field(default_factory=list)


def total_loss(groups: list[ReferencePairs], weights: LossWeights,
               detach_static_target: bool = False):
    """Assemble the weighted total over all reference groups.

    Returns the differentiable total plus a LossReport. Reconstruction
    averages over the 2T motion pairs, entropy over all pairs carrying an
    entropy term (the static pair included), consistency over references.
    """
    if not groups:
        raise ValueError("no reference groups given")
    recon_terms: list[torch.Tensor] = []
    entropy_terms: list[torch.Tensor] = []
    cons_terms: list[torch.Tensor] = []
    breakdown: list[dict] = []
    for group in groups:
        group.validate()
        motion_alphas = []
        for pair, target in zip(group.motion, group.targets):
            r = recon_loss(pair.composite, target)
            e = entropy_loss(pair.alphas.squeeze(-3))
            recon_terms.append(r)
            entropy_terms.append(e)
            motion_alphas.append(pair.alphas)
            breakdown.append({
                "reference": pair.reference, "target": pair.target, "static": False,
                "recon": float(r.detach()), "entropy": float(e.detach()),
            })
        e_static = entropy_loss(group.static.alphas.squeeze(-3))
        entropy_terms.append(e_static)
        breakdown.append({
            "reference": group.static.reference, "target": group.static.target,
            "static": True, "entropy": float(e_static.detach()),
        })
        pair_mse = consistency_loss(motion_alphas[0], motion_alphas[1])
        avg = (motion_alphas[0] + motion_alphas[1]) / 2
        if detach_static_target:
            avg = avg.detach()
        static_mse = consistency_loss(group.static.alphas, avg)
        cons_terms.append(pair_mse + static_mse)

    recon = torch.stack(recon_terms).mean()
    entro = torch.stack(entropy_terms).mean()
    cons = torch.stack(cons_terms).mean()
    total = weights.recon * recon + weights.entropy * entro + weights.consistency * cons
    report = LossReport(float(recon.detach()), float(cons.detach()), float(entro.detach()),
                        float(total.detach()), breakdown)
    return total, report
