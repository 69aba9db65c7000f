"""Transforms applied to CAMs before they are transferred.

Legal pipelines are ``pool -> normalize`` and ``pool -> binarize -> normalize``
(binarization may also run on unpooled maps).  Each transform checks the
provenance flags of its input and refuses out-of-order use.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .cam import CamStack
from .errors import ConfigError, InvalidTargetError, PolicyError, ProvenanceError, TransformOrderError


@dataclass(frozen=True)
class SubsetPolicy:
    """Which categories take part in the transfer: ``top``/``bottom`` n by teacher logit, or an explicit list."""

    mode: str = "top"
    n: int = 0
    indices: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in ("top", "bottom", "explicit"):
            raise ConfigError(f"transform.subset.mode: expected top, bottom or explicit, got {self.mode!r}")
        if self.mode == "explicit":
            if not self.indices:
                raise ConfigError("transform.subset.indices: required for explicit subsets")
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        elif self.n <= 0:
            raise ConfigError("transform.subset.n: must be positive")

    def to_dict(self):
        d = asdict(self)
        if self.indices is not None:
            d["indices"] = list(self.indices)
        return d


@dataclass(frozen=True)
class TransformConfig:
    pool: tuple = (2, 2)
    norm: str = "l2"
    epsilon: float = 1e-12
    binarize: bool = False
    subset: Optional[SubsetPolicy] = None

    def __post_init__(self):
        if self.pool is not None:
            object.__setattr__(self, "pool", tuple(int(v) for v in self.pool))
            if len(self.pool) != 2 or min(self.pool) <= 0:
                raise ConfigError(f"transform.pool: expected (h, w) of positive ints, got {self.pool}")
        if self.norm not in ("l1", "l2", "none"):
            raise ConfigError(f"transform.norm: expected l1, l2 or none, got {self.norm!r}")
        if not self.epsilon > 0:
            raise ConfigError("transform.epsilon: must be > 0")
        if isinstance(self.subset, dict):
            object.__setattr__(self, "subset", SubsetPolicy(**self.subset))

    def to_dict(self):
        return {
            "pool": None if self.pool is None else list(self.pool),
            "norm": self.norm,
            "epsilon": self.epsilon,
            "binarize": self.binarize,
            "subset": None if self.subset is None else self.subset.to_dict(),
        }


def pool_cams(cams: CamStack, target) -> CamStack:
    """Adaptive average pooling to ``target = (h, w)``.

    Output cell ``p`` averages source rows ``floor(p*H/h)`` to
    ``ceil((p+1)*H/h) - 1``; columns follow the same rule.
    """
    if cams.pooled is not None or cams.normalized != "none" or cams.binarized:
        raise TransformOrderError("pooling must be the first transform applied to a CamStack")
    target = tuple(int(v) for v in target)
    h, w = cams.spatial
    if len(target) != 2 or not (0 < target[0] <= h and 0 < target[1] <= w):
        raise InvalidTargetError(f"cannot pool {h}x{w} CAMs to {target}; pooling never upsamples")
    return cams.evolve(F.adaptive_avg_pool2d(cams.data, target), pooled=target)


def normalize_cams(cams: CamStack, order: str = "l2", epsilon: float = 1e-12) -> CamStack:
    """Divide each category's flattened map by its l1/l2 norm plus ``epsilon``.

    Zero maps stay zero.  ``order="none"`` returns the stack unchanged.
    """
    if cams.normalized != "none":
        raise TransformOrderError("CamStack is already normalized")
    if order == "none":
        return cams
    flat = cams.data.flatten(-2)
    if order == "l2":
        norm = flat.norm(p=2, dim=-1, keepdim=True)
    elif order == "l1":
        norm = flat.abs().sum(dim=-1, keepdim=True)
    else:
        raise ConfigError(f"unknown normalization order {order!r}")
    data = (flat / (norm + epsilon)).view_as(cams.data)
    return cams.evolve(data, normalized=order)


def binarize_cams(cams: CamStack) -> CamStack:
    """Threshold each category map at its own mean: ``>= mean`` becomes 1, the rest 0."""
    if cams.normalized != "none":
        raise TransformOrderError("binarization must happen before normalization")
    if cams.binarized:
        raise TransformOrderError("CamStack is already binarized")
    thresh = cams.data.mean(dim=(-2, -1), keepdim=True)
    return cams.evolve((cams.data >= thresh).to(cams.data.dtype), binarized=True)


def select_categories(logits: torch.Tensor, policy: SubsetPolicy) -> torch.Tensor:
    """Indices of selected categories; rows of a batch are handled independently.

    Ties are broken in favour of the lower index.
    """
    k = logits.shape[-1]
    if policy.mode == "explicit":
        idx = torch.tensor(sorted(set(policy.indices)), dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= k):
            raise PolicyError(f"explicit subset {policy.indices} out of range for {k} categories")
        return idx.expand(*logits.shape[:-1], idx.numel()) if logits.dim() > 1 else idx
    if policy.n > k:
        raise PolicyError(f"cannot select {policy.n} of {k} categories")
    key = -logits if policy.mode == "top" else logits
    order = torch.sort(key.detach(), dim=-1, stable=True).indices
    return order[..., : policy.n]


def subset_mask(logits: torch.Tensor, policy: Optional[SubsetPolicy]) -> Optional[torch.Tensor]:
    """Boolean ``... x K`` mask of selected categories, or ``None`` when every category is used."""
    if policy is None:
        return None
    idx = select_categories(logits, policy)
    mask = torch.zeros(logits.shape, dtype=torch.bool)
    return mask.scatter_(-1, idx, True)


def prepare_cams(cams: CamStack, pool=None, binarize: bool = False, norm: str = "none", epsilon: float = 1e-12) -> CamStack:
    """Bring ``cams`` to the requested state, applying only the steps still missing."""
    if pool is not None:
        pool = tuple(pool)
        if cams.pooled is None:
            if cams.normalized != "none" or cams.binarized:
                raise TransformOrderError("cannot pool a stack that is already binarized or normalized")
            if cams.spatial != pool:
                cams = pool_cams(cams, pool)
            else:
                cams = cams.evolve(cams.data, pooled=pool)
        elif cams.pooled != pool:
            raise ProvenanceError(f"stack pooled to {cams.pooled}, expected {pool}")
    if binarize and not cams.binarized:
        cams = binarize_cams(cams)
    if norm != "none":
        if cams.normalized == "none":
            cams = normalize_cams(cams, norm, epsilon)
        elif cams.normalized != norm:
            raise ProvenanceError(f"stack normalized with {cams.normalized}, expected {norm}")
    return cams
