"""Parameter-overhead audit: differential vs. standard attention at equal shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .attention import DIFFERENTIAL, STANDARD
from .encoders import EncoderConfig, b16_configs, parameter_shapes, toy_configs


@dataclass(frozen=True)
class AuditResult:
    total_standard: int
    total_variant: int
    extra: int
    closed_form: int
    ratio: float

    @property
    def percent(self) -> float:
        return 100.0 * self.ratio

    def as_dict(self) -> dict[str, object]:
        return {"total_standard": self.total_standard, "total_variant": self.total_variant,
                "extra_params": self.extra, "closed_form_extra": self.closed_form,
                "overhead_ratio": self.ratio, "overhead_percent": self.percent}


def count_parameters(vision: EncoderConfig, text: EncoderConfig, embed_dim: int) -> int:
    return sum(math.prod(s) for s in parameter_shapes(vision, text, embed_dim).values())


def closed_form_extra(cfg: EncoderConfig) -> int:
    """depth * (lambda sets per layer) * 4 * (d_h / 2) for a differential tower."""
    if cfg.attention_variant != DIFFERENTIAL:
        return 0
    sets = cfg.num_heads if cfg.lambda_per_head else 1
    return cfg.depth * sets * 4 * (cfg.model_dim // cfg.num_heads // 2)


def param_audit(standard: tuple[EncoderConfig, EncoderConfig],
                variant: tuple[EncoderConfig, EncoderConfig], embed_dim: int) -> AuditResult:
    """Enumerate named parameters of both models and compare with the closed form."""
    total_std = count_parameters(*standard, embed_dim)
    total_var = count_parameters(*variant, embed_dim)
    closed = sum(closed_form_extra(c) for c in variant) - sum(closed_form_extra(c) for c in standard)
    extra = total_var - total_std
    return AuditResult(total_std, total_var, extra, closed, extra / total_std)


def audit_shape(shape: str = "b16", lambda_per_head: bool = False,
                towers: str = "both") -> AuditResult:
    """Audit standard vs. differential attention at ``toy`` or ``b16`` shapes.

    ``towers`` selects where differential attention goes: ``both`` or ``vision``.
    """
    if shape == "toy":
        vision, text, e = toy_configs()
    elif shape == "b16":
        vision, text, e = b16_configs()
    else:
        raise ValueError(f"unknown audit shape {shape!r}; use toy or b16")
    std = (replace(vision, attention_variant=STANDARD), replace(text, attention_variant=STANDARD))
    diff = dict(attention_variant=DIFFERENTIAL, lambda_per_head=lambda_per_head)
    dv = replace(vision, **diff)
    dt = replace(text, **diff) if towers == "both" else std[1]
    return param_audit(std, (dv, dt), e)
