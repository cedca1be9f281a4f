"""
Channel saliency taxonomy.

A pruning signal is one point of a four-axis grid:

    S(C_i) = (1 / L) * R(F(X))

with base input X (a channel's weights or its output feature map),
pointwise metric f applied elementwise (F), reduction R to one value per
channel and scaling denominator L. This module holds the grid, the
component formulas, the enumeration rules and the catalogue of published
signals expressed as grid points.

Signal ids follow base.pointwise[.hessvariant].reduction.scaling, e.g.
weights.value.l1.none or activations.taylor2_full.app1.square_of_sum.none.
"""

from __future__ import annotations

import difflib
import logging
from enum import Enum
from typing import NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from prunetax.core.errors import MissingDerivativeError, PruneTaxError, UnknownSignalError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class BaseInput(str, Enum):
    """What the signal is computed from."""

    WEIGHTS = "weights"          # the channel's filter, shape c x k x k
    ACTIVATIONS = "activations"  # the channel's output feature map, shape h x w


class Pointwise(str, Enum):
    """Per-element saliency f(x)."""

    VALUE = "value"                          # x
    GRADIENT = "gradient"                    # dL/dx
    TAYLOR1 = "taylor1"                      # -x dL/dx
    TAYLOR2_FULL = "taylor2_full"            # -x dL/dx + x^2/2 d2L/dx2
    TAYLOR2_2ND_ONLY = "taylor2_2nd_only"    # x^2/2 d2L/dx2
    INDICATOR_POSITIVE = "indicator_positive"  # 1 if x > 0 else 0

    @property
    def uses_gradient(self) -> bool:
        return self in (Pointwise.GRADIENT, Pointwise.TAYLOR1, Pointwise.TAYLOR2_FULL)

    @property
    def uses_hessian(self) -> bool:
        return self in (Pointwise.TAYLOR2_FULL, Pointwise.TAYLOR2_2ND_ONLY)


class HessianVariant(str, Enum):
    """Which diagonal second-derivative estimate feeds the metric."""

    APP1 = "app1"  # layer-diagonal backpropagation
    APP2 = "app2"  # Gauss-Newton, (dL/dx)^2
    NONE = "none"


class Reduction(str, Enum):
    """Aggregation of pointwise values to one channel value."""

    SUM = "sum"
    L1 = "l1"
    ABS_OF_SUM = "abs_of_sum"
    SUM_OF_SQUARES = "sum_of_squares"
    SQUARE_OF_SUM = "square_of_sum"
    L2 = "l2"


class Scaling(str, Enum):
    """Denominator L applied to the reduced value."""

    NONE = "none"
    CARDINALITY = "cardinality"
    LAYERWISE_L1 = "layerwise_l1"
    LAYERWISE_L2 = "layerwise_l2"
    WEIGHTS_REMOVED = "weights_removed"


class Category(str, Enum):
    """Information a signal needs: static weights, feature maps, or a labelled loss."""

    WEIGHTS = "weights"
    OUTPUTS = "outputs"
    GRADIENT = "gradient"


class TapPoint(str, Enum):
    """Which tensor is a convolution channel's output feature map."""

    POST_NONLINEARITY = "post_nonlinearity"
    CONV_OUTPUT = "conv_output"


class SignalSpec(BaseModel):
    """One point in the taxonomy; immutable and hashable."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    base: BaseInput
    pointwise: Pointwise
    hessian_variant: HessianVariant = HessianVariant.NONE
    reduction: Reduction
    scaling: Scaling

    @model_validator(mode="after")
    def _check_hessian_variant(self) -> SignalSpec:
        if self.pointwise.uses_hessian and self.hessian_variant == HessianVariant.NONE:
            raise ValueError(f"{self.pointwise.value} needs hessian_variant app1 or app2")
        if not self.pointwise.uses_hessian and self.hessian_variant != HessianVariant.NONE:
            raise ValueError(f"{self.pointwise.value} takes no hessian_variant")
        return self

    @property
    def id(self) -> str:
        parts = [self.base.value, self.pointwise.value]
        if self.hessian_variant != HessianVariant.NONE:
            parts.append(self.hessian_variant.value)
        parts.extend([self.reduction.value, self.scaling.value])
        return ".".join(parts)

    @property
    def needs_gradient(self) -> bool:
        return self.pointwise.uses_gradient or self.hessian_variant == HessianVariant.APP2

    @property
    def needs_data(self) -> bool:
        """False only for signals computed from weight values alone."""
        return self.base == BaseInput.ACTIVATIONS or self.pointwise.uses_gradient or self.pointwise.uses_hessian

    @property
    def category(self) -> Category:
        if self.pointwise.uses_gradient or self.pointwise.uses_hessian:
            return Category.GRADIENT
        return Category.WEIGHTS if self.base == BaseInput.WEIGHTS else Category.OUTPUTS

    @property
    def triple(self) -> str:
        """The id without its reduction; pairs signals differing only in R."""
        parts = [self.base.value, self.pointwise.value]
        if self.hessian_variant != HessianVariant.NONE:
            parts.append(self.hessian_variant.value)
        parts.append(self.scaling.value)
        return ".".join(parts)

    @classmethod
    def from_id(cls, signal_id: str) -> SignalSpec:
        parts = signal_id.strip().split(".")
        try:
            if len(parts) == 5:
                base, pointwise, variant, reduction, scaling = parts
            elif len(parts) == 4:
                base, pointwise, reduction, scaling = parts
                variant = HessianVariant.NONE.value
            else:
                raise ValueError(signal_id)
            return cls(
                base=BaseInput(base),
                pointwise=Pointwise(pointwise),
                hessian_variant=HessianVariant(variant),
                reduction=Reduction(reduction),
                scaling=Scaling(scaling),
            )
        except ValueError:
            raise UnknownSignalError(signal_id, _suggest(signal_id)) from None

    def __str__(self) -> str:
        return self.id


# =============================================================================
# Components
# =============================================================================

def pointwise_eval(
    spec: SignalSpec,
    x: ArrayLike,
    g1: Optional[ArrayLike] = None,
    g2: Optional[ArrayLike] = None,
) -> ArrayLike:
    """
    Evaluate f elementwise.

    x is the value, g1 = dL/dx, g2 = d2L/dx2 from the signal's Hessian
    variant. Works on scalars and arrays alike. The indicator maps
    x == 0 to 0 (a unit that does not fire).
    """
    metric = spec.pointwise
    if metric.uses_gradient and g1 is None:
        raise MissingDerivativeError("dL/dx", f"{metric.value} needs the gradient")
    if metric.uses_hessian and g2 is None:
        raise MissingDerivativeError("d2L/dx2", f"{metric.value} needs {spec.hessian_variant.value}")

    if metric == Pointwise.VALUE:
        return x
    if metric == Pointwise.GRADIENT:
        return g1
    if metric == Pointwise.TAYLOR1:
        return -x * g1
    if metric == Pointwise.TAYLOR2_FULL:
        return -x * g1 + 0.5 * x * x * g2
    if metric == Pointwise.TAYLOR2_2ND_ONLY:
        return 0.5 * x * x * g2
    if metric == Pointwise.INDICATOR_POSITIVE:
        if np.isscalar(x):
            return 1.0 if x > 0 else 0.0
        return (np.asarray(x) > 0).astype(np.asarray(x).dtype)
    raise PruneTaxError(f"unhandled pointwise metric {metric}")


def reduce_axis(reduction: Reduction, values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Apply R along `axis`."""
    values = np.asarray(values)
    if values.shape[axis] == 0:
        raise PruneTaxError("cannot reduce an empty vector")
    if reduction == Reduction.SUM:
        return values.sum(axis=axis)
    if reduction == Reduction.L1:
        return np.abs(values).sum(axis=axis)
    if reduction == Reduction.ABS_OF_SUM:
        return np.abs(values.sum(axis=axis))
    if reduction == Reduction.SUM_OF_SQUARES:
        return np.square(values).sum(axis=axis)
    if reduction == Reduction.SQUARE_OF_SUM:
        return np.square(values.sum(axis=axis))
    if reduction == Reduction.L2:
        return np.sqrt(np.square(values).sum(axis=axis))
    raise PruneTaxError(f"unhandled reduction {reduction}")


def reduce(reduction: Reduction, values: np.ndarray) -> float:
    """R over a nonempty vector."""
    return float(reduce_axis(reduction, np.asarray(values, dtype=np.float64).reshape(-1)))


class LayerContext(BaseModel):
    """
    What a scaling needs about one layer.

    reduced holds S~ for every channel of the layer (pruned channels 0);
    cardinality and weights_removed are per channel.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    reduced: list[float]
    cardinality: list[int]
    weights_removed: list[int] = Field(default_factory=list)


class Denominator(NamedTuple):
    value: float
    fallback: bool  # True when the raw denominator was zero and L := 1 was used


def scale_denominator(scaling: Scaling, context: LayerContext, channel: int = 0) -> Denominator:
    """
    L for one channel.

    Layerwise scalings use only the channels of the same layer. A zero
    denominator falls back to L = 1 and reports it.
    """
    if scaling == Scaling.NONE:
        raw = 1.0
    elif scaling == Scaling.CARDINALITY:
        raw = float(context.cardinality[channel])
    elif scaling == Scaling.LAYERWISE_L1:
        raw = float(np.abs(np.asarray(context.reduced, dtype=np.float64)).sum())
    elif scaling == Scaling.LAYERWISE_L2:
        raw = float(np.sqrt(np.square(np.asarray(context.reduced, dtype=np.float64)).sum()))
    elif scaling == Scaling.WEIGHTS_REMOVED:
        if not context.weights_removed:
            raise MissingDerivativeError("weights_removed", "scaling needs weights-removed counts")
        raw = float(context.weights_removed[channel])
    else:
        raise PruneTaxError(f"unhandled scaling {scaling}")

    if raw == 0.0:
        return Denominator(1.0, True)
    return Denominator(raw, False)


# =============================================================================
# Enumeration
# =============================================================================

POINTWISE_VARIANTS: list[tuple[Pointwise, HessianVariant]] = [
    (Pointwise.VALUE, HessianVariant.NONE),
    (Pointwise.GRADIENT, HessianVariant.NONE),
    (Pointwise.TAYLOR1, HessianVariant.NONE),
    (Pointwise.TAYLOR2_FULL, HessianVariant.APP1),
    (Pointwise.TAYLOR2_FULL, HessianVariant.APP2),
    (Pointwise.TAYLOR2_2ND_ONLY, HessianVariant.APP1),
    (Pointwise.TAYLOR2_2ND_ONLY, HessianVariant.APP2),
    (Pointwise.INDICATOR_POSITIVE, HessianVariant.NONE),
]

# Pointwise metrics whose output is provably >= 0 for every input.
NONNEGATIVE_POINTWISE = {
    (Pointwise.INDICATOR_POSITIVE, HessianVariant.NONE),
    (Pointwise.TAYLOR2_2ND_ONLY, HessianVariant.APP2),
}

# Metrics with values in {0, 1}, where f^2 == f.
BINARY_POINTWISE = {(Pointwise.INDICATOR_POSITIVE, HessianVariant.NONE)}

FULL_GRID_SIZE = len(BaseInput) * len(POINTWISE_VARIANTS) * len(Reduction) * len(Scaling)
DEFAULT_SIGNAL_COUNT = 430


class ValidityRules(BaseModel):
    """
    Rules removing grid points that equal another point value-for-value.

    nonnegative_duplicates: for f >= 0, l1 and abs_of_sum equal sum.
    binary_duplicates: for f in {0, 1}, sum_of_squares equals sum.
    """

    model_config = ConfigDict(extra="forbid")

    nonnegative_duplicates: bool = True
    binary_duplicates: bool = True

    @classmethod
    def named(cls, name: str) -> ValidityRules:
        if name == "default":
            return cls()
        if name == "full":
            return cls(nonnegative_duplicates=False, binary_duplicates=False)
        raise KeyError(f"unknown rule set '{name}'; choose from default, full")

    def redundant(self, variant: tuple[Pointwise, HessianVariant], reduction: Reduction) -> Optional[str]:
        """Name of the rule dropping this combination, or None to keep it."""
        if self.nonnegative_duplicates and variant in NONNEGATIVE_POINTWISE:
            if reduction in (Reduction.L1, Reduction.ABS_OF_SUM):
                return "nonnegative_duplicates"
        if self.binary_duplicates and variant in BINARY_POINTWISE:
            if reduction == Reduction.SUM_OF_SQUARES:
                return "binary_duplicates"
        return None


def enumerate_signals(rules: Optional[ValidityRules] = None) -> list[SignalSpec]:
    """Every valid grid point, in base/pointwise/reduction/scaling order."""
    rules = rules or ValidityRules()
    signals: list[SignalSpec] = []
    dropped: dict[str, int] = {}
    for base in BaseInput:
        for pointwise, variant in POINTWISE_VARIANTS:
            for reduction in Reduction:
                rule = rules.redundant((pointwise, variant), reduction)
                if rule is not None:
                    dropped[rule] = dropped.get(rule, 0) + len(Scaling)
                    continue
                for scaling in Scaling:
                    signals.append(SignalSpec(
                        base=base,
                        pointwise=pointwise,
                        hessian_variant=variant,
                        reduction=reduction,
                        scaling=scaling,
                    ))
    for rule, count in dropped.items():
        logger.debug("enumeration rule %s dropped %d signals", rule, count)
    logger.debug("enumerated %d of %d grid points", len(signals), FULL_GRID_SIZE)
    return signals


# =============================================================================
# Published signals
# =============================================================================

class PublishedSignal(BaseModel):
    """A published pruning signal mapped onto the grid."""

    model_config = ConfigDict(frozen=True)

    name: str
    spec: SignalSpec
    note: str = ""


def _published(name: str, signal_id: str, note: str = "") -> PublishedSignal:
    return PublishedSignal(name=name, spec=SignalSpec.from_id(signal_id), note=note)


PUBLISHED_SIGNALS: list[PublishedSignal] = [
    _published("L1-norm of weights", "weights.value.l1.none"),
    _published("Min-Weight", "weights.value.sum_of_squares.cardinality"),
    _published("APoZ", "activations.indicator_positive.sum.cardinality",
               "fraction of firing units; low values are pruned"),
    _published("Fisher Information", "activations.taylor1.square_of_sum.none",
               "published constant scaling 2 normalised to 1; constants do not change rankings"),
    _published("1st Order Taylor", "activations.taylor1.abs_of_sum.cardinality"),
    _published("1st Order Taylor, w. norm", "activations.taylor1.abs_of_sum.layerwise_l2"),
    _published("Average of gradient", "activations.gradient.sum.cardinality"),
    _published("L2 norm of activations", "activations.value.l2.none"),
]


def published_signal(name: str) -> SignalSpec:
    """Grid point of a published signal (name matched case-insensitively)."""
    wanted = name.strip().lower()
    for entry in PUBLISHED_SIGNALS:
        if entry.name.lower() == wanted:
            return entry.spec
    raise UnknownSignalError(name, [entry.name for entry in PUBLISHED_SIGNALS])


def _suggest(token: str) -> list[str]:
    candidates = [s.id for s in enumerate_signals(ValidityRules.named("full"))]
    candidates += [entry.name for entry in PUBLISHED_SIGNALS]
    return difflib.get_close_matches(token, candidates, n=5, cutoff=0.5)


def resolve_signal(token: str) -> SignalSpec:
    """Accept a signal id or a published name."""
    token = token.strip()
    if token.count(".") >= 3:
        return SignalSpec.from_id(token)
    try:
        return published_signal(token)
    except UnknownSignalError:
        raise UnknownSignalError(token, _suggest(token)) from None


def resolve_signals(tokens: list[str]) -> list[SignalSpec]:
    """
    Expand a selection into specs, keeping first occurrences.

    "all" expands to the default enumeration, "published" to the
    published catalogue; anything else is an id or published name.
    """
    specs: list[SignalSpec] = []
    seen: set[str] = set()
    for token in tokens:
        lowered = token.strip().lower()
        if lowered == "all":
            expanded = enumerate_signals()
        elif lowered == "published":
            expanded = [entry.spec for entry in PUBLISHED_SIGNALS]
        else:
            expanded = [resolve_signal(token)]
        for spec in expanded:
            if spec.id not in seen:
                seen.add(spec.id)
                specs.append(spec)
    return specs
