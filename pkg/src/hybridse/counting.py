"""Multiply-accumulate instrumentation.

A :class:`MacCounter` installed via :func:`count_macs` receives one bump per
multiply-accumulate performed by the contraction kernels (matmul, frequency
convolutions), plus the documented per-element constants for activations and
magnitude extraction. Elementwise products outside those conventions (gate
Hadamards, mask application) are deliberately not counted, matching the
analytic accounting.
"""

from contextlib import contextmanager

# Documented per-element costs; the complexity ordering checks must also hold
# with all of these set to zero.
ACT_COSTS = {
    "relu": 1,
    "tanh": 1,
    "sigmoid": 1,
    "crelu": 5,
    "ctanh": 4,
    "mag": 3,
}

_ACTIVE = None


class MacCounter:
    """Per-branch MAC tally filled in during an instrumented forward pass."""

    def __init__(self, act_costs=None):
        self.buckets = {"real": 0, "complex": 0}
        self.domain = "real"
        self.act_costs = dict(ACT_COSTS if act_costs is None else act_costs)

    @property
    def total(self) -> int:
        return self.buckets["real"] + self.buckets["complex"]


@contextmanager
def count_macs(counter: MacCounter):
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = counter
    try:
        yield counter
    finally:
        _ACTIVE = prev


@contextmanager
def domain(name: str):
    """Attribute bumps inside the block to the given branch."""
    if _ACTIVE is None:
        yield
        return
    prev = _ACTIVE.domain
    _ACTIVE.domain = name
    try:
        yield
    finally:
        _ACTIVE.domain = prev


def bump(n: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.buckets[_ACTIVE.domain] += int(n)


def bump_act(kind: str, elements: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.buckets[_ACTIVE.domain] += _ACTIVE.act_costs.get(kind, 0) * int(elements)
