"""Network recipes for MNIST and Fashion-MNIST.

Every model is a ``TreeSpec``: baselines are single-leaf trees and the
conditional models are [2, 2] trees whose root-to-leaf path equals the thin
baseline. Widths were chosen to land on the published parameter totals:

==========================  ==========  ==========
model                       published   built
==========================  ==========  ==========
MNIST baseline              1,256,080   1,256,080
MNIST thin expert              26,695      26,695
MNIST CIGN, independent H      99,856      99,850
MNIST CIGN, F fed to H        120,366     120,194
Fashion baseline            2,688,522   2,688,426
Fashion thin expert           196,362     195,546
Fashion CIGN, independent H   643,016     642,270
Fashion CIGN, F fed to H      713,736     720,238
==========================  ==========  ==========
"""

from __future__ import annotations

from .graph import TreeSpec
from .substrate import conv2d, dropout, flatten, fully_connected, maxpool, relu

ARCHITECTURES = ("mnist", "fashion")
VARIANTS = ("baseline", "thin", "cign_independent", "cign_fed")

PUBLISHED_COUNTS = {
    ("mnist", "baseline"): 1256080,
    ("mnist", "thin"): 26695,
    ("mnist", "cign_independent"): 99856,
    ("mnist", "cign_fed"): 120366,
    ("fashion", "baseline"): 2688522,
    ("fashion", "thin"): 196362,
    ("fashion", "cign_independent"): 643016,
    ("fashion", "cign_fed"): 713736,
}

# Fashion dropout rates selected by grid search, keyed by variant.
FASHION_DROPOUT = {"baseline": 0.35, "thin": 0.35, "cign_fed": 0.15, "cign_independent": 0.2}
FASHION_ROUTER_DROPOUT = 0.35


def _lenet_trunk(c1: int, c2: int):
    return [conv2d(5, c1), relu(), maxpool(2, 2)], [conv2d(5, c2), relu(), maxpool(2, 2)]


def mnist(variant: str = "cign_fed", branching=(2, 2)) -> TreeSpec:
    if variant == "baseline":
        a, b = _lenet_trunk(20, 50)
        f = a + b + [flatten(), fully_connected(500), relu(), fully_connected(10)]
        return TreeSpec.from_levels((), [f], [])
    a, b = _lenet_trunk(20, 15)
    head = [flatten(), fully_connected(25), relu(), fully_connected(10)]
    if variant == "thin":
        return TreeSpec.from_levels((), [a + b + head], [])
    if tuple(branching) != (2, 2):
        raise ValueError("the MNIST recipe is defined for a [2, 2] tree")
    if variant == "cign_fed":
        h = [
            [maxpool(2, 2), flatten(), fully_connected(14), relu(), fully_connected(2)],
            [flatten(), fully_connected(11), relu(), fully_connected(2)],
        ]
        return TreeSpec.from_levels(branching, [a, b, head], h, router_source="fed_from_F")
    if variant == "cign_independent":
        h = [
            [conv2d(5, 5), relu(), maxpool(2, 2), maxpool(2, 2), flatten(),
             fully_connected(16), relu(), fully_connected(2)],
            [conv2d(5, 3), relu(), maxpool(2, 2), flatten(),
             fully_connected(16), relu(), fully_connected(2)],
        ]
        return TreeSpec.from_levels(branching, [a, b, head], h, router_source="independent")
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def fashion(
    variant: str = "cign_fed",
    branching=(2, 2),
    dropout_f: float | None = None,
    dropout_h: float | None = None,
) -> TreeSpec:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    pf = FASHION_DROPOUT[variant] if dropout_f is None else dropout_f
    ph = FASHION_ROUTER_DROPOUT if dropout_h is None else dropout_h

    def fc_head(h1: int, h2: int):
        return [
            flatten(),
            fully_connected(h1), relu(), dropout(pf),
            fully_connected(h2), relu(), dropout(pf),
            fully_connected(10),
        ]

    if variant == "baseline":
        f = [conv2d(5, 32), relu(), maxpool(2, 2),
             conv2d(5, 64), relu(), maxpool(2, 2),
             conv2d(5, 64), relu()] + fc_head(768, 160)
        return TreeSpec.from_levels((), [f], [])
    root = [conv2d(5, 24), relu(), maxpool(2, 2)]
    mid = [conv2d(5, 64), relu(), maxpool(2, 2), conv2d(5, 32), relu()]
    leaf = fc_head(64, 64)
    if variant == "thin":
        return TreeSpec.from_levels((), [root + mid + leaf], [])
    if tuple(branching) != (2, 2):
        raise ValueError("the Fashion-MNIST recipe is defined for a [2, 2] tree")
    if variant == "cign_fed":
        h = [
            [maxpool(2, 2), flatten(), fully_connected(16), relu(), dropout(ph), fully_connected(2)],
            [flatten(), fully_connected(16), relu(), dropout(ph), fully_connected(2)],
        ]
        return TreeSpec.from_levels(branching, [root, mid, leaf], h, router_source="fed_from_F")
    h = [
        [conv2d(5, 8), relu(), maxpool(2, 2), maxpool(2, 2), flatten(),
         fully_connected(32), relu(), dropout(ph), fully_connected(2)],
        [conv2d(5, 8), relu(), maxpool(2, 2), flatten(),
         fully_connected(32), relu(), dropout(ph), fully_connected(2)],
    ]
    return TreeSpec.from_levels(branching, [root, mid, leaf], h, router_source="independent")


def build(architecture: str, variant: str, **kwargs) -> TreeSpec:
    if architecture == "mnist":
        kwargs.pop("dropout_f", None)
        kwargs.pop("dropout_h", None)
        return mnist(variant, **kwargs)
    if architecture == "fashion":
        return fashion(variant, **kwargs)
    raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
