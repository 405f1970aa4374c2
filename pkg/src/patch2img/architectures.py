"""The three reference network families: Light, Mini-Unet and Dense.

The exact layer diagrams are not available, so these are reconstructions
from a written description. ``REFERENCE_PARAMETER_COUNTS`` holds the target
sizes; :func:`parameter_count` reports what the reconstruction actually has.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import INPUT_ID, LayerSpec, NetworkSpec

FAMILIES = ("light", "mini-unet", "dense")

REFERENCE_PARAMETER_COUNTS = {"light": 8889, "mini-unet": 316657, "dense": 1032588}


class _Builder:
    def __init__(self):
        self.layers = []
        self.last = INPUT_ID
        self._n = {}

    def _id(self, prefix):
        self._n[prefix] = self._n.get(prefix, 0) + 1
        return f"{prefix}{self._n[prefix]}"

    def add(self, kind, inputs=None, **kw):
        lid = self._id({"conv": "conv", "relu": "relu", "sigmoid": "sigmoid",
                        "maxpool2": "pool", "upsample2": "up", "concat": "cat"}[kind])
        if inputs is None:
            inputs = (self.last,)
        self.layers.append(LayerSpec(id=lid, kind=kind, inputs=tuple(inputs), **kw))
        self.last = lid
        return lid

    def conv(self, filters, kernel=3, relu=True):
        self.add("conv", filters=filters, kernel=(kernel, kernel))
        if relu:
            self.add("relu")
        return self.last

    def spec(self, name):
        return NetworkSpec(layers=tuple(self.layers), output=self.last, name=name)


def light():
    """Three-level encoder/decoder with 8 filters per layer (8,889 weights)."""
    b = _Builder()
    first = b.conv(8)
    e1 = b.conv(8)
    b.add("maxpool2")
    b.conv(8)
    e2 = b.conv(8)
    b.add("maxpool2")
    b.conv(8)
    b.conv(8)
    b.add("upsample2")
    b.add("concat", inputs=(b.last, e2))
    b.conv(8)
    b.conv(8)
    b.add("upsample2")
    b.add("concat", inputs=(b.last, e1))
    b.conv(8)
    b.conv(8)
    b.add("concat", inputs=(b.last, first))
    b.conv(8)
    b.conv(8)
    b.conv(8)
    b.conv(1, relu=False)
    b.add("sigmoid")
    return b.spec("light")


def mini_unet(widths=(34, 64, 74)):
    """Two-down/two-up U-Net with two 3x3 convolutions per level."""
    w1, w2, w3 = widths
    b = _Builder()
    b.conv(w1)
    e1 = b.conv(w1)
    b.add("maxpool2")
    b.conv(w2)
    e2 = b.conv(w2)
    b.add("maxpool2")
    b.conv(w3)
    b.conv(w3)
    b.add("upsample2")
    b.add("concat", inputs=(b.last, e2))
    b.conv(w2)
    b.conv(w2)
    b.add("upsample2")
    b.add("concat", inputs=(b.last, e1))
    b.conv(w1)
    b.conv(w1)
    b.conv(1, relu=False)
    b.add("sigmoid")
    return b.spec("mini-unet")


@dataclass
class DenseGrowthRule:
    """Filter-count schedule of the Dense network.

    ``omega`` starts at 8 and grows by 2 after every concatenation;
    ``delta = 4 * omega`` and ``pi = omega / 2``.
    """

    omega: int = 8
    increment: int = 2

    @property
    def delta(self):
        return 4 * self.omega

    @property
    def pi(self):
        return self.omega // 2

    def grow(self):
        if self.omega % 2:
            raise ValueError("omega must stay even so that pi is an integer")
        self.omega += self.increment


DENSE_BLOCKS = (5, 5, 2, 5, 1)


def dense(blocks=DENSE_BLOCKS, head=1):
    """Densely connected encoder/decoder driven by :class:`DenseGrowthRule`.

    Each dense layer is a 1x1 bottleneck to ``delta`` filters followed by a
    3x3 convolution to ``omega`` filters whose output is stacked on the block
    input. Transitions compress with a 1x1 convolution to ``delta`` filters;
    the head narrows to ``pi`` filters before the output.
    """
    rule = DenseGrowthRule()
    b = _Builder()

    def block(n):
        for _ in range(n):
            x = b.last
            b.conv(rule.delta, kernel=1)
            b.conv(rule.omega)
            b.add("concat", inputs=(x, b.last))
            rule.grow()
        return b.conv(rule.delta, kernel=1)

    enc1, enc2, mid, dec2, dec1 = blocks
    b.conv(rule.omega)
    s1 = block(enc1)
    b.add("maxpool2")
    s2 = block(enc2)
    b.add("maxpool2")
    block(mid)
    b.add("upsample2")
    b.add("concat", inputs=(b.last, s2))
    block(dec2)
    b.add("upsample2")
    b.add("concat", inputs=(b.last, s1))
    block(dec1)
    b.conv(rule.pi)
    b.conv(1, kernel=head, relu=False)
    b.add("sigmoid")
    return b.spec("dense")


_BUILDERS = {"light": light, "mini-unet": mini_unet, "dense": dense}


def build_reference(family):
    try:
        return _BUILDERS[family]()
    except KeyError:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}") from None
