"""U-Net prior construction: four architecture variants over one topology.

Two downstream conv blocks (35, 70 then 70, 140 filters before width
scaling), a two-conv 70-filter bottleneck, two upstream blocks (140, 70 then
70, 35) each starting with x2 bilinear upsampling, skip concatenations from
the downstream blocks, and a linear output conv. Variants; plain
convolutions, a constant dilation rate, an exponential dilation schedule,
and the exponential schedule plus dense in-block connectivity with 1x1
transition convs.

A built net is a flat node program (conv / pool / upsample / concat) whose
execution order is its list order; `forward` interprets it, so summaries and
parameter accounting always describe the graph that actually runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import Rng, Tensor

LEAKY_SLOPE = 0.2
BASE_WIDTHS = (35, 70, 140)


@dataclass(frozen=True)
class PlainConv:
    pass


@dataclass(frozen=True)
class DilatedConst:
    d: int = 2

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"constant dilation rate must be >= 2, got {self.d}")


@dataclass(frozen=True)
class DilatedExp:
    pass


@dataclass(frozen=True)
class DilatedExpDense:
    pass


ArchVariant = PlainConv | DilatedConst | DilatedExp | DilatedExpDense

_VARIANT_NAMES = {
    PlainConv: "conv",
    DilatedConst: "dilated",
    DilatedExp: "dilated-exp",
    DilatedExpDense: "dilated-exp-dense",
}


def variant_name(v: ArchVariant) -> str:
    return _VARIANT_NAMES[type(v)]


def variant_from_name(name: str, const_dilation: int = 2) -> ArchVariant:
    if name == "conv":
        return PlainConv()
    if name == "dilated":
        return DilatedConst(const_dilation)
    if name == "dilated-exp":
        return DilatedExp()
    if name == "dilated-exp-dense":
        return DilatedExpDense()
    raise ValueError(f"unknown architecture {name!r}; expected one of "
                     f"conv, dilated, dilated-exp, dilated-exp-dense")


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int
    out_channels: int
    width_scale: float = 1.0
    variant: ArchVariant = field(default_factory=DilatedExpDense)
    kernel: int = 3
    dilation_cap: int = 32

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")


@dataclass
class Node:
    """One step of the net program. srcs index earlier nodes; -1 is the latent."""
    kind: str                 # conv | transition | output | pool | upsample | concat
    srcs: tuple[int, ...]
    cin: int
    cout: int
    dilation: int = 1
    kernel: int = 0
    activated: bool = False
    weight: Tensor | None = None
    bias: Tensor | None = None

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "transition", "output")


@dataclass
class PriorNet:
    spec: UNetSpec
    nodes: list[Node]
    dtype: np.dtype

    def parameters(self) -> list[Tensor]:
        params = []
        for node in self.nodes:
            if node.has_params:
                params.append(node.weight)
                params.append(node.bias)
        return params

    def conv_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.has_params]


def exp_dilation_schedule(n_layers: int, base: int, cap: int) -> list[int]:
    """Per-layer dilations: base doubling each layer, clipped at cap."""
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    if base < 1 or cap < base:
        raise ValueError(f"need cap >= base >= 1, got base={base} cap={cap}")
    return [min(base * 2 ** i, cap) for i in range(n_layers)]


def _scaled(width: int, scale: float) -> int:
    s = int(round(width * scale))
    if s < 1:
        raise ValueError(f"width_scale {scale} rounds base width {width} to zero")
    return s


def _dilations(spec: UNetSpec) -> tuple[list[int], list[int], int]:
    """(downstream+bottleneck 6, upstream 4, final) conv dilations."""
    v = spec.variant
    if isinstance(v, PlainConv):
        return [1] * 6, [1] * 4, 1
    if isinstance(v, DilatedConst):
        return [v.d] * 6, [v.d] * 4, v.d
    sched = exp_dilation_schedule(6, 2, spec.dilation_cap)
    return sched, list(reversed(sched[:4])), 1


class _Builder:
    def __init__(self, spec: UNetSpec, rng: Rng, dtype):
        self.spec = spec
        self.rng = rng
        self.dtype = dtype
        self.nodes: list[Node] = []

    def _init_conv(self, node: Node):
        fan_in = node.cin * node.kernel * node.kernel
        bound = np.sqrt(6.0 / fan_in)
        u = self.rng.uniform_array((node.cout, node.cin, node.kernel, node.kernel))
        node.weight = Tensor(((u * 2.0 - 1.0) * bound).astype(self.dtype), requires_grad=True)
        node.bias = Tensor(np.zeros(node.cout, dtype=self.dtype), requires_grad=True)

    def add(self, kind, srcs, cin, cout, dilation=1, kernel=0, activated=False) -> int:
        node = Node(kind, tuple(srcs), cin, cout, dilation, kernel, activated)
        if node.has_params:
            self._init_conv(node)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def conv(self, src, cin, cout, dilation, activated=True) -> int:
        return self.add("conv", (src,), cin, cout, dilation, self.spec.kernel, activated)

    def block(self, src, cin, couts, dils, dense: bool) -> int:
        """Two convs, plus dense concatenation and a 1x1 transition when dense.

        Returns the index of the block's output node.
        """
        if not dense:
            a = self.conv(src, cin, couts[0], dils[0])
            return self.conv(a, couts[0], couts[1], dils[1])
        feats = [src]
        chans = [cin]
        for cout, d in zip(couts, dils):
            inp = feats[0] if len(feats) == 1 else self.add(
                "concat", tuple(feats), sum(chans), sum(chans))
            out = self.conv(inp, sum(chans), cout, d)
            feats.append(out)
            chans.append(cout)
        inp = self.add("concat", tuple(feats), sum(chans), sum(chans))
        return self.add("transition", (inp,), sum(chans), couts[-1],
                        dilation=1, kernel=1, activated=True)


def build_unet(spec: UNetSpec, rng: Rng, dtype=np.float32) -> PriorNet:
    """Construct a prior net with fan-in uniform weights and zero biases."""
    w35, w70, w140 = (_scaled(w, spec.width_scale) for w in BASE_WIDTHS)
    down_dil, up_dil, final_dil = _dilations(spec)
    dense = isinstance(spec.variant, DilatedExpDense)
    b = _Builder(spec, rng, np.dtype(dtype))

    d1 = b.block(-1, spec.in_channels, (w35, w70), down_dil[0:2], dense)
    p1 = b.add("pool", (d1,), w70, w70)
    d2 = b.block(p1, w70, (w70, w140), down_dil[2:4], dense)
    p2 = b.add("pool", (d2,), w140, w140)
    bot = b.block(p2, w140, (w70, w70), down_dil[4:6], dense)

    u = b.add("upsample", (bot,), w70, w70)
    cat = b.add("concat", (u, d2), w70 + w140, w70 + w140)
    u1 = b.block(cat, w70 + w140, (w140, w70), up_dil[0:2], dense)

    u = b.add("upsample", (u1,), w70, w70)
    cat = b.add("concat", (u, d1), w70 + w70, w70 + w70)
    u2 = b.block(cat, w70 + w70, (w70, w35), up_dil[2:4], dense)

    b.add("output", (u2,), w35, spec.out_channels,
          dilation=final_dil, kernel=spec.kernel, activated=False)
    return PriorNet(spec=spec, nodes=b.nodes, dtype=np.dtype(dtype))


def forward(net: PriorNet, z: Tensor) -> Tensor:
    """Run the node program; output keeps the latent's spatial extents."""
    if z.data.ndim != 4 or z.data.shape[0] != 1:
        raise ValueError(f"latent must be (1, C, F, T), got {z.data.shape}")
    if z.data.shape[1] != net.spec.in_channels:
        raise ValueError(f"latent has {z.data.shape[1]} channels, net expects "
                         f"{net.spec.in_channels}")
    if z.data.shape[2] % 4 or z.data.shape[3] % 4:
        raise ValueError(f"latent spatial extents must be divisible by 4, "
                         f"got {z.data.shape[2]}x{z.data.shape[3]}")
    vals: list[Tensor] = []
    for node in net.nodes:
        xs = [z if s < 0 else vals[s] for s in node.srcs]
        if node.has_params:
            h = tensor.conv2d(xs[0], node.weight, node.bias, node.dilation)
            if node.activated:
                h = tensor.leaky_relu(h, LEAKY_SLOPE)
        elif node.kind == "pool":
            h = tensor.maxpool2(xs[0])
        elif node.kind == "upsample":
            h = tensor.upsample_bilinear2(xs[0])
        elif node.kind == "concat":
            h = xs[0]
            for t in xs[1:]:
                h = tensor.concat_channels(h, t)
        else:
            raise AssertionError(f"unknown node kind {node.kind}")
        vals.append(h)
    return vals[-1]


def param_count(net: PriorNet) -> int:
    """Exact scalar parameter count: sum of cout*(cin*k^2 + 1) over convs."""
    return sum(n.cout * (n.cin * n.kernel * n.kernel + 1) for n in net.conv_nodes())


def zero_final_layer(net: PriorNet):
    """Zero the output conv so the net's initial output is exactly zero.

    Used for mask priors: a zero pre-sigmoid output starts the mask at 0.5
    and makes two-source fitting symmetric under swapping the source nets.
    """
    out = net.nodes[-1]
    out.weight.data[:] = 0
    out.bias.data[:] = 0


def summarize(net: PriorNet) -> str:
    """One line per layer: kind, channels, dilation."""
    lines = []
    for node in net.nodes:
        if node.has_params:
            act = "lrelu" if node.activated else "linear"
            lines.append(f"{node.kind:<10} {node.cin:>4} -> {node.cout:<4} "
                         f"k={node.kernel} d={node.dilation} {act}")
        elif node.kind == "concat":
            srcs = "+".join(str(s) for s in node.srcs)
            lines.append(f"{node.kind:<10} {node.cin:>4} -> {node.cout:<4} (nodes {srcs})")
        else:
            lines.append(f"{node.kind:<10} {node.cin:>4} -> {node.cout:<4}")
    return "\n".join(lines)
