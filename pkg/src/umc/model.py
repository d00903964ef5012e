"""Multi-pathway U-Net cascade: graph construction and parameter forensics.

One shared encoder feeds N decoding pathways. Every decoder block exposes
its output as an outgoing skip so later pathways can consume it; the three
connectivity modes differ only in which skips a block receives and how
they fuse:

* ``shared-encoder`` - each block fuses nothing extra, it sees only the
  encoder skip of its depth.
* ``causal`` - the encoder skip is summed elementwise with the previous
  pathway's skip at the same depth (channel-neutral, so the parameter
  count matches shared-encoder exactly).
* ``dense`` - the encoder skip and ALL previous pathways' skips are
  concatenated, which widens each block's first convolution.

``count_params`` re-derives the channel arithmetic independently of
``build`` so the two can cross-check each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .autodiff import Graph, GraphError, ShapeError, kaiming_init
from .ops import conv_param_count
from .rng import STREAM_INIT, make_rng

CONNECTIVITIES = ("shared-encoder", "causal", "dense")
UPSAMPLE_MODES = ("bilinear", "transposed2x2")
TASKS = ("regression", "classification")

DEFAULT_FILTERS = (32, 64, 128, 256, 512)


class ConfigError(ValueError):
    """Invalid architecture description."""


@dataclass(frozen=True)
class PathwaySpec:
    """One decoding pathway: its head width, task kind and loss weight."""

    name: str
    out_channels: int
    task: str
    loss_weight: float = 1.0


@dataclass(frozen=True)
class UmcConfig:
    in_channels: int = 3
    filters: tuple = DEFAULT_FILTERS
    pathways: tuple = ()
    connectivity: str = "shared-encoder"
    upsample_mode: str = "bilinear"

    @property
    def depth(self) -> int:
        """Encoding depth: number of pooling stages."""
        return len(self.filters) - 1

    def validate(self) -> "UmcConfig":
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if len(self.filters) < 2 or any(int(f) < 1 for f in self.filters):
            raise ConfigError(f"filters must be >= 2 positive integers, got {self.filters}")
        if self.connectivity not in CONNECTIVITIES:
            raise ConfigError(f"connectivity must be one of {CONNECTIVITIES}, "
                              f"got '{self.connectivity}'")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}, "
                              f"got '{self.upsample_mode}'")
        if len(self.pathways) < 1:
            raise ConfigError("at least one pathway is required")
        names = [p.name for p in self.pathways]
        if len(set(names)) != len(names):
            raise ConfigError(f"pathway names must be unique, got {names}")
        for p in self.pathways:
            if not p.name:
                raise ConfigError("pathway names must be non-empty")
            if p.out_channels < 1:
                raise ConfigError(f"pathway '{p.name}' needs out_channels >= 1")
            if p.task not in TASKS:
                raise ConfigError(f"pathway '{p.name}' task must be one of {TASKS}")
            if p.loss_weight < 0:
                raise ConfigError(f"pathway '{p.name}' loss_weight must be >= 0")
        return self


_CONFIG_KEYS = {"in_channels", "filters", "connectivity", "upsample_mode", "pathways"}
_PATHWAY_KEYS = {"name", "out_channels", "task", "loss_weight"}


def config_to_dict(config: UmcConfig) -> dict:
    return {
        "in_channels": config.in_channels,
        "filters": list(config.filters),
        "connectivity": config.connectivity,
        "upsample_mode": config.upsample_mode,
        "pathways": [
            {"name": p.name, "out_channels": p.out_channels,
             "task": p.task, "loss_weight": p.loss_weight}
            for p in config.pathways
        ],
    }


def config_from_dict(doc: dict) -> UmcConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        pathways = []
        for pd in doc.get("pathways", []):
            bad = set(pd) - _PATHWAY_KEYS
            if bad:
                raise ConfigError(f"unknown pathway keys: {sorted(bad)}")
            pathways.append(PathwaySpec(
                name=str(pd["name"]),
                out_channels=int(pd["out_channels"]),
                task=str(pd["task"]),
                loss_weight=float(pd.get("loss_weight", 1.0)),
            ))
        config = UmcConfig(
            in_channels=int(doc.get("in_channels", 3)),
            filters=tuple(int(f) for f in doc.get("filters", DEFAULT_FILTERS)),
            connectivity=str(doc.get("connectivity", "shared-encoder")),
            upsample_mode=str(doc.get("upsample_mode", "bilinear")),
            pathways=tuple(pathways),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"malformed config: {e}") from e
    return config.validate()


def load_config(path) -> UmcConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    return config_from_dict(doc)


# --------------------------------------------------------------------------
# Skip routing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SkipRecipe:
    """How pathway ``p`` at depth ``d`` assembles its incoming skip.

    ``sources`` are ("encoder", d) or ("decoder", p_prev, d) references in
    fusion order; ``fuse`` is "single", "sum" (elementwise, channel-neutral)
    or "concat" (channel-widening).
    """

    fuse: str
    sources: tuple


def route_skip_inputs(p: int, d: int, config: UmcConfig) -> SkipRecipe:
    """Skip sources for pathway p (1-based) at depth d under the config's mode."""
    if p < 1 or p > len(config.pathways):
        raise ConfigError(f"pathway index {p} out of range 1..{len(config.pathways)}")
    if d < 1 or d > config.depth:
        raise ConfigError(f"depth {d} out of range 1..{config.depth}")
    enc = ("encoder", d)
    if p == 1 or config.connectivity == "shared-encoder":
        return SkipRecipe("single", (enc,))
    if config.connectivity == "causal":
        return SkipRecipe("sum", (enc, ("decoder", p - 1, d)))
    prev = tuple(("decoder", q, d) for q in range(1, p))
    return SkipRecipe("concat", (enc,) + prev)


# --------------------------------------------------------------------------
# Layer plan (drives building, counting and the describe tables)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str        # "conv3" | "conv1" | "tconv2"
    cin: int
    cout: int

    @property
    def kernel(self) -> int:
        return {"conv3": 3, "conv1": 1, "tconv2": 2}[self.kind]

    @property
    def param_count(self) -> int:
        return conv_param_count(self.cin, self.cout, self.kernel)


def _skip_channels(p: int, d: int, config: UmcConfig) -> int:
    """Channel width of the fused skip seen by pathway p at depth d."""
    fd = int(config.filters[d - 1])
    recipe = route_skip_inputs(p, d, config)
    if recipe.fuse == "concat":
        return fd * len(recipe.sources)   # every source at depth d carries filters[d]
    return fd


def layer_plan(config: UmcConfig) -> list[LayerSpec]:
    """Every parameterized layer in construction order."""
    config.validate()
    filters = [int(f) for f in config.filters]
    depth = config.depth
    plan: list[LayerSpec] = []
    ch = config.in_channels
    for d in range(1, depth + 1):
        plan.append(LayerSpec(f"enc{d}.conv1", "conv3", ch, filters[d - 1]))
        plan.append(LayerSpec(f"enc{d}.conv2", "conv3", filters[d - 1], filters[d - 1]))
        ch = filters[d - 1]
    plan.append(LayerSpec("bottleneck.conv1", "conv3", ch, filters[depth]))
    plan.append(LayerSpec("bottleneck.conv2", "conv3", filters[depth], filters[depth]))
    for p, spec in enumerate(config.pathways, start=1):
        ch = filters[depth]
        for d in range(depth, 0, -1):
            fd = filters[d - 1]
            if config.upsample_mode == "transposed2x2":
                plan.append(LayerSpec(f"{spec.name}.dec{d}.up", "tconv2", ch, fd))
                up_ch = fd
            else:
                up_ch = ch
            cat_ch = up_ch + _skip_channels(p, d, config)
            plan.append(LayerSpec(f"{spec.name}.dec{d}.conv1", "conv3", cat_ch, fd))
            plan.append(LayerSpec(f"{spec.name}.dec{d}.conv2", "conv3", fd, fd))
            ch = fd
        plan.append(LayerSpec(f"{spec.name}.head", "conv1", ch, spec.out_channels))
    return plan


def count_params(config: UmcConfig):
    """Closed-form total parameter count plus the per-layer breakdown."""
    rows = layer_plan(config)
    return sum(r.param_count for r in rows), rows


def format_millions(count: int) -> str:
    """Round to millions with 3 decimals, half-up: 7760691 -> '7.761M'."""
    m = (Decimal(count) / Decimal(1_000_000)).quantize(
        Decimal("0.001"), rounding=ROUND_HALF_UP)
    return f"{m}M"


def layer_table_text(rows) -> str:
    lines = [f"{'layer':<28} {'kind':<8} {'weights':<18} {'params':>12}"]
    total = 0
    for r in rows:
        shape = f"{r.cout}x{r.cin}x{r.kernel}x{r.kernel}"
        lines.append(f"{r.name:<28} {r.kind:<8} {shape:<18} {r.param_count:>12,}")
        total += r.param_count
    lines.append(f"{'total':<28} {'':<8} {'':<18} {total:>12,}")
    lines.append(f"{'total (M)':<28} {'':<8} {'':<18} {format_millions(total):>12}")
    return "\n".join(lines)


def layer_table_csv(rows) -> str:
    lines = ["layer,name,shape,params"]
    for i, r in enumerate(rows):
        shape = f"{r.cout}x{r.cin}x{r.kernel}x{r.kernel}"
        lines.append(f"{i},{r.name},{shape},{r.param_count}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Graph construction
# --------------------------------------------------------------------------

INPUT_NAME = "input"


@dataclass
class ModelGraph:
    config: UmcConfig
    graph: Graph
    param_shapes: dict = field(default_factory=dict)    # name -> tuple
    output_ids: dict = field(default_factory=dict)      # pathway name -> node id
    encoder_skips: dict = field(default_factory=dict)   # depth -> node id
    decoder_skips: dict = field(default_factory=dict)   # (pathway, depth) -> node id
    node_channels: dict = field(default_factory=dict)   # node id -> channels
    node_scale: dict = field(default_factory=dict)      # node id -> spatial downscale


def _conv_layer(m: ModelGraph, name: str, kind: str, x_id: int,
                cin: int, cout: int, scale: int) -> int:
    k = {"conv3": 3, "conv1": 1, "tconv2": 2}[kind]
    g = m.graph
    w = g.param(f"{name}.weight", np.zeros((cout, cin, k, k), dtype=np.float32))
    b = g.param(f"{name}.bias", np.zeros((cout,), dtype=np.float32))
    m.param_shapes[f"{name}.weight"] = (cout, cin, k, k)
    m.param_shapes[f"{name}.bias"] = (cout,)
    out = g.apply(kind, x_id, w, b)
    m.node_channels[out] = cout
    m.node_scale[out] = scale
    return out


def _double_conv(m: ModelGraph, name: str, x_id: int, cin: int, cout: int,
                 scale: int) -> int:
    g = m.graph
    c1 = _conv_layer(m, f"{name}.conv1", "conv3", x_id, cin, cout, scale)
    r1 = g.apply("relu", c1)
    m.node_channels[r1], m.node_scale[r1] = cout, scale
    c2 = _conv_layer(m, f"{name}.conv2", "conv3", r1, cout, cout, scale)
    r2 = g.apply("relu", c2)
    m.node_channels[r2], m.node_scale[r2] = cout, scale
    return r2


def build(config: UmcConfig) -> ModelGraph:
    """Construct the full cascade graph with zero-valued parameters.

    Call :func:`init_params` (or restore a checkpoint) before running it.
    """
    config.validate()
    filters = [int(f) for f in config.filters]
    depth = config.depth
    m = ModelGraph(config=config, graph=Graph())
    g = m.graph

    x = g.input(INPUT_NAME, channels=config.in_channels)
    m.node_channels[x], m.node_scale[x] = config.in_channels, 1

    cur, ch, scale = x, config.in_channels, 1
    for d in range(1, depth + 1):
        cur = _double_conv(m, f"enc{d}", cur, ch, filters[d - 1], scale)
        ch = filters[d - 1]
        m.encoder_skips[d] = cur
        cur = g.apply("maxpool2", cur)
        scale *= 2
        m.node_channels[cur], m.node_scale[cur] = ch, scale
    cur = _double_conv(m, "bottleneck", cur, ch, filters[depth], scale)
    bottleneck, bott_ch, bott_scale = cur, filters[depth], scale

    for p, spec in enumerate(config.pathways, start=1):
        cur, ch, scale = bottleneck, bott_ch, bott_scale
        for d in range(depth, 0, -1):
            fd = filters[d - 1]
            scale //= 2
            if config.upsample_mode == "transposed2x2":
                up = _conv_layer(m, f"{spec.name}.dec{d}.up", "tconv2", cur, ch, fd, scale)
                up_ch = fd
            else:
                up = g.apply("up_bilinear2", cur)
                up_ch = ch
                m.node_channels[up], m.node_scale[up] = up_ch, scale
            recipe = route_skip_inputs(p, d, config)
            src_ids = [m.encoder_skips[s[1]] if s[0] == "encoder"
                       else m.decoder_skips[(s[1], s[2])] for s in recipe.sources]
            if recipe.fuse == "sum":
                fused = g.apply("add", *src_ids)
                m.node_channels[fused], m.node_scale[fused] = fd, scale
                cat_inputs, skip_ch = [fused], fd
            else:
                cat_inputs, skip_ch = src_ids, fd * len(src_ids)
            cat = g.apply("concat", up, *cat_inputs)
            cat_ch = up_ch + skip_ch
            m.node_channels[cat], m.node_scale[cat] = cat_ch, scale
            cur = _double_conv(m, f"{spec.name}.dec{d}", cat, cat_ch, fd, scale)
            m.decoder_skips[(p, d)] = cur
            ch = fd
        head = _conv_layer(m, f"{spec.name}.head", "conv1", cur, ch,
                           spec.out_channels, scale)
        m.output_ids[spec.name] = head
        g.mark_output(spec.name, head)
    return m


HEAD_INIT_STD = 0.01


def init_params(model: ModelGraph, seed: int, dtype=np.float32) -> None:
    """Kaiming-normal weights (fan_in = cin * k^2), zero biases, in order.

    The 1x1 heads are linear readouts with nothing downstream, so they get
    a small fixed scale instead of the ReLU gain; large initial outputs
    make the first regression steps violent enough to kill the narrow
    decoder channels of desk-scale ladders outright.
    """
    rng = make_rng(seed, STREAM_INIT)
    for name, shape in model.param_shapes.items():
        if name.endswith(".bias"):
            model.graph.set_param(name, np.zeros(shape, dtype=dtype))
        elif name.endswith("head.weight"):
            model.graph.set_param(
                name, (rng.standard_normal(shape) * HEAD_INIT_STD).astype(dtype))
        else:
            cout, cin, kh, kw = shape
            model.graph.set_param(name, kaiming_init(cin * kh * kw, shape, rng, dtype))


def brute_force_param_count(model: ModelGraph) -> int:
    """Sum of allocated elements over the graph's parameter store."""
    return sum(v.size for v in model.graph.param_values().values())


# --------------------------------------------------------------------------
# Shape checking
# --------------------------------------------------------------------------


def shape_check(config: UmcConfig, input_shape) -> list:
    """Validate an input shape and list the shape of every graph node.

    Succeeds iff the channel count matches the config and H, W are both
    divisible by 2**depth; the error names the offending dimension.
    """
    config.validate()
    b, c, h, w = (int(v) for v in input_shape)
    if c != config.in_channels:
        raise ShapeError(f"C={c} does not match the configured {config.in_channels} "
                         "input channels")
    divisor = 2 ** config.depth
    for dim, val in (("H", h), ("W", w)):
        if val % divisor:
            raise ShapeError(f"{dim}={val} not divisible by {divisor}")
    model = build(config)
    rows = []
    for node in model.graph.nodes:
        if node.op == "param":
            shape = model.param_shapes[node.name]
        else:
            ch = model.node_channels[node.id]
            s = model.node_scale[node.id]
            shape = (b, ch, h // s, w // s)
        rows.append((node.id, node.op, node.name or "", tuple(shape)))
    return rows
