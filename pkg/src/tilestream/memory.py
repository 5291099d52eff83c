"""Analytical activation-memory accounting for whole-image vs streaming runs.

Shares one accounting policy with the engine's instrumentation so that on
desk-scale runs the predicted bytes equal the measured counters exactly
(both count the same abstraction: retained scalars times bytes):

* each conv/dense output is one retained array (n * elems * itemsize);
* maxpool retains its output plus an int64 argmax map;
* relu runs in place and flatten is a view: zero additional bytes;
* gradient maps are workspace and uncounted; parameter and
  parameter-gradient bytes are separate terms;
* whole-image mode retains the input and every layer output until its
  backward completes (the naive retention the big-memory figures imply);
* streaming mode never holds the whole input (tiles are cropped from
  host-resident storage); one tile's activations are resident at a time,
  plus the reconstructed split map, its gradient during backward, and
  the head activations. Mini-batches stream per image with gradients
  summed into one accumulator, so activation terms do not scale with
  batch size in streaming mode (the whole-image terms do).

Phase peaks (identical formulas in tilestream.engine):

    whole:    input + sum(all layer outputs) + params [+ grads backward]
    stream_f: params + split_map + max(max-tile-forward-activations, head)
    stream_b: params + grads + 2*split_map + head + max-tile-backward-act.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .network import Conv, Dense, Flatten, MaxPool, NetworkSpec, Relu
from .planner import TilePlan
from .tensors import resolve_dtype

ARGMAX_ITEMSIZE = 8  # int64 indices retained by maxpool


@dataclass
class MemoryEstimate:
    mode: str
    batch: int
    precision: str
    per_layer_bytes: list            # (layer index, bytes) under the shared policy
    input_bytes: int
    activation_bytes: int            # input + all per-layer terms
    params_bytes: int
    grads_bytes: int
    total_bytes: int
    peak_bytes: int
    split_map_bytes: int = 0
    head_bytes: int = 0
    peak_tile_forward_bytes: int = 0
    peak_tile_backward_bytes: int = 0
    peak_forward_bytes: int = 0
    peak_backward_bytes: int = 0

    def to_json_dict(self):
        return {
            "mode": self.mode, "batch": self.batch, "precision": self.precision,
            "per_layer_bytes": [[i, b] for i, b in self.per_layer_bytes],
            "input_bytes": self.input_bytes,
            "activation_bytes": self.activation_bytes,
            "params_bytes": self.params_bytes,
            "grads_bytes": self.grads_bytes,
            "total_bytes": self.total_bytes,
            "peak_bytes": self.peak_bytes,
            "split_map_bytes": self.split_map_bytes,
            "head_bytes": self.head_bytes,
            "peak_tile_forward_bytes": self.peak_tile_forward_bytes,
            "peak_tile_backward_bytes": self.peak_tile_backward_bytes,
            "peak_forward_bytes": self.peak_forward_bytes,
            "peak_backward_bytes": self.peak_backward_bytes,
        }


def count_param_scalars(net: NetworkSpec, image_size):
    total = 0
    shapes = net.activation_shapes(image_size)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv):
            spec = net.conv_specs[i]
            total += spec.c_out * spec.c_in * spec.kernel ** 2 + spec.c_out
        elif isinstance(layer, Dense):
            total += layer.width * shapes[i][1] + layer.width
    return total


def _layer_bytes(layer, out_shape, n, itemsize):
    """Retained bytes for one layer output under the shared policy."""
    if isinstance(layer, (Relu, Flatten)):
        return 0
    if out_shape[0] == "vec":
        elems = out_shape[1]
    else:
        elems = out_shape[1] * out_shape[2] * out_shape[3]
    per_image = elems * itemsize
    if isinstance(layer, MaxPool):
        per_image += elems * ARGMAX_ITEMSIZE
    return n * per_image


def estimate_whole_image(net: NetworkSpec, image_size, batch, precision):
    """Naive-retention whole-image estimate (all activations live for backward)."""
    dtype = resolve_dtype(precision)
    shapes = net.activation_shapes(image_size)
    item = dtype.itemsize
    per_layer = []
    for i, layer in enumerate(net.layers):
        per_layer.append((i, _layer_bytes(layer, shapes[i + 1], batch, item)))
    input_bytes = batch * net.in_channels * image_size * image_size * item
    act = input_bytes + sum(b for _, b in per_layer)
    params = count_param_scalars(net, image_size) * item
    total = act + 2 * params
    return MemoryEstimate(mode="whole_image", batch=batch, precision=str(precision),
                          per_layer_bytes=per_layer, input_bytes=input_bytes,
                          activation_bytes=act, params_bytes=params, grads_bytes=params,
                          total_bytes=total, peak_bytes=total)


def _tile_stack_bytes(net, plan, tile, which, channels, item):
    """Crop plus per-layer bytes for one tile's partial pass."""
    regions = tile.fwd_regions if which == "fwd" else tile.bwd_regions
    crop = regions[0]
    total = channels[0] * crop.height * crop.width * item
    per_layer = []
    for m in range(net.split_index):
        layer = net.layers[m]
        r = regions[m + 1]
        shape = ("map", channels[m + 1], r.height, r.width)
        b = _layer_bytes(layer, shape, 1, item)
        per_layer.append(b)
        total += b
    return total, per_layer


def estimate_streaming(net: NetworkSpec, plan: TilePlan, batch, precision):
    """Streaming estimate for a validated plan; per-image tile passes."""
    dtype = resolve_dtype(precision)
    item = dtype.itemsize
    shapes = net.activation_shapes(plan.image_size)
    channels = [s[1] if s[0] == "map" else s[1] for s in shapes]
    sh, sw = plan.split_hw
    split_bytes = channels[net.split_index] * sh * sw * item

    head_bytes = 0
    head_per_layer = []
    for i in range(net.split_index, len(net.layers)):
        b = _layer_bytes(net.layers[i], shapes[i + 1], 1, item)
        head_per_layer.append((i, b))
        head_bytes += b

    peak_f, peak_b, sum_tiles = 0, 0, 0
    per_layer_max = [0] * net.split_index
    for tile in plan.tiles:
        f_total, f_layers = _tile_stack_bytes(net, plan, tile, "fwd", channels, item)
        b_total, b_layers = _tile_stack_bytes(net, plan, tile, "bwd", channels, item)
        peak_f = max(peak_f, f_total)
        peak_b = max(peak_b, b_total)
        sum_tiles += f_total + b_total
        per_layer_max = [max(a, max(f, g)) for a, f, g in
                         zip(per_layer_max, f_layers, b_layers)]

    params = count_param_scalars(net, plan.image_size) * item
    peak_forward = params + split_bytes + max(peak_f, head_bytes)
    peak_backward = params + params + 2 * split_bytes + head_bytes + max(peak_f, peak_b)
    per_layer = [(m, b) for m, b in enumerate(per_layer_max)] + head_per_layer
    act = sum_tiles + 2 * split_bytes + head_bytes
    total = act + 2 * params
    return MemoryEstimate(mode="streaming", batch=batch, precision=str(precision),
                          per_layer_bytes=per_layer, input_bytes=0,
                          activation_bytes=act, params_bytes=params, grads_bytes=params,
                          total_bytes=total, peak_bytes=max(peak_forward, peak_backward),
                          split_map_bytes=split_bytes, head_bytes=head_bytes,
                          peak_tile_forward_bytes=peak_f, peak_tile_backward_bytes=peak_b,
                          peak_forward_bytes=peak_forward, peak_backward_bytes=peak_backward)


def reduction_report(whole: MemoryEstimate, stream: MemoryEstimate):
    """Peak-memory reduction of streaming vs whole-image, in percent."""
    if whole.peak_bytes == 0:
        raise ShapeError("whole-image peak is zero")
    return 100.0 * (1.0 - stream.peak_bytes / whole.peak_bytes)


def format_table(net: NetworkSpec, estimate: MemoryEstimate):
    """Human-readable per-layer table."""
    lines = [f"mode={estimate.mode} batch={estimate.batch} precision={estimate.precision}"]
    lines.append(f"{'layer':>6}  {'kind':<8} {'bytes':>16}")
    if estimate.input_bytes:
        lines.append(f"{'input':>6}  {'':<8} {estimate.input_bytes:>16,}")
    for i, b in estimate.per_layer_bytes:
        kind = type(net.layers[i]).__name__.lower()
        lines.append(f"{i:>6}  {kind:<8} {b:>16,}")
    lines.append(f"activations total: {estimate.activation_bytes:,}")
    lines.append(f"params: {estimate.params_bytes:,}  grads: {estimate.grads_bytes:,}")
    lines.append(f"peak: {estimate.peak_bytes:,} bytes ({estimate.peak_bytes / 2**30:.2f} GiB)")
    return "\n".join(lines)
