"""Streaming execution: tiled forward, recomputing tiled backward, SGD.

Forward: each tile's input crop runs through the streaming section with
the plan's border-only padding, lands exactly on its owned split-map
region and is pasted there; tile activations are then dropped, so only
the reconstructed split map (plus head activations) persists. The head
runs once on the reconstruction. Because every kernel accumulates in a
fixed order, the reconstructed map is bit-identical to a whole-image
pass.

Backward: the head gradient is computed once on the whole split map; per
tile, the plan's gradient slice (owned region plus backward halos) is
cut out, the tile's activations are recomputed from the backward input
region (a partial forward pass), and gradients propagate down through
the tile. Before a conv layer's weight/bias gradients are accumulated,
the output gradient is sliced to the tile's owned region at that map, so
every whole-image output position contributes to the parameter gradients
exactly once; halo gradient values are computed and discarded, and
input-image gradients are not produced. Tiles run in row-major order and
accumulate sequentially, which pins the floating-point summation order.

Memory accounting (shared with tilestream.memory): byte counters track
retained activation arrays only. Counted per tile: the input crop and
every layer output (maxpool argmax included, relu and flatten are free
since they run in place / as views). The whole input image is host
resident and never counted for streaming. Gradient maps are workspace
and uncounted; parameter and parameter-gradient bytes are separate
terms. Phase peaks:

    forward  = params + split_map + max(per-tile activations, head)
    backward = params + grads + 2*split_map + head + max per-tile
               (backward regions, recomputed)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PlanError, ShapeError
from .layers import conv2d_input_grad, conv2d_param_grad, maxpool2d_backward, relu_backward
from .network import (
    Conv,
    MaxPool,
    NetworkSpec,
    ParamGrads,
    Relu,
    head_backward,
    head_forward,
    param_bytes,
    run_stack,
)
from .planner import TilePlan
from .tensors import check_tensor4


@dataclass
class StreamingRunRecord:
    """Instrumentation counters for one streaming forward/backward pass."""

    loss: float = float("nan")
    logit: float = float("nan")
    tiles_forward: int = 0
    tiles_backward: int = 0
    reconstructed_map_bytes: int = 0
    peak_tile_activation_bytes: int = 0
    head_activation_bytes: int = 0
    params_bytes: int = 0
    grads_bytes: int = 0
    peak_bytes_forward: int = 0
    peak_bytes_backward: int = 0

    @property
    def tiles_processed(self):
        return self.tiles_forward + self.tiles_backward

    @property
    def peak_bytes(self):
        return max(self.peak_bytes_forward, self.peak_bytes_backward)


@dataclass
class StreamingForwardState:
    """What streaming_forward retains for the matching backward call."""

    split_map: np.ndarray
    head_caches: list
    logit: np.ndarray
    record: StreamingRunRecord
    plan: TilePlan = field(repr=False, default=None)


def _check_image(image, plan):
    check_tensor4(image, "image")
    n, c, h, w = image.shape
    if (h, w) != (plan.image_size, plan.image_size):
        raise PlanError(f"image {h}x{w} does not match plan image_size {plan.image_size}")
    return image


def streaming_forward(net: NetworkSpec, params, image, plan: TilePlan):
    """Tile-reconstruct the split map, then run the head once.

    Requires a validated plan for (net, image size). Returns a
    StreamingForwardState; the split map it carries is bit-identical to the
    whole-image streaming-section output.
    """
    _check_image(image, plan)
    if plan.split_index != net.split_index:
        raise PlanError("plan split_index does not match the network")
    n = image.shape[0]
    c_split = net.split_shape(plan.image_size)[0]
    sh, sw = plan.split_hw
    split = np.empty((n, c_split, sh, sw), dtype=image.dtype)
    record = StreamingRunRecord(params_bytes=param_bytes(params),
                                reconstructed_map_bytes=split.nbytes)
    peak_tile = 0
    for tile in plan.tiles:
        r = tile.input_forward
        crop = np.ascontiguousarray(image[:, :, r.y0:r.y1, r.x0:r.x1])
        sink = []
        out, _ = run_stack(crop, net, params, 0, net.split_index,
                           pads_seq=tile.fwd_pads, want_cache=False,
                           protect_input=False, byte_sink=sink)
        o = tile.owned_split
        if out.shape[2:] != o.shape():
            raise PlanError(f"tile ({tile.row},{tile.col}) produced {out.shape[2:]}, "
                            f"owned region is {o.shape()}")
        split[:, :, o.y0:o.y1, o.x0:o.x1] = out
        peak_tile = max(peak_tile, crop.nbytes + sum(b for _, b in sink))
        record.tiles_forward += 1
    head_sink = []
    logit, head_caches = head_forward(split, net, params, byte_sink=head_sink)
    record.head_activation_bytes = sum(b for _, b in head_sink)
    record.peak_tile_activation_bytes = peak_tile
    record.peak_bytes_forward = (record.params_bytes + split.nbytes
                                 + max(peak_tile, record.head_activation_bytes))
    record.logit = float(logit[0]) if logit.shape[0] == 1 else float("nan")
    return StreamingForwardState(split_map=split, head_caches=head_caches,
                                 logit=logit, record=record, plan=plan)


def streaming_backward(net: NetworkSpec, params, image, plan: TilePlan,
                       state: StreamingForwardState, dloss_dlogit):
    """Backpropagate through head and tiles; returns per-image ParamGrads."""
    _check_image(image, plan)
    if state.plan is not plan and state.split_map.shape[2:] != tuple(plan.split_hw):
        raise PlanError("forward state does not match this plan")
    grads = ParamGrads.zeros_like(params)
    grad_split, head_grads = head_backward(dloss_dlogit, net, params,
                                           state.head_caches, state.split_map.shape)
    for i, pg in head_grads.items():
        grads.per_layer[i].w += pg.w
        grads.per_layer[i].b += pg.b

    record = state.record
    record.grads_bytes = param_bytes(grads.per_layer)
    peak_tile = record.peak_tile_activation_bytes
    L = net.split_index
    for tile in plan.tiles:
        r = tile.input_backward
        crop = np.ascontiguousarray(image[:, :, r.y0:r.y1, r.x0:r.x1])
        sink = []
        _, caches = run_stack(crop, net, params, 0, L, pads_seq=tile.bwd_pads,
                              want_cache=True, protect_input=False, byte_sink=sink)
        gs = tile.grad_slice
        g = grad_split[:, :, gs.y0:gs.y1, gs.x0:gs.x1].copy()
        for m in range(L - 1, -1, -1):
            layer = net.layers[m]
            if isinstance(layer, Conv):
                spec = net.conv_specs[m]
                mask = tile.masks[m]
                if mask is not None:
                    gy_r, x_r, mpads = mask
                    sub_g = g[:, :, gy_r.y0:gy_r.y1, gy_r.x0:gy_r.x1]
                    x_in = caches[m][0]
                    sub_x = x_in[:, :, x_r.y0:x_r.y1, x_r.x0:x_r.x1]
                    gw, gb = conv2d_param_grad(sub_x, spec, sub_g, pads=mpads)
                    grads.per_layer[m].w += gw
                    grads.per_layer[m].b += gb
                if m > 0:
                    g = conv2d_input_grad(g, spec, params[m], caches[m][0].shape[2:],
                                          pads=tile.bwd_pads[m])
            elif isinstance(layer, MaxPool):
                argmax, in_hw = caches[m]
                if m > 0:
                    g = maxpool2d_backward(argmax, g, in_hw)
            elif isinstance(layer, Relu):
                if m > 0:
                    g = relu_backward(caches[m], g)
            else:
                raise ShapeError(f"layer {layer!r} illegal in the streaming section")
        record.tiles_backward += 1
        peak_tile = max(peak_tile, crop.nbytes + sum(b for _, b in sink))
    record.peak_tile_activation_bytes = peak_tile
    record.peak_bytes_backward = (record.params_bytes + record.grads_bytes
                                  + 2 * state.split_map.nbytes
                                  + record.head_activation_bytes + peak_tile)
    grads.images_accumulated = 1
    return grads


def accumulate_minibatch(per_image):
    """Sum per-image gradients in order, then divide by the batch size."""
    if not per_image:
        raise ShapeError("empty mini-batch")
    total = ParamGrads.zeros_like(per_image[0].per_layer)
    for g in per_image:
        total.add_(g)
    total.div_(len(per_image))
    total.images_accumulated = len(per_image)
    return total


def sgd_step(params, grads: ParamGrads, lr):
    """p <- p - lr * g, in place; returns params."""
    if lr < 0:
        raise ShapeError(f"negative learning rate {lr}")
    for p, g in zip(params, grads.per_layer):
        if p is None:
            continue
        if g is None or g.w.shape != p.w.shape:
            raise ShapeError("gradient/parameter shape mismatch in sgd_step")
        scale = p.w.dtype.type(lr)
        p.w -= scale * g.w
        p.b -= scale * g.b
    return params
