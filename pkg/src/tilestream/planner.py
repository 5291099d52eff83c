"""Tile planning: overlaps, back-projection and validated tile plans.

Geometry conventions
--------------------
Maps are indexed 0..L through the streaming section: map 0 is the input
image, map m is the output of streaming layer m-1. All arithmetic is per
axis (square kernels), with rows and columns planned independently.

A layer with kernel k, stride s, pad p maps output position o to input
span [o*s - p, o*s - p + k). Back-projecting an output interval [a, b)
yields the minimal input interval [a*s - p, (b-1)*s - p + k), clipped to
the map with the clipped amounts recorded as zero-pad widths; tiles pad
only where the true image border was met, so interior tile edges always
consume real neighbour pixels.

Ownership
---------
The split map is partitioned near-equally (remainder to the last
row/column). Ownership is carried down to every map with the lattice
rule tau = clamp(t*s - p, 0, m_in), so each map is exactly partitioned;
weight gradients are later accumulated only over owned output positions,
which makes every whole-image output position contribute exactly once.

Backward halos
--------------
Input gradients computed from a partial gradient map are only valid
where every reading output position was available: through one layer a
valid gradient interval [u, v) shrinks to [u*s - p + (k-s), v*s - p)
with relaxations at map borders. The plan expands each tile's gradient
slice of the split map (independently per edge, minimally by scan) until
the owned interval at every intermediate map is covered, then
back-projects that slice to get the backward input region. Gradient
values inside halos are computed and discarded. Positions past the last
reading output of a layer carry structurally zero gradient and are
exempt (they are owned by the last row/column for bookkeeping only).

Per-layer overlap equations
---------------------------
layer_overlap_forward/backward give the per-edge halo in input pixels
for a single layer: (k - s) forward and 2(k - s) backward, each term
clamped at zero (stride skipping needs no halo, only lattice alignment),
plus the right/bottom remainder term b * ((z - k) mod s) accounting for
input pixels a valid convolution drops at the image edge. Plans are
built by exact recursion; the equations are the single-layer
characterisation and are cross-checked against brute-force tiling in the
test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import PlanError, ShapeError
from .layers import out_size
from .network import Conv, MaxPool, NetworkSpec, Relu

PLAN_SCHEMA_VERSION = 1


def layer_overlap_forward(k, s, z, b):
    """Forward halo in pixels for one tile edge of a single layer."""
    _check_overlap_args(k, s, z)
    return max(k - s, 0) + (b * ((z - k) % s) if b else 0)


def layer_overlap_backward(k, s, z, b):
    """Backward halo in pixels for one tile edge of a single layer."""
    _check_overlap_args(k, s, z)
    return max(2 * (k - s), 0) + (b * ((z - k) % s) if b else 0)


def _check_overlap_args(k, s, z):
    if k < 1 or s < 1:
        raise ShapeError(f"bad kernel/stride ({k}, {s})")
    if z < k:
        raise ShapeError(f"image extent {z} smaller than kernel {k}")


def backproject_span(a, b, k, s, p, in_size):
    """Minimal input interval producing output [a, b); returns (lo, hi, pad_lo, pad_hi)."""
    if a >= b:
        raise PlanError(f"empty output interval [{a}, {b})")
    lo = a * s - p
    hi = (b - 1) * s - p + k
    pad_lo = max(0, -lo)
    pad_hi = max(0, hi - in_size)
    lo, hi = max(lo, 0), min(hi, in_size)
    if lo >= hi:
        raise PlanError("region empty after clipping to the input map")
    return lo, hi, pad_lo, pad_hi


@dataclass(frozen=True)
class Region:
    """Half-open pixel rectangle [y0, y1) x [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int

    def __post_init__(self):
        if self.y1 < self.y0 or self.x1 < self.x0:
            raise PlanError(f"inverted region {self}")

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def empty(self):
        return self.height == 0 or self.width == 0

    def shape(self):
        return (self.height, self.width)

    def contains(self, other):
        return (self.y0 <= other.y0 and self.x0 <= other.x0
                and self.y1 >= other.y1 and self.x1 >= other.x1)

    def intersect(self, other):
        y0 = max(self.y0, other.y0)
        x0 = max(self.x0, other.x0)
        return Region(y0, x0, max(min(self.y1, other.y1), y0),
                      max(min(self.x1, other.x1), x0))

    def as_list(self):
        return [self.y0, self.x0, self.y1, self.x1]


def _geom_of(layer):
    if isinstance(layer, Conv):
        return (layer.kernel, layer.stride, layer.pad)
    if isinstance(layer, MaxPool):
        return (layer.kernel, layer.stride, 0)
    if isinstance(layer, Relu):
        return (1, 1, 0)
    raise ShapeError(f"layer {layer!r} has no spatial geometry")


def backproject_region(layer, out_region: Region, in_hw):
    """Minimal input region for one layer's output region; returns (Region, pads).

    pads is (top, bottom, left, right): the clipped amounts, i.e. the zero
    padding to apply so the cropped input reproduces out_region exactly.
    """
    k, s, p = layer if isinstance(layer, tuple) else _geom_of(layer)
    ih, iw = in_hw
    y0, y1, pt, pb = backproject_span(out_region.y0, out_region.y1, k, s, p, ih)
    x0, x1, pl, pr = backproject_span(out_region.x0, out_region.x1, k, s, p, iw)
    return Region(y0, x0, y1, x1), (pt, pb, pl, pr)


# ---------------------------------------------------------------------------
# single-axis planning


def _axis_sizes(geoms, z):
    sizes = [z]
    for k, s, p in geoms:
        sizes.append(out_size(sizes[-1], k, s, p))
    return sizes


def _near_equal_bounds(total, parts):
    if parts < 1 or parts > total:
        raise PlanError(f"cannot split extent {total} into {parts} nonempty parts")
    base = total // parts
    return [i * base for i in range(parts)] + [total]


def _owned_bounds(geoms, sizes, split_bounds, zts):
    """Ownership boundaries at every map, derived with the lattice rule.

    Interior boundaries are capped at the zero-gradient tail so remainder
    pixels dropped by valid convs/pools at the right/bottom edge are always
    owned by the last row/column.
    """
    L = len(geoms)
    bounds = [None] * L + [list(split_bounds)]
    for m in range(L - 1, -1, -1):
        k, s, p = geoms[m]
        upper = bounds[m + 1]
        cur = [0]
        for t in upper[1:-1]:
            tau = min(max(t * s - p, 0), zts[m])
            cur.append(max(tau, cur[-1]))
        cur.append(sizes[m])
        if any(a > b for a, b in zip(cur, cur[1:])):
            raise PlanError("ownership boundaries not monotone")
        bounds[m] = cur
    return bounds


def _zero_tail_starts(geoms, sizes):
    """Per map, first position whose gradient is structurally zero."""
    L = len(geoms)
    zts = [None] * (L + 1)
    zts[L] = sizes[L]
    for m in range(L - 1, -1, -1):
        k, s, p = geoms[m]
        zts[m] = min(sizes[m], (zts[m + 1] - 1) * s - p + k)
    return zts


def _valid_lo_chain(geoms, sizes, a):
    """Left edge of the valid-gradient interval at maps L..0 given G starts at a."""
    L = len(geoms)
    lo = [None] * (L + 1)
    lo[L] = a
    for m in range(L - 1, -1, -1):
        k, s, p = geoms[m]
        u = lo[m + 1]
        lo[m] = 0 if u == 0 else max(u * s - p + (k - s), 0)
    return lo


def _valid_hi_chain(geoms, sizes, b):
    """Right edge of the valid-gradient interval at maps L..0 given G ends at b."""
    L = len(geoms)
    hi = [None] * (L + 1)
    hi[L] = b
    for m in range(L - 1, -1, -1):
        k, s, p = geoms[m]
        v = hi[m + 1]
        hi[m] = sizes[m] if v == sizes[m + 1] else min(max(v * s - p, 0), sizes[m])
    return hi


def _min_grad_slice(geoms, sizes, owned_bounds, zts, part):
    """Minimal split-map gradient interval covering part's owned intervals."""
    L = len(geoms)
    ta, tb = owned_bounds[L][part], owned_bounds[L][part + 1]
    if ta >= tb:
        raise PlanError("empty owned split interval")

    def left_ok(a):
        lo = _valid_lo_chain(geoms, sizes, a)
        return all(owned_bounds[m][part] >= owned_bounds[m][part + 1]  # empty: nothing owed
                   or lo[m] <= owned_bounds[m][part]
                   for m in range(1, L + 1))

    def right_ok(b):
        hi = _valid_hi_chain(geoms, sizes, b)
        return all(owned_bounds[m][part] >= owned_bounds[m][part + 1]
                   or hi[m] >= min(owned_bounds[m][part + 1], zts[m])
                   for m in range(1, L + 1))

    a = next((ta - h for h in range(ta + 1) if left_ok(ta - h)), None)
    b = next((tb + h for h in range(sizes[L] - tb + 1) if right_ok(tb + h)), None)
    if a is None or b is None:
        raise PlanError("no feasible backward halo (grid too fine for this network)")
    return a, b


def _chain_down(geoms, sizes, top_iv):
    """Back-project an interval at the split down to the image; returns (ivs, pads)."""
    L = len(geoms)
    ivs = [None] * L + [top_iv]
    pads = [None] * L
    for m in range(L - 1, -1, -1):
        k, s, p = geoms[m]
        lo, hi, pad_lo, pad_hi = backproject_span(*ivs[m + 1], k, s, p, sizes[m])
        ivs[m] = (lo, hi)
        pads[m] = (pad_lo, pad_hi)
    return ivs, pads


def _plan_axis(geoms, sizes, parts):
    """Plan one axis; returns dict with bounds and per-part chains."""
    split_bounds = _near_equal_bounds(sizes[-1], parts)
    zts = _zero_tail_starts(geoms, sizes)
    owned = _owned_bounds(geoms, sizes, split_bounds, zts)
    per_part = []
    for i in range(parts):
        f_ivs, f_pads = _chain_down(geoms, sizes, (split_bounds[i], split_bounds[i + 1]))
        g = _min_grad_slice(geoms, sizes, owned, zts, i)
        b_ivs, b_pads = _chain_down(geoms, sizes, g)
        per_part.append({"fwd": f_ivs, "fwd_pads": f_pads,
                         "bwd": b_ivs, "bwd_pads": b_pads, "grad_slice": g})
    return {"owned": owned, "parts": per_part, "zts": zts}


# ---------------------------------------------------------------------------
# 2-D plan


@dataclass
class TileEntry:
    row: int
    col: int
    owned_split: Region
    input_forward: Region
    input_backward: Region
    grad_slice: Region                 # split-map region fed to this tile's backward
    fwd_regions: list                  # Region per map 0..L
    fwd_pads: list                     # (t, b, l, r) per layer 0..L-1
    bwd_regions: list
    bwd_pads: list
    owned_regions: list                # Region per map 0..L
    masks: list = field(default=None, repr=False)  # derived, see TilePlan.finalize


@dataclass
class TilePlan:
    image_size: int
    split_index: int
    grid: tuple
    geoms: list
    map_sizes: list                    # (h, w) per map 0..L
    tiles: list

    @property
    def stride_product(self):
        prod = 1
        for _, s, _ in self.geoms:
            prod *= s
        return prod

    @property
    def split_hw(self):
        return self.map_sizes[-1]

    def tile(self, row, col):
        return self.tiles[row * self.grid[1] + col]

    def finalize(self):
        """Derive per-tile mask slices used by the streaming backward pass.

        For every streaming layer m (output map m+1) and tile: the owned
        output region clipped to the tile's computed region, expressed in
        tile-local coordinates, plus the matching input patch region and
        pads for the weight-gradient computation.
        """
        L = len(self.geoms)
        for t in self.tiles:
            t.masks = []
            for m in range(L):
                owned = t.owned_regions[m + 1]
                comp = t.bwd_regions[m + 1]
                eff = owned.intersect(comp)
                if eff.empty:
                    t.masks.append(None)
                    continue
                patch, pads = backproject_region(self.geoms[m], eff, self.map_sizes[m])
                src = t.bwd_regions[m]
                if not src.contains(patch):
                    raise PlanError("weight-grad patch escapes the recomputed region")
                gy_local = Region(eff.y0 - comp.y0, eff.x0 - comp.x0,
                                  eff.y1 - comp.y0, eff.x1 - comp.x0)
                x_local = Region(patch.y0 - src.y0, patch.x0 - src.x0,
                                 patch.y1 - src.y0, patch.x1 - src.x0)
                t.masks.append((gy_local, x_local, pads))
        return self

    def to_json_dict(self):
        def regs(rs):
            return [r.as_list() for r in rs]

        return {
            "version": PLAN_SCHEMA_VERSION,
            "image_size": self.image_size,
            "split_index": self.split_index,
            "grid": list(self.grid),
            "stride_product": self.stride_product,
            "geoms": [list(g) for g in self.geoms],
            "map_sizes": [list(sz) for sz in self.map_sizes],
            "tiles": [
                {
                    "row": t.row,
                    "col": t.col,
                    "owned_split_region": t.owned_split.as_list(),
                    "input_region_forward": t.input_forward.as_list(),
                    "input_region_backward": t.input_backward.as_list(),
                    "grad_slice": t.grad_slice.as_list(),
                    "forward": {"regions": regs(t.fwd_regions),
                                "pads": [list(p) for p in t.fwd_pads]},
                    "backward": {"regions": regs(t.bwd_regions),
                                 "pads": [list(p) for p in t.bwd_pads]},
                    "owned_regions": regs(t.owned_regions),
                }
                for t in self.tiles
            ],
        }

    def to_json(self, indent=None):
        return json.dumps(self.to_json_dict(), indent=indent)

    @classmethod
    def from_json_dict(cls, doc):
        if doc.get("version") != PLAN_SCHEMA_VERSION:
            raise PlanError(f"unsupported plan schema version {doc.get('version')!r}")
        tiles = []
        for td in doc["tiles"]:
            tiles.append(TileEntry(
                row=td["row"], col=td["col"],
                owned_split=Region(*td["owned_split_region"]),
                input_forward=Region(*td["input_region_forward"]),
                input_backward=Region(*td["input_region_backward"]),
                grad_slice=Region(*td["grad_slice"]),
                fwd_regions=[Region(*r) for r in td["forward"]["regions"]],
                fwd_pads=[tuple(p) for p in td["forward"]["pads"]],
                bwd_regions=[Region(*r) for r in td["backward"]["regions"]],
                bwd_pads=[tuple(p) for p in td["backward"]["pads"]],
                owned_regions=[Region(*r) for r in td["owned_regions"]],
            ))
        plan = cls(image_size=doc["image_size"], split_index=doc["split_index"],
                   grid=tuple(doc["grid"]), geoms=[tuple(g) for g in doc["geoms"]],
                   map_sizes=[tuple(sz) for sz in doc["map_sizes"]], tiles=tiles)
        return plan.finalize()

    @classmethod
    def from_json(cls, text):
        return cls.from_json_dict(json.loads(text))


def build_tile_plan(net: NetworkSpec, image_size, grid):
    """Construct and finalize a TilePlan for (network, image size, grid)."""
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise PlanError(f"bad grid {grid}")
    geoms = net.stream_geoms()
    try:
        sizes = _axis_sizes(geoms, image_size)
    except ShapeError as exc:
        raise PlanError(f"image too small for the streaming section: {exc}") from exc
    if min(sizes) < 1:
        raise PlanError("a streaming map collapsed to zero extent")
    if rows > sizes[-1] or cols > sizes[-1]:
        raise PlanError(f"grid {grid} exceeds split map {sizes[-1]}x{sizes[-1]}")

    ay = _plan_axis(geoms, sizes, rows)
    ax = _plan_axis(geoms, sizes, cols)
    L = len(geoms)
    tiles = []
    for i in range(rows):
        py = ay["parts"][i]
        for j in range(cols):
            px = ax["parts"][j]
            fwd_regions = [Region(py["fwd"][m][0], px["fwd"][m][0],
                                  py["fwd"][m][1], px["fwd"][m][1]) for m in range(L + 1)]
            bwd_regions = [Region(py["bwd"][m][0], px["bwd"][m][0],
                                  py["bwd"][m][1], px["bwd"][m][1]) for m in range(L + 1)]
            owned_regions = [Region(ay["owned"][m][i], ax["owned"][m][j],
                                    ay["owned"][m][i + 1], ax["owned"][m][j + 1])
                             for m in range(L + 1)]
            fwd_pads = [(py["fwd_pads"][m][0], py["fwd_pads"][m][1],
                         px["fwd_pads"][m][0], px["fwd_pads"][m][1]) for m in range(L)]
            bwd_pads = [(py["bwd_pads"][m][0], py["bwd_pads"][m][1],
                         px["bwd_pads"][m][0], px["bwd_pads"][m][1]) for m in range(L)]
            tiles.append(TileEntry(
                row=i, col=j,
                owned_split=owned_regions[L],
                input_forward=fwd_regions[0],
                input_backward=bwd_regions[0],
                grad_slice=Region(py["grad_slice"][0], px["grad_slice"][0],
                                  py["grad_slice"][1], px["grad_slice"][1]),
                fwd_regions=fwd_regions, fwd_pads=fwd_pads,
                bwd_regions=bwd_regions, bwd_pads=bwd_pads,
                owned_regions=owned_regions))
    plan = TilePlan(image_size=image_size, split_index=net.split_index,
                    grid=(rows, cols), geoms=geoms,
                    map_sizes=[(z, z) for z in sizes], tiles=tiles)
    return plan.finalize()


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    ok: bool
    failures: list

    @property
    def first_failure(self):
        return self.failures[0] if self.failures else None


def validate_tile_plan(plan: TilePlan, net: NetworkSpec):
    """Integer consistency checks; returns a ValidationReport (never raises)."""
    failures = []

    def fail(tag, msg):
        failures.append(f"{tag}: {msg}")

    geoms = net.stream_geoms()
    L = len(geoms)
    rows, cols = plan.grid
    try:
        sizes = _axis_sizes(geoms, plan.image_size)
    except ShapeError as exc:
        return ValidationReport(False, [f"geometry: {exc}"])
    if geoms != list(plan.geoms) or [(z, z) for z in sizes] != list(plan.map_sizes):
        fail("geometry", "plan geometry does not match the network/image")
    if len(plan.tiles) != rows * cols:
        fail("grid", "tile count does not match grid")
        return ValidationReport(False, failures)

    # partition: per map, row/col boundaries must be consistent and tile [0, m)
    for m in range(L + 1):
        ybounds, xbounds = {}, {}
        for t in plan.tiles:
            r = t.owned_regions[m]
            ybounds.setdefault(t.row, (r.y0, r.y1))
            xbounds.setdefault(t.col, (r.x0, r.x1))
            if ybounds[t.row] != (r.y0, r.y1) or xbounds[t.col] != (r.x0, r.x1):
                fail("partition", f"map {m}: inconsistent owned rectangles")
                break
        ys = [ybounds.get(i, (None, None)) for i in range(rows)]
        xs = [xbounds.get(j, (None, None)) for j in range(cols)]
        for name, axis_ivs, extent in (("rows", ys, sizes[m]), ("cols", xs, sizes[m])):
            pos = 0
            for iv in axis_ivs:
                if iv[0] != pos or iv[1] < iv[0]:
                    fail("partition", f"map {m}: {name} do not partition [0, {extent})")
                    break
                pos = iv[1]
            else:
                if pos != extent:
                    fail("partition", f"map {m}: {name} do not cover [0, {extent})")

    ztsy = _zero_tail_starts(geoms, sizes)
    for t in plan.tiles:
        tag = f"tile ({t.row},{t.col})"
        if t.owned_split.empty:
            fail("partition", f"{tag}: empty owned split region")
        if t.fwd_regions[L] != t.owned_split:
            fail("forward_shapes", f"{tag}: forward chain does not end on the owned region")
        if t.bwd_regions[L] != t.grad_slice:
            fail("forward_shapes", f"{tag}: backward chain does not start on the grad slice")
        if not t.grad_slice.contains(t.owned_split):
            fail("backward_superset", f"{tag}: grad slice misses the owned split region")
        if not t.input_backward.contains(t.input_forward):
            fail("backward_superset", f"{tag}: backward input region misses the forward one")
        if t.input_forward != t.fwd_regions[0] or t.input_backward != t.bwd_regions[0]:
            fail("forward_shapes", f"{tag}: input regions do not match the chains")

        for chain, pads_chain, cname in (("fwd_regions", "fwd_pads", "forward"),
                                         ("bwd_regions", "bwd_pads", "backward")):
            regions = getattr(t, chain)
            pads = getattr(t, pads_chain)
            for m in range(L):
                k, s, p = geoms[m]
                out_r, in_r = regions[m + 1], regions[m]
                (pt, pb, pl, pr) = pads[m]
                for (o0, o1, i0, i1, plo, phi, ext) in (
                        (out_r.y0, out_r.y1, in_r.y0, in_r.y1, pt, pb, sizes[m]),
                        (out_r.x0, out_r.x1, in_r.x0, in_r.x1, pl, pr, sizes[m])):
                    want_lo = o0 * s - p
                    want_hi = (o1 - 1) * s - p + k
                    if i0 - plo != want_lo or i1 + phi != want_hi:
                        fail("stride_alignment",
                             f"{tag}: {cname} layer {m} region off the sampling lattice")
                    if plo > p or phi > p:
                        fail("padding", f"{tag}: {cname} layer {m} pads exceed the layer pad")
                    if (plo > 0 and i0 != 0) or (phi > 0 and i1 != ext):
                        fail("padding", f"{tag}: {cname} layer {m} pads away from the border")

        # owned gradient coverage through the validity recursion
        lo_y = _valid_lo_chain(geoms, sizes, t.grad_slice.y0)
        hi_y = _valid_hi_chain(geoms, sizes, t.grad_slice.y1)
        lo_x = _valid_lo_chain(geoms, sizes, t.grad_slice.x0)
        hi_x = _valid_hi_chain(geoms, sizes, t.grad_slice.x1)
        for m in range(1, L + 1):
            o = t.owned_regions[m]
            if o.empty:
                continue
            if lo_y[m] > o.y0 or lo_x[m] > o.x0:
                fail("validity", f"{tag}: map {m} owned region precedes valid gradients")
            if hi_y[m] < min(o.y1, ztsy[m]) or hi_x[m] < min(o.x1, ztsy[m]):
                fail("validity", f"{tag}: map {m} owned region exceeds valid gradients")

        # remainder pixels at right/bottom edges belong to the last row/column only
        for m in range(L + 1):
            o = t.owned_regions[m]
            if t.row != rows - 1 and o.y1 > ztsy[m]:
                fail("b_flag", f"{tag}: map {m} remainder rows owned by a non-edge tile")
            if t.col != cols - 1 and o.x1 > ztsy[m]:
                fail("b_flag", f"{tag}: map {m} remainder cols owned by a non-edge tile")

    return ValidationReport(not failures, failures)
