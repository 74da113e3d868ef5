"""Compressed index functions and buffer assignment.

For each tensor access, the accessed region is the image of the iteration
space under the access map; its lexicographic rank (a piecewise polynomial)
indexes a dense 1-d buffer holding exactly the region's values.  Accesses
whose regions coincide share one buffer; distinct regions of a tensor must
be provably disjoint, otherwise the whole tensor falls back to a dense
uncompressed layout (the safe path when regions partially overlap).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .counting import (
    QuasiPolynomial, count_points, fuse_piecewise, pqp_add, pqp_constant,
)
from .polyhedra import (
    AccessMap, AffineExpr, Polyhedron, _rationally_infeasible,
    enumerate_points, ge, image, implies, iteration_space, preceding_slices,
)

PROBE_VALUES = (2, 3, 5)


@dataclass(frozen=True)
class IndexFunction:
    """Bijection from a region's points onto 0..size-1 in lexicographic order."""

    tensor: str
    accessed: Polyhedron
    rank: object   # PiecewiseQuasiPolynomial over accessed.dims + params
    size: object   # PiecewiseQuasiPolynomial over params only


def _positivity(params):
    return Polyhedron.build(
        (), tuple(params),
        [ge(AffineExpr.var(p) - AffineExpr.constant(1)) for p in params])


def symbolic_indexing(space, access, tensor):
    """Accessed region, rank and size for one access.

    rank sums the point counts of the region's preceding slices and fuses
    the pieces; size counts the whole region with all symbols positive.
    """
    accessed = image(space, access)
    total = None
    for s in preceding_slices(accessed):
        c = count_points(s, context=accessed)
        total = c if total is None else pqp_add(total, c)
    if total is None:  # zero-dim access: rank is identically 0
        total = pqp_constant(0, accessed)
    rank = fuse_piecewise(total)
    size = count_points(accessed, context=_positivity(accessed.params))
    return IndexFunction(tensor, accessed, rank, size)


# ---------------------------------------------------------------------------
# Region comparison (tensor-coordinate space)


def _axis_name(k):
    return f"@{k}"


def _canonical_region(img, index_names):
    """The region in tensor coordinates, dims ordered by axis.

    Registry decisions (share / keep apart / demote) must not depend on
    which iterators an access happens to use: X(i, j) and X(j, i) can name
    the same cells.  Axis-canonical form makes the comparison honest.
    """
    mapping = {d: _axis_name(index_names.index(d)) for d in img.dims}
    renamed = img.rename(mapping)
    dims = tuple(sorted(renamed.dims, key=lambda d: int(d[1:])))
    return Polyhedron.build(dims, renamed.params, renamed.constraints)


def regions_equal(a, b):
    """Layered equality: syntactic, then mutual implication, then probes."""
    if a.dims != b.dims:
        return False
    if frozenset(a.constraints) == frozenset(b.constraints):
        return True
    if all(implies(b.constraints, c) for c in a.constraints) and \
       all(implies(a.constraints, c) for c in b.constraints):
        return True
    params = tuple(dict.fromkeys(a.params + b.params))
    for val in PROBE_VALUES:
        binding = {p: val for p in params}
        try:
            pa = enumerate_points(Polyhedron.build(a.dims, params, a.constraints), binding)
            pb = enumerate_points(Polyhedron.build(b.dims, params, b.constraints), binding)
        except Exception:
            return False
        if pa.tolist() != pb.tolist():
            return False
    return True


def regions_disjoint(a, b):
    """True only when provably disjoint; unknown counts as overlapping."""
    merged = list(a.constraints) + list(b.constraints)
    if _rationally_infeasible(merged):
        return True
    params = tuple(dict.fromkeys(a.params + b.params))
    both = Polyhedron.build(a.dims, params, merged)
    for val in PROBE_VALUES:
        binding = {p: val for p in params}
        try:
            if len(enumerate_points(both, binding)):
                return False
        except Exception:
            return False
    return False  # empty at every probe yet not provably empty: play it safe


# ---------------------------------------------------------------------------
# Buffer registry


@dataclass(frozen=True)
class Buffer:
    id: int
    tensor: str
    layout: str            # "compressed" | "dense"
    arity: int
    accessed: Polyhedron   # None for dense
    axes: tuple            # tensor axis feeding each accessed dim; None for dense
    index: IndexFunction   # None for dense
    reason: str = None


@dataclass(frozen=True)
class BufferRegistry:
    buffers: tuple
    assignment: dict       # (summand index, slot) -> buffer id; slot "out"/"in<k>"

    def buffer_for(self, summand_idx, slot):
        return self.buffers[self.assignment[(summand_idx, slot)]]

    def dense_tensors(self):
        return sorted({b.tensor for b in self.buffers if b.layout == "dense"})

    def dump(self):
        lines = []
        for b in self.buffers:
            if b.layout == "dense":
                lines.append(f"tensor={b.tensor} id={b.id} dense reason={b.reason}")
                continue
            order = b.accessed.dims
            domain = " and ".join(str(c) for c in b.accessed.constraints)
            lines.append(
                f"tensor={b.tensor} id={b.id} size={b.index.size.to_str(order)} "
                f"rank={b.index.rank.to_str(order)} domain={domain}")
        return "\n".join(lines)


def build_registry(summands):
    """Assign every access of every summand to a buffer.

    Equal regions share; unequal regions of one tensor must be provably
    disjoint or the tensor is demoted to a dense layout for all accesses
    (reason "partial-overlap").  Index functions are only computed for
    regions that survive as compressed buffers.
    """
    drafts = []      # per future buffer: dict of the data needed later
    assignment = {}
    by_tensor = {}

    for si, s in enumerate(summands):
        space = iteration_space(s)
        slots = [("out", s.output)] + [(f"in{k}", a) for k, a in enumerate(s.inputs)]
        for slot, acc in slots:
            amap = AccessMap.from_indices(space.dims, acc.index_names)
            img = image(space, amap)
            canon = _canonical_region(img, acc.index_names)
            hit = None
            for bi in by_tensor.get(acc.tensor, []):
                if regions_equal(drafts[bi]["canon"], canon):
                    hit = bi
                    break
            if hit is None:
                hit = len(drafts)
                drafts.append({
                    "tensor": acc.tensor, "space": space, "amap": amap,
                    "img": img, "canon": canon,
                    "axes": tuple(acc.index_names.index(d) for d in img.dims),
                    "arity": len(acc.index_names),
                })
                by_tensor.setdefault(acc.tensor, []).append(hit)
            assignment[(si, slot)] = hit

    demoted = set()
    for tensor, idxs in by_tensor.items():
        for x in range(len(idxs)):
            for y in range(x + 1, len(idxs)):
                a, b = drafts[idxs[x]]["canon"], drafts[idxs[y]]["canon"]
                if a.dims != b.dims or not regions_disjoint(a, b):
                    demoted.add(tensor)

    buffers = []
    remap = {}
    dense_id = {}
    for bi, d in enumerate(drafts):
        if d["tensor"] in demoted:
            if d["tensor"] not in dense_id:
                dense_id[d["tensor"]] = len(buffers)
                buffers.append(Buffer(
                    id=len(buffers), tensor=d["tensor"], layout="dense",
                    arity=d["arity"], accessed=None, axes=None, index=None,
                    reason="partial-overlap"))
            remap[bi] = dense_id[d["tensor"]]
            continue
        ix = symbolic_indexing(d["space"], d["amap"], d["tensor"])
        remap[bi] = len(buffers)
        buffers.append(Buffer(
            id=len(buffers), tensor=d["tensor"], layout="compressed",
            arity=d["arity"], accessed=ix.accessed, axes=d["axes"], index=ix))

    assignment = {key: remap[bi] for key, bi in assignment.items()}
    return BufferRegistry(tuple(buffers), assignment)


# ---------------------------------------------------------------------------
# Loop-invariant hoisting


@dataclass(frozen=True)
class HoistPlan:
    """Rank polynomial split by deepest loop level.

    const depends on params only and hoists above all loops; levels[k] is a
    tuple of (exponent, coefficient) pairs for dims[k], every coefficient
    depending only on params and dims before k.  Summing all level terms
    reproduces the polynomial exactly.
    """

    dims: tuple
    const: QuasiPolynomial
    levels: tuple

    def evaluate(self, binding):
        total = self.const.evaluate(binding)
        for var, parts in zip(self.dims, self.levels):
            for e, coeff in parts:
                total += coeff.evaluate(binding) * Fraction(binding[var]) ** e
        return total


def hoist_schedule(rank, dims):
    dims = tuple(dims)
    depth = {d: k for k, d in enumerate(dims)}
    const = QuasiPolynomial()
    buckets = [QuasiPolynomial() for _ in dims]
    for mono, coeff in rank.terms.items():
        term = QuasiPolynomial({mono: coeff})
        levels_hit = [depth[v] for v, _ in mono if v in depth]
        if not levels_hit:
            const = const + term
        else:
            k = max(levels_hit)
            buckets[k] = buckets[k] + term
    levels = []
    for k, var in enumerate(dims):
        parts = tuple(sorted(buckets[k].coeffs_in(var).items()))
        assert all(e >= 1 for e, _ in parts)
        levels.append(parts)
    return HoistPlan(dims, const, tuple(levels))
