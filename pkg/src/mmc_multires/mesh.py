"""Background grid, hyper-element mesh and design-domain partitioning.

Both meshes are structured and axis aligned with the origin at zero.
Nodes and cells are numbered x-fastest, then y, then z::

    node(i, j, k) = i + (nx + 1) * (j + (ny + 1) * k)
    cell(i, j, k) = i + nx * (j + ny * k)

so a flat nodal array reshapes to ``(nz+1, ny+1, nx+1)`` (C order) and a
flat cell array to ``(nz, ny, nx)``.
"""

from __future__ import annotations

import itertools
from functools import cached_property

import numpy as np


def _corner_offsets(dim: int) -> np.ndarray:
    """Unit offsets of the element corners in counter-clockwise order.

    2D: (0,0) (1,0) (1,1) (0,1); 3D repeats that square on z=0 then z=1.
    """
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
    if dim == 2:
        return square
    return np.array([[x, y, z] for z in (0, 1) for x, y in square])


class BackgroundGrid:
    """Uniform grid of square/brick cells used for geometry and integration."""

    def __init__(self, shape, lengths):
        shape = tuple(int(n) for n in shape)
        lengths = tuple(float(v) for v in lengths)
        if len(shape) not in (2, 3) or len(lengths) != len(shape):
            raise ValueError("grid needs 2 or 3 cell counts and matching lengths")
        if any(n < 1 for n in shape):
            raise ValueError(f"cell counts must be >= 1, got {shape}")
        if any(not np.isfinite(v) or v <= 0.0 for v in lengths):
            raise ValueError(f"domain lengths must be positive, got {lengths}")
        self.shape = shape
        self.lengths = lengths

    def __repr__(self):
        return f"BackgroundGrid(shape={self.shape}, lengths={self.lengths})"

    def __eq__(self, other):
        return (
            isinstance(other, BackgroundGrid)
            and self.shape == other.shape
            and self.lengths == other.lengths
        )

    def __hash__(self):
        return hash((self.shape, self.lengths))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple:
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    @property
    def node_shape(self) -> tuple:
        return tuple(n + 1 for n in self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        """Area (2D) or volume (3D) of one cell, ``A_g``."""
        return float(np.prod(self.spacing))

    @property
    def domain_volume(self) -> float:
        return float(np.prod(self.lengths))

    def axis_coords(self, axis: int) -> np.ndarray:
        return np.arange(self.shape[axis] + 1) * self.spacing[axis]

    def node_coordinates(self) -> np.ndarray:
        """``(n_nodes, dim)`` coordinates in node-number order."""
        axes = [self.axis_coords(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes[::-1], indexing="ij")[::-1]
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_centers(self) -> np.ndarray:
        """``(n_cells, dim)`` cell-center coordinates in cell-number order."""
        axes = [(np.arange(n) + 0.5) * h for n, h in zip(self.shape, self.spacing)]
        mesh = np.meshgrid(*axes[::-1], indexing="ij")[::-1]
        return np.stack([m.ravel() for m in mesh], axis=1)

    def node_id(self, index) -> int:
        idx = 0
        stride = 1
        for i, n in zip(index, self.node_shape):
            idx += int(i) * stride
            stride *= n
        return idx

    def cell_nodes(self) -> np.ndarray:
        """``(n_cells, 2**dim)`` corner node ids per cell."""
        ns = self.node_shape
        cells = np.indices(self.shape[::-1]).reshape(self.dim, -1)[::-1]
        out = np.empty((self.n_cells, 2**self.dim), dtype=np.int64)
        for c, off in enumerate(_corner_offsets(self.dim)):
            idx = np.zeros(self.n_cells, dtype=np.int64)
            stride = 1
            for a in range(self.dim):
                idx += (cells[a] + off[a]) * stride
                stride *= ns[a]
            out[:, c] = idx
        return out

    def nodal_view(self, values: np.ndarray) -> np.ndarray:
        """Reshape a flat nodal array to ``(..., ny+1, nx+1)`` grid order."""
        return values.reshape(self.node_shape[::-1])

    def cell_view(self, values: np.ndarray) -> np.ndarray:
        return values.reshape(self.shape[::-1])

    def cell_average(self, nodal: np.ndarray) -> np.ndarray:
        """Mean of the corner values of every cell (flat cell order)."""
        g = self.nodal_view(nodal)
        acc = np.zeros(self.shape[::-1])
        for off in itertools.product((0, 1), repeat=self.dim):
            sl = tuple(slice(o, o + n) for o, n in zip(off, self.shape[::-1]))
            acc += g[sl]
        acc /= 2**self.dim
        return acc.ravel()

    def scatter_to_nodes(self, cell_values: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`cell_average` without the 1/2**dim factor.

        Each node receives the sum of the values of the cells touching it.
        """
        c = self.cell_view(cell_values)
        out = np.zeros(self.node_shape[::-1])
        for off in itertools.product((0, 1), repeat=self.dim):
            sl = tuple(slice(o, o + n) for o, n in zip(off, self.shape[::-1]))
            out[sl] += c
        return out.ravel()

    def cells_in_region(self, region: dict) -> np.ndarray:
        """Boolean cell mask for a ``box`` or ``cylinder`` region spec.

        A cell belongs to the region when its center does.
        ``{"shape": "box", "lo": [...], "hi": [...]}``
        ``{"shape": "cylinder", "axis": k, "center": [..], "radius": r,
        "range": [lo, hi]}`` (3D only; ``center`` is in the two other axes).
        """
        xc = self.cell_centers()
        kind = region.get("shape", "box")
        if kind == "box":
            lo = np.asarray(region["lo"], dtype=float)
            hi = np.asarray(region["hi"], dtype=float)
            return np.all((xc >= lo) & (xc <= hi), axis=1)
        if kind == "cylinder":
            if self.dim != 3:
                raise ValueError("cylinder regions need a 3D grid")
            axis = int(region["axis"])
            others = [a for a in range(3) if a != axis]
            ctr = np.asarray(region["center"], dtype=float)
            r2 = ((xc[:, others] - ctr) ** 2).sum(axis=1)
            lo, hi = region["range"]
            along = xc[:, axis]
            return (r2 <= float(region["radius"]) ** 2) & (along >= lo) & (along <= hi)
        raise ValueError(f"unknown region shape {kind!r}")

    def nodes_of_cells(self, mask: np.ndarray) -> np.ndarray:
        """Boolean nodal mask of every corner of the selected cells."""
        out = np.zeros(self.n_nodes, dtype=bool)
        if mask.any():
            out[self.cell_nodes()[mask].ravel()] = True
        return out


def build_background_grid(*args) -> BackgroundGrid:
    """Build a grid from ``(nx, ny, lx, ly)``, ``(nx, ny, nz, lx, ly, lz)``
    or ``(counts, lengths)``."""
    if len(args) == 2:
        counts, lengths = args
    elif len(args) in (4, 6):
        half = len(args) // 2
        counts, lengths = args[:half], args[half:]
    else:
        raise TypeError("expected (counts, lengths) or 4/6 scalars")
    for n in counts:
        if int(n) != n:
            raise ValueError(f"cell counts must be integers, got {counts}")
    return BackgroundGrid(counts, lengths)


class HyperMesh:
    """Coarse displacement mesh; each element owns ``ratio**dim`` cells.

    Integration points sit at the centers of the owned background cells.
    Local cell order inside a hyper-element is x-fastest, like the grid.
    """

    def __init__(self, grid: BackgroundGrid, ratio: int):
        ratio = int(ratio)
        if ratio < 1:
            raise ValueError("ratio must be >= 1")
        for axis, n in enumerate(grid.shape):
            if n % ratio:
                raise ValueError(
                    f"ratio {ratio} does not divide {n} background cells "
                    f"along axis {'xyz'[axis]}"
                )
        self.grid = grid
        self.ratio = ratio
        self.shape = tuple(n // ratio for n in grid.shape)

    def __repr__(self):
        return f"HyperMesh(shape={self.shape}, ratio={self.ratio})"

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def ng(self) -> int:
        return self.ratio**self.dim

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def node_shape(self) -> tuple:
        return tuple(n + 1 for n in self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def n_dofs(self) -> int:
        return self.dim * self.n_nodes

    @property
    def element_size(self) -> tuple:
        return tuple(h * self.ratio for h in self.grid.spacing)

    def _element_index(self) -> np.ndarray:
        return np.indices(self.shape[::-1]).reshape(self.dim, -1)[::-1]

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """``(n_elements, 2**dim)`` hyper node ids, corners counter-clockwise."""
        el = self._element_index()
        ns = self.node_shape
        out = np.empty((self.n_elements, 2**self.dim), dtype=np.int64)
        for c, off in enumerate(_corner_offsets(self.dim)):
            idx = np.zeros(self.n_elements, dtype=np.int64)
            stride = 1
            for a in range(self.dim):
                idx += (el[a] + off[a]) * stride
                stride *= ns[a]
            out[:, c] = idx
        return out

    @cached_property
    def element_dofs(self) -> np.ndarray:
        d = self.dim
        nodes = self.element_nodes
        return (d * nodes[:, :, None] + np.arange(d)).reshape(len(nodes), -1)

    @cached_property
    def local_cells(self) -> np.ndarray:
        """``(ng, dim)`` integer offsets of the owned cells, x-fastest."""
        r = self.ratio
        idx = np.indices((r,) * self.dim).reshape(self.dim, -1)[::-1]
        return idx.T.copy()

    @cached_property
    def local_points(self) -> np.ndarray:
        """``(ng, dim)`` natural coordinates in [-1, 1] of the cell centers."""
        return -1.0 + (2.0 * self.local_cells + 1.0) / self.ratio

    @cached_property
    def cells(self) -> np.ndarray:
        """``(n_elements, ng)`` background cell ids owned by each element."""
        el = self._element_index()
        gs = self.grid.shape
        out = np.zeros((self.n_elements, self.ng), dtype=np.int64)
        stride = 1
        for a in range(self.dim):
            glob = el[a][:, None] * self.ratio + self.local_cells[None, :, a]
            out += glob * stride
            stride *= gs[a]
        return out

    def integration_points(self, element: int | None = None) -> np.ndarray:
        """Physical coordinates of the integration points."""
        pts = self.grid.cell_centers()[self.cells]
        return pts if element is None else pts[element]

    def node_coordinates(self) -> np.ndarray:
        axes = [np.arange(n + 1) * h for n, h in zip(self.shape, self.element_size)]
        mesh = np.meshgrid(*axes[::-1], indexing="ij")[::-1]
        return np.stack([m.ravel() for m in mesh], axis=1)

    def node_at(self, point, tol: float = 1e-9) -> int:
        """Id of the hyper node located at ``point`` (must coincide)."""
        idx = []
        for x, h, n in zip(point, self.element_size, self.shape):
            k = round(float(x) / h)
            if abs(k * h - x) > tol * max(1.0, abs(x)) or not 0 <= k <= n:
                raise ValueError(f"point {tuple(point)} is not a node of {self!r}")
            idx.append(k)
        node = 0
        stride = 1
        for i, n in zip(idx, self.node_shape):
            node += i * stride
            stride *= n
        return node


def build_hyper_mesh(grid: BackgroundGrid, n_be: int) -> HyperMesh:
    return HyperMesh(grid, n_be)


class SubregionGrid:
    """Non-overlapping tiling of the domain into ``counts`` equal boxes.

    A point belongs to the half-open box ``[lo, hi)`` along each axis,
    except that the last box along an axis is closed on the right.
    """

    def __init__(self, counts, lengths):
        counts = tuple(int(c) for c in counts)
        if any(c < 1 for c in counts) or len(counts) != len(lengths):
            raise ValueError(f"invalid sub-region counts {counts}")
        self.counts = counts
        self.lengths = tuple(float(v) for v in lengths)

    def __repr__(self):
        return f"SubregionGrid(counts={self.counts}, lengths={self.lengths})"

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> tuple:
        return tuple(L / c for L, c in zip(self.lengths, self.counts))

    @property
    def n_regions(self) -> int:
        return int(np.prod(self.counts))

    def locate(self, point) -> tuple:
        """Integer box index containing ``point``."""
        idx = []
        for x, L, c, h in zip(point, self.lengths, self.counts, self.size):
            if not (0.0 <= x <= L):
                raise ValueError(f"point {tuple(point)} lies outside the domain")
            idx.append(min(int(np.floor(x / h)), c - 1))
        return tuple(idx)

    def box(self, index) -> tuple[np.ndarray, np.ndarray]:
        h = np.array(self.size)
        lo = np.array(index, dtype=float) * h
        hi = lo + h
        # keep the outer faces exactly on the domain boundary
        for a, (i, c) in enumerate(zip(index, self.counts)):
            if i == c - 1:
                hi[a] = self.lengths[a]
        return lo, hi

    def boxes(self) -> list:
        ranges = [range(c) for c in self.counts]
        return [self.box(idx[::-1]) for idx in itertools.product(*ranges[::-1])]


def default_variable_bounds(dim: int, lengths, size_floor=None, size_cap=None):
    """Global (lower, upper) bounds for one component's parameters.

    Sizes are floored at ``1e-3 * min(lengths)``. Half-lengths are capped
    at ``0.25 * max(lengths)`` and 2D half-thicknesses at
    ``0.05 * min(lengths)``; wider thickness ranges make the first MMA
    steps (move limit = 10% of the range) thin whole members at once.
    Angles span [-pi, pi] in 2D and (-pi/2, pi/2] in 3D.
    """
    lengths = np.asarray(lengths, dtype=float)
    floor = 1e-3 * lengths.min() if size_floor is None else float(size_floor)
    cap = size_cap
    if dim == 2:
        a_cap = 0.25 * lengths.max() if cap is None else cap[0]
        t_cap = 0.05 * lengths.min() if cap is None else cap[1]
        lo = np.array([0.0, 0.0, floor, floor, floor, -np.pi])
        hi = np.array([lengths[0], lengths[1], a_cap, t_cap, t_cap, np.pi])
    else:
        L_cap = 0.25 * lengths.max() if cap is None else cap[0]
        # -pi/2 itself is excluded by the rotation parameterisation
        lo = np.r_[np.zeros(3), np.full(3, floor), np.full(3, np.nextafter(-np.pi / 2, 0.0))]
        hi = np.r_[lengths, np.full(3, L_cap), np.full(3, np.pi / 2)]
    return lo, hi


def partition_bounds(subregions: SubregionGrid, design, size_floor=None, size_cap=None):
    """Per-variable bounds with every center confined to its sub-region.

    ``design`` is an ``(n_components, n_params)`` array; the first ``dim``
    columns are the center coordinates. Returns flat ``(lower, upper)``.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    dim = subregions.dim
    lo1, hi1 = default_variable_bounds(dim, subregions.lengths, size_floor, size_cap)
    if design.shape[1] != lo1.size:
        raise ValueError("design column count does not match the dimension")
    lo = np.tile(lo1, (len(design), 1))
    hi = np.tile(hi1, (len(design), 1))
    for c, row in enumerate(design):
        blo, bhi = subregions.box(subregions.locate(row[:dim]))
        lo[c, :dim] = blo
        hi[c, :dim] = bhi
    return lo.ravel(), hi.ravel()
