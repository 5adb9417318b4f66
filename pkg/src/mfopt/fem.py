"""Building-floor geometry, structured triangulation and P1 assembly.

The conductivity ``kappa(mu)`` and the heat source ``eta`` are piecewise
constant on axis-aligned boxes read from a layout file (INI syntax, one
section per box).  Assembly produces the affine decomposition

    a(u, v; mu) = sum_q theta_q(mu) a^q(u, v),   f(v) = sum_q theta_f_q(mu) f^q(v)

with one stiffness component per parameter group and one fixed component.
"""
import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from mfopt.numerics import as_csr

BOX_TYPES = ("wall", "door", "heater", "window-wall")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    name: str
    kind: str
    x0: float
    y0: float
    x1: float
    y1: float
    group: str | None = None
    value: float | None = None

    def contains(self, x, y):
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)

    def overlaps(self, other):
        return (min(self.x1, other.x1) - max(self.x0, other.x0) > 1e-12
                and min(self.y1, other.y1) - max(self.y0, other.y0) > 1e-12)

    @property
    def assignment(self):
        return ("group", self.group) if self.group is not None else ("value", self.value)


@dataclass(frozen=True)
class Geometry:
    domain: tuple
    boxes: tuple
    parameters: tuple
    mu_air: float = 0.5
    heater_power: float = 80.0

    @property
    def conductivity_boxes(self):
        return [b for b in self.boxes if b.kind != "heater"]

    @property
    def heater_boxes(self):
        return [b for b in self.boxes if b.kind == "heater"]

    def heater_value(self, box):
        return self.heater_power if box.value is None else box.value

    def conductivity_at(self, x, y, mu=None):
        """Pointwise conductivity; group boxes need a parameter vector `mu`."""
        for box in self.conductivity_boxes:
            if box.contains(x, y):
                if box.group is None:
                    return box.value
                if mu is None:
                    raise ValueError(f"point lies in parameter group {box.group!r}; pass mu")
                return mu[self.parameters.index(box.group)]
        return self.mu_air


def default_layout_path():
    return resources.files("mfopt") / "data" / "building.layout"


def build_geometry(layout="default"):
    """Parse a layout file (or the shipped default) into a :class:`Geometry`."""
    if layout is None or str(layout) == "default":
        text = default_layout_path().read_text()
    else:
        text = Path(layout).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise LayoutError(f"malformed layout file: {exc}") from exc
    if "domain" not in cp:
        raise LayoutError("layout needs a [domain] section")

    dom = cp["domain"]
    try:
        domain = tuple(float(dom[k]) for k in ("x0", "y0", "x1", "y1"))
        mu_air = dom.getfloat("mu_air", 0.5)
        heater_power = dom.getfloat("heater_power", 80.0)
    except (KeyError, ValueError) as exc:
        raise LayoutError(f"bad [domain] section: {exc}") from exc
    parameters = tuple(p.strip() for p in dom.get("parameters", "").split(",") if p.strip())

    boxes = []
    for name in cp.sections():
        if name == "domain":
            continue
        sec = cp[name]
        kind = sec.get("type", "").strip()
        if kind not in BOX_TYPES:
            raise LayoutError(f"[{name}]: unknown box type {kind!r}")
        try:
            coords = [float(sec[k]) for k in ("x0", "y0", "x1", "y1")]
        except (KeyError, ValueError) as exc:
            raise LayoutError(f"[{name}]: bad coordinates ({exc})") from exc
        group = sec.get("group")
        value = sec.get("value")
        value = float(value) if value is not None else None
        if kind == "heater":
            if group is not None:
                raise LayoutError(f"[{name}]: heater power cannot be a parameter group")
        elif (group is None) == (value is None):
            raise LayoutError(f"[{name}]: give exactly one of `group` or `value`")
        if group is not None and group not in parameters:
            raise LayoutError(f"[{name}]: group {group!r} not listed in [domain] parameters")
        box = Box(name, kind, *coords, group=group, value=value)
        if not (domain[0] <= box.x0 < box.x1 <= domain[2]
                and domain[1] <= box.y0 < box.y1 <= domain[3]):
            raise LayoutError(f"[{name}]: box must lie inside the domain")
        boxes.append(box)

    cond = [b for b in boxes if b.kind != "heater"]
    heat = [b for b in boxes if b.kind == "heater"]
    for pool in (cond, heat):
        for i, a in enumerate(pool):
            for b in pool[i + 1:]:
                if a.overlaps(b) and a.assignment != b.assignment:
                    raise LayoutError(f"boxes {a.name!r} and {b.name!r} overlap with conflicting assignments")

    return Geometry(domain, tuple(boxes), parameters, mu_air, heater_power)


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    nx: int
    ny: int

    @property
    def free(self):
        return np.flatnonzero(~self.boundary)

    def areas(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self):
        return self.nodes[self.triangles].mean(axis=1)


def triangulate(nx, ny, domain=(0.0, 0.0, 2.0, 1.0)):
    """Structured criss-cross triangulation: every cell is split into two
    triangles, with the diagonal direction alternating in a checkerboard."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    x0, y0, x1, y1 = domain
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    sw = j * (nx + 1) + i
    se = sw + 1
    nw = sw + nx + 1
    ne = nw + 1
    flip = (i + j) % 2 == 1
    # counter-clockwise orientation in both diagonal choices
    t1 = np.where(flip[:, None], np.column_stack([sw, se, nw]), np.column_stack([sw, se, ne]))
    t2 = np.where(flip[:, None], np.column_stack([se, ne, nw]), np.column_stack([sw, ne, nw]))
    triangles = np.vstack([t1, t2])

    bx = np.isclose(nodes[:, 0], x0) | np.isclose(nodes[:, 0], x1)
    by = np.isclose(nodes[:, 1], y0) | np.isclose(nodes[:, 1], y1)
    return Mesh(nodes, triangles, bx | by, nx, ny)


def _p1_element_data(mesh):
    p = mesh.nodes[mesh.triangles]
    area = mesh.areas()
    # gradients of barycentric coordinates
    x, y = p[:, :, 0], p[:, :, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([b, c], axis=2) / (2.0 * area)[:, None, None]
    stiff = area[:, None, None] * np.einsum("eid,ejd->eij", grads, grads)
    mass = area[:, None, None] * (np.ones((3, 3)) + np.eye(3)) / 12.0
    return area, stiff, mass


def _scatter(mesh, local, weights=None):
    n = mesh.nodes.shape[0]
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    vals = local if weights is None else local * weights[:, None, None]
    return sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n)).tocsr()


@dataclass
class AffineForms:
    """Parameter-separable forms restricted to the free (interior) nodes.

    ``a_index[q]`` is the parameter index whose value is ``theta_q``, or -1 for
    a component with ``theta_q == 1``; the same convention holds for loads.
    """
    mass: sp.csr_matrix
    stiffness: list
    a_index: np.ndarray
    loads: list
    f_index: np.ndarray
    output_product: sp.csr_matrix
    mu_bar: np.ndarray
    energy: sp.csr_matrix = field(init=False)
    parameter_names: tuple = ()
    mass_full: sp.csr_matrix | None = None
    free: np.ndarray | None = None

    def __post_init__(self):
        self.mu_bar = np.asarray(self.mu_bar, dtype=float)
        self.energy = self.A(self.mu_bar)

    @property
    def n_params(self):
        return len(self.parameter_names)

    @staticmethod
    def _theta(index, mu):
        mu = np.asarray(mu, dtype=float)
        return np.where(index >= 0, mu[np.maximum(index, 0)], 1.0)

    @staticmethod
    def _dtheta(index, n_params):
        # linear coefficients: d theta_q / d mu_i is 1 on the owning parameter
        D = np.zeros((len(index), n_params))
        for q, i in enumerate(index):
            if i >= 0:
                D[q, i] = 1.0
        return D

    def theta_a(self, mu):
        return self._theta(self.a_index, mu)

    def dtheta_a(self, mu):
        return self._dtheta(self.a_index, self.n_params)

    def theta_f(self, mu):
        return self._theta(self.f_index, mu)

    def dtheta_f(self, mu):
        return self._dtheta(self.f_index, self.n_params)

    def A(self, mu):
        th = self.theta_a(mu)
        out = th[0] * self.stiffness[0]
        for t, Aq in zip(th[1:], self.stiffness[1:]):
            out = out + t * Aq
        return as_csr(out)

    def dA(self, mu, i):
        D = self.dtheta_a(mu)[:, i]
        out = sp.csr_matrix(self.mass.shape)
        for d, Aq in zip(D, self.stiffness):
            if d != 0.0:
                out = out + d * Aq
        return as_csr(out)

    def f(self, mu):
        th = self.theta_f(mu)
        return sum(t * fq for t, fq in zip(th, self.loads))

    def df(self, mu, i):
        D = self.dtheta_f(mu)[:, i]
        return sum(d * fq for d, fq in zip(D, self.loads))


def assemble(geometry, mesh, reference_parameter, output_weight=1e4 / 2):
    """Assemble mass, stiffness components, load and output product with
    homogeneous Dirichlet nodes eliminated."""
    names = geometry.parameters
    area, stiff, mass = _p1_element_data(mesh)
    cx, cy = mesh.centroids().T

    ne = len(area)
    group_of = np.full(ne, -1)
    kappa_fixed = np.full(ne, geometry.mu_air)
    assigned = np.zeros(ne, dtype=bool)
    for box in geometry.conductivity_boxes:
        inside = box.contains(cx, cy) & ~assigned
        if box.group is not None:
            group_of[inside] = names.index(box.group)
        else:
            kappa_fixed[inside] = box.value
        assigned |= inside
    eta = np.zeros(ne)
    for box in geometry.heater_boxes:
        eta[box.contains(cx, cy)] = geometry.heater_value(box)

    free = mesh.free
    def restrict(A):
        return as_csr(A[free][:, free])

    components = [restrict(_scatter(mesh, stiff, np.where(group_of < 0, kappa_fixed, 0.0)))]
    a_index = [-1]
    for g, name in enumerate(names):
        w = (group_of == g).astype(float)
        if not w.any():
            raise LayoutError(f"parameter group {name!r} has no elements on this mesh")
        components.append(restrict(_scatter(mesh, stiff, w)))
        a_index.append(g)

    M_full = _scatter(mesh, mass)
    M = restrict(M_full)
    load = np.bincount(mesh.triangles.ravel(), weights=np.repeat(eta * area / 3.0, 3),
                       minlength=mesh.nodes.shape[0])[free]

    mu_bar = np.asarray(reference_parameter, dtype=float)
    if mu_bar.shape != (len(names),):
        raise ValueError(f"reference parameter must have {len(names)} entries")
    return AffineForms(
        mass=M,
        stiffness=components,
        a_index=np.array(a_index),
        loads=[load],
        f_index=np.array([-1]),
        output_product=as_csr(output_weight * M),
        mu_bar=mu_bar,
        parameter_names=names,
        mass_full=M_full,
        free=free,
    )
