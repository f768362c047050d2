"""Synthetic head-and-neck-like phantoms and their beamlet influence matrices.

A case is a 2-D voxel grid with a CTV and a set of organs at risk, two oblique
carbon-like fields and a dense voxel-by-beamlet influence matrix.  Everything
here is a pure function of its inputs so cases can be shared read-only across
worker processes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CTV = "CTV"

# Canonical DVH row order: CTV first, then the 18 OARs in parameter-table order.
HNC_STRUCTURES = (
    "CTV",
    "BrainStem",
    "SpinalCord",
    "OpticChiasm",
    "Opt_R",
    "Opt_L",
    "TemporalLobe_R",
    "TemporalLobe_L",
    "Mandible",
    "TMJ_R",
    "TMJ_L",
    "Parotid_R",
    "Parotid_L",
    "Lens_R",
    "Lens_L",
    "Eye_R",
    "Eye_L",
    "InnerEar_R",
    "InnerEar_L",
)

# Ellipses in normalized grid coordinates: (center_x, center_y, radius_x, radius_y).
# y grows posteriorly; patient right is drawn on the left of the image.
_HNC_LAYOUT = {
    "CTV": (0.50, 0.46, 0.14, 0.13),
    "BrainStem": (0.50, 0.66, 0.055, 0.055),
    "SpinalCord": (0.50, 0.80, 0.035, 0.035),
    "OpticChiasm": (0.50, 0.305, 0.05, 0.025),
    "Opt_R": (0.42, 0.255, 0.045, 0.022),
    "Opt_L": (0.58, 0.255, 0.045, 0.022),
    "TemporalLobe_R": (0.27, 0.44, 0.075, 0.11),
    "TemporalLobe_L": (0.73, 0.44, 0.075, 0.11),
    "Mandible": (0.50, 0.11, 0.11, 0.035),
    "TMJ_R": (0.29, 0.63, 0.035, 0.035),
    "TMJ_L": (0.71, 0.63, 0.035, 0.035),
    "Parotid_R": (0.22, 0.73, 0.06, 0.08),
    "Parotid_L": (0.78, 0.73, 0.06, 0.08),
    "Lens_R": (0.32, 0.105, 0.028, 0.022),
    "Lens_L": (0.68, 0.105, 0.028, 0.022),
    "Eye_R": (0.32, 0.175, 0.06, 0.05),
    "Eye_L": (0.68, 0.175, 0.06, 0.05),
    "InnerEar_R": (0.38, 0.74, 0.03, 0.03),
    "InnerEar_L": (0.62, 0.74, 0.03, 0.03),
}

# Two-structure layout used for fast end-to-end training runs: the cord bites
# into the posterior CTV edge so coverage and sparing genuinely compete.
_TINY_LAYOUT = {
    "CTV": (0.50, 0.45, 0.24, 0.20),
    "SpinalCord": (0.50, 0.66, 0.08, 0.08),
}

TEMPLATES = {"hnc": _HNC_LAYOUT, "tiny": _TINY_LAYOUT}

BODY_RADII = (0.46, 0.48)


class PhantomError(ValueError):
    """Raised when a case cannot be built or fails its invariants."""


@dataclass(frozen=True)
class GridSpec:
    nx: int = 64
    ny: int = 64
    voxel_size_mm: float = 3.0
    slice_thickness_mm: float = 3.0

    def __post_init__(self):
        if self.nx < 16 or self.ny < 16:
            raise PhantomError(f"grid {self.nx}x{self.ny} is below the 16x16 minimum")
        if self.voxel_size_mm <= 0 or self.slice_thickness_mm <= 0:
            raise PhantomError("voxel dimensions must be positive")

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny

    @property
    def voxel_volume_cc(self) -> float:
        return self.voxel_size_mm**2 * self.slice_thickness_mm / 1000.0

    def centers_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Voxel-center coordinates, each of shape (ny, nx)."""
        xs = (np.arange(self.nx) + 0.5) * self.voxel_size_mm
        ys = (np.arange(self.ny) + 0.5) * self.voxel_size_mm
        return np.meshgrid(xs, ys)


# Bragg-like depth dose, tabulated on the depth coordinate normalized so that
# 0 is the proximal and 1 the distal CTV edge along a beamlet's ray.
DEFAULT_DEPTH_PROFILE = (
    (-4.0, -0.15, 0.0, 1.0, 1.12, 1.3, 2.5),
    (0.30, 0.45, 1.0, 1.0, 0.15, 0.06, 0.0),
)


@dataclass(frozen=True)
class BeamConfig:
    gantry_angles_deg: tuple[float, ...] = (45.0, 315.0)
    beamlets_per_field: int = 32
    lateral_sigma_mm: float = 4.0
    depth_profile: tuple[tuple[float, ...], tuple[float, ...]] = DEFAULT_DEPTH_PROFILE

    def __post_init__(self):
        if self.beamlets_per_field < 4:
            raise PhantomError("need at least 4 beamlets per field")
        if self.lateral_sigma_mm <= 0:
            raise PhantomError("lateral_sigma_mm must be positive")
        z, v = (np.asarray(a, dtype=float) for a in self.depth_profile)
        if z.shape != v.shape or np.any(np.diff(z) <= 0):
            raise PhantomError("depth profile abscissae must be strictly increasing")
        if np.any(v < 0) or v.max() != 1.0:
            raise PhantomError("depth profile must be nonnegative with maximum 1")

    @property
    def n_beamlets(self) -> int:
        return len(self.gantry_angles_deg) * self.beamlets_per_field


@dataclass(frozen=True)
class StructureSet:
    names: tuple[str, ...]
    masks: np.ndarray  # (n_structures, ny, nx) bool

    def __post_init__(self):
        if self.masks.ndim != 3 or self.masks.shape[0] != len(self.names):
            raise PhantomError("one mask per structure name is required")
        if self.names[0] != CTV:
            raise PhantomError("the CTV must be the first structure")
        empty = [n for n, m in zip(self.names, self.masks) if not m.any()]
        if empty:
            raise PhantomError(f"empty structure masks: {', '.join(empty)}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def flat(self, name: str) -> np.ndarray:
        """Flattened voxel indices of one structure."""
        return np.flatnonzero(self.masks[self.index(name)])


@dataclass(frozen=True, eq=False)
class Case:
    id: str
    grid: GridSpec
    structures: StructureSet
    beams: BeamConfig
    influence: np.ndarray  # (n_voxels, n_beamlets), Gy per unit fluence
    prescription_gy: float = 60.0
    seed: int = 0
    template: str = "hnc"

    def __post_init__(self):
        if self.influence.shape[0] != self.grid.n_voxels:
            raise PhantomError("influence rows must match the voxel count")
        if self.prescription_gy <= 0:
            raise PhantomError("prescription must be positive")

    @property
    def n_beamlets(self) -> int:
        return self.influence.shape[1]


def _ellipse(xn, yn, cx, cy, rx, ry):
    return ((xn - cx) / rx) ** 2 + ((yn - cy) / ry) ** 2 <= 1.0


def build_structures(seed: int, grid: GridSpec, template: str = "hnc") -> StructureSet:
    """Rasterize a template layout with small seeded jitter of centers and radii."""
    try:
        layout = TEMPLATES[template]
    except KeyError:
        raise PhantomError(f"unknown template {template!r}; choose from {sorted(TEMPLATES)}") from None
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x9E3779B9])
    xs = (np.arange(grid.nx) + 0.5) / grid.nx
    ys = (np.arange(grid.ny) + 0.5) / grid.ny
    xn, yn = np.meshgrid(xs, ys)

    names = tuple(layout)
    masks = np.zeros((len(names), grid.ny, grid.nx), dtype=bool)
    for k, name in enumerate(names):
        cx, cy, rx, ry = layout[name]
        dx, dy = rng.uniform(-0.01, 0.01, size=2)
        sx, sy = rng.uniform(0.92, 1.08, size=2)
        masks[k] = _ellipse(xn, yn, cx + dx, cy + dy, rx * sx, ry * sy)
    # CTV is trimmed away from every OAR, so it never contains one.
    masks[0] &= ~masks[1:].any(axis=0)

    empty = [n for n, m in zip(names, masks) if not m.any()]
    if empty:
        raise PhantomError(
            f"grid {grid.nx}x{grid.ny} too small for template {template!r}: "
            f"no voxels for {', '.join(empty)}"
        )
    return StructureSet(names, masks)


def body_mask(grid: GridSpec) -> np.ndarray:
    xs = (np.arange(grid.nx) + 0.5) / grid.nx
    ys = (np.arange(grid.ny) + 0.5) / grid.ny
    xn, yn = np.meshgrid(xs, ys)
    return _ellipse(xn, yn, 0.5, 0.5, *BODY_RADII)


def _entry_depth(px, py, dx, dy, cx, cy, ax, ay):
    """Distance travelled inside the body ellipse before reaching (px, py).

    Solves for the positive root s of the ray p - s*d hitting the ellipse.
    """
    ux, uy = (px - cx) / ax, (py - cy) / ay
    vx, vy = dx / ax, dy / ay
    a = vx**2 + vy**2
    b = -2.0 * (ux * vx + uy * vy)
    c = ux**2 + uy**2 - 1.0
    disc = np.maximum(b * b - 4 * a * c, 0.0)
    return np.maximum((-b + np.sqrt(disc)) / (2 * a), 0.0)


def compute_influence(grid: GridSpec, structures: StructureSet, beams: BeamConfig,
                      prescription_gy: float = 60.0) -> np.ndarray:
    """Dense voxel x beamlet dose-deposition matrix.

    Column j is the unit-fluence dose of beamlet j: the tabulated depth profile
    along the ray (stretched per beamlet so its plateau spans the CTV) times a
    lateral Gaussian truncated at 3 sigma.  The matrix is scaled once so that a
    unit uniform fluence gives the prescription as CTV mean dose.
    """
    px, py = grid.centers_mm()
    px, py = px.ravel(), py.ravel()
    half_x = grid.nx * grid.voxel_size_mm / 2
    half_y = grid.ny * grid.voxel_size_mm / 2
    ax, ay = BODY_RADII[0] * 2 * half_x, BODY_RADII[1] * 2 * half_y
    inside = body_mask(grid).ravel()
    ctv = structures.masks[0].ravel()
    sigma = beams.lateral_sigma_mm
    z_tab, v_tab = (np.asarray(a, dtype=float) for a in beams.depth_profile)

    columns = []
    for angle in beams.gantry_angles_deg:
        th = math.radians(angle)
        # gantry 0 enters anteriorly and travels toward +y (posterior)
        dx, dy = -math.sin(th), math.cos(th)
        lat = (px - half_x) * math.cos(th) + (py - half_y) * math.sin(th)
        depth = _entry_depth(px, py, dx, dy, half_x, half_y, ax, ay)

        ctv_lat, ctv_depth = lat[ctv], depth[ctv]
        lo, hi = ctv_lat.min() - sigma, ctv_lat.max() + sigma
        positions = np.linspace(lo, hi, beams.beamlets_per_field)
        field_prox, field_dist = ctv_depth.min(), ctv_depth.max()
        half_width = max((hi - lo) / (beams.beamlets_per_field - 1), grid.voxel_size_mm) / 2

        for u in positions:
            near = np.abs(ctv_lat - u) <= half_width
            if near.any():
                prox, dist = ctv_depth[near].min(), ctv_depth[near].max()
            else:
                prox, dist = field_prox, field_dist
            span = max(dist - prox, grid.voxel_size_mm)
            z = (depth - prox) / span
            off = lat - u
            lateral = np.exp(-0.5 * (off / sigma) ** 2)
            lateral[np.abs(off) > 3 * sigma] = 0.0
            col = np.interp(z, z_tab, v_tab) * lateral
            col[~inside] = 0.0
            columns.append(col)

    influence = np.stack(columns, axis=1)
    dead = np.flatnonzero(~influence.any(axis=0))
    if dead.size:
        raise PhantomError(f"beamlets {dead.tolist()} deposit no dose in the grid")
    scale = prescription_gy / influence[ctv].sum(axis=1).mean()
    return influence * scale


def generate_case(seed: int, grid: GridSpec | None = None, template: str = "hnc",
                  beams: BeamConfig | None = None, prescription_gy: float = 60.0,
                  case_id: str | None = None) -> Case:
    grid = grid or GridSpec()
    beams = beams or BeamConfig()
    structures = build_structures(seed, grid, template)
    influence = compute_influence(grid, structures, beams, prescription_gy)
    return Case(
        id=case_id or f"{template}-{seed}",
        grid=grid,
        structures=structures,
        beams=beams,
        influence=influence,
        prescription_gy=float(prescription_gy),
        seed=int(seed),
        template=template,
    )


def dose(influence: np.ndarray, fluence: np.ndarray) -> np.ndarray:
    """Forward dose model d = I f for a nonnegative fluence."""
    fluence = np.asarray(fluence, dtype=float)
    if fluence.ndim != 1 or fluence.shape[0] != influence.shape[1]:
        raise ValueError(
            f"fluence length {fluence.shape} does not match {influence.shape[1]} beamlets"
        )
    if np.any(fluence < 0):
        raise ValueError("fluence must be nonnegative")
    return influence @ fluence


# -- serialization -----------------------------------------------------------

def _rle(mask: np.ndarray) -> list[list[int]]:
    flat = np.concatenate([[False], mask.ravel(), [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(flat))
    starts, stops = edges[::2], edges[1::2]
    return [[int(s), int(e - s)] for s, e in zip(starts, stops)]


def _unrle(runs, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=bool)
    for start, length in runs:
        out[start:start + length] = True
    return out


def save_case(case: Case, directory: str | Path) -> Path:
    """Write ``<id>.json`` plus a column-major float64 influence sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = f"{case.id}.influence.bin"
    (directory / sidecar).write_bytes(np.asfortranarray(case.influence, dtype="<f8").tobytes(order="F"))
    doc = {
        "format": "planforge-case",
        "version": 1,
        "id": case.id,
        "seed": case.seed,
        "template": case.template,
        "prescription_gy": case.prescription_gy,
        "grid": asdict(case.grid),
        "beams": {
            "gantry_angles_deg": list(case.beams.gantry_angles_deg),
            "beamlets_per_field": case.beams.beamlets_per_field,
            "lateral_sigma_mm": case.beams.lateral_sigma_mm,
            "depth_profile": [list(a) for a in case.beams.depth_profile],
        },
        "structures": [
            {"name": n, "voxels": int(m.sum()), "rle": _rle(m)}
            for n, m in zip(case.structures.names, case.structures.masks)
        ],
        "influence": {
            "file": sidecar,
            "shape": list(case.influence.shape),
            "dtype": "float64",
            "byte_order": "little",
            "order": "F",
        },
    }
    path = directory / f"{case.id}.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_case(path: str | Path) -> Case:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != "planforge-case":
        raise PhantomError(f"{path}: not a planforge case file")
    grid = GridSpec(**doc["grid"])
    b = doc["beams"]
    beams = BeamConfig(
        gantry_angles_deg=tuple(b["gantry_angles_deg"]),
        beamlets_per_field=b["beamlets_per_field"],
        lateral_sigma_mm=b["lateral_sigma_mm"],
        depth_profile=tuple(tuple(a) for a in b["depth_profile"]),
    )
    names = tuple(s["name"] for s in doc["structures"])
    masks = np.stack([
        _unrle(s["rle"], grid.n_voxels).reshape(grid.ny, grid.nx) for s in doc["structures"]
    ])
    meta = doc["influence"]
    shape = tuple(meta["shape"])
    raw = np.frombuffer((path.parent / meta["file"]).read_bytes(), dtype="<f8")
    if raw.size != shape[0] * shape[1]:
        raise PhantomError(f"{path}: influence sidecar size does not match declared shape {shape}")
    influence = raw.reshape(shape, order="F").astype(np.float64)
    return Case(
        id=doc["id"],
        grid=grid,
        structures=StructureSet(names, masks),
        beams=beams,
        influence=np.ascontiguousarray(influence),
        prescription_gy=float(doc["prescription_gy"]),
        seed=int(doc["seed"]),
        template=doc["template"],
    )


def render_ascii(structures: StructureSet) -> str:
    """Crude text map of the layout, handy when tweaking templates."""
    symbols = "#abcdefghijklmnopqrstuvwxyz"
    ny, nx = structures.masks.shape[1:]
    canvas = np.full((ny, nx), ".", dtype="<U1")
    for k in range(len(structures) - 1, -1, -1):
        canvas[structures.masks[k]] = symbols[k % len(symbols)]
    return "\n".join("".join(row) for row in canvas)
