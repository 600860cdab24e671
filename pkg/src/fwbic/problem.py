"""Problem description: cavity geometry, materials, perturbation family and
numerical settings, plus validation and JSON (de)serialization.

Coordinates follow the junction convention: the waveguide opening is the
segment ``x1 = 0, |x2| < h/2`` on the right wall of the rectangular cavity,
and the waveguide extends into ``x1 > 0``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadIndexBounds,
    ClearZoneViolation,
    ConfigError,
    DegenerateGeometry,
    MultiModeBand,
)

_GEOM_TOL = 1e-12


@dataclass(frozen=True)
class Inclusion:
    """Circular inclusion. ``index`` applies when the region is not swept."""

    center: tuple[float, float]
    radius: float
    region_id: int
    index: float = 1.0


@dataclass(frozen=True)
class IndexSweep:
    """Refractive index ``n(delta) = n_base + delta`` on ``region_ids``."""

    region_ids: tuple[int, ...]
    n_base: float
    kind: str = field(default="IndexSweep", init=False)

    def index(self, delta):
        return self.n_base + delta


@dataclass(frozen=True)
class BoundaryScaling:
    """Cavity stretched along x1 by the factor ``1 + delta*C_R`` about the
    junction wall, which therefore stays in place."""

    C_R: float
    kind: str = field(default="BoundaryScaling", init=False)

    def factor(self, delta):
        return 1.0 + delta * self.C_R


@dataclass(frozen=True)
class Truncation:
    M_cav: int = 60
    J_wg: int = 40
    M: int = 7


@dataclass(frozen=True)
class Tolerances:
    fixed_point_tol: float = 1e-13
    root_tol: float = 1e-11
    eig_tol: float = 1e-8


@dataclass(frozen=True)
class ProblemSpec:
    cavity_corner_lo: tuple[float, float]
    cavity_corner_hi: tuple[float, float]
    inclusions: tuple[Inclusion, ...]
    waveguide_width: float
    perturbation: IndexSweep | BoundaryScaling
    delta_range: tuple[float, float]
    clear_zone: tuple[tuple[float, float], tuple[float, float]] | None = None
    mu_band: tuple[float, float] | None = None
    truncation: Truncation = Truncation()
    tolerances: Tolerances = Tolerances()
    resolution: int = 20
    validated: bool = field(default=False, compare=False)

    # -- derived geometry -------------------------------------------------
    @property
    def x_min(self):
        return min(self.cavity_corner_lo[0], self.cavity_corner_hi[0])

    @property
    def x_max(self):
        return max(self.cavity_corner_lo[0], self.cavity_corner_hi[0])

    @property
    def y_min(self):
        return min(self.cavity_corner_lo[1], self.cavity_corner_hi[1])

    @property
    def y_max(self):
        return max(self.cavity_corner_lo[1], self.cavity_corner_hi[1])

    @property
    def length(self):
        """Cavity extent L along x1."""
        return self.x_max - self.x_min

    @property
    def height(self):
        """Cavity extent W along x2."""
        return self.y_max - self.y_min

    @property
    def y0(self):
        """Offset of the opening center above the lower cavity wall."""
        return -self.y_min

    @property
    def area(self):
        return self.length * self.height

    @property
    def is_homogeneous(self):
        return len(self.inclusions) == 0

    def region_indices(self, delta=0.0):
        """Map region id -> refractive index at ``delta`` (0 is the host)."""
        out = {0: 1.0}
        swept = ()
        if isinstance(self.perturbation, IndexSweep):
            swept = self.perturbation.region_ids
        for inc in self.inclusions:
            if inc.region_id in swept:
                out[inc.region_id] = self.perturbation.index(delta)
            else:
                out[inc.region_id] = inc.index
        return out

    def index_bounds(self):
        """(n0, n1) over all regions and the whole delta range."""
        values = []
        for d in self.delta_range:
            values.extend(self.region_indices(d).values())
        return min(values), max(values)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# validation


def _disk_rect_distance(center, rect):
    (xl, yl), (xh, yh) = rect
    dx = max(xl - center[0], 0.0, center[0] - xh)
    dy = max(yl - center[1], 0.0, center[1] - yh)
    return math.hypot(dx, dy)


def default_clear_zone(spec):
    """Largest rectangle ``(-w_B, 0) x (-h/2-m, h/2+m)`` with ``m = h/4`` that
    avoids every inclusion; ``w_B`` is capped by the cavity length."""
    h = spec.waveguide_width
    m = h / 4
    ylo = max(-h / 2 - m, spec.y_min)
    yhi = min(h / 2 + m, spec.y_max)
    width = spec.length
    for inc in spec.inclusions:
        cx, cy = inc.center
        dy = max(ylo - cy, 0.0, cy - yhi)
        if dy >= inc.radius:
            continue
        width = min(width, -cx - math.sqrt(inc.radius**2 - dy**2))
    if width <= 0:
        raise ClearZoneViolation(
            "no clear zone adjacent to the opening avoids the inclusions",
            width=width,
        )
    return ((-width, ylo), (0.0, yhi))


def validate_spec(spec, check_clear_zone=True):
    """Check the geometric and material invariants and fill derived fields.

    Returns a copy with ``clear_zone`` set (default construction when absent)
    and ``validated=True``. Validating twice returns an equal value.

    ``check_clear_zone=False`` skips the requirement that inclusions avoid
    the clear zone and ``R_h``. That requirement is a sufficient condition
    for the coupling estimates, not something the numerical method needs;
    the second worked example misses it by about 0.002.
    """
    h = spec.waveguide_width
    if not h > 0:
        raise DegenerateGeometry("waveguide width must be positive", h=h)
    if abs(spec.x_max) > _GEOM_TOL:
        raise DegenerateGeometry(
            "the opening must lie on the x1=0 wall, which must be the right "
            "side of the cavity",
            x_max=spec.x_max,
        )
    if spec.length <= 0 or spec.height <= 0:
        raise DegenerateGeometry("cavity rectangle has zero extent")
    if h >= spec.height:
        raise DegenerateGeometry(
            "waveguide width is not smaller than the wall length",
            h=h,
            wall=spec.height,
        )
    if not (spec.y_min < -h / 2 and h / 2 < spec.y_max):
        raise DegenerateGeometry(
            "waveguide opening is not strictly inside the wall",
            opening=(-h / 2, h / 2),
            wall=(spec.y_min, spec.y_max),
        )
    dl, dr = spec.delta_range
    if not dl < dr:
        raise ConfigError("delta_range must be increasing", delta_range=spec.delta_range)

    n0, n1 = spec.index_bounds()
    if n0 <= 0:
        raise BadIndexBounds(
            "refractive index is not positive over delta_range", n_min=n0, n_max=n1
        )

    if spec.mu_band is not None:
        mu_l, mu_r = spec.mu_band
        if not mu_l < mu_r:
            raise ConfigError("mu_band must be increasing", mu_band=spec.mu_band)
        cutoff = math.pi**2 / h**2
        if mu_r >= cutoff:
            raise MultiModeBand(
                "band admits more than one propagating waveguide mode",
                mu_r=mu_r,
                cutoff=cutoff,
            )

    r_h = ((-h / math.pi, -h / 2), (0.0, h / 2))
    clear = spec.clear_zone
    if clear is None:
        try:
            clear = default_clear_zone(spec)
        except ClearZoneViolation:
            if check_clear_zone:
                raise
            clear = r_h
    else:
        clear = (tuple(map(float, clear[0])), tuple(map(float, clear[1])))
        (xl, yl), (xh, yh) = clear
        if not (abs(xh) <= _GEOM_TOL and yl <= -h / 2 and yh >= h / 2):
            raise ClearZoneViolation(
                "the opening must lie on the boundary of the clear zone", clear_zone=clear
            )
    (xl, yl), (xh, yh) = clear
    if check_clear_zone and not (xl <= -h / math.pi and yl <= -h / 2 and yh >= h / 2):
        raise ClearZoneViolation("R_h is not contained in the clear zone", clear_zone=clear)
    for inc in spec.inclusions if check_clear_zone else ():
        for name, rect in (("clear zone", clear), ("R_h", r_h)):
            if _disk_rect_distance(inc.center, rect) < inc.radius - _GEOM_TOL:
                raise ClearZoneViolation(
                    f"inclusion {inc.region_id} intersects the {name}",
                    region_id=inc.region_id,
                    rect=rect,
                )

    for inc in spec.inclusions:
        cx, cy = inc.center
        r = inc.radius
        if r <= 0:
            raise DegenerateGeometry("inclusion radius must be positive", region_id=inc.region_id)
        if (
            cx - r < spec.x_min - _GEOM_TOL
            or cx + r > spec.x_max + _GEOM_TOL
            or cy - r < spec.y_min - _GEOM_TOL
            or cy + r > spec.y_max + _GEOM_TOL
        ):
            raise DegenerateGeometry("inclusion leaves the cavity", region_id=inc.region_id)
        if inc.region_id == 0:
            raise ConfigError("region id 0 is reserved for the host medium")

    t = spec.truncation
    if t.M < 3 or t.M_cav <= t.M or t.J_wg < 1:
        raise ConfigError(
            "truncation needs M >= 3, M_cav > M and J_wg >= 1",
            truncation=dataclasses.asdict(t),
        )
    return spec.replace(clear_zone=clear, validated=True)


def derive_mu_band(lambdas0, M, fraction=0.2):
    """Band ``[lambda_{M-3} + 2 eps, lambda_M - 2 eps]`` with
    ``eps = fraction * min(lambda_{M-2} - lambda_{M-3}, lambda_M - lambda_{M-1})``
    computed from the reference spectrum at ``delta = 0``."""
    lam = np.asarray(lambdas0, dtype=float)
    gap = min(lam[M - 2] - lam[M - 3], lam[M] - lam[M - 1])
    if gap <= 0:
        raise ConfigError(
            "reference spectrum does not isolate the crossing pair",
            lambdas=lam[max(M - 3, 0) : M + 1],
        )
    eps = fraction * gap
    return (float(lam[M - 3] + 2 * eps), float(lam[M] - 2 * eps)), float(eps)


def with_mu_band(spec, lambdas0):
    """Return a validated spec with the automatic band filled in."""
    band, _ = derive_mu_band(lambdas0, spec.truncation.M)
    return validate_spec(spec.replace(mu_band=band))


# ---------------------------------------------------------------------------
# serialization


def to_dict(spec):
    p = spec.perturbation
    if isinstance(p, IndexSweep):
        pert = {"IndexSweep": {"region_ids": list(p.region_ids), "n_base": p.n_base}}
    else:
        pert = {"BoundaryScaling": {"C_R": p.C_R}}
    return {
        "cavity_corner_lo": list(spec.cavity_corner_lo),
        "cavity_corner_hi": list(spec.cavity_corner_hi),
        "inclusions": [
            {
                "center": list(inc.center),
                "radius": inc.radius,
                "region_id": inc.region_id,
                "index": inc.index,
            }
            for inc in spec.inclusions
        ],
        "waveguide_width": spec.waveguide_width,
        "clear_zone": None
        if spec.clear_zone is None
        else [list(spec.clear_zone[0]), list(spec.clear_zone[1])],
        "perturbation": pert,
        "delta_range": list(spec.delta_range),
        "mu_band": None if spec.mu_band is None else list(spec.mu_band),
        "truncation": dataclasses.asdict(spec.truncation),
        "tolerances": dataclasses.asdict(spec.tolerances),
        "resolution": spec.resolution,
    }


def _pair(value, name):
    try:
        a, b = value
        return (float(a), float(b))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a pair of numbers", value=value) from exc


_KEYS = {
    "cavity_corner_lo",
    "cavity_corner_hi",
    "inclusions",
    "waveguide_width",
    "clear_zone",
    "perturbation",
    "delta_range",
    "mu_band",
    "truncation",
    "tolerances",
    "resolution",
}


def from_dict(data):
    unknown = set(data) - _KEYS
    if unknown:
        raise ConfigError("unknown configuration keys", keys=sorted(unknown))
    try:
        pert = data["perturbation"]
        if not isinstance(pert, dict) or len(pert) != 1:
            raise ConfigError("perturbation must have exactly one of IndexSweep, BoundaryScaling")
        (kind, body), = pert.items()
        if kind == "IndexSweep":
            perturbation = IndexSweep(
                region_ids=tuple(int(r) for r in body["region_ids"]),
                n_base=float(body["n_base"]),
            )
        elif kind == "BoundaryScaling":
            perturbation = BoundaryScaling(C_R=float(body["C_R"]))
        else:
            raise ConfigError("unknown perturbation kind", kind=kind)
        inclusions = tuple(
            Inclusion(
                center=_pair(inc["center"], "center"),
                radius=float(inc["radius"]),
                region_id=int(inc["region_id"]),
                index=float(inc.get("index", 1.0)),
            )
            for inc in data.get("inclusions", [])
        )
        clear = data.get("clear_zone")
        if clear is not None:
            clear = (_pair(clear[0], "clear_zone"), _pair(clear[1], "clear_zone"))
        band = data.get("mu_band")
        return ProblemSpec(
            cavity_corner_lo=_pair(data["cavity_corner_lo"], "cavity_corner_lo"),
            cavity_corner_hi=_pair(data["cavity_corner_hi"], "cavity_corner_hi"),
            inclusions=inclusions,
            waveguide_width=float(data["waveguide_width"]),
            perturbation=perturbation,
            delta_range=_pair(data["delta_range"], "delta_range"),
            clear_zone=clear,
            mu_band=None if band is None else _pair(band, "mu_band"),
            truncation=Truncation(**data.get("truncation", {})),
            tolerances=Tolerances(**data.get("tolerances", {})),
            resolution=int(data.get("resolution", 20)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing configuration key {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc


def emit(spec):
    return json.dumps(to_dict(spec), indent=2)


def parse(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    return from_dict(data)


def load(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc}", path=str(path)) from exc
    return parse(text)


# ---------------------------------------------------------------------------
# worked examples

EXAMPLE_CENTERS = [
    (-math.pi / 2 + s * 0.8, y)
    for y in (math.pi / 3, -math.pi / 3, -math.pi)
    for s in (1.0, -1.0)
]


def example_spec(width=2 * math.pi / 9, n_base=1.461, delta_range=(-0.061, 0.039), **kw):
    """Rectangle (0,-4pi/3)-(-pi,2pi/3) with six disks of radius 0.48.

    ``n_base`` is the reference index for ``delta = 0``; the default range
    covers n in [1.40, 1.50].
    """
    inclusions = tuple(
        Inclusion(center=c, radius=0.48, region_id=1) for c in EXAMPLE_CENTERS
    )
    kw.setdefault("truncation", Truncation(M_cav=60, J_wg=40, M=7))
    return ProblemSpec(
        cavity_corner_lo=(0.0, -4 * math.pi / 3),
        cavity_corner_hi=(-math.pi, 2 * math.pi / 3),
        inclusions=inclusions,
        waveguide_width=width,
        perturbation=IndexSweep(region_ids=(1,), n_base=n_base),
        delta_range=delta_range,
        **kw,
    )


def rectangle_spec(length=math.pi, height=2 * math.pi, y0=None, width=2 * math.pi / 9,
                   C_R=1.0, delta_range=(-0.05, 0.05), **kw):
    """Homogeneous rectangle under boundary scaling. ``y0`` defaults to the
    centered opening."""
    if y0 is None:
        y0 = height / 2
    kw.setdefault("truncation", Truncation(M_cav=60, J_wg=40, M=4))
    return ProblemSpec(
        cavity_corner_lo=(0.0, -y0),
        cavity_corner_hi=(-length, height - y0),
        inclusions=(),
        waveguide_width=width,
        perturbation=BoundaryScaling(C_R=C_R),
        delta_range=delta_range,
        **kw,
    )
