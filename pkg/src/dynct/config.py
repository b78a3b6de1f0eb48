"""Text configuration for scenes, phantoms, and run parameters.

A config file is a flat list of ``section.key = value`` lines.  ``#``
starts a comment, blank lines are ignored.  Values are numbers,
booleans, words, or whitespace-separated number lists depending on the
key.  Unknown keys are rejected with a nearest-match suggestion so a
typo fails loudly instead of silently using a default.
"""

import difflib
import math
import re

import numpy as np

from .errors import ConfigError, MissingInputError
from .geometry import (
    Box,
    CircleTrajectory,
    ConstantAttenuation,
    IdentityDeformation,
    LineSegmentTrajectory,
    PulseAttenuation,
    RadialPulseDeformation,
    Scene,
    TwoCirclesTrajectory,
)
from .phantom import Ellipsoid, GaussianBlob, Phantom, ball

_NUM = ("num", None)
_INT = ("int", None)
_BOOL = ("bool", None)
_VEC3 = ("vec", 3)


def _word(*options):
    return ("word", tuple(options))


# key -> parse rule; patterned phantom keys are handled separately
_SCHEMA = {
    "scene.trajectory": _word("circle", "two-circles", "line"),
    "scene.radius": _NUM,
    "scene.plane": _word("xy", "xz"),
    "scene.line_a": _VEC3,
    "scene.line_b": _VEC3,
    "scene.box_half": _NUM,
    "scene.box_center": _VEC3,
    "scene.d_min": _NUM,
    "deformation.kind": _word("identity", "radial-pulse", "grid"),
    "deformation.amplitude": _NUM,
    "deformation.radius": _NUM,
    "deformation.freq": _NUM,
    "deformation.phase": _NUM,
    "deformation.fields": ("path", None),
    "deformation.profile": _word("sin", "const"),
    "attenuation.kind": _word("one", "pulse"),
    "attenuation.amplitude": _NUM,
    "attenuation.radius": _NUM,
    "attenuation.freq": _NUM,
    "simulate.n_s": _INT,
    "simulate.n_u": _INT,
    "simulate.n_v": _INT,
    "simulate.rel_tol": _NUM,
    "reconstruct.grid_n": _INT,
    "reconstruct.grid_half": _NUM,
    "reconstruct.sphere_order": _INT,
    "reconstruct.n_circle": _INT,
    "reconstruct.tau_h": _NUM,
    "reconstruct.fd_step": _NUM,
    "reconstruct.richardson": _BOOL,
    "reconstruct.hemisphere": _BOOL,
    "reconstruct.data_rel_tol": _NUM,
    "reconstruct.workers": _INT,
    "localize.eps_inner": _NUM,
    "localize.eps_outer": _NUM,
    "compare.n_s": _INT,
    "compare.n_t": _INT,
    "compare.risk_order": _INT,
}

_PHANTOM_PAT = re.compile(r"phantom\.(blob|ball|ellipsoid)(\d+)$")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key, rule, text, lineno):
    kind, arg = rule
    try:
        if kind == "num":
            return float(text)
        if kind == "int":
            v = float(text)
            if v != int(v):
                raise ValueError
            return int(v)
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind == "vec":
            vals = [float(p) for p in text.split()]
            if len(vals) != arg:
                raise ValueError
            return np.array(vals)
        if kind == "word":
            if text not in arg:
                raise ConfigError(
                    f"line {lineno}: {key} must be one of {', '.join(arg)}; got {text!r}"
                )
            return text
        if kind == "path":
            return text
    except ConfigError:
        raise
    except ValueError:
        pass
    raise ConfigError(f"line {lineno}: could not parse {key} value {text!r}")


def parse_config(text):
    """Parse config text into a flat {key: value} dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value': {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        m = _PHANTOM_PAT.match(key)
        if m is not None:
            n = {"blob": 5, "ball": 5, "ellipsoid": 7}[m.group(1)]
            out[key] = _coerce(key, ("vec", n), val, lineno)
            continue
        if key not in _SCHEMA:
            near = difflib.get_close_matches(key, list(_SCHEMA) + ["phantom.blob1"], n=1)
            hint = f" (did you mean {near[0]!r}?)" if near else ""
            raise ConfigError(f"line {lineno}: unknown key {key!r}{hint}")
        out[key] = _coerce(key, _SCHEMA[key], val, lineno)
    return out


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError as exc:
        raise MissingInputError(f"config file not found: {path}") from exc
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# builders


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config needs {key}")
    return cfg[key]


def _load_grid_deformation(cfg):
    from .fileio import read_volume
    from .geometry import GridDeformation

    prefix = _require(cfg, "deformation.fields")
    fields = []
    grid = None
    for comp in "xyz":
        vol, g = read_volume(f"{prefix}_{comp}.dvol")
        if grid is not None and (g.dims != grid.dims
                                 or not np.allclose(g.origin, grid.origin)
                                 or not np.allclose(g.spacing, grid.spacing)):
            raise ConfigError(f"displacement component volumes under {prefix!r} "
                              "do not share one grid")
        grid = g
        fields.append(vol)
    lo = grid.origin
    return GridDeformation(lo, grid.spacing, fields,
                           freq=cfg.get("deformation.freq", 1.0),
                           phase=cfg.get("deformation.phase", 0.0),
                           profile=cfg.get("deformation.profile", "sin"))


def build_scene(cfg):
    kind = cfg.get("scene.trajectory", "circle")
    if kind == "circle":
        traj = CircleTrajectory(_require(cfg, "scene.radius"),
                                plane=cfg.get("scene.plane", "xy"))
    elif kind == "two-circles":
        traj = TwoCirclesTrajectory(_require(cfg, "scene.radius"))
    else:
        traj = LineSegmentTrajectory(_require(cfg, "scene.line_a"),
                                     _require(cfg, "scene.line_b"))

    half = cfg.get("scene.box_half", 1.0)
    center = cfg.get("scene.box_center", np.zeros(3))
    u_box = Box.cube(half, center)

    dkind = cfg.get("deformation.kind", "identity")
    if dkind == "identity":
        deform = IdentityDeformation()
    elif dkind == "radial-pulse":
        deform = RadialPulseDeformation(
            amplitude=cfg.get("deformation.amplitude", 0.1),
            radius=cfg.get("deformation.radius", half * math.sqrt(3.0) * 1.05),
            freq=cfg.get("deformation.freq", 1.0),
            phase=cfg.get("deformation.phase", 0.0),
            center=center,
        )
    else:
        deform = _load_grid_deformation(cfg)

    akind = cfg.get("attenuation.kind", "one")
    if akind == "one":
        atten = ConstantAttenuation(cfg.get("attenuation.amplitude", 1.0))
    else:
        atten = PulseAttenuation(
            amplitude=cfg.get("attenuation.amplitude", 0.2),
            radius=cfg.get("attenuation.radius", half * math.sqrt(3.0) * 1.05),
            freq=cfg.get("attenuation.freq", 1.0),
            center=center,
        )

    return Scene(traj, deform, atten, u_box=u_box, d_min=cfg.get("scene.d_min"))


def build_phantom(cfg):
    parts = []
    keyed = []
    for key, vals in cfg.items():
        m = _PHANTOM_PAT.match(key)
        if m is not None:
            keyed.append((int(m.group(2)), m.group(1), vals))
    for _, kind, vals in sorted(keyed, key=lambda t: t[0]):
        if kind == "blob":
            parts.append(GaussianBlob(vals[:3], amplitude=vals[3], width=vals[4]))
        elif kind == "ball":
            parts.append(ball(vals[:3], radius=vals[3], amplitude=vals[4]))
        else:
            parts.append(Ellipsoid(vals[:3], semi_axes=vals[3:6], amplitude=vals[6]))
    if not parts:
        raise ConfigError("config defines no phantom parts "
                          "(phantom.blob1 / phantom.ball1 / phantom.ellipsoid1)")
    return Phantom(parts)


def config_summary(cfg):
    lines = [f"{k} = {v}" for k, v in sorted(cfg.items())]
    return "\n".join(lines)
