"""Scenario configuration: an INI file (stdlib ``configparser``).

Sections and keys (all optional unless noted)::

    [scenario]
    builtin = kobayashi-test3        # a built-in scenario, or give both mesh paths
    h = 5.0                          # grid spacing of the built-in meshes
    volume_mesh = box.tet            # 'tetmesh' text format
    surface_mesh = box.tri           # 'trimesh' text format

    [absorption]                     # required with mesh paths, forbidden with builtin
    bands = 0 inf                    # nu_lo nu_hi pairs separated by ';'
    kappa.0 = 0.1                    # per region tag: one value per band
    scatter.0 = 0.0                  # per region tag: one value per band (default 0)

    [sources]
    label.1 = 0.1                    # Q0 per boundary label: one value, or one per band

    [reflector.<name>]               # any number of these
    label = 2
    point = 0 0 0
    normal = -1 0 0                  # pointing out of the domain
    r0 = 1.0

    [solver]
    t0 = 0.001
    tol = 1e-8
    max_iters = 50

    [hmatrix]
    eta = 2.0
    eps = 1e-4
    leaf_size = 64
    r_near = auto                    # or a length

    [output]
    probe.<name> = x0 y0 z0 ; x1 y1 z1 ; n
    field = true                     # write VTK and CSV nodal dumps

Validation collects every problem before raising :class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import AbsorptionModel, PlanarReflector
from .mesh import load_surface_mesh, load_volume_mesh
from .scenarios import SCENARIOS, Scenario, kobayashi


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class MissingMeshError(FileNotFoundError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"mesh file not found: {path}")


@dataclass
class ScenarioConfig:
    builtin: str | None = None
    h: float = 5.0
    volume_mesh: str | None = None
    surface_mesh: str | None = None
    bands: list = field(default_factory=list)
    kappa: dict = field(default_factory=dict)      # region -> [per band]
    scatter: dict = field(default_factory=dict)    # region -> [per band]
    sources: dict = field(default_factory=dict)    # label -> [per band] or [value]
    reflectors: dict = field(default_factory=dict)  # name -> dict(label, point, normal, r0)
    t0: float = 0.0
    tol: float = 1e-8
    max_iters: int = 50
    eta: float = 2.0
    eps: float = 1e-4
    leaf_size: int = 64
    r_near: float | None = None
    probes: dict = field(default_factory=dict)     # name -> (p0, p1, n)
    field_dump: bool = True

    # -- serialization -------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        sc = {"h": repr(self.h)}
        if self.builtin:
            sc["builtin"] = self.builtin
        if self.volume_mesh:
            sc["volume_mesh"] = self.volume_mesh
        if self.surface_mesh:
            sc["surface_mesh"] = self.surface_mesh
        cp["scenario"] = sc
        if self.bands:
            cp["absorption"] = {"bands": "; ".join(f"{_num(lo)} {_num(hi)}" for lo, hi in self.bands)}
            for r, vals in sorted(self.kappa.items()):
                cp["absorption"][f"kappa.{r}"] = " ".join(_num(v) for v in vals)
            for r, vals in sorted(self.scatter.items()):
                cp["absorption"][f"scatter.{r}"] = " ".join(_num(v) for v in vals)
        if self.sources:
            cp["sources"] = {f"label.{k}": " ".join(_num(v) for v in vals) for k, vals in sorted(self.sources.items())}
        for name, r in self.reflectors.items():
            cp[f"reflector.{name}"] = {
                "label": str(r["label"]), "point": " ".join(_num(v) for v in r["point"]),
                "normal": " ".join(_num(v) for v in r["normal"]), "r0": _num(r["r0"]),
            }
        cp["solver"] = {"t0": _num(self.t0), "tol": _num(self.tol), "max_iters": str(self.max_iters)}
        cp["hmatrix"] = {"eta": _num(self.eta), "eps": _num(self.eps), "leaf_size": str(self.leaf_size),
                         "r_near": "auto" if self.r_near is None else _num(self.r_near)}
        out = {"field": "true" if self.field_dump else "false"}
        for name, (p0, p1, n) in self.probes.items():
            out[f"probe.{name}"] = f"{' '.join(_num(v) for v in p0)} ; {' '.join(_num(v) for v in p1)} ; {n}"
        cp["output"] = out
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini(cls, text: str, base_dir: str = ".") -> "ScenarioConfig":
        # ';' separates probe points, so only '#' starts an inline comment
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        errors = []
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError([f"unreadable config: {exc}"]) from None
        cfg = cls()
        known = {"scenario", "absorption", "sources", "solver", "hmatrix", "output"}
        for sec in cp.sections():
            if sec not in known and not sec.startswith("reflector."):
                errors.append(f"[{sec}]: unknown section")

        def get(sec, key, conv, default, what):
            if not cp.has_option(sec, key):
                return default
            raw = cp.get(sec, key).strip()
            try:
                return conv(raw)
            except (TypeError, ValueError):
                errors.append(f"[{sec}] {key} = {raw!r}: expected {what}")
                return default

        def floats(raw):
            return [float(x) for x in raw.split()]

        def vec3(raw):
            v = floats(raw)
            if len(v) != 3:
                raise ValueError
            return v

        def check_keys(sec, allowed, prefixes=()):
            if not cp.has_section(sec):
                return
            for key in cp[sec]:
                if key not in allowed and not any(key.startswith(p) for p in prefixes):
                    errors.append(f"[{sec}] {key}: unknown key")

        check_keys("scenario", {"builtin", "h", "volume_mesh", "surface_mesh"})
        cfg.builtin = get("scenario", "builtin", str, None, "a scenario name")
        cfg.h = get("scenario", "h", float, cfg.h, "a number")
        for key in ("volume_mesh", "surface_mesh"):
            path = get("scenario", key, str, None, "a path")
            if path is not None and not os.path.isabs(path):
                path = os.path.normpath(os.path.join(base_dir, path))
            setattr(cfg, key, path)

        if cp.has_section("absorption"):
            check_keys("absorption", {"bands"}, ("kappa.", "scatter."))

            def bands(raw):
                out = []
                for part in raw.split(";"):
                    lo, hi = part.split()
                    out.append((float(lo), float(hi)))
                return out

            cfg.bands = get("absorption", "bands", bands, [], "'nu_lo nu_hi' pairs separated by ';'")
            for key in cp["absorption"]:
                for prefix, table in (("kappa.", cfg.kappa), ("scatter.", cfg.scatter)):
                    if key.startswith(prefix):
                        try:
                            region = int(key[len(prefix):])
                        except ValueError:
                            errors.append(f"[absorption] {key}: region tag must be an integer")
                            continue
                        table[region] = get("absorption", key, floats, [], "numbers")
        if cp.has_section("sources"):
            check_keys("sources", set(), ("label.",))
            for key in cp["sources"]:
                try:
                    label = int(key[len("label."):])
                except ValueError:
                    errors.append(f"[sources] {key}: label must be an integer")
                    continue
                cfg.sources[label] = get("sources", key, floats, [], "numbers")
        for sec in cp.sections():
            if not sec.startswith("reflector."):
                continue
            check_keys(sec, {"label", "point", "normal", "r0"})
            name = sec[len("reflector."):]
            missing = [k for k in ("label", "point", "normal") if not cp.has_option(sec, k)]
            for k in missing:
                errors.append(f"[{sec}] {k}: required")
            cfg.reflectors[name] = {
                "label": get(sec, "label", int, 0, "an integer"),
                "point": get(sec, "point", vec3, [0.0, 0.0, 0.0], "three numbers"),
                "normal": get(sec, "normal", vec3, [0.0, 0.0, 1.0], "three numbers"),
                "r0": get(sec, "r0", float, 1.0, "a number"),
            }
        check_keys("solver", {"t0", "tol", "max_iters"})
        cfg.t0 = get("solver", "t0", float, cfg.t0, "a number")
        cfg.tol = get("solver", "tol", float, cfg.tol, "a number")
        cfg.max_iters = get("solver", "max_iters", int, cfg.max_iters, "an integer")
        check_keys("hmatrix", {"eta", "eps", "leaf_size", "r_near"})
        cfg.eta = get("hmatrix", "eta", float, cfg.eta, "a number")
        cfg.eps = get("hmatrix", "eps", float, cfg.eps, "a number")
        cfg.leaf_size = get("hmatrix", "leaf_size", int, cfg.leaf_size, "an integer")
        cfg.r_near = get("hmatrix", "r_near", lambda s: None if s == "auto" else float(s), None, "'auto' or a number")
        if cp.has_section("output"):
            check_keys("output", {"field"}, ("probe.",))
            cfg.field_dump = get("output", "field", _boolean, True, "true/false")

            def probe(raw):
                a, b, n = raw.split(";")
                return tuple(vec3(a)), tuple(vec3(b)), int(n)

            for key in cp["output"]:
                if key.startswith("probe."):
                    val = get("output", key, probe, None, "'x0 y0 z0 ; x1 y1 z1 ; n'")
                    if val is not None:
                        cfg.probes[key[len("probe."):]] = val
        errors.extend(cfg.validate())
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read(), os.path.dirname(os.path.abspath(path)))

    # -- validation ------------------------------------------------------------

    def validate(self) -> list:
        """Every problem found, as messages (empty when valid); mesh-dependent checks are in :func:`build_scenario`."""
        errors = []
        if self.builtin is not None:
            if self.builtin not in SCENARIOS:
                errors.append(f"[scenario] builtin = {self.builtin!r}: choose from {', '.join(SCENARIOS)}")
            if self.volume_mesh or self.surface_mesh:
                errors.append("[scenario]: give either builtin or mesh paths, not both")
            if self.bands or self.kappa or self.sources or self.reflectors:
                errors.append("[scenario]: a builtin scenario defines its own absorption, sources and reflectors")
            if not self.h > 0:
                errors.append(f"[scenario] h = {self.h}: must be > 0")
        else:
            if not self.volume_mesh:
                errors.append("[scenario] volume_mesh: required without builtin")
            if not self.surface_mesh:
                errors.append("[scenario] surface_mesh: required without builtin")
            if not self.bands:
                errors.append("[absorption] bands: required without builtin")
            try:
                if self.bands and self.kappa:
                    self.absorption_model()
            except ValueError as exc:
                errors.append(f"[absorption]: {exc}")
            if self.bands and not self.kappa:
                errors.append("[absorption]: at least one kappa.<region> is required")
            nb = len(self.bands)
            for table, name in ((self.kappa, "kappa"), (self.scatter, "scatter")):
                for r, vals in table.items():
                    if nb and len(vals) != nb:
                        errors.append(f"[absorption] {name}.{r}: {len(vals)} values for {nb} bands")
            for r in self.scatter:
                if r not in self.kappa:
                    errors.append(f"[absorption] scatter.{r}: region has no kappa")
            for lab, vals in self.sources.items():
                if len(vals) not in (1, max(nb, 1)):
                    errors.append(f"[sources] label.{lab}: give one value or one per band ({nb})")
                if any(not (v >= 0 and math.isfinite(v)) for v in vals):
                    errors.append(f"[sources] label.{lab}: Q0 must be finite and >= 0")
            refl_labels = {}
            for name, r in self.reflectors.items():
                if not 0 <= r["r0"] <= 1:
                    errors.append(f"[reflector.{name}] r0 = {r['r0']}: must lie in [0, 1]")
                if not np.any(r["normal"]):
                    errors.append(f"[reflector.{name}] normal: must be non-zero")
                if r["label"] in refl_labels:
                    errors.append(f"[reflector.{name}] label {r['label']}: already used by reflector "
                                  f"{refl_labels[r['label']]}")
                refl_labels[r["label"]] = name
                if any(v > 0 for v in self.sources.get(r["label"], [])):
                    errors.append(f"[reflector.{name}] label {r['label']}: a reflector cannot emit")
        if not self.t0 >= 0:
            errors.append(f"[solver] t0 = {self.t0}: must be >= 0")
        if not self.tol > 0:
            errors.append(f"[solver] tol = {self.tol}: must be > 0")
        if self.max_iters < 1:
            errors.append(f"[solver] max_iters = {self.max_iters}: must be >= 1")
        if not self.eta > 0:
            errors.append(f"[hmatrix] eta = {self.eta}: must be > 0")
        if not self.eps > 0:
            errors.append(f"[hmatrix] eps = {self.eps}: must be > 0")
        if self.leaf_size < 1:
            errors.append(f"[hmatrix] leaf_size = {self.leaf_size}: must be >= 1")
        if self.r_near is not None and not self.r_near > 0:
            errors.append(f"[hmatrix] r_near = {self.r_near}: must be > 0 or auto")
        for name, (_, _, n) in self.probes.items():
            if n < 1:
                errors.append(f"[output] probe.{name}: sample count must be >= 1")
        return errors

    def absorption_model(self) -> AbsorptionModel:
        regions = sorted(self.kappa)
        nb = len(self.bands)
        scatter = [[self.scatter.get(r, [0.0] * nb)[b] for r in regions] for b in range(nb)]
        return AbsorptionModel(self.bands, regions, [[self.kappa[r][b] for r in regions] for b in range(nb)], scatter)


def _num(v) -> str:
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _boolean(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def build_scenario(cfg: ScenarioConfig, h: float | None = None) -> Scenario:
    """Load meshes and assemble the :class:`Scenario` a config describes (``h`` overrides a built-in's spacing)."""
    if cfg.builtin is not None:
        sc = kobayashi(cfg.builtin, h=cfg.h if h is None else h)
        if cfg.probes:
            sc.probes = dict(cfg.probes)
        return sc
    for path in (cfg.volume_mesh, cfg.surface_mesh):
        if not os.path.exists(path):
            raise MissingMeshError(path)
    vol = load_volume_mesh(cfg.volume_mesh)
    surf = load_surface_mesh(cfg.surface_mesh)
    errors = []
    labels = surf.label_set()
    for lab in cfg.sources:
        if lab not in labels:
            errors.append(f"[sources] label.{lab}: label not present in {cfg.surface_mesh}")
    for name, r in cfg.reflectors.items():
        if r["label"] not in labels:
            errors.append(f"[reflector.{name}] label {r['label']}: not present in {cfg.surface_mesh}")
    model = cfg.absorption_model()
    missing = sorted(set(np.unique(vol.regions).tolist()) - set(model.regions))
    if missing:
        errors.append(f"[absorption]: no kappa for region tag(s) {missing} used by {cfg.volume_mesh}")
    if errors:
        raise ConfigError(errors)
    surf.attach_regions(vol)
    nb = model.n_bands
    sources = {lab: (vals * nb if len(vals) == 1 else list(vals)) for lab, vals in cfg.sources.items()}
    if nb == 1:
        sources = {lab: v[0] for lab, v in sources.items()}
    reflectors = [PlanarReflector(r["point"], r["normal"], r["label"], r["r0"]) for r in cfg.reflectors.values()]
    name = os.path.splitext(os.path.basename(cfg.volume_mesh))[0]
    interior = tuple(vol.centroids[int(np.argmax(vol.volumes))])
    return Scenario(name, vol, surf, model, sources, reflectors, interior, dict(cfg.probes))


__all__ = ["ScenarioConfig", "ConfigError", "MissingMeshError", "build_scenario"]
