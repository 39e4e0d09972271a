"""Run configuration: TOML file plus ``section.key=value`` overrides.

Layout::

    [pde]        n, Sigma, A, b, h, theta, k, beta, T, region,
                 robust_points, robust_iota, a3_mode, mu, ellipticity_eps
    [market]     r, b_stock, sigma_stock, g, a1, a2, gamma, w, T, region
    [transform]  mu (force a value of the reduction grid)
    [grid]       nodes, nt, region (defaults to the model region)
    [solver]     theta_scheme, tol, max_policy_iters, boundary,
                 rannacher_steps, R0, max_box_rounds
    [mc]         paths, steps, seed, block, bias_paths, rel_tol, z_max,
                 points (rows x1[, x2], t), field_error, dump_paths
    [lipschitz]  enabled, x0, xbar0, radii, paths, steps
    [portfolio]  v0, x0, t0
    [sweep]      key ("section.key"), values, x0

Exactly one of [pde] and [market] must be present.  Coefficients are
expression strings in x1..xn (and eta1.. for robust drifts).
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .expr import ExprError
from .model import FactorPDE, MarketSpec, ModelError, build_pde_from_market

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_override", "DEFAULTS"]

DEFAULTS: dict = {
    "grid": {"nodes": 101, "nt": 51},
    "solver": {
        "theta_scheme": 0.5,
        "tol": 1e-9,
        "max_policy_iters": 50,
        "boundary": "NEUMANN_ZERO",
        "rannacher_steps": 2,
        "R0": 1.0,
        "max_box_rounds": 12,
    },
    "transform": {},
    "mc": {
        "paths": 100_000,
        "steps": 1000,
        "seed": 0,
        "block": 8192,
        "bias_paths": 16384,
        "rel_tol": 5e-3,
        "z_max": 3.0,
        "field_error": "richardson",
        "dump_paths": 100,
    },
    "lipschitz": {"enabled": False, "radii": [1.0, 5.0, 25.0], "paths": 20_000, "steps": 500},
    "portfolio": {"v0": 1.0, "t0": 0.0},
    "sweep": {},
}

_SECTIONS = set(DEFAULTS) | {"pde", "market"}
_EXPR_KEYS = {
    "pde": ("Sigma", "A", "b", "h", "theta", "beta"),
    "market": ("r", "b_stock", "sigma_stock", "g", "a1", "a2"),
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value``; the value is read as a TOML literal, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, rhs = text.split("=", 1)
    parts = lhs.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {lhs!r} must be section.key")
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return parts[0], parts[1], value


def _key_line(text: str, section: str, key: str) -> int | None:
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            cur = m.group(1).strip()
        elif cur == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return i
    return None


@dataclass
class RunConfig:
    data: dict
    source: str = ""
    text: str = ""
    overrides: list[str] = field(default_factory=list)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def with_override(self, section: str, key: str, value) -> "RunConfig":
        return RunConfig(_merge(self.data, {section: {key: value}}), self.source, self.text, self.overrides + [f"{section}.{key}={value!r}"])

    @property
    def kind(self) -> str:
        return "market" if "market" in self.data else "pde"

    def _where(self, section: str, key: str) -> str:
        line = _key_line(self.text, section, key) if self.text else None
        loc = f"{self.source}:{line}" if line else (self.source or "<config>")
        return f"{loc}: [{section}] {key}"

    def _wrap(self, section: str, build):
        try:
            return build()
        except ExprError as exc:
            key = self._expr_key(section, exc)
            raise ConfigError(f"{self._where(section, key) if key else section}: {exc}") from exc
        except (ModelError, TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc

    def _expr_key(self, section: str, exc: ExprError) -> str | None:
        from .expr import parse

        sec = self.section(section)
        for key in _EXPR_KEYS[section]:
            v = sec.get(key)
            vals = v if isinstance(v, list) else [v]
            flat = []
            for item in vals:
                flat.extend(item if isinstance(item, list) else [item])
            for item in flat:
                if isinstance(item, str):
                    try:
                        parse(item)
                    except ExprError:
                        return key
        return None

    def market(self) -> MarketSpec:
        sec = self.section("market")
        if not sec:
            raise ConfigError("config has no [market] section")
        allowed = {"r", "b_stock", "sigma_stock", "g", "a1", "a2", "gamma", "w", "T", "region", "name"}
        extra = set(sec) - allowed
        if extra:
            raise ConfigError(f"[market]: unknown keys {sorted(extra)}")
        return self._wrap("market", lambda: MarketSpec.build(**sec))

    def pde(self) -> FactorPDE:
        """The factor equation (built from [market] when that section is used)."""
        if self.kind == "market":
            m = self.market()
            return self._wrap("market", lambda: build_pde_from_market(m))
        sec = dict(self.section("pde"))
        if not sec:
            raise ConfigError("config needs a [pde] or [market] section")
        pts = sec.pop("robust_points", None)
        iota = sec.pop("robust_iota", 1)
        if pts is not None:
            sec["robust"] = (pts, iota)
        allowed = {"n", "Sigma", "A", "b", "h", "theta", "k", "beta", "T", "region", "robust", "a3_mode", "mu", "ellipticity_eps", "name"}
        extra = set(sec) - allowed
        if extra:
            raise ConfigError(f"[pde]: unknown keys {sorted(extra)}")
        missing = {"n", "Sigma", "A", "b", "h", "k", "T"} - set(sec)
        if missing:
            raise ConfigError(f"[pde]: missing keys {sorted(missing)}")
        sec.setdefault("theta", 0.0)
        sec.setdefault("beta", 1.0)
        return self._wrap("pde", lambda: FactorPDE.build(**sec))

    def region(self, p: FactorPDE):
        reg = self.section("grid").get("region") or p.region
        if reg is None:
            raise ConfigError("no computational region: set [grid] region or the model region")
        return [tuple(map(float, r)) for r in reg]


def _check(data: dict) -> None:
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    if ("pde" in data) == ("market" in data):
        raise ConfigError("exactly one of [pde] and [market] is required")
    mc = data["mc"]
    for key in ("paths", "steps", "block", "bias_paths"):
        v = mc.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"[mc] {key} must be a positive integer, got {v!r}")
    if mc["paths"] < 2:
        raise ConfigError("[mc] paths must be at least 2")
    if mc["steps"] % 2:
        raise ConfigError("[mc] steps must be even (the bias estimate halves it)")
    seed = mc.get("seed")
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigError("[mc] seed must be an unsigned 64-bit integer")
    if mc.get("field_error") not in ("richardson", "none"):
        raise ConfigError("[mc] field_error must be 'richardson' or 'none'")


def load_config(path=None, overrides=(), *, text: str | None = None) -> RunConfig:
    """Parse a TOML run config; overrides take precedence over the file."""
    source = str(path) if path is not None else "<string>"
    if text is None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    data = _merge(DEFAULTS, raw)
    for ov in overrides:
        sec, key, value = parse_override(ov)
        if sec not in _SECTIONS:
            raise ConfigError(f"override section {sec!r} unknown")
        data = _merge(data, {sec: {key: value}})
    _check(data)
    return RunConfig(data, source, text, list(overrides))
