"""Scenario file schema (JSON). Unknown fields are rejected."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .portplan import DEFAULT_EPHEMERAL, DEFAULT_REGISTRY, PortPlanError, PortRegistry


class ConfigInvalid(ValueError):
    """Raised with one line per offending field (``path.to.field: message``)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PortPair(_Strict):
    opsec_port: int = Field(ge=1, le=65535)
    listen_port: int = Field(ge=1, le=65535)


class SignatureConfig(_Strict):
    pattern: str
    verdict: Literal["alert", "terminate"] = "alert"
    reason: str = ""


class SfConfig(_Strict):
    kind: Literal["ids", "url-blocklist", "byte-counter"] = "ids"
    name: str
    signatures: list[SignatureConfig] = []
    blocked: list[str] = []
    verdict: Literal["alert", "terminate"] = "terminate"


class TamperConfig(_Strict):
    target: Literal["servdisc", "servreq"] = "servdisc"
    mode: Literal["sfid", "byte"] = "sfid"


class IspConfig(_Strict):
    isp_id: int = Field(ge=1)
    opsec: bool = True       # False: a legacy ISP, no redirection at all
    willing: bool = True     # False: rewrites ports but declines to serve sessions
    coverage: Literal["up", "down", "both"] = "both"
    catalog: list[str] = []  # names from the scenario's SF directory
    theta: Optional[int] = Field(default=None, ge=1)  # None: one static instance
    adversary: Literal["honest", "drops_opsec", "tampers_servdisc", "fake_quote"] = "honest"
    tamper: TamperConfig = TamperConfig()


class PathConfig(_Strict):
    nat: bool = False
    isps: list[IspConfig] = Field(min_length=1)
    delays_ms: Optional[list[float]] = None  # one per link, client side first
    default_delay_ms: float = Field(default=10.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        n_links = len(self.isps) + 1 + (1 if self.nat else 0)
        if self.delays_ms is not None:
            if len(self.delays_ms) != n_links:
                raise ValueError(f"delays_ms needs {n_links} entries, got {len(self.delays_ms)}")
            if any(d <= 0 for d in self.delays_ms):
                raise ValueError("link delays must be strictly positive")
        ids = [i.isp_id for i in self.isps]
        if len(set(ids)) != len(ids):
            raise ValueError("isp_id values must be unique")
        return self

    def link_delays_ms(self) -> list[float]:
        n_links = len(self.isps) + 1 + (1 if self.nat else 0)
        return list(self.delays_ms) if self.delays_ms is not None else [self.default_delay_ms] * n_links


class ClientConfig(_Strict):
    sfc_up: list[str] = []
    sfc_down: list[str] = []
    fail_mode: Literal["fail_open", "fail_closed"] = "fail_open"
    path_budget: int = Field(default=4096, ge=64)


class OriginConfig(_Strict):
    reflection_mode: Optional[Literal["redirect", "error", "none"]] = "redirect"
    mix: Optional[dict[Literal["redirect", "error", "none"], float]] = None
    close_after_response: bool = False
    listen_port: int = Field(default=443, ge=1, le=65535)
    extra_ports: list[int] = []  # other services on the same host
    tls_like: bool = False
    host: str = "origin.example"
    address: str = "203.0.113.10"


class TrafficConfig(_Strict):
    sessions: int = Field(default=1, ge=0)
    mode: Literal["opsec", "ports-only"] = "opsec"
    legacy_flows: int = Field(default=0, ge=0)
    legacy_port_choice: Literal["src", "dst", "mixed"] = "mixed"
    requests: list[str] = ["/index.html"]
    bodies: list[str] = []   # extra upstream payloads sent as raw application data
    start_spread_ms: float = Field(default=0.0, ge=0)


class QueueConfig(_Strict):
    c_p_ms: float = Field(default=0.05, gt=0)
    rate_pps: float = Field(default=100.0, gt=0)
    duration_s: float = Field(default=2.0, gt=0)
    sweep_flows: list[int] = []
    sweep_thetas: list[Optional[int]] = [30, None]


class ScenarioConfig(_Strict):
    seed: int = 0
    ports: list[PortPair] = [PortPair(opsec_port=a, listen_port=b) for a, b in DEFAULT_REGISTRY.items()]
    ephemeral: tuple[int, int] = DEFAULT_EPHEMERAL
    security_functions: list[SfConfig] = []
    path: PathConfig
    client: ClientConfig = ClientConfig()
    origin: OriginConfig = OriginConfig()
    traffic: TrafficConfig = TrafficConfig()
    queue: QueueConfig = QueueConfig()

    @field_validator("ephemeral")
    @classmethod
    def _eph(cls, v):
        lo, hi = v
        if not 1 <= lo <= hi <= 65535:
            raise ValueError("ephemeral range must satisfy 1 <= lo <= hi <= 65535")
        return v

    @model_validator(mode="after")
    def _check(self):
        names = [s.name for s in self.security_functions]
        if len(set(names)) != len(names):
            raise ValueError("security function names must be unique")
        known = set(names)
        for isp in self.path.isps:
            missing = [n for n in isp.catalog if n not in known]
            if missing:
                raise ValueError(f"isp {isp.isp_id} catalog names unknown SFs {missing}")
        for n in self.client.sfc_up + self.client.sfc_down:
            if n not in known:
                raise ValueError(f"client SFC names unknown SF {n!r}")
        self.registry()  # raises on overlap
        return self

    def registry(self) -> PortRegistry:
        try:
            return PortRegistry({p.opsec_port: p.listen_port for p in self.ports}, ephemeral=tuple(self.ephemeral),
                                service_ports=frozenset([self.origin.listen_port]))
        except PortPlanError as exc:
            raise ValueError(f"ports: {exc}") from None


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


def parse_scenario(data) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigInvalid(_format(exc)) from None


def load_scenario(path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"<file>: {exc}") from None
    return parse_scenario(data)


def default_scenario(**overrides) -> dict:
    """Single willing two-direction ISP, reflecting origin, one IDS request."""
    d = {
        "seed": 7,
        "security_functions": [
            {"kind": "ids", "name": "ids", "signatures": [
                {"pattern": "malware-sig-01", "verdict": "alert", "reason": "known malware signature"},
                {"pattern": "exfil-sig-99", "verdict": "terminate", "reason": "exfiltration"}]},
            {"kind": "url-blocklist", "name": "url-filter", "blocked": ["/blocked"]},
        ],
        "path": {"isps": [{"isp_id": 1, "coverage": "both", "catalog": ["ids", "url-filter"], "theta": 30}]},
        "client": {"sfc_up": ["url-filter", "ids"], "sfc_down": ["ids"]},
    }
    d.update(overrides)
    return d
