"""Emulated legacy web server.

The origin knows nothing about Opsec. It answers GETs according to its
reflection behavior, always echoes the TCP timestamp, and may close the
connection after every response (the worst case for the handshake).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class ReflectionMode(enum.Enum):
    REDIRECT_REFLECT = "redirect"
    ERROR_REFLECT = "error"
    NO_REFLECT = "none"


# measured response mix: 3xx 63.40 %, 4xx 29.40 %, non-standard 6.34 %
DEFAULT_MIX = {
    ReflectionMode.REDIRECT_REFLECT: 0.634,
    ReflectionMode.ERROR_REFLECT: 0.294,
    ReflectionMode.NO_REFLECT: 0.0634,
}


class BadDistribution(ValueError):
    pass


@dataclass(frozen=True)
class ServerProfile:
    reflection_mode: ReflectionMode = ReflectionMode.REDIRECT_REFLECT
    close_after_response: bool = False
    listen_port: int = 443
    content: dict = field(default_factory=lambda: {"/": "<html>home</html>",
                                                   "/index.html": "<html>index</html>"})
    tls_like: bool = False
    host: str = "origin.example"


@dataclass
class Response:
    status: int
    reason: str
    headers: dict
    body: str = ""

    def to_bytes(self) -> bytes:
        head = f"HTTP/1.1 {self.status} {self.reason}\r\n"
        head += "".join(f"{k}: {v}\r\n" for k, v in self.headers.items())
        return (head + "\r\n" + self.body).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Response | None":
        try:
            text = raw.decode()
        except UnicodeDecodeError:
            return None
        if not text.startswith("HTTP/1.1 "):
            return None
        head, _, body = text.partition("\r\n\r\n")
        lines = head.split("\r\n")
        parts = lines[0].split(" ", 2)
        if len(parts) < 3 or not parts[1].isdigit():
            return None
        headers = {}
        for line in lines[1:]:
            k, _, v = line.partition(": ")
            headers[k] = v
        return cls(int(parts[1]), parts[2], headers, body)

    def text(self) -> str:
        """Everything a client or box can search for reflected paths."""
        return " ".join(self.headers.values()) + "\n" + self.body


def format_request(path: str, host: str = "origin.example") -> bytes:
    return f"GET {path} HTTP/1.1\r\nHost: {host}\r\n\r\n".encode()


def parse_request_path(raw: bytes) -> str | None:
    if not raw.startswith(b"GET "):
        return None
    line = raw.split(b"\r\n", 1)[0]
    parts = line.split(b" ")
    if len(parts) != 3:
        return None
    try:
        return parts[1].decode()
    except UnicodeDecodeError:
        return None


def handle_get(profile: ServerProfile, path: str, ts_val: int = 0) -> tuple[Response, int, bool]:
    """Answer one GET. Returns (response, ts_ecr, close_connection)."""
    if path in profile.content:
        resp = Response(200, "OK", {"Content-Type": "text/html"}, profile.content[path])
    elif profile.reflection_mode is ReflectionMode.REDIRECT_REFLECT:
        resp = Response(301, "Moved Permanently", {"Location": f"https://{profile.host}{path}"})
    elif profile.reflection_mode is ReflectionMode.ERROR_REFLECT:
        resp = Response(404, "Not Found", {"Content-Type": "text/html"},
                        f"<html><body>The requested URL {path} was not found.</body></html>")
    else:
        resp = Response(404, "Not Found", {"Content-Type": "text/html"},
                        "<html><body>Not Found</body></html>")
    return resp, ts_val, profile.close_after_response


def normalize_mix(mix) -> dict:
    total = sum(mix.values())
    return {k: v / total for k, v in mix.items()}


def sample_profile(mix, rng, **profile_kw) -> ServerProfile:
    mix = {ReflectionMode(k) if not isinstance(k, ReflectionMode) else k: float(v)
           for k, v in mix.items()}
    if any(v < 0 or not math.isfinite(v) for v in mix.values()):
        raise BadDistribution("weights must be finite and non-negative")
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise BadDistribution(f"weights sum to {sum(mix.values())!r}, expected 1")
    modes = list(mix)
    u = rng.random()
    acc = 0.0
    chosen = modes[-1]
    for mode in modes:
        acc += mix[mode]
        if u < acc:
            chosen = mode
            break
    return ServerProfile(reflection_mode=chosen, **profile_kw)


def default_mix() -> dict:
    return normalize_mix(DEFAULT_MIX)
