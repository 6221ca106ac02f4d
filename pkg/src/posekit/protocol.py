"""Protocol v1: newline-delimited JSON between the engine and model servers.

On connect the server sends one handshake line:
    {"protocol": 1, "num_classes": K, "labels": [...], "supports_embedding": bool}
then answers one request per line:
    {"id": str, "op": "classify"|"embed", "width": int, "height": int,
     "pixels_b64": base64 of H*W*3 u8 row-major RGB}
with
    {"id": str, "probs": [...]} | {"id": str, "embedding": [...]} |
    {"id": str, "error": str}

Images cross the wire as 8-bit RGB (round(p*255)); that quantization is part
of the contract. One request is in flight per connection.
"""

from __future__ import annotations

import base64
import json
import socket
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1


class ProtocolError(RuntimeError):
    """Server answered, but not with a usable protocol message."""


class TransportError(RuntimeError):
    """Could not reach or keep a connection to the backend."""

    def __init__(self, message: str, endpoint: str = "", attempts: int = 1):
        super().__init__(message)
        self.endpoint = endpoint
        self.attempts = attempts


@dataclass(frozen=True)
class Handshake:
    protocol: int
    num_classes: int
    labels: tuple[str, ...]
    supports_embedding: bool
    extra: dict = field(default_factory=dict)

    @staticmethod
    def from_message(msg: dict) -> "Handshake":
        try:
            protocol = int(msg["protocol"])
            num_classes = int(msg["num_classes"])
            labels = tuple(str(x) for x in msg["labels"])
            supports_embedding = bool(msg["supports_embedding"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed handshake: {msg!r}") from exc
        if protocol != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {protocol}")
        if num_classes < 2 or len(labels) != num_classes:
            raise ProtocolError(f"handshake class table inconsistent: {msg!r}")
        extra = {k: v for k, v in msg.items()
                 if k not in ("protocol", "num_classes", "labels", "supports_embedding")}
        return Handshake(protocol, num_classes, labels, supports_embedding, extra)

    def to_message(self) -> dict:
        msg = {"protocol": self.protocol, "num_classes": self.num_classes,
               "labels": list(self.labels), "supports_embedding": self.supports_embedding}
        msg.update(self.extra)
        return msg


def encode_pixels(u8: np.ndarray) -> str:
    if u8.dtype != np.uint8 or u8.ndim != 3 or u8.shape[2] != 3:
        raise ValueError("pixels must be HxWx3 uint8")
    return base64.b64encode(np.ascontiguousarray(u8).tobytes()).decode("ascii")


def decode_pixels(b64: str, width: int, height: int) -> np.ndarray:
    raw = base64.b64decode(b64, validate=True)
    expected = width * height * 3
    if len(raw) != expected:
        raise ValueError(f"pixel payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)


class ProtocolClient:
    """One connection, one request in flight. Use a pool for parallel search."""

    def __init__(self, rfile, wfile, endpoint: str = "", closer=None):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self.endpoint = endpoint
        self._next_id = 0
        line = self._read_line()
        if line is None:
            raise TransportError("connection closed before handshake", endpoint)
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"handshake is not JSON: {line[:120]!r}") from exc
        self.handshake = Handshake.from_message(msg)

    @classmethod
    def connect_tcp(cls, host: str, port: int, retries: int = 3,
                    retry_delay: float = 0.2, timeout: float = 30.0) -> "ProtocolClient":
        endpoint = f"tcp:{host}:{port}"
        last = None
        for attempt in range(1, retries + 1):
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                sock.settimeout(timeout)
                rfile = sock.makefile("rb")
                wfile = sock.makefile("wb")
                return cls(rfile, wfile, endpoint, closer=sock.close)
            except OSError as exc:
                last = exc
                time.sleep(retry_delay)
        raise TransportError(f"cannot connect to {endpoint}: {last}", endpoint, retries)

    @classmethod
    def spawn_stdio(cls, command: list[str]) -> "ProtocolClient":
        endpoint = "stdio:" + " ".join(command)
        try:
            proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise TransportError(f"cannot spawn {endpoint}: {exc}", endpoint)

        def closer():
            proc.stdin.close()
            proc.wait(timeout=10)

        return cls(proc.stdout, proc.stdin, endpoint, closer=closer)

    def _read_line(self) -> bytes | None:
        try:
            line = self._rfile.readline()
        except OSError as exc:
            raise TransportError(f"read failed: {exc}", self.endpoint)
        return line if line else None

    def send_raw(self, text: str) -> None:
        """Escape hatch for conformance tests; sends one raw line."""
        try:
            self._wfile.write(text.encode("utf-8") + b"\n")
            self._wfile.flush()
        except OSError as exc:
            raise TransportError(f"write failed: {exc}", self.endpoint)

    def read_response(self) -> dict:
        line = self._read_line()
        if line is None:
            raise TransportError("connection closed mid-request", self.endpoint)
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"response is not JSON: {line[:120]!r}") from exc
        if not isinstance(msg, dict):
            raise ProtocolError(f"response is not an object: {msg!r}")
        return msg

    def _round_trip(self, op: str, u8: np.ndarray) -> dict:
        self._next_id += 1
        rid = f"r{self._next_id}"
        req = {"id": rid, "op": op, "width": int(u8.shape[1]),
               "height": int(u8.shape[0]), "pixels_b64": encode_pixels(u8)}
        self.send_raw(json.dumps(req))
        msg = self.read_response()
        if msg.get("id") != rid:
            raise ProtocolError(f"response id {msg.get('id')!r} does not match request {rid!r}")
        if "error" in msg:
            raise ProtocolError(f"server error: {msg['error']}")
        return msg

    def classify(self, u8: np.ndarray) -> np.ndarray:
        msg = self._round_trip("classify", u8)
        if "probs" not in msg:
            raise ProtocolError(f"classify response missing probs: {msg!r}")
        probs = np.asarray(msg["probs"], dtype=np.float64)
        if probs.shape != (self.handshake.num_classes,):
            raise ProtocolError(f"probs length {probs.shape} != K={self.handshake.num_classes}")
        if probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-5:
            raise ProtocolError("probs are not a probability vector")
        return probs

    def embed(self, u8: np.ndarray) -> np.ndarray:
        msg = self._round_trip("embed", u8)
        if "embedding" not in msg:
            raise ProtocolError(f"embed response missing embedding: {msg!r}")
        return np.asarray(msg["embedding"], dtype=np.float64)

    def close(self) -> None:
        if self._closer is not None:
            try:
                self._closer()
            except Exception:
                pass
            self._closer = None


def handle_request_line(line: bytes, classify_fn, embed_fn=None) -> dict:
    """Turn one raw request line into a response message; never raises."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError:
        return {"id": None, "error": "request is not valid JSON"}
    if not isinstance(msg, dict):
        return {"id": None, "error": "request must be a JSON object"}
    rid = msg.get("id")
    try:
        op = msg["op"]
        width = int(msg["width"])
        height = int(msg["height"])
        u8 = decode_pixels(msg["pixels_b64"], width, height)
    except (KeyError, TypeError, ValueError) as exc:
        return {"id": rid, "error": f"malformed request: {exc}"}
    try:
        if op == "classify":
            return {"id": rid, "probs": [float(p) for p in classify_fn(u8)]}
        if op == "embed":
            if embed_fn is None:
                return {"id": rid, "error": "embedding not supported"}
            return {"id": rid, "embedding": [float(v) for v in embed_fn(u8)]}
        return {"id": rid, "error": f"unknown op {op!r}"}
    except Exception as exc:  # backend bug must become an error response, not a crash
        return {"id": rid, "error": f"backend failure: {exc}"}


def serve_connection(handshake: Handshake, rfile, wfile, classify_fn, embed_fn=None) -> None:
    """Blocking request/response loop over one connection (any file-like pair)."""
    wfile.write((json.dumps(handshake.to_message()) + "\n").encode("utf-8"))
    wfile.flush()
    for line in iter(rfile.readline, b""):
        if not line.strip():
            continue
        resp = handle_request_line(line, classify_fn, embed_fn)
        wfile.write((json.dumps(resp) + "\n").encode("utf-8"))
        wfile.flush()


def serve_backend_tcp(backend, host: str = "127.0.0.1", port: int = 0,
                      ready_callback=None, max_connections: int | None = None):
    """Serve a python backend object over TCP (one connection at a time).

    Intended for tests and demos; returns after max_connections when given.
    """
    from .renderer import RenderOutput

    def classify_fn(u8):
        out = RenderOutput(pixels=u8.astype(np.float64) / 255.0,
                           coverage_mask=np.zeros(u8.shape[:2], dtype=bool), meta={})
        return backend.classify(out).probs

    def embed_fn(u8):
        out = RenderOutput(pixels=u8.astype(np.float64) / 255.0,
                           coverage_mask=np.zeros(u8.shape[:2], dtype=bool), meta={})
        return backend.embed(out)

    handshake = Handshake(PROTOCOL_VERSION, backend.num_classes,
                          tuple(backend.class_table), backend.supports_embedding)
    srv = socket.create_server((host, port))
    if ready_callback is not None:
        ready_callback(srv.getsockname())
    served = 0
    try:
        while True:
            conn, _ = srv.accept()
            with conn:
                rfile = conn.makefile("rb")
                wfile = conn.makefile("wb")
                try:
                    serve_connection(handshake, rfile, wfile, classify_fn,
                                     embed_fn if backend.supports_embedding else None)
                except (BrokenPipeError, ConnectionResetError):
                    pass
            served += 1
            if max_connections is not None and served >= max_connections:
                break
    finally:
        srv.close()


def run_conformance(make_client) -> list[tuple[str, bool, str]]:
    """Exercise handshake, classify, embed and error paths against a server.

    make_client: zero-argument callable returning a fresh ProtocolClient.
    Returns (check_name, passed, detail) tuples; all-pass means conformant.
    """
    results: list[tuple[str, bool, str]] = []

    def check(name: str, fn) -> None:
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:
            results.append((name, False, f"{type(exc).__name__}: {exc}"))

    rng = np.random.default_rng(1234)
    img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)

    client = make_client()

    def handshake_shape():
        hs = client.handshake
        assert hs.protocol == PROTOCOL_VERSION
        assert hs.num_classes >= 2
        assert len(hs.labels) == hs.num_classes

    check("handshake_shape", handshake_shape)

    def classify_roundtrip():
        probs = client.classify(img)
        assert len(probs) == client.handshake.num_classes
        assert abs(probs.sum() - 1.0) <= 1e-5
        assert probs.min() >= 0.0

    check("classify_roundtrip", classify_roundtrip)

    def classify_deterministic():
        p1 = client.classify(img)
        p2 = client.classify(img)
        assert np.array_equal(p1, p2), "same image must produce identical probs"

    check("classify_deterministic", classify_deterministic)

    if client.handshake.supports_embedding:
        def embed_roundtrip():
            e1 = client.embed(img)
            e2 = client.embed(img)
            assert e1.ndim == 1 and len(e1) >= 1
            assert np.array_equal(e1, e2)

        check("embed_roundtrip", embed_roundtrip)

    def unknown_op_is_error():
        client.send_raw(json.dumps({"id": "x1", "op": "mystery", "width": 1, "height": 1,
                                    "pixels_b64": encode_pixels(np.zeros((1, 1, 3), np.uint8))}))
        msg = client.read_response()
        assert "error" in msg, f"unknown op must yield an error, got {msg!r}"

    check("unknown_op_is_error", unknown_op_is_error)

    def malformed_json_is_error():
        client.send_raw("{this is not json")
        msg = client.read_response()
        assert "error" in msg, f"malformed JSON must yield an error, got {msg!r}"

    check("malformed_json_is_error", malformed_json_is_error)

    def bad_payload_is_error():
        client.send_raw(json.dumps({"id": "x2", "op": "classify", "width": 10,
                                    "height": 10, "pixels_b64": "unpadded!!base64"}))
        msg = client.read_response()
        assert "error" in msg, f"bad base64 must yield an error, got {msg!r}"

    check("bad_payload_is_error", bad_payload_is_error)

    def survives_garbage():
        probs = client.classify(img)  # the connection must still be usable
        assert len(probs) == client.handshake.num_classes

    check("survives_garbage", survives_garbage)

    client.close()
    return results


def assert_conformant(make_client) -> list[tuple[str, bool, str]]:
    results = run_conformance(make_client)
    failures = [f"{name}: {detail}" for name, ok, detail in results if not ok]
    if failures:
        raise AssertionError("protocol conformance failures:\n  " + "\n  ".join(failures))
    return results
