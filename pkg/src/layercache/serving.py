"""Framed TCP serving of a cache-enabled model.

Every message in either direction is one frame: a 4-byte big-endian unsigned
payload length followed by that many bytes of UTF-8 JSON.

Requests::

    {"type": "infer", "batch_id": <any>, "samples": [{"id": <any>, "input": [...]}, ...]}
    {"type": "report"}

For an ``infer`` request the server writes one ``result`` frame per sample as
soon as the sample leaves the model (early exits first), then a ``done`` frame::

    {"type": "result", "batch_id", "sample_id", "predicted_class", "confidence",
     "exit", "path_flops"}
    {"type": "done", "batch_id", "count"}

Problems with a request produce ``{"type": "error", "batch_id", "error"}`` and
the connection stays open.  A frame longer than the server's limit gets an
error frame and the connection is closed.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading

import numpy as np

from .engine import CacheEnabledModel, infer_batch

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024


class ProtocolError(RuntimeError):
    pass


def encode_frame(obj) -> bytes:
    payload = json.dumps(obj).encode()
    return HEADER.pack(len(payload)) + payload


def _recv_exact(sock, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def read_frame_bytes(sock, max_frame: int = MAX_FRAME) -> bytes | None:
    """Raw payload of the next frame, or None on a clean EOF."""
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    (n,) = HEADER.unpack(head)
    if n > max_frame:
        raise ProtocolError(f"frame of {n} bytes exceeds limit {max_frame}")
    body = _recv_exact(sock, n) if n else b""
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return body


def read_frame(sock, max_frame: int = MAX_FRAME):
    raw = read_frame_bytes(sock, max_frame)
    return None if raw is None else json.loads(raw)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        sock = self.request
        while True:
            try:
                raw = read_frame_bytes(sock, server.max_frame)
            except ProtocolError as e:
                self._send({"type": "error", "batch_id": None, "error": f"protocol error: {e}"})
                return
            except OSError:
                return
            if raw is None:
                return
            try:
                self._dispatch(raw)
            except OSError:
                return

    def _send(self, obj):
        self.request.sendall(encode_frame(obj))

    def _dispatch(self, raw: bytes):
        try:
            req = json.loads(raw)
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            self._send({"type": "error", "batch_id": None, "error": f"malformed frame: {e}"})
            return
        if not isinstance(req, dict):
            self._send({"type": "error", "batch_id": None, "error": "request must be an object"})
            return
        kind = req.get("type", "infer")
        batch_id = req.get("batch_id")
        if kind == "report":
            info = self.server.report() if self.server.report else {}
            self._send({"type": "report", **info})
            return
        if kind != "infer":
            self._send({"type": "error", "batch_id": batch_id, "error": f"unknown type {kind!r}"})
            return
        samples = req.get("samples")
        if not isinstance(samples, list):
            self._send({"type": "error", "batch_id": batch_id, "error": "missing samples list"})
            return
        if not samples:
            self._send({"type": "error", "batch_id": batch_id, "error": "empty batch"})
            return
        model = self.server.model
        shape = tuple(model.graph.input_shape)
        try:
            ids = [s["id"] for s in samples]
            x = np.asarray([np.asarray(s["input"], dtype=np.float32).reshape(shape)
                            for s in samples], dtype=np.float32)
        except (KeyError, TypeError, ValueError) as e:
            self._send({"type": "error", "batch_id": batch_id, "error": f"bad sample: {e}"})
            return
        by_key = {str(i): i for i in ids}
        if len(by_key) != len(ids):
            self._send({"type": "error", "batch_id": batch_id, "error": "duplicate sample ids"})
            return

        def resolve(rec):
            self._send({"type": "result", "batch_id": batch_id, "sample_id": by_key[rec.sample_id],
                        "predicted_class": rec.predicted_class, "confidence": rec.confidence,
                        "exit": rec.exit, "path_flops": rec.path_flops})

        try:
            records = infer_batch(model, x, resolve, list(by_key))
        except OSError:
            raise
        except Exception as e:  # keep the connection alive on model errors
            log.exception("batch %r failed", batch_id)
            self._send({"type": "error", "batch_id": batch_id, "error": str(e)})
            return
        self._send({"type": "done", "batch_id": batch_id, "count": len(records)})


class CacheServer(socketserver.ThreadingTCPServer):
    """Threaded server; the model is shared read-only across connections."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: CacheEnabledModel, host="127.0.0.1", port=0,
                 max_frame: int = MAX_FRAME, report=None):
        self.model = model
        self.max_frame = max_frame
        self.report = report
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def serve(model: CacheEnabledModel, host="127.0.0.1", port=0, **kw):
    server = CacheServer(model, host, port, **kw)
    log.info("serving on %s:%d", host, server.port)
    try:
        server.serve_forever()
    finally:
        server.server_close()


class Client:
    """Blocking client for the framed protocol."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send(self, obj):
        self.sock.sendall(encode_frame(obj))

    def send_raw(self, payload: bytes):
        self.sock.sendall(HEADER.pack(len(payload)) + payload)

    def recv(self):
        return read_frame(self.sock)

    def infer(self, batch_id, ids, inputs) -> list:
        """Send one batch; return every frame up to and including ``done``
        (or a single error frame)."""
        samples = [{"id": i, "input": np.asarray(x, dtype=np.float32).ravel().tolist()}
                   for i, x in zip(ids, inputs)]
        self.send({"type": "infer", "batch_id": batch_id, "samples": samples})
        frames = []
        while True:
            msg = self.recv()
            if msg is None:
                raise ProtocolError("server closed the connection")
            frames.append(msg)
            if msg["type"] in ("done", "error"):
                return frames

    def report(self) -> dict:
        self.send({"type": "report"})
        return self.recv()
