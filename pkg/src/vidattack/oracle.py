"""The black-box boundary: top-1 queries, loss readout, budget accounting, adapters.

Every query an attack makes flows through query_top1 against a QueryCounter, so
no code path can overspend the budget. Adapters wrap either the in-process toy
classifier or an external process speaking the line-delimited JSON protocol:

    request:  {"id": <uint64>, "shape": [N,H,W,C], "data_b64": "<base64 float32 LE>"}
    response: {"id": <uint64>, "label": <uint32>, "prob": <float64>}
    error:    {"id": <uint64|null>, "error": "<string>"}
"""

from __future__ import annotations

import base64
import json
import math
import shlex
import socket
import socketserver
import subprocess
import sys
import threading
from dataclasses import dataclass

import numpy as np

from .goal import AttackGoal, Targeted, Untargeted
from .models import ModelBundle, ToyClassifier

_MIN_PROB = 1e-300  # guards log() against an external oracle reporting exactly 0


class BudgetExceeded(RuntimeError):
    """Raised when a query is requested with the budget already spent."""

    def __init__(self, used: int):
        super().__init__(f"query budget exhausted after {used} queries")
        self.used = used


class OracleUnavailable(RuntimeError):
    """Raised when an external oracle cannot be reached or violates the protocol."""


@dataclass(frozen=True)
class OracleResponse:
    label: int
    prob: float


@dataclass(frozen=True)
class LossValue:
    value: float
    valid: bool


class QueryCounter:
    """Monotone query meter; charging past the budget raises before any query is sent."""

    def __init__(self, budget: int):
        if budget < 1:
            raise ValueError(f"budget must be positive, got {budget}")
        self.budget = int(budget)
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        return self.budget - self._used

    def charge(self) -> None:
        with self._lock:
            if self._used >= self.budget:
                raise BudgetExceeded(self._used)
            self._used += 1


class InProcessOracle:
    """Directly wraps a ToyClassifier; fastest adapter and the protocol reference."""

    def __init__(self, classifier: ToyClassifier):
        self._classifier = classifier

    def top1(self, x: np.ndarray) -> OracleResponse:
        label, prob = self._classifier.top1(x)
        return OracleResponse(label, prob)


def query_top1(oracle, x: np.ndarray, counter: QueryCounter) -> OracleResponse:
    """One budgeted top-1 query; increments the counter by exactly 1."""
    counter.charge()
    return oracle.top1(x)


def adversarial_loss(resp: OracleResponse, goal: AttackGoal) -> LossValue:
    """Attack loss readable from a top-1 response, with a validity flag.

    Targeted: -log p, valid only while the target class holds top-1. Untargeted:
    +log p, valid only while the original class holds top-1 (otherwise the point
    already escaped).
    """
    if isinstance(goal, Targeted):
        if resp.label == goal.target_label:
            return LossValue(-math.log(max(resp.prob, _MIN_PROB)), True)
        return LossValue(math.nan, False)
    if isinstance(goal, Untargeted):
        if resp.label == goal.label:
            return LossValue(math.log(max(resp.prob, _MIN_PROB)), True)
        return LossValue(math.nan, False)
    raise TypeError(f"unsupported goal {goal!r}")


# --- wire protocol -----------------------------------------------------------


def encode_request(req_id: int, x: np.ndarray) -> str:
    x32 = np.ascontiguousarray(x, dtype="<f4")
    if x32.ndim != 4:
        raise ValueError("protocol requests carry rank-4 tensors")
    payload = base64.b64encode(x32.tobytes()).decode("ascii")
    return json.dumps({"id": req_id, "shape": list(x32.shape), "data_b64": payload})


def _error_line(req_id, message: str) -> str:
    return json.dumps({"id": req_id, "error": message})


def handle_request_line(classifier: ToyClassifier, line: str) -> str:
    """Answer one protocol line; malformed input yields an error object, never a crash."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return _error_line(None, "parse")
    if not isinstance(obj, dict):
        return _error_line(None, "parse")
    req_id = obj.get("id")
    try:
        shape = tuple(int(d) for d in obj["shape"])
        data = base64.b64decode(obj["data_b64"])
    except (KeyError, TypeError, ValueError):
        return _error_line(req_id, "bad request fields")
    count = int(np.prod(shape)) if len(shape) == 4 else -1
    if count < 0 or len(data) != count * 4:
        return _error_line(req_id, "data length does not match shape")
    if shape != classifier.shape.as_tuple():
        return _error_line(req_id, f"shape mismatch: model expects {classifier.shape.as_tuple()}")
    x = np.frombuffer(data, dtype="<f4").reshape(shape)
    label, prob = classifier.top1(x)
    return json.dumps({"id": req_id, "label": label, "prob": prob})


def serve_stream(classifier: ToyClassifier, rfile, wfile) -> None:
    """Answer protocol requests from a text stream until EOF, FIFO order."""
    for line in rfile:
        if not line.strip():
            continue
        wfile.write(handle_request_line(classifier, line) + "\n")
        wfile.flush()


def serve_stdio(classifier: ToyClassifier) -> None:
    serve_stream(classifier, sys.stdin, sys.stdout)


class _TcpHandler(socketserver.StreamRequestHandler):
    def handle(self):
        classifier = self.server.classifier  # type: ignore[attr-defined]
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            self.wfile.write((handle_request_line(classifier, line) + "\n").encode("utf-8"))


class TcpOracleServer(socketserver.ThreadingTCPServer):
    """Serves the line protocol over TCP; one FIFO stream per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, classifier: ToyClassifier, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _TcpHandler)
        self.classifier = classifier

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class RemoteOracle:
    """Line-protocol client over a subprocess's stdio or a TCP connection.

    Note the wire carries float32 data: probe tensors are quantized in transit,
    so very small search variances need the in-process adapter.
    """

    def __init__(self, rfile, wfile, closer=None):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self._next_id = 0
        self._lock = threading.Lock()

    @classmethod
    def exec_(cls, command) -> "RemoteOracle":
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                    text=True, bufsize=1)
        except OSError as exc:
            raise OracleUnavailable(f"cannot start oracle process: {exc}") from exc

        def closer():
            try:
                proc.stdin.close()
            except OSError:
                pass
            proc.wait(timeout=10)

        return cls(proc.stdout, proc.stdin, closer)

    @classmethod
    def tcp(cls, host: str, port: int) -> "RemoteOracle":
        try:
            sock = socket.create_connection((host, port), timeout=30)
        except OSError as exc:
            raise OracleUnavailable(f"cannot connect to oracle at {host}:{port}: {exc}") from exc
        rfile = sock.makefile("r", encoding="utf-8")
        wfile = sock.makefile("w", encoding="utf-8")

        def closer():
            rfile.close()
            wfile.close()
            sock.close()

        return cls(rfile, wfile, closer)

    def top1(self, x: np.ndarray) -> OracleResponse:
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            try:
                self._wfile.write(encode_request(req_id, x) + "\n")
                self._wfile.flush()
                line = self._rfile.readline()
            except (OSError, ValueError) as exc:
                raise OracleUnavailable(f"oracle I/O failure: {exc}") from exc
        if not line:
            raise OracleUnavailable("oracle closed the connection")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise OracleUnavailable(f"undecodable oracle response: {line!r}") from exc
        if "error" in obj:
            raise OracleUnavailable(f"oracle error: {obj['error']}")
        if obj.get("id") != req_id:
            raise OracleUnavailable(f"response id {obj.get('id')} does not match request {req_id}")
        return OracleResponse(int(obj["label"]), float(obj["prob"]))

    def close(self) -> None:
        if self._closer is not None:
            self._closer()
            self._closer = None

    def __enter__(self) -> "RemoteOracle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_oracle(spec: str):
    """Open an oracle from a CLI-style locator: builtin:PATH.vbm, exec:CMD, or tcp:HOST:PORT."""
    kind, _, rest = spec.partition(":")
    if kind == "builtin" and rest:
        return InProcessOracle(ModelBundle.load(rest).classifier)
    if kind == "exec" and rest:
        return RemoteOracle.exec_(rest)
    if kind == "tcp" and rest:
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp oracle locator: {spec!r}")
        return RemoteOracle.tcp(host, int(port))
    raise ValueError(f"bad oracle locator: {spec!r} (expected builtin:PATH, exec:CMD, or tcp:HOST:PORT)")
