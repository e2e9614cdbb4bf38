"""Code-execution backends and the round-robin worker pool.

A worker is anything with ``execute(request) -> ExecutionResult``. Three
kinds ship here: the deterministic rational-arithmetic mock, a subprocess
runner for real interpreters, and an HTTP client for remote worker nodes
(with a matching in-process server). ``WorkerPool`` spreads requests over
workers and never raises into the caller: failures come back as results
whose output is a readable diagnostic.
"""

from __future__ import annotations

import ast
import itertools
import json
import logging
import os
import resource
import signal
import subprocess
import tempfile
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional, Sequence

import httpx

log = logging.getLogger(__name__)

OK = "ok"
ERROR = "error"
TIMEOUT = "timeout"
TRANSPORT_FAILURE = "transport_failure"
STATUSES = (OK, ERROR, TIMEOUT, TRANSPORT_FAILURE)

TRUNCATION_MARKER = "…[truncated]"
DEFAULT_OUTPUT_CAP = 8192

_request_counter = itertools.count()


@dataclass(frozen=True)
class ExecutionRequest:
    code: str
    timeout_ms: int = 5000
    request_id: str = ""

    def __post_init__(self):
        if not self.code:
            raise ValueError("code must be non-empty")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if not self.request_id:
            object.__setattr__(self, "request_id", f"req-{next(_request_counter)}")

    def to_wire(self) -> dict:
        return {"request_id": self.request_id, "code": self.code, "timeout_ms": self.timeout_ms}


@dataclass(frozen=True)
class ExecutionResult:
    status: str
    output: str
    elapsed_ms: int = 0
    worker_id: str = ""

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    def to_wire(self) -> dict:
        return {"status": self.status, "output": self.output, "elapsed_ms": self.elapsed_ms,
                "worker_id": self.worker_id}

    @classmethod
    def from_wire(cls, rec: dict, worker_id: str = "") -> "ExecutionResult":
        return cls(status=rec["status"], output=rec.get("output", ""),
                   elapsed_ms=int(rec.get("elapsed_ms", 0)),
                   worker_id=rec.get("worker_id") or worker_id)


def cap_output(text: str, cap: int = DEFAULT_OUTPUT_CAP) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= cap:
        return text
    return raw[:cap].decode("utf-8", errors="ignore") + TRUNCATION_MARKER


# ---------------------------------------------------------------------------
# Mock interpreter: exact rational arithmetic, assignments and print


class MockError(Exception):
    pass


_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
}


def _fmt(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def _eval(node, env: dict) -> Fraction:
    if isinstance(node, ast.Constant) and type(node.value) in (int, float):
        return Fraction(str(node.value))
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise MockError(f"NameError: name '{node.id}' is not defined")
        return env[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        a, b = _eval(node.left, env), _eval(node.right, env)
        if isinstance(node.op, ast.Div) and b == 0:
            raise MockError("ZeroDivisionError: division by zero")
        return _BINOPS[type(node.op)](a, b)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    raise MockError(f"SyntaxError: unsupported expression {ast.dump(node)[:60]}")


def run_mock_program(code: str) -> str:
    """Evaluate a mock program and return its printed lines. Raises MockError."""
    code = code.replace("×", "*").replace("÷", "/").replace("−", "-")
    try:
        tree = ast.parse(code)
    except SyntaxError as exc:
        raise MockError(f"SyntaxError: {exc.msg} (line {exc.lineno})") from None
    env: dict[str, Fraction] = {}
    out: list[str] = []
    for stmt in tree.body:
        if (isinstance(stmt, ast.Assign) and len(stmt.targets) == 1
                and isinstance(stmt.targets[0], ast.Name)):
            env[stmt.targets[0].id] = _eval(stmt.value, env)
        elif (isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Call)
              and isinstance(stmt.value.func, ast.Name) and stmt.value.func.id == "print"
              and not stmt.value.keywords):
            out.append(" ".join(_fmt(_eval(a, env)) for a in stmt.value.args))
        else:
            raise MockError(f"SyntaxError: unsupported statement on line {stmt.lineno}")
    return "\n".join(out)


def execute_mock(req: ExecutionRequest, worker_id: str = "mock") -> ExecutionResult:
    try:
        return ExecutionResult(OK, run_mock_program(req.code), 0, worker_id)
    except MockError as exc:
        return ExecutionResult(ERROR, str(exc), 0, worker_id)


class MockWorker:
    def __init__(self, worker_id: str = "mock"):
        self.worker_id = worker_id

    def execute(self, req: ExecutionRequest) -> ExecutionResult:
        return execute_mock(req, self.worker_id)


# ---------------------------------------------------------------------------
# Subprocess runner


@dataclass(frozen=True)
class SubprocessConfig:
    # "{file}" in the command is replaced by a temp file holding the code;
    # without it the code goes to stdin.
    command: tuple[str, ...] = ("python3", "-I", "{file}")
    output_cap: int = DEFAULT_OUTPUT_CAP
    grace_ms: int = 500
    memory_limit_mb: Optional[int] = None
    cpu_limit_s: Optional[int] = None


def _limits(cfg: SubprocessConfig):
    if cfg.memory_limit_mb is None and cfg.cpu_limit_s is None:
        return None

    def apply():
        if cfg.memory_limit_mb is not None:
            n = cfg.memory_limit_mb * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (n, n))
        if cfg.cpu_limit_s is not None:
            resource.setrlimit(resource.RLIMIT_CPU, (cfg.cpu_limit_s, cfg.cpu_limit_s))

    return apply


def execute_subprocess(req: ExecutionRequest, cfg: SubprocessConfig = SubprocessConfig(),
                       worker_id: str = "subprocess") -> ExecutionResult:
    """Run ``req.code`` in a fresh process group; kill the group on timeout."""
    t0 = time.monotonic()
    tmp = None
    argv = list(cfg.command)
    stdin_data = req.code.encode()
    if any("{file}" in a for a in argv):
        fd, tmp = tempfile.mkstemp(suffix=".py")
        with os.fdopen(fd, "w") as fh:
            fh.write(req.code)
        argv = [a.replace("{file}", tmp) for a in argv]
        stdin_data = b""

    def elapsed():
        return int((time.monotonic() - t0) * 1000)

    try:
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                    stderr=subprocess.PIPE, start_new_session=True,
                                    preexec_fn=_limits(cfg))
        except OSError as exc:
            return ExecutionResult(TRANSPORT_FAILURE, f"spawn failed: {exc}", elapsed(), worker_id)
        try:
            out, err = proc.communicate(stdin_data, timeout=req.timeout_ms / 1000)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            try:
                proc.communicate(timeout=cfg.grace_ms / 1000)
            except subprocess.TimeoutExpired:
                pass
            return ExecutionResult(TIMEOUT, f"execution timed out after {req.timeout_ms} ms",
                                   elapsed(), worker_id)
        stdout = cap_output(out.decode("utf-8", errors="replace"), cfg.output_cap)
        if proc.returncode != 0:
            msg = err.decode("utf-8", errors="replace").strip() or f"exit status {proc.returncode}"
            return ExecutionResult(ERROR, cap_output(msg, cfg.output_cap), elapsed(), worker_id)
        return ExecutionResult(OK, stdout, elapsed(), worker_id)
    finally:
        if tmp is not None:
            os.unlink(tmp)


class SubprocessWorker:
    def __init__(self, cfg: SubprocessConfig = SubprocessConfig(), worker_id: str = "subprocess"):
        self.cfg = cfg
        self.worker_id = worker_id

    def execute(self, req: ExecutionRequest) -> ExecutionResult:
        return execute_subprocess(req, self.cfg, self.worker_id)


# ---------------------------------------------------------------------------
# HTTP transport


class HttpWorker:
    """Client for a worker node speaking the JSON request/response protocol."""

    def __init__(self, url: str, worker_id: Optional[str] = None, slack_ms: int = 2000):
        self.url = url
        self.worker_id = worker_id or url
        self.slack_ms = slack_ms
        self._client = httpx.Client()

    def execute(self, req: ExecutionRequest) -> ExecutionResult:
        t0 = time.monotonic()
        try:
            resp = self._client.post(self.url, json=req.to_wire(),
                                     timeout=(req.timeout_ms + self.slack_ms) / 1000)
            resp.raise_for_status()
            return ExecutionResult.from_wire(resp.json(), self.worker_id)
        except (httpx.HTTPError, ValueError, KeyError) as exc:
            ms = int((time.monotonic() - t0) * 1000)
            return ExecutionResult(TRANSPORT_FAILURE, f"worker {self.worker_id} unreachable: {exc}",
                                   ms, self.worker_id)

    def close(self) -> None:
        self._client.close()


def serve_worker(backend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start a worker node serving ``backend`` in a daemon thread.

    The bound address is ``server.server_address``; call ``shutdown()`` to stop.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                req = ExecutionRequest(code=body["code"], timeout_ms=int(body["timeout_ms"]),
                                       request_id=body["request_id"])
            except (ValueError, KeyError, TypeError) as exc:
                self.send_error(400, str(exc))
                return
            res = backend.execute(req)
            payload = json.dumps({"request_id": req.request_id, **res.to_wire()}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, fmt, *args):
            log.debug("worker: " + fmt, *args)

    server = ThreadingHTTPServer((host, port), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


# ---------------------------------------------------------------------------
# Round-robin pool


@dataclass
class _Health:
    consecutive_failures: int = 0
    unhealthy_until: float = 0.0


class WorkerPool:
    """Thread-safe round-robin scheduler over workers with failure cooldown.

    A worker is skipped after ``failure_threshold`` consecutive transport
    failures until ``cooldown_s`` has passed.
    """

    def __init__(self, workers: Sequence, failure_threshold: int = 3, cooldown_s: float = 10.0,
                 clock: Callable[[], float] = time.monotonic, max_concurrency: Optional[int] = None):
        if not workers:
            raise ValueError("pool needs at least one worker")
        self.workers = list(workers)
        self.failure_threshold = failure_threshold
        self.cooldown_s = cooldown_s
        self.clock = clock
        self.cursor = 0
        self.health = [_Health() for _ in self.workers]
        self.dispatch_counts = [0] * len(self.workers)
        self._lock = threading.Lock()
        self._executor: Optional[ThreadPoolExecutor] = None
        self._max_concurrency = max_concurrency or len(self.workers)

    def __len__(self) -> int:
        return len(self.workers)

    def _healthy(self, i: int, now: float) -> bool:
        return self.health[i].unhealthy_until <= now

    def _select(self, exclude: Optional[int] = None) -> Optional[int]:
        with self._lock:
            now = self.clock()
            n = len(self.workers)
            for step in range(n):
                i = (self.cursor + step) % n
                if i != exclude and self._healthy(i, now):
                    self.cursor = (i + 1) % n
                    self.dispatch_counts[i] += 1
                    return i
            return None

    def _record(self, i: int, failed: bool) -> None:
        with self._lock:
            h = self.health[i]
            if failed:
                h.consecutive_failures += 1
                if h.consecutive_failures >= self.failure_threshold:
                    h.unhealthy_until = self.clock() + self.cooldown_s
                    h.consecutive_failures = 0
                    log.warning("worker %d marked unhealthy for %.1fs", i, self.cooldown_s)
            else:
                h.consecutive_failures = 0

    def mark_unhealthy(self, i: int) -> None:
        with self._lock:
            self.health[i].unhealthy_until = self.clock() + self.cooldown_s

    def dispatch(self, req: ExecutionRequest) -> ExecutionResult:
        """Run on the next healthy worker; retry once elsewhere on transport failure."""
        first = self._select()
        if first is None:
            return ExecutionResult(TRANSPORT_FAILURE, "no healthy workers available")
        res = self._call(first, req)
        if res.status != TRANSPORT_FAILURE:
            return res
        second = self._select(exclude=first)
        if second is None:
            return res
        return self._call(second, req)

    def _call(self, i: int, req: ExecutionRequest) -> ExecutionResult:
        worker = self.workers[i]
        try:
            res = worker.execute(req)
        except Exception as exc:  # a misbehaving worker must not break the rollout
            res = ExecutionResult(TRANSPORT_FAILURE, f"worker {i} failed: {exc!r}", 0, str(i))
        self._record(i, res.status == TRANSPORT_FAILURE)
        return res

    def submit(self, req: ExecutionRequest) -> Future:
        with self._lock:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(self._max_concurrency, thread_name_prefix="sandbox")
        return self._executor.submit(self.dispatch, req)

    def execute(self, code: str, timeout_ms: int = 5000, request_id: str = "") -> ExecutionResult:
        """Convenience used by the rollout engine."""
        return self.dispatch(ExecutionRequest(code=code, timeout_ms=timeout_ms, request_id=request_id))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def mock_pool(n_workers: int = 1) -> WorkerPool:
    return WorkerPool([MockWorker(f"mock-{i}") for i in range(n_workers)])
