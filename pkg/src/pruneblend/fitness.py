"""Fitness evaluation of pruning masks.

An evaluator is a callable FitnessRequest -> FitnessResponse. Three live
here or nearby: a planted-importance oracle (exact, instantaneous), the toy
trainer (see toynet), and a client for external evaluators reached over a
line-delimited JSON pipe protocol.
"""

from __future__ import annotations

import json
import math
import queue
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1


@dataclass
class FitnessRequest:
    request_id: int
    masks: dict[str, np.ndarray]
    finetune_epochs: int

    def __post_init__(self):
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")


@dataclass
class FitnessResponse:
    request_id: int
    fitness: float
    diagnostics: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.fitness):
            raise ValueError("fitness must be finite")


class EvaluatorError(Exception):
    """Base class for evaluator failures; carries the request id if known."""

    def __init__(self, message: str, request_id: int | None = None):
        self.request_id = request_id
        if request_id is not None:
            message = f"[request {request_id}] {message}"
        super().__init__(message)


class SpawnError(EvaluatorError):
    """The evaluator process could not be started or died unexpectedly."""


class EvalTimeout(EvaluatorError):
    """No response arrived within the configured timeout."""


class ProtocolViolation(EvaluatorError):
    """The evaluator replied with something the protocol does not allow."""


class RemoteError(EvaluatorError):
    """The evaluator reported an error response for this request."""


def oracle_evaluate(req: FitnessRequest, planted: dict[str, np.ndarray]) -> FitnessResponse:
    """Fraction of total planted importance that the masks keep.

    Exact and instantaneous; finetune_epochs is irrelevant to the optimum and
    ignored. All-ones masks score 1 by construction.
    """
    if set(req.masks) != set(planted):
        raise ValueError("mask layers do not match planted layers")
    kept = 0.0
    total = 0.0
    for name, truth in planted.items():
        t = np.asarray(truth, dtype=np.float64)
        m = np.asarray(req.masks[name], dtype=np.float64)
        if t.shape != m.shape:
            raise ValueError(f"mask length mismatch in layer {name!r}")
        kept += float((t * m).sum())
        total += float(t.sum())
    return FitnessResponse(req.request_id, kept / total)


class OracleEvaluator:
    """Deterministic evaluator over a planted ground-truth importance."""

    def __init__(self, planted: dict[str, np.ndarray]):
        self.planted = {k: np.asarray(v, dtype=np.float64) for k, v in planted.items()}

    def __call__(self, req: FitnessRequest) -> FitnessResponse:
        return oracle_evaluate(req, self.planted)


class _LineReader:
    """Background reader so response waits can time out cleanly."""

    _EOF = object()

    def __init__(self, stream):
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(stream,), daemon=True)
        self._thread.start()

    def _pump(self, stream):
        try:
            for line in stream:
                self._q.put(line)
        except ValueError:
            pass  # stream closed under us
        self._q.put(self._EOF)

    def readline(self, timeout: float):
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError
        if item is self._EOF:
            raise EOFError
        return item


class ExternalEvaluator:
    """Client for an evaluator subprocess speaking line-delimited JSON.

    Handshake: we send {"type":"hello","version":1,"snapshot_sha256":...},
    the evaluator answers {"type":"ready","version":1}. Each eval request
    then gets exactly one terminal outcome: a result, a reported error, a
    timeout, or a protocol violation. A malformed response line is retried
    once by re-sending the request. Requests on one instance are serialized;
    run several instances for concurrency.
    """

    def __init__(self, command, snapshot_sha256: str = "", timeout: float = 60.0):
        self.command = command
        self.snapshot_sha256 = snapshot_sha256
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._reader: _LineReader | None = None
        self._lock = threading.Lock()

    def clone(self) -> "ExternalEvaluator":
        return ExternalEvaluator(self.command, self.snapshot_sha256, self.timeout)

    # -- process management -------------------------------------------------

    def _ensure_started(self) -> None:
        if self._proc is not None:
            if self._proc.poll() is not None:
                raise SpawnError(f"evaluator exited with code {self._proc.returncode}")
            return
        try:
            self._proc = subprocess.Popen(
                self.command,
                shell=isinstance(self.command, str),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise SpawnError(f"cannot spawn evaluator: {e}") from e
        self._reader = _LineReader(self._proc.stdout)
        self._send({"type": "hello", "version": PROTOCOL_VERSION,
                    "snapshot_sha256": self.snapshot_sha256})
        msg = self._recv(None)
        if msg is None:
            msg = self._recv(None)  # one retry on a malformed greeting line
        if msg is None or msg.get("type") != "ready":
            raise ProtocolViolation(f"expected ready, got {msg!r}")
        if msg.get("version") != PROTOCOL_VERSION:
            raise ProtocolViolation(f"unsupported evaluator version {msg.get('version')!r}")

    def _send(self, obj: dict) -> None:
        assert self._proc is not None and self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(obj) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise SpawnError(f"evaluator pipe closed: {e}") from e

    def _recv(self, request_id: int | None) -> dict | None:
        """One line as a dict; None if the line was not a JSON object."""
        assert self._reader is not None
        try:
            line = self._reader.readline(self.timeout)
        except TimeoutError:
            raise EvalTimeout(f"no response within {self.timeout}s", request_id) from None
        except EOFError:
            code = self._proc.poll() if self._proc else None
            raise SpawnError(f"evaluator closed its output (exit code {code})", request_id) from None
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            return None
        return msg if isinstance(msg, dict) else None

    # -- protocol ------------------------------------------------------------

    def __call__(self, req: FitnessRequest) -> FitnessResponse:
        with self._lock:
            self._ensure_started()
            payload = {
                "type": "eval",
                "id": req.request_id,
                "finetune_epochs": req.finetune_epochs,
                "masks": {k: [int(b) for b in np.asarray(v)] for k, v in req.masks.items()},
            }
            self._send(payload)
            msg = self._recv(req.request_id)
            if msg is None:
                self._send(payload)  # retry once on a malformed line
                msg = self._recv(req.request_id)
            if msg is None:
                raise ProtocolViolation("malformed response after retry", req.request_id)
            return self._interpret(msg, req.request_id)

    def _interpret(self, msg: dict, request_id: int) -> FitnessResponse:
        kind = msg.get("type")
        if kind == "error":
            if msg.get("id") != request_id:
                raise ProtocolViolation(f"error for wrong id {msg.get('id')!r}", request_id)
            raise RemoteError(str(msg.get("message", "unspecified evaluator error")), request_id)
        if kind != "result":
            raise ProtocolViolation(f"unexpected message type {kind!r}", request_id)
        if msg.get("id") != request_id:
            raise ProtocolViolation(f"result for wrong id {msg.get('id')!r}", request_id)
        fitness = msg.get("fitness")
        if not isinstance(fitness, (int, float)) or not math.isfinite(fitness):
            raise ProtocolViolation(f"non-finite or missing fitness {fitness!r}", request_id)
        return FitnessResponse(request_id, float(fitness))

    def close(self) -> None:
        with self._lock:
            if self._proc is None:
                return
            try:
                if self._proc.poll() is None:
                    self._send({"type": "bye"})
            except SpawnError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            finally:
                if self._proc.stdin:
                    self._proc.stdin.close()
                self._proc = None
                self._reader = None

    def __enter__(self) -> "ExternalEvaluator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class ExternalPool:
    """Round-robin over several evaluator processes, one busy at a time each."""

    def __init__(self, prototype: ExternalEvaluator, size: int):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self._free: queue.Queue = queue.Queue()
        self._all = [prototype if i == 0 else prototype.clone() for i in range(size)]
        for ev in self._all:
            self._free.put(ev)

    def __call__(self, req: FitnessRequest) -> FitnessResponse:
        ev = self._free.get()
        try:
            return ev(req)
        finally:
            self._free.put(ev)

    def close(self) -> None:
        for ev in self._all:
            ev.close()


def external_evaluate(req: FitnessRequest, command, snapshot_sha256: str = "",
                      timeout: float = 60.0) -> FitnessResponse:
    """One-shot convenience: spawn, handshake, evaluate, shut down."""
    with ExternalEvaluator(command, snapshot_sha256, timeout) as ev:
        return ev(req)
