"""Client for adsorption-energy proxies running as a child process.

Wire format, one JSON object per line:

    request  (child stdin):  {"id": 7, "xyz": "<extended XYZ of the surface>",
                              "adsorbate": [{"element": "H", "position": [x, y, z]}]}
    response (child stdout): {"id": 7, "e_h": 0.28}

Responses may arrive in any order and are matched by ``id``.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import subprocess
import threading
from typing import Sequence

from .proxy import ProxyError
from .surface import ADSORBATE, AtomGraph, graph_to_xyz

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
_EOF = object()


class ExternalProxyError(ProxyError):
    def __init__(self, message: str, line: str | None = None):
        super().__init__(message if line is None else f"{message}: {line!r}")
        self.line = line


def encode_request(request_id: int, graph: AtomGraph) -> str:
    ads = [
        {"element": s, "position": [float(v) for v in pos]}
        for s, pos, t in zip(graph.symbols, graph.positions, graph.tags)
        if t == ADSORBATE
    ]
    return json.dumps({"id": request_id, "xyz": graph_to_xyz(graph), "adsorbate": ads}, sort_keys=True)


def decode_response(line: str) -> tuple:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        raise ExternalProxyError("malformed response line", line) from None
    if not isinstance(obj, dict) or "id" not in obj:
        raise ExternalProxyError("response without id", line)
    e_h = obj.get("e_h")
    if isinstance(e_h, bool) or not isinstance(e_h, (int, float)) or not math.isfinite(e_h):
        raise ExternalProxyError("response without a finite e_h", line)
    return obj["id"], float(e_h)


class ExternalProxy:
    """Proxy backed by a long-running child process.

    One instance owns one child; calls are serialised with a lock, so a pool of
    instances is needed for concurrent evaluation.
    """

    def __init__(self, command, timeout: float = DEFAULT_TIMEOUT):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ProxyError("external proxy command is empty")
        self.timeout = float(timeout)
        self._proc = None
        self._lines: queue.Queue = queue.Queue()
        self._next_id = 0
        self._lock = threading.Lock()

    def start(self) -> None:
        if self._proc is not None:
            return
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ExternalProxyError(f"cannot start external proxy {self.command!r}: {exc}") from exc
        threading.Thread(target=self._pump, args=(self._proc.stdout,), daemon=True).start()

    def _pump(self, stream) -> None:
        for line in stream:
            self._lines.put(line)
        self._lines.put(_EOF)

    def predict(self, graph: AtomGraph) -> float:
        return self.predict_batch([graph])[0]

    def predict_batch(self, graphs: Sequence[AtomGraph]) -> list:
        with self._lock:
            self.start()
            ids = []
            try:
                for g in graphs:
                    rid = self._next_id
                    self._next_id += 1
                    ids.append(rid)
                    self._proc.stdin.write(encode_request(rid, g) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ExternalProxyError(f"external proxy closed its input: {exc}") from exc
            pending = set(ids)
            results = {}
            while pending:
                try:
                    line = self._lines.get(timeout=self.timeout)
                except queue.Empty:
                    raise ExternalProxyError(
                        f"no response within {self.timeout:g} s; waiting for ids {sorted(pending)}"
                    ) from None
                if line is _EOF:
                    raise ExternalProxyError(f"external proxy exited with ids {sorted(pending)} outstanding")
                if not line.strip():
                    continue
                rid, e_h = decode_response(line)
                if rid not in pending:
                    raise ExternalProxyError("response with unknown or duplicate id", line)
                pending.discard(rid)
                results[rid] = e_h
            return [results[i] for i in ids]

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        self._lines = queue.Queue()

    def __enter__(self) -> "ExternalProxy":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()
