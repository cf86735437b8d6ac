"""Minimal retrieval service: a user-state store plus tree retrieval over HTTP/JSON.

State updates and retrievals are decoupled. Each update builds a complete new
``UserState`` and swaps it into the store in one assignment, so a concurrent
retrieval sees either the old or the new snapshot, never a partial one.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .data import BehaviorEvent, BehaviorType, build_user_state, parse_behavior_type
from .retrieval import retrieve_tdm
from .scorer import ScorerParams
from .tree import TreeIndex

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_K = 10_000


class RequestError(ValueError):
    """Malformed client request (answered with HTTP 400)."""


@dataclass(frozen=True)
class _Snapshot:
    events: tuple[BehaviorEvent, ...]
    state: object


class RetrievalService:
    def __init__(
        self,
        tree: TreeIndex,
        params: ScorerParams,
        max_behaviors: int = 64,
        event_log: str | Path | None = None,
    ):
        if params.n_nodes != tree.n_nodes:
            raise ValueError(f"params cover {params.n_nodes} nodes, tree has {tree.n_nodes}")
        self.tree, self.params, self.max_behaviors = tree, params, max_behaviors
        self._store: dict[int, _Snapshot] = {}
        self._write_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self.n_retrievals = 0
        self.n_updates = 0
        self.total_latency = 0.0
        self.event_log = Path(event_log) if event_log is not None else None
        if self.event_log is not None and self.event_log.exists():
            self._replay(self.event_log)

    # -- state ---------------------------------------------------------------

    def empty_state(self, user_id: int):
        return build_user_state((), 0, self.params.config.n_windows, self.max_behaviors, user_id=user_id)

    def state_of(self, user_id: int):
        snap = self._store.get(user_id)
        return None if snap is None else snap.state

    def upsert(self, user_id: int, events: list[dict], log_event: bool = True) -> dict:
        user_id = _as_int(user_id, "user_id")
        parsed = [_parse_event(user_id, e) for e in events]
        with self._write_lock:
            old = self._store.get(user_id)
            merged = tuple(sorted((old.events if old else ()) + tuple(parsed), key=BehaviorEvent.sort_key))
            as_of = merged[-1].timestamp if merged else 0
            state = build_user_state(
                merged, as_of, self.params.config.n_windows, self.max_behaviors, user_id=user_id
            )
            self._store[user_id] = _Snapshot(merged, state)  # atomic swap
            if log_event and self.event_log is not None:
                with open(self.event_log, "a", encoding="utf-8") as f:
                    f.write(json.dumps({"user_id": user_id, "events": events}, sort_keys=True) + "\n")
            self.n_updates += 1
        return {"schema_version": SCHEMA_VERSION, "user_id": user_id, "n_behaviors": state.n_behaviors, "as_of": as_of}

    def _replay(self, path: Path) -> None:
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                self.upsert(rec["user_id"], rec["events"], log_event=False)
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{n}: unreadable event log record") from exc

    # -- retrieval -------------------------------------------------------------

    def retrieve(self, user_id: int, k: int) -> dict:
        user_id = _as_int(user_id, "user_id")
        k = _as_int(k, "k")
        if not 1 <= k <= MAX_K:
            raise RequestError(f"k must be in [1, {MAX_K}]")
        t0 = time.perf_counter()
        state = self.state_of(user_id)
        cold = state is None
        if cold:
            state = self.empty_state(user_id)
        res = retrieve_tdm(self.tree, self.params, state, k)
        elapsed = time.perf_counter() - t0
        with self._stats_lock:
            self.n_retrievals += 1
            self.total_latency += elapsed
        return {
            "schema_version": SCHEMA_VERSION,
            "user_id": user_id,
            "items": [{"item_id": i, "score": s} for i, s in res.items],
            "nodes_scored": res.nodes_scored,
            "cold_start": cold,
            "truncated": res.truncated,
        }

    def stats(self) -> dict:
        with self._stats_lock:
            mean_ms = 1000 * self.total_latency / self.n_retrievals if self.n_retrievals else 0.0
            return {
                "schema_version": SCHEMA_VERSION,
                "retrievals": self.n_retrievals,
                "updates": self.n_updates,
                "users": len(self._store),
                "mean_latency_ms": mean_ms,
                "n_leaves": self.tree.n_items,
            }


def _as_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise RequestError(f"{name} must be an integer")
    return value


def _parse_event(user_id: int, rec) -> BehaviorEvent:
    if not isinstance(rec, dict):
        raise RequestError("each event must be an object")
    try:
        item = _as_int(rec["item_id"], "item_id")
        ts = _as_int(rec["timestamp"], "timestamp")
        btype = parse_behavior_type(rec.get("type", "click")) if "type" in rec else BehaviorType.CLICK
    except KeyError as exc:
        raise RequestError(f"event missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise RequestError(str(exc)) from None
    if ts < 0:
        raise RequestError("timestamp must be >= 0")
    return BehaviorEvent(user_id, item, -1, btype, ts)


# -- HTTP ------------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    service: RetrievalService
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route access logs through logging
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, code: int, body: dict) -> None:
        data = json.dumps(body).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, code: int, message: str) -> None:
        self._send(code, {"schema_version": SCHEMA_VERSION, "error": message})

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, {"schema_version": SCHEMA_VERSION, "status": "ok"})
        elif self.path == "/stats":
            self._send(200, self.service.stats())
        else:
            self._error(404, f"no route {self.path}")

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"null")
            if not isinstance(body, dict):
                raise RequestError("request body must be a JSON object")
            if self.path == "/state":
                if "user_id" not in body or not isinstance(body.get("events"), list):
                    raise RequestError("expected {user_id, events: [...]}")
                self._send(200, self.service.upsert(body["user_id"], body["events"]))
            elif self.path == "/retrieve":
                if "user_id" not in body or "k" not in body:
                    raise RequestError("expected {user_id, k}")
                self._send(200, self.service.retrieve(body["user_id"], body["k"]))
            else:
                self._error(404, f"no route {self.path}")
        except (RequestError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            self._error(400, str(exc))
        except Exception as exc:  # keep the server alive; report as a server error
            log.exception("request failed")
            self._error(500, f"{type(exc).__name__}: {exc}")


class _Server(ThreadingHTTPServer):
    # the stdlib default backlog of 5 resets connections under bursts
    request_queue_size = 128
    daemon_threads = True


def make_server(service: RetrievalService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    return _Server((host, port), handler)
