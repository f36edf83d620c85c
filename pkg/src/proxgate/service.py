"""HTTP+JSON service-provider daemon.

Endpoints::

    GET  /health
    POST /devices                        register a device
    POST /devices/{signature}/signin     {"signed_in": bool}
    POST /sessions                       {"requester", "owner", ["data_sensitivity"]}
    GET  /sessions/{id}                  state, reports, verdict, decision, audit
    POST /sessions/{id}/trigger
    POST /sessions/{id}/reports          {"samples": [RssiSample, ...]}
    POST /sessions/{id}/decision         {"action_confirmed": bool}

Errors come back as ``{"error": {"code": <exception name>, "message": ...}}``.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from . import ml
from .config import ServiceConfig
from .errors import InvalidConfig, ProxgateError
from .protocol import PolicyConfig, SessionManager, Sensitivity
from .registry import DeviceIdentifiers, DeviceSignature, Group, Registry
from .rssi import RssiSample
from .store import Store

log = logging.getLogger(__name__)


class BadRequest(ProxgateError):
    pass


class App:
    """Wires registry, protocol and store around one active model."""

    def __init__(
        self,
        config: ServiceConfig,
        model: ml.TrainedModel | None = None,
        store: Store | None = None,
        clock: Callable[[], float] = time.time,
        id_factory: Callable[[], str] | None = None,
    ):
        self.config = config
        self.store = store or Store(config.database)
        self.registry = Registry(config.secret, store=self.store, clock=clock)
        self.sessions = SessionManager(self.registry, self.store, clock=clock, id_factory=id_factory)
        if model is None:
            if config.model_path:
                model = ml.load_model(config.model_path)
            elif config.active_model_id:
                model = self.store.load_model(config.active_model_id)
            else:
                raise InvalidConfig("no model configured (model_path or active_model_id)")
        self.model = model
        self.model_id = self.store.save_model(model)
        # sessions left open by a previous run must not outlive their deadline
        self.sessions.expire_sessions()

    # -- handlers -------------------------------------------------------------

    def health(self, _body):
        return 200, {"status": "ok", "model_id": self.model_id}

    def register(self, body):
        try:
            group = Group(body["group"])
            name = str(body.get("display_name", ""))
            ids = DeviceIdentifiers.from_dict(body["identifiers"])
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            raise BadRequest(f"bad registration payload: {exc}") from exc
        profile = self.registry.register_device(name, ids, group)
        return 201, profile.to_dict()

    def signin(self, body, signature: str):
        sig = DeviceSignature.from_hex(signature)
        flag = body.get("signed_in", True)
        if not isinstance(flag, bool):
            raise BadRequest("signed_in must be a boolean")
        self.registry.set_signed_in(sig, flag)
        return 200, self.registry.lookup(sig).to_dict()

    def create_session(self, body):
        try:
            requester = DeviceSignature.from_hex(body["requester"])
            owner = DeviceSignature.from_hex(body["owner"])
            policy: PolicyConfig = self.config.policy
            if "data_sensitivity" in body:
                policy = replace(policy, data_sensitivity=Sensitivity(body["data_sensitivity"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise BadRequest(f"bad session payload: {exc}") from exc
        s = self.sessions.request_access(requester, owner, policy)
        return 201, s.to_dict()

    def get_session(self, _body, session_id: str):
        s = self.sessions.get(session_id)
        out = s.to_dict()
        out["audit"] = self.store.audit_record(session_id)
        return 200, out

    def trigger(self, _body, session_id: str):
        return 200, self.sessions.trigger_measurement(session_id).to_dict()

    def reports(self, body, session_id: str):
        raw = body.get("samples")
        if not isinstance(raw, list):
            raise BadRequest("samples must be a list")
        samples = [RssiSample.from_dict(r) for r in raw]
        receipt = self.sessions.submit_report(session_id, samples)
        return 200, {
            "accepted": receipt.accepted,
            "rejected_stale": receipt.rejected_stale,
            "state": self.sessions.get(session_id).state.value,
        }

    def decision(self, body, session_id: str):
        confirmed = body.get("action_confirmed", False)
        if not isinstance(confirmed, bool):
            raise BadRequest("action_confirmed must be a boolean")
        verdict = self.sessions.evaluate_proximity(session_id, self.model)
        decision = self.sessions.decide(session_id, action_confirmed=confirmed)
        return 200, {
            "session_id": session_id,
            "verdict": verdict.to_dict(),
            "model_id": self.model_id,
            **decision.to_dict(),
        }

    ROUTES = [
        ("GET", re.compile(r"^/health$"), "health"),
        ("POST", re.compile(r"^/devices$"), "register"),
        ("POST", re.compile(r"^/devices/([0-9a-fA-F]+)/signin$"), "signin"),
        ("POST", re.compile(r"^/sessions$"), "create_session"),
        ("GET", re.compile(r"^/sessions/([^/]+)$"), "get_session"),
        ("POST", re.compile(r"^/sessions/([^/]+)/trigger$"), "trigger"),
        ("POST", re.compile(r"^/sessions/([^/]+)/reports$"), "reports"),
        ("POST", re.compile(r"^/sessions/([^/]+)/decision$"), "decision"),
    ]

    def dispatch(self, method: str, path: str, body: dict) -> tuple[int, dict]:
        path_known = False
        for verb, pattern, name in self.ROUTES:
            m = pattern.match(path)
            if not m:
                continue
            path_known = True
            if verb != method:
                continue
            try:
                return getattr(self, name)(body, *m.groups())
            except ProxgateError as exc:
                return exc.http_status, {"error": {"code": exc.code, "message": str(exc)}}
        if path_known:
            return 405, {"error": {"code": "MethodNotAllowed", "message": f"{method} {path}"}}
        return 404, {"error": {"code": "NotFound", "message": f"no route {path}"}}


def _make_handler(app: App):
    class Handler(BaseHTTPRequestHandler):
        server_version = "proxgate"

        def log_message(self, fmt, *args):
            log.info("%s %s", self.address_string(), fmt % args)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if not length:
                return {}
            data = json.loads(self.rfile.read(length))
            if not isinstance(data, dict):
                raise ValueError("body must be a JSON object")
            return data

        def _handle(self, method: str):
            try:
                body = self._body()
            except ValueError as exc:
                status, payload = 400, {"error": {"code": "BadRequest", "message": str(exc)}}
            else:
                status, payload = app.dispatch(method, self.path.split("?", 1)[0], body)
            blob = json.dumps(payload, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.end_headers()
            self.wfile.write(blob)

        def do_GET(self):
            self._handle("GET")

        def do_POST(self):
            self._handle("POST")

    return Handler


def make_server(app: App, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bind (port 0 picks a free port); call ``serve_forever`` to run."""
    return ThreadingHTTPServer((host, port), _make_handler(app))


def serve(config: ServiceConfig) -> None:
    app = App(config)
    host, port = config.host_port()
    server = make_server(app, host, port)
    log.info("serving on %s:%d with model %s", host, server.server_port, app.model_id)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        app.store.close()

