"""Scripted end-to-end scenarios run against a live daemon on a loopback port.

``fig1a``: a Group Two user asks for another user's data (two wearables).
``fig1b``: a Group Two user asks for an IoT device's data; the device is
registered as a Group One profile.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.request
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import ml
from .config import ServiceConfig
from .registry import DeviceSignature
from .rssi import PathLossParams, synth_dataset, synth_rssi
from .service import App, make_server
from .store import Store

DEMO_SECRET_HEX = "00112233445566778899aabbccddeeff" * 2

SCENARIOS = {
    "fig1a": {
        "owner": ("Alice's smartwatch", {"uuid": "watch-a-uuid", "imei": "356938035643809"}),
        "requester": ("Bob's smartwatch", {"uuid": "watch-b-uuid", "imei": "490154203237518"}),
    },
    "fig1b": {
        "owner": ("Thermostat", {"uuid": "iot-thermostat-uuid", "device_id": "TH-0042"}),
        "requester": ("Bob's smartphone", {"uuid": "phone-b-uuid", "imei": "490154203237519"}),
    },
}


class HttpClient:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def call(self, method: str, path: str, body: dict | None = None) -> tuple[int, dict]:
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(
            self.base_url + path, data=data, method=method, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                return resp.status, json.loads(resp.read())
        except urllib.error.HTTPError as err:
            return err.code, json.loads(err.read())


@contextmanager
def running_daemon(app: App) -> Iterator[HttpClient]:
    server = make_server(app, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield HttpClient(f"http://127.0.0.1:{server.server_port}")
    finally:
        server.shutdown()
        server.server_close()


def demo_model(seed: int = 7, n: int = 2000, tau_m: float = 2.0) -> ml.TrainedModel:
    data = synth_dataset(n, threshold_m=tau_m, params=PathLossParams(rng_seed=seed))
    return ml.train_logistic(data)


def report_batch(
    requester: DeviceSignature,
    owner: DeviceSignature,
    distance_m: float,
    params: PathLossParams,
    per_direction: int = 3,
    now: float | None = None,
) -> list[dict]:
    """Mutual readings as the two devices would upload them."""
    rng = np.random.default_rng(params.rng_seed)
    now = time.time() if now is None else now
    out = []
    for i in range(per_direction):
        for a, b in ((requester, owner), (owner, requester)):
            out.append(
                {
                    "measurer": a.hex,
                    "target": b.hex,
                    "rssi_dbm": synth_rssi(distance_m, params, rng),
                    "timestamp": now - 0.1 * i,
                }
            )
    return out


@dataclass
class ScenarioResult:
    transcript: list[str]
    decision: dict


def run_scenario(
    client: HttpClient,
    scenario: str,
    distance_m: float,
    params: PathLossParams,
    action_confirmed: bool = False,
    data_sensitivity: str = "Insensitive",
    emit: Callable[[str], None] | None = None,
) -> ScenarioResult:
    roles = SCENARIOS[scenario]
    lines: list[str] = []

    def say(text: str) -> None:
        lines.append(text)
        if emit:
            emit(text)

    def ok(status: int, payload: dict, expected: int) -> dict:
        if status != expected:
            raise RuntimeError(f"unexpected HTTP {status}: {payload}")
        return payload

    sigs = {}
    for role, group in (("owner", "GroupOne"), ("requester", "GroupTwo")):
        name, ids = roles[role]
        status, body = client.call("POST", "/devices", {"display_name": name, "identifiers": ids, "group": group})
        if status == 409:
            raise RuntimeError(f"{name} already registered")
        profile = ok(status, body, 201)
        sigs[role] = DeviceSignature.from_hex(profile["signature"])
        say(f"registered {name} as {group}, signature {profile['signature'][:16]}...")
    ok(*client.call("POST", f"/devices/{sigs['requester'].hex}/signin", {"signed_in": True}), 200)
    say(f"{roles['requester'][0]} signed in")

    session = ok(
        *client.call(
            "POST",
            "/sessions",
            {"requester": sigs["requester"].hex, "owner": sigs["owner"].hex, "data_sensitivity": data_sensitivity},
        ),
        201,
    )
    sid = session["session_id"]
    say(f"step 1: {roles['requester'][0]} requests access to {roles['owner'][0]}'s data -> session {sid} {session['state']}")

    instr = ok(*client.call("POST", f"/sessions/{sid}/trigger"), 200)
    say(f"step 2: provider triggers both devices, {instr['advertising_mode']} advertising of their signatures")

    batch = report_batch(sigs["requester"], sigs["owner"], distance_m, params)
    readings = ", ".join(f"{b['rssi_dbm']:.2f}" for b in batch)
    say(f"step 3: devices measure each other at {distance_m:g} m and report RSSI [{readings}] dBm with timestamps")
    receipt = ok(*client.call("POST", f"/sessions/{sid}/reports", {"samples": batch}), 200)
    say(f"step 4: provider stores {receipt['accepted']} readings, session {receipt['state']}")

    decision = ok(*client.call("POST", f"/sessions/{sid}/decision", {"action_confirmed": action_confirmed}), 200)
    v = decision["verdict"]
    say(f"step 5: model {decision['model_id']} scores proximity {v['score']:.4f} -> {'proximate' if v['label'] else 'not proximate'}")
    outcome = "GRANTED" if decision["granted"] else "DENIED"
    say(f"step 6: access {outcome} ({decision['reason']})")
    return ScenarioResult(lines, decision)


def run_demo(
    scenario: str,
    distance_m: float = 0.5,
    seed: int = 7,
    sigma_db: float = 3.0,
    action_confirmed: bool = False,
    data_sensitivity: str = "Insensitive",
    emit: Callable[[str], None] | None = None,
) -> ScenarioResult:
    config = ServiceConfig(registry_secret_hex=DEMO_SECRET_HEX, database=":memory:", seed=seed)
    counter = iter(range(1, 1_000_000))
    app = App(
        config,
        model=demo_model(seed),
        store=Store(":memory:"),
        id_factory=lambda: f"{scenario}-session-{next(counter):04d}",
    )
    params = PathLossParams(shadowing_sigma_db=sigma_db, rng_seed=seed)
    with running_daemon(app) as client:
        return run_scenario(client, scenario, distance_m, params, action_confirmed, data_sensitivity, emit)
