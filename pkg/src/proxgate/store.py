"""Single-file relational persistence (sqlite3).

Measurements and decisions are append-only; triggers reject UPDATE and DELETE
on those tables.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from pathlib import Path
from typing import Iterable

from . import ml
from .errors import IntegrityError, ModelFormatError, NotFound
from .registry import DeviceIdentifiers, DeviceProfile, DeviceSignature, Group
from .rssi import RssiSample, WearSetting

SCHEMA_VERSION = 1

_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS profiles (
    signature TEXT PRIMARY KEY CHECK (length(signature) = 64),
    grp TEXT NOT NULL CHECK (grp IN ('GroupOne', 'GroupTwo')),
    display_name TEXT NOT NULL,
    identifiers_json TEXT NOT NULL,
    registered_at REAL NOT NULL,
    signed_in INTEGER NOT NULL CHECK (signed_in IN (0, 1))
);
CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    requester TEXT NOT NULL REFERENCES profiles(signature),
    owner TEXT NOT NULL REFERENCES profiles(signature),
    state TEXT NOT NULL,
    created_at REAL NOT NULL,
    deadline REAL NOT NULL,
    policy_json TEXT NOT NULL,
    verdict_label INTEGER,
    verdict_score REAL,
    model_id TEXT,
    features_json TEXT,
    evaluated_at REAL,
    history_json TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS measurements (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    measurer TEXT NOT NULL REFERENCES profiles(signature),
    target TEXT NOT NULL REFERENCES profiles(signature),
    rssi_dbm REAL NOT NULL,
    timestamp REAL NOT NULL,
    distance_m REAL,
    setting TEXT,
    inserted_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS decisions (
    session_id TEXT PRIMARY KEY REFERENCES sessions(session_id),
    granted INTEGER NOT NULL,
    reason TEXT NOT NULL,
    score REAL NOT NULL,
    decided_at REAL NOT NULL,
    audit_json TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS dataset_samples (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    source TEXT NOT NULL,
    source_row INTEGER NOT NULL,
    measurer TEXT NOT NULL,
    target TEXT NOT NULL,
    rssi_dbm REAL NOT NULL,
    timestamp REAL NOT NULL,
    distance_m REAL,
    setting TEXT
);
CREATE TABLE IF NOT EXISTS models (
    model_id TEXT PRIMARY KEY,
    variant TEXT NOT NULL,
    document_json TEXT NOT NULL
);
CREATE TRIGGER IF NOT EXISTS measurements_no_update BEFORE UPDATE ON measurements
BEGIN SELECT RAISE(ABORT, 'measurements are append-only'); END;
CREATE TRIGGER IF NOT EXISTS measurements_no_delete BEFORE DELETE ON measurements
BEGIN SELECT RAISE(ABORT, 'measurements are append-only'); END;
CREATE TRIGGER IF NOT EXISTS decisions_no_update BEFORE UPDATE ON decisions
BEGIN SELECT RAISE(ABORT, 'decisions are append-only'); END;
CREATE TRIGGER IF NOT EXISTS decisions_no_delete BEFORE DELETE ON decisions
BEGIN SELECT RAISE(ABORT, 'decisions are append-only'); END;
"""


class Store:
    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        self._lock = threading.RLock()
        try:
            self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
            self._db.execute("PRAGMA foreign_keys = ON")
            status = self._db.execute("PRAGMA integrity_check").fetchone()[0]
        except sqlite3.DatabaseError as exc:
            raise IntegrityError(f"{self.path}: cannot open store ({exc})") from exc
        if status != "ok":
            raise IntegrityError(f"{self.path}: integrity check failed ({status})")
        self._migrate()

    def _migrate(self) -> None:
        with self._lock:
            self._db.executescript(_SCHEMA)
            row = self._db.execute("SELECT value FROM meta WHERE key = 'schema_version'").fetchone()
            if row is None:
                self._db.execute(
                    "INSERT INTO meta (key, value) VALUES ('schema_version', ?)", (str(SCHEMA_VERSION),)
                )
            elif int(row[0]) != SCHEMA_VERSION:
                raise IntegrityError(f"unsupported schema version {row[0]}")

    def close(self) -> None:
        with self._lock:
            self._db.close()

    def _write(self, sql: str, params: Iterable = ()) -> None:
        with self._lock:
            try:
                self._db.execute("BEGIN IMMEDIATE")
                self._db.execute(sql, tuple(params))
                self._db.execute("COMMIT")
            except sqlite3.DatabaseError as exc:
                self._db.execute("ROLLBACK")
                raise IntegrityError(str(exc)) from exc

    def _write_many(self, sql: str, rows: list[tuple]) -> None:
        with self._lock:
            try:
                self._db.execute("BEGIN IMMEDIATE")
                self._db.executemany(sql, rows)
                self._db.execute("COMMIT")
            except sqlite3.DatabaseError as exc:
                self._db.execute("ROLLBACK")
                raise IntegrityError(str(exc)) from exc

    def _query(self, sql: str, params: Iterable = ()) -> list[tuple]:
        with self._lock:
            return self._db.execute(sql, tuple(params)).fetchall()

    # -- profiles -----------------------------------------------------------

    def insert_profile(self, p: DeviceProfile) -> None:
        self._write(
            "INSERT INTO profiles VALUES (?, ?, ?, ?, ?, ?)",
            (
                p.signature.hex,
                p.group.value,
                p.display_name,
                json.dumps(p.identifiers.to_dict(), sort_keys=True),
                p.registered_at,
                int(p.signed_in),
            ),
        )

    def update_signed_in(self, signature: DeviceSignature, flag: bool) -> None:
        self._write("UPDATE profiles SET signed_in = ? WHERE signature = ?", (int(flag), signature.hex))

    def load_profiles(self) -> list[DeviceProfile]:
        out = []
        for sig, grp, name, ids, reg, signed in self._query(
            "SELECT signature, grp, display_name, identifiers_json, registered_at, signed_in "
            "FROM profiles ORDER BY rowid"
        ):
            try:
                out.append(
                    DeviceProfile(
                        signature=DeviceSignature(bytes.fromhex(sig)),
                        group=Group(grp),
                        display_name=name,
                        identifiers=DeviceIdentifiers.from_dict(json.loads(ids)),
                        registered_at=float(reg),
                        signed_in=bool(signed),
                    )
                )
            except (ValueError, TypeError, KeyError) as exc:
                raise IntegrityError(f"corrupt profile row {sig!r}: {exc}") from exc
        return out

    # -- sessions -----------------------------------------------------------

    def _session_row(self, s) -> tuple:
        return (
            s.state.value,
            json.dumps([h.value for h in s.history]),
            None if s.verdict is None else int(s.verdict.label),
            None if s.verdict is None else s.verdict.score,
            s.model_id,
            None if s.features is None else json.dumps(s.features),
            s.evaluated_at,
        )

    def insert_session(self, s) -> None:
        state, history, vlabel, vscore, model_id, features, evaluated_at = self._session_row(s)
        self._write(
            "INSERT INTO sessions VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (
                s.session_id,
                s.requester.hex,
                s.owner.hex,
                state,
                s.created_at,
                s.deadline,
                json.dumps(s.policy.to_dict(), sort_keys=True),
                vlabel,
                vscore,
                model_id,
                features,
                evaluated_at,
                history,
            ),
        )

    def update_session(self, s) -> None:
        self._write(
            "UPDATE sessions SET state = ?, history_json = ?, verdict_label = ?, verdict_score = ?, "
            "model_id = ?, features_json = ?, evaluated_at = ? WHERE session_id = ?",
            (*self._session_row(s), s.session_id),
        )

    def load_sessions(self) -> list:
        from .protocol import AccessDecision, MeasurementSession, PolicyConfig, Reason, State

        decisions = {}
        for sid, granted, reason, score, at in self._query(
            "SELECT session_id, granted, reason, score, decided_at FROM decisions"
        ):
            try:
                decisions[sid] = AccessDecision(bool(granted), Reason(reason), float(score), float(at))
            except ValueError as exc:
                raise IntegrityError(f"corrupt decision for {sid!r}: {exc}") from exc
        reports: dict[str, list[RssiSample]] = {}
        for sid, sample in self._measurement_rows():
            reports.setdefault(sid, []).append(sample)

        out = []
        for row in self._query(
            "SELECT session_id, requester, owner, state, created_at, deadline, policy_json, "
            "verdict_label, verdict_score, model_id, features_json, evaluated_at, history_json "
            "FROM sessions ORDER BY rowid"
        ):
            sid, req, own, state, created, deadline, policy, vlabel, vscore, mid, feats, ev_at, hist = row
            try:
                s = MeasurementSession(
                    session_id=sid,
                    requester=DeviceSignature(bytes.fromhex(req)),
                    owner=DeviceSignature(bytes.fromhex(own)),
                    policy=PolicyConfig.from_dict(json.loads(policy)),
                    created_at=float(created),
                    deadline=float(deadline),
                    state=State(state),
                    reports=reports.get(sid, []),
                    verdict=None if vlabel is None else ml.Prediction(bool(vlabel), float(vscore)),
                    decision=decisions.get(sid),
                    model_id=mid,
                    features=None if feats is None else json.loads(feats),
                    evaluated_at=ev_at,
                    history=[State(h) for h in json.loads(hist)],
                )
            except (ValueError, TypeError, KeyError) as exc:
                raise IntegrityError(f"corrupt session row {sid!r}: {exc}") from exc
            if (s.decision is not None) != (s.state is State.DECIDED):
                raise IntegrityError(f"session {sid!r}: decision/state mismatch")
            out.append(s)
        return out

    # -- measurements -------------------------------------------------------

    def insert_measurements(self, session_id: str, samples: list[RssiSample], inserted_at: float) -> None:
        self._write_many(
            "INSERT INTO measurements (session_id, measurer, target, rssi_dbm, timestamp, distance_m, "
            "setting, inserted_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            [
                (
                    session_id,
                    m.measurer.hex,
                    m.target.hex,
                    m.rssi_dbm,
                    m.timestamp,
                    m.distance_m,
                    m.setting.value if m.setting else None,
                    inserted_at,
                )
                for m in samples
            ],
        )

    def _measurement_rows(self) -> list[tuple[str, RssiSample]]:
        out = []
        for sid, mea, tgt, rssi, ts, dist, setting in self._query(
            "SELECT session_id, measurer, target, rssi_dbm, timestamp, distance_m, setting "
            "FROM measurements ORDER BY id"
        ):
            try:
                out.append(
                    (
                        sid,
                        RssiSample(
                            measurer=DeviceSignature(bytes.fromhex(mea)),
                            target=DeviceSignature(bytes.fromhex(tgt)),
                            rssi_dbm=float(rssi),
                            timestamp=float(ts),
                            distance_m=dist,
                            setting=WearSetting(setting) if setting else None,
                        ),
                    )
                )
            except (ValueError, TypeError) as exc:
                raise IntegrityError(f"corrupt measurement in session {sid!r}: {exc}") from exc
        return out

    def measurements(self, session_id: str | None = None) -> list[RssiSample]:
        return [m for sid, m in self._measurement_rows() if session_id is None or sid == session_id]

    def count_measurements(self) -> int:
        return self._query("SELECT COUNT(*) FROM measurements")[0][0]

    # -- decisions ----------------------------------------------------------

    def insert_decision(self, session_id: str, decision, audit: dict) -> None:
        self._write(
            "INSERT INTO decisions VALUES (?, ?, ?, ?, ?, ?)",
            (
                session_id,
                int(decision.granted),
                decision.reason.value,
                decision.score,
                decision.decided_at,
                json.dumps(audit, sort_keys=True),
            ),
        )

    def audit_record(self, session_id: str) -> dict | None:
        rows = self._query("SELECT audit_json FROM decisions WHERE session_id = ?", (session_id,))
        return json.loads(rows[0][0]) if rows else None

    # -- dataset samples ----------------------------------------------------

    def insert_dataset_samples(self, source: str, samples: list[RssiSample]) -> None:
        self._write_many(
            "INSERT INTO dataset_samples (source, source_row, measurer, target, rssi_dbm, timestamp, "
            "distance_m, setting) VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            [
                (
                    source,
                    s.source_row,
                    s.measurer.hex,
                    s.target.hex,
                    s.rssi_dbm,
                    s.timestamp,
                    s.distance_m,
                    s.setting.value if s.setting else None,
                )
                for s in samples
            ],
        )

    def dataset_counts(self) -> dict[str, int]:
        return {
            (setting or ""): n
            for setting, n in self._query(
                "SELECT setting, COUNT(DISTINCT source || ':' || source_row) FROM dataset_samples "
                "GROUP BY setting ORDER BY setting"
            )
        }

    # -- models -------------------------------------------------------------

    def save_model(self, model: ml.TrainedModel) -> str:
        mid = ml.model_id(model)
        doc = json.dumps(ml.model_to_dict(model), sort_keys=True)
        self._write("INSERT OR IGNORE INTO models VALUES (?, ?, ?)", (mid, model.variant, doc))
        return mid

    def load_model(self, model_id: str) -> ml.TrainedModel:
        rows = self._query("SELECT document_json FROM models WHERE model_id = ?", (model_id,))
        if not rows:
            raise NotFound(f"no stored model {model_id!r}")
        try:
            return ml.model_from_dict(json.loads(rows[0][0]))
        except (json.JSONDecodeError, ModelFormatError) as exc:
            raise IntegrityError(f"corrupt model {model_id!r}: {exc}") from exc
