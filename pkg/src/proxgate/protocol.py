"""Access-data session state machine.

A session walks Requested -> Triggered -> Reporting -> Evaluated -> Decided,
or drops into Expired once its deadline passes. Every path that is not a clean
walk with a proximate verdict and satisfied policy gates ends in a denial.
"""

from __future__ import annotations

import enum
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

from . import ml
from .errors import (
    Expired,
    ForeignDevice,
    IncompleteSession,
    InvalidConfig,
    InvalidTransition,
    NotFound,
    NotSignedIn,
    RoleViolation,
    StaleReports,
)
from .registry import DeviceSignature, Group, Registry
from .rssi import RssiSample, featurize

if TYPE_CHECKING:
    from .store import Store


class State(enum.Enum):
    REQUESTED = "Requested"
    TRIGGERED = "Triggered"
    REPORTING = "Reporting"
    EVALUATED = "Evaluated"
    DECIDED = "Decided"
    EXPIRED = "Expired"


TERMINAL = (State.DECIDED, State.EXPIRED)


class Reason(enum.Enum):
    PROXIMATE = "Proximate"
    NOT_PROXIMATE = "NotProximate"
    NOT_SIGNED_IN = "NotSignedIn"
    ACTION_NOT_CONFIRMED = "ActionNotConfirmed"
    STALE_REPORTS = "StaleReports"
    EXPIRED = "Expired"
    POLICY_DENIED = "PolicyDenied"


class Sensitivity(enum.Enum):
    INSENSITIVE = "Insensitive"
    SENSITIVE = "Sensitive"


@dataclass(frozen=True)
class PolicyConfig:
    require_signed_in: bool = True
    data_sensitivity: Sensitivity = Sensitivity.INSENSITIVE
    require_user_action_for_sensitive: bool = True
    report_staleness_window_s: float = 30.0
    session_ttl_s: float = 120.0
    min_reports_per_direction: int = 3

    def __post_init__(self):
        if not self.report_staleness_window_s > 0 or not self.session_ttl_s > 0:
            raise InvalidConfig("policy windows must be positive")
        if self.min_reports_per_direction < 1:
            raise InvalidConfig("min_reports_per_direction must be positive")
        object.__setattr__(self, "data_sensitivity", Sensitivity(self.data_sensitivity))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_sensitivity"] = self.data_sensitivity.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


@dataclass(frozen=True)
class AccessDecision:
    granted: bool
    reason: Reason
    score: float
    decided_at: float

    def __post_init__(self):
        if self.granted and self.reason is not Reason.PROXIMATE:
            raise ValueError("a grant must carry reason Proximate")

    def to_dict(self) -> dict:
        return {
            "granted": self.granted,
            "reason": self.reason.value,
            "score": self.score,
            "decided_at": self.decided_at,
        }


@dataclass(frozen=True)
class AdvertisingInstruction:
    session_id: str
    signatures: tuple[DeviceSignature, DeviceSignature]
    mode: str
    report_deadline: float

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "signatures": [s.hex for s in self.signatures],
            "advertising_mode": self.mode,
            "report_deadline": self.report_deadline,
        }


@dataclass
class MeasurementSession:
    session_id: str
    requester: DeviceSignature
    owner: DeviceSignature
    policy: PolicyConfig
    created_at: float
    deadline: float
    state: State = State.REQUESTED
    reports: list[RssiSample] = field(default_factory=list)
    verdict: ml.Prediction | None = None
    decision: AccessDecision | None = None
    model_id: str | None = None
    features: list[float] | None = None
    evaluated_at: float | None = None
    history: list[State] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if not self.history:
            self.history.append(self.state)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "requester": self.requester.hex,
            "owner": self.owner.hex,
            "state": self.state.value,
            "created_at": self.created_at,
            "deadline": self.deadline,
            "policy": self.policy.to_dict(),
            "reports": [r.to_dict() for r in self.reports],
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "decision": self.decision.to_dict() if self.decision else None,
            "model_id": self.model_id,
            "features": self.features,
            "evaluated_at": self.evaluated_at,
            "history": [s.value for s in self.history],
        }


@dataclass(frozen=True)
class ReportReceipt:
    accepted: int
    rejected_stale: int


class SessionManager:
    """Runs the access-data protocol against a registry and optional store."""

    def __init__(
        self,
        registry: Registry,
        store: "Store | None" = None,
        clock: Callable[[], float] = time.time,
        id_factory: Callable[[], str] | None = None,
    ):
        self.registry = registry
        self.store = store
        self.clock = clock
        self._new_id = id_factory or (lambda: uuid.uuid4().hex)
        self._sessions: dict[str, MeasurementSession] = {}
        self._lock = threading.Lock()
        if store is not None:
            for s in store.load_sessions():
                self._sessions[s.session_id] = s

    # -- helpers ------------------------------------------------------------

    def get(self, session_id: str) -> MeasurementSession:
        with self._lock:
            try:
                return self._sessions[session_id]
            except KeyError:
                raise NotFound(f"no session {session_id!r}") from None

    def sessions(self) -> list[MeasurementSession]:
        with self._lock:
            return list(self._sessions.values())

    def _move(self, s: MeasurementSession, new: State) -> None:
        if new is State.EXPIRED:
            # a verdict only exists for sessions that may still be decided
            s.verdict = None
        s.state = new
        s.history.append(new)
        if self.store is not None:
            self.store.update_session(s)

    def _require(self, s: MeasurementSession, *allowed: State) -> float:
        """Expire the session if overdue, then check its state; returns now."""
        now = self.clock()
        if s.state not in TERMINAL and now > s.deadline:
            self._move(s, State.EXPIRED)
        if s.state is State.EXPIRED:
            raise Expired(f"session {s.session_id} expired")
        if s.state not in allowed:
            raise InvalidTransition(
                f"session {s.session_id} is {s.state.value}, expected one of "
                + ", ".join(a.value for a in allowed)
            )
        return now

    # -- protocol steps -----------------------------------------------------

    def request_access(
        self, requester: DeviceSignature, owner: DeviceSignature, policy: PolicyConfig | None = None
    ) -> MeasurementSession:
        policy = policy or PolicyConfig()
        req = self.registry.lookup(requester)
        own = self.registry.lookup(owner)
        if req.group is not Group.GROUP_TWO:
            raise RoleViolation("requester must belong to Group Two")
        if own.group is not Group.GROUP_ONE:
            raise RoleViolation("data owner must belong to Group One")
        if policy.require_signed_in and not req.signed_in:
            raise NotSignedIn("requester is not signed in")
        now = self.clock()
        s = MeasurementSession(
            session_id=self._new_id(),
            requester=requester,
            owner=owner,
            policy=policy,
            created_at=now,
            deadline=now + policy.session_ttl_s,
        )
        with self._lock:
            if s.session_id in self._sessions:
                raise InvalidConfig(f"duplicate session id {s.session_id}")
            if self.store is not None:
                self.store.insert_session(s)
            self._sessions[s.session_id] = s
        return s

    def trigger_measurement(self, session_id: str) -> AdvertisingInstruction:
        s = self.get(session_id)
        with s.lock:
            self._require(s, State.REQUESTED)
            self._move(s, State.TRIGGERED)
            return AdvertisingInstruction(
                session_id=s.session_id,
                signatures=(s.requester, s.owner),
                mode="non-connectable",
                report_deadline=s.deadline,
            )

    def submit_report(self, session_id: str, samples: Sequence[RssiSample]) -> ReportReceipt:
        s = self.get(session_id)
        with s.lock:
            now = self._require(s, State.TRIGGERED, State.REPORTING)
            pair = {s.requester, s.owner}
            for smp in samples:
                if {smp.measurer, smp.target} != pair:
                    raise ForeignDevice("report involves a device outside this session")
            window = s.policy.report_staleness_window_s
            fresh = [smp for smp in samples if abs(now - smp.timestamp) <= window]
            if not fresh:
                raise StaleReports(f"all {len(samples)} readings fall outside the {window:g} s window")
            if self.store is not None:
                self.store.insert_measurements(s.session_id, fresh, now)
            s.reports.extend(fresh)
            if s.state is State.TRIGGERED:
                self._move(s, State.REPORTING)
            return ReportReceipt(accepted=len(fresh), rejected_stale=len(samples) - len(fresh))

    def _usable_reports(self, s: MeasurementSession, now: float) -> list[RssiSample]:
        window = s.policy.report_staleness_window_s
        return [r for r in s.reports if abs(now - r.timestamp) <= window]

    def evaluate_proximity(self, session_id: str, model: ml.TrainedModel) -> ml.Prediction:
        s = self.get(session_id)
        with s.lock:
            now = self._require(s, State.REPORTING)
            usable = self._usable_reports(s, now)
            forward = sum(1 for r in usable if r.measurer == s.requester)
            backward = len(usable) - forward
            need = s.policy.min_reports_per_direction
            if min(forward, backward) < need:
                raise IncompleteSession(
                    f"need {need} fresh readings per direction, have {forward}/{backward}"
                )
            features = featurize(usable, first=s.requester)
            verdict = ml.predict(model, features)
            s.verdict = verdict
            s.model_id = ml.model_id(model)
            s.features = features.tolist()
            s.evaluated_at = now
            self._move(s, State.EVALUATED)
            return verdict

    def decide(
        self, session_id: str, action_confirmed: bool = False, policy: PolicyConfig | None = None
    ) -> AccessDecision:
        s = self.get(session_id)
        with s.lock:
            now = self._require(s, State.EVALUATED)
            policy = policy or s.policy
            verdict = s.verdict
            assert verdict is not None
            requester = self.registry.lookup(s.requester)
            needs_action = (
                policy.data_sensitivity is Sensitivity.SENSITIVE
                and policy.require_user_action_for_sensitive
            )
            if not verdict.label:
                reason = Reason.NOT_PROXIMATE
            elif policy.require_signed_in and not requester.signed_in:
                reason = Reason.NOT_SIGNED_IN
            elif needs_action and not action_confirmed:
                reason = Reason.ACTION_NOT_CONFIRMED
            else:
                reason = Reason.PROXIMATE
            decision = AccessDecision(
                granted=reason is Reason.PROXIMATE,
                reason=reason,
                score=verdict.score,
                decided_at=now,
            )
            s.decision = decision
            if self.store is not None:
                audit = {
                    "session_id": s.session_id,
                    "verdict": verdict.to_dict(),
                    "model_id": s.model_id,
                    "policy": policy.to_dict(),
                    "action_confirmed": bool(action_confirmed),
                    "features": s.features,
                    "evaluated_at": s.evaluated_at,
                }
                self.store.insert_decision(s.session_id, decision, audit)
            self._move(s, State.DECIDED)
            return decision

    def expire_sessions(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        count = 0
        for s in self.sessions():
            with s.lock:
                if s.state not in TERMINAL and now > s.deadline:
                    self._move(s, State.EXPIRED)
                    count += 1
        return count
