import itertools

import numpy as np
import pytest

from proxgate import ml
from proxgate.errors import (
    Expired,
    ForeignDevice,
    IncompleteSession,
    InvalidTransition,
    NotFound,
    NotSignedIn,
    RoleViolation,
    StaleReports,
)
from proxgate.protocol import AccessDecision, PolicyConfig, Reason, Sensitivity, SessionManager, State
from proxgate.registry import DeviceSignature, Group
from proxgate.rssi import RssiSample

from .conftest import FakeClock, T0, ids, readings
from .protocol_model import FAR, NEAR, POLICIES, explore, fuzz, policy_id



def walk_to_reporting(manager, pair, clock, values=NEAR, policy=None):
    req, own = pair
    s = manager.request_access(req, own, policy)
    manager.trigger_measurement(s.session_id)
    manager.submit_report(s.session_id, readings(req, own, values, values, clock()))
    return s


# -- examples ----------------------------------------------------------------


def test_request_happy_path(manager, pair, clock):
    s = manager.request_access(*pair)
    assert s.state is State.REQUESTED
    assert s.deadline == clock() + 120.0


def test_request_role_and_signin_errors(manager, registry, pair):
    req, own = pair
    with pytest.raises(RoleViolation):
        manager.request_access(own, own)
    with pytest.raises(RoleViolation):
        manager.request_access(req, req)
    registry.set_signed_in(req, False)
    with pytest.raises(NotSignedIn):
        manager.request_access(req, own)
    # the gate can be switched off
    assert manager.request_access(req, own, PolicyConfig(require_signed_in=False)).state is State.REQUESTED
    with pytest.raises(NotFound):
        manager.request_access(DeviceSignature(bytes(32)), own)


def test_trigger(manager, pair, clock):
    s = manager.request_access(*pair)
    instr = manager.trigger_measurement(s.session_id)
    assert instr.signatures == pair
    assert instr.mode == "non-connectable"
    assert instr.report_deadline == s.deadline
    with pytest.raises(InvalidTransition):
        manager.trigger_measurement(s.session_id)
    late = manager.request_access(*pair)
    clock.advance(121)
    with pytest.raises(Expired):
        manager.trigger_measurement(late.session_id)
    assert late.state is State.EXPIRED


def test_submit_reports(manager, registry, pair, clock):
    req, own = pair
    s = manager.request_access(req, own)
    with pytest.raises(InvalidTransition):
        manager.submit_report(s.session_id, readings(req, own, NEAR, NEAR, clock()))
    manager.trigger_measurement(s.session_id)
    receipt = manager.submit_report(s.session_id, readings(req, own, NEAR, NEAR, clock()))
    assert (receipt.accepted, receipt.rejected_stale) == (6, 0)
    assert s.state is State.REPORTING

    stranger = registry.register_device("x", ids(9), Group.GROUP_TWO).signature
    with pytest.raises(ForeignDevice):
        manager.submit_report(s.session_id, [RssiSample(stranger, own, -50.0, clock())])
    with pytest.raises(StaleReports):
        manager.submit_report(s.session_id, readings(req, own, NEAR, NEAR, clock() - 600))
    mixed = readings(req, own, NEAR, NEAR, clock()) + readings(req, own, FAR, FAR, clock() - 31)
    receipt = manager.submit_report(s.session_id, mixed)
    assert (receipt.accepted, receipt.rejected_stale) == (6, 6)
    assert len(s.reports) == 12


def test_future_dated_samples_are_stale(manager, pair, clock):
    req, own = pair
    s = manager.request_access(req, own)
    manager.trigger_measurement(s.session_id)
    with pytest.raises(StaleReports):
        manager.submit_report(s.session_id, readings(req, own, NEAR, NEAR, clock() + 600))


def test_evaluate(manager, pair, clock, noiseless_model):
    s = walk_to_reporting(manager, pair, clock)
    v = manager.evaluate_proximity(s.session_id, noiseless_model)
    assert v.label is True and s.state is State.EVALUATED
    assert s.verdict == v
    assert s.features == [-53.0, -53.0]
    assert s.model_id == ml.model_id(noiseless_model)


def test_evaluate_one_direction_only(manager, pair, clock, noiseless_model):
    req, own = pair
    s = manager.request_access(req, own)
    manager.trigger_measurement(s.session_id)
    manager.submit_report(s.session_id, [RssiSample(req, own, v, clock()) for v in NEAR])
    with pytest.raises(IncompleteSession):
        manager.evaluate_proximity(s.session_id, noiseless_model)
    assert s.state is State.REPORTING


def test_evaluate_ignores_reports_gone_stale(manager, pair, clock, noiseless_model):
    s = walk_to_reporting(manager, pair, clock)
    clock.advance(31)
    with pytest.raises(IncompleteSession):
        manager.evaluate_proximity(s.session_id, noiseless_model)


def test_evaluate_delegates_to_predict(manager, pair, clock):
    """A stub model with a fixed score shows the verdict is the model's own."""
    model = ml.LogisticModel(np.zeros(2), float(np.log(0.97 / 0.03)), ml.Standardizer(np.zeros(2), np.ones(2)))
    s = walk_to_reporting(manager, pair, clock)
    v = manager.evaluate_proximity(s.session_id, model)
    assert v.label is True
    assert v.score == pytest.approx(0.97, abs=1e-12)


def test_decide_examples(manager, pair, clock, noiseless_model):
    s = walk_to_reporting(manager, pair, clock)
    manager.evaluate_proximity(s.session_id, noiseless_model)
    d = manager.decide(s.session_id)
    assert d.granted and d.reason is Reason.PROXIMATE and s.state is State.DECIDED
    with pytest.raises(InvalidTransition):
        manager.decide(s.session_id)

    sens = PolicyConfig(data_sensitivity=Sensitivity.SENSITIVE)
    s = walk_to_reporting(manager, pair, clock, policy=sens)
    manager.evaluate_proximity(s.session_id, noiseless_model)
    d = manager.decide(s.session_id, action_confirmed=False)
    assert not d.granted and d.reason is Reason.ACTION_NOT_CONFIRMED

    s = walk_to_reporting(manager, pair, clock, values=FAR, policy=sens)
    manager.evaluate_proximity(s.session_id, noiseless_model)
    d = manager.decide(s.session_id, action_confirmed=True)
    assert not d.granted and d.reason is Reason.NOT_PROXIMATE


def test_decide_rechecks_signin(manager, registry, pair, clock, noiseless_model):
    s = walk_to_reporting(manager, pair, clock)
    manager.evaluate_proximity(s.session_id, noiseless_model)
    registry.set_signed_in(pair[0], False)
    d = manager.decide(s.session_id)
    assert not d.granted and d.reason is Reason.NOT_SIGNED_IN


def test_grant_requires_proximate_reason():
    with pytest.raises(ValueError):
        AccessDecision(True, Reason.NOT_PROXIMATE, 0.9, T0)


def test_expire_sessions(manager, pair, clock, noiseless_model):
    assert manager.expire_sessions() == 0
    s = manager.request_access(*pair)
    clock.advance(121)
    assert manager.expire_sessions() == 1
    assert s.state is State.EXPIRED
    assert manager.expire_sessions() == 0
    done = walk_to_reporting(manager, pair, clock)
    manager.evaluate_proximity(done.session_id, noiseless_model)
    manager.decide(done.session_id)
    clock.advance(1000)
    assert manager.expire_sessions() == 0
    assert done.state is State.DECIDED


# -- exhaustive enumeration against a reference machine -----------------------


@pytest.mark.parametrize("near", [True, False], ids=["near", "far"])
@pytest.mark.parametrize("policy", POLICIES, ids=policy_id)
def test_exhaustive_small_model(registry, pair, noiseless_model, policy, near):
    result = explore(registry, pair, noiseless_model, policy, near, depth=8)
    assert result.violations == 0, result.examples
    assert (result.grants > 0) == near


def test_fuzz_no_grant_after_expiry(registry, pair, noiseless_model):
    result = fuzz(registry, pair, noiseless_model, sequences=1000)
    assert result.sequences == 1000
    assert result.expired_grants == 0
    assert result.skips == 0
    assert result.grants > 0


def test_recomputation_oracle(registry, pair):
    rng = np.random.default_rng(77)
    from proxgate.rssi import PathLossParams, synth_dataset

    model = ml.train_logistic(synth_dataset(2000, params=PathLossParams(rng_seed=5)))
    req, own = pair
    clock = FakeClock()
    counter = itertools.count()
    manager = SessionManager(registry, clock=clock, id_factory=lambda: f"o{next(counter)}")
    agree = 0
    for _ in range(200):
        s = manager.request_access(req, own)
        manager.trigger_measurement(s.session_id)
        d = rng.uniform(0.3, 6.0)
        n_ab, n_ba = rng.integers(3, 9, size=2)
        ab = np.clip(-59 - 20 * np.log10(d) + rng.normal(0, 3, n_ab), -110, 0)
        ba = np.clip(-59 - 20 * np.log10(d) + rng.normal(0, 3, n_ba), -110, 0)
        batch = readings(req, own, ab, ba, clock())
        rng.shuffle(batch)
        manager.submit_report(s.session_id, batch)
        v = manager.evaluate_proximity(s.session_id, model)
        expected = ml.predict(model, [float(np.median(ab)), float(np.median(ba))])
        agree += v == expected
        clock.advance(1)
    assert agree == 200
