"""Writes the golden envelope fixtures.

Each fixture is a pair: NN_name.json holds the envelope as written by hand
(keys in arbitrary order, indented) and NN_name.frame holds the expected
frame, produced here by an encoder independent of the Rust one.
"""

import json
import pathlib
import struct

HERE = pathlib.Path(__file__).parent


def sender(kind, name):
    return {"name": name, "kind": kind}


def env(msg_type, trial_id, tick_id, who, payload):
    # Deliberately not in sorted order.
    return {"tick_id": tick_id, "sender": who, "payload": payload, "trial_id": trial_id, "msg_type": msg_type}


ORCH = sender("orchestrator", "orchestrator")
ARENA = sender("environment", "env")

FIXTURES = [
    ("register_service", env("register_service", "", 0, sender("controller", "svc-host"),
        {"class_name": "player", "implementation": "heuristic_v1", "endpoint": "10.0.0.7:9101"})),
    ("register_ack", env("register_ack", "", 0, ORCH, {"ok": True, "liveness_ms": 10000})),
    ("start_trial", env("start_trial", "", 0, sender("controller", "tw"), {
        "env_implementation": "quack_arena_v1",
        "env_config": {"teams": [1, 1], "arena_size": 100.0},
        "actor_slots": [
            {"actor_name": "p0", "class_name": "player", "implementation": "heuristic_v1", "endpoint": None},
            {"actor_name": "p1", "class_name": "player", "implementation": "", "endpoint": "client"},
        ],
        "max_tick": 600, "seed": 42, "retro_window": 32, "action_timeout_ms": 1000, "trial_id": "",
    })),
    ("trial_state", env("trial_state", "trial-000001", 0, ORCH, {"state": "running", "reason": None})),
    ("trial_state_ended", env("trial_state", "trial-000001", 0, ORCH, {
        "state": "ended", "reason": "env_terminal",
        "summary": {"total_ticks": 137, "totals": {"p0": 0.7716666666666666, "p1": -1.2266666666666666}},
    })),
    ("join_trial", env("join_trial", "trial-000002", 0, sender("actor", "p1"), {"actor_name": "p1"})),
    ("join_ack", env("join_ack", "trial-000002", 0, ORCH, {"ok": True, "class_name": "player"})),
    ("observation_set", env("observation_set", "trial-000002", 12, ORCH, {"observation": {
        "self": {"x": 12.5, "y": 80.25, "theta": -1.5707963267948966, "alive": True},
        "visible_players": [{"x": 20.0, "y": -3.75, "theta": 0.5, "opponent": True, "alive": True}],
        "visible_projectiles": [],
    }})),
    ("action", env("action", "trial-000002", 12, sender("actor", "p1"),
        {"action": {"fire": True, "strafe": -1.0, "forward": 0.5, "rotate": 0.0}})),
    ("reward", env("reward", "trial-000002", 20, sender("observer", "eve"),
        {"value": 1.0, "confidence": 0.25, "target_actor": "p1", "target_tick": 15})),
    ("reward_aggregate", env("reward", "trial-000002", 20, ORCH, {
        "actor": "p1", "target_tick": 15, "value": 0.4975, "total_confidence": 1.25,
        "sources": [{"kind": "environment", "name": "env"}, {"kind": "observer", "name": "eve"}],
    })),
    ("message", env("message", "trial-000002", 3, sender("actor", "p0"),
        {"to": {"kind": "actor", "name": "*"}, "payload": {"note": "flank left", "urgency": 2}})),
    ("end_trial", env("end_trial", "trial-000002", 0, sender("actor", "p0"), {})),
    ("trial_ended", env("trial_ended", "trial-000002", 44, ORCH, {"reason": "client_requested"})),
    ("heartbeat", env("heartbeat", "", 0, sender("controller", "svc-host"), {})),
    ("error", env("error", "trial-000002", 7, ORCH,
        {"code": "schema_violation", "path": "action.strafe", "message": "expected a number in [-1, 1]"})),
    ("log_header", env("log_header", "trial-000003", 0, ORCH, {"format_version": 1, "params": {"seed": 7}})),
    ("tick_sample", env("tick_sample", "trial-000003", 18446744073709551615, ORCH,
        {"actions": [], "rewards_received": [], "messages": [], "observations": {"p0": None}})),
    ("log_footer", env("log_footer", "trial-000003", 0, ORCH,
        {"end_reason": "max_tick", "total_ticks": 600, "aggregates": [-0.0, 0.001, 123456.789]})),
    ("model_checkpoint_unicode", env("model_checkpoint", "trial-ü", 0, sender("actor", "Hé \"quoted\" \\ tab\t"),
        {"arrays": [{"name": "λ", "shape": [1], "values": [0.003]}], "note": "line\nbreak \u0001 ✓"})),
]


def check_floats(value):
    """Exponent notation is formatted differently across encoders, so fixtures avoid it."""
    if isinstance(value, float):
        assert "e" not in repr(value), value
    elif isinstance(value, dict):
        for v in value.values():
            check_floats(v)
    elif isinstance(value, list):
        for v in value:
            check_floats(v)


def main():
    assert len(FIXTURES) == 20
    for old in HERE.glob("*.json"):
        old.unlink()
    for old in HERE.glob("*.frame"):
        old.unlink()
    for i, (name, envelope) in enumerate(FIXTURES):
        check_floats(envelope)
        stem = f"{i:02d}_{name}"
        (HERE / f"{stem}.json").write_text(json.dumps(envelope, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        body = json.dumps(envelope, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        (HERE / f"{stem}.frame").write_bytes(struct.pack(">I", len(body)) + body)


if __name__ == "__main__":
    main()
