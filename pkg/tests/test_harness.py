import json

import pytest

from aircombat import cli
from aircombat.harness import (
    EvalSpec, EvaluationReport, MalformedLogError, TrajectoryRecorder, evaluate, parse_scenario, read_trajectory,
    record_trajectory, render_replay, replay_events,
)
from aircombat.sim import (
    AircraftKind, CombatEvent, EventKind, ManeuverCommand, Team, advance,
)
from aircombat.training import LeagueRegistry, MissingCheckpointError

from conftest import plane, world_of


@pytest.mark.parametrize("label, sizes", [("2v2", (2, 2)), ("5vs5", (5, 5)), ("1v3", (1, 3))])
def test_parse_scenario(label, sizes):
    assert parse_scenario(label) == sizes


@pytest.mark.parametrize("bad", ["2x2", "0v1", "v"])
def test_parse_scenario_rejects(bad):
    with pytest.raises(ValueError):
        parse_scenario(bad)


KINDS = {0: AircraftKind.AC1, 1: AircraftKind.AC2, 2: AircraftKind.AC1, 3: AircraftKind.AC2}
TEAMS = {0: Team.AGENT, 1: Team.AGENT, 2: Team.OPPONENT, 3: Team.OPPONENT}


def test_report_categories():
    r = EvaluationReport("2v2")
    r.add("win", [CombatEvent(EventKind.KILL, 0, 2, 1), CombatEvent(EventKind.KILL, 1, 3, 2)], KINDS, TEAMS)
    r.add("draw", [], KINDS, TEAMS)
    r.add("loss", [CombatEvent(EventKind.FRIENDLY_KILL, 0, 1, 1), CombatEvent(EventKind.OUT_OF_BOUNDS, None, 0, 2)],
          KINDS, TEAMS)
    r.check()
    assert (r.wins, r.draws, r.losses, r.episodes) == (1, 1, 1, 3)
    assert r.kills == {"AC1": 1, "AC2": 1}
    assert r.deaths == {"AC1": 1, "AC2": 1}
    assert r.friendly_kills == {"AC1": 1, "AC2": 0}
    assert (r.escaped, r.killed, r.episodes_with_kills) == (2, 1, 1)
    assert "fk-1" in r.table()


def test_evaluate_scripts_partition_and_workers():
    spec = EvalSpec(agents="script", opponents="random", horizon=100)
    one = evaluate("2v2", 60, seed=3, spec=spec, workers=1)
    two = evaluate("2v2", 60, seed=3, spec=spec, workers=2)
    assert one.wins + one.losses + one.draws == 60
    assert one.to_dict() == two.to_dict()


def test_evaluate_static_draws():
    report = evaluate("1v1", 10, seed=0, spec=EvalSpec(agents="static", opponents="static", horizon=20))
    assert report.draws == 10


def test_evaluate_missing_checkpoints():
    with pytest.raises(MissingCheckpointError):
        evaluate("2v2", 2, spec=EvalSpec(), league=LeagueRegistry())
    with pytest.raises(MissingCheckpointError):
        evaluate("2v2", 2, spec=EvalSpec())


def test_recorder_two_steps_and_landmark(tmp_path):
    w = world_of(plane(0, x=0.2, y=10, heading=270, speed=900), plane(1, "opponent", x=20, y=10, heading=0))
    rec = TrajectoryRecorder({"seed": 1})
    rec(w, [])
    cmds = lambda: {a.id: ManeuverCommand(a.pose.heading, a.speed) for a in w.aircraft if a.alive}
    _, ev1 = advance(w, cmds())
    rec(w, ev1)
    assert ev1 and ev1[0].kind is EventKind.OUT_OF_BOUNDS
    path = rec.write(tmp_path / "t.jsonl")
    log = read_trajectory(path)
    assert len(log["steps"]) == 1
    mark = log["landmarks"][0]
    assert (mark["id"], mark["cause"]) == (0, "OutOfBounds")
    assert mark["x"] == pytest.approx(w.get(0).pose.x) and mark["x"] < 0
    svg = render_replay(log)
    assert 'id="landmark-0"' in svg


def test_record_and_replay_events(tmp_path):
    spec = EvalSpec(agents="script", opponents="script", horizon=150)
    path = record_trajectory("2v2", 5, tmp_path / "t.jsonl", spec)
    log = read_trajectory(path)
    assert log["header"]["seed"] == 5
    again = record_trajectory("2v2", 5, tmp_path / "u.jsonl", spec)
    assert path.read_bytes() == again.read_bytes()
    # the replayed events equal a fresh run through the evaluation path
    from aircombat.harness import _run_chunk
    outcome, events, _, _ = _run_chunk((spec, {}, 2, 2, 5, [0]))[0]
    assert replay_events(log) == events


def test_render_straight_line_and_empty(tmp_path):
    header = {"type": "header", "format": 1, "map_size": 30.0,
              "aircraft": [{"id": 0, "team": "agent", "x": 1.0, "y": 1.0}]}
    steps = [{"type": "step", "step": i + 1, "events": [],
              "aircraft": [{"id": 0, "team": "agent", "x": 1.0 + i + 1, "y": 1.0}]} for i in range(3)]
    path = tmp_path / "s.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in [header] + steps))
    svg = render_replay(path)
    assert svg.count("<polyline") == 1
    pts = svg.split('points="')[1].split('"')[0].split()
    assert len({p.split(",")[1] for p in pts}) == 1
    empty = tmp_path / "e.jsonl"
    empty.write_text(json.dumps(header) + "\n")
    svg = render_replay(empty)
    assert "<polyline" not in svg and "<rect" in svg


@pytest.mark.parametrize("content", ["", "not json\n", json.dumps({"type": "step"}) + "\n",
                                     json.dumps({"type": "header", "format": 9}) + "\n"])
def test_malformed_logs(tmp_path, content):
    path = tmp_path / "bad.jsonl"
    path.write_text(content)
    with pytest.raises(MalformedLogError):
        render_replay(path)


def test_cli_evaluate_and_render(tmp_path, capsys):
    out = tmp_path / "o"
    code = cli.main(["evaluate", "--scenario", "2v2", "--agents", "script", "--opponents", "static",
                     "--episodes", "4", "--out", str(out), "--trajectory", "--seed", "7"])
    assert code == 0
    report = json.loads((out / "eval-2v2.json").read_text())
    assert report["episodes"] == 4
    assert cli.main(["render", "--log", str(out / "trajectory-2v2.jsonl"), "--out", str(out)]) == 0
    assert (out / "trajectory-2v2.svg").exists()


def test_cli_determinism(tmp_path):
    args = ["evaluate", "--scenario", "1v1", "--agents", "random", "--opponents", "script", "--episodes", "6"]
    cli.main(args + ["--out", str(tmp_path / "a")])
    cli.main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "eval-1v1.json").read_bytes() == (tmp_path / "b" / "eval-1v1.json").read_bytes()


def test_cli_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["evaluate", "--scenario", "2v2", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["evaluate", "--scenario", "2v2", "--seed", "-1"])
    assert exc.value.code == 2
    assert cli.main(["evaluate", "--scenario", "2v2", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    assert cli.main(["render", "--log", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert cli.main(["train-low", "--policy", "fight", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_cli_train_pipeline(tmp_path):
    cfg = {"episodes_per_level": 2, "batch_size": 100, "minibatch_size": 50, "epochs": 1, "n_envs": 2,
           "base_horizon": 20, "horizon_step": 5, "embed_dim": 8, "attention_dim": 4, "recurrent_hidden": 8,
           "commander_batch_size": 10, "macro_horizon": 3}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "run")
    assert cli.main(["train-low", "--policy", "fight", "--type", "ac1", "--config", str(path), "--out", out]) == 0
    assert cli.main(["train-low", "--policy", "escape", "--config", str(path), "--out", out]) == 0
    assert cli.main(["train-commander", "--config", str(path), "--out", out, "--episodes", "2"]) == 0
    league = LeagueRegistry.load(tmp_path / "run" / "league")
    assert league.levels("fight") == [1, 2, 3, 4, 5] and league.commander is not None
    assert cli.main(["evaluate", "--scenario", "3v3", "--mode", "commander", "--episodes", "2", "--out", out]) == 0
    assert cli.main(["evaluate", "--scenario", "2v2", "--episodes", "2", "--out", out]) == 0
    lines = (tmp_path / "run" / "progress-fight.jsonl").read_text().splitlines()
    assert {"episode", "level", "mean_reward", "wins", "losses", "draws"} <= set(json.loads(lines[0]))
