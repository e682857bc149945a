import csv
import io

import pytest

import dicp


def tiny_task():
    return dicp.enumerate_tasks("darkroom", grid_size=3, horizon=6)[8]


def test_enumerate_and_step():
    tasks = dicp.enumerate_tasks("darkroom", grid_size=5)
    assert len(tasks) == 25
    assert len({t.id for t in tasks}) == 25
    task = tasks[0]
    state, obs = dicp.reset(task)
    assert obs == 12  # centre of a 5x5 grid
    total = 0
    for _ in range(task.horizon):
        # walk left then up toward the goal in the corner
        x, y = state.pos
        action = 2 if x > task.goal[0] else (0 if y > task.goal[1] else 4)
        state, obs, reward, done = dicp.step(task, state, action)
        total += reward
    assert done
    assert total == task.optimal_return()


def test_task_json_round_trip():
    task = dicp.enumerate_tasks("dark_key_to_door", grid_size=3)[5]
    assert dicp.Task.from_json(task.to_json()) == task
    with pytest.raises(dicp.ConfigError):
        dicp.Task.from_json('{"family": "nowhere"}')


def test_source_history_replays():
    ppo = dict(dicp.ppo_defaults("darkroom"), total_timesteps=120, n_steps=20, batch_size=20, n_epochs=1)
    h = dicp.train_source(tiny_task(), ppo)
    assert len(h) == 120
    assert h.replays_exactly()
    assert len(h.episode_returns()) == 20
    assert sum(h.rewards) == sum(h.episode_returns())
    again = dicp.train_source(tiny_task(), ppo)
    assert again.actions == h.actions


def test_model_plan_and_meta_test():
    task = tiny_task()
    cfg = dicp.model_config_for(task, n_layer=1, n_head=2, n_embed=8, intermediate_size=16)
    model = dicp.new_model(cfg, seed=3)
    assert dicp.model_config(model)["obs_vocab"] == 9
    probs = dicp.predict_action(model, [(4, 0, 0, 0), (1, 2, 0, 1)], 0, 2)
    assert len(probs) == 5 and abs(sum(probs) - 1.0) < 1e-9

    planner = dict(dicp.planner_defaults("darkroom"), beam_size=3, sample_size=2, planning_horizon=2,
                   wait_for_full_context=False)
    r = dicp.plan(model, [(4, 0, 0, 0)], 1, 1, planner, seed=1)
    assert r["planned"]
    assert 0 <= r["action"] < 5
    assert len(r["beam_first_actions"]) <= 3
    assert r["beam_scores"] == sorted(r["beam_scores"], reverse=True)

    out = dicp.meta_test(model, [task], {"total_env_steps": 24, "threads": 1}, planner, "tiny")
    assert out["curve"]["label"] == "tiny"
    assert out["curve"]["env_steps"] == [6, 12, 18, 24]
    assert len(out["logs"][0]["episode_returns"]) == 4


def test_train_meta_writes_metrics(tmp_path):
    tasks = dicp.enumerate_tasks("darkroom", grid_size=3, horizon=6)[:3]
    ppo = {"total_timesteps": 120, "n_steps": 20, "batch_size": 20, "n_epochs": 1}
    data = dicp.build_dataset(tasks, ppo, str(tmp_path / "data"), threads=1)
    assert len(dicp.Dataset.load(str(tmp_path / "data"))) == 3
    cfg = dicp.model_config_for(tasks[0], n_layer=1, n_head=2, n_embed=8, intermediate_size=16)
    model, metrics = dicp.train_meta(data, cfg, {"batch_size": 2, "total_steps": 4, "eval_every": 2,
                                                 "heldout_fraction": 0.0}, str(tmp_path / "train"))
    rows = list(csv.DictReader(io.StringIO(metrics)))
    assert [int(r["step"]) for r in rows] == [0, 2, 4]
    reloaded = dicp.SequenceModel.load(str(tmp_path / "train" / "final.ckpt"))
    assert reloaded.num_params == model.num_params
    report = dicp.context_report(model, data, bucket=3)
    assert len(report["buckets"]) == 8


def test_experiment_config_and_errors():
    cfg = dicp.experiment_config({"env": {"grid_size": 3, "horizon": 6, "test_percent": 34}, "eval": {"total_env_steps": 600}})
    assert cfg["model"]["context_transitions"] == 24
    splits = dicp.make_splits(cfg)
    assert len(splits) == cfg["eval"]["num_splits"]
    with pytest.raises(dicp.ConfigError):
        dicp.experiment_config({"bogus": {}})
