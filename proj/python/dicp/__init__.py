"""Grid tasks, PPO source histories, a causal sequence model over learning
histories, and a beam-search planner that acts through the model's own
dynamics predictions.

Configs are plain dicts; missing keys take their defaults.
"""

import json

from . import _core
from ._core import (
    ConfigError,
    DataError,
    Dataset,
    EnvState,
    History,
    SequenceModel,
    Task,
    enumerate_tasks,
    load_history,
    reset,
    step,
)

__all__ = [
    "ConfigError", "DataError", "Dataset", "EnvState", "History", "SequenceModel", "Task",
    "enumerate_tasks", "load_history", "reset", "step",
    "ppo_defaults", "planner_defaults", "model_config_for", "train_source", "build_dataset",
    "new_model", "model_config", "predict_action", "plan", "train_meta", "meta_test",
    "context_report", "experiment_config", "make_splits", "run_experiment",
]


def _dump(d):
    return json.dumps(d or {})


def ppo_defaults(family="darkroom"):
    return json.loads(_core.ppo_defaults(family))


def planner_defaults(family="darkroom"):
    return json.loads(_core.planner_defaults(family))


def model_config_for(task, **overrides):
    cfg = json.loads(_core.model_config_for(task))
    cfg.update(overrides)
    return cfg


def train_source(task, ppo=None):
    return _core.train_source(task, _dump(ppo))


def build_dataset(tasks, ppo=None, root="", threads=0):
    return _core.build_dataset(tasks, _dump(ppo), root, threads)


def new_model(config, seed=0):
    return SequenceModel(_dump(config), seed)


def model_config(model):
    return json.loads(model.config_json)


def predict_action(model, past, obs, episode_step):
    """`past` is a list of (obs, action, reward, episode_step) tuples."""
    return model.predict_action(past, obs, episode_step)


def plan(model, past, obs, episode_step, planner=None, seed=0):
    return _core.plan(model, past, obs, episode_step, _dump(planner), seed)


def train_meta(dataset, model, train=None, out_dir=""):
    """Returns (trained model, metrics CSV text). The window length and loss
    weight default to the model's."""
    train = dict(train or {})
    train.setdefault("context_transitions", model["context_transitions"])
    train.setdefault("lambda", model.get("lambda", 1.0))
    return _core.train_meta(dataset, _dump(model), _dump(train), out_dir)


def meta_test(model, tasks, eval=None, planner=None, label=""):
    return _core.meta_test(model, tasks, _dump(eval), _dump(planner), label)


def context_report(model, dataset, bucket=10):
    return _core.context_report(model, dataset, bucket)


def experiment_config(partial=None):
    return json.loads(_core.experiment_config(_dump(partial)))


def make_splits(config):
    return _core.make_splits(_dump(config))


def run_experiment(config, results_root, run_id="run", threads=0, allow_stale=False):
    return _core.run_experiment(_dump(config), str(results_root), run_id, threads, allow_stale)
