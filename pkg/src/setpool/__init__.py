"""Learned attention pooling of embedding sets via actor-critic reinforcement learning."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .actor_critic import ActorCritic, TrainConfig, train_on_policy
from .data import Dataset, FeatureSet, SyntheticConfig, gen_synthetic, load_embeddings, save_embeddings
from .env import aggregate, infer_weights, run_episode
from .offpolicy import ReplayPool, train_off_policy
from .pgr import pgr_distance, pgr_represent, plain_distance

__all__ = [
    "ActorCritic", "Dataset", "FeatureSet", "ReplayPool", "SyntheticConfig", "TrainConfig",
    "aggregate", "gen_synthetic", "infer_weights", "load_embeddings", "pgr_distance", "pgr_represent",
    "plain_distance", "run_episode", "save_embeddings", "train_off_policy", "train_on_policy",
]
