"""Centralized training of the parameter agents: QMIX over recurrent dueling
agents with double-DQN targets from a delayed copy of the networks."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .neural import DTYPE, AgentNetwork, HyperMixer, make_optimizer

log = logging.getLogger(__name__)

ACTION_VALUES = np.array([-1, 0, 1])


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyper:
    gamma: float = 0.9
    lr: float = 5e-4
    batch_episodes: int = 8
    target_sync_period: int = 50
    updates_per_round: int = 4
    grad_clip: float | None = 10.0
    eps_initial: float = 0.9
    eps_decay: float = 0.9
    eps_period: int = 5
    bootstrap_last: bool = True

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.eps_initial <= 1 or not 0 < self.eps_decay <= 1:
            raise ValueError("epsilon schedule out of range")
        if self.batch_episodes < 1 or self.target_sync_period < 1 or self.eps_period < 1:
            raise ValueError("batch size, sync period and decay period must be >= 1")


def epsilon_at(episode: int, initial: float = 0.9, decay: float = 0.9, period: int = 5) -> float:
    if episode < 0:
        raise ValueError("episode index must be >= 0")
    return initial * decay ** (episode // period)


class QNetworks(nn.Module):
    """Agent utilities plus the mixer that combines them."""

    def __init__(self, obs_dim: int, n_agents: int, hidden_dim: int = 128, rnn_dim: int = 64,
                 embed_dim: int = 32, shared: bool = True):
        super().__init__()
        self.agents = AgentNetwork(obs_dim, n_agents, hidden_dim, rnn_dim, shared)
        self.mixer = HyperMixer(n_agents, obs_dim, embed_dim)

    @property
    def n_agents(self) -> int:
        return self.agents.n_agents

    def agent_values(self, obs_seq: torch.Tensor) -> torch.Tensor:
        """(B, T, obs_dim) -> per-prefix utilities (B, T, n_agents, 3)."""
        return self.agents(obs_seq)

    def mix(self, q: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        return self.mixer(q, state)


def agent_q(nets: QNetworks, history: np.ndarray | torch.Tensor, agent_id: int | None = None) -> np.ndarray:
    """Q-values after reading a DVH history (t, obs_dim); all agents or one."""
    obs = torch.as_tensor(np.asarray(history, dtype=np.float64)).reshape(1, len(history), -1)
    with torch.no_grad():
        q = nets.agent_values(obs)[0, -1].numpy()
    return q if agent_id is None else q[agent_id]


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax action index per agent; ties go to the lowest index."""
    return np.argmax(q, axis=-1)


def select_actions(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Epsilon-greedy action indices (0, 1, 2 for -1, 0, +1), independently per agent.

    Both random draws are made for every agent regardless of epsilon, so the
    generator advances identically along greedy and exploratory paths.
    """
    n = q.shape[0]
    explore = rng.random(n) < epsilon
    random_a = rng.integers(0, 3, size=n)
    return np.where(explore, random_a, greedy(q))


@dataclass
class TDBatch:
    obs: torch.Tensor       # (B, T+1, obs_dim): s_1 .. s_{T+1}
    actions: torch.Tensor   # (B, T, n_agents) action indices
    rewards: torch.Tensor   # (B, T)

    @classmethod
    def from_arrays(cls, obs, actions, rewards) -> "TDBatch":
        obs = np.asarray(obs, dtype=np.float64)
        return cls(
            torch.as_tensor(obs.reshape(obs.shape[0], obs.shape[1], -1)),
            torch.as_tensor(np.asarray(actions, dtype=np.int64)),
            torch.as_tensor(np.asarray(rewards, dtype=np.float64)),
        )


def td_targets(online, target, batch: TDBatch, gamma: float, bootstrap_last: bool = True) -> torch.Tensor:
    """y_t = r_t + gamma * Q_tot^target(h_{t+1}, argmax_a Q_i^online(h_{t+1}, a)).

    Actions are picked by the online agents and evaluated by the target agents
    and target mixer.  There is no terminal state, so the last transition also
    bootstraps unless ``bootstrap_last`` is off.
    """
    with torch.no_grad():
        next_obs = batch.obs[:, 1:]
        q_online = online.agent_values(batch.obs)[:, 1:]
        best = q_online.argmax(dim=-1, keepdim=True)
        q_target = target.agent_values(batch.obs)[:, 1:]
        chosen = q_target.gather(-1, best).squeeze(-1)
        boot = target.mix(chosen, next_obs)
        if not bootstrap_last:
            boot = boot.clone()
            boot[:, -1] = 0.0
        return batch.rewards + gamma * boot


def q_tot_taken(nets, batch: TDBatch) -> torch.Tensor:
    q = nets.agent_values(batch.obs)[:, :-1]
    taken = q.gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1)
    return nets.mix(taken, batch.obs[:, :-1])


def td_loss(online, target, batch: TDBatch, gamma: float, bootstrap_last: bool = True):
    y = td_targets(online, target, batch, gamma, bootstrap_last)
    q_tot = q_tot_taken(online, batch)
    return ((y - q_tot) ** 2).mean(), q_tot


class Learner:
    """Owns the online and target networks and their optimizer."""

    def __init__(self, nets: QNetworks, hyper: Hyper):
        self.online = nets
        self.target = copy.deepcopy(nets)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.hyper = hyper
        self.optimizer = make_optimizer(self.online.parameters(), lr=hyper.lr)
        self.updates = 0
        self.last_sync = 0

    def update(self, batch: TDBatch) -> tuple[float, float]:
        """One gradient step on the TD loss; returns (loss, mean Q_tot)."""
        h = self.hyper
        loss, q_tot = td_loss(self.online, self.target, batch, h.gamma, h.bootstrap_last)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite TD loss at update {self.updates}")
        self.optimizer.zero_grad()
        loss.backward()
        if h.grad_clip:
            nn.utils.clip_grad_norm_(self.online.parameters(), h.grad_clip)
        self.optimizer.step()
        self.updates += 1
        if self.updates - self.last_sync >= h.target_sync_period:
            self.sync_target()
        return float(loss.item()), float(q_tot.mean().item())

    def sync_target(self):
        self.target.load_state_dict(self.online.state_dict())
        self.last_sync = self.updates

    def state_dict(self) -> dict:
        return {
            "online": self.online.state_dict(),
            "target": self.target.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "updates": self.updates,
            "last_sync": self.last_sync,
        }

    def load_state_dict(self, state: dict):
        self.online.load_state_dict(state["online"])
        self.target.load_state_dict(state["target"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.updates = int(state["updates"])
        self.last_sync = int(state["last_sync"])


def learner_update(learner: Learner, batch: TDBatch) -> float:
    return learner.update(batch)[0]


def sync_target(learner: Learner) -> None:
    learner.sync_target()


def build_networks(obs_dim: int, n_agents: int, hidden_dim=128, rnn_dim=64, embed_dim=32,
                   shared=True, seed: int = 0) -> QNetworks:
    """Deterministically initialized networks (torch's global RNG is left untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        nets = QNetworks(obs_dim, n_agents, hidden_dim, rnn_dim, embed_dim, shared)
    return nets.to(DTYPE)
