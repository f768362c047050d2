"""Network pieces for the per-parameter agents and the monotone mixer.

Reverse-mode gradients and the Adam optimizer come from torch; the finite
difference checker here is independent of autograd and is what the tests use
to validate every composite.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

DTYPE = torch.float64
N_ACTIONS = 3

_ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": torch.relu,
    "elu": F.elu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
}


class Dense(nn.Module):
    """Affine layer followed by an elementwise activation."""

    def __init__(self, n_in: int, n_out: int, activation: str = "linear", bias: bool = True):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.linear = nn.Linear(n_in, n_out, bias=bias, dtype=DTYPE)
        self.activation = activation

    def forward(self, x):
        return _ACTIVATIONS[self.activation](self.linear(x))


def forward_dense(layer: Dense, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != layer.linear.in_features:
        raise ValueError(f"input width {x.shape[-1]} != layer width {layer.linear.in_features}")
    return layer(x)


def forward_recurrent(cell: nn.LSTMCell, x, hidden, cellstate):
    """One LSTM step; returns (output, hidden', cellstate') with output == hidden'."""
    h, c = cell(x, (hidden, cellstate))
    return h, h, c


def dueling_combine(value: torch.Tensor, advantage: torch.Tensor) -> torch.Tensor:
    """Q = V + A - mean(A) over the action axis (last)."""
    return value + advantage - advantage.mean(dim=-1, keepdim=True)


class HyperMixer(nn.Module):
    """State-conditioned two-layer mixer, monotone in every agent utility.

    Q_tot = |W2(s)|^T elu(|W1(s)| q + b1(s)) + b2(s)
    """

    def __init__(self, n_agents: int, state_dim: int, embed_dim: int = 32):
        super().__init__()
        self.n_agents = n_agents
        self.embed_dim = embed_dim
        self.hyper_w1 = nn.Linear(state_dim, n_agents * embed_dim, dtype=DTYPE)
        self.hyper_b1 = nn.Linear(state_dim, embed_dim, dtype=DTYPE)
        self.hyper_w2 = nn.Linear(state_dim, embed_dim, dtype=DTYPE)
        self.hyper_b2 = nn.Sequential(
            nn.Linear(state_dim, embed_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(embed_dim, 1, dtype=DTYPE),
        )

    def forward(self, q: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        """q: (..., n_agents), state: (..., state_dim) -> (...)"""
        lead = q.shape[:-1]
        w1 = self.hyper_w1(state).abs().view(*lead, self.n_agents, self.embed_dim)
        b1 = self.hyper_b1(state)
        w2 = self.hyper_w2(state).abs()
        b2 = self.hyper_b2(state).squeeze(-1)
        hidden = F.elu(torch.einsum("...n,...ne->...e", q, w1) + b1)
        return (hidden * w2).sum(-1) + b2


def mix(mixer: HyperMixer, q, state) -> torch.Tensor:
    return mixer(q, state)


class AgentNetwork(nn.Module):
    """Recurrent dueling Q-network over DVH histories, one output row per agent.

    In shared mode every agent runs the same trunk with a one-hot agent id
    appended to its input; the id part of the first dense layer is held as a
    separate bias-free block so the DVH projection is computed once.  In
    disjoint mode each agent has its own trunk.
    """

    def __init__(self, obs_dim: int, n_agents: int, hidden_dim: int = 128,
                 rnn_dim: int = 64, shared: bool = True):
        super().__init__()
        self.obs_dim, self.n_agents = obs_dim, n_agents
        self.hidden_dim, self.rnn_dim = hidden_dim, rnn_dim
        self.shared = shared
        n_trunks = 1 if shared else n_agents
        self.fc = nn.ModuleList(Dense(obs_dim, hidden_dim) for _ in range(n_trunks))
        self.agent_id = Dense(n_agents, hidden_dim, bias=False) if shared else None
        self.rnn = nn.ModuleList(nn.LSTMCell(hidden_dim, rnn_dim, dtype=DTYPE) for _ in range(n_trunks))
        self.value = nn.ModuleList(Dense(rnn_dim, 1) for _ in range(n_trunks))
        self.advantage = nn.ModuleList(Dense(rnn_dim, N_ACTIONS) for _ in range(n_trunks))

    def initial_state(self, batch: int = 1):
        z = torch.zeros(batch, self.n_agents, self.rnn_dim, dtype=DTYPE)
        return z, z.clone()

    def _embed(self, obs: torch.Tensor) -> torch.Tensor:
        """obs (B, obs_dim) -> trunk input (B, n_agents, hidden)."""
        if self.shared:
            ids = self.agent_id.linear.weight.T  # (n_agents, hidden): one-hot rows times W
            return torch.relu(self.fc[0](obs)[:, None, :] + ids[None])
        return torch.stack([torch.relu(fc(obs)) for fc in self.fc], dim=1)

    def step(self, obs: torch.Tensor, state):
        """One time step for a batch: returns (V (B,N,1), A (B,N,3), new state)."""
        h, c = state
        x = self._embed(obs)
        B = obs.shape[0]
        if self.shared:
            h2, c2 = self.rnn[0](x.reshape(B * self.n_agents, -1),
                                 (h.reshape(B * self.n_agents, -1), c.reshape(B * self.n_agents, -1)))
            h2 = h2.view(B, self.n_agents, -1)
            c2 = c2.view(B, self.n_agents, -1)
            v, a = self.value[0](h2), self.advantage[0](h2)
        else:
            outs = [self.rnn[i](x[:, i], (h[:, i], c[:, i])) for i in range(self.n_agents)]
            h2 = torch.stack([o[0] for o in outs], 1)
            c2 = torch.stack([o[1] for o in outs], 1)
            v = torch.stack([self.value[i](h2[:, i]) for i in range(self.n_agents)], 1)
            a = torch.stack([self.advantage[i](h2[:, i]) for i in range(self.n_agents)], 1)
        return v, a, (h2, c2)

    def forward(self, obs_seq: torch.Tensor, state=None) -> torch.Tensor:
        """obs_seq (B, T, obs_dim) -> Q (B, T, n_agents, 3), unrolled from ``state``."""
        B, T = obs_seq.shape[:2]
        state = state if state is not None else self.initial_state(B)
        qs = []
        for t in range(T):
            v, a, state = self.step(obs_seq[:, t], state)
            qs.append(dueling_combine(v, a))
        return torch.stack(qs, 1)

    def streams(self, obs_seq: torch.Tensor):
        """Value and advantage streams at the last step of each sequence."""
        B, T = obs_seq.shape[:2]
        state = self.initial_state(B)
        for t in range(T):
            v, a, state = self.step(obs_seq[:, t], state)
        return v, a


# -- gradient checking --------------------------------------------------------------

def grad_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Largest per-tensor relative error between autograd and central differences.

    ``fn`` must recompute a scalar from the current values of ``params``.  For
    large tensors, ``max_entries`` limits the check to a random subset.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and idx.size > max_entries:
                idx = rng.choice(idx, size=max_entries, replace=False)
            num = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                num[k] = (up - down) / (2 * h)
            ana = a.reshape(-1)[torch.as_tensor(idx)].numpy()
            if not np.all(np.isfinite(ana)):
                raise FloatingPointError("non-finite analytic gradient")
            scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
            worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst


def make_optimizer(params, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_state(module: nn.Module, state: dict[str, np.ndarray]) -> nn.Module:
    module.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in state.items()})
    return module
