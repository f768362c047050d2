"""Data workers: run planning episodes against the optimizer and keep the bank.

A collection round launches one episode per worker slot, waits for all of
them (the barrier) and only then hands the records back.  Records depend only
on (case, policy snapshot, epsilon, seed), never on how many OS processes
executed the slots.
"""
from __future__ import annotations

import json
import logging
import multiprocessing
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .fmo import SolverOptions, step_environment
from .marl import ACTION_VALUES, TDBatch, select_actions
from .neural import AgentNetwork, dueling_combine, load_numpy_state, state_to_numpy
from .phantom import Case, dose as forward_dose
from .plan_eval import compute_dvh, evaluate_dose, reward
from .tpp import Registry, apply_actions

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    registry: Registry
    solver: SolverOptions = SolverOptions()
    episode_length: int = 10

    def __post_init__(self):
        if self.episode_length < 1:
            raise ValueError("episode length must be >= 1")


class AgentPolicy:
    """Decentralized execution: per-agent Q-values from the recurrent agents only."""

    def __init__(self, agents: AgentNetwork):
        self.agents = agents

    def initial_state(self):
        return self.agents.initial_state(1)

    def q(self, obs: np.ndarray, state):
        with torch.no_grad():
            v, a, state = self.agents.step(torch.as_tensor(obs, dtype=torch.float64)[None], state)
            return dueling_combine(v, a)[0].numpy(), state


@dataclass(frozen=True)
class PolicySnapshot:
    """Picklable, immutable copy of the agent networks handed to workers."""
    arch: dict
    state: dict = field(repr=False)

    @classmethod
    def of(cls, agents: AgentNetwork) -> "PolicySnapshot":
        arch = dict(obs_dim=agents.obs_dim, n_agents=agents.n_agents, hidden_dim=agents.hidden_dim,
                    rnn_dim=agents.rnn_dim, shared=agents.shared)
        return cls(arch, state_to_numpy(agents))

    def build(self) -> AgentPolicy:
        agents = AgentNetwork(**self.arch)
        load_numpy_state(agents, self.state)
        agents.eval()
        return AgentPolicy(agents)


@dataclass(eq=False)
class EpisodeRecord:
    case_id: str
    seed: int
    episode_index: int
    worker_index: int
    epsilon: float
    dvh: np.ndarray            # (T+1, n_structures, bins)
    x: np.ndarray              # (T+1, n_agents) tuner coordinates
    values: np.ndarray         # (T+1, n_params) parameter values
    actions: np.ndarray        # (T, n_agents) in {-1, 0, 1}
    rewards: np.ndarray        # (T,)
    scores: np.ndarray         # (T+1,) plan score per state
    metric_values: np.ndarray  # (T+1, n_metrics)
    metric_scores: np.ndarray  # (T+1, n_metrics)
    fluence: np.ndarray        # (T+1, n_beamlets)
    max_total: float
    metric_labels: tuple = ()

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    @property
    def relative_scores(self) -> np.ndarray:
        return self.scores / self.max_total

    @property
    def best_relative(self) -> float:
        return float(self.relative_scores.max())

    def key(self) -> tuple:
        """Hashable identity of the full content, for multiset comparisons."""
        return (self.case_id, self.seed, self.episode_index, self.worker_index,
                self.actions.tobytes(), self.rewards.tobytes(), self.fluence.tobytes())

    def to_json(self) -> str:
        # DVHs are not stored: they are recomputed from the fluences on load.
        return json.dumps({
            "case_id": self.case_id,
            "seed": self.seed,
            "episode_index": self.episode_index,
            "worker_index": self.worker_index,
            "epsilon": self.epsilon,
            "x": self.x.tolist(),
            "values": self.values.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "scores": self.scores.tolist(),
            "metric_labels": list(self.metric_labels),
            "metric_values": self.metric_values.tolist(),
            "metric_scores": self.metric_scores.tolist(),
            "fluence": self.fluence.tolist(),
            "max_total": self.max_total,
            "episode_return": self.episode_return,
            "best_relative": self.best_relative,
        })

    @classmethod
    def from_json(cls, text: str, case: Case | None = None) -> "EpisodeRecord":
        doc = json.loads(text)
        fluence = np.array(doc["fluence"], dtype=np.float64)
        if case is not None:
            dvh = np.stack([compute_dvh(forward_dose(case.influence, f), case.structures,
                                        case.prescription_gy) for f in fluence])
        else:
            dvh = np.zeros((len(fluence), 0, 0))
        return cls(
            case_id=doc["case_id"], seed=doc["seed"], episode_index=doc["episode_index"],
            worker_index=doc["worker_index"], epsilon=doc["epsilon"], dvh=dvh,
            x=np.array(doc["x"], dtype=np.int64), values=np.array(doc["values"]),
            actions=np.array(doc["actions"], dtype=np.int64).reshape(len(doc["rewards"]), -1),
            rewards=np.array(doc["rewards"]), scores=np.array(doc["scores"]),
            metric_values=np.array(doc["metric_values"]),
            metric_scores=np.array(doc["metric_scores"]),
            fluence=fluence, max_total=doc["max_total"],
            metric_labels=tuple(doc["metric_labels"]),
        )


def run_episode(case: Case, policy, env: EnvSpec, epsilon: float, seed: int,
                episode_index: int = 0, worker_index: int = 0) -> EpisodeRecord:
    """Tune parameters for T steps starting from the bound midpoints and a zero fluence.

    The initial optimization s_1 earns no reward; each of the T joint actions
    is followed by one warm-started optimization and one reward.
    """
    reg = env.registry
    rng = np.random.default_rng(seed)
    x = np.zeros(reg.n_agents, dtype=np.int64)
    values = reg.values(x)
    state = step_environment(case, reg.specs, values, None, env.solver, 0)
    breakdown = evaluate_dose(state.dose, case)

    xs, vals, dvhs, fls = [x], [values], [state.dvh], [state.fluence]
    bds = [breakdown]
    actions, rewards = [], []
    hidden = policy.initial_state()
    for t in range(1, env.episode_length + 1):
        q, hidden = policy.q(state.dvh.ravel(), hidden)
        a = ACTION_VALUES[select_actions(q, epsilon, rng)]
        x = apply_actions(x, a, reg.b)
        values = reg.values(x)
        state = step_environment(case, reg.specs, values, state.fluence, env.solver, t)
        breakdown = evaluate_dose(state.dose, case)
        rewards.append(reward(breakdown.total, breakdown.max_total))
        actions.append(a)
        xs.append(x)
        vals.append(values)
        dvhs.append(state.dvh)
        fls.append(state.fluence)
        bds.append(breakdown)

    return EpisodeRecord(
        case_id=case.id, seed=int(seed), episode_index=episode_index, worker_index=worker_index,
        epsilon=float(epsilon), dvh=np.stack(dvhs), x=np.stack(xs), values=np.stack(vals),
        actions=np.stack(actions), rewards=np.array(rewards),
        scores=np.array([b.total for b in bds]),
        metric_values=np.stack([b.values for b in bds]),
        metric_scores=np.stack([b.scores for b in bds]),
        fluence=np.stack(fls), max_total=bds[0].max_total, metric_labels=bds[0].labels,
    )


# -- worker pool ---------------------------------------------------------------------

def derive_seed(base_seed: int, episode_index: int, worker_index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, episode_index, worker_index])
    return int(ss.generate_state(1, np.uint64)[0])


def _init_worker():
    torch.set_num_threads(1)


def _run_task(task):
    case, snapshot, env, epsilon, seed, ep, w = task
    try:
        return run_episode(case, snapshot.build(), env, epsilon, seed, ep, w)
    except Exception as exc:  # noqa: BLE001 - any failure costs only this episode
        return f"{type(exc).__name__}: {exc}"


class WorkerPool:
    """``workers`` episode slots per round, executed on ``processes`` OS processes.

    With one process the slots run serially in the caller, which makes the
    pool easy to debug; results are identical either way.
    """

    def __init__(self, workers: int = 10, processes: int | None = None, start_method: str = "spawn"):
        if workers < 1:
            raise ValueError("need at least one worker")
        self.workers = workers
        self.processes = min(processes or workers, workers)
        self.start_method = start_method
        self._executor = self._start() if self.processes > 1 else None

    def _start(self) -> ProcessPoolExecutor:
        return ProcessPoolExecutor(
            max_workers=self.processes,
            mp_context=multiprocessing.get_context(self.start_method),
            initializer=_init_worker,
        )

    def map(self, fn, tasks: Sequence) -> list:
        if self.processes == 1:
            return [fn(t) for t in tasks]
        if self._executor is None:
            raise RuntimeError("pool is closed")
        futures = [self._executor.submit(fn, t) for t in tasks]
        out, broken = [], False
        for f in futures:
            try:
                out.append(f.result())
            except Exception as exc:  # a crashed worker fails only its own episode
                broken |= isinstance(exc, BrokenProcessPool)
                out.append(f"worker crashed: {exc!r}")
        if broken:  # start fresh processes for the next round
            self._executor.shutdown(wait=False, cancel_futures=True)
            self._executor = self._start()
        return out

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def collect_round(pool: WorkerPool, cases: Sequence[Case], snapshot: PolicySnapshot, env: EnvSpec,
                  episode_index: int, epsilon: float, base_seed: int) -> list[EpisodeRecord]:
    """Run one synchronous round; cases are assigned round-robin across rounds and slots."""
    tasks = []
    for w in range(pool.workers):
        case = cases[(episode_index * pool.workers + w) % len(cases)]
        seed = derive_seed(base_seed, episode_index, w)
        tasks.append((case, snapshot, env, epsilon, seed, episode_index, w))
    results = pool.map(_run_task, tasks)
    records = []
    for (case, *_rest), res in zip(tasks, results):
        if isinstance(res, EpisodeRecord):
            records.append(res)
        else:
            log.warning("episode on %s failed and is dropped: %s", case.id, res)
    return records


# -- data bank -------------------------------------------------------------------------

class DataBank:
    """Bounded FIFO of whole episodes."""

    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[EpisodeRecord] = deque(maxlen=capacity)

    def extend(self, records: Iterable[EpisodeRecord]):
        self._items.extend(records)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i) -> EpisodeRecord:
        return self._items[i]

    def __iter__(self):
        return iter(self._items)


def sample_batch(bank: DataBank, batch_size: int, rng: np.random.Generator) -> TDBatch:
    """Uniformly sample distinct whole episodes."""
    if len(bank) < batch_size:
        raise ValueError(f"bank holds {len(bank)} episodes, need {batch_size}")
    idx = rng.choice(len(bank), size=batch_size, replace=False)
    recs = [bank[i] for i in idx]
    return TDBatch.from_arrays(
        np.stack([r.dvh for r in recs]),
        np.stack([r.actions for r in recs]) + 1,
        np.stack([r.rewards for r in recs]),
    )


def save_records(records: Iterable[EpisodeRecord], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in records:
        p = directory / f"ep{r.episode_index:06d}-w{r.worker_index:03d}.json"
        p.write_text(r.to_json())
        paths.append(p)
    return paths


def load_records(directory: str | Path, cases: dict[str, Case] | None = None,
                 before_episode: int | None = None) -> list[EpisodeRecord]:
    out = []
    for p in sorted(Path(directory).glob("ep*-w*.json")):
        rec = EpisodeRecord.from_json(p.read_text(), None)
        if before_episode is not None and rec.episode_index >= before_episode:
            continue
        if cases is not None:
            rec = EpisodeRecord.from_json(p.read_text(), cases[rec.case_id])
        out.append(rec)
    return out
