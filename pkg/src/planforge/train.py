"""Collect-then-learn loop with telemetry, checkpoints and bitwise resume.

Each round runs one synchronous collection over the worker slots, appends the
new episodes to the bank, and then performs ``updates_per_round`` learner
updates.  Everything random is derived from the run seed: worker episodes
from (seed, round, slot), batch sampling from one generator whose state is
checkpointed.
"""
from __future__ import annotations

import csv
import io
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from filelock import FileLock, Timeout

from .config import RunConfig, config_from_dict
from .marl import Learner, build_networks, epsilon_at
from .phantom import TEMPLATES, Case, generate_case, load_case, save_case
from .plan_eval import N_BINS
from .rollout import (DataBank, EnvSpec, PolicySnapshot, WorkerPool, collect_round, load_records,
                      sample_batch, save_records)

log = logging.getLogger(__name__)

TELEMETRY_COLUMNS = ("step", "episode", "loss", "mean_q_tot", "epsilon",
                     "mean_return", "mean_best_relative", "n_records")


class LockedError(RuntimeError):
    """Another command is already using this output directory."""


def lock_dir(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise LockedError(f"{out_dir} is in use by another process") from None
    return lock


# -- cases ---------------------------------------------------------------------------

def make_cases(cfg: RunConfig, split: str) -> list[Case]:
    p = cfg.phantom
    return [generate_case(s, cfg.grid(), p.template, cfg.beams(), p.prescription_gy)
            for s in cfg.case_seeds(split)]


def write_cases(cases: Sequence[Case], directory: Path) -> list[Path]:
    return [save_case(c, directory) for c in cases]


def read_cases(directory: Path) -> list[Case]:
    paths = sorted(p for p in Path(directory).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no case files in {directory}")
    return [load_case(p) for p in paths]


def cases_for(cfg: RunConfig, split: str) -> list[Case]:
    """Cases from ``cases_dir/<split>`` when configured, otherwise generated in memory."""
    if cfg.cases_dir:
        return read_cases(Path(cfg.cases_dir) / split)
    return make_cases(cfg, split)


# -- training ------------------------------------------------------------------------

def build_learner(cfg: RunConfig, n_structures: int) -> Learner:
    reg = cfg.registry()
    n = cfg.network
    nets = build_networks(n_structures * N_BINS, reg.n_agents, n.hidden_dim, n.rnn_dim,
                          n.mixer_embed_dim, n.shared, seed=cfg.seed)
    return Learner(nets, cfg.hyper())


@dataclass
class RoundStats:
    episode: int
    step: int
    loss: float
    mean_q_tot: float
    epsilon: float
    mean_return: float
    mean_best_relative: float
    n_records: int

    def row(self) -> list[str]:
        return [str(self.step), str(self.episode), repr(self.loss), repr(self.mean_q_tot),
                repr(self.epsilon), repr(self.mean_return), repr(self.mean_best_relative),
                str(self.n_records)]


class Trainer:
    """Owns the learner, the bank and the output directory layout.

    out_dir/
      config.json       resolved configuration
      telemetry.csv     one row per collection round
      records/          one JSON file per collected episode
      checkpoints/      round-stamped checkpoints plus latest.pt
      policy.pt         final networks
    """

    def __init__(self, cfg: RunConfig, out_dir: str | Path, cases: Sequence[Case] | None = None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.cases = list(cases) if cases is not None else cases_for(cfg, "train")
        self.env = EnvSpec(cfg.registry(), cfg.solver_options(), cfg.train.episode_length)
        self.learner = build_learner(cfg, len(self.cases[0].structures))
        self.bank = DataBank(cfg.train.bank_capacity)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A4D]))
        self.next_round = 0

    # paths
    @property
    def telemetry_path(self) -> Path:
        return self.out / "telemetry.csv"

    @property
    def records_dir(self) -> Path:
        return self.out / "records"

    @property
    def ckpt_dir(self) -> Path:
        return self.out / "checkpoints"

    def checkpoint_state(self) -> dict:
        return {
            "learner": self.learner.state_dict(),
            "rng": self.rng.bit_generator.state,
            "next_round": self.next_round,
            "config": self.cfg.to_dict(),
        }

    def save_checkpoint(self) -> Path:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = self.ckpt_dir / f"round{self.next_round:06d}.pt"
        tmp = path.with_suffix(".tmp")
        torch.save(self.checkpoint_state(), tmp)
        tmp.replace(path)
        shutil.copyfile(path, self.ckpt_dir / "latest.pt")
        return path

    def resume(self, checkpoint: str | Path):
        """Restore learner, sampler and bank as they stood when ``checkpoint`` was written."""
        state = torch.load(checkpoint, weights_only=False)
        self.learner.load_state_dict(state["learner"])
        self.rng.bit_generator.state = state["rng"]
        self.next_round = int(state["next_round"])
        by_id = {c.id: c for c in self.cases}
        self.bank = DataBank(self.cfg.train.bank_capacity)
        self.bank.extend(load_records(self.records_dir, by_id, before_episode=self.next_round))
        for p in self.records_dir.glob("ep*-w*.json"):
            if int(p.name[2:8]) >= self.next_round:
                p.unlink()
        if self.telemetry_path.exists():
            rows = list(csv.reader(io.StringIO(self.telemetry_path.read_text())))
            keep = [rows[0]] + [r for r in rows[1:] if int(r[1]) < self.next_round]
            self._write_rows(keep, mode="w")

    def _write_rows(self, rows, mode="a"):
        with open(self.telemetry_path, mode, newline="") as fh:
            csv.writer(fh).writerows(rows)

    def run_round(self, pool: WorkerPool, episode: int) -> RoundStats:
        h = self.learner.hyper
        eps = epsilon_at(episode, h.eps_initial, h.eps_decay, h.eps_period)
        snapshot = PolicySnapshot.of(self.learner.online.agents)
        records = collect_round(pool, self.cases, snapshot, self.env, episode, eps, self.cfg.seed)
        save_records(records, self.records_dir)
        self.bank.extend(records)

        losses, qs = [], []
        if len(self.bank) >= h.batch_episodes:
            for _ in range(h.updates_per_round):
                batch = sample_batch(self.bank, h.batch_episodes, self.rng)
                loss, q = self.learner.update(batch)
                losses.append(loss)
                qs.append(q)
        nan = float("nan")
        return RoundStats(
            episode=episode,
            step=self.learner.updates,
            loss=float(np.mean(losses)) if losses else nan,
            mean_q_tot=float(np.mean(qs)) if qs else nan,
            epsilon=eps,
            mean_return=float(np.mean([r.episode_return for r in records])) if records else nan,
            mean_best_relative=float(np.mean([r.best_relative for r in records])) if records else nan,
            n_records=len(records),
        )

    def train(self, episodes: int | None = None, pool: WorkerPool | None = None,
              stop_after: int | None = None) -> Path:
        """Run rounds ``next_round .. episodes-1``; returns the final policy path.

        ``stop_after`` ends the call early after that many rounds (used to
        simulate an interruption).  A non-finite loss raises NumericalError
        and leaves the newest checkpoint untouched.
        """
        t = self.cfg.train
        episodes = t.episodes if episodes is None else episodes
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(self.cfg.to_json())
        if not self.telemetry_path.exists():
            self._write_rows([TELEMETRY_COLUMNS], mode="w")
        own_pool = pool is None
        pool = pool or WorkerPool(t.workers, t.processes)
        done = 0
        try:
            while self.next_round < episodes:
                if stop_after is not None and done >= stop_after:
                    return self.out / "policy.pt"
                stats = self.run_round(pool, self.next_round)
                self.next_round += 1
                done += 1
                self._write_rows([stats.row()])
                log.info("round %d eps %.3f loss %s best %.3f", stats.episode, stats.epsilon,
                         f"{stats.loss:.4g}", stats.mean_best_relative)
                if self.next_round % t.checkpoint_every == 0:
                    self.save_checkpoint()
        finally:
            if own_pool:
                pool.close()
        self.save_checkpoint()
        path = self.out / "policy.pt"
        torch.save(self.checkpoint_state(), path)
        return path


def read_telemetry(path: str | Path) -> dict[str, np.ndarray]:
    rows = list(csv.DictReader(open(path, newline="")))
    return {c: np.array([float(r[c]) for r in rows]) for c in TELEMETRY_COLUMNS}


def load_policy(path: str | Path, cfg: RunConfig | None = None):
    """Rebuild the online networks and the configuration stored in a checkpoint."""
    state = torch.load(path, weights_only=False)
    cfg = cfg or config_from_dict(state["config"])
    learner = build_learner(cfg, len(TEMPLATES[cfg.phantom.template]))
    learner.load_state_dict(state["learner"])
    return learner.online, cfg
