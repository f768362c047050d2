"""Greedy policy evaluation against the epsilon = 1 random baseline."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .phantom import Case
from .rollout import EnvSpec, EpisodeRecord, PolicySnapshot, derive_seed, load_records, run_episode, save_records

GREEDY, RANDOM = "greedy", "random"


def evaluate_policy(snapshot: PolicySnapshot, env: EnvSpec, cases: Sequence[Case], count: int | None = None,
                    seed: int = 0) -> dict[str, list[EpisodeRecord]]:
    """``count`` episodes per policy, cycling over ``cases``.

    Episode i of both policies runs on the same case, so the two samples are
    paired by case.  Greedy episodes never consult their generator, which makes
    them a deterministic function of the checkpoint.
    """
    if not cases:
        raise ValueError("evaluation needs at least one case")
    count = len(cases) if count is None else count
    policy = snapshot.build()
    out = {GREEDY: [], RANDOM: []}
    for i in range(count):
        case = cases[i % len(cases)]
        for slot, (name, eps) in enumerate(((GREEDY, 0.0), (RANDOM, 1.0))):
            out[name].append(run_episode(case, policy, env, eps, derive_seed(seed, i, slot), i, slot))
    return out


def save_evaluation(results: dict[str, list[EpisodeRecord]], out_dir: str | Path):
    for name, recs in results.items():
        save_records(recs, Path(out_dir) / name / "records")


def load_evaluation(out_dir: str | Path, cases: Sequence[Case]) -> dict[str, list[EpisodeRecord]]:
    by_id = {c.id: c for c in cases}
    return {name: load_records(Path(out_dir) / name / "records", by_id) for name in (GREEDY, RANDOM)}
