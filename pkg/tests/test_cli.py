import json

import numpy as np

from conftest import TINY_CONFIG
from planforge.cli import main
from planforge.phantom import HNC_STRUCTURES, load_case
from planforge.plan_eval import dvh_edges, dvh_to_csv


def _tiny_overrides(tmp_path, **train):
    cfg = json.loads(TINY_CONFIG.read_text())
    cfg["train"].update({"episodes": 3, "workers": 2, "checkpoint_every": 2, "updates_per_round": 2,
                         "batch_episodes": 2})
    cfg["train"].update(train)
    cfg["phantom"].update({"n_train": 2, "n_test": 2})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_gen_writes_cases_and_is_reproducible(tmp_path):
    args = ["gen", "--config", str(TINY_CONFIG), "--seed", "7", "--train", "2", "--test", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*"))
    assert len([f for f in files if f.suffix == ".json"]) == 3
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_rejects_empty_training_set(tmp_path, capsys):
    assert main(["gen", "--config", str(TINY_CONFIG), "--train", "0", "--out", str(tmp_path)]) == 2
    assert "at least one" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"train": {"gama": 1}}')
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_train_eval_replay(tmp_path):
    cfg = _tiny_overrides(tmp_path)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    tel = (run / "telemetry.csv").read_text().splitlines()
    assert tel[0] == "step,episode,loss,mean_q_tot,epsilon,mean_return,mean_best_relative,n_records"
    assert len(tel) == 4
    assert (run / "report" / "training_curves.svg").exists()
    assert (run / "checkpoints" / "round000002.pt").exists()

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run / "policy.pt"), "--out", str(ev), "--count", "2"]) == 0
    for name in ("per_case.csv", "metrics.csv", "mean_dvh.csv", "mean_dvh.svg", "trajectories.csv",
                 "trajectories.svg", "summary.json", "episode_trace.svg"):
        assert (ev / name).exists(), name
    per_case = (ev / "per_case.csv").read_text()
    first = (ev / "per_case.csv").read_bytes()
    (ev / "per_case.csv").unlink()
    assert main(["replay", "--out", str(tmp_path)]) == 0
    assert (ev / "per_case.csv").read_bytes() == first
    assert "greedy" in per_case and "random" in per_case


def test_greedy_eval_is_deterministic(tmp_path):
    cfg = _tiny_overrides(tmp_path, episodes=1)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    outs = []
    for k in range(2):
        ev = tmp_path / f"ev{k}"
        assert main(["eval", "--checkpoint", str(run / "policy.pt"), "--out", str(ev), "--count", "2"]) == 0
        outs.append((ev / "per_case.csv").read_text())
    assert outs[0] == outs[1]


def test_resume_flag(tmp_path):
    cfg = _tiny_overrides(tmp_path, episodes=4)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(b), "--episodes", "2"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(b),
                 "--checkpoint", str(b / "checkpoints" / "round000002.pt")]) == 0
    assert (a / "telemetry.csv").read_text() == (b / "telemetry.csv").read_text()


def test_score_dvh(tmp_path, capsys):
    edges = dvh_edges(60.0)
    names = list(HNC_STRUCTURES) + ["BODY"]
    dvh = np.tile((edges <= 0).astype(float), (len(names), 1))
    p = tmp_path / "dvh.csv"
    p.write_text(dvh_to_csv(dvh, names, 60.0, [10.0] * len(names)))
    assert main(["score", "--dvh", str(p)]) == 0
    out = capsys.readouterr()
    assert out.out.splitlines()[0] == "metric,value,score,max_score,organ"
    assert "104.4" in out.err


def test_score_case_and_fluence(tmp_path, tiny_case):
    from planforge.phantom import save_case
    cp = save_case(tiny_case, tmp_path)
    fp = tmp_path / "f.csv"
    fp.write_text(",".join(["1.0"] * tiny_case.n_beamlets))
    out = tmp_path / "score.csv"
    assert main(["score", "--case", str(cp), "--fluence", str(fp), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 6
    assert load_case(cp).id == tiny_case.id


def test_malformed_dvh_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("structure,volume_cc,0,0.6\nCTV,1.0,1.0,abc\n")
    assert main(["score", "--dvh", str(p)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_numerical_failure_exits_3_and_keeps_checkpoint(tmp_path, monkeypatch):
    from planforge import marl
    cfg = _tiny_overrides(tmp_path, episodes=4, checkpoint_every=1)
    calls = {"n": 0}
    real = marl.Learner.update

    def flaky(self, batch):
        calls["n"] += 1
        if calls["n"] > 4:
            batch.rewards[:] = float("nan")
        return real(self, batch)

    monkeypatch.setattr(marl.Learner, "update", flaky)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 3
    ckpts = sorted(p.name for p in (run / "checkpoints").glob("round*.pt"))
    assert ckpts == ["round000001.pt", "round000002.pt"]
    assert not (run / "policy.pt").exists()


def test_output_dir_lock(tmp_path):
    from planforge.train import lock_dir
    with lock_dir(tmp_path):
        assert main(["gen", "--config", str(TINY_CONFIG), "--out", str(tmp_path)]) == 2
