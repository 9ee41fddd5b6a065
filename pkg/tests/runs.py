"""Helpers for end-to-end runs in tests: tiny TOML configs and file digests."""

import hashlib
from pathlib import Path

from rltta import cli

TINY = """\
out = "{out}"
seeds = {seeds}

[data]
image_size = 16
counts = {{ A = [{n}, {n}], B = [{n}, {n}] }}

[classifier]
epochs = 2
feature_dim = 16
conv_channels = [4, 8]

[agent]
kind = "{agent}"
episodes = {episodes}

[agent.ppo]
rollout_size = 32
minibatch = 16

[eval]
split = "{split}"
"""


def tiny_config(directory, out="run", seeds=(0,), n=30, agent="dqn", episodes=120, split="test",
                extra="") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.toml"
    path.write_text(TINY.format(out=(directory / out).as_posix(), seeds=list(seeds), n=n, agent=agent,
                                episodes=episodes, split=split) + extra)
    return path


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def full_pipeline(config, extra=()) -> None:
    for cmd in ("gen", "train", "train-agent", "eval", "ablate", "report"):
        code = run(cmd, "--config", config, *extra)
        assert code == 0, f"{cmd} exited {code}"


def digests(root, skip=("run_manifest.json",)) -> dict:
    root = Path(root)
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


# one line per acceptance criterion, printed in the terminal summary
RESULTS = []


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line
