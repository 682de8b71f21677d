"""JSON / JSON Lines readers and writers for MDPs, features and trajectories."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

from .mdp import DimensionError, FeatureSet, TabularMdp, Trajectory


class FormatError(ValueError):
    """Malformed input file; the message carries the file, line and field."""


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=False) + "\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise FormatError(f"{where}: expected integer, got {value!r}")
    return value


def _real(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{where}: expected number, got {value!r}")
    if not math.isfinite(value):
        raise FormatError(f"{where}: non-finite value {value!r}")
    return float(value)


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}: missing field {key!r}")
    return obj[key]


def save_mdp(mdp: TabularMdp, path) -> None:
    write_json(path, mdp.to_dict())


def mdp_from_dict(data: dict, where: str = "<mdp>") -> TabularMdp:
    n = _int(_field(data, "n_states", where), f"{where}: n_states")
    horizon = _int(_field(data, "horizon", where), f"{where}: horizon")
    terminals = [_int(t, f"{where}: terminals[{i}]") for i, t in enumerate(data.get("terminals", []))]
    actions_raw = _field(data, "actions", where)
    if not isinstance(actions_raw, list):
        raise FormatError(f"{where}: actions must be a list")
    actions = [
        [_int(a, f"{where}: actions[{s}][{k}]") for k, a in enumerate(acts)]
        for s, acts in enumerate(actions_raw)
    ]
    transitions = {}
    for i, row in enumerate(_field(data, "transitions", where)):
        loc = f"{where}: transitions[{i}]"
        s = _int(_field(row, "s", loc), f"{loc}.s")
        a = _int(_field(row, "a", loc), f"{loc}.a")
        to = []
        for j, pair in enumerate(_field(row, "to", loc)):
            if not isinstance(pair, list) or len(pair) != 2:
                raise FormatError(f"{loc}.to[{j}]: expected [next_state, probability]")
            to.append((_int(pair[0], f"{loc}.to[{j}][0]"), _real(pair[1], f"{loc}.to[{j}][1] (probability)")))
        transitions[(s, a)] = to
    return TabularMdp.build(n, actions, transitions, horizon, terminals)


def load_mdp(path) -> TabularMdp:
    return mdp_from_dict(_read_json(path), str(path))


def save_features(features: FeatureSet, path) -> None:
    write_json(path, features.to_dict())


def load_features(path, mdp: TabularMdp | None = None) -> FeatureSet:
    data = _read_json(path)
    where = str(path)
    rf = {}
    for key, vec in _field(data, "reward_features", where).items():
        try:
            s, a = (int(p) for p in key.split(","))
        except ValueError:
            raise FormatError(f"{where}: reward_features key {key!r} is not 's,a'") from None
        rf[(s, a)] = [_real(x, f"{where}: reward_features[{key!r}][{i}]") for i, x in enumerate(vec)]
    sf = {}
    for key, vec in _field(data, "state_features", where).items():
        try:
            s = int(key)
        except ValueError:
            raise FormatError(f"{where}: state_features key {key!r} is not an integer") from None
        sf[s] = [_real(x, f"{where}: state_features[{key!r}][{i}]") for i, x in enumerate(vec)]
    features = FeatureSet.build(rf, sf)
    # force dimension checks
    features.d_reward, features.d_mu
    if mdp is not None:
        check_features(mdp, features)
    return features


def check_features(mdp: TabularMdp, features: FeatureSet) -> None:
    features.reward_tensor(mdp)
    features.state_matrix(mdp.n_states)


def trajectory_to_json(traj: Trajectory) -> str:
    return json.dumps({"steps": [[s, a] for s, a in traj.steps]})


def save_trajectories(trajs: Iterable[Trajectory], path) -> None:
    atomic_write_text(path, "".join(trajectory_to_json(t) + "\n" for t in trajs))


def load_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON ({exc.msg})") from exc
            steps = _field(obj, "steps", where)
            if not isinstance(steps, list):
                raise FormatError(f"{where}: steps must be a list")
            parsed = []
            for i, st in enumerate(steps):
                if not isinstance(st, list) or len(st) != 2:
                    raise FormatError(f"{where}: steps[{i}] must be [state, action]")
                parsed.append((_int(st[0], f"{where}: steps[{i}][0]"), _int(st[1], f"{where}: steps[{i}][1]")))
            out.append(Trajectory.of(parsed))
    return out


__all__ = [
    "DimensionError",
    "FormatError",
    "atomic_write_text",
    "check_features",
    "load_features",
    "load_mdp",
    "load_trajectories",
    "mdp_from_dict",
    "save_features",
    "save_mdp",
    "save_trajectories",
    "write_json",
]
