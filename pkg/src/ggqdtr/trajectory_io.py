"""Delimited-text trajectory files.

Layout: one header row, then one row per decision point plus a terminal row
per subject.  Columns are ``id, t, <state components...>, action, reward,
absorbing``.  The terminal row carries the final state with the no-action
sentinel (-1) and zero reward; an absorbing row has zeroed component fields
and absorbing=1.  Rewards sit on the row of the decision they follow, i.e.
row t holds s_t, a_t and r_{t+1}.

Floats are written with repr so a write/read cycle is bit-exact.  A JSON
sidecar (``<path>.schema.json``) records component names and kinds so
non-default schemas round-trip; without it, header names are used and every
component is treated as real.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .mdp import (
    ABSORBING,
    ACTION_NONE,
    Dataset,
    ParseError,
    Schema,
    State,
    Trajectory,
    Transition,
)


def _format_value(x: float, kind: str) -> str:
    if kind == "int":
        return str(int(x))
    return repr(float(x))


def write_dataset(data: Dataset, path: str | Path) -> None:
    """Write a dataset and its schema sidecar."""
    path = Path(path)
    names = data.schema.names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "t", *names, "action", "reward", "absorbing"])
        for traj in data:
            for tr in traj:
                writer.writerow(
                    _state_row(traj.subject_id, tr.t, tr.state, data.schema)
                    + [str(tr.action), repr(float(tr.reward))]
                    + ["1" if tr.state.is_absorbing else "0"]
                )
            # terminal row: the final state, no action, no reward
            if len(traj.transitions) > 0:
                last = traj.transitions[-1]
                writer.writerow(
                    _state_row(traj.subject_id, last.t + 1, last.next_state, data.schema)
                    + [str(ACTION_NONE), repr(0.0)]
                    + ["1" if last.next_state.is_absorbing else "0"]
                )
    sidecar = {"components": [list(p) for p in zip(names, data.schema.kinds)],
               "horizon": data.horizon}
    with open(str(path) + ".schema.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def _state_row(subject: str, t: int, state: State, schema: Schema) -> list[str]:
    if state.is_absorbing:
        comps = ["0"] * schema.arity
    else:
        comps = [_format_value(v, k) for v, k in zip(state.components, schema.kinds)]
    return [subject, str(t), *comps]


def read_dataset(path: str | Path, burn_in: int = 0) -> Dataset:
    """Read a trajectory file written by write_dataset (or compatible).

    Args:
        path: the delimited text file; header row mandatory.
        burn_in: number of leading decision points to drop from every
            trajectory (time indices are shifted back so the first retained
            point becomes t = 0).
    """
    path = Path(path)
    if burn_in < 0:
        raise ParseError("burn_in must be nonnegative")
    sidecar_path = Path(str(path) + ".schema.json")
    sidecar = None
    if sidecar_path.exists():
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row is mandatory") from None
        if len(header) < 5 or header[0] != "id" or header[1] != "t":
            raise ParseError(f"{path}: malformed header {header!r}")
        if header[-3:] != ["action", "reward", "absorbing"]:
            raise ParseError(f"{path}: trailing columns must be action,reward,absorbing")
        names = tuple(header[2:-3])
        if sidecar is not None:
            side_names = tuple(p[0] for p in sidecar["components"])
            if side_names != names:
                raise ParseError(
                    f"{path}: sidecar names {side_names} disagree with header {names}"
                )
            kinds = tuple(p[1] for p in sidecar["components"])
        else:
            kinds = tuple("real" for _ in names)
        schema = Schema(names, kinds)

        rows_by_subject: dict[str, list[tuple]] = {}
        order: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields")
            subject = row[0]
            try:
                t = int(row[1])
                action = int(row[-3])
                reward = float(row[-2])
                absorbing = int(row[-1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: subject {subject}: {exc}") from None
            if absorbing not in (0, 1):
                raise ParseError(f"{path}:{lineno}: subject {subject}: absorbing flag {absorbing}")
            if action < ACTION_NONE:
                raise ParseError(f"{path}:{lineno}: subject {subject}: unknown action code {action}")
            if absorbing:
                state = ABSORBING
            else:
                try:
                    state = State(tuple(float(v) for v in row[2:-3]))
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: subject {subject}: {exc}") from None
            if subject not in rows_by_subject:
                rows_by_subject[subject] = []
                order.append(subject)
            rows_by_subject[subject].append((t, state, action, reward))

    trajectories = []
    horizon = 0
    for subject in order:
        rows = rows_by_subject[subject]
        seen = [r[0] for r in rows]
        if seen != list(range(len(rows))):
            raise ParseError(f"subject {subject}: time indices {seen[:6]}... are not 0..{len(rows)-1}")
        if len(rows) < 2:
            raise ParseError(f"subject {subject}: needs at least one decision and a terminal row")
        terminal = rows[-1]
        if terminal[2] != ACTION_NONE:
            raise ParseError(f"subject {subject}: terminal row must carry action {ACTION_NONE}")
        transitions = []
        for (t, state, action, reward), (_, nxt, _, _) in zip(rows[:-1], rows[1:]):
            if t < burn_in:
                continue
            try:
                transitions.append(
                    Transition(state=state, action=action, reward=reward,
                               next_state=nxt, t=t - burn_in)
                )
            except ValueError as exc:
                raise ParseError(f"subject {subject}, t={t}: {exc}") from None
        if not transitions:
            # burn-in consumed the whole trajectory; keep the subject as a
            # degenerate absorbed record when it ended absorbed, else refuse
            if terminal[1].is_absorbing:
                transitions.append(
                    Transition(state=ABSORBING, action=ACTION_NONE, reward=0.0,
                               next_state=ABSORBING, t=0)
                )
            else:
                raise ParseError(
                    f"subject {subject}: burn_in={burn_in} drops every decision "
                    "of a live trajectory"
                )
        try:
            traj = Trajectory(subject_id=subject, transitions=tuple(transitions))
        except ValueError as exc:
            raise ParseError(str(exc)) from None
        trajectories.append(traj)
        horizon = max(horizon, len(transitions))

    if sidecar is not None and "horizon" in sidecar and burn_in == 0:
        declared = int(sidecar["horizon"])
        if declared < horizon:
            raise ParseError(f"{path}: sidecar horizon {declared} below observed {horizon}")
        horizon = declared
    return Dataset(trajectories=tuple(trajectories), schema=schema, horizon=horizon)
