"""Scenario data model, synthetic CSI generation, splits and file format.

A scenario is one indoor location: 12 reference points on a 3x4 grid with
60 cm spacing (configurable), each holding a stack of CSI amplitude
samples of shape 3 antennas x 30 subcarriers, labeled with the point's
(x, y) position in cm.

Real capture hardware is out of scope; scenarios come from a synthetic
channel: log-distance path loss from a random transmitter, shadowing from
random wall segments, frequency-selective Rician multipath per reference
point, per-antenna gain/phase variation, per-sample phase jitter plus
additive noise. Distinct seeds give distinct rooms, which is what makes
the scenarios behave as distinct tasks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT_CM_PER_NS = 29.9792458

__all__ = [
    "DataFormatError",
    "GridSpec",
    "ChannelConfig",
    "Sample",
    "Scenario",
    "TaskSplit",
    "TaskSet",
    "generate_scenario",
    "normalize",
    "split_task",
    "partition_tasks",
    "save_scenario",
    "load_scenario",
    "load_scenario_dir",
    "batch_from",
]


class DataFormatError(Exception):
    """A scenario file or sample violates the on-disk contract."""


@dataclass(frozen=True)
class GridSpec:
    rows: int = 3
    cols: int = 4
    spacing_cm: float = 60.0

    def positions(self) -> list:
        """Reference-point coordinates, row-major: (row*spacing, col*spacing)."""
        return [
            (r * self.spacing_cm, c * self.spacing_cm)
            for r in range(self.rows)
            for c in range(self.cols)
        ]


@dataclass(frozen=True)
class ChannelConfig:
    """Geometry plus channel parameters for the synthetic generator."""

    grid: GridSpec = field(default_factory=GridSpec)
    samples_per_rp: int = 40
    antennas: int = 3
    subcarriers: int = 30
    subcarrier_spacing_mhz: float = 0.625  # 20 MHz grouped down to 30 bins
    carrier_ghz: float = 5.2
    path_loss_exponent: float = 2.5
    reference_distance_cm: float = 30.0
    tx_margin_cm: float = 150.0
    wall_count: int = 3
    wall_attenuation_db: tuple = (2.0, 9.0)
    echo_paths: int = 6
    rician_k: float = 4.0
    antenna_gain_jitter: float = 0.15
    sample_phase_jitter: float = 0.25  # radians, per sample per path
    noise_std: float = 0.01  # additive, relative to the local envelope


@dataclass
class Sample:
    rp: int
    pos_cm: tuple
    amp: np.ndarray  # (antennas, subcarriers), non-negative

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.rp == other.rp
            and self.pos_cm == other.pos_cm
            and np.array_equal(self.amp, other.amp)
        )


@dataclass
class Scenario:
    id: str
    grid: GridSpec
    samples: list

    def __eq__(self, other):
        return (
            isinstance(other, Scenario)
            and self.id == other.id
            and self.grid == other.grid
            and self.samples == other.samples
        )

    def samples_by_rp(self) -> dict:
        groups: dict = {}
        for s in self.samples:
            groups.setdefault(s.rp, []).append(s)
        return groups


@dataclass
class TaskSplit:
    """k-shot support set plus disjoint query remainder for one scenario."""

    scenario_id: str
    support: list
    query: list
    shots: int
    seed: int


@dataclass
class TaskSet:
    """Scenario list with a disjoint train/test partition over indices."""

    scenarios: list
    train_indices: list
    test_indices: list
    seed: int

    def train_scenarios(self) -> list:
        return [self.scenarios[i] for i in self.train_indices]

    def test_scenarios(self) -> list:
        return [self.scenarios[i] for i in self.test_indices]


def _segment_crosses_line(p0, p1, anchor, direction) -> bool:
    """Does the segment p0-p1 cross the infinite line through anchor?"""
    nx, ny = -direction[1], direction[0]
    s0 = (p0[0] - anchor[0]) * nx + (p0[1] - anchor[1]) * ny
    s1 = (p1[0] - anchor[0]) * nx + (p1[1] - anchor[1]) * ny
    return (s0 > 0) != (s1 > 0)


def generate_scenario(
    seed: int, config: ChannelConfig = ChannelConfig(), scenario_id: str = None
) -> Scenario:
    """One synthetic location, deterministic per seed."""
    grid = config.grid
    if grid.rows * grid.cols < 2:
        raise ValueError(f"degenerate grid: rows*cols = {grid.rows * grid.cols} < 2")
    if grid.spacing_cm <= 0:
        raise ValueError(f"degenerate grid: spacing {grid.spacing_cm} cm")
    if config.samples_per_rp < 2:
        raise ValueError(f"samples_per_rp must be >= 2, got {config.samples_per_rp}")

    rng = np.random.default_rng(seed)
    positions = grid.positions()
    x_hi = (grid.rows - 1) * grid.spacing_cm
    y_hi = (grid.cols - 1) * grid.spacing_cm
    m = config.tx_margin_cm
    lo = (-m, -m)
    hi = (x_hi + m, y_hi + m)

    tx = (rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]))

    walls = []
    for _ in range(config.wall_count):
        anchor = (rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]))
        angle = rng.uniform(0.0, math.pi)
        att_db = rng.uniform(*config.wall_attenuation_db)
        walls.append((anchor, (math.cos(angle), math.sin(angle)), att_db))

    reflectors = [
        (rng.uniform(lo[0] - m, hi[0] + m), rng.uniform(lo[1] - m, hi[1] + m))
        for _ in range(config.echo_paths)
    ]
    reflect_loss = rng.uniform(0.3, 0.9, size=config.echo_paths)

    ant_gain = np.clip(
        1.0 + config.antenna_gain_jitter * rng.standard_normal(config.antennas),
        0.5,
        1.5,
    )

    freqs_mhz = np.arange(config.subcarriers) * config.subcarrier_spacing_mhz
    k_f = config.rician_k
    los_w = math.sqrt(k_f / (k_f + 1.0))
    nlos_w = math.sqrt(1.0 / (k_f + 1.0))
    d0 = config.reference_distance_cm
    ple = config.path_loss_exponent
    carrier_mhz = config.carrier_ghz * 1e3

    samples = []
    for rp_index, pos in enumerate(positions):
        d_direct = max(math.dist(tx, pos), d0)
        envelope = (d0 / d_direct) ** (ple / 2.0)
        for anchor, direction, att_db in walls:
            if _segment_crosses_line(tx, pos, anchor, direction):
                envelope *= 10.0 ** (-att_db / 20.0)

        # path delays in ns; echo gains are relative to the direct path, so
        # multipath grows with distance and the spectrum shape carries range
        # information that survives per-sample normalization
        delays = [d_direct / SPEED_OF_LIGHT_CM_PER_NS]
        gains = [los_w]
        for refl, rl in zip(reflectors, reflect_loss):
            length = math.dist(tx, refl) + math.dist(refl, pos)
            delays.append(length / SPEED_OF_LIGHT_CM_PER_NS)
            gains.append(nlos_w * rl * (d_direct / length) ** (ple / 2.0))
        delays = np.asarray(delays)  # (P,)
        gains = np.asarray(gains)  # (P,)

        # carrier phase per path plus an independent per-antenna offset
        base_phase = 2.0 * math.pi * ((carrier_mhz * delays * 1e-3) % 1.0)
        ant_phase = rng.uniform(0.0, 2.0 * math.pi, size=(len(delays), config.antennas))
        # (P, A, S) frequency sweep phases
        sweep = 2.0 * math.pi * delays[:, None] * freqs_mhz[None, :] * 1e-3
        static = base_phase[:, None, None] + ant_phase[:, :, None] - sweep[:, None, :]

        jitter = config.sample_phase_jitter * rng.standard_normal(
            size=(config.samples_per_rp, len(delays))
        )
        phases = static[None, :, :, :] + jitter[:, :, None, None]
        field_sum = (gains[None, :, None, None] * np.exp(1j * phases)).sum(axis=1)
        amps = envelope * ant_gain[None, :, None] * np.abs(field_sum)
        amps = amps + config.noise_std * envelope * rng.standard_normal(amps.shape)
        amps = np.maximum(amps, 0.0)

        for t in range(config.samples_per_rp):
            samples.append(Sample(rp=rp_index, pos_cm=pos, amp=amps[t]))

    return Scenario(id=scenario_id or f"scenario_{seed}", grid=grid, samples=samples)


def normalize(amp: np.ndarray) -> np.ndarray:
    """Scale a sample by its own maximum so the result peaks at exactly 1."""
    arr = np.asarray(amp, dtype=np.float64)
    peak = arr.max() if arr.size else 0.0
    if not peak > 0.0:
        raise DataFormatError("cannot normalize: sample has no strictly positive entry")
    return arr / peak


def split_task(scenario: Scenario, k: int, seed: int) -> TaskSplit:
    """Uniform k-per-reference-point support, remainder query; seeded."""
    if k < 0:
        raise ValueError(f"shot count must be >= 0, got {k}")
    rng = np.random.default_rng(seed)
    support: list = []
    query: list = []
    groups = scenario.samples_by_rp()
    for rp in sorted(groups):
        group = groups[rp]
        if len(group) <= k:
            raise ValueError(
                f"scenario {scenario.id}: reference point {rp} has {len(group)} "
                f"samples, needs more than k={k}"
            )
        order = rng.permutation(len(group))
        support.extend(group[i] for i in order[:k])
        query.extend(group[i] for i in order[k:])
    return TaskSplit(scenario_id=scenario.id, support=support, query=query, shots=k, seed=seed)


def partition_tasks(scenarios: Sequence[Scenario], test_count: int, seed: int) -> TaskSet:
    scenarios = list(scenarios)
    if not 0 < test_count < len(scenarios):
        raise ValueError(
            f"test_count must be in (0, {len(scenarios)}), got {test_count}"
        )
    order = np.random.default_rng(seed).permutation(len(scenarios))
    test = sorted(int(i) for i in order[:test_count])
    train = sorted(int(i) for i in order[test_count:])
    return TaskSet(scenarios=scenarios, train_indices=train, test_indices=test, seed=seed)


def batch_from(samples: Sequence[Sample]):
    """Stack samples into a normalized (n,3,30) input and (n,2) label batch."""
    xs = np.stack([normalize(s.amp) for s in samples])
    ys = np.asarray([s.pos_cm for s in samples], dtype=np.float64)
    return xs, ys


# ---------------------------------------------------------------------------
# on-disk format: one JSON document per scenario


def save_scenario(scenario: Scenario, path) -> None:
    doc = {
        "id": scenario.id,
        "grid": {
            "rows": scenario.grid.rows,
            "cols": scenario.grid.cols,
            "spacing_cm": scenario.grid.spacing_cm,
        },
        "samples": [
            {
                "rp": s.rp,
                "pos_cm": [s.pos_cm[0], s.pos_cm[1]],
                "amp": s.amp.ravel().tolist(),  # antenna-major row-major, normative
            }
            for s in scenario.samples
        ],
    }
    Path(path).write_text(json.dumps(doc))


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise DataFormatError(f"{where}: missing field {key!r}")
    return doc[key]


def load_scenario(path) -> Scenario:
    where = str(path)
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataFormatError(f"{where}: file not found")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{where}: invalid JSON at line {e.lineno}: {e.msg}")
    if not isinstance(doc, dict):
        raise DataFormatError(f"{where}: top level must be an object")

    sid = _require(doc, "id", where)
    grid_doc = _require(doc, "grid", where)
    for key in ("rows", "cols", "spacing_cm"):
        _require(grid_doc, key, f"{where}: grid")
    grid = GridSpec(
        rows=int(grid_doc["rows"]),
        cols=int(grid_doc["cols"]),
        spacing_cm=float(grid_doc["spacing_cm"]),
    )
    positions = set(grid.positions())

    raw = _require(doc, "samples", where)
    if not isinstance(raw, list):
        raise DataFormatError(f"{where}: 'samples' must be a list")
    samples = []
    expected = 3 * 30
    for i, entry in enumerate(raw):
        ctx = f"{where}: samples[{i}]"
        rp = _require(entry, "rp", ctx)
        pos = _require(entry, "pos_cm", ctx)
        amp = _require(entry, "amp", ctx)
        if len(pos) != 2:
            raise DataFormatError(f"{ctx}: pos_cm must have 2 entries, got {len(pos)}")
        if len(amp) != expected:
            raise DataFormatError(f"{ctx}: amp must have {expected} entries, got {len(amp)}")
        pos = (float(pos[0]), float(pos[1]))
        if pos not in positions:
            raise DataFormatError(f"{ctx}: position {pos} is not a grid reference point")
        arr = np.asarray(amp, dtype=np.float64).reshape(3, 30)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise DataFormatError(f"{ctx}: amplitudes must be finite and non-negative")
        samples.append(Sample(rp=int(rp), pos_cm=pos, amp=arr))
    return Scenario(id=str(sid), grid=grid, samples=samples)


def load_scenario_dir(directory) -> list:
    """All scenario_*.json files in a directory, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"{directory}: not a directory")
    paths = sorted(directory.glob("scenario_*.json"))
    if not paths:
        raise DataFormatError(f"{directory}: no scenario_*.json files found")
    return [load_scenario(p) for p in paths]
