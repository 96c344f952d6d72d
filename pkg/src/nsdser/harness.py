"""Desk-scale detection scenarios: dataset generation with full provenance,
detector runs with a label-permutation control, ablations and Table-style
reports. Work is split into fixed-size blocks of samples so the output does
not depend on how many worker threads are used."""
from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kvformat as kv
from .analysis import normalized_overall
from .codecs import CodecParams, Key, Scheme
from .diffusion import rng_for
from .ensemble import FldEnsemble, evaluate
from .features import extract_features
from .solvers import Direction, SolverConfig, integrate_array
from .stego import (Backbone, ChannelConfig, builtin_backbones, sde_generate_array, sde_key_noise,
                    stego_noise)

BLOCK = 256
ALL_CODECS = ("mn", "mc", "mb", "gaussian-shading", "sde-shared-seed", "truncated", "hamming-ball")
MIXED_CODECS = ("mn", "mc", "mb", "hamming-ball")
MIXED = "mixed"
FIRST_ORDER = ("truncated",)
SDE_CODECS = ("sde-shared-seed",)


def solver_family(codec: str) -> str:
    """Generation solver used by a codec: heun2 (20-ish steps), euler1 or sde (50-ish)."""
    if codec in SDE_CODECS:
        return "sde"
    if codec in FIRST_ORDER:
        return "euler1"
    return "heun2"


def is_distribution_preserving(codec: str) -> bool:
    return codec != MIXED and CodecParams(Scheme(codec)).distribution_preserving


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ScenarioConfig:
    id: int = 1
    r_g: float = 1.0
    r_n: float = 0.0
    backbones: tuple = ("sd15",)
    steps_second: tuple = (20, 20)
    steps_first: tuple = (50, 50)
    omega: tuple = (7.5, 7.5)
    codecs: tuple = ALL_CODECS
    n_train: int = 1800
    n_test: int = 200
    seed: int = 0
    dim: int = 256
    channels: int = 4
    q: int = 256
    clip: float = 4.0
    l: int = 1
    detector_backbone: str = "sd21"
    detector_solver: str = "heun2"
    detector_steps: int = 20
    detector_guidance: bool = False
    detector_omega: float = 1.0

    def __post_init__(self):
        if self.id not in (1, 2, 3, 4):
            raise ValueError("scenario id must be 1..4")
        if min(self.r_g, self.r_n) < 0 or abs(self.r_g + self.r_n - 1.0) > 1e-12:
            raise ValueError("r_g and r_n must be non-negative and sum to 1")
        for name, (lo, hi) in (("steps_second", self.steps_second), ("steps_first", self.steps_first),
                               ("omega", self.omega)):
            if lo > hi:
                raise ValueError(f"{name} range is empty")
        if self.id == 1 and (self.r_n != 0 or any(r[0] != r[1] for r in
                                                  (self.steps_second, self.steps_first, self.omega))):
            raise ValueError("scenario 1 has no natural covers and singleton ranges")
        if not self.backbones or not self.codecs:
            raise ValueError("need at least one backbone and one codec")
        if min(self.n_train, self.n_test) < 1:
            raise ValueError("train and test counts must be positive")
        object.__setattr__(self, "backbones", tuple(self.backbones))
        object.__setattr__(self, "codecs", tuple(self.codecs))

    @classmethod
    def preset(cls, scenario: int, **overrides) -> "ScenarioConfig":
        base = {
            1: {},
            2: dict(r_g=0.5, r_n=0.5),
            3: dict(r_g=0.5, r_n=0.5, backbones=("sd15", "sd21", "ds7"), steps_second=(15, 25),
                    steps_first=(45, 55), omega=(4.5, 10.5)),
            4: dict(r_g=0.5, r_n=0.5, backbones=("sd15", "sd21", "ds7"), steps_second=(15, 25),
                    steps_first=(45, 55), omega=(4.5, 10.5), codecs=(MIXED,)),
        }[scenario]
        return cls(id=scenario, **{**base, **overrides})

    def to_kv(self) -> str:
        return kv.dumps("scenario-config", {k: v for k, v in asdict(self).items()})

    @classmethod
    def from_kv(cls, text: str) -> "ScenarioConfig":
        f = kv.loads(text, "scenario-config")
        ints = {"id", "n_train", "n_test", "seed", "dim", "channels", "q", "l", "detector_steps"}
        out = {}
        for k, v in f.items():
            if k in ("format", "version", "kind"):
                continue
            if k in ints:
                out[k] = int(v)
            elif k in ("r_g", "r_n", "clip", "detector_omega"):
                out[k] = float(v)
            elif k in ("steps_second", "steps_first"):
                out[k] = tuple(int(float(x)) for x in v.split(","))
            elif k == "omega":
                out[k] = tuple(float(x) for x in v.split(","))
            elif k in ("backbones", "codecs"):
                out[k] = tuple(x.strip() for x in v.split(",") if x.strip())
            elif k == "detector_guidance":
                out[k] = kv.parse_bool(v)
            elif k in ("detector_backbone", "detector_solver"):
                out[k] = v
            else:
                raise kv.KVFormatError(f"unknown config key {k!r}")
        return cls(**out)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_kv().encode()).hexdigest()[:16]

    @property
    def channel(self) -> ChannelConfig:
        return ChannelConfig(self.q, self.clip)

    def codec_params(self, codec: str) -> CodecParams:
        return CodecParams(Scheme(codec), self.l)


# --------------------------------------------------------------------------- provenance


@dataclass(frozen=True)
class SampleRecord:
    """Everything needed to regenerate one sample."""

    index: int
    pair: int
    label: int  # 0 cover, 1 stego
    source: str  # cover-generated | cover-natural | stego
    codec: str  # generation codec; "" for covers
    backbone: str
    solver: str
    steps: int
    omega: float
    condition: int
    q: int
    seed: int

    @property
    def family_key(self):
        return (self.source == "cover-natural", self.backbone, self.solver, self.steps, self.codec)


@dataclass
class RunManifest:
    config_hash: str
    n_train: int
    records: dict = field(default_factory=dict)  # column -> list[SampleRecord]
    result_paths: list = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "column", "index", "pair", "split", "label", "source", "codec", "backbone",
                        "solver", "steps", "omega", "condition", "q", "seed"])
            for column, recs in self.records.items():
                for r in recs:
                    w.writerow([self.config_hash, column, r.index, r.pair,
                                "train" if r.pair < self.n_train else "test", r.label, r.source, r.codec,
                                r.backbone, r.solver, r.steps, kv.fmt_float(r.omega), r.condition, r.q, r.seed])


def _column_id(column: str) -> int:
    return int.from_bytes(hashlib.sha256(column.encode()).digest()[:4], "little")


def _draw_generation(rng, config: ScenarioConfig, codec: str):
    backbone = config.backbones[int(rng.integers(len(config.backbones)))]
    family = solver_family(codec)
    lo, hi = config.steps_second if family == "heun2" else config.steps_first
    steps = int(rng.integers(lo, hi + 1))
    omega = float(config.omega[0]) if config.omega[0] == config.omega[1] else float(rng.uniform(*config.omega))
    condition = int(rng.integers(2))
    return backbone, family, steps, omega, condition


def plan_samples(config: ScenarioConfig, column: str) -> list[SampleRecord]:
    """Cover/stego records for one result column, pair by pair, covers first."""
    n_pairs = config.n_train + config.n_test
    cid = _column_id(column)
    n_natural = int(round(config.r_n * n_pairs))
    natural = np.zeros(n_pairs, dtype=bool)
    natural[rng_for(config.seed, config.id, cid, 0x6E6174).permutation(n_pairs)[:n_natural]] = True
    records = []
    for i in range(n_pairs):
        for label in (0, 1):
            rng = rng_for(config.seed, config.id, cid, label, i)
            codec = column
            if column == MIXED:
                codec = MIXED_CODECS[int(rng.integers(len(MIXED_CODECS)))]
            backbone, solver, steps, omega, cond = _draw_generation(rng, config, codec)
            seed = int(rng.integers(2 ** 62))
            if label == 0 and natural[i]:
                source, backbone, solver, steps, omega, cond = "cover-natural", "", "", 0, 0.0, -1
            else:
                source = "stego" if label else "cover-generated"
            records.append(SampleRecord(2 * i + label, i, label, source, codec if label else "",
                                        backbone, solver, steps, omega, cond, config.q, seed))
    return records


# --------------------------------------------------------------------------- generation


def natural_analogue(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Held-out heavy-tailed mixture (Student-t, 5 dof) standing in for natural data."""
    base = rng_for(0x4E415455)
    means = base.normal(0.0, 0.6, (3, dim))
    scales = base.uniform(0.5, 0.9, (3, dim))
    comp = rng.integers(3, size=n)
    t = rng.standard_t(5, (n, dim)) / math.sqrt(5 / 3)
    return means[comp] + scales[comp] * t


def _generate_group(recs: Sequence[SampleRecord], backbone: Backbone, config: ScenarioConfig,
                    codecs: dict) -> np.ndarray:
    n, dim = len(recs), backbone.dim
    sched = backbone.schedule
    scale = np.array([r.omega for r in recs])
    cond = np.array([r.condition for r in recs], dtype=np.int64)
    solver, steps = recs[0].solver, recs[0].steps
    if solver == "sde":
        x_T = np.empty((n, dim))
        noises = np.empty((n, steps, dim))
        for j, r in enumerate(recs):
            if r.label:
                key = Key.from_seed(r.seed)
                bits = rng_for(r.seed, 0x6D7367).integers(0, 2, dim * config.l).astype(np.uint8)
                g, _ = stego_noise(bits, key, codecs[r.codec], dim)
                x_T[j] = sched.sigma_T * key.normals(dim, "sde-init")
                for i in range(steps - 1):
                    noises[j, i] = sde_key_noise(key, i, dim)
                noises[j, steps - 1] = g
            else:
                rng = rng_for(r.seed, 0x636F)
                x_T[j] = sched.sigma_T * rng.standard_normal(dim)
                noises[j] = rng.standard_normal((steps, dim))
        return sde_generate_array(x_T, backbone, steps, lambda i, t, s: noises[:, i], scale, cond)
    x_T = np.empty((n, dim))
    for j, r in enumerate(recs):
        if r.label:
            bits = rng_for(r.seed, 0x6D7367).integers(0, 2, dim * config.l).astype(np.uint8)
            g, _ = stego_noise(bits, Key.from_seed(r.seed), codecs[r.codec], dim)
        else:
            g = rng_for(r.seed, 0x636F).standard_normal(dim)
        x_T[j] = sched.sigma_T * g
    cfg = SolverConfig(solver, steps, Direction.GENERATE)
    return integrate_array(x_T, backbone.prior, sched, cfg, scale=scale, condition=cond)


def _generate_block(recs: Sequence[SampleRecord], config: ScenarioConfig, backbones: dict) -> np.ndarray:
    out = np.empty((len(recs), config.dim))
    codecs = {c: config.codec_params(c) for c in {r.codec for r in recs if r.codec}}
    groups: dict = {}
    for j, r in enumerate(recs):
        groups.setdefault(r.family_key, []).append(j)
    for key in sorted(groups, key=str):
        idx = groups[key]
        if key[0]:
            for j in idx:
                out[j] = natural_analogue(1, config.dim, rng_for(recs[j].seed, 0x6E))[0]
        else:
            out[idx] = _generate_group([recs[j] for j in idx], backbones[key[1]], config, codecs)
    return config.channel.apply(out)


def _blocks(n: int):
    return [slice(lo, min(lo + BLOCK, n)) for lo in range(0, n, BLOCK)]


def _map_blocks(fn, n: int, jobs: int) -> list:
    blocks = _blocks(n)
    if jobs <= 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, blocks))


def build_dataset(config: ScenarioConfig, column: str, jobs: int = 1, backbones: Optional[dict] = None):
    """Returns ``(X, records)`` for one column; rows alternate cover/stego per pair."""
    backbones = backbones or builtin_backbones(config.dim, config.channels)
    records = plan_samples(config, column)
    parts = _map_blocks(lambda b: _generate_block(records[b], config, backbones), len(records), jobs)
    return np.concatenate(parts), records


# --------------------------------------------------------------------------- detection


@dataclass(frozen=True)
class ResultRow:
    scenario: int
    column: str
    detector: str
    accuracy: float
    p_fa: float
    p_md: float
    advantage: float
    n_queries: int
    n_learners: int
    oob_error: float


def invert_features(X: np.ndarray, records: Sequence[SampleRecord], config: ScenarioConfig,
                    backbones: Optional[dict] = None, jobs: int = 1) -> np.ndarray:
    """Inversion followed by the 10 statistics.

    Inversion is condition-free unless ``detector_guidance`` is set; then each
    sample is inverted under its true class (a stand-in for a caption read off
    the sample) at the detector's own fixed ``detector_omega``.
    """
    backbones = backbones or builtin_backbones(config.dim, config.channels)
    bb = backbones[config.detector_backbone]
    cfg = SolverConfig(config.detector_solver, config.detector_steps, Direction.INVERT)

    def run(b):
        recs = records[b]
        if config.detector_guidance:
            scale = np.full(len(recs), config.detector_omega)
            cond = np.array([r.condition if r.condition >= 0 else int(rng_for(r.seed, 0x766C6D).integers(2))
                             for r in recs], dtype=np.int64)
            x_T = integrate_array(X[b], bb.prior, bb.schedule, cfg, scale=scale, condition=cond)
        else:
            x_T = integrate_array(X[b], bb.prior, bb.schedule, cfg)
        return extract_features(x_T, bb.channels)

    return np.concatenate(_map_blocks(run, X.shape[0], jobs))


def split_indices(records: Sequence[SampleRecord], n_train: int):
    pair = np.array([r.pair for r in records])
    return np.flatnonzero(pair < n_train), np.flatnonzero(pair >= n_train)


def run_detector(F: np.ndarray, records: Sequence[SampleRecord], config: ScenarioConfig, column: str,
                 permute_labels: bool = False, random_state: Optional[int] = None) -> ResultRow:
    """Train the FLD ensemble on the training pairs and score the test pairs.

    ``permute_labels`` shuffles the labels of the whole dataset before the
    split, so labels carry no information about the samples (null control).
    """
    y = np.array([r.label for r in records])
    if permute_labels:
        y = rng_for(config.seed, 0x7065726D, _column_id(column)).permutation(y)
    tr, te = split_indices(records, config.n_train)
    y_tr = y[tr]
    if len(np.unique(y[te])) != 2 or len(np.unique(y_tr)) != 2:
        raise ValueError("degenerate split")
    rs = config.seed if random_state is None else random_state
    model = FldEnsemble(random_state=rs, min_class_size=min(50, config.n_train)).fit(F[tr], y_tr)
    rep = evaluate(model, F[te][y[te] == 0], F[te][y[te] == 1])
    name = "label-permutation" if permute_labels else "nsdser"
    return ResultRow(config.id, column, name, rep.accuracy, rep.p_fa, rep.p_md, rep.advantage, rep.n_queries,
                     model.report_.n_learners, model.report_.oob_error)


def run_scenario(config: ScenarioConfig, jobs: int = 1, control: bool = True, columns=None):
    """Results for every column plus the manifest. Returns ``(rows, manifest)``."""
    backbones = builtin_backbones(config.dim, config.channels)
    manifest = RunManifest(config.digest, config.n_train)
    rows = []
    for column in columns or config.codecs:
        X, recs = build_dataset(config, column, jobs, backbones)
        F = invert_features(X, recs, config, backbones, jobs)
        rows.append(run_detector(F, recs, config, column))
        if control:
            rows.append(run_detector(F, recs, config, column, permute_labels=True))
        manifest.records[column] = recs
    return rows, manifest


def detect_codec(params: CodecParams, backbone: Backbone, solver: SolverConfig, channel: ChannelConfig,
                 detector_backbone: Backbone, n_train: int, n_test: int, seed: int = 0) -> float:
    """Test accuracy of a freshly trained detector for one codec setting (sweep helper)."""
    dim, sched = backbone.dim, backbone.schedule
    n = n_train + n_test
    X = np.empty((2 * n, dim))
    for i in range(n):
        X[2 * i] = sched.sigma_T * rng_for(seed, i, 0x636F).standard_normal(dim)
        bits = rng_for(seed, i, 0x6D7367).integers(0, 2, dim * params.l).astype(np.uint8)
        g, _ = stego_noise(bits, Key.from_seed(seed, i), params, dim)
        X[2 * i + 1] = sched.sigma_T * g
    x0 = channel.apply(integrate_array(X, backbone.prior, sched, solver.with_(direction=Direction.GENERATE)))
    inv = SolverConfig("heun2", 20, Direction.INVERT)
    F = extract_features(integrate_array(x0, detector_backbone.prior, detector_backbone.schedule, inv),
                         detector_backbone.channels)
    y = np.tile([0, 1], n)
    tr, te = slice(0, 2 * n_train), slice(2 * n_train, None)
    model = FldEnsemble(random_state=seed, min_class_size=min(50, n_train)).fit(F[tr], y[tr])
    return evaluate(model, F[te][y[te] == 0], F[te][y[te] == 1]).accuracy


# --------------------------------------------------------------------------- ablation


ABLATION_AXES = {"steps": (15, 20, 25), "guidance": (False, True)}


@dataclass(frozen=True)
class AblationRow:
    column: str
    axis: str
    value: str
    accuracy: float


def ablate(config: ScenarioConfig, axis: str, columns=None, jobs: int = 1):
    """Re-run the detector varying only ``axis``; returns ``(rows, spread per column in points)``."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {sorted(ABLATION_AXES)}")
    backbones = builtin_backbones(config.dim, config.channels)
    rows, spread = [], {}
    for column in columns or config.codecs:
        X, recs = build_dataset(config, column, jobs, backbones)
        accs = []
        for value in ABLATION_AXES[axis]:
            cfg = replace(config, detector_steps=value) if axis == "steps" else replace(config, detector_guidance=value)
            F = invert_features(X, recs, cfg, backbones, jobs)
            acc = run_detector(F, recs, cfg, column).accuracy
            rows.append(AblationRow(column, axis, str(value).lower(), acc))
            accs.append(acc)
        spread[column] = 100.0 * (max(accs) - min(accs))
    return rows, spread


# --------------------------------------------------------------------------- reports and gates


def overall(rows: Sequence[ResultRow]) -> float:
    main = [r for r in rows if r.detector == "nsdser"]
    return normalized_overall([100 * r.accuracy for r in main], [is_distribution_preserving(r.column) for r in main])


def write_results_csv(path, rows: Sequence[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "column", "detector", "accuracy", "p_fa", "p_md", "advantage", "n_queries",
                    "n_learners", "oob_error"])
        for r in rows:
            w.writerow([r.scenario, r.column, r.detector] + [kv.fmt_float(x) for x in
                                                            (r.accuracy, r.p_fa, r.p_md, r.advantage)]
                       + [r.n_queries, r.n_learners, kv.fmt_float(r.oob_error)])


def write_table_csv(path, rows: Sequence[ResultRow]) -> None:
    """One row per detector, one column per codec (accuracy in percent), plus Overall."""
    columns = list(dict.fromkeys(r.column for r in rows))
    by = {(r.detector, r.column): r for r in rows}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["detector"] + columns + ["overall"])
        for det in dict.fromkeys(r.detector for r in rows):
            sub = [by[(det, c)] for c in columns if (det, c) in by]
            ov = normalized_overall([100 * r.accuracy for r in sub], [is_distribution_preserving(r.column) for r in sub])
            w.writerow([det] + [kv.fmt_float(100 * by[(det, c)].accuracy) if (det, c) in by else "" for c in columns]
                       + [kv.fmt_float(ov)])


@dataclass(frozen=True)
class Gate:
    name: str
    passed: bool
    detail: str


def evaluate_gates(config: ScenarioConfig, rows: Sequence[ResultRow]) -> list[Gate]:
    """Chance band for distribution-preserving codecs (scenario 1), accuracy floors for the
    rest (0.95 in scenario 1, 0.90 in scenario 3) and the null-control band."""
    gates = []
    for r in rows:
        if r.detector == "label-permutation":
            gates.append(Gate(f"s{config.id}.{r.column}.control", 0.45 <= r.accuracy <= 0.55,
                              f"accuracy {r.accuracy:.4f} in [0.45, 0.55]"))
            continue
        if r.column == MIXED:
            continue
        if is_distribution_preserving(r.column):
            if config.id == 1:
                gates.append(Gate(f"s1.{r.column}.chance", 0.45 <= r.accuracy <= 0.55,
                                  f"accuracy {r.accuracy:.4f} in [0.45, 0.55]"))
        elif config.id in (1, 3):
            floor = 0.95 if config.id == 1 else 0.90
            gates.append(Gate(f"s{config.id}.{r.column}.floor", r.accuracy >= floor,
                              f"accuracy {r.accuracy:.4f} >= {floor}"))
    return gates


def write_report(out_dir, config: ScenarioConfig, rows: Sequence[ResultRow], manifest: Optional[RunManifest] = None,
                 gates: Optional[Sequence[Gate]] = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"scenario{config.id}"
    paths = [out / f"{stem}_results.csv", out / f"{stem}_table.csv", out / f"{stem}_summary.txt"]
    write_results_csv(paths[0], rows)
    write_table_csv(paths[1], rows)
    summary = {"scenario": config.id, "config_hash": config.digest, "overall": overall(rows)}
    for g in gates or ():
        summary[f"gate.{g.name}"] = "pass" if g.passed else "fail"
    kv.dump(paths[2], "scenario-summary", summary)
    if manifest is not None:
        paths.append(out / f"{stem}_manifest.csv")
        manifest.result_paths = [str(p) for p in paths[:3]]
        manifest.write(paths[3])
    return paths
