"""Experiment harness: synthetic datasets, benchmark loops, gradient-quality tables.

Desk-scale geometry lives here: videos of shape (8, 32, 32, 3), 10 classes, a
4x4 partition grid per frame (128 patches) and an NES population of 24, small
enough for CI while keeping the patch count well below the input dimension.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import AttackConfig, AttackResult, attack_targeted, attack_untargeted
from .estimator import NESConfig, nes_estimate
from .goal import Untargeted
from .models import ModelBundle, ToyClassifier
from .oracle import InProcessOracle, QueryCounter
from .partition import PartitionSpec, build_basis, project_onto_basis, rectify
from .tensor import Shape, cosine_similarity, read_vtf, write_vtf
from .tentative import TentativeSpec, generate, with_noise_features

DESK_SHAPE = Shape(8, 32, 32, 3)
DESK_CLASSES = 10
DESK_CONV_FILTERS = 4096
DESK_FEAT_FILTERS = 16
DESK_GRID = (4, 4)
DESK_POPULATION = 24
DESK_SIGMA_UNTARGETED = 1e-3
DESK_SIGMA_TARGETED = 1e-6
DESK_STEP_SIZE = 0.0025          # untargeted desk attacks
DESK_TARGETED_STEP_SIZE = 0.01   # targeted desk attacks (more headroom for halvings)
DESK_TARGETED_TENTATIVE = "static"
DESK_BLUR_SIGMA = 0.6
DESK_KEYFRAMES = 3
MIN_TOP1_PROB = 0.6

UNTARGETED = "untargeted"
TARGETED = "targeted"


def desk_bundle(seed: int = 7) -> ModelBundle:
    return ModelBundle.seeded(DESK_SHAPE, DESK_CLASSES, DESK_CONV_FILTERS,
                              DESK_FEAT_FILTERS, seed)


# --- synthetic videos ---------------------------------------------------------


def _gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; channels untouched."""
    radius = max(1, int(round(3.0 * sigma)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    out = image.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for k, weight in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(k, k + out.shape[axis])
            acc += weight * padded[tuple(sl)]
        out = acc
    return out


def smoothed_noise_video(shape: Shape, rng: np.random.Generator,
                         blur_sigma: float = DESK_BLUR_SIGMA,
                         keyframes: int = DESK_KEYFRAMES) -> np.ndarray:
    """Low-frequency random video: blurred uniform-noise keyframes, each channel
    stretched to the full [0, 1] range, linearly interpolated in time."""
    keys = []
    for _ in range(keyframes):
        frame = _gaussian_blur(rng.random((shape.height, shape.width, shape.channels)), blur_sigma)
        lo = frame.min(axis=(0, 1), keepdims=True)
        hi = frame.max(axis=(0, 1), keepdims=True)
        keys.append((frame - lo) / (hi - lo))
    positions = np.linspace(0.0, keyframes - 1.0, shape.frames)
    frames = np.empty(shape.as_tuple(), dtype=np.float64)
    for n, pos in enumerate(positions):
        left = min(int(math.floor(pos)), keyframes - 1)
        right = min(left + 1, keyframes - 1)
        w = pos - left
        frames[n] = (1.0 - w) * keys[left] + w * keys[right]
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def synth_dataset(count: int, shape: Shape, model: ToyClassifier,
                  rng: np.random.Generator, min_prob: float = MIN_TOP1_PROB,
                  blur_sigma: float = DESK_BLUR_SIGMA,
                  keyframes: int = DESK_KEYFRAMES) -> list[tuple[np.ndarray, int]]:
    """Seeded random videos labeled by the model, keeping only confident samples.

    Rejects candidates whose top-1 probability falls below min_prob so attacks
    start from confidently classified inputs; errors out if the model is too
    uncertain to fill the request within 100x the asked count.
    """
    samples: list[tuple[np.ndarray, int]] = []
    attempts = 0
    while len(samples) < count:
        attempts += 1
        if attempts > 100 * count:
            raise RuntimeError(f"model too uncertain: {len(samples)}/{count} confident "
                               f"samples after {attempts - 1} attempts")
        video = smoothed_noise_video(shape, rng, blur_sigma, keyframes)
        probs = model.forward(video)
        label = int(np.argmax(probs))
        if probs[label] >= min_prob:
            samples.append((video, label))
    return samples


def save_dataset(out_dir, samples, model: ToyClassifier, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"shape": list(samples[0][0].shape), "seed": seed, "samples": []}
    for i, (video, label) in enumerate(samples):
        name = f"video_{i:03d}.vtf"
        write_vtf(out / name, video)
        prob = float(model.forward(video)[label])
        manifest["samples"].append({"file": name, "label": label, "prob": prob})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def load_dataset(dataset_dir) -> list[tuple[np.ndarray, int]]:
    root = Path(dataset_dir)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    return [(read_vtf(root / entry["file"]), int(entry["label"]))
            for entry in manifest["samples"]]


# --- benchmark loop ------------------------------------------------------------


@dataclass(frozen=True)
class ArmSpec:
    """One column of the benchmark config matrix."""

    name: str
    tentative: str = "ensemble"
    partition: str = "uniform"
    estimator: str = "nes"
    population: int | None = None
    sigma: float | None = None


@dataclass(frozen=True)
class BenchmarkSpec:
    model_path: str
    dataset_dir: str
    goal: str
    trials: int
    seeds: tuple[int, ...]
    arms: tuple[ArmSpec, ...]
    out_dir: str
    attack: dict

    def __post_init__(self) -> None:
        if self.goal not in (UNTARGETED, TARGETED):
            raise ValueError(f"goal must be untargeted or targeted, got {self.goal!r}")
        if self.trials < 1 or len(self.seeds) < self.trials:
            raise ValueError("need one distinct seed per trial")
        if len(set(self.seeds[:self.trials])) != self.trials:
            raise ValueError("trial seeds must be distinct")
        if not self.arms:
            raise ValueError("benchmark needs at least one arm")


def load_benchmark_spec(path) -> BenchmarkSpec:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        trials = int(obj["trials"])
        if "seeds" in obj:
            seeds = tuple(int(s) for s in obj["seeds"])
        else:
            seeds = tuple(int(obj["base_seed"]) + i for i in range(trials))
        arms = tuple(ArmSpec(
            name=a["name"],
            tentative=a.get("tentative", "ensemble"),
            partition=a.get("partition", "uniform"),
            estimator=a.get("estimator", "nes"),
            population=a.get("population"),
            sigma=a.get("sigma"),
        ) for a in obj["arms"])
        return BenchmarkSpec(
            model_path=obj["model"],
            dataset_dir=obj["dataset"],
            goal=obj.get("goal", UNTARGETED),
            trials=trials,
            seeds=seeds,
            arms=arms,
            out_dir=obj.get("out_dir", "results"),
            attack=dict(obj.get("attack", {})),
        )
    except KeyError as exc:
        raise ValueError(f"benchmark spec missing field {exc}") from exc


def build_attack_config(goal: str, bundle: ModelBundle | None, *, tentative: str = "ensemble",
                        partition: str = "uniform", estimator: str = "nes",
                        population: int | None = None, sigma: float | None = None,
                        grid: tuple[int, int] = DESK_GRID, shape: Shape | None = None,
                        **overrides) -> AttackConfig:
    """Assemble an AttackConfig from benchmark-style axis names.

    A bundle is only required for transferred tentative kinds (it supplies the
    surrogates) or when no explicit shape is given.
    """
    if shape is None:
        if bundle is None:
            raise ValueError("need a model bundle or an explicit shape")
        shape = bundle.config.shape
    if partition == "uniform":
        part = PartitionSpec.uniform(*grid)
    elif partition == "random":
        part = PartitionSpec.random(shape.frames * grid[0] * grid[1])
    elif partition == "pixel":
        part = PartitionSpec.per_pixel()
    else:
        raise ValueError(f"unknown partition axis {partition!r}")
    if tentative == "static":
        tent = TentativeSpec.static()
    elif tentative == "random":
        tent = TentativeSpec.random()
    elif tentative in ("single", "ensemble"):
        if bundle is None:
            raise ValueError("transferred tentative perturbations need a model bundle")
        surrogates = bundle.surrogates[:1] if tentative == "single" else bundle.surrogates
        tent = TentativeSpec.transfer(surrogates)
    else:
        raise ValueError(f"unknown tentative axis {tentative!r}")
    if sigma is None:
        sigma = DESK_SIGMA_TARGETED if goal == TARGETED else DESK_SIGMA_UNTARGETED
    nes = NESConfig(sigma=sigma, population=population or DESK_POPULATION)
    return AttackConfig(nes=nes, partition=part, tentative=tent,
                        estimator=estimator, **overrides)


@dataclass(frozen=True)
class RunRow:
    arm: str
    trial: int
    seed: int
    label: int
    target_label: int | None
    success: bool
    queries: int
    steps: int
    final_epsilon: float
    final_linf: float


class MetricsSummary:
    """Per-trial rows plus the success-rate / average-query aggregates.

    ANQ averages queries over successful attacks only; with no successes it is
    reported as None (empty in CSV output).
    """

    def __init__(self, rows: list[RunRow]):
        self.rows = list(rows)

    def arms(self) -> list[str]:
        seen: list[str] = []
        for row in self.rows:
            if row.arm not in seen:
                seen.append(row.arm)
        return seen

    def success_rate(self, arm: str) -> float:
        rows = [r for r in self.rows if r.arm == arm]
        return sum(r.success for r in rows) / len(rows)

    def anq(self, arm: str) -> float | None:
        wins = [r.queries for r in self.rows if r.arm == arm and r.success]
        if not wins:
            return None
        return sum(wins) / len(wins)

    def per_arm(self) -> list[tuple[str, int, int, float, float | None]]:
        out = []
        for arm in self.arms():
            rows = [r for r in self.rows if r.arm == arm]
            successes = sum(r.success for r in rows)
            out.append((arm, len(rows), successes, self.success_rate(arm), self.anq(arm)))
        return out


RUNS_COLUMNS = ["arm", "trial", "seed", "label", "target_label", "success",
                "queries", "steps", "final_epsilon", "final_linf"]
SUMMARY_COLUMNS = ["arm", "trials", "successes", "sr", "anq"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_runs_csv(path, rows: list[RunRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUNS_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(v) for v in (r.arm, r.trial, r.seed, r.label, r.target_label,
                                               r.success, r.queries, r.steps,
                                               r.final_epsilon, r.final_linf)])


def write_summary_csv(path, summary: MetricsSummary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for arm, trials, successes, sr, anq in summary.per_arm():
            writer.writerow([_fmt(v) for v in (arm, trials, successes, sr, anq)])


def _pick_target(classifier: ToyClassifier, dataset, trial: int) -> tuple[np.ndarray, int]:
    """Choose the targeted-attack class for one trial: the most confusable class
    (highest probability under the clean video) that has a dataset exemplar."""
    video, label = dataset[trial]
    probs = classifier.forward(video)
    present = {}
    for other_video, other_label in dataset:
        if other_label != label and other_label not in present:
            present[other_label] = other_video
    if not present:
        raise ValueError("dataset holds a single class; cannot form targeted pairs")
    target_label = max(present, key=lambda c: probs[c])
    return present[target_label], target_label


def run_attack_trial(bundle: ModelBundle, goal: str, video: np.ndarray, label: int,
                     cfg: AttackConfig, seed: int,
                     target: tuple[np.ndarray, int] | None = None,
                     traj_path=None) -> AttackResult:
    oracle = InProcessOracle(bundle.classifier)
    rng = np.random.default_rng(seed)
    if goal == TARGETED:
        target_video, target_label = target
        return attack_targeted(video, target_label, target_video, oracle, cfg, rng,
                               traj_path=traj_path)
    return attack_untargeted(video, label, oracle, cfg, rng, traj_path=traj_path)


def run_benchmark(spec: BenchmarkSpec) -> MetricsSummary:
    """Run every arm x trial, write per-run trajectories and the two CSVs."""
    bundle = ModelBundle.load(spec.model_path)
    dataset = load_dataset(spec.dataset_dir)
    if spec.trials > len(dataset):
        raise ValueError(f"benchmark asks for {spec.trials} trials but dataset has {len(dataset)}")
    out = Path(spec.out_dir)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    rows: list[RunRow] = []
    for arm in spec.arms:
        for trial in range(spec.trials):
            video, label = dataset[trial]
            target = (_pick_target(bundle.classifier, dataset, trial)
                      if spec.goal == TARGETED else None)
            cfg = build_attack_config(
                spec.goal, bundle,
                tentative=arm.tentative, partition=arm.partition, estimator=arm.estimator,
                population=arm.population, sigma=arm.sigma,
                grid=tuple(spec.attack.get("grid", DESK_GRID)),
                eps_adv=spec.attack.get("eps", 0.05),
                budget=spec.attack.get("budget", 300_000),
                step_size=spec.attack.get("step_size", DESK_STEP_SIZE),
                eps_decay=spec.attack.get("eps_decay", 0.05),
            )
            traj_path = traj_dir / f"{arm.name}__{trial:03d}.jsonl"
            result = run_attack_trial(bundle, spec.goal, video, label, cfg,
                                      spec.seeds[trial], target, traj_path)
            linf = float(np.max(np.abs(result.x_adv.astype(np.float64) - video.astype(np.float64))))
            rows.append(RunRow(arm.name, trial, spec.seeds[trial], label,
                               target[1] if target else None, result.success,
                               result.queries_used, result.steps, result.epsilon, linf))
    summary = MetricsSummary(rows)
    write_runs_csv(out / "runs.csv", rows)
    write_summary_csv(out / "summary.csv", summary)
    return summary


# --- gradient-estimate quality ---------------------------------------------------


@dataclass(frozen=True)
class GradQualityRow:
    name: str
    tentative_cosine: float
    rectified_cosine: float


DEFAULT_QUALITY_ARMS = (
    ArmSpec("static-uniform", tentative="static", partition="uniform"),
    ArmSpec("random-uniform", tentative="random", partition="uniform"),
    ArmSpec("static-random", tentative="static", partition="random"),
    ArmSpec("static-pixel", tentative="static", partition="pixel", population=96),
    ArmSpec("ensemble-uniform", tentative="ensemble", partition="uniform"),
)


def eval_gradient_quality(bundle: ModelBundle, trials: int, rng: np.random.Generator,
                          arms=DEFAULT_QUALITY_ARMS, *, population: int = 48,
                          sigma: float = 1e-3, grid: tuple[int, int] = DESK_GRID,
                          exact: bool = False,
                          blur_sigma: float = DESK_BLUR_SIGMA) -> list[GradQualityRow]:
    """Mean cosine similarity of tentative and rectified perturbations to the true gradient.

    With exact=True the NES estimate is replaced by the exact projection weights,
    which isolates the subspace choice from estimation noise.
    """
    clf = bundle.classifier
    shape = clf.shape
    videos = [smoothed_noise_video(shape, rng, blur_sigma) for _ in range(trials)]
    out = []
    for arm in arms:
        cfg = build_attack_config(UNTARGETED, bundle, tentative=arm.tentative,
                                  partition=arm.partition, population=arm.population or population,
                                  sigma=arm.sigma or sigma, grid=grid, shape=shape)
        tent_cos = np.zeros(trials)
        rect_cos = np.zeros(trials)
        for t, video in enumerate(videos):
            goal = Untargeted(int(np.argmax(clf.forward(video))))
            g_true = clf.input_gradient(video, goal)
            spec = with_noise_features(cfg.tentative, shape, rng)
            h = generate(video, spec, rng)
            basis = build_basis(h, cfg.partition, rng)
            if exact:
                weights, _ = project_onto_basis(g_true, basis)
            else:
                oracle = InProcessOracle(clf)
                counter = QueryCounter(cfg.nes.population)
                weights = nes_estimate(video, basis, oracle, goal, cfg.nes, counter, rng)
            rectified = rectify(weights, basis)
            tent_cos[t] = cosine_similarity(h, g_true)
            rect_cos[t] = cosine_similarity(rectified, g_true)
        out.append(GradQualityRow(arm.name, float(tent_cos.mean()), float(rect_cos.mean())))
    return out


def write_gradient_quality_csv(path, rows: list[GradQualityRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "tentative_cosine", "rectified_cosine"])
        for row in rows:
            writer.writerow([row.name, repr(row.tentative_cosine), repr(row.rectified_cosine)])


def sign_test_pvalue(wins: int, trials: int) -> float:
    """Exact one-sided sign test: P[Binomial(trials, 1/2) >= wins]."""
    if not 0 <= wins <= trials:
        raise ValueError("wins must lie in [0, trials]")
    total = sum(math.comb(trials, i) for i in range(wins, trials + 1))
    return total / 2.0 ** trials
