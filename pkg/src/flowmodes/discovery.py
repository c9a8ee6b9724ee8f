"""Iterative mode discovery, evaluation metrics and unguided baselines."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import GuidedSamplerConfig, sample
from .energies import (
    GuidanceConfig,
    camera_energy,
    combined_energy,
    diversity_energy,
    object_energy,
    offset_distance,
)
from .flowcore import masked_mean
from .flowio import read_flow, write_flow

MANIFEST_VERSION = 1


def derive_seed(run_seed, counter):
    """Independent per-sample seed from ``(run_seed, counter)``."""
    return int(np.random.SeedSequence([int(run_seed), int(counter)]).generate_state(1)[0])


@dataclass(frozen=True)
class StoppingRule:
    rho: float = 5.0
    max_modes: int = 6
    discard_limit: int = 2


@dataclass
class ModeSet:
    """Accepted modes in acceptance order, plus the discard history.

    ``sample_index`` is the 0-based position of each accepted mode in the
    full sequence of drawn samples (accepted and discarded).
    """

    modes: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    sample_index: list = field(default_factory=list)
    discards: list = field(default_factory=list)
    n_samples: int = 0
    stop_reason: str = ""

    def __len__(self):
        return len(self.modes)

    def accept(self, x, energy, seed):
        self.modes.append(x)
        self.energies.append(float(energy))
        self.seeds.append(int(seed))
        self.sample_index.append(self.n_samples)
        self.n_samples += 1

    def discard(self, energy, seed):
        self.discards.append({"sample_index": self.n_samples, "seed": int(seed), "energy": float(energy)})
        self.n_samples += 1

    def max_consecutive_discards(self):
        accepted = set(self.sample_index)
        run = best = 0
        for i in range(self.n_samples):
            run = 0 if i in accepted else run + 1
            best = max(best, run)
        return best

    def save(self, out_dir, prefix="mode", extra=None):
        """Write one MMFF file per mode and a ``manifest.json``; returns the manifest path."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, x in enumerate(self.modes):
            name = f"{prefix}_{i:02d}.mmff"
            write_flow(x, out_dir / name)
            entries.append({"file": name, "energy": self.energies[i], "seed": self.seeds[i],
                            "sample_index": self.sample_index[i]})
        manifest = {
            "schema_version": MANIFEST_VERSION,
            "modes": entries,
            "discards": self.discards,
            "n_samples": self.n_samples,
            "stop_reason": self.stop_reason,
        }
        if extra:
            manifest.update(extra)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, manifest_path):
        manifest_path = Path(manifest_path)
        data = json.loads(manifest_path.read_text())
        if data.get("schema_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {data.get('schema_version')}")
        ms = cls(discards=list(data.get("discards", [])), n_samples=int(data.get("n_samples", 0)),
                 stop_reason=data.get("stop_reason", ""))
        for entry in data["modes"]:
            ms.modes.append(read_flow(manifest_path.parent / entry["file"]))
            ms.energies.append(float(entry["energy"]))
            ms.seeds.append(int(entry["seed"]))
            ms.sample_index.append(int(entry["sample_index"]))
        if not ms.n_samples:
            ms.n_samples = len(ms.modes) + len(ms.discards)
        return ms


def discover_modes(denoiser, m, cfg: GuidanceConfig, gcfg: GuidedSamplerConfig, sched, shape,
                   rule: StoppingRule = StoppingRule(), seed=0, telemetry=None) -> ModeSet:
    """Sample guided modes one at a time until the stopping rule fires.

    A sample is kept iff its final combined energy against the modes kept so
    far is at most ``rule.rho``. Sampling ends after ``rule.max_modes``
    acceptances or ``rule.discard_limit`` discards in a row.
    """
    result = ModeSet()
    streak = 0
    counter = 0
    while True:
        if len(result) >= rule.max_modes:
            result.stop_reason = "max_modes"
            break
        if streak >= rule.discard_limit:
            result.stop_reason = "consecutive_discards"
            break
        s = derive_seed(seed, counter)
        counter += 1
        run_cfg = gcfg.with_seed(s)
        res = sample(denoiser, m, list(result.modes), cfg, run_cfg, sched, shape)
        if telemetry is not None:
            telemetry.append({"sample": counter - 1, "seed": s, "steps": res.telemetry,
                              "energy": res.energy})
        if res.energy <= rule.rho:
            result.accept(res.x0, res.energy, s)
            streak = 0
        else:
            result.discard(res.energy, s)
            streak += 1
    return result


def baseline_random(denoiser, m, n, seed, sched, shape, cfg: GuidanceConfig = GuidanceConfig()) -> ModeSet:
    """``n`` unguided samples, all kept. Recorded energies are against the earlier samples."""
    result = ModeSet(stop_reason="budget")
    for i in range(n):
        s = derive_seed(seed, i)
        res = sample(denoiser, m, [], cfg, GuidedSamplerConfig(guided_steps=0, seed=s), sched, shape)
        result.accept(res.x0, combined_energy(res.x0, m, result.modes, cfg), s)
    return result


def fps_select(points, n, first=0):
    """Greedy farthest-point selection by Euclidean distance; ties go to the lowest index."""
    pts = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    if n > len(pts):
        raise ValueError(f"pool of {len(pts)} is smaller than n={n}")
    chosen = [first]
    nearest = np.linalg.norm(pts - pts[first], axis=1)
    while len(chosen) < n:
        nearest[chosen] = -np.inf
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def baseline_fps(denoiser, m, n, pool_size, seed, sched, shape,
                 cfg: GuidanceConfig = GuidanceConfig()) -> ModeSet:
    """Denoise (without guidance) the ``n`` farthest-apart of ``pool_size`` starting noises."""
    if pool_size < n:
        raise ValueError(f"pool_size {pool_size} smaller than n={n}")
    seeds = [derive_seed(seed, j) for j in range(pool_size)]
    pool = [np.random.default_rng(s).standard_normal(shape) for s in seeds]
    result = ModeSet(stop_reason="budget")
    for j in fps_select(pool, n):
        res = sample(denoiser, m, [], cfg, GuidedSamplerConfig(guided_steps=0, seed=seeds[j]), sched,
                     shape, x_T=pool[j])
        result.accept(res.x0, combined_energy(res.x0, m, result.modes, cfg), seeds[j])
    return result


# --- metrics ---------------------------------------------------------------

CAMERA_SCALE = 0.1
OBJECT_SCALE = 0.01


@dataclass
class MetricsReport:
    E_d: float
    E_d_cross: float
    E_c_raw: float
    E_c: float
    E_o_raw: float
    E_o: float
    E_f: float
    E: float
    per_mode: list
    coverage: float | None = None
    labels: list | None = None
    samples_to_full_coverage: int | None = None

    def to_dict(self):
        return dict(self.__dict__)

    def table(self):
        """Plain-text table with the diverse/focused columns."""
        head = f"{'':<8}{'E':>12}{'E_d':>12}{'E_f':>12}{'E_c':>12}{'E_o':>12}"
        row = (f"{'set':<8}{self.E:>12.4f}{self.E_d:>12.4f}{self.E_f:>12.4f}"
               f"{self.E_c:>12.4f}{self.E_o:>12.4f}")
        lines = [head, row, "", f"{'mode':<8}{'E_d':>12}{'E_d_cross':>12}{'E_c':>12}{'E_o':>12}{'label':>14}"]
        for i, pm in enumerate(self.per_mode):
            lines.append(f"{i:<8}{pm['E_d']:>12.4f}{pm['E_d_cross']:>12.4f}{pm['E_c']:>12.4f}"
                         f"{pm['E_o']:>12.4f}{str(pm.get('label')):>14}")
        if self.coverage is not None:
            lines.append("")
            lines.append(f"coverage {self.coverage:.4f}  samples_to_full_coverage {self.samples_to_full_coverage}")
        return "\n".join(lines) + "\n"


def _modes_of(X):
    return list(X.modes) if isinstance(X, ModeSet) else [np.asarray(x, dtype=np.float64) for x in X]


def bank_distance(x, mu, m, cfg: GuidanceConfig):
    """Mask-restricted mean offset distance (diversity weights) between two flows."""
    return float(masked_mean(offset_distance(x, mu, cfg.diversity_weights, cfg.e_angle), m))


MATCH_RATIO = 0.25


def _excess(x, scene):
    """Squared distance to each bank mean minus the jitter's expected share ``s^2 * D``."""
    means = np.stack([np.ravel(mu) for mu in scene.means])
    flat = np.ravel(np.asarray(x, dtype=np.float64))
    return np.sum((means - flat) ** 2, axis=1) - scene.jitter**2 * flat.size


def offset_match_threshold(scene, cfg: GuidanceConfig = GuidanceConfig()):
    means = scene.means
    pair = [bank_distance(means[i], means[j], scene.mask, cfg)
            for i in range(len(means)) for j in range(i + 1, len(means))]
    return 0.5 * min(pair) if pair else math.inf


def assign_labels(modes, scene, ratio=MATCH_RATIO, rule="euclidean", cfg: GuidanceConfig = GuidanceConfig()):
    """Nearest bank label for each mode, or None for ambiguous samples.

    With ``rule="euclidean"`` (default) a mode is matched to its nearest mean
    when its excess squared distance to that mean is below ``ratio`` times
    the excess to the runner-up. With the default 0.25 a point on the segment
    between two means is matched while it is less than a third of the way
    across.

    ``rule="offset"`` instead uses the mask-restricted mean offset distance
    and matches below half the smallest distance between two bank means.
    """
    if rule == "offset":
        thr = offset_match_threshold(scene, cfg)
        out = []
        for x in modes:
            dists = [bank_distance(x, mu, scene.mask, cfg) for mu in scene.means]
            i = int(np.argmin(dists))
            out.append(scene.labels[i] if dists[i] < thr else None)
        return out
    if rule != "euclidean":
        raise ValueError(f"unknown matching rule {rule!r}")
    out = []
    for x in modes:
        ex = _excess(x, scene)
        order = np.argsort(ex, kind="stable")
        i = int(order[0])
        ok = len(ex) == 1 or max(ex[i], 0.0) < ratio * ex[order[1]]
        out.append(scene.labels[i] if ok else None)
    return out


def samples_to_coverage(labels, sample_index, all_labels):
    """1-based sample count at which every label in ``all_labels`` has been seen."""
    seen = set()
    need = set(all_labels)
    for lab, idx in zip(labels, sample_index):
        if lab is not None:
            seen.add(lab)
        if need <= seen:
            return idx + 1
    return None


def compute_metrics(X, m, cfg: GuidanceConfig = GuidanceConfig(), scene=None) -> MetricsReport:
    modes = _modes_of(X)
    if not modes:
        raise ValueError("metrics need at least one mode")
    per_mode = []
    for i, x in enumerate(modes):
        others = modes[:i] + modes[i + 1 :]
        e_d = diversity_energy(x, m, modes, cfg)
        per_mode.append({
            "E_d": e_d,
            "E_d_cross": diversity_energy(x, m, others, cfg),
            "E_c": camera_energy(x, m),
            "E_o": object_energy(x, m, cfg),
        })
    n = len(modes)
    e_d = sum(p["E_d"] for p in per_mode) / n
    e_d_cross = sum(p["E_d_cross"] for p in per_mode) / n
    e_c_raw = sum(p["E_c"] for p in per_mode) / n
    e_o_raw = sum(p["E_o"] for p in per_mode) / n
    e_c = CAMERA_SCALE * e_c_raw
    e_o = OBJECT_SCALE * e_o_raw
    e_f = 0.5 * (e_o + e_c)
    report = MetricsReport(e_d, e_d_cross, e_c_raw, e_c, e_o_raw, e_o, e_f, 0.5 * (e_d + e_f), per_mode)
    if scene is not None:
        labels = assign_labels(modes, scene)
        for pm, lab in zip(per_mode, labels):
            pm["label"] = lab
        report.labels = labels
        report.coverage = len({lab for lab in labels if lab is not None}) / len(scene.labels)
        idx = X.sample_index if isinstance(X, ModeSet) else list(range(n))
        report.samples_to_full_coverage = samples_to_coverage(labels, idx, scene.labels)
    return report
