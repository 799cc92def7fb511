"""Routing heatmaps and the inference latency benchmark.

The heatmap tool reads the flat routing log written during rollout
(step, slot, boundary, expert_id, weight), renders one heatmap per MoE
boundary (x = control step, y = canonical slot), and reports a per-boundary
switch rate: the fraction of adjacent timesteps where a slot's selected
expert changes. Tabular exports come from the same aggregation pass as the
images, so CI can diff numbers without image comparison.
"""

from __future__ import annotations

import csv
import pathlib
import time
from dataclasses import dataclass

import numpy as np

from .slots import CanonicalSlot, NUM_SLOTS

ROUTING_LOG_FIELDS = ("step", "slot", "boundary", "expert_id", "weight")


def write_routing_log(path, record_pairs) -> None:
    """record_pairs: per-plan (input_record, output_record) tuples whose
    time_index has been rewritten to the control step."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ROUTING_LOG_FIELDS)
        for pair in record_pairs:
            for record in pair:
                for row in record.to_rows():
                    writer.writerow(row)


def read_routing_log(path) -> list[dict]:
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f"routing log not found: {path}")
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append(
                {
                    "step": int(row["step"]),
                    "slot": int(row["slot"]),
                    "boundary": row["boundary"],
                    "expert_id": int(row["expert_id"]),
                    "weight": float(row["weight"]),
                }
            )
    if not rows:
        raise ValueError(f"routing log {path} is empty")
    return rows


@dataclass
class BoundaryAggregate:
    boundary: str
    grid: np.ndarray  # (NUM_SLOTS, n_steps) expert id, -1 where unobserved
    switch_rate: float


def aggregate_routing(rows: list[dict]) -> dict:
    """Single aggregation pass shared by image and tabular outputs."""
    out = {}
    for boundary in sorted({r["boundary"] for r in rows}):
        sub = [r for r in rows if r["boundary"] == boundary]
        steps = sorted({r["step"] for r in sub})
        index = {s: i for i, s in enumerate(steps)}
        grid = -np.ones((NUM_SLOTS, len(steps)), dtype=np.int64)
        for r in sub:
            grid[r["slot"], index[r["step"]]] = r["expert_id"]
        out[boundary] = BoundaryAggregate(
            boundary=boundary, grid=grid, switch_rate=switch_rate(grid)
        )
    return out


def switch_rate(grid: np.ndarray) -> float:
    """Fraction of adjacent-timestep pairs where a slot's expert changes,
    over all slots with observations."""
    pairs = 0
    switches = 0
    for row in grid:
        obs = row[row >= 0]
        if obs.size < 2:
            continue
        pairs += obs.size - 1
        switches += int((obs[1:] != obs[:-1]).sum())
    if pairs == 0:
        return 0.0
    return switches / pairs


def export_heatmaps(rows: list[dict], out_dir) -> dict:
    """Write one PNG + CSV per boundary from a shared aggregation; returns
    {boundary: {"png": path, "csv": path, "switch_rate": float}}."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregates = aggregate_routing(rows)
    results = {}
    for boundary, agg in aggregates.items():
        csv_path = out_dir / f"routing_{boundary}.csv"
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["slot"] + [str(i) for i in range(agg.grid.shape[1])])
            for slot in CanonicalSlot:
                writer.writerow([slot.key] + agg.grid[int(slot)].tolist())

        fig, ax = plt.subplots(figsize=(8, 3))
        masked = np.ma.masked_less(agg.grid, 0)
        im = ax.imshow(masked, aspect="auto", interpolation="nearest", cmap="tab20")
        ax.set_yticks(range(NUM_SLOTS))
        ax.set_yticklabels([s.key for s in CanonicalSlot], fontsize=6)
        ax.set_xlabel("control step")
        ax.set_title(f"{boundary}-boundary routing (switch rate {agg.switch_rate:.3f})")
        fig.colorbar(im, ax=ax, label="expert id")
        png_path = out_dir / f"routing_{boundary}.png"
        fig.tight_layout()
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
        results[boundary] = {
            "png": str(png_path),
            "csv": str(csv_path),
            "switch_rate": agg.switch_rate,
        }
    return results


# latency reference for the full-scale system this scales down from;
# reported for context only, never asserted against
REFERENCE_LATENCY_MS = 73.34
REFERENCE_PARAMS = "2.4B (RTX 4090)"


def measure_latency(policy, eid: int, stats, sampler, task: str = "reach",
                    trials: int = 50, warmup: int = 3, seed: int = 0) -> dict:
    """Wall time of one full high-level inference (context encode +
    future-state prediction + action sampling), warm-up excluded."""
    from .context import HistoryCache, Observation
    from . import synthworld

    if trials < 10:
        raise ValueError("trials must be >= 10")
    spec = policy.codec.spec(eid)
    state, scene = synthworld.make_scene(spec, task, seed)
    cache = HistoryCache(window=policy.cfg.history_window)
    obs = Observation(
        image=synthworld.render_frame(spec, state, scene).astype(np.float32) / 255.0,
        instruction=synthworld.scene_instruction(scene),
    )
    norm_state = stats.normalize_state(state)

    def one_inference(k):
        feats = policy.context_encoder.encode(obs)
        cache.push(feats.query)
        policy.plan(feats, cache.snapshot(), norm_state, eid, stats, sampler, seed=k)

    for k in range(warmup):
        one_inference(k)
    times = []
    for k in range(trials):
        start = time.perf_counter()
        one_inference(warmup + k)
        times.append((time.perf_counter() - start) * 1000.0)
    times = np.array(times)
    return {
        "trials": int(trials),
        "warmup": int(warmup),
        "mean_ms": float(times.mean()),
        "p50_ms": float(np.percentile(times, 50)),
        "p95_ms": float(np.percentile(times, 95)),
        "parameter_count": int(sum(p.numel() for p in policy.parameters())),
        "sampler_steps": sampler.steps,
        "reference_ms": REFERENCE_LATENCY_MS,
        "reference_params": REFERENCE_PARAMS,
    }
