"""K-shot prediction, mIoU / FB-IoU metrics and the multi-run evaluation protocol."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dataset import DatasetManifest
from .episodes import Episode, FoldSpec, sample_episode
from .model import MetaLearner

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
Predictor = Callable[[Episode], np.ndarray]

# episodes per forward pass during evaluation; fixed so results never depend on workers
EVAL_CHUNK = 8


def predict_proba_kshot(model: MetaLearner, episode: Episode) -> np.ndarray:
    """``(2, H, W)`` probabilities, averaging the K supports' guidance before decoding."""
    return model.predict_proba(episode.query_image, episode.support_images, episode.support_masks)


def predict_kshot(model: MetaLearner, episode: Episode) -> np.ndarray:
    """Binary ``(H, W)`` uint8 mask: foreground where ``p_fg > 0.5``."""
    return (predict_proba_kshot(model, episode)[1] > THRESHOLD).astype(np.uint8)


def oracle_predictor(episode: Episode) -> np.ndarray:
    """Test hook: returns the ground truth."""
    return episode.query_mask.astype(np.uint8)


# --------------------------------------------------------------------- metrics


def _iou(inter: float, union: float) -> float:
    return 1.0 if union == 0 else inter / union


def miou(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    class_ids: Sequence[int],
    classes: Optional[Sequence[int]] = None,
    mode: str = "pooled",
) -> tuple[dict[int, float], float]:
    """Per-class foreground IoU and their unweighted mean.

    ``mode='pooled'`` sums intersections and unions over a class's episodes
    before dividing; ``mode='episode'`` averages per-episode IoUs. A union of
    zero counts as IoU 1 (nothing to find, nothing predicted). A class listed in
    ``classes`` with no episodes at all contributes IoU 0.
    """
    if not (len(preds) == len(gts) == len(class_ids)):
        raise ValueError(f"miou: length mismatch ({len(preds)} preds, {len(gts)} gts, {len(class_ids)} ids)")
    if mode not in ("pooled", "episode"):
        raise ValueError(f"miou: unknown mode {mode!r}")
    roster = sorted(set(int(c) for c in class_ids)) if classes is None else [int(c) for c in classes]
    inter = {c: 0 for c in roster}
    union = {c: 0 for c in roster}
    per_episode: dict[int, list[float]] = {c: [] for c in roster}
    for p, g, c in zip(preds, gts, class_ids):
        c = int(c)
        if c not in inter:
            raise ValueError(f"miou: unknown class id {c} (fold classes: {roster})")
        p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
        if p.shape != g.shape:
            raise ValueError(f"miou: prediction {p.shape} and ground truth {g.shape} differ")
        i = int(np.count_nonzero(p & g))
        u = int(np.count_nonzero(p | g))
        inter[c] += i
        union[c] += u
        per_episode[c].append(_iou(i, u))
    per_class = {}
    for c in roster:
        if not per_episode[c]:
            per_class[c] = 0.0
        elif mode == "pooled":
            per_class[c] = _iou(inter[c], union[c])
        else:
            per_class[c] = float(np.mean(per_episode[c]))
    mean = float(np.mean([per_class[c] for c in roster])) if roster else 0.0
    return per_class, mean


def fbiou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """Mean of foreground and background IoU, both pooled over all episodes."""
    if len(preds) != len(gts):
        raise ValueError(f"fbiou: length mismatch ({len(preds)} vs {len(gts)})")
    fi = fu = bi = bu = 0
    for p, g in zip(preds, gts):
        p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
        fi += int(np.count_nonzero(p & g))
        fu += int(np.count_nonzero(p | g))
        bi += int(np.count_nonzero(~p & ~g))
        bu += int(np.count_nonzero(~p | ~g))
    return 0.5 * (_iou(fi, fu) + _iou(bi, bu))


# ------------------------------------------------------------------ evaluation


@dataclass
class RunResult:
    run: int
    seed: int
    per_class: dict[int, float]
    miou: float
    fbiou: float


@dataclass
class EvalReport:
    fold: int
    classes: tuple[int, ...]
    episodes_per_run: int
    runs: list[RunResult] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    @property
    def miou(self) -> float:
        return float(np.mean([r.miou for r in self.runs]))

    @property
    def fbiou(self) -> float:
        return float(np.mean([r.fbiou for r in self.runs]))

    @property
    def per_class(self) -> dict[int, float]:
        return {c: float(np.mean([r.per_class[c] for r in self.runs])) for c in self.classes}

    @property
    def episode_count(self) -> int:
        return self.episodes_per_run * len(self.runs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "run", "seed", "class_id", "iou", "miou", "fbiou"])
        for r in self.runs:
            for c in self.classes:
                w.writerow([self.fold, r.run, r.seed, c, f"{r.per_class[c]:.6f}", f"{r.miou:.6f}", f"{r.fbiou:.6f}"])
        mean_pc = self.per_class
        for c in self.classes:
            w.writerow([self.fold, "mean", "", c, f"{mean_pc[c]:.6f}", f"{self.miou:.6f}", f"{self.fbiou:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"fold {self.fold}: classes {list(self.classes)}, {len(self.runs)} run(s) x {self.episodes_per_run} episodes",
        ]
        for r in self.runs:
            pcs = ", ".join(f"{c}:{r.per_class[c]:.4f}" for c in self.classes)
            lines.append(f"  run {r.run} (seed {r.seed}): mIoU {r.miou:.4f}  FB-IoU {r.fbiou:.4f}  [{pcs}]")
        lines.append(f"mean mIoU {self.miou:.4f}  mean FB-IoU {self.fbiou:.4f}")
        return "\n".join(lines) + "\n"


def _model_predictions(model: MetaLearner, episodes: list[Episode], workers: int) -> list[np.ndarray]:
    chunks = [episodes[i : i + EVAL_CHUNK] for i in range(0, len(episodes), EVAL_CHUNK)]

    def run(chunk: list[Episode]) -> list[np.ndarray]:
        q = np.stack([e.query_image for e in chunk])
        s = np.stack([e.support_images for e in chunk])
        m = np.stack([e.support_masks for e in chunk])
        probs = model.forward(q, s, m).probs.data
        return [(p[1] > THRESHOLD).astype(np.uint8) for p in probs]

    if workers <= 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    return [m for chunk in results for m in chunk]


def evaluate(
    model: Union[MetaLearner, Predictor],
    manifest: DatasetManifest,
    foldspec: FoldSpec,
    episodes_per_run: int = 1000,
    runs: int = 5,
    base_seed: int = 0,
    K: int = 1,
    workers: int = 1,
    mode: str = "pooled",
    on_episode: Optional[Callable[[int, int, Episode, np.ndarray], None]] = None,
) -> EvalReport:
    """Run ``runs`` evaluations with seeds ``base_seed + r`` over test-fold episodes.

    ``model`` is a :class:`MetaLearner` or any callable mapping an episode to a
    binary mask. Model weights are only read.
    """
    classes = foldspec.test_classes
    if not classes:
        raise ValueError(f"fold {foldspec.fold_index} has no test classes")
    report = EvalReport(foldspec.fold_index, classes, episodes_per_run)
    for r in range(runs):
        seed = base_seed + r
        rng = np.random.default_rng(seed)
        episodes = [sample_episode(manifest, foldspec, "test", K, rng) for _ in range(episodes_per_run)]
        if isinstance(model, MetaLearner):
            preds = _model_predictions(model, episodes, workers)
        elif workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                preds = list(pool.map(model, episodes))
        else:
            preds = [model(e) for e in episodes]
        gts = [e.query_mask for e in episodes]
        ids = [e.class_id for e in episodes]
        per_class, m = miou(preds, gts, ids, classes=classes, mode=mode)
        report.runs.append(RunResult(r, seed, per_class, m, fbiou(preds, gts)))
        logger.info("eval run %d (seed %d): mIoU %.4f", r, seed, m)
        if on_episode is not None:
            for i, (e, p) in enumerate(zip(episodes, preds)):
                on_episode(r, i, e, p)
    return report
