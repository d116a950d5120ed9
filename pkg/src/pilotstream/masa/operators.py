"""Engine operators wrapping the analysis kernels.

kmeans: per-partition phase parses point payloads and reduces them to
sufficient statistics against the current model; the exclusive merge
phase adds the statistics and applies one model update, so the result is
independent of how records were partitioned. The model is seeded on the
first non-empty window with deterministic farthest-point centroids.

gridrec / mlem: per-message reconstruction with one timing record each;
merge concatenates the records (and forwards them to metrics).

Corrupt payloads are counted and skipped, never fatal.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Optional

import numpy as np

from ..engine import Operator, register_operator
from ..errors import MalformedPayload
from .points import (
    KMeansModel,
    farthest_point_init,
    kmeans_score,
    parse_points,
    sufficient_stats,
    update_from_stats,
)
from .tomo import decode_sinogram, gridrec_reconstruct, mlem_reconstruct, rmse

logger = logging.getLogger(__name__)


class KMeansOperator(Operator):
    """Streaming K-Means over point messages.

    Config: num_centroids (default 10), decay (default 1.0), metrics
    (optional registry). The trained model is exposed as .model.
    """

    def __init__(self, config: dict):
        self.num_centroids = int(config.get("num_centroids", 10))
        self.decay = float(config.get("decay", 1.0))
        self.metrics = config.get("metrics")
        self.model: Optional[KMeansModel] = None
        self.history: list[dict[str, Any]] = []

    def process_partition(self, partition: int, records: list) -> dict:
        batches = []
        skipped = 0
        for rec in records:
            try:
                batches.append(parse_points(rec.payload))
            except MalformedPayload as exc:
                skipped += 1
                logger.warning("kmeans skipping %s/%d@%d: %s",
                               rec.topic, rec.partition, rec.offset, exc)
        model = self.model
        if model is None or not batches:
            return {"points": batches, "skipped": skipped}
        points = batches[0] if len(batches) == 1 else np.concatenate(batches)
        assignments, cost = kmeans_score(model, points)
        mass, sums = sufficient_stats(model, points, assignments)
        return {
            "mass": mass, "sums": sums, "cost": cost,
            "count": len(points), "skipped": skipped,
        }

    def _seed_model(self, partials: dict[int, dict]) -> tuple[dict, int]:
        """First window: pool the raw points, place centroids, and restate
        the partials as statistics against the fresh model."""
        pools = [p for key in sorted(partials) for p in partials[key]["points"]]
        points = np.concatenate(pools) if pools else np.empty((0, 0))
        if len(points) < self.num_centroids:
            return {}, len(points)  # not enough data yet; stay unseeded
        centroids = farthest_point_init(points, self.num_centroids)
        self.model = KMeansModel(
            centroids, np.zeros(self.num_centroids), self.decay
        )
        restated = {}
        for key in sorted(partials):
            merged_pool = partials[key]["points"]
            if not merged_pool:
                continue
            pts = merged_pool[0] if len(merged_pool) == 1 else np.concatenate(merged_pool)
            assignments, cost = kmeans_score(self.model, pts)
            mass, sums = sufficient_stats(self.model, pts, assignments)
            restated[key] = {
                "mass": mass, "sums": sums, "cost": cost,
                "count": len(pts), "skipped": partials[key]["skipped"],
            }
        return restated, len(points)

    def merge(self, window_index: int, partials: dict[int, dict]) -> dict:
        skipped = sum(p.get("skipped", 0) for p in partials.values())
        if self.model is None:
            stats_partials, pooled = self._seed_model(partials)
            if self.model is None:
                return {"window": window_index, "records": 0, "points": pooled,
                        "cost": 0.0, "skipped": skipped, "seeded": False}
            partials = stats_partials
        mass = np.zeros(self.num_centroids)
        sums = np.zeros_like(self.model.centroids)
        cost = 0.0
        count = 0
        for key in sorted(partials):
            part = partials[key]
            if "mass" not in part:  # raw-point partial against a seeded model
                continue
            mass += part["mass"]
            sums += part["sums"]
            cost += part["cost"]
            count += part["count"]
        if count:
            self.model = update_from_stats(self.model, mass, sums)
        result = {
            "window": window_index, "points": count, "cost": cost,
            "skipped": skipped, "seeded": True,
            "weight_total": float(self.model.weights.sum()),
        }
        self.history.append(result)
        return result


class _ReconstructionOperator(Operator):
    """Shared mechanics for the per-message reconstruction operators.

    Config: iterations, grid (optional), reference (optional ground-truth
    image for RMSE), metrics (optional registry), keep_images (bool).
    """

    algorithm = "base"
    default_iterations = 1

    def __init__(self, config: dict):
        self.iterations = int(config.get("iterations", self.default_iterations))
        self.grid = config.get("grid")
        self.reference = config.get("reference")
        self.metrics = config.get("metrics")
        self.keep_images = bool(config.get("keep_images", False))
        self.images: list[np.ndarray] = []
        self.timings: list[dict[str, Any]] = []

    def _reconstruct(self, sinogram) -> np.ndarray:
        raise NotImplementedError

    def process_partition(self, partition: int, records: list) -> tuple[list[dict], int]:
        out = []
        skipped = 0
        for rec in records:
            try:
                sinogram = decode_sinogram(rec.payload)
            except MalformedPayload as exc:
                skipped += 1
                logger.warning("%s skipping %s/%d@%d: %s", self.algorithm,
                               rec.topic, rec.partition, rec.offset, exc)
                continue
            t0 = time.perf_counter()
            image = self._reconstruct(sinogram)
            millis = (time.perf_counter() - t0) * 1000.0
            error = None
            if self.reference is not None and self.reference.shape == image.shape:
                error = rmse(image, self.reference)
            out.append({
                "offset": rec.offset, "partition": partition,
                "millis": millis, "rmse": error,
                "image": image if self.keep_images else None,
            })
        return out, skipped

    def merge(self, window_index: int, partials: dict[int, tuple[list[dict], int]]) -> dict:
        records = []
        skipped = 0
        for key in sorted(partials):
            part, skip = partials[key]
            records.extend(part)
            skipped += skip
        for r in records:
            if self.keep_images and r["image"] is not None:
                self.images.append(r.pop("image"))
            else:
                r.pop("image", None)
            entry = {
                "window": window_index, "offset": r["offset"],
                "algorithm": self.algorithm, "iterations": self.iterations,
                "millis": r["millis"], "rmse": r["rmse"],
            }
            self.timings.append(entry)
            if self.metrics is not None:
                self.metrics.record_reconstruction(
                    window_index, r["offset"], self.algorithm,
                    self.iterations, r["millis"], r["rmse"],
                )
        return {"window": window_index, "processed": len(records), "skipped": skipped}


class GridrecOperator(_ReconstructionOperator):
    algorithm = "gridrec"
    default_iterations = 1

    def _reconstruct(self, sinogram) -> np.ndarray:
        return gridrec_reconstruct(sinogram, grid=self.grid)


class MlemOperator(_ReconstructionOperator):
    algorithm = "mlem"
    default_iterations = 20

    def _reconstruct(self, sinogram) -> np.ndarray:
        return mlem_reconstruct(sinogram, iterations=self.iterations, grid=self.grid)


register_operator("kmeans", KMeansOperator)
register_operator("gridrec", GridrecOperator)
register_operator("mlem", MlemOperator)
