"""Synthetic multi-context corpora with parametric scale-out behavior.

Runtimes follow ``t(x) = a + b/x + c*log(x) + d*x`` with coefficients that
depend on the context's node type and dataset size, plus multiplicative
Gaussian noise. This gives data whose cross-context structure a model can
actually exploit, while an exact ground-truth curve stays available for
oracle checks in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import ContextKey, RunRecord
from .encoding import PropertyValue, fnv1a_64
from .model import PropertySchema

SYNTH_SCHEMA = PropertySchema(
    essential=(
        ("dataset_size", "natural"),
        ("dataset_characteristics", "text"),
        ("job_parameters", "text"),
        ("node_type", "text"),
    ),
    optional=(
        ("memory_mb", "natural"),
        ("cpu_cores", "natural"),
        ("job_name", "text"),
    ),
)

_NODE_TYPES = ("m5.xlarge", "c5.2xlarge", "r5.large")
_NODE_SPEED = {"m5.xlarge": 1.0, "c5.2xlarge": 0.8, "r5.large": 1.3}
_NODE_MEMORY_MB = {"m5.xlarge": 16384, "c5.2xlarge": 16384, "r5.large": 16384 // 4 * 4}
_NODE_CORES = {"m5.xlarge": 4, "c5.2xlarge": 8, "r5.large": 2}
_CHARACTERISTICS = ("uniform", "skewed", "sorted-runs", "text-en", "text-de", "mixed")
_SIZES_GB = (16, 32, 8, 24, 48, 12)

_BASE_THETA = (80.0, 600.0, 25.0, 4.0)
_SIZE_REF_GB = 16.0


@dataclass(frozen=True)
class SyntheticContext:
    """One execution context plus its exact runtime curve coefficients."""

    properties: dict
    theta: tuple[float, float, float, float]
    job_name: str

    @property
    def key(self) -> ContextKey:
        return ContextKey(tuple(
            (name, self.properties[name].value)
            for name, _ in SYNTH_SCHEMA.essential
        ))

    def true_runtime(self, x: int) -> float:
        a, b, c, d = self.theta
        return a + b / x + c * math.log(x) + d * x


def make_contexts(count: int, seed: int = 0, job_name: str = "kmeans"):
    """Deterministic family of contexts with related but distinct curves."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0)))
    contexts = []
    for i in range(count):
        node = _NODE_TYPES[i % len(_NODE_TYPES)]
        size_gb = _SIZES_GB[i % len(_SIZES_GB)]
        chars = _CHARACTERISTICS[i % len(_CHARACTERISTICS)]
        speed = _NODE_SPEED[node]
        scale = size_gb / _SIZE_REF_GB
        jitter = rng.uniform(0.95, 1.05, size=4)
        a0, b0, c0, d0 = _BASE_THETA
        theta = (
            a0 * speed * jitter[0],
            b0 * speed * scale * jitter[1],
            c0 * speed * jitter[2],
            d0 * speed * scale * jitter[3],
        )
        props = {
            "dataset_size": PropertyValue.natural(size_gb * 10**9),
            "dataset_characteristics": PropertyValue.text(chars),
            "job_parameters": PropertyValue.text(f"--k {3 + i} --iterations {5 + 2 * i}"),
            "node_type": PropertyValue.text(node),
            "memory_mb": PropertyValue.natural(_NODE_MEMORY_MB[node]),
            "cpu_cores": PropertyValue.natural(_NODE_CORES[node]),
            "job_name": PropertyValue.text(job_name),
        }
        contexts.append(SyntheticContext(props, theta, job_name))
    return contexts


def context_records(context: SyntheticContext, scale_outs=(2, 4, 6, 8, 10, 12),
                    repetitions: int = 2, noise: float = 0.05,
                    seed: int = 0) -> list[RunRecord]:
    """Noisy runtime measurements over a scale-out grid for one context."""
    key_hash = fnv1a_64(str(context.key).encode("utf-8")) & 0xFFFF
    rng = np.random.default_rng(np.random.SeedSequence((seed, key_hash)))
    records = []
    for x in scale_outs:
        for _ in range(repetitions):
            runtime = context.true_runtime(x) * (1.0 + noise * rng.standard_normal())
            records.append(RunRecord(
                scale_out=int(x),
                runtime_seconds=max(1.0, float(runtime)),
                properties=dict(context.properties),
                context=context.key,
                algorithm=context.job_name,
            ))
    return records


def corpus(contexts, scale_outs=(2, 4, 6, 8, 10, 12), repetitions: int = 2,
           noise: float = 0.05, seed: int = 0) -> list[RunRecord]:
    out = []
    for i, ctx in enumerate(contexts):
        out.extend(context_records(ctx, scale_outs, repetitions, noise, seed + i))
    return out
