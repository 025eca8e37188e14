"""Automated evaluation suite: embedders, Gaussian feature statistics, the
Frechet distance, and the four report metrics (Fidelity, Agreement,
Diversity, FBD) with multi-run aggregation.

Embedding spaces are toolkit stand-ins (frozen random projection by default,
VAE posterior means as an alternative); the embedder id travels with every
report so its numbers are never confused with values from pretrained
feature extractors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, InsufficientSampleError, NumericError
from .rng import Stream

EMBED_DIM = 32
_PATCH = 16  # grayscale downsample edge before projection
RIDGE = 1e-6

EMBEDDERS = ("random-projection", "vae-encoder")


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray              # (n, D)
    source: str = "real"                # real | generated
    prompt_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.shape[0] < 1:
            raise ContractError("EmbeddingSet needs n >= 1")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def group(self, pid: str) -> np.ndarray:
        mask = [p == pid for p in self.prompt_ids]
        return self.embeddings[np.asarray(mask, dtype=bool)]

    def group_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for p in self.prompt_ids:
            seen.setdefault(p, None)
        return list(seen)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    mode: str = "full"          # full | diagonal

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class MetricReport:
    fidelity: float
    agreement: float
    diversity: float
    fbd: float
    fid_mean: float
    fid_std: float
    run_count: int
    embedder: str
    assumptions: list[str] = field(default_factory=list)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @staticmethod
    def from_json(path: str | Path) -> "MetricReport":
        return MetricReport(**json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ embedders


def _as_pixels(img) -> np.ndarray:
    px = img.pixels if hasattr(img, "pixels") else np.asarray(img)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ContractError(f"expected HxWx3 pixels, got {px.shape}")
    return px.astype(np.float64) / 255.0


def _downsample_gray(px: np.ndarray, edge: int = _PATCH) -> np.ndarray:
    gray = px.mean(axis=2)
    h, w = gray.shape
    ri = (np.arange(edge) * h) // edge
    ci = (np.arange(edge) * w) // edge
    return gray[np.ix_(ri, ci)]


def projection_matrix(seed: int) -> np.ndarray:
    return Stream(seed, "embedder-projection").normal((_PATCH * _PATCH, EMBED_DIM)) / np.sqrt(_PATCH * _PATCH)


def embed_images(images, embedder: str = "random-projection", seed: int = 0,
                 vae=None, source: str = "generated",
                 prompt_ids: list[str] | None = None) -> EmbeddingSet:
    """Map images into the evaluation feature space; rows are L2-normalized."""
    if embedder == "random-projection":
        proj = projection_matrix(seed)
        rows = [(_downsample_gray(_as_pixels(im)).reshape(-1) @ proj) for im in images]
    elif embedder == "vae-encoder":
        if vae is None:
            raise ConfigError("vae-encoder embedder needs VAE parameters")
        from .nets import vae_encode
        rows = []
        for im in images:
            x = _as_pixels(im) * 2.0 - 1.0
            mean, _, _ = vae_encode(x.transpose(2, 0, 1), vae)
            rows.append(mean.data.reshape(-1))
    else:
        raise ConfigError(f"unknown embedder {embedder!r}; choose from {EMBEDDERS}")
    emb = np.stack(rows)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    emb = emb / norms
    return EmbeddingSet(emb, source=source, prompt_ids=list(prompt_ids or []))


# ----------------------------------------------------------- gaussian algebra


def fit_gaussian(es: EmbeddingSet, mode: str = "full") -> GaussianStats:
    if es.n < 2:
        raise InsufficientSampleError(f"covariance needs n >= 2, got {es.n}")
    mu = es.embeddings.mean(axis=0)
    centered = es.embeddings - mu
    cov = centered.T @ centered / (es.n - 1)
    cov = cov + RIDGE * np.eye(es.dim)
    if mode == "diagonal":
        cov = np.diag(np.diag(cov))
    elif mode != "full":
        raise ConfigError(f"unknown covariance mode {mode!r}")
    return GaussianStats(mean=mu, cov=cov, mode=mode)


def matrix_sqrt_spd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition (negatives clamped)."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite matrix entries")
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    if g1.dim != g2.dim:
        raise ContractError(f"dimension mismatch {g1.dim} vs {g2.dim}")
    if g1.mode != g2.mode:
        raise ContractError(f"covariance mode mismatch {g1.mode} vs {g2.mode}")
    diff = g1.mean - g2.mean
    s1h = matrix_sqrt_spd(g1.cov)
    cross = matrix_sqrt_spd(s1h @ g2.cov @ s1h)
    val = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def fid(real: EmbeddingSet, gen: EmbeddingSet) -> float:
    """Frechet distance on fitted Gaussians; drops to diagonal covariance when
    either set is smaller than the embedding dimension."""
    if real.n < 2 or gen.n < 2:
        raise InsufficientSampleError("fid needs >= 2 samples on each side")
    mode = "full" if min(real.n, gen.n) >= real.dim else "diagonal"
    return frechet_distance(fit_gaussian(real, mode), fit_gaussian(gen, mode))


# -------------------------------------------------------------- report metrics


def fidelity(per_prompt_fids: list[float]) -> float:
    if not per_prompt_fids:
        raise ContractError("fidelity needs at least one per-prompt FID")
    if any(f < 0 for f in per_prompt_fids):
        raise ContractError("negative FID input")
    return 1000.0 / (1.0 + float(np.mean(per_prompt_fids)))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def agreement(orig: EmbeddingSet, rephrased: EmbeddingSet) -> float:
    """Mean cosine similarity between paired mean embeddings; groups pair by
    shared prompt id (the rephrased set is keyed by its parent prompt)."""
    keys_o, keys_r = orig.group_ids(), rephrased.group_ids()
    if set(keys_o) != set(keys_r) or not keys_o:
        raise ContractError(f"unmatched prompt pairing: {keys_o} vs {keys_r}")
    sims = [_cosine(orig.group(k).mean(axis=0), rephrased.group(k).mean(axis=0))
            for k in keys_o]
    return float(np.mean(sims))


def diversity(per_prompt: EmbeddingSet) -> float:
    """Mean cosine distance over all unordered pairs in one prompt's set."""
    n = per_prompt.n
    if n < 2:
        raise InsufficientSampleError("diversity needs >= 2 images")
    e = per_prompt.embeddings
    norms = np.linalg.norm(e, axis=1)
    norms[norms == 0.0] = 1.0
    unit = e / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    iu = np.triu_indices(n, k=1)
    return float(np.mean(1.0 - sims[iu]))


def fbd(all_real: EmbeddingSet, all_gen: EmbeddingSet) -> float:
    return fid(all_real, all_gen)


def aggregate_runs(run_fids: list[float]) -> tuple[float, float]:
    if len(run_fids) < 2:
        raise InsufficientSampleError("aggregation needs >= 2 runs")
    arr = np.asarray(run_fids, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"
