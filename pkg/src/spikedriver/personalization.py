"""Driver-specific conditioning of the perceptual features.

Each known driver owns a learned embedding row. The row is concatenated
with the feature vector and a single linear layer compresses the result
back to the feature width, folding individual habits into how evidence
is presented to the accumulators. Drivers outside the training
vocabulary fall back to the column-wise mean of the table, which stays
out of the gradient graph: unseen drivers are evaluated, never trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .perception import uniform_fan_in


@dataclass
class EmbeddingTable:
    """Dense lookup of driver id -> embedding row.

    ``vocabulary`` maps ids to row indices 0..D-1 in insertion order;
    ``rows`` is the [D, E] parameter matrix.
    """

    vocabulary: dict[str, int]
    rows: Tensor

    @property
    def width(self) -> int:
        return self.rows.value.shape[1]


@dataclass
class PersonalizationParams:
    """Single linear layer compressing [features ++ embedding] back to features."""

    weight: Tensor  # [kC, kC + E]
    bias: Tensor    # [kC]


def init_embeddings(driver_ids: list[str], width: int,
                    rng: np.random.Generator) -> EmbeddingTable:
    # Small spread: early training should be carried by shared parameters.
    vocab = {d: i for i, d in enumerate(driver_ids)}
    rows = rng.normal(0.0, 0.1, size=(len(driver_ids), width))
    return EmbeddingTable(vocabulary=vocab, rows=Tensor(rows, requires_grad=True))


def init_personalization(n_features: int, embed_width: int,
                         rng: np.random.Generator) -> PersonalizationParams:
    return PersonalizationParams(
        weight=Tensor(uniform_fan_in(rng, n_features, n_features + embed_width),
                      requires_grad=True),
        bias=Tensor(np.zeros(n_features), requires_grad=True),
    )


def mean_embedding(table: EmbeddingTable) -> np.ndarray:
    """Column-wise mean row assigned to drivers outside the vocabulary."""
    if not table.vocabulary:
        raise ValueError("embedding table is empty; train with at least one driver")
    return table.rows.value.mean(axis=0)


def lookup(table: EmbeddingTable, driver_id: str) -> Tensor:
    """The driver's embedding row, or the detached mean row for unknown drivers."""
    if not table.vocabulary:
        raise ValueError("embedding table is empty; train with at least one driver")
    idx = table.vocabulary.get(driver_id)
    if idx is None:
        return Tensor(mean_embedding(table))
    row = ad.gather_rows(table.rows, np.array([idx]))
    return ad.reshape(row, (table.width,))


def lookup_batch(table: EmbeddingTable, driver_ids: list[str]) -> Tensor:
    """Embedding rows for a batch of drivers, [N, E]; unknown ids get the mean."""
    known = [table.vocabulary.get(d) for d in driver_ids]
    if all(i is not None for i in known):
        return ad.gather_rows(table.rows, np.array(known))
    mean = mean_embedding(table)
    if all(i is None for i in known):
        return Tensor(np.tile(mean, (len(driver_ids), 1)))
    parts = [Tensor(mean[None, :]) if i is None
             else ad.gather_rows(table.rows, np.array([i]))
             for i in known]
    return ad.concat(parts, axis=0)


def personalize(params: PersonalizationParams, features: Tensor,
                embedding: Tensor) -> Tensor:
    """Compress [features ++ embedding] back to the feature width (no activation).

    Concatenation and affine map are one fused graph node: the blend runs
    once per simulated timestep, so a short tape matters here.
    """
    weight, bias = params.weight, params.bias
    want = weight.value.shape[1]
    fv, ev = features.value, embedding.value
    split = fv.shape[-1]
    if want != split + ev.shape[-1]:
        raise ShapeError(
            f"personalize expected concatenated width {want}, got "
            f"{fv.shape} ++ {ev.shape}"
        )
    joined = np.concatenate([fv, ev], axis=fv.ndim - 1)
    value = joined @ weight.value.T + bias.value

    out, live = ad.make_node(value, (weight, bias, features, embedding))
    if live:
        batched = value.ndim == 2

        def _bw():
            g = out.grad
            if weight.requires_grad:
                ad.deposit(weight, g.T @ joined if batched else np.outer(g, joined))
            if bias.requires_grad:
                ad.deposit(bias, g.sum(axis=0) if batched else g)
            gj = g @ weight.value
            if features.requires_grad:
                ad.deposit(features, gj[..., :split])
            if embedding.requires_grad:
                ad.deposit(embedding, gj[..., split:])
        out._backward = _bw
    return out


def pca_project(table: EmbeddingTable, dims: int) -> np.ndarray:
    """Project embedding rows onto their leading principal components.

    Rows are centered by column means and decomposed by SVD; the
    projection keeps the top ``dims`` right singular vectors. Each
    component's sign is fixed so its largest-magnitude loading is
    positive, which makes the output invariant to row order.
    """
    rows = table.rows.value
    n_rows, width = rows.shape
    if n_rows < 2:
        raise ValueError(f"pca_project needs at least 2 rows, got {n_rows}")
    if not 1 <= dims <= min(n_rows, width):
        raise ValueError(
            f"dims must be in [1, {min(n_rows, width)}] for a {n_rows}x{width} table, "
            f"got {dims}"
        )
    centered = rows - rows.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:dims]
    for j in range(dims):
        lead = np.argmax(np.abs(components[j]))
        if components[j, lead] < 0.0:
            components[j] = -components[j]
    return centered @ components.T
