"""In-memory pipeline steps shared by the CLI stages, scripts and tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from mllmrec import descriptor, graph
from mllmrec.config import GraphConfig, PipelineConfig, TrainConfig
from mllmrec.corpus import DatasetSplit, RawInteractions, index, kcore_filter, split
from mllmrec.embedder import Encoder, encode_texts
from mllmrec.evaluate import MetricsReport, evaluate
from mllmrec.model import TrainResult, train

VARIANTS = ("full", "no_gd", "no_te", "no_gcn")


def prepare(raw: RawInteractions, k: int = 5, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    return split(index(kcore_filter(raw, k)), ratios, seed)


@dataclass
class Described:
    items: list[descriptor.ItemRecord]
    users: list[descriptor.UserRecord]
    report: descriptor.DescribeReport


def describe(split_: DatasetSplit, items: list[descriptor.ItemRecord],
             client: descriptor.MllmClient, dataset: str,
             cache: descriptor.ResponseCache | None = None, cap: int = 50,
             separator: str = descriptor.DEFAULT_SEPARATOR, concurrency: int = 1) -> Described:
    report = descriptor.describe_items(client, items, dataset, cache, separator, concurrency)
    users, report = descriptor.describe_users(client, split_.train, items, cache, cap,
                                              concurrency, report)
    return Described(items, users, report)


def encode(encoder: Encoder, described: Described) -> tuple[np.ndarray, np.ndarray]:
    """(item features E0, user preference embeddings)."""
    item_texts = [r.multimodal_desc for r in described.items]
    user_texts = [r.preference_text for r in described.users]
    for kind, texts in (("item", item_texts), ("user", user_texts)):
        missing = [i for i, t in enumerate(texts) if not t]
        if missing:
            raise descriptor.DescriptorError(f"{len(missing)} {kind}s have no text to encode "
                                             f"(first: {missing[0]})")
    return encode_texts(encoder, item_texts), encode_texts(encoder, user_texts)


def variant_graph_config(cfg: GraphConfig, variant: str) -> GraphConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "no_gd":
        return dataclasses.replace(cfg, alpha=graph.DISABLED_THRESHOLD)
    if variant == "no_te":
        return dataclasses.replace(cfg, use_cooccur=False)
    if variant == "no_gcn":
        return dataclasses.replace(cfg, layers=0)
    return cfg


def item_features(e0: np.ndarray, split_: DatasetSplit, cfg: GraphConfig,
                  variant: str = "full") -> tuple[np.ndarray, dict[str, graph.SparseGraph] | None]:
    """Propagated item features for a variant, plus the graphs that produced them."""
    cfg = variant_graph_config(cfg, variant)
    if variant == "no_gcn":
        return np.array(e0, dtype=np.float64, copy=True), None
    graphs = graph.build_refined_graph(e0, split_.train, cfg.k_semantic, cfg.alpha,
                                       cfg.k_cooccur, cfg.use_cooccur, cfg.symmetrize)
    return graph.propagate(graphs["normalized"], e0, cfg.layers), graphs


@dataclass
class VariantResult:
    variant: str
    train: TrainResult
    test: MetricsReport
    valid: MetricsReport


def run_variant(split_: DatasetSplit, e0: np.ndarray, user_embeds: np.ndarray,
                graph_cfg: GraphConfig, train_cfg: TrainConfig, variant: str = "full",
                ks=(10, 20), log=None) -> VariantResult:
    feats, _ = item_features(e0, split_, graph_cfg, variant)
    result = train(split_, user_embeds, feats, train_cfg, log=log)
    slope = train_cfg.leaky_slope
    return VariantResult(
        variant, result,
        evaluate(result.params, split_, user_embeds, feats, ks, "test", slope),
        evaluate(result.params, split_, user_embeds, feats, ks, "valid", slope))


def grid_points(cfg: PipelineConfig) -> list[GraphConfig]:
    return [dataclasses.replace(cfg.graph, alpha=a, k_cooccur=k)
            for a in cfg.alpha_grid for k in cfg.k_cooccur_grid]
