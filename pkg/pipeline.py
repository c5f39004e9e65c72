"""
Experiment pipeline
===================

Streaming splits, the continual training runner for every strategy and
the report writer.

Run directory layout::

    <output_dir>/config.json          experiment spec
    <output_dir>/train_log.jsonl      one record per epoch
    <output_dir>/report.json|csv      per-part metrics with runtime
    <output_dir>/metrics.json         per-part metrics without timing
    <output_dir>/checkpoints/part_<i>.<npz|json>
    <output_dir>/activations/part_<i>.csv   (audit_activations)
    <output_dir>/experiments.db       run registry
    <output_dir>/PARTIAL              only when a run aborted
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import disentangle as dt
from baselines import AGEMHook, EpisodicMemory, EWCRegularizer, emr_replay, estimate_fisher
from continual import activate_neighbors, build_masks, replay_nodes, write_activation_audit
from errors import ConfigError, DataError
from evaluator import MetricsReport, eval_threads, evaluate_stream, validation_metric
from experiment_store import ExperimentStore
from grad_core import AdamState, Parameter, load_checkpoint, save_checkpoint
from graph_store import (CitationGraph, GraphPart, StreamDataset, as_triple_array, build_adjacency,
                         load_stream, stream_statistics, Vocabulary)
from model import GraphEmbeddingModel, ModelConfig, build_model
from trainer import ReplayPlan, instance_loss, train_part, write_epoch_log

logger = logging.getLogger(__name__)

STRATEGIES = ("dicgrl", "lower", "upper", "ewc", "emr", "agem")
MODES = ("link-prediction", "node-classification")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    part_ratios: List[float] = field(default_factory=lambda: [0.8, 0.05, 0.05, 0.05, 0.05])
    within_ratios: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0
    mode: str = "link-prediction"

    def validate(self) -> "SplitSpec":
        if self.mode not in MODES:
            raise ConfigError(f"unknown split mode {self.mode}")
        if len(self.within_ratios) != 3:
            raise ConfigError("within-part ratios need train, validation and query entries")
        for name, ratios in (("part", self.part_ratios), ("within-part", self.within_ratios)):
            if not ratios:
                raise ConfigError(f"{name} ratios are empty")
            if any(not 0.0 < r <= 1.0 for r in ratios):
                raise ConfigError(f"{name} ratios must lie in (0, 1]: {ratios}")
            if abs(sum(ratios) - 1.0) > 1e-9:
                raise ConfigError(f"{name} ratios must sum to 1: {ratios}")
        return self


def largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    """Integer sizes summing to ``total``, each within 1 of ratio * total"""
    exact = np.asarray(ratios, dtype=np.float64) * total
    sizes = np.floor(exact).astype(np.int64)
    remainder = exact - sizes
    short = total - int(sizes.sum())
    for k in np.argsort(-remainder, kind="stable")[:short]:
        sizes[k] += 1
    return sizes.tolist()


def _cut(items: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    return np.split(items, np.cumsum(sizes)[:-1])


def split_stream(source: Union[np.ndarray, CitationGraph], spec: SplitSpec,
                 node_names: Sequence[str] = (), relation_names: Sequence[str] = ()) -> StreamDataset:
    """Shuffle by seed, cut into parts, then cut each part into train / validation / query"""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if isinstance(source, CitationGraph):
        if spec.mode != "node-classification":
            raise ConfigError("a citation graph needs mode node-classification")
        dataset = _split_nodes(source, spec, rng)
    else:
        if spec.mode != "link-prediction":
            raise ConfigError("a triple array needs mode link-prediction")
        dataset = _split_triples(np.asarray(source, dtype=np.int64).reshape(-1, 3), spec, rng,
                                 node_names, relation_names)
    dataset.validate()
    logger.info("Stream statistics:\n" + stream_statistics(dataset).to_string(index=False))
    return dataset


def _densify(triples: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Renumber entities and relations to 0..count-1 in id order"""
    entities = np.unique(triples[:, [0, 2]])
    relations = np.unique(triples[:, 1])
    dense = np.stack([np.searchsorted(entities, triples[:, 0]),
                      np.searchsorted(relations, triples[:, 1]),
                      np.searchsorted(entities, triples[:, 2])], axis=1).reshape(-1, 3)
    return dense.astype(np.int64), entities, relations


def _split_triples(triples: np.ndarray, spec: SplitSpec, rng: np.random.Generator,
                   node_names: Sequence[str], relation_names: Sequence[str]) -> StreamDataset:
    _, first = np.unique(triples, axis=0, return_index=True)
    if len(first) < len(triples):
        logger.warning(f"Dropped {len(triples) - len(first)} duplicate triples")
        triples = triples[np.sort(first)]
    triples, entities, relations = _densify(triples)
    for kind, used, names in (("entity", entities, node_names), ("relation", relations, relation_names)):
        if len(names) and len(used) and used[-1] >= len(names):
            raise DataError(f"{kind} id {used[-1]} has no name ({len(names)} names given)")
    if len(node_names) > len(entities) or len(relation_names) > len(relations):
        logger.info(f"Re-indexed to the {len(entities)} entities and {len(relations)} relations in use")
    shuffled = triples[rng.permutation(len(triples))]
    parts = []
    for i, chunk in enumerate(_cut(shuffled, largest_remainder(len(shuffled), spec.part_ratios))):
        train, validation, query = _cut(chunk, largest_remainder(len(chunk), spec.within_ratios))
        parts.append(GraphPart(index=i, train=train, validation=validation, query=query))
    return StreamDataset(parts, len(entities), len(relations),
                         node_names=[node_names[e] for e in entities] if len(node_names) else [],
                         relation_names=[relation_names[r] for r in relations] if len(relation_names) else [])


def _split_nodes(graph: CitationGraph, spec: SplitSpec, rng: np.random.Generator) -> StreamDataset:
    node_count = len(graph.labels)
    order = rng.permutation(node_count)
    arrival = np.empty(node_count, dtype=np.int64)
    node_parts = _cut(order, largest_remainder(node_count, spec.part_ratios))
    for i, nodes in enumerate(node_parts):
        arrival[nodes] = i

    edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    edge_part = np.maximum(arrival[edges[:, 0]], arrival[edges[:, 1]]) if len(edges) else np.zeros(0, np.int64)
    classes = set(range(int(graph.labels.max()) + 1)) if node_count else set()
    parts = []
    for i, nodes in enumerate(node_parts):
        train, validation, query = _cut(nodes, largest_remainder(len(nodes), spec.within_ratios))
        part_edges = edges[edge_part == i]
        triples = np.stack([part_edges[:, 0], np.zeros(len(part_edges), np.int64), part_edges[:, 1]], axis=1)
        missing = classes - set(graph.labels[train].tolist())
        if missing:
            logger.warning(f"Part {i} has no training nodes for classes {sorted(missing)}")
        parts.append(GraphPart(index=i, train=triples.reshape(-1, 3),
                               train_nodes=np.sort(train), validation_nodes=np.sort(validation),
                               query_nodes=np.sort(query)))
    return StreamDataset(parts, node_count, 1, node_features=graph.features, node_labels=graph.labels,
                         node_names=list(graph.node_names), relation_names=["cites"])


def synthetic_cluster_stream(clusters: int = 2, triples_per_cluster: int = 60, entities_per_cluster: int = 20,
                             bridge_entities: int = 10, relations_per_cluster: int = 3,
                             within_ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> StreamDataset:
    """One part per relation cluster; clusters share ``bridge_entities`` entities.

    Each cluster lays its entities (bridge ones included) on a line in its
    own shuffled order, and relation ``r`` links position ``i`` to position
    ``i + offset_r`` with offsets 1..relations_per_cluster. Translation
    models can fit one cluster exactly, while the bridge entities sit at
    conflicting positions across clusters.
    """
    pool_size = bridge_entities + entities_per_cluster
    capacity = sum(max(pool_size - offset, 0) for offset in range(1, relations_per_cluster + 1))
    if triples_per_cluster > capacity:
        raise ConfigError(f"a cluster of {pool_size} entities has only {capacity} distinct triples")
    rng = np.random.default_rng(seed)
    bridge = np.arange(bridge_entities)
    cluster_triples = []
    for c in range(clusters):
        own = bridge_entities + c * entities_per_cluster + np.arange(entities_per_cluster)
        line = rng.permutation(np.concatenate([bridge, own]))
        offsets = 1 + rng.permutation(relations_per_cluster)
        candidates = [(int(line[i]), c * relations_per_cluster + r, int(line[i + offset]))
                      for r, offset in enumerate(offsets) for i in range(pool_size - offset)]
        pick = np.sort(rng.choice(len(candidates), size=triples_per_cluster, replace=False))
        cluster_triples.append(as_triple_array([candidates[k] for k in pick]))

    _, entities, relations = _densify(np.concatenate(cluster_triples))
    parts = []
    for c, triples in enumerate(cluster_triples):
        dense = np.stack([np.searchsorted(entities, triples[:, 0]),
                          np.searchsorted(relations, triples[:, 1]),
                          np.searchsorted(entities, triples[:, 2])], axis=1)
        dense = dense[rng.permutation(len(dense))]
        train, validation, query = _cut(dense, largest_remainder(len(dense), within_ratios))
        parts.append(GraphPart(index=c, train=train, validation=validation, query=query))
    dataset = StreamDataset(parts, len(entities), len(relations),
                            node_names=[f"e{e}" for e in entities], relation_names=[f"r{r}" for r in relations])
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# experiment spec and configuration files
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    dataset: str = ""
    strategy: str = "dicgrl"
    output_dir: str = "runs/default"
    name: str = ""
    checkpoint_format: str = "npz"
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def run_name(self) -> str:
        return self.name or self.strategy

    def validate(self) -> "ExperimentSpec":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy}; choose from {', '.join(STRATEGIES)}")
        if self.checkpoint_format not in ("npz", "json"):
            raise ConfigError("checkpoint_format must be npz or json")
        self.model.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["model"] = self.model.to_dict()
        return values

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ExperimentSpec":
        values = dict(values)
        model = ModelConfig.from_dict(values.pop("model", {}))
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(model=model, **values)


def read_config_file(path: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment"""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    settings: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            settings[key] = value
    return settings


def convert_value(raw: Any, default: Any) -> Any:
    """Convert a string setting to the type of ``default``"""
    if not isinstance(raw, str) or isinstance(default, str):
        return raw
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot convert {raw!r} to {type(default).__name__}")
    return raw


def apply_settings(spec: ExperimentSpec, settings: Mapping[str, Any]) -> ExperimentSpec:
    """Overlay settings on a spec; model keys go to the model config"""
    model_keys = {f.name for f in fields(ModelConfig)}
    spec_keys = {f.name for f in fields(ExperimentSpec)} - {"model"}
    for key, value in settings.items():
        if key in model_keys:
            setattr(spec.model, key, convert_value(value, getattr(spec.model, key)))
        elif key in spec_keys:
            setattr(spec, key, convert_value(value, getattr(spec, key)))
        else:
            raise ConfigError(f"unknown setting {key!r}")
    return spec


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _checkpoint_path(output_dir: str, part: int, fmt: str) -> str:
    return os.path.join(output_dir, "checkpoints", f"part_{part}.{fmt}")


def _dump_json(payload: Any, path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_reports(spec: ExperimentSpec, reports: List[MetricsReport]):
    out = spec.output_dir
    _dump_json({"name": spec.run_name, "strategy": spec.strategy,
                "parts": [r.to_dict() for r in reports]}, os.path.join(out, "report.json"))
    _dump_json({"name": spec.run_name, "strategy": spec.strategy,
                "parts": [r.to_dict(timing=False) for r in reports]}, os.path.join(out, "metrics.json"))
    rows = [{k: v for k, v in r.to_dict().items() if k != "per_part"} for r in reports]
    frame = pd.DataFrame(rows)
    frame.insert(0, "strategy", spec.strategy)
    frame.to_csv(os.path.join(out, "report.csv"), index=False)


def _component_replay(dataset: StreamDataset, part: GraphPart, model: GraphEmbeddingModel,
                   spec: ExperimentSpec) -> Tuple[Optional[ReplayPlan], int]:
    config = spec.model
    index = build_adjacency(dataset.parts, part.index - 1)
    if model.node_mode:
        model.freeze_pairs()
    records = activate_neighbors(part, index, model, config)
    if config.audit_activations:
        write_activation_audit(records, os.path.join(spec.output_dir, "activations", f"part_{part.index}.csv"),
                               dataset.node_names, dataset.relation_names)
    if not records:
        return None, 0
    masks = build_masks(records, model.node_count, model.K)
    if model.node_mode:
        nodes = replay_nodes(records, dataset.labelled_train_nodes(part.index - 1))
        return ReplayPlan(nodes=nodes, masks=masks), len(nodes)
    return ReplayPlan(triples=as_triple_array([r.old for r in records]),
                      selected=np.array([r.selected for r in records], dtype=np.int64),
                      masks=masks), len(records)


def _memory_mixer(memory: EpisodicMemory, batch_size: int):
    def mix(new_batches: List[np.ndarray], rng: np.random.Generator) -> List[Tuple[str, np.ndarray]]:
        return emr_replay(memory, new_batches, batch_size, seed=int(rng.integers(2 ** 31)))
    return mix


def run_experiment(spec: ExperimentSpec, dataset: Optional[StreamDataset] = None) -> List[MetricsReport]:
    """Train and evaluate part by part with the configured strategy"""
    spec.validate()
    config = spec.model
    if dataset is None:
        dataset = load_stream(spec.dataset)
    node_mode = dataset.mode == "node-classification"
    out = spec.output_dir
    os.makedirs(out, exist_ok=True)
    for stale in ("PARTIAL", "train_log.jsonl"):
        if os.path.exists(os.path.join(out, stale)):
            os.remove(os.path.join(out, stale))
    _dump_json(spec.to_dict(), os.path.join(out, "config.json"))

    model = build_model(config, dataset)
    initial = model.state_dict()
    optimizer = AdamState(lr=config.lr)
    store = ExperimentStore(os.path.join(out, "experiments.db"))
    experiment_id = store.create_experiment(spec.run_name, spec.strategy, spec.to_dict())
    threads = eval_threads()
    labels = dataset.node_labels

    memory = EpisodicMemory(config.memory_budget, config.seed) if spec.strategy in ("emr", "agem") else None
    ewc = EWCRegularizer(model.parameters, config.ewc_lambda) if spec.strategy == "ewc" else None
    agem = AGEMHook(memory, config.batch_size, labels) if spec.strategy == "agem" else None

    logger.info(f"Run {spec.run_name}: strategy={spec.strategy}, {len(dataset.parts)} parts, mode={dataset.mode}")
    reports: List[MetricsReport] = []
    completed = -1
    try:
        for part in dataset.parts:
            i = part.index
            started = time.perf_counter()
            if node_mode:
                model.use_adjacency(build_adjacency(dataset.parts, i))
            if config.reset_optimizer:
                optimizer.reset()

            target, replay, regularizer, hook, replayed = part, None, None, None, 0
            if spec.strategy == "upper":
                model.load_state_dict(initial)
                optimizer = AdamState(lr=config.lr)
                target = GraphPart(index=i, train=dataset.train_union(i),
                                   train_nodes=dataset.labelled_train_nodes(i))
                history = dataset.labelled_train_nodes(i - 1) if node_mode else dataset.train_union(i - 1)
                replayed = len(history) if i > 0 else 0
            elif spec.strategy == "dicgrl" and i > 0:
                replay, replayed = _component_replay(dataset, part, model, spec)
            elif spec.strategy == "emr" and len(memory):
                stored = memory.items()
                replay = ReplayPlan(nodes=stored) if node_mode else ReplayPlan(triples=stored)
                replay.mix = _memory_mixer(memory, config.batch_size)
                replayed = len(stored)
            elif spec.strategy == "ewc" and ewc.fishers:
                regularizer = ewc
            elif spec.strategy == "agem" and len(memory):
                hook = agem
                replayed = len(memory)

            validate = None
            if config.validation_interval:
                validate = lambda: validation_metric(dataset, i, model)  # noqa: E731
            records = train_part(target, model, optimizer, replay,
                                 known=dataset.known_triples(i), candidates=dataset.train_entities(i),
                                 labels=labels, regularizer=regularizer, gradient_hook=hook, validate=validate)
            write_epoch_log(records, os.path.join(out, "train_log.jsonl"))
            store.log_epochs(experiment_id, [r.to_dict() for r in records])

            new_data = part.train_nodes if node_mode else part.train
            if ewc is not None and len(new_data):
                rng = np.random.default_rng([config.seed, i, 1])
                size = min(config.fisher_samples, len(new_data))
                sample = new_data[np.sort(rng.choice(len(new_data), size=size, replace=False))]
                ewc.fishers.append(estimate_fisher(
                    sample, model.parameters(), lambda tape, batch: instance_loss(tape, model, batch, labels)))
                logger.info(f"Anchored Fisher information on {size} instances of part {i}")
            if memory is not None:
                memory.add(new_data)

            report = evaluate_stream(dataset, i, model, threads, config.show_progress)
            report.runtime_s = time.perf_counter() - started
            report.replayed_instances = int(replayed)
            save_checkpoint(model.state_dict(), _checkpoint_path(out, i, spec.checkpoint_format))
            reports.append(report)
            store.log_part(experiment_id, report.to_dict())
            _write_reports(spec, reports)
            completed = i
    except Exception as e:
        logger.error(f"Run {spec.run_name} aborted after part {completed}: {e}")
        _dump_json({"last_completed_part": completed, "error": f"{type(e).__name__}: {e}"},
                   os.path.join(out, "PARTIAL"))
        store.set_status(experiment_id, "failed", str(e))
        raise
    store.set_status(experiment_id, "completed")
    logger.info(f"Run {spec.run_name} finished; results in {out}")
    return reports


def load_run_spec(run_dir: str) -> ExperimentSpec:
    path = os.path.join(run_dir, "config.json")
    if not os.path.exists(path):
        raise DataError(f"missing run file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return ExperimentSpec.from_dict(json.load(f))


def _latest_checkpoint(run_dir: str, spec: ExperimentSpec, part: Optional[int]) -> Tuple[int, str]:
    folder = os.path.join(run_dir, "checkpoints")
    if part is None:
        found = sorted(int(name.split("_")[1].split(".")[0]) for name in os.listdir(folder)
                       if name.startswith("part_")) if os.path.isdir(folder) else []
        if not found:
            raise DataError(f"no checkpoints in {folder}")
        part = found[-1]
    path = _checkpoint_path(run_dir, part, spec.checkpoint_format)
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint: {path}")
    return part, path


def evaluate_checkpoint(run_dir: str, stream_dir: Optional[str] = None, part: Optional[int] = None) -> MetricsReport:
    """Re-evaluate a saved checkpoint on query sets 0..part"""
    spec = load_run_spec(run_dir)
    dataset = load_stream(stream_dir or spec.dataset)
    part, path = _latest_checkpoint(run_dir, spec, part)
    if part >= len(dataset.parts):
        raise DataError(f"checkpoint part {part} does not exist in a {len(dataset.parts)}-part stream")
    model = build_model(spec.model, dataset)
    if model.node_mode:
        model.use_adjacency(build_adjacency(dataset.parts, part))
    model.load_state_dict(load_checkpoint(path))
    return evaluate_stream(dataset, part, model, eval_threads(), spec.model.show_progress)


def _relation_names(spec: ExperimentSpec) -> List[str]:
    path = os.path.join(spec.dataset, "relations.dict") if spec.dataset else ""
    return Vocabulary.load(path).names if path and os.path.exists(path) else []


def emit_report(run_dir: str) -> Dict[str, str]:
    """Consolidate every run under ``run_dir`` into summary tables and attention dumps"""
    runs = []
    for root, dirs, files in os.walk(run_dir):
        dirs.sort()
        if "report.json" in files:
            with open(os.path.join(root, "report.json"), "r", encoding="utf-8") as f:
                runs.append((root, json.load(f)))
    if not runs:
        raise DataError(f"no completed parts found under {run_dir}")

    rows = []
    for _, payload in runs:
        for entry in payload["parts"]:
            row = {"strategy": payload["strategy"], "name": payload["name"]}
            row.update({k: v for k, v in entry.items() if k != "per_part"})
            rows.append(row)
    table = pd.DataFrame(rows).sort_values(["strategy", "name", "part"], kind="stable").reset_index(drop=True)

    written = {}
    written["summary_csv"] = os.path.join(run_dir, "summary.csv")
    table.to_csv(written["summary_csv"], index=False)
    written["summary_json"] = os.path.join(run_dir, "summary.json")
    _dump_json(table.to_dict(orient="records"), written["summary_json"])
    written["runtime_csv"] = os.path.join(run_dir, "runtime.csv")
    table[["strategy", "name", "part", "runtime_s", "replayed_instances"]].to_csv(written["runtime_csv"], index=False)

    for root, payload in runs:
        try:
            spec = load_run_spec(root)
            _, path = _latest_checkpoint(root, spec, None)
        except DataError as e:
            logger.warning(f"No attention dump for {root}: {e}")
            continue
        arrays = load_checkpoint(path)
        if "attention_logits" not in arrays:
            continue
        table_state = dt.DisentangledTable(
            node_components=Parameter("node_components", arrays["node_components"]),
            relation_embeddings=Parameter("relation_embeddings", arrays["relation_embeddings"]),
            attention_logits=Parameter("attention_logits", arrays["attention_logits"]),
            n=spec.model.n,
        )
        key = f"attention_{payload['strategy']}_{payload['name']}"
        written[key] = os.path.join(run_dir, f"{key}.csv")
        dt.dump_relation_attention(table_state, _relation_names(spec), written[key])
    logger.info(f"Report for {len(runs)} runs written to {run_dir}")
    return written
