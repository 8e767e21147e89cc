"""Pipeline driver.

Each stage is independently runnable from the previous stage's artifacts
on disk, and `pipeline` chains them all: generate data, train the
embedding, embed, report similarity metrics, cluster, meta-train on
pseudo-labeled episodes, and evaluate on held-out true-label tasks. Every
run is reproducible from (config, seed); the manifest records the config
echo and a hash of every artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cfe as cfe_mod
from . import cluster as cluster_mod
from . import data as data_mod
from . import episodes as episodes_mod
from . import metalearn as meta_mod
from . import metrics as metrics_mod
from .errors import ParameterError, PlcfeError
from .numcore import derive_rng

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

# spawn keys for per-stage RNG streams
KEY_GEN = 0
KEY_CFE_INIT = 1
KEY_CFE_TRAIN = 2
KEY_SPLIT = 3
KEY_CLUSTER = 4
KEY_META = 5
KEY_EVAL = 6
KEY_TASKS = 7


@dataclass
class DatasetSection:
    classes: int = 8
    per_class: int = 100
    dim: int = 16
    separation: float = 6.0
    test_fraction: float = 0.2

    def __post_init__(self):
        if not (0 < self.test_fraction < 1):
            raise ParameterError("dataset.test_fraction must be in (0, 1)")


@dataclass
class ClusterSection:
    k: int | None = None  # default: 4 x true class count
    restarts: int = 10
    max_iters: int = 100

    def __post_init__(self):
        if self.restarts < 1 or self.max_iters < 1:
            raise ParameterError("cluster.restarts and cluster.max_iters must be >= 1")


@dataclass
class EvalSection:
    tasks: int = 500
    shots: tuple[int, ...] = (1,)

    def __post_init__(self):
        if self.tasks < 1 or any(s < 1 for s in self.shots):
            raise ParameterError("eval.tasks and every eval.shots entry must be >= 1")


@dataclass
class PipelineConfig:
    seed: int = 1234
    out_dir: str = "runs/out"
    method: str = "maml"
    episode_mode: str = "standard"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    augment: data_mod.AugmentConfig = field(
        default_factory=lambda: data_mod.AugmentConfig(noise_std=1.25, scale_range=(0.9, 1.1))
    )
    cfe: cfe_mod.CfeConfig = field(default_factory=cfe_mod.CfeConfig)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    episodes: episodes_mod.EpisodeConfig = field(default_factory=episodes_mod.EpisodeConfig)
    maml: meta_mod.MamlConfig = field(default_factory=meta_mod.MamlConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.method not in ("maml", "proto"):
            raise ParameterError("method must be 'maml' or 'proto'")
        if self.episode_mode not in ("standard", "progressive"):
            raise ParameterError("episode_mode must be 'standard' or 'progressive'")
        self.cfe.augment = self.augment


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "augment": data_mod.AugmentConfig,
    "cfe": cfe_mod.CfeConfig,
    "cluster": ClusterSection,
    "episodes": episodes_mod.EpisodeConfig,
    "maml": meta_mod.MamlConfig,
    "eval": EvalSection,
}

_TUPLE_FIELDS = {
    ("augment", "scale_range"),
    ("cfe", "hidden_dims"),
    ("maml", "encoder_hidden"),
    ("eval", "shots"),
}


def build_config(raw: dict) -> PipelineConfig:
    """Nested dict (parsed JSON) to a validated PipelineConfig; unknown
    keys are rejected by name."""
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            section_cls = _SECTION_TYPES[key]
            if not isinstance(value, dict):
                raise ParameterError(f"config section {key!r} must be an object")
            names = {f for f in section_cls.__dataclass_fields__}
            for sub in value:
                if sub not in names:
                    raise ParameterError(f"unknown config key: {key}.{sub}")
            fixed = {
                sub: tuple(v) if (key, sub) in _TUPLE_FIELDS and v is not None else v
                for sub, v in value.items()
            }
            if key == "cfe" and "augment" in fixed:
                fixed["augment"] = data_mod.AugmentConfig(**fixed["augment"])
            kwargs[key] = section_cls(**fixed)
        elif key in ("seed", "out_dir", "method", "episode_mode"):
            kwargs[key] = value
        else:
            raise ParameterError(f"unknown config key: {key}")
    return PipelineConfig(**kwargs)


def config_to_dict(config: PipelineConfig) -> dict:
    return asdict(config)


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return build_config(json.load(fh))


def train_test_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Label-free random split, re-derivable from the seed by any stage."""
    perm = derive_rng(seed, KEY_SPLIT).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


class _Workspace:
    """Artifact paths within one output directory."""

    def __init__(self, out_dir: str):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name


def _require(ws: _Workspace, name: str, stage: str) -> Path:
    p = ws.path(name)
    if not p.exists():
        raise ParameterError(f"stage {stage!r} needs missing artifact {p}")
    return p


def stage_gen_data(config: PipelineConfig, ws: _Workspace) -> list[str]:
    ds = data_mod.gen_blobs(
        config.dataset.classes,
        config.dataset.per_class,
        config.dataset.dim,
        config.dataset.separation,
        derive_rng(config.seed, KEY_GEN),
    )
    data_mod.write_dataset(ds, ws.path("dataset.plds"))
    return ["dataset.plds"]


def stage_train_cfe(config: PipelineConfig, ws: _Workspace) -> list[str]:
    ds = data_mod.read_dataset(_require(ws, "dataset.plds", "train-cfe"))
    train_idx, _ = train_test_split(ds.n, config.dataset.test_fraction, config.seed)
    initial = cfe_mod.EncoderPair.initialize(
        ds.dim, config.cfe, derive_rng(config.seed, KEY_CFE_INIT)
    )
    cfe_mod.save_checkpoint(initial, ws.path("cfe_initial.plcf"))
    pair, trace = cfe_mod.train_cfe(
        ds.features[train_idx],
        config.cfe,
        derive_rng(config.seed, KEY_CFE_TRAIN),
        initial=initial,
    )
    cfe_mod.save_checkpoint(pair, ws.path("cfe_trained.plcf"))
    cfe_mod.write_loss_trace(trace, ws.path("cfe_loss_trace.csv"))
    return ["cfe_initial.plcf", "cfe_trained.plcf", "cfe_loss_trace.csv"]


def stage_embed(config: PipelineConfig, ws: _Workspace) -> list[str]:
    ds = data_mod.read_dataset(_require(ws, "dataset.plds", "embed"))
    pair = cfe_mod.load_checkpoint(_require(ws, "cfe_trained.plcf", "embed"))
    embeddings = cfe_mod.encode(pair, ds.features, normalize=config.cfe.normalize)
    data_mod.write_embeddings(embeddings, ws.path("embeddings.plem"))
    return ["embeddings.plem"]


def stage_metrics(config: PipelineConfig, ws: _Workspace) -> list[str]:
    """Similarity reports and 2-D projections for the initial and trained
    encoders, over the training split with true labels (evaluation path)."""
    ds = data_mod.read_dataset(_require(ws, "dataset.plds", "metrics"))
    if ds.eval_labels is None:
        raise ParameterError("metrics stage needs a labeled dataset")
    train_idx, _ = train_test_split(ds.n, config.dataset.test_fraction, config.seed)
    features = ds.features[train_idx]
    labels = ds.eval_labels[train_idx]
    out = []
    for tag, ckpt in (("initial", "cfe_initial.plcf"), ("trained", "cfe_trained.plcf")):
        pair = cfe_mod.load_checkpoint(_require(ws, ckpt, "metrics"))
        emb = cfe_mod.encode(pair, features, normalize=config.cfe.normalize)
        report = metrics_mod.similarity_ratio(
            metrics_mod.LabeledEmbeddings(emb, labels, ds.meta.classes),
            config.cfe.temperature,
        )
        metrics_mod.write_similarity_csv(report, ws.path(f"similarity_{tag}.csv"))
        points, _ = metrics_mod.pca_project_2d(emb, labels)
        metrics_mod.write_projection_csv(points, ws.path(f"pca_{tag}.csv"), labels)
        out += [f"similarity_{tag}.csv", f"pca_{tag}.csv"]
    return out


def _load_dataset_embeddings(config: PipelineConfig, ws: _Workspace, stage: str):
    ds = data_mod.read_dataset(_require(ws, "dataset.plds", stage))
    embeddings = data_mod.read_embeddings(_require(ws, "embeddings.plem", stage))
    train_idx, test_idx = train_test_split(ds.n, config.dataset.test_fraction, config.seed)
    return ds, embeddings, train_idx, test_idx


def stage_cluster(config: PipelineConfig, ws: _Workspace) -> list[str]:
    ds, embeddings, train_idx, _ = _load_dataset_embeddings(config, ws, "cluster")
    k = config.cluster.k if config.cluster.k is not None else 4 * ds.meta.classes
    model = cluster_mod.kmeans(
        embeddings[train_idx],
        k,
        max_iters=config.cluster.max_iters,
        n_restarts=config.cluster.restarts,
        rng=derive_rng(config.seed, KEY_CLUSTER),
    )
    cluster_mod.write_cluster_csv(
        model,
        ws.path("clusters_assignment.csv"),
        ws.path("clusters_centers.csv"),
        sample_indices=train_idx,
    )
    out = ["clusters_assignment.csv", "clusters_centers.csv"]
    if ds.eval_labels is not None:
        acc = metrics_mod.clustering_accuracy(model.assignment, ds.eval_labels[train_idx])
        with open(ws.path("clustering_quality.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "inertia", "hungarian_accuracy"])
            writer.writerow([k, f"{model.inertia:.17g}", f"{acc:.6f}"])
        out.append("clustering_quality.csv")
    return out


def _load_cluster_model(config: PipelineConfig, ws: _Workspace, stage: str):
    model = cluster_mod.read_cluster_csv(
        _require(ws, "clusters_assignment.csv", stage),
        _require(ws, "clusters_centers.csv", stage),
    )
    return model


def stage_meta_train(config: PipelineConfig, ws: _Workspace) -> list[str]:
    ds, _, train_idx, _ = _load_dataset_embeddings(config, ws, "meta-train")
    model = _load_cluster_model(config, ws, "meta-train")
    pld = cluster_mod.assign_pseudo_labels(model, ds.features[train_idx])
    fs_model, history = meta_mod.meta_train(
        ds.features[train_idx],
        pld,
        model,
        config.episodes,
        config.maml,
        method=config.method,
        episode_mode=config.episode_mode,
        rng=derive_rng(config.seed, KEY_META),
    )
    meta_mod.save_model(fs_model, ws.path("meta_model.plcf"))
    with open(ws.path("meta_history.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "query_loss", "progressive_fraction"])
        for epoch, loss in enumerate(history["epoch_query_loss"]):
            writer.writerow([epoch, f"{loss:.10g}", f"{history['progressive_fraction']:.6f}"])
    return ["meta_model.plcf", "meta_history.csv"]


def _test_pld(ds: data_mod.Dataset, test_idx: np.ndarray) -> cluster_mod.PseudoLabeledDataset:
    # evaluation-only: groups the held-out split by its true labels
    labels = ds.eval_labels[test_idx]
    members = [np.flatnonzero(labels == c) for c in range(ds.meta.classes)]
    return cluster_mod.PseudoLabeledDataset(
        features=ds.features[test_idx], pseudo_labels=labels.copy(), members=members
    )


def stage_meta_eval(config: PipelineConfig, ws: _Workspace) -> list[str]:
    ds = data_mod.read_dataset(_require(ws, "dataset.plds", "meta-eval"))
    if ds.eval_labels is None:
        raise ParameterError("meta-eval needs a labeled dataset")
    _, test_idx = train_test_split(ds.n, config.dataset.test_fraction, config.seed)
    fs_model = meta_mod.load_model(_require(ws, "meta_model.plcf", "meta-eval"))
    pld = _test_pld(ds, test_idx)
    out = []
    for shot_i, shots in enumerate(config.eval.shots):
        episode_cfg = episodes_mod.EpisodeConfig(
            ways=config.episodes.ways,
            shots=shots,
            queries=config.episodes.queries,
            candidate_neighbors=config.episodes.candidate_neighbors,
            keep_rate=config.episodes.keep_rate,
            gate_threshold=config.episodes.gate_threshold,
        )
        rng = derive_rng(config.seed, KEY_EVAL, shot_i)
        tasks = [
            episodes_mod.sample_standard_task(pld, episode_cfg, rng)
            for _ in range(config.eval.tasks)
        ]
        result = meta_mod.evaluate_fewshot(
            fs_model,
            pld.features,
            tasks,
            method=config.method,
            adapt=True,
            config=config.maml,
        )
        name = f"eval_{config.method}_shot{shots}.csv"
        meta_mod.write_eval_csv(result, config.episodes.ways, shots, ws.path(name))
        out.append(name)
    return out


def stage_build_tasks(config: PipelineConfig, ws: _Workspace, count: int = 100) -> list[str]:
    ds, _, train_idx, _ = _load_dataset_embeddings(config, ws, "build-tasks")
    model = _load_cluster_model(config, ws, "build-tasks")
    pld = cluster_mod.assign_pseudo_labels(model, ds.features[train_idx])
    rng = derive_rng(config.seed, KEY_TASKS)
    if config.episode_mode == "progressive":
        fs_model = meta_mod.load_model(_require(ws, "meta_model.plcf", "build-tasks"))
        eval_model = meta_mod.snapshot_eval_model(
            fs_model, epoch=-1, method=config.method, inner_lr=config.maml.inner_lr
        )
        tasks = [
            episodes_mod.sample_progressive_task(pld, model, eval_model, config.episodes, rng)
            for _ in range(count)
        ]
    else:
        tasks = [
            episodes_mod.sample_standard_task(pld, config.episodes, rng) for _ in range(count)
        ]
    episodes_mod.write_tasks_csv(tasks, ws.path("tasks.csv"))
    return ["tasks.csv"]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def run_pipeline(config: PipelineConfig, ws: _Workspace) -> dict:
    """All stages in order; returns the manifest dict."""
    stages = [
        ("gen-data", stage_gen_data),
        ("train-cfe", stage_train_cfe),
        ("embed", stage_embed),
        ("metrics", stage_metrics),
        ("cluster", stage_cluster),
        ("meta-train", stage_meta_train),
        ("meta-eval", stage_meta_eval),
    ]
    artifacts: dict[str, str] = {}
    for name, fn in stages:
        produced = fn(config, ws)
        for artifact in produced:
            artifacts[artifact] = _sha256(ws.path(artifact))
    manifest = {
        "config": config_to_dict(config),
        "seed": config.seed,
        "stages": [name for name, _ in stages],
        "artifacts": artifacts,
    }
    with open(ws.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


_STAGES = {
    "gen-data": stage_gen_data,
    "train-cfe": stage_train_cfe,
    "embed": stage_embed,
    "metrics": stage_metrics,
    "cluster": stage_cluster,
    "build-tasks": stage_build_tasks,
    "meta-train": stage_meta_train,
    "meta-eval": stage_meta_eval,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plcfe",
        description="Pseudo-labeling with clustering-friendly embeddings: pipeline driver.",
    )
    parser.add_argument("command", choices=sorted(_STAGES) + ["pipeline"])
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--method", choices=["maml", "proto"])
    parser.add_argument("--episodes", choices=["standard", "progressive"], dest="episode_mode")
    parser.add_argument("--ways", type=int)
    parser.add_argument("--shots", type=int)
    parser.add_argument("--queries", type=int)
    parser.add_argument("--tasks", type=int, help="task count for build-tasks")
    return parser


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    if args.method is not None:
        config.method = args.method
    if args.episode_mode is not None:
        config.episode_mode = args.episode_mode
    episode_kwargs = {}
    if args.ways is not None:
        episode_kwargs["ways"] = args.ways
    if args.shots is not None:
        episode_kwargs["shots"] = args.shots
    if args.queries is not None:
        episode_kwargs["queries"] = args.queries
    if episode_kwargs:
        base = asdict(config.episodes)
        base.update(episode_kwargs)
        config.episodes = episodes_mod.EpisodeConfig(**base)
    return config


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        config = _apply_overrides(config, args)
    except (ParameterError, json.JSONDecodeError, OSError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    ws = _Workspace(config.out_dir)
    try:
        if args.command == "pipeline":
            manifest = run_pipeline(config, ws)
            print(f"pipeline done: {len(manifest['artifacts'])} artifacts in {ws.root}")
        elif args.command == "build-tasks":
            produced = stage_build_tasks(config, ws, count=args.tasks or 100)
            print(f"{args.command}: wrote {', '.join(produced)}")
        else:
            produced = _STAGES[args.command](config, ws)
            print(f"{args.command}: wrote {', '.join(produced)}")
    except ParameterError as exc:
        print(f"validation error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PlcfeError as exc:
        print(f"stage {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
