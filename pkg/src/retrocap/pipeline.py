"""End-to-end pipeline: synthesize data, retrieve, train, evaluate.

Stages run in dependency order and are cached: each stage writes a manifest
recording the hash of its resolved config slice, its input files and its
output files. A rerun with identical config and inputs is reported as
"cached" and leaves the outputs untouched, so two fresh runs of the same
config produce byte-identical reports. Failed stages remove their partial
outputs and abort with the stage name.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from retrocap import __version__
from retrocap.captioner import Vocabulary
from retrocap.checkpoint import load_params, save_params
from retrocap.embed import read_store_file, write_store_file
from retrocap.errors import ConfigError, DataError, RetrocapError
from retrocap.retrieval import RetrievalSet, RetrievalHit, batch_retrieve
from retrocap.crops import CropId, Granularity
from retrocap.synth import (
    HEIGHT,
    WIDTH,
    Scene,
    SceneEmbedder,
    SynthDataset,
    generate_dataset,
)
from retrocap.training import (
    FeatureSet,
    TrainLog,
    build_joint,
    caption_metrics,
    prepare_features,
    reference_stats,
    scst_train,
    xe_train,
)

DEFAULT_CONFIG = {
    "seed": 7,
    "data": {"n_scenes": 2000, "dim": 64},
    "retrieval": {"k": 12},
    "crops": {"five_ratio": 0.6, "nine_ratio": 0.5},
    "model": {
        "d": 128,
        "layers": 2,
        "heads": 4,
        "max_len": 16,
        "dropout": 0.1,
        "text": True,
        "conditioning": True,
        "method": None,
    },
    "train": {"steps": 600, "batch_size": 32, "lr": 1e-3, "holdout": 200},
    "scst": {"steps": 0, "batch_size": 8, "lr": 1e-4, "temperature": 1.0},
    "ablation": False,
}


def resolve_config(user: dict | None) -> dict:
    """Overlay user config onto defaults, rejecting unknown keys."""

    def merge(defaults: dict, overlay: dict, path: str) -> dict:
        out = copy.deepcopy(defaults)
        for key, val in overlay.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {path}{key!r}")
            if isinstance(defaults[key], dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"config key {path}{key!r} must be an object")
                out[key] = merge(defaults[key], val, f"{path}{key}.")
            else:
                out[key] = val
        return out

    return merge(DEFAULT_CONFIG, user or {}, "")


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value strings (values parsed as JSON when possible)."""
    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return out


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageResult:
    name: str
    cached: bool
    outputs: dict[str, str]


class StageError(RetrocapError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Stage:
    """Cache-aware stage runner: content-addresses config + inputs + outputs."""

    def __init__(self, name: str, out_dir: str, config_slice, inputs: list[str],
                 outputs: list[str], log):
        self.name = name
        self.out_dir = out_dir
        self.key = _sha256_bytes(
            _canonical({"config": config_slice, "version": __version__})
        )
        self.inputs = inputs
        self.outputs = {os.path.basename(p): p for p in outputs}
        self.manifest_path = os.path.join(out_dir, f"{name}.manifest.json")
        self.log = log

    def _manifest(self) -> dict:
        return {
            "stage": self.name,
            "config_key": self.key,
            "inputs": {os.path.basename(p): _sha256_file(p) for p in self.inputs},
            "outputs": {n: _sha256_file(p) for n, p in self.outputs.items()},
        }

    def fresh(self) -> bool:
        if not os.path.exists(self.manifest_path):
            return False
        if not all(os.path.exists(p) for p in self.outputs.values()):
            return False
        try:
            with open(self.manifest_path) as f:
                recorded = json.load(f)
        except (OSError, json.JSONDecodeError):
            return False
        return recorded == self._manifest()

    def run(self, fn) -> StageResult:
        if self.fresh():
            self.log(f"stage {self.name}: cached")
            return StageResult(self.name, True, self.outputs)
        self.log(f"stage {self.name}: running")
        try:
            fn()
        except Exception as e:
            for path in self.outputs.values():
                if os.path.exists(path):
                    os.remove(path)
            if os.path.exists(self.manifest_path):
                os.remove(self.manifest_path)
            raise StageError(self.name, e) from e
        with open(self.manifest_path, "w") as f:
            json.dump(self._manifest(), f, indent=2, sort_keys=True)
        return StageResult(self.name, False, self.outputs)


# ---- artifact I/O ------------------------------------------------------------


def write_scenes(scenes: list[Scene], path) -> None:
    with open(path, "wb") as f:
        for scene in scenes:
            f.write(_canonical(scene.to_json()) + b"\n")


def read_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, "rb") as f:
        for line in f:
            if line.strip():
                scenes.append(Scene.from_json(json.loads(line)))
    return scenes


def write_gold(scenes: list[Scene], path) -> None:
    with open(path, "wb") as f:
        for scene in scenes:
            f.write(_canonical({"scene": scene.index,
                                "caption": scene.gold_caption()}) + b"\n")


def write_retrieval_sets(rsets: list[RetrievalSet], path) -> None:
    with open(path, "wb") as f:
        for i, rset in enumerate(rsets):
            f.write(_canonical({"scene": i, "crops": rset.to_json_dict()}) + b"\n")


def read_retrieval_sets(path) -> list[RetrievalSet]:
    out = []
    with open(path, "rb") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            per_crop = {}
            for key, hits in obj["crops"].items():
                gran, _, pos = key.partition("/")
                crop = CropId(Granularity(gran), int(pos))
                per_crop[crop] = [
                    RetrievalHit(h["id"], h["score"], h["rank"]) for h in hits
                ]
            out.append(RetrievalSet(per_crop=per_crop))
    return out


def load_dataset_dir(data_dir: str) -> SynthDataset:
    """Rebuild a SynthDataset from a synth-gen output directory."""
    from retrocap.descdb import DescriptionDb

    scenes = read_scenes(os.path.join(data_dir, "scenes.jsonl"))
    if not scenes:
        raise DataError(f"no scenes in {data_dir}")
    db = DescriptionDb.load(os.path.join(data_dir, "descdb.jsonl"))
    store = read_store_file(os.path.join(data_dir, "keys.xemb"))
    return SynthDataset(
        seed=scenes[0].seed, scenes=scenes, db=db, store=store, dim=store.dim
    )


# ---- pipeline ----------------------------------------------------------------


def _train_and_report(config, feats, vocab,*, with_text, conditioning, seed,
                      out_prefix, out_dir, log):
    model_cfg = config["model"]
    train_cfg = config["train"]
    n = len(feats)
    holdout = min(train_cfg["holdout"], n // 2)
    train_idx = np.arange(n - holdout)
    held_idx = np.arange(n - holdout, n)
    joint = build_joint(
        vocab,
        dim=feats.dim,
        model_d=model_cfg["d"],
        layers=model_cfg["layers"],
        heads=model_cfg["heads"],
        max_len=model_cfg["max_len"],
        with_text=with_text,
        conditioning=conditioning,
        method=model_cfg["method"],
        dropout=model_cfg["dropout"],
        seed=seed,
    )
    tlog = TrainLog()
    xe_train(
        joint, feats, train_idx,
        steps=train_cfg["steps"], batch_size=train_cfg["batch_size"],
        lr=train_cfg["lr"], seed=seed, log=tlog,
    )
    stats = reference_stats(feats, train_idx)
    scst_cfg = config["scst"]
    if scst_cfg["steps"] > 0:
        scst_train(
            joint, feats, train_idx, stats,
            steps=scst_cfg["steps"], batch_size=scst_cfg["batch_size"],
            lr=scst_cfg["lr"], temperature=scst_cfg["temperature"],
            seed=seed, log=tlog,
        )
    report = {
        "config": {"text": with_text, "conditioning": conditioning, "seed": seed},
        "held_out_scenes": int(holdout),
        "metrics": caption_metrics(joint, feats, held_idx, stats),
    }
    ckpt = os.path.join(out_dir, f"{out_prefix}checkpoint.bin")
    params = joint.merged_params()
    save_params(params, ckpt)
    tlog.write_csv(os.path.join(out_dir, f"{out_prefix}train_log.csv"))
    report_path = os.path.join(out_dir, f"{out_prefix}report.json")
    with open(report_path, "wb") as f:
        f.write(json.dumps(report, indent=2, sort_keys=True).encode() + b"\n")
    log(f"  report -> {report_path}")
    return report


def run_pipeline(config: dict, out_dir: str, log=print) -> dict:
    """Run all stages under out_dir; returns the final report dict."""
    config = resolve_config(config)
    os.makedirs(out_dir, exist_ok=True)
    resolved_path = os.path.join(out_dir, "resolved_config.json")
    with open(resolved_path, "wb") as f:
        f.write(json.dumps(config, indent=2, sort_keys=True).encode() + b"\n")
    log(f"resolved config -> {resolved_path}")

    seed = config["seed"]
    paths = {
        name: os.path.join(out_dir, name)
        for name in (
            "scenes.jsonl", "gold.jsonl", "descdb.jsonl", "keys.xemb",
            "tsets.jsonl",
        )
    }

    def synth_fn():
        dataset = generate_dataset(
            config["data"]["n_scenes"], seed, dim=config["data"]["dim"]
        )
        write_scenes(dataset.scenes, paths["scenes.jsonl"])
        write_gold(dataset.scenes, paths["gold.jsonl"])
        dataset.db.save(paths["descdb.jsonl"])
        write_store_file(dataset.store, paths["keys.xemb"])

    synth_stage = _Stage(
        "synth", out_dir, {"seed": seed, "data": config["data"]},
        inputs=[],
        outputs=[paths[n] for n in ("scenes.jsonl", "gold.jsonl",
                                    "descdb.jsonl", "keys.xemb")],
        log=log,
    )
    synth_stage.run(synth_fn)

    def retrieve_fn():
        dataset = load_dataset_dir(out_dir)
        embedder = SceneEmbedder(dim=dataset.dim, seed=dataset.seed)
        k = config["retrieval"]["k"]
        rsets = [
            batch_retrieve(
                scene.payload(), WIDTH, HEIGHT, embedder, dataset.store, k,
                five_ratio=config["crops"]["five_ratio"],
                nine_ratio=config["crops"]["nine_ratio"],
            )
            for scene in dataset.scenes
        ]
        write_retrieval_sets(rsets, paths["tsets.jsonl"])

    retrieve_stage = _Stage(
        "retrieve", out_dir,
        {"retrieval": config["retrieval"], "crops": config["crops"]},
        inputs=[paths[n] for n in ("scenes.jsonl", "descdb.jsonl", "keys.xemb")],
        outputs=[paths["tsets.jsonl"]],
        log=log,
    )
    retrieve_stage.run(retrieve_fn)

    dataset = load_dataset_dir(out_dir)
    feats, vocab = prepare_features(dataset, k=config["retrieval"]["k"])

    train_slice = {
        "model": config["model"], "train": config["train"],
        "scst": config["scst"], "seed": seed, "ablation": config["ablation"],
    }
    if config["ablation"]:
        grid = [
            ("baseline", False, False),
            ("cond", False, True),
            ("text", True, False),
            ("textcond", True, True),
        ]
        outputs = []
        for name, *_ in grid:
            outputs += [
                os.path.join(out_dir, f"{name}.report.json"),
                os.path.join(out_dir, f"{name}.checkpoint.bin"),
                os.path.join(out_dir, f"{name}.train_log.csv"),
            ]
        summary_path = os.path.join(out_dir, "report.json")
        outputs.append(summary_path)

        def ablation_fn():
            summary = {}
            for name, with_text, conditioning in grid:
                log(f"  ablation cell {name} (text={with_text}, cond={conditioning})")
                report = _train_and_report(
                    config, feats, vocab, with_text=with_text,
                    conditioning=conditioning, seed=seed,
                    out_prefix=f"{name}.", out_dir=out_dir, log=log,
                )
                summary[name] = report["metrics"]
            with open(summary_path, "wb") as f:
                f.write(json.dumps(summary, indent=2, sort_keys=True).encode() + b"\n")

        stage = _Stage(
            "train", out_dir, train_slice,
            inputs=[paths["tsets.jsonl"], paths["scenes.jsonl"], paths["keys.xemb"]],
            outputs=outputs, log=log,
        )
        stage.run(ablation_fn)
        with open(summary_path) as f:
            return json.load(f)

    outputs = [
        os.path.join(out_dir, "report.json"),
        os.path.join(out_dir, "checkpoint.bin"),
        os.path.join(out_dir, "train_log.csv"),
    ]

    def train_fn():
        _train_and_report(
            config, feats, vocab,
            with_text=config["model"]["text"],
            conditioning=config["model"]["conditioning"],
            seed=seed, out_prefix="", out_dir=out_dir, log=log,
        )

    stage = _Stage(
        "train", out_dir, train_slice,
        inputs=[paths["tsets.jsonl"], paths["scenes.jsonl"], paths["keys.xemb"]],
        outputs=outputs, log=log,
    )
    stage.run(train_fn)
    with open(os.path.join(out_dir, "report.json")) as f:
        return json.load(f)
