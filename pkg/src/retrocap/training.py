"""Joint training of the conditioning stage and the captioner.

Per-scene inputs (object features, retrieved text-token features, the global
image feature) are precomputed once; training then runs teacher-forced
cross-entropy over minibatches with one Adam instance spanning both
parameter sets, optionally followed by self-critical fine-tuning with a
caption metric as reward.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from retrocap.captioner import (
    Adam,
    Captioner,
    CaptionerConfig,
    Vocabulary,
    pack_captions,
    scst_step,
    xent_loss,
)
from retrocap.conditioning import ImageConditioner
from retrocap.crops import Granularity, CROP_COUNTS
from retrocap.errors import ConfigError
from retrocap.metrics import NGramStats, bleu_scores, build_idf, cider
from retrocap.retrieval import batch_retrieve, full_image_embedding
from retrocap.synth import (
    HEIGHT,
    WIDTH,
    SceneEmbedder,
    SynthDataset,
    object_features,
    vocabulary_words,
)

GRANULARITIES = (Granularity.ORIGINAL, Granularity.FIVE, Granularity.NINE)


@dataclass
class FeatureSet:
    """Frozen per-scene model inputs; float32 storage, float64 compute."""

    objects: np.ndarray                      # (N, n_o, d_o)
    text: dict[Granularity, np.ndarray]     # (N, c_i * k, d_t)
    fx: np.ndarray                           # (N, d_x)
    captions: list[list[int]]
    caption_tokens: list[list[str]]
    k: int
    dim: int

    def __len__(self) -> int:
        return self.objects.shape[0]


def prepare_features(dataset: SynthDataset, k: int = 12) -> tuple[FeatureSet, Vocabulary]:
    """Run retrieval offline for every scene and freeze all model inputs."""
    vocab = Vocabulary(vocabulary_words())
    embedder = SceneEmbedder(dim=dataset.dim, seed=dataset.seed)
    n = len(dataset.scenes)
    d = dataset.dim
    objects = np.zeros((n, len(dataset.scenes[0].objects), d), dtype=np.float32)
    text = {
        g: np.zeros((n, CROP_COUNTS[g] * k, d), dtype=np.float32)
        for g in GRANULARITIES
    }
    fx = np.zeros((n, d), dtype=np.float32)
    captions, caption_tokens = [], []
    for i, scene in enumerate(dataset.scenes):
        payload = scene.payload()
        objects[i] = object_features(scene, d, dataset.seed)
        fx[i] = full_image_embedding(payload, WIDTH, HEIGHT, embedder)
        rset = batch_retrieve(payload, WIDTH, HEIGHT, embedder, dataset.store, k)
        for crop_id, hits in rset.per_crop.items():
            block = text[crop_id.granularity][i]
            for h in hits:
                block[crop_id.position * k + h.rank] = dataset.store.vectors[
                    h.description_id
                ]
        toks = scene.gold_caption()
        caption_tokens.append(toks)
        captions.append(vocab.encode(toks))
    feats = FeatureSet(
        objects=objects, text=text, fx=fx, captions=captions,
        caption_tokens=caption_tokens, k=k, dim=d,
    )
    return feats, vocab


@dataclass
class JointModel:
    conditioner: ImageConditioner
    captioner: Captioner
    vocab: Vocabulary
    with_text: bool

    def merged_params(self) -> dict[str, np.ndarray]:
        out = {f"cond.{k}": v for k, v in self.conditioner.params.items()}
        out.update({f"cap.{k}": v for k, v in self.captioner.params.items()})
        return out

    def context(self, feats: FeatureSet, idx: np.ndarray, mode: str, seed: int):
        objects = feats.objects[idx].astype(np.float64)
        text = None
        if self.with_text:
            text = {g: feats.text[g][idx].astype(np.float64) for g in GRANULARITIES}
        fx = feats.fx[idx].astype(np.float64)
        return self.conditioner.forward(objects, text, fx, mode=mode, seed=seed)


def build_joint(
    vocab: Vocabulary,
    dim: int = 64,
    model_d: int = 128,
    layers: int = 2,
    heads: int = 4,
    max_len: int = 16,
    with_text: bool = True,
    conditioning: bool = True,
    method: str | None = None,
    dropout: float = 0.1,
    seed: int = 0,
) -> JointModel:
    cond_method = method if method is not None else ("fc" if conditioning else "none")
    conditioner = ImageConditioner(
        d_o=dim, d_t=dim, d_x=dim, d=model_d, method=cond_method,
        dropout=dropout, seed=seed,
    )
    cfg = CaptionerConfig(
        vocab_size=vocab.size, d=model_d, layers=layers, heads=heads, max_len=max_len
    )
    captioner = Captioner(cfg, seed=seed + 1)
    return JointModel(conditioner, captioner, vocab, with_text)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, step: int, loss: float, reward: float | None = None):
        self.rows.append({"step": step, "loss": loss,
                          "reward": "" if reward is None else reward})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "loss", "reward"])
            w.writeheader()
            w.writerows(self.rows)


def xe_train(
    joint: JointModel,
    feats: FeatureSet,
    train_idx: np.ndarray,
    steps: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    log: TrainLog | None = None,
) -> list[float]:
    """Teacher-forced cross-entropy over shuffled minibatches."""
    if len(train_idx) == 0:
        raise ConfigError("empty training split")
    params = joint.merged_params()
    opt = Adam(params, lr=lr)
    g = np.random.default_rng(seed)
    order = g.permutation(train_idx)
    pos = 0
    losses = []
    for step in range(steps):
        if pos + batch_size > len(order):
            order = g.permutation(train_idx)
            pos = 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        z, cond_cache = joint.context(feats, idx, mode="train", seed=seed * 100003 + step)
        ids_in, targets, weight = pack_captions(
            [feats.captions[i] for i in idx], joint.captioner.config.max_len
        )
        logits, cap_cache = joint.captioner.forward_train(z, ids_in)
        loss, dlogits = xent_loss(logits, targets, weight)
        cap_grads, dz = joint.captioner.backward(dlogits, cap_cache)
        cond_grads, _, _ = joint.conditioner.backward(dz, cond_cache)
        merged = {f"cond.{k}": v for k, v in cond_grads.items()}
        merged.update({f"cap.{k}": v for k, v in cap_grads.items()})
        opt.step(merged)
        losses.append(float(loss))
        if log is not None:
            log.add(step, float(loss))
    return losses


def greedy_captions(
    joint: JointModel, feats: FeatureSet, indices: np.ndarray, batch_size: int = 64
) -> list[list[int]]:
    out = []
    for start in range(0, len(indices), batch_size):
        idx = indices[start : start + batch_size]
        z, _ = joint.context(feats, idx, mode="eval", seed=0)
        out.extend(joint.captioner.greedy_decode_batch(z))
    return out


RELATION_TOKEN_START = 2


def relation_token_accuracy(
    joint: JointModel, feats: FeatureSet, indices: np.ndarray
) -> float:
    """Greedy-decode accuracy over the relation tokens.

    Gold captions are [subject color, subject shape, predicate, object
    color, object shape]; positions 2..4 (the predicate and the object
    mention) express the relation. Positions a short decode never reaches
    count as wrong.
    """
    decoded = greedy_captions(joint, feats, indices)
    total, hit = 0, 0
    for row, i in zip(decoded, indices):
        gold = feats.captions[i]
        for pos in range(RELATION_TOKEN_START, len(gold)):
            total += 1
            if pos < len(row) and row[pos] == gold[pos]:
                hit += 1
    return hit / total if total else 0.0


def caption_metrics(
    joint: JointModel, feats: FeatureSet, indices: np.ndarray, stats: NGramStats
) -> dict:
    decoded = greedy_captions(joint, feats, indices)
    bleus = np.zeros(4)
    ciders = []
    for row, i in zip(decoded, indices):
        refs = [feats.caption_tokens[i]]
        hyp = joint.vocab.decode(row)
        if hyp:
            b = bleu_scores(hyp, refs)
            bleus += np.array([b["bleu1"], b["bleu2"], b["bleu3"], b["bleu4"]])
        ciders.append(cider(joint.vocab.decode(row), refs, stats))
    n = max(1, len(indices))
    return {
        "relation_token_accuracy": relation_token_accuracy(joint, feats, indices),
        "bleu1": bleus[0] / n,
        "bleu2": bleus[1] / n,
        "bleu3": bleus[2] / n,
        "bleu4": bleus[3] / n,
        "cider": float(np.mean(ciders)) if ciders else 0.0,
    }


def reference_stats(feats: FeatureSet, train_idx: np.ndarray) -> NGramStats:
    return build_idf([feats.caption_tokens[i] for i in train_idx])


def mean_greedy_cider(
    joint: JointModel, feats: FeatureSet, indices: np.ndarray, stats: NGramStats
) -> float:
    decoded = greedy_captions(joint, feats, indices)
    return float(
        np.mean([
            cider(joint.vocab.decode(row), [feats.caption_tokens[i]], stats)
            for row, i in zip(decoded, indices)
        ])
    )


def scst_train(
    joint: JointModel,
    feats: FeatureSet,
    train_idx: np.ndarray,
    stats: NGramStats,
    steps: int,
    batch_size: int = 8,
    lr: float = 1e-4,
    temperature: float = 1.0,
    seed: int = 0,
    log: TrainLog | None = None,
) -> list[float]:
    """Self-critical fine-tuning with the metric reward; trains both stages."""

    def metric(hyp_ids, refs):
        return cider(joint.vocab.decode(hyp_ids), refs, stats)

    cap_opt = Adam(joint.captioner.params, lr=lr)
    cond_opt = Adam(joint.conditioner.params, lr=lr)
    g = np.random.default_rng(seed)
    rewards = []
    for step in range(steps):
        idx = g.choice(train_idx, size=min(batch_size, len(train_idx)), replace=False)
        z, cond_cache = joint.context(feats, idx, mode="eval", seed=0)
        refs = [[feats.caption_tokens[i]] for i in idx]
        loss, r_sample, r_greedy, dz = scst_step(
            joint.captioner, z, refs, metric,
            optimizer=cap_opt, temperature=temperature,
            seed=seed * 1000003 + step,
        )
        cond_grads, _, _ = joint.conditioner.backward(dz, cond_cache)
        cond_opt.step(cond_grads)
        rewards.append(r_greedy)
        if log is not None:
            log.add(step, float(loss), reward=r_greedy)
    return rewards
