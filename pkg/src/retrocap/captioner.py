"""Auto-regressive caption decoder over conditioned token sequences.

A small pre-norm transformer decoder: causal self-attention over the caption
prefix, cross-attention to the conditioned context z, and a relu MLP, all in
float64 numpy with hand-derived backward passes. There are no positional
encodings on z (it is treated as a set; crop identity arrives through the
learnable crop embeddings added upstream), while the caption prefix gets
standard sinusoidal positions.

The output projection starts at zero so the initial next-token distribution
is exactly uniform. Training helpers cover teacher-forced cross-entropy and
self-critical reward fine-tuning with the greedy decode as baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from retrocap.conditioning import layer_norm, layer_norm_backward
from retrocap.errors import ConfigError

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ["<pad>", "<bos>", "<eos>"]


@dataclass
class Vocabulary:
    words: list[str]

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ConfigError("vocabulary words must be unique")
        if any(w in SPECIALS for w in self.words):
            raise ConfigError("special tokens cannot appear as words")
        self._tokens = SPECIALS + list(self.words)
        self._index = {t: i for i, t in enumerate(self._tokens)}

    @property
    def size(self) -> int:
        return len(self._tokens)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._index[t] for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self._tokens[i] for i in ids if i not in (PAD, BOS, EOS)]


@dataclass
class CaptionerConfig:
    vocab_size: int
    d: int = 128
    layers: int = 2
    heads: int = 4
    max_len: int = 16
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.vocab_size <= len(SPECIALS):
            raise ConfigError("vocab too small")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sinusoid_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    i = np.arange(0, d, 2).astype(np.float64)
    angles = pos / np.power(10000.0, i / d)
    out = np.zeros((max_len, d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : out[:, 1::2].shape[1]])
    return out


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # (B, T, d) -> (B, H, T, dh); head-first so matmul batches over (B, H)
    b, t, d = x.shape
    return np.ascontiguousarray(x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attn_forward(params, prefix, xq, xkv, heads, causal, kv_cache=None):
    q = xq @ params[f"{prefix}.Wq"] + params[f"{prefix}.bq"]
    if kv_cache is None:
        # keys carry no bias: softmax scores are invariant to a per-key shift
        k = xkv @ params[f"{prefix}.Wk"]
        v = xkv @ params[f"{prefix}.Wv"] + params[f"{prefix}.bv"]
    else:
        k, v = kv_cache
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    dh = qh.shape[-1]
    scores = (qh @ kh.transpose(0, 1, 3, 2)) / math.sqrt(dh)    # (B, H, T, S)
    if causal:
        t, s = scores.shape[-2:]
        scores = np.where(np.tril(np.ones((t, s), dtype=bool)), scores, -np.inf)
    attn = softmax(scores)
    ctx = _merge_heads(attn @ vh)
    out = ctx @ params[f"{prefix}.Wo"] + params[f"{prefix}.bo"]
    cache = (xq, xkv, qh, kh, vh, attn, ctx)
    return out, cache


def _acc(grads, name, value):
    grads[name] = grads.get(name, 0.0) + value


def _attn_backward(dout, cache, params, prefix, heads, grads):
    xq, xkv, qh, kh, vh, attn, ctx = cache
    dh = qh.shape[-1]
    d = ctx.shape[-1]
    _acc(grads, f"{prefix}.Wo", ctx.reshape(-1, d).T @ dout.reshape(-1, dout.shape[-1]))
    _acc(grads, f"{prefix}.bo", dout.reshape(-1, dout.shape[-1]).sum(axis=0))
    dctx = _split_heads(dout @ params[f"{prefix}.Wo"].T, heads)     # (B, H, T, dh)
    dattn = dctx @ vh.transpose(0, 1, 3, 2)                         # (B, H, T, S)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx                         # (B, H, S, dh)
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores = dscores / math.sqrt(dh)
    dqh = dscores @ kh                                              # (B, H, T, dh)
    dkh = dscores.transpose(0, 1, 3, 2) @ qh                        # (B, H, S, dh)
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)

    def proj_back(dy, x, w_name, b_name):
        din = dy.shape[-1]
        _acc(grads, w_name, x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, din))
        _acc(grads, b_name, dy.reshape(-1, din).sum(axis=0))
        return dy @ params[w_name].T

    dxq = proj_back(dq, xq, f"{prefix}.Wq", f"{prefix}.bq")
    din = dk.shape[-1]
    _acc(grads, f"{prefix}.Wk", xkv.reshape(-1, xkv.shape[-1]).T @ dk.reshape(-1, din))
    dxkv = dk @ params[f"{prefix}.Wk"].T
    dxkv += proj_back(dv, xkv, f"{prefix}.Wv", f"{prefix}.bv")
    return dxq, dxkv


class Captioner:
    """Decoder-only captioner with explicit parameter dict and backward."""

    def __init__(self, config: CaptionerConfig, seed: int = 0):
        self.config = config
        g = np.random.default_rng(seed)
        d, v = config.d, config.vocab_size
        p: dict[str, np.ndarray] = {"tok_emb": 0.5 * g.standard_normal((v, d))}
        for layer in range(config.layers):
            for block in (f"L{layer}.attn", f"L{layer}.cross"):
                for w in ("Wq", "Wk", "Wv", "Wo"):
                    p[f"{block}.{w}"] = g.standard_normal((d, d)) / math.sqrt(d)
                for b in ("bq", "bv", "bo"):
                    p[f"{block}.{b}"] = np.zeros(d)
            for ln in (f"L{layer}.ln1", f"L{layer}.ln2", f"L{layer}.ln3"):
                p[f"{ln}.gain"] = np.ones(d)
                p[f"{ln}.bias"] = np.zeros(d)
            hidden = config.ffn_mult * d
            p[f"L{layer}.ffn.W1"] = g.standard_normal((d, hidden)) / math.sqrt(d)
            p[f"L{layer}.ffn.b1"] = np.zeros(hidden)
            p[f"L{layer}.ffn.W2"] = g.standard_normal((hidden, d)) / math.sqrt(hidden)
            p[f"L{layer}.ffn.b2"] = np.zeros(d)
        p["lnf.gain"] = np.ones(d)
        p["lnf.bias"] = np.zeros(d)
        p["out.W"] = np.zeros((d, v))
        p["out.b"] = np.zeros(v)
        self.params = p
        self.positions = sinusoid_positions(config.max_len + 1, d)

    # ---- forward / backward -------------------------------------------------

    def z_kv(self, z: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Precompute per-layer cross-attention keys/values for a fixed z."""
        out = []
        for layer in range(self.config.layers):
            pre = f"L{layer}.cross"
            k = z @ self.params[f"{pre}.Wk"]
            v = z @ self.params[f"{pre}.Wv"] + self.params[f"{pre}.bv"]
            out.append((k, v))
        return out

    def forward_train(self, z: np.ndarray, ids_in: np.ndarray, kv=None):
        """Teacher-forced logits for every position.

        z: (B, S, d) conditioned context; ids_in: (B, T) int token ids
        beginning with BOS. Returns (logits (B, T, V), cache).
        """
        p, cfg = self.params, self.config
        if ids_in.shape[1] > cfg.max_len:
            raise ConfigError(f"prefix length {ids_in.shape[1]} > max_len {cfg.max_len}")
        x = p["tok_emb"][ids_in] + self.positions[: ids_in.shape[1]]
        caches = {"ids_in": ids_in, "z": z, "layers": []}
        for layer in range(cfg.layers):
            lc = {}
            a, lc["ln1"] = layer_norm(x, p[f"L{layer}.ln1.gain"], p[f"L{layer}.ln1.bias"])
            sa, lc["attn"] = _attn_forward(p, f"L{layer}.attn", a, a, cfg.heads, True)
            x = x + sa
            c, lc["ln2"] = layer_norm(x, p[f"L{layer}.ln2.gain"], p[f"L{layer}.ln2.bias"])
            ca, lc["cross"] = _attn_forward(
                p, f"L{layer}.cross", c, z, cfg.heads, False,
                kv_cache=kv[layer] if kv is not None else None,
            )
            x = x + ca
            f, lc["ln3"] = layer_norm(x, p[f"L{layer}.ln3.gain"], p[f"L{layer}.ln3.bias"])
            h1 = f @ p[f"L{layer}.ffn.W1"] + p[f"L{layer}.ffn.b1"]
            r = np.maximum(h1, 0.0)
            ff = r @ p[f"L{layer}.ffn.W2"] + p[f"L{layer}.ffn.b2"]
            lc["ffn"] = (f, h1, r)
            x = x + ff
            caches["layers"].append(lc)
        hf, caches["lnf"] = layer_norm(x, p["lnf.gain"], p["lnf.bias"])
        caches["hf"] = hf
        logits = hf @ p["out.W"] + p["out.b"]
        return logits, caches

    def backward(self, dlogits: np.ndarray, caches):
        """Gradients for all parameters plus dz. Returns (grads, dz)."""
        p, cfg = self.params, self.config
        grads: dict[str, np.ndarray] = {}
        hf = caches["hf"]
        v = dlogits.shape[-1]
        _acc(grads, "out.W", hf.reshape(-1, cfg.d).T @ dlogits.reshape(-1, v))
        _acc(grads, "out.b", dlogits.reshape(-1, v).sum(axis=0))
        dx, dg, db = layer_norm_backward(dlogits @ p["out.W"].T, caches["lnf"])
        _acc(grads, "lnf.gain", dg)
        _acc(grads, "lnf.bias", db)
        dz = np.zeros_like(caches["z"])
        for layer in reversed(range(cfg.layers)):
            lc = caches["layers"][layer]
            f, h1, r = lc["ffn"]
            dff = dx
            _acc(grads, f"L{layer}.ffn.W2",
                 r.reshape(-1, r.shape[-1]).T @ dff.reshape(-1, cfg.d))
            _acc(grads, f"L{layer}.ffn.b2", dff.reshape(-1, cfg.d).sum(axis=0))
            dr = dff @ p[f"L{layer}.ffn.W2"].T
            dh1 = dr * (h1 > 0.0)
            _acc(grads, f"L{layer}.ffn.W1",
                 f.reshape(-1, cfg.d).T @ dh1.reshape(-1, dh1.shape[-1]))
            _acc(grads, f"L{layer}.ffn.b1", dh1.reshape(-1, dh1.shape[-1]).sum(axis=0))
            df, dg, db = layer_norm_backward(dh1 @ p[f"L{layer}.ffn.W1"].T, lc["ln3"])
            _acc(grads, f"L{layer}.ln3.gain", dg)
            _acc(grads, f"L{layer}.ln3.bias", db)
            dx = dx + df

            dca = dx
            dc, dz_l = _attn_backward(dca, lc["cross"], p, f"L{layer}.cross",
                                      cfg.heads, grads)
            dz += dz_l
            dc2, dg, db = layer_norm_backward(dc, lc["ln2"])
            _acc(grads, f"L{layer}.ln2.gain", dg)
            _acc(grads, f"L{layer}.ln2.bias", db)
            dx = dx + dc2

            dsa = dx
            dq, dkv = _attn_backward(dsa, lc["attn"], p, f"L{layer}.attn",
                                     cfg.heads, grads)
            da, dg, db = layer_norm_backward(dq + dkv, lc["ln1"])
            _acc(grads, f"L{layer}.ln1.gain", dg)
            _acc(grads, f"L{layer}.ln1.bias", db)
            dx = dx + da

        demb = np.zeros_like(p["tok_emb"])
        ids = caches["ids_in"]
        np.add.at(demb, ids.reshape(-1), dx.reshape(-1, cfg.d))
        grads["tok_emb"] = demb
        for name, val in self.params.items():
            if name not in grads:
                grads[name] = np.zeros_like(val)
        return grads, dz

    def next_logits(self, z: np.ndarray, prefix_ids: list[int]) -> np.ndarray:
        """Next-token logits for one example; prefix must start with BOS."""
        if not prefix_ids or prefix_ids[0] != BOS:
            raise ConfigError("prefix must start with BOS")
        ids = np.asarray([prefix_ids], dtype=np.int64)
        logits, _ = self.forward_train(z[None, :, :], ids)
        return logits[0, -1]

    # ---- decoding -----------------------------------------------------------

    def _decode_batch(self, zs: np.ndarray, max_len: int, pick):
        """Step the decoder over a batch, choosing tokens with `pick`."""
        b = zs.shape[0]
        kv = self.z_kv(zs)
        ids = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for step in range(max_len):
            logits, _ = self.forward_train(zs, ids, kv=kv)
            nxt = pick(logits[:, -1, :], step)
            nxt = np.where(done, PAD, nxt)
            done |= nxt == EOS
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            if done.all():
                break
        out = []
        for row in ids[:, 1:]:
            toks = []
            for t in row:
                if t in (EOS, PAD):
                    break
                toks.append(int(t))
            out.append(toks)
        return out

    def greedy_decode_batch(self, zs: np.ndarray, max_len: int | None = None):
        max_len = max_len or self.config.max_len - 1
        return self._decode_batch(zs, max_len, lambda lg, _: lg.argmax(axis=-1))

    def greedy_decode(self, z: np.ndarray, max_len: int | None = None) -> list[int]:
        return self.greedy_decode_batch(z[None, :, :], max_len)[0]

    def sample_decode_batch(
        self, zs: np.ndarray, max_len: int | None = None,
        temperature: float = 1.0, seed: int = 0,
    ):
        max_len = max_len or self.config.max_len - 1
        g = np.random.default_rng(seed)

        def pick(logits, _step):
            if temperature < 1e-8:
                return logits.argmax(axis=-1)
            probs = softmax(logits / temperature)
            cum = probs.cumsum(axis=-1)
            u = g.random(logits.shape[0])
            return np.minimum(
                (cum < u[:, None]).sum(axis=-1), logits.shape[-1] - 1
            )

        return self._decode_batch(zs, max_len, pick)

    def sample_decode(self, z, max_len=None, temperature=1.0, seed=0) -> list[int]:
        return self.sample_decode_batch(z[None, :, :], max_len, temperature, seed)[0]


# ---- losses and training ----------------------------------------------------


def xent_loss(logits: np.ndarray, targets: np.ndarray, weight: np.ndarray):
    """Mean CE over positions with weight > 0. Returns (loss, dlogits)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    b, t, v = logits.shape
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    total = weight.sum()
    if total <= 0:
        raise ConfigError("no unmasked target positions")
    loss = -(picked * weight).sum() / total
    dlogits = (np.exp(logp) - _one_hot(targets, v)) * (weight[..., None] / total)
    return loss, dlogits


def _one_hot(ids: np.ndarray, v: int) -> np.ndarray:
    out = np.zeros(ids.shape + (v,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def pack_captions(captions: list[list[int]], max_len: int):
    """(ids_in, targets, weight) with BOS/EOS framing and PAD fill."""
    t = min(max(len(c) for c in captions) + 1, max_len)
    ids_in = np.full((len(captions), t), PAD, dtype=np.int64)
    targets = np.full((len(captions), t), PAD, dtype=np.int64)
    weight = np.zeros((len(captions), t))
    ids_in[:, 0] = BOS
    for i, cap in enumerate(captions):
        cap = cap[: t - 1]
        ids_in[i, 1 : 1 + len(cap)] = cap
        targets[i, : len(cap)] = cap
        targets[i, len(cap)] = EOS
        weight[i, : len(cap) + 1] = 1.0
    return ids_in, targets, weight


class Adam:
    """Adam with the documented constants; state keyed like the param dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            gk = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gk
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gk * gk
            p -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def train_xent(model: Captioner, batch, lr: float = 1e-3, steps: int = 100):
    """Full-batch teacher-forced training; returns the per-step loss curve."""
    if not batch:
        raise ConfigError("empty batch")
    zs = np.stack([z for z, _ in batch])
    ids_in, targets, weight = pack_captions(
        [list(c) for _, c in batch], model.config.max_len
    )
    losses = []
    opt = Adam(model.params, lr=lr)
    for _ in range(steps):
        logits, cache = model.forward_train(zs, ids_in)
        loss, dlogits = xent_loss(logits, targets, weight)
        grads, _ = model.backward(dlogits, cache)
        opt.step(grads)
        losses.append(float(loss))
    return losses


def scst_step(
    model: Captioner,
    zs: np.ndarray,
    references: list,
    metric,
    optimizer: Adam | None = None,
    temperature: float = 1.0,
    seed: int = 0,
):
    """One self-critical step: reward(sample) - reward(greedy) weights log-probs.

    `metric(hyp_ids, refs) -> float` scores a decoded hypothesis. Returns
    (loss, mean sampled reward, mean greedy reward, dz). Gradients flow only
    through the sampled tokens' log-probabilities; when the optimizer is
    given, captioner parameters are updated in place.
    """
    greedy = model.greedy_decode_batch(zs)
    sampled = model.sample_decode_batch(zs, temperature=temperature, seed=seed)
    r_greedy = np.array([metric(h, r) for h, r in zip(greedy, references)])
    r_sample = np.array([metric(h, r) for h, r in zip(sampled, references)])
    advantage = r_sample - r_greedy

    ids_in, targets, weight = pack_captions(sampled, model.config.max_len)
    logits, cache = model.forward_train(zs, ids_in)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    b = zs.shape[0]
    loss = float(-(advantage[:, None] * picked * weight).sum() / b)
    dlogits = (
        (np.exp(logp) - _one_hot(targets, logits.shape[-1]))
        * weight[..., None] * advantage[:, None, None] / b
    )
    grads, dz = model.backward(dlogits, cache)
    if optimizer is not None:
        optimizer.step(grads)
    return loss, float(r_sample.mean()), float(r_greedy.mean()), dz
