"""Image conditioning: per-stream layer-norm + linear refinement of tokens.

Each object token and each retrieved-text token is concatenated with the
global image feature, layer-normalized, mapped to the model dimension by a
stream-specific linear layer, and passed through inverted dropout:

    out = drop(fc_s(norm_s([token, f_x])))

The four streams (objects, t_original, t_five, t_nine) share f_x but have
disjoint parameters. Text tokens additionally receive a learnable embedding
per crop slot (15 total, shared across ranks) added before concatenation.

All forward ops return an explicit cache and have hand-derived backward
passes in float64; `grad_check` verifies any (loss, grads) closure against
central finite differences.

Conditioning variants for comparison experiments:

* ``fc``   - the default described above.
* ``none`` - capacity-matched ablation: same norm+fc+drop per stream but
             without the f_x concatenation.
* ``tf-v`` - streams processed as in ``none``; f_x becomes one extra token
             through its own norm+fc stack, appended to the sequence.
* ``tf-g`` - like ``tf-v`` but appending a grid of region features
             (the nine-crop embeddings) instead of a single token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from retrocap import rng
from retrocap.crops import ALL_CROP_IDS, CROP_COUNTS, Granularity
from retrocap.errors import ConfigError

STREAMS = ("objects", "t_original", "t_five", "t_nine")
TEXT_STREAMS = {
    Granularity.ORIGINAL: "t_original",
    Granularity.FIVE: "t_five",
    Granularity.NINE: "t_nine",
}
METHODS = ("fc", "none", "tf-v", "tf-g")

# crop slot index for the learnable embeddings: original 0, five 1-5, nine 6-14
CROP_SLOT = {
    (g, j): i for i, (g, j) in enumerate(ALL_CROP_IDS)
}
N_CROP_SLOTS = len(CROP_SLOT)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Row-wise layer norm with population variance. Returns (y, cache)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    y = gain * xhat + bias
    return y, (xhat, inv, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """y = x @ W + b. Returns (y, cache)."""
    if x.shape[-1] != W.shape[0]:
        raise ConfigError(f"affine shape mismatch: {x.shape} @ {W.shape}")
    return x @ W + b, (x, W)


def affine_backward(dy: np.ndarray, cache):
    x, W = cache
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


def dropout_mask(seed: int, n_tokens: int, d: int, rate: float) -> np.ndarray:
    """Inverted-dropout mask, deterministic per (seed, token index).

    Row i of the mask comes from the uniform stream keyed by (seed, i);
    entries are 1/(1-rate) where the uniform >= rate, else 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones((n_tokens, d))
    states = rng.derive_states(seed, np.arange(n_tokens, dtype=np.uint64))
    u = rng.uniform_matrix(states, d)
    return np.where(u >= rate, 1.0 / (1.0 - rate), 0.0)


@dataclass
class ConditionedTokens:
    tokens: np.ndarray          # (n, d)
    stream_tags: list[str] = field(default_factory=list)


def condition_tokens(
    stream: str,
    inputs: np.ndarray,
    f_x: np.ndarray | None,
    params: dict,
    dropout_rate: float,
    mode: str,
    rng_seed: int,
):
    """One stream of the conditioning stack. Returns (ConditionedTokens, cache).

    `inputs` is (n, d_token); for text streams the crop embedding must
    already be added. `f_x` is broadcast to every token ((d_x,) vector) or
    given per token ((n, d_x)); None skips the concatenation (the `none`
    ablation and the tf-* token streams).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    if f_x is None:
        x = inputs
        d_fx = 0
    else:
        f_x = np.asarray(f_x, dtype=np.float64)
        fx_rows = np.broadcast_to(f_x, (n, f_x.shape[-1])) if f_x.ndim == 1 else f_x
        d_fx = fx_rows.shape[1]
        x = np.concatenate([inputs, fx_rows], axis=1)

    normed, ln_cache = layer_norm(x, params["gain"], params["bias"])
    projected, aff_cache = affine(normed, params["W"], params["b"])
    if mode == "train" and dropout_rate > 0.0:
        mask = dropout_mask(rng_seed, n, projected.shape[1], dropout_rate)
    else:
        mask = None
    out = projected * mask if mask is not None else projected
    cache = (ln_cache, aff_cache, mask, inputs.shape[1], d_fx, stream)
    return ConditionedTokens(tokens=out, stream_tags=[stream] * n), cache


def condition_tokens_backward(dout: np.ndarray, cache):
    """Gradients for one stream: dict with inputs, f_x, gain, bias, W, b.

    d_f_x is returned per token (n, d_x); callers broadcasting one shared
    f_x sum over rows. None when the stream ran without f_x.
    """
    ln_cache, aff_cache, mask, d_token, d_fx, stream = cache
    dproj = dout * mask if mask is not None else dout
    dnormed, dW, db = affine_backward(dproj, aff_cache)
    dx, dgain, dbias = layer_norm_backward(dnormed, ln_cache)
    dinputs = dx[:, :d_token]
    dfx = dx[:, d_token:] if d_fx else None
    return {
        "inputs": dinputs,
        "f_x": dfx,
        "gain": dgain,
        "bias": dbias,
        "W": dW,
        "b": db,
    }


def grad_check(f, params: dict[str, np.ndarray], eps: float = 1e-5,
               coords_per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    `f(params) -> (loss, grads)` must be pure. When `coords_per_param` is
    set, that many coordinates per parameter are sampled instead of sweeping
    all of them.
    """
    if not 0.0 < eps <= 1e-2:
        raise ConfigError("eps must be in (0, 1e-2]")
    _, grads = f(params)
    g = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        n = flat.size
        if coords_per_param is not None and coords_per_param < n:
            coords = g.choice(n, size=coords_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi, _ = f(params)
            flat[i] = orig - eps
            lo, _ = f(params)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = grads[name].reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an) + abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


def _init_stream(g: np.random.Generator, d_in: int, d: int) -> dict:
    return {
        "gain": np.ones(d_in),
        "bias": np.zeros(d_in),
        "W": g.standard_normal((d_in, d)) / np.sqrt(d_in),
        "b": np.zeros(d),
    }


class ImageConditioner:
    """The full conditioning stage over all streams, batch-aware.

    Parameters live in a flat dict (``<stream>.gain`` etc. plus
    ``crop_emb``) so the optimizer and checkpointing can treat conditioning
    and captioner uniformly.
    """

    def __init__(
        self,
        d_o: int = 64,
        d_t: int = 64,
        d_x: int = 64,
        d: int = 128,
        method: str = "fc",
        dropout: float = 0.1,
        seed: int = 0,
    ):
        if method not in METHODS:
            raise ConfigError(f"unknown conditioning method {method!r}")
        self.d_o, self.d_t, self.d_x, self.d = d_o, d_t, d_x, d
        self.method = method
        self.dropout = dropout
        g = np.random.default_rng(seed)
        uses_fx = method == "fc"
        self.params: dict[str, np.ndarray] = {}
        for stream, d_tok in [("objects", d_o)] + [(s, d_t) for s in STREAMS[1:]]:
            d_in = d_tok + (d_x if uses_fx else 0)
            for key, val in _init_stream(g, d_in, d).items():
                self.params[f"{stream}.{key}"] = val
        self.params["crop_emb"] = 0.1 * g.standard_normal((N_CROP_SLOTS, d_t))
        if method in ("tf-v", "tf-g"):
            for key, val in _init_stream(g, d_x, d).items():
                self.params[f"image.{key}"] = val

    def _stream_params(self, stream: str) -> dict:
        return {k: self.params[f"{stream}.{k}"] for k in ("gain", "bias", "W", "b")}

    def token_count(self, n_objects: int, k: int, with_text: bool = True) -> int:
        n = n_objects
        if with_text:
            n += sum(CROP_COUNTS.values()) * k
        if self.method == "tf-v":
            n += 1
        elif self.method == "tf-g":
            n += CROP_COUNTS[Granularity.NINE]
        return n

    def forward(
        self,
        objects: np.ndarray,              # (B, n_o, d_o)
        text: dict[Granularity, np.ndarray] | None,  # each (B, c_i * k, d_t)
        f_x: np.ndarray,                  # (B, d_x)
        mode: str = "eval",
        seed: int = 0,
        grid: np.ndarray | None = None,   # (B, 9, d_x) for tf-g
    ):
        """Condition every stream and assemble z = [o^, t^_orig, t^_five, t^_nine].

        Returns (z, cache) with z of shape (B, L, d). With `text=None` the
        text streams are omitted (object-only ablation).
        """
        B = objects.shape[0]
        fx_stream = f_x if self.method == "fc" else None
        pieces, caches, layout = [], {}, []

        def run(stream, flat_inputs, fx_rows, n_per_item):
            ct, cache = condition_tokens(
                stream, flat_inputs, fx_rows, self._stream_params(stream),
                self.dropout, mode,
                rng.hash_stream_state(f"drop:{stream}".encode(), seed),
            )
            caches[stream] = cache
            pieces.append(ct.tokens.reshape(B, n_per_item, self.d))
            layout.append((stream, n_per_item))

        n_o = objects.shape[1]
        fx_obj = None
        if fx_stream is not None:
            fx_obj = np.repeat(fx_stream, n_o, axis=0)
        run("objects", objects.reshape(B * n_o, self.d_o), fx_obj, n_o)

        if text is not None:
            for gran in (Granularity.ORIGINAL, Granularity.FIVE, Granularity.NINE):
                stream = TEXT_STREAMS[gran]
                arr = np.asarray(text[gran], dtype=np.float64)
                m = arr.shape[1]
                k = m // CROP_COUNTS[gran]
                emb = self._crop_emb_rows(gran, k)          # (m, d_t)
                flat = arr.reshape(B * m, self.d_t) + np.tile(emb, (B, 1))
                fx_txt = None
                if fx_stream is not None:
                    fx_txt = np.repeat(fx_stream, m, axis=0)
                run(stream, flat, fx_txt, m)

        if self.method == "tf-v":
            run("image", f_x.reshape(B, self.d_x), None, 1)
        elif self.method == "tf-g":
            if grid is None:
                raise ConfigError("tf-g conditioning requires grid features")
            n_g = grid.shape[1]
            run("image", grid.reshape(B * n_g, self.d_x), None, n_g)

        z = np.concatenate(pieces, axis=1)
        cache = (caches, layout, B, text is not None)
        return z, cache

    def _crop_emb_rows(self, gran: Granularity, k: int) -> np.ndarray:
        slots = [CROP_SLOT[(gran, j)] for j in range(CROP_COUNTS[gran])]
        return np.repeat(self.params["crop_emb"][slots], k, axis=0)

    def backward(self, dz: np.ndarray, cache):
        """Returns (grads keyed like self.params, d_objects, d_fx)."""
        caches, layout, B, with_text = cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        d_objects = None
        d_fx = np.zeros((B, self.d_x))
        offset = 0
        for stream, n_per_item in layout:
            piece = dz[:, offset : offset + n_per_item, :]
            offset += n_per_item
            back = condition_tokens_backward(
                piece.reshape(B * n_per_item, self.d), caches[stream]
            )
            for key in ("gain", "bias", "W", "b"):
                grads[f"{stream}.{key}"] += back[key]
            if back["f_x"] is not None:
                d_fx += back["f_x"].reshape(B, n_per_item, self.d_x).sum(axis=1)
            dinp = back["inputs"]
            if stream == "objects":
                d_objects = dinp.reshape(B, n_per_item, self.d_o)
            elif stream == "image":
                d_fx += dinp.reshape(B, n_per_item, self.d_x).sum(axis=1)
            else:
                gran = next(g for g, s in TEXT_STREAMS.items() if s == stream)
                k = n_per_item // CROP_COUNTS[gran]
                slots = [CROP_SLOT[(gran, j)] for j in range(CROP_COUNTS[gran])]
                per_crop = dinp.reshape(B, CROP_COUNTS[gran], k, self.d_t)
                contrib = per_crop.sum(axis=(0, 2))
                for row, slot in enumerate(slots):
                    grads["crop_emb"][slot] += contrib[row]
        return grads, d_objects, d_fx
