"""Command line interface.

Subcommands: build-db, embed, retrieve, train, evaluate, gradcheck,
synth-gen, pipeline. Exit codes: 0 ok, 2 config error, 3 data error,
4 numeric check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from retrocap import __version__
from retrocap.captioner import Captioner, CaptionerConfig, pack_captions, xent_loss
from retrocap.conditioning import ImageConditioner, grad_check
from retrocap.crops import Granularity
from retrocap.descdb import (
    CanonLexicon,
    DescriptionDb,
    build_database,
    parse_annotations,
)
from retrocap.embed import (
    EmbeddingStore,
    MockEmbedder,
    read_store_file,
    write_store_file,
    mock_embed,
)
from retrocap.errors import ConfigError, DataError, NumericCheckError
from retrocap.metrics import bleu_scores, build_idf, cider, tokenize
from retrocap.pipeline import (
    apply_overrides,
    load_dataset_dir,
    resolve_config,
    run_pipeline,
    write_gold,
    write_scenes,
)
from retrocap.retrieval import batch_retrieve
from retrocap.embed import write_store_file
from retrocap.synth import SceneEmbedder, generate_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _cmd_build_db(args) -> int:
    lex = CanonLexicon.load(args.lexicon) if args.lexicon else CanonLexicon.empty()
    with open(args.attrs, "rb") as fa, open(args.rels, "rb") as fr:
        result = parse_annotations(fa, fr, strict=args.strict)
    db = build_database(result.attributes, result.relationships, lex)
    db.save(args.out)
    print(
        f"parsed {len(result.attributes)} attribute and "
        f"{len(result.relationships)} relationship records "
        f"({len(result.errors)} skipped); database size {len(db)} -> {args.out}"
    )
    for issue in result.errors:
        print(f"  skipped {issue.source}:{issue.line}: {issue.message}",
              file=sys.stderr)
    return EXIT_OK


def _cmd_embed(args) -> int:
    db = DescriptionDb.load(args.db)
    if len(db) == 0:
        raise DataError("description database is empty")
    vectors = np.stack([
        mock_embed(b"txt:" + d.text.encode("utf-8"), args.dim, args.seed)
        for d in db.descriptions
    ])
    store = EmbeddingStore(
        dim=args.dim,
        ids=np.array([d.id for d in db.descriptions], dtype=np.uint64),
        vectors=vectors,
    )
    write_store_file(store, args.out)
    print(f"embedded {len(store)} descriptions (dim {args.dim}) -> {args.out}")
    return EXIT_OK


def _payload_dims(payload: bytes) -> tuple[int, int] | None:
    try:
        doc = json.loads(payload)
        return int(doc["width"]), int(doc["height"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        return None


def _cmd_retrieve(args) -> int:
    store = read_store_file(args.store)
    DescriptionDb.load(args.db)  # validated for id consistency with hits
    with open(args.image, "rb") as f:
        payload = f.read()
    dims = (args.width, args.height) if args.width and args.height else None
    if dims is None:
        dims = _payload_dims(payload)
    if dims is None:
        raise ConfigError("payload has no embedded dimensions; pass --width/--height")
    if args.embedder == "scene":
        embedder = SceneEmbedder(dim=store.dim, seed=args.seed)
    else:
        embedder = MockEmbedder(dim=store.dim, seed=args.seed)
    rset = batch_retrieve(payload, dims[0], dims[1], embedder, store, args.k)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(rset.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{rset.total_hits()} hits over {len(rset.per_crop)} crops -> {args.out}")
    return EXIT_OK


def _cmd_synth_gen(args) -> int:
    dataset = generate_dataset(args.n, args.seed, dim=args.dim)
    os.makedirs(args.out, exist_ok=True)
    write_scenes(dataset.scenes, os.path.join(args.out, "scenes.jsonl"))
    write_gold(dataset.scenes, os.path.join(args.out, "gold.jsonl"))
    dataset.db.save(os.path.join(args.out, "descdb.jsonl"))
    write_store_file(dataset.store, os.path.join(args.out, "keys.xemb"))
    print(
        f"{len(dataset.scenes)} scenes, database size {len(dataset.db)} -> {args.out}"
    )
    return EXIT_OK


def _cmd_train(args) -> int:
    from retrocap.pipeline import _train_and_report
    from retrocap.training import prepare_features

    config = _load_config(args)
    dataset = load_dataset_dir(args.data)
    feats, vocab = prepare_features(dataset, k=config["retrieval"]["k"])
    os.makedirs(args.out, exist_ok=True)
    report = _train_and_report(
        config, feats, vocab,
        with_text=config["model"]["text"],
        conditioning=config["model"]["conditioning"],
        seed=config["seed"], out_prefix="", out_dir=args.out, log=print,
    )
    print(json.dumps(report["metrics"], indent=2, sort_keys=True))
    return EXIT_OK


def _read_token_lines(path) -> list[list[list[str]]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append([tokenize(alt) for alt in line.split("\t") if alt.strip()])
    return rows


def _cmd_evaluate(args) -> int:
    hyps = _read_token_lines(args.hyp)
    refs = _read_token_lines(args.refs)
    with open(args.corpus, "r", encoding="utf-8") as f:
        corpus = [tokenize(line) for line in f if line.strip()]
    if len(hyps) != len(refs):
        raise DataError(
            f"hypothesis/reference line counts differ: {len(hyps)} vs {len(refs)}"
        )
    if not hyps:
        raise DataError("no hypotheses to evaluate")
    stats = build_idf(corpus)
    totals = {f"bleu{n}": 0.0 for n in range(1, 5)}
    totals["cider"] = 0.0
    for hyp_row, ref_row in zip(hyps, refs):
        hyp = hyp_row[0]
        for key, val in bleu_scores(hyp, ref_row).items():
            totals[key] += val
        totals["cider"] += cider(hyp, ref_row, stats)
    out = {k: v / len(hyps) for k, v in totals.items()}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    worst_cond, worst_cap = 0.0, 0.0
    for seed in range(args.seeds):
        g = np.random.default_rng(seed)
        cond = ImageConditioner(d_o=6, d_t=5, d_x=4, d=7, method="fc",
                                dropout=0.2, seed=seed)
        objects = g.standard_normal((2, 3, 6))
        text = {gran: g.standard_normal((2, n * 2, 5))
                for gran, n in ((Granularity.ORIGINAL, 1), (Granularity.FIVE, 5),
                                (Granularity.NINE, 9))}
        f_x = g.standard_normal((2, 4))
        target = g.standard_normal((2, cond.token_count(3, 2), 7))

        def cond_loss(_):
            z, cache = cond.forward(objects, text, f_x, mode="train", seed=seed)
            grads, _, _ = cond.backward(z - target, cache)
            return 0.5 * float(np.sum((z - target) ** 2)), grads

        worst_cond = max(worst_cond, grad_check(
            cond_loss, cond.params, eps=1e-5, coords_per_param=8, seed=seed))

        cfg = CaptionerConfig(vocab_size=7, d=16, layers=1, heads=2,
                              max_len=8, ffn_mult=2)
        model = Captioner(cfg, seed=seed)
        model.params["out.W"] = 0.3 * g.standard_normal((16, 7))
        z = g.standard_normal((2, 4, 16))
        ids_in, targets, weight = pack_captions([[3, 4, 5], [4, 6]], cfg.max_len)

        def cap_loss(_):
            logits, cache = model.forward_train(z, ids_in)
            loss, dlogits = xent_loss(logits, targets, weight)
            grads, _ = model.backward(dlogits, cache)
            return loss, grads

        worst_cap = max(worst_cap, grad_check(
            cap_loss, model.params, eps=1e-5, coords_per_param=6, seed=seed))

    print(f"conditioning max relative error: {worst_cond:.3e} (bound 1e-5)")
    print(f"captioner    max relative error: {worst_cap:.3e} (bound 1e-4)")
    if worst_cond >= 1e-5 or worst_cap >= 1e-4:
        raise NumericCheckError("gradient check failed")
    return EXIT_OK


def _load_config(args) -> dict:
    user = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {args.config}: invalid JSON ({e})") from e
    config = resolve_config(user)
    if getattr(args, "set", None):
        config = apply_overrides(config, args.set)
    return config


def _cmd_pipeline(args) -> int:
    config = _load_config(args)
    run_pipeline(config, args.out, log=print)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrocap",
        description="Retrieval-augmented captioning pipeline at desk scale",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-db", help="parse annotations into a description db")
    p.add_argument("--attrs", required=True)
    p.add_argument("--rels", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true",
                   help="abort on the first malformed record")
    p.set_defaults(fn=_cmd_build_db)

    p = sub.add_parser("embed", help="embed database descriptions as search keys")
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("retrieve", help="crop-based top-k retrieval for one image")
    p.add_argument("--db", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--embedder", choices=("mock", "scene"), default="mock")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_retrieve)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset directory")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.set_defaults(fn=_cmd_synth_gen)

    p = sub.add_parser("train", help="train on a synth-gen data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="score hypothesis captions")
    p.add_argument("--hyp", required=True)
    p.add_argument("--refs", required=True,
                   help="per line: tab-separated alternative references")
    p.add_argument("--corpus", required=True, help="IDF corpus, one caption per line")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("pipeline", help="run synth -> retrieve -> train -> evaluate")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=_cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericCheckError as e:
        print(f"numeric check failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # stage failures carry their cause's category
        cause = getattr(e, "cause", None)
        if isinstance(cause, ConfigError):
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(cause, NumericCheckError):
            print(f"numeric check failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
