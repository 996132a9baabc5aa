"""Command-line entry point.

Subcommands: ``synth`` (generate a corpus), ``train``, ``eval``, ``ablate``
(component sweep), ``gradcheck`` (finite-difference suites), and ``probe``
(disentanglement measurements).  Every run writes ``run.json`` under ``--out``
echoing the full effective configuration.  Exit codes: 0 success, 1
verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .backbone import ConfigError
from .checks import run_standard_checks
from .config import (
    Config,
    load_config,
    to_model_config,
    to_synth_spec,
    to_train_config,
)
from .engine import (
    EngineError,
    Trainer,
    load_checkpoint,
    load_model_checkpoint,
    save_checkpoint,
)
from .fwg import pseudo_label
from .model import DisentangledReidNet
from .retrieval import evaluate_retrieval, extract_features, probe_accuracy
from .synth import generate_corpus, load_corpus, save_corpus
from .tensor_io import write_dstn

# Additive component rows in the conventional sweep order: attention first
# (with and without its side loss), then frame weighting (with and without its
# supervision), then both combined (with and without the variance penalty),
# then the camera-switching augmentation on top.  Non-baseline rows keep the
# disentangling and camera losses on, since the camera branch only trains with
# them.
ABLATION_ROWS: tuple[tuple[str, frozenset[str]], ...] = (
    ("baseline", frozenset()),
    ("+TLM w/o L_lr", frozenset({"tlm", "l_dis", "l_cam"})),
    ("+TLM", frozenset({"tlm", "l_lr", "l_dis", "l_cam"})),
    ("+FWG w/o L_w", frozenset({"fwg", "l_dis", "l_cam"})),
    ("+FWG", frozenset({"fwg", "l_w", "l_dis", "l_cam"})),
    ("+TLM+FWG w/o L_ic", frozenset({"tlm", "l_lr", "fwg", "l_w", "l_dis", "l_cam"})),
    ("+TLM+FWG", frozenset({"tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam"})),
    ("+TLM+FWG+SAO", frozenset({"tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam", "sao"})),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disreid",
        description="Disentangled video re-identification: corpus, training, "
        "evaluation, and verification.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    common.add_argument("--out", help="output directory (all artifacts land here)")
    common.add_argument("--seed", type=int, help="seed shorthand (corpus seed for "
                        "synth, run seed otherwise)")
    common.add_argument("--checkpoint", help="checkpoint file to load")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--ids", type=int, help="shorthand for data.ids")
    p.add_argument("--cameras", type=int, help="shorthand for data.cameras")

    p = sub.add_parser("train", parents=[common], help="train on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory (from synth)")

    p = sub.add_parser("eval", parents=[common], help="rank query against gallery")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("ablate", parents=[common], help="component sweep over seeds")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient suites")
    p.add_argument("--coords", type=int, default=32,
                   help="max coordinates checked per parameter (0 = all)")

    p = sub.add_parser("probe", parents=[common],
                       help="linear probes and disentanglement measurements")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test",
                   help="tracklets to probe (test = query + gallery)")

    return parser


def _resolve_out(args) -> Path:
    out = args.out
    if out is None:
        if args.command == "gradcheck":
            out = "runs/gradcheck"
        else:
            raise ConfigError(f"{args.command} requires --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_json(out: Path, args, config: Config, argv: list[str]) -> None:
    record = {
        "command": args.command,
        "argv": argv,
        "version": __version__,
        "out": str(out),
        "config": config.effective(),
    }
    with open(out / "run.json", "w") as fp:
        json.dump(record, fp, sort_keys=True, indent=1)


def _apply_seed(args, config: Config) -> None:
    if args.seed is None:
        return
    if args.command == "synth":
        config.set("data.seed", str(args.seed))
    else:
        config.set("train.seed", str(args.seed))


def _corpus_and_model(args, config: Config):
    corpus = load_corpus(args.corpus)
    pids = sorted({t.person_id for t in corpus.train})
    cams = sorted({t.camera_id for t in corpus.train})
    mconf = to_model_config(
        config, len(pids), len(cams),
        input_hw=(corpus.spec.height, corpus.spec.width),
    )
    model = DisentangledReidNet(mconf, np.random.default_rng(config["train.seed"]))
    return corpus, model


# -- commands ----------------------------------------------------------


def cmd_synth(args, config: Config, out: Path) -> int:
    if args.ids is not None:
        config.set("data.ids", str(args.ids))
    if args.cameras is not None:
        config.set("data.cameras", str(args.cameras))
    _write_run_json(out, args, config, args.argv_echo)
    spec = to_synth_spec(config)
    corpus = generate_corpus(spec)
    save_corpus(corpus, out)
    print(
        f"corpus written to {out}: {len(corpus.train)} train, "
        f"{len(corpus.query)} query, {len(corpus.gallery)} gallery tracklets "
        f"({spec.num_ids} ids, {spec.num_cameras} cameras)"
    )
    return 0


def cmd_train(args, config: Config, out: Path) -> int:
    _write_run_json(out, args, config, args.argv_echo)
    if config["train.precision"] == "float32":
        T.set_default_dtype(np.float32)
    corpus, model = _corpus_and_model(args, config)
    tconf = to_train_config(config)
    trainer = Trainer(model, corpus.train, tconf, out_dir=out)
    if args.checkpoint:
        meta = load_checkpoint(args.checkpoint, trainer)
        print(f"resumed from {args.checkpoint} at epoch {meta['epoch']}")
    history = trainer.run()
    save_checkpoint(out / "checkpoint.zip", trainer)
    if history:
        last = history[-1]
        print(
            f"trained {last['step']} steps / {trainer.epoch} epochs; "
            f"final total loss {last['total']:.4f}"
        )
    else:
        print("no training steps ran (epochs already reached)")
    if config["dump.fwg"]:
        _dump_fwg(model, corpus.train, tconf.frames_per_clip, out, trainer,
                  tconf.components)
    if config["dump.attention"]:
        _dump_attention(model, corpus.train, tconf.frames_per_clip, out,
                        tconf.components)
    print(f"checkpoint: {out / 'checkpoint.zip'}")
    return 0


def _eval_frames_per_clip(config: Config, meta: dict) -> int:
    if config.is_set("sampler.frames"):
        return config["sampler.frames"]
    return int(meta.get("config", {}).get("frames_per_clip", config["sampler.frames"]))


def _eval_components(config: Config, meta: dict) -> frozenset[str]:
    """Score a checkpoint with the components it was trained with, unless the
    user explicitly overrides."""
    if config.is_set("train.components"):
        return config["train.components"]
    stored = meta.get("config", {}).get("components")
    if stored is not None:
        return frozenset(stored)
    return config["train.components"]


def cmd_eval(args, config: Config, out: Path) -> int:
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    _write_run_json(out, args, config, args.argv_echo)
    model, meta = load_model_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    t = _eval_frames_per_clip(config, meta)
    result, dist, qf, gf = evaluate_retrieval(
        model, corpus.query, corpus.gallery, frames_per_clip=t,
        enabled=_eval_components(config, meta), topk=config["eval.topk"],
    )
    with open(out / "results.json", "w") as fp:
        json.dump(result.to_dict(), fp, sort_keys=True, indent=1)
    print(
        f"mAP {result.mean_ap:.4f}  rank-1 {result.rank(1):.4f}  "
        f"({result.n_queries} queries, {result.n_excluded} excluded)"
    )
    if config["dump.embeddings"]:
        dump_dir = out / "dumps"
        dump_dir.mkdir(exist_ok=True)
        write_dstn(dump_dir / "query_embeddings.dstn", qf.f_id)
        write_dstn(dump_dir / "gallery_embeddings.dstn", gf.f_id)
    if config["dump.ranking"]:
        _dump_ranking(out, dist, corpus, config["eval.topk"])
    comps = _eval_components(config, meta)
    if config["dump.attention"]:
        _dump_attention(model, corpus.query, t, out, comps)
    if config["dump.fwg"]:
        _dump_fwg(model, corpus.query, t, out, None, comps)
    return 0


def _dump_ranking(out: Path, dist: np.ndarray, corpus, topk: int) -> None:
    with open(out / "ranking.csv", "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(
            ["query_id", "query_cam", "rank", "gallery_id", "gallery_cam", "distance"]
        )
        for qi, q in enumerate(corpus.query):
            keep = [
                gi for gi, g in enumerate(corpus.gallery)
                if not (g.person_id == q.person_id and g.camera_id == q.camera_id)
            ]
            order = sorted(keep, key=lambda gi: (dist[qi, gi], gi))[:topk]
            for rank, gi in enumerate(order, start=1):
                g = corpus.gallery[gi]
                writer.writerow(
                    [q.person_id, q.camera_id, rank, g.person_id, g.camera_id,
                     f"{dist[qi, gi]:.6f}"]
                )


def _first_clip(tracklet, t: int) -> np.ndarray:
    from .retrieval import clip_chunks

    idx = clip_chunks(len(tracklet.frames), t)[0]
    return tracklet.frames[idx]


def _dump_attention(model, tracklets, t: int, out: Path, enabled) -> None:
    dump_dir = out / "dumps" / "attn"
    dump_dir.mkdir(parents=True, exist_ok=True)
    for tr in tracklets:
        clip = _first_clip(tr, t)[None].astype(T.default_dtype())
        got = model.extract(clip, enabled=enabled, need_camera=False,
                            collect_attention=True)
        if "attention" not in got:
            continue
        att = got["attention"]
        att = att.reshape(t, *att.shape[1:])
        write_dstn(
            dump_dir / f"id{tr.person_id:04d}_cam{tr.camera_id:02d}_{tr.index:02d}.dstn",
            att,
        )


def _dump_fwg(model, tracklets, t: int, out: Path, trainer, enabled) -> None:
    """Per-clip frame weights; pseudo-label targets only where labels map
    into the trained classifier."""
    dump_dir = out / "dumps" / "fwg"
    dump_dir.mkdir(parents=True, exist_ok=True)
    pid_map = None
    if trainer is not None:
        pids = sorted({tr.person_id for tr in trainer.tracklets})
        pid_map = {p: i for i, p in enumerate(pids)}
    with open(dump_dir / "weights.jsonl", "w") as fp:
        for tr in tracklets:
            clip = _first_clip(tr, t)[None].astype(T.default_dtype())
            got = model.extract(clip, enabled=enabled, need_camera=False)
            row = {
                "person_id": tr.person_id,
                "camera_id": tr.camera_id,
                "index": tr.index,
                "predicted": [round(float(v), 6) for v in got["weights"][0]],
                "target": None,
            }
            if pid_map is not None and tr.person_id in pid_map:
                target = pseudo_label(
                    got["frame_vectors"],
                    np.array([pid_map[tr.person_id]]),
                    model.id_head.weight.data,
                    mode=model.config.pseudo_mode,
                )
                row["target"] = [round(float(v), 6) for v in target[0]]
            fp.write(json.dumps(row) + "\n")


def _ablate_cell(
    corpus_path: str, config: Config, components: frozenset[str], seed: int
) -> tuple[float, float]:
    """Train and evaluate one (configuration row, seed) cell."""
    corpus = load_corpus(corpus_path)
    pids = sorted({t.person_id for t in corpus.train})
    cams = sorted({t.camera_id for t in corpus.train})
    mconf = to_model_config(
        config, len(pids), len(cams),
        input_hw=(corpus.spec.height, corpus.spec.width),
    )
    model = DisentangledReidNet(mconf, np.random.default_rng(seed))
    tconf = to_train_config(config, components=components)
    overrides = {"seed": seed}
    if config["ablate.epochs"] is not None:
        overrides["epochs"] = config["ablate.epochs"]
    tconf = dataclasses.replace(tconf, **overrides)
    Trainer(model, corpus.train, tconf, out_dir=None).run()
    # the row's component set governs evaluation too: a model trained without
    # a module must also be scored without it
    result, *_ = evaluate_retrieval(
        model, corpus.query, corpus.gallery,
        frames_per_clip=tconf.frames_per_clip, enabled=components,
        topk=config["eval.topk"],
    )
    return result.rank(1), result.mean_ap


def cmd_ablate(args, config: Config, out: Path) -> int:
    _write_run_json(out, args, config, args.argv_echo)
    seeds = list(config["ablate.seeds"])
    jobs = config["ablate.jobs"]
    cells = [
        (name, components, seed)
        for name, components in ABLATION_ROWS
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_ablate_cell, args.corpus, config, comps, seed)
                for _, comps, seed in cells
            ]
            values = [f.result() for f in futures]
    else:
        values = [
            _ablate_cell(args.corpus, config, comps, seed)
            for _, comps, seed in cells
        ]

    per_row: dict[str, dict[int, tuple[float, float]]] = {}
    for (name, _, seed), (r1, ap) in zip(cells, values):
        per_row.setdefault(name, {})[seed] = (r1, ap)

    header = ["configuration", "rank1", "mAP"]
    header += [f"rank1_s{s}" for s in seeds] + [f"mAP_s{s}" for s in seeds]
    table = []
    for name, _ in ABLATION_ROWS:
        r1s = [per_row[name][s][0] for s in seeds]
        aps = [per_row[name][s][1] for s in seeds]
        table.append(
            [name, f"{np.mean(r1s):.4f}", f"{np.mean(aps):.4f}"]
            + [f"{v:.4f}" for v in r1s]
            + [f"{v:.4f}" for v in aps]
        )
    with open(out / "ablation.csv", "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        writer.writerows(table)
    width = max(len(r[0]) for r in table)
    print(f"{'configuration':<{width}}  rank-1   mAP")
    for row in table:
        print(f"{row[0]:<{width}}  {row[1]}   {row[2]}")
    print(f"table: {out / 'ablation.csv'}")
    return 0


def cmd_gradcheck(args, config: Config, out: Path) -> int:
    _write_run_json(out, args, config, args.argv_echo)
    coords = None if args.coords == 0 else args.coords
    reports = run_standard_checks(max_coords_per_param=coords)
    payload = {}
    for r in reports:
        print(r)
        payload[r.name] = {
            "passed": r.passed,
            "max_rel_err": r.max_rel_err,
            "n_checked": r.n_checked,
            "n_skipped": len(r.skipped),
            "worst_param": r.worst_param,
        }
    with open(out / "gradcheck.json", "w") as fp:
        json.dump(payload, fp, sort_keys=True, indent=1)
    if all(r.passed for r in reports):
        print(f"all {len(reports)} suites passed")
        return 0
    failed = [r.name for r in reports if not r.passed]
    print(f"FAILED suites: {', '.join(failed)}", file=sys.stderr)
    return 1


def cmd_probe(args, config: Config, out: Path) -> int:
    if not args.checkpoint:
        raise ConfigError("probe requires --checkpoint")
    _write_run_json(out, args, config, args.argv_echo)
    model, meta = load_model_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    tracklets = (
        corpus.train if args.split == "train" else corpus.query + corpus.gallery
    )
    t = _eval_frames_per_clip(config, meta)
    index = extract_features(
        model, tracklets, t, enabled=_eval_components(config, meta),
        need_camera=True,
    )

    cos = _paired_cosine(index.f_id, index.f_cam)
    measurements = {
        "split": args.split,
        "num_tracklets": len(tracklets),
        "mean_positive_cosine": float(np.maximum(cos, 0.0).mean()),
        "id_probe_f_id": probe_accuracy(index.f_id, index.person_ids).to_dict(),
        "camera_probe_f_id": probe_accuracy(index.f_id, index.camera_ids).to_dict(),
        "camera_probe_f_cam": probe_accuracy(index.f_cam, index.camera_ids).to_dict(),
        "id_probe_f_cam": probe_accuracy(index.f_cam, index.person_ids).to_dict(),
    }
    with open(out / "probes.json", "w") as fp:
        json.dump(measurements, fp, sort_keys=True, indent=1)
    print(f"mean positive cosine(f_id, f_cam): {measurements['mean_positive_cosine']:.4f}")
    for key in ("id_probe_f_id", "camera_probe_f_id", "camera_probe_f_cam",
                "id_probe_f_cam"):
        m = measurements[key]
        print(f"{key}: {m['accuracy']:.4f} (majority baseline {m['majority_baseline']:.4f})")
    return 0


def _paired_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = (a * b).sum(axis=1)
    return dot / np.maximum(na * nb, 1e-24)


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "probe": cmd_probe,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv_echo = argv
    try:
        config = load_config(args.config, args.set)
        _apply_seed(args, config)
        out = _resolve_out(args)
        return _HANDLERS[args.command](args, config, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
