"""Command-line entry point: ``regiongraph <command> [flags]``.

Commands: synth, build-graph, train, eval, gradcheck, export.
Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from regiongraph import checkpoint, config, report
from regiongraph.data import (DataError, SynthSpec, assemble, classify_trajectories,
                              dataset_meta, load_dataset, load_meta, save_dataset, split_clips,
                              synth_generate)
from regiongraph.graphs import AdjacencyMatrix, check_adjacency, normalize_rows
from regiongraph.metrics import confusion_matrix, mean_average_precision, top_k_accuracy
from regiongraph.model import VideoGraphInput, aggregate_clips, forward
from regiongraph.train import (ABLATIONS, NumericError, TrainConfig, fit, gradient_check, init_model,
                               loss_mode_for, randomize_parameters)

log = logging.getLogger("regiongraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _split_dir(root: Path, split: str) -> Path:
    return root / split if (root / split).is_dir() else root


def _num_classes(records, meta) -> int:
    if "num_classes" in meta:
        return int(meta["num_classes"])
    first = records[0].label
    if np.ndim(first):
        return len(first)
    return max(int(r.label) for r in records) + 1


def _load_split(cfg, split):
    root = Path(cfg["dataset"])
    path = _split_dir(root, split)
    if not path.exists():
        raise DataError(f"dataset directory {path} does not exist")
    records = load_dataset(path, cfg["format"])
    if not records:
        raise DataError(f"dataset {path} is empty")
    meta = load_meta(path) or load_meta(root)
    return records, meta


def _load_model(path, what):
    try:
        return checkpoint.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"{what} checkpoint {path} not found") from exc
    except checkpoint.CheckpointError as exc:
        raise DataError(f"{what} checkpoint {path}: {exc}") from exc


def _synth_spec(cfg, num_videos, seed) -> SynthSpec:
    s = cfg["synth"]
    return SynthSpec(num_videos=num_videos, frames=s["frames"], proposals_per_frame=s["proposals_per_frame"],
                     d=s["d"], noise_std=s["noise_std"], seed=seed, vocab_seed=s["vocab_seed"],
                     map_size=s["map_size"], actor_size=s["actor_size"], pair_cue=s["pair_cue"], contact_rate=s["contact_rate"],
                     randomize_region=s["randomize_region"], render_volume=s["render_volume"],
                     mode=cfg["mode"])


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> dict:
    root = Path(cfg["dataset"])
    out = {}
    for split, n, seed in (("train", cfg["synth"]["num_videos"], cfg["seed"]),
                           ("test", cfg["synth"]["test_videos"], cfg["seed"] + 1_000_003)):
        if n <= 0:
            continue
        spec = _synth_spec(cfg, n, seed)
        records = synth_generate(spec)
        save_dataset(records, root / split, cfg["format"], dataset_meta(spec))
        rule_acc = float(np.mean([classify_trajectories(r) == int(np.argmax(r.label) if np.ndim(r.label) else r.label)
                                  for r in records]))
        out[split] = {"videos": len(records), "nodes_per_video": len(records[0].proposals),
                      "trajectory_rule_accuracy": rule_acc}
    _write_json(Path(cfg["out_dir"]) / "synth_summary.json", out)
    return out


def _train_config(cfg, loss_mode) -> TrainConfig:
    t = cfg["train"]
    if t["ablation"] not in ABLATIONS:
        raise UsageError(f"unknown ablation {t['ablation']!r}; choose from {sorted(ABLATIONS)}")
    return TrainConfig(learning_rate=float(t["lr"]), schedule=[tuple(s) for s in t["schedule"]],
                       total_iters=int(t["iters"]), batch_size=int(t["batch_size"]), seed=int(cfg["seed"]),
                       loss_mode=loss_mode, weight_decay=float(t["weight_decay"]),
                       momentum=float(t["momentum"]),
                       frozen=tuple(t["frozen"]) + ABLATIONS[t["ablation"]], log_every=int(t["log_every"]))


def cmd_train(cfg) -> dict:
    out_dir = Path(cfg["out_dir"])
    records, meta = _load_split(cfg, "train")
    num_classes = _num_classes(records, meta)
    d = records[0].d
    if d != cfg["model"]["d"]:
        raise DataError(f"dataset feature width {d} does not match model.d={cfg['model']['d']}")
    if cfg["train"]["checkpoint"]:
        model = _load_model(cfg["train"]["checkpoint"], "warm-start")
    else:
        model = init_model(d, cfg["model"]["layers"], num_classes, cfg["seed"], dropout_rate=cfg["model"]["dropout"],
                           mode=cfg["mode"], final_norm=cfg["model"]["final_norm"])
    tcfg = _train_config(cfg, loss_mode_for(cfg["mode"]))
    dataset = [(assemble(r), r.target()) for r in records]
    try:
        model, metrics = fit(model, dataset, tcfg)
    except NumericError as exc:
        _write_json(out_dir / "numeric_failure.json", {"error": str(exc), "snapshot": exc.snapshot})
        raise
    checkpoint.save(model, out_dir / "checkpoint.bin")
    (out_dir / "metrics.ndjson").write_text(metrics.to_ndjson())
    (out_dir / "timing.ndjson").write_text(metrics.timings_ndjson())
    report.plot_loss_curve(metrics.records, out_dir / "figures" / "loss_curve.png")
    losses = metrics.losses()
    k = max(1, min(50, len(losses) // 10)) if len(losses) else 1
    summary = {"iters": tcfg.total_iters, "videos": len(records),
               "loss_first": float(losses[:k].mean()) if len(losses) else None,
               "loss_last": float(losses[-k:].mean()) if len(losses) else None}
    _write_json(out_dir / "train_summary.json", summary)
    return summary


def score_records(model, records, clips: int) -> np.ndarray:
    scores = []
    for r in records:
        clip_scores = [forward(model, assemble(c))[0] for c in split_clips(r, clips)]
        scores.append(aggregate_clips(clip_scores))
    return np.array(scores)


def cmd_eval(cfg) -> dict:
    out_dir = Path(cfg["out_dir"])
    ckpt = cfg["eval"]["checkpoint"] or out_dir / "checkpoint.bin"
    model = _load_model(ckpt, "eval")
    records, meta = _load_split(cfg, cfg["eval"]["split"])
    if records[0].d != model.d:
        raise DataError(f"dataset feature width {records[0].d} does not match checkpoint d={model.d}")
    names = list(meta.get("class_names", [])) or [str(c) for c in range(model.num_classes)]
    if len(names) != model.num_classes:
        names = [str(c) for c in range(model.num_classes)]
    scores = score_records(model, records, int(cfg["eval"]["clips"]))
    multi = np.ndim(records[0].label) > 0
    result: dict = {"videos": len(records), "clips": int(cfg["eval"]["clips"]), "mode": "multi" if multi else "single"}
    fig_dir = out_dir / "figures"
    if multi:
        targets = np.stack([r.label for r in records])
        m_ap, per_class = mean_average_precision(scores, targets)
        result["mAP"] = m_ap
        result["per_class_ap"] = {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, per_class)}
        report.plot_per_class_ap(per_class, names, fig_dir / "per_class_ap.png")
        rows = [("mAP", m_ap)] + [(f"AP[{n}]", v) for n, v in zip(names, per_class)]
    else:
        labels = np.array([int(r.label) for r in records])
        result["top1"] = top_k_accuracy(scores, labels, 1)
        result["top5"] = top_k_accuracy(scores, labels, 5)
        cm = confusion_matrix(scores.argmax(axis=1), labels, model.num_classes)
        result["confusion"] = cm.tolist()
        report.plot_confusion(cm, names, fig_dir / "confusion.png")
        rows = [("top1", result["top1"]), ("top5", result["top5"])]
    report.write_csv(out_dir / "eval_report.csv", ["metric", "value"], rows)
    report.write_csv(out_dir / "eval_scores.csv", ["video_id"] + [f"score[{n}]" for n in names],
                     ([r.video_id] + [repr(float(s)) for s in row] for r, row in zip(records, scores)))
    _write_json(out_dir / "eval_metrics.json", result)
    return result


def cmd_gradcheck(cfg) -> dict:
    g = cfg["gradcheck"]
    rng = np.random.default_rng(cfg["seed"])
    n, d = int(g["nodes"]), int(g["d"])

    def sparse_stochastic():
        return normalize_rows(rng.random((n, n)) * (rng.random((n, n)) < 0.5))

    inp = VideoGraphInput(rng.normal(size=(n, d)), None, AdjacencyMatrix("front", sparse_stochastic()),
                          AdjacencyMatrix("back", sparse_stochastic()), rng.normal(size=d))
    model = randomize_parameters(init_model(d, int(g["layers"]), int(g["classes"]), cfg["seed"], dropout_rate=0.0),
                                 cfg["seed"] + 1)
    rows, ok = [], True
    start = time.perf_counter()
    for mode in g["modes"]:
        target = (int(rng.integers(g["classes"])) if mode == "softmax_ce"
                  else rng.integers(0, 2, int(g["classes"])).astype(float))
        for r in gradient_check(model, inp, target, mode, h=float(g["h"]), tol=float(g["tol"])):
            rows.append((mode, r.name, r.max_rel_error, r.max_abs_error, "pass" if r.passed else "FAIL"))
            ok &= r.passed
    out_dir = Path(cfg["out_dir"])
    report.write_csv(out_dir / "gradcheck.csv", ["loss_mode", "parameter", "max_rel_error", "max_abs_error", "status"],
                     rows)
    worst = max(rows, key=lambda r: r[2])
    result = {"passed": bool(ok), "tolerance": float(g["tol"]), "worst_parameter": worst[1],
              "worst_loss_mode": worst[0], "max_rel_error": worst[2], "parameters_checked": len(rows),
              "seconds": round(time.perf_counter() - start, 3)}
    _write_json(out_dir / "gradcheck.json", result)
    if not ok:
        raise NumericError(f"gradient check failed: worst {worst[1]} ({worst[0]}) rel err {worst[2]:.3e}")
    return result


def cmd_build_graph(cfg) -> dict:
    out_dir = Path(cfg["out_dir"]) / "graphs"
    records, _ = _load_split(cfg, cfg["graphs"]["split"])
    ckpt = cfg["graphs"]["checkpoint"]
    if ckpt:
        transforms = _load_model(ckpt, "graph").transforms
    else:
        transforms = init_model(records[0].d, 1, 1, cfg["seed"]).transforms
    limit = cfg["graphs"]["limit"]
    written = []
    for r in records[: None if limit is None else int(limit)]:
        inp = assemble(r, transforms)
        mats = {"sim": inp.g_sim.m, "front": inp.g_front.m, "back": inp.g_back.m}
        problems = [p for kind, m in mats.items()
                    for p in check_adjacency(AdjacencyMatrix(kind, m), None if kind == "sim" else inp.frames)]
        if problems:
            raise NumericError(f"{r.video_id}: adjacency invariants violated: {problems}")
        stem = r.video_id.replace("/", "_")
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(out_dir / f"{stem}.npz", frames=inp.frames, **mats)
        _write_json(out_dir / f"{stem}.json", {"video_id": r.video_id, "frames": inp.frames.tolist(),
                                               **{k: m.tolist() for k, m in mats.items()}})
        report.plot_adjacency(mats, out_dir / f"{stem}.png")
        written.append(stem)
    return {"videos": written, "dir": str(out_dir)}


def cmd_export(cfg) -> dict:
    src = Path(cfg["out_dir"]) / "graphs"
    if not src.is_dir():
        raise DataError(f"no adjacency dumps under {src}; run build-graph first")
    fmt = cfg["graphs"]["export_format"]
    if fmt not in ("json", "dot"):
        raise UsageError(f"export format must be json or dot, got {fmt!r}")
    dest = Path(cfg["out_dir"]) / "export"
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for dump in sorted(src.glob("*.npz")):
        with np.load(dump) as z:
            mats = {k: z[k] for k in ("sim", "front", "back")}
            frames = z["frames"]
        if fmt == "json":
            edges = {k: [[int(i), int(j), float(m[i, j])] for i, j in zip(*np.nonzero(m))] for k, m in mats.items()}
            _write_json(dest / f"{dump.stem}.json", {"nodes": [{"id": i, "frame": int(f)} for i, f in enumerate(frames)],
                                                     "edges": edges})
        else:
            (dest / f"{dump.stem}.dot").write_text(to_dot(dump.stem, frames, mats))
        written.append(dump.stem)
    return {"exported": written, "format": fmt}


def to_dot(name: str, frames, mats, sim_top_k: int = 1) -> str:
    """DOT digraph: front/back edges in full, similarity edges as each node's top-k neighbours."""
    lines = [f'digraph "{name}" {{', "  rankdir=LR;"]
    for t in sorted(set(int(f) for f in frames)):
        members = " ".join(f"n{i};" for i, f in enumerate(frames) if f == t)
        lines.append(f"  subgraph cluster_f{t} {{ label=\"frame {t}\"; {members} }}")
    style = {"front": "solid", "back": "dashed", "sim": "dotted"}
    for kind, m in mats.items():
        if kind == "sim":
            pairs = [(i, int(j)) for i in range(m.shape[0]) for j in np.argsort(-m[i], kind="stable")[:sim_top_k]]
        else:
            pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(m))]
        for i, j in pairs:
            lines.append(f'  n{i} -> n{j} [label="{m[i, j]:.3f}", style={style[kind]}, comment="{kind}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regiongraph", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--dataset")
        p.add_argument("--clips", type=int)
        p.add_argument("--mode", choices=("single", "multi"))
        p.add_argument("--d", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--iters", type=int)
        p.add_argument("--format", choices=("ndjson", "bin"))
        p.add_argument("--checkpoint", help="model checkpoint (eval, build-graph, warm-start for train)")
        p.add_argument("--ablation", choices=sorted(ABLATIONS))
        p.add_argument("--export-format", choices=("json", "dot"))
    return parser


def flags_from_args(args) -> dict:
    flags: dict = {}
    top = {"seed": args.seed, "out_dir": args.out_dir, "dataset": args.dataset, "mode": args.mode,
           "format": args.format}
    flags.update({k: v for k, v in top.items() if v is not None})
    nested = {("eval", "clips"): args.clips, ("model", "d"): args.d, ("model", "layers"): args.layers,
              ("train", "lr"): args.lr, ("train", "iters"): args.iters, ("train", "ablation"): args.ablation,
              ("graphs", "export_format"): args.export_format}
    if args.checkpoint is not None:
        key = {"eval": "eval", "build-graph": "graphs", "export": "graphs", "train": "train"}.get(args.command)
        if key:
            nested[(key, "checkpoint")] = args.checkpoint
    for (section, key), val in nested.items():
        if val is not None:
            flags.setdefault(section, {})[key] = val
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.resolve(args.config, flags_from_args(args))
    except config.ConfigError as exc:
        print(f"regiongraph: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(cfg["out_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.dump(cfg, out_dir / f"config.{args.command}.resolved.yaml")
        (out_dir / f"FAILED.{args.command}").unlink(missing_ok=True)
        result = COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail(out_dir, args.command, f"usage error: {exc}", EXIT_USAGE)
    except (DataError, FileNotFoundError, checkpoint.CheckpointError) as exc:
        return _fail(out_dir, args.command, f"data error: {exc}", EXIT_DATA)
    except NumericError as exc:
        return _fail(out_dir, args.command, f"numeric failure: {exc}", EXIT_NUMERIC)
    print(json.dumps({"command": args.command, "out_dir": str(out_dir), "result": result}, sort_keys=True))
    return EXIT_OK


def _fail(out_dir: Path, command: str, message: str, code: int) -> int:
    print(f"regiongraph {command}: {message}", file=sys.stderr)
    try:
        (out_dir / f"FAILED.{command}").write_text(message + "\n")
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
