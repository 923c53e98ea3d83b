"""Batch command-line front end.

Commands: synth-gen, train, eval-unseen, ablate, metrics, gradcheck, split.
Configuration is a flat key=value namespace merged from built-in defaults, an
optional ``--config`` file (``#`` comments allowed), and ``--kebab-case``
flag overrides, in that precedence order. Unknown keys are rejected and every
report echoes the fully resolved configuration. All commands emit a JSON
report and an aligned plain-text table; outputs are written only after a
command has fully succeeded. ``CARE_LAB_THREADS`` caps the ablation grid's
parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import annotations as A
from . import gradcheck as G
from . import metrics as MET
from . import model as M
from . import synth as S
from . import tensor as T
from . import training as TR
from .errors import CareLabError, CompatibilityError, InputError, ValidationError

IOU_GRID = (0.1, 0.3, 0.5, 0.7)


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(raw).replace(" ", "").split(","))


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(raw).replace(" ", "").split(","))


def _bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    val = str(raw).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {raw!r}")


# key -> (parser, default). The desk training profile here deliberately
# deviates from the published 40-epoch recipe so the whole ablation grid
# finishes at desk scale; the published rates remain the library defaults.
REGISTRY: dict[str, tuple] = {
    # model
    "num_domains": (int, 4),
    "num_classes": (int, 6),
    "input_shape": (_ints, (3, 8, 32, 32)),
    "base_shape": (_ints, (16, 4, 8, 8)),
    "elab_shape": (_ints, (4, 4, 4)),
    "attention_heads": (int, 2),
    "weight_mode": (str, M.SPATIAL),
    "second_order_meta": (_bool, False),
    "backbone_hidden": (int, 8),
    "relevance_channels": (int, 4),
    # optimization
    "alpha": (float, 0.01),
    "beta": (float, 0.1),
    "meta_blend": (float, 0.5),
    "lr_backbone": (float, 0.01),
    "lr_other": (float, 0.05),
    "epochs": (int, 16),
    "decay_epoch": (int, 10),
    "decay_factor": (float, 0.1),
    "batch_size": (int, 2),
    "ablation": (str, M.FULL),
    # benchmark
    "unseen_domains": (int, 5),
    "samples_per_class": (int, 8),
    "class_signal": (float, 1.5),
    "domain_signature": (float, 0.6),
    "noise_level": (float, 0.1),
    # metrics
    "recall_n": (int, 1),
    "iou_thresholds": (_floats, IOU_GRID),
    "pck_alpha": (float, 0.05),
    "head_threshold": (int, MET.HEAD_THRESHOLD),
    "tail_threshold": (int, MET.TAIL_THRESHOLD),
    "split_ratio": (float, 0.8),
    # shared
    "seed": (int, 0),
    "seeds": (int, 5),
    "force": (_bool, False),
    # paths
    "out": (str, ""),
    "data": (str, ""),
    "checkpoint": (str, ""),
    "gt": (str, ""),
    "pred": (str, ""),
    "counts": (str, ""),
    "input": (str, ""),
    "train_out": (str, ""),
    "test_out": (str, ""),
}


def parse_value(key: str, raw) -> object:
    if key not in REGISTRY:
        raise InputError(f"unknown configuration key {key!r}")
    parser, _ = REGISTRY[key]
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_config_file(path) -> dict:
    values = {}
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise InputError(f"{path}:{no}: expected key=value, got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def resolve_config(config_file, overrides: dict) -> dict:
    cfg = {key: default for key, (_, default) in REGISTRY.items()}
    if config_file:
        cfg.update(load_config_file(config_file))
    for key, raw in overrides.items():
        if raw is not None:
            cfg[key] = parse_value(key, raw)
    return cfg


def _jsonable(cfg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


def build_care_config(cfg: dict) -> M.CareConfig:
    return M.CareConfig(
        num_domains=cfg["num_domains"], num_classes=cfg["num_classes"],
        input_shape=cfg["input_shape"], base_shape=cfg["base_shape"],
        elab_shape=cfg["elab_shape"], attention_heads=cfg["attention_heads"],
        weight_mode=cfg["weight_mode"], second_order_meta=cfg["second_order_meta"],
        backbone_hidden=cfg["backbone_hidden"],
        relevance_channels=cfg["relevance_channels"])


def build_hyperparams(cfg: dict, seed: int | None = None) -> TR.Hyperparams:
    return TR.Hyperparams(
        alpha=cfg["alpha"], beta=cfg["beta"], meta_blend=cfg["meta_blend"],
        lr_backbone=cfg["lr_backbone"], lr_other=cfg["lr_other"],
        epochs=cfg["epochs"], decay_epoch=cfg["decay_epoch"],
        decay_factor=cfg["decay_factor"], batch_size=cfg["batch_size"],
        seed=cfg["seed"] if seed is None else seed)


def build_task_spec(cfg: dict) -> S.TaskSpec:
    channels, frames, h, w = cfg["input_shape"]
    return S.TaskSpec(
        num_classes=cfg["num_classes"], seen_domains=cfg["num_domains"],
        unseen_domains=cfg["unseen_domains"],
        samples_per_class=cfg["samples_per_class"], frames=frames,
        frame_size=(h, w), channels=channels, class_signal=cfg["class_signal"],
        domain_signature=cfg["domain_signature"], noise_level=cfg["noise_level"],
        seed=cfg["seed"])


def _table(title: str, rows: list[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows) if rows else 4
    lines = [title, "-" * max(len(title), width + 10)]
    lines += [f"{k:<{width}}  {v}" for k, v in rows]
    return "\n".join(lines) + "\n"


def _write_report(out_dir, command: str, cfg: dict, results: dict, table: str,
                  extra_files: dict[str, bytes] | None = None) -> None:
    """Write report.json / report.txt (plus extras) atomically into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": _jsonable(cfg), "results": results}
    blobs = {"report.json": (json.dumps(payload, sort_keys=True, indent=2)
                             + "\n").encode(),
             "report.txt": table.encode()}
    blobs.update(extra_files or {})
    for name, blob in blobs.items():
        fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, out / name)
        except BaseException:
            os.unlink(tmp)
            raise


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(cfg: dict) -> tuple[dict, str]:
    if not cfg["out"]:
        raise InputError("synth-gen needs --out")
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not cfg["force"]:
        raise InputError(f"{out} exists and is not empty; pass --force to replace")
    spec = build_task_spec(cfg)  # validates counts before any write
    seen, unseen = S.make_benchmark(spec)
    class_sep, domain_sep = S.signal_audit(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=out.name + ".", dir=out.parent))
    try:
        S.export_benchmark(spec, seen, unseen, staging)
        if out.exists():
            shutil.rmtree(out)
        os.replace(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    results = {"seen_domains": sorted(seen.domains), "unseen_domains":
               sorted(unseen.domains),
               "samples_total": len(seen.all_samples()) + len(unseen.all_samples()),
               "class_separability": class_sep, "domain_separability": domain_sep}
    table = _table("synthetic benchmark", [
        ("seen domains", str(results["seen_domains"])),
        ("unseen domains", str(results["unseen_domains"])),
        ("samples total", str(results["samples_total"])),
        ("class separability", f"{class_sep:.4f}"),
        ("domain separability", f"{domain_sep:.4f}")])
    _write_report(out, "synth-gen", cfg, results, table)
    return results, table


def _load_seen(cfg) -> tuple[S.TaskSpec, S.DomainDataset, S.DomainDataset]:
    if not cfg["data"]:
        raise InputError("need --data pointing at a generated benchmark")
    return S.load_benchmark(cfg["data"])


def cmd_train(cfg: dict) -> tuple[dict, str]:
    if not cfg["out"]:
        raise InputError("train needs --out")
    spec, seen, _ = _load_seen(cfg)
    care_cfg = build_care_config(cfg)
    if spec.clip_shape != care_cfg.input_shape:
        raise CompatibilityError(f"dataset clips {spec.clip_shape} vs model "
                                 f"input_shape {care_cfg.input_shape}")
    if len(seen.domains) != care_cfg.num_domains:
        raise CompatibilityError(f"dataset has {len(seen.domains)} seen domains, "
                                 f"config num_domains={care_cfg.num_domains}")
    if spec.num_classes != care_cfg.num_classes:
        raise CompatibilityError(f"dataset classes {spec.num_classes} vs "
                                 f"num_classes={care_cfg.num_classes}")
    hp = build_hyperparams(cfg)
    params, log = TR.train(care_cfg, hp, seen.as_training_data(),
                           ablation=cfg["ablation"])
    results = {"epochs": hp.epochs,
               "final_base_losses": log.records[-1].base_losses if log.records else [],
               "final_meta_test_loss": (log.records[-1].meta_test_loss
                                        if log.records else None)}
    rows = [("epochs", str(hp.epochs)), ("ablation", cfg["ablation"])]
    if log.records:
        rows.append(("final base loss", f"{np.mean(log.records[-1].base_losses):.4f}"))
        rows.append(("final meta-test loss", f"{log.records[-1].meta_test_loss:.4f}"))
    table = _table("training", rows)
    _write_report(cfg["out"], "train", cfg, results, table, extra_files={
        "checkpoint.bin": TR.checkpoint_to_bytes(params, hp, hp.epochs),
        "trainlog.json": log.to_json().encode()})
    return results, table


def _eval_accuracy(params: M.CareParams, dataset: S.DomainDataset,
                   ablation: str, chunk: int = 24) -> tuple[float, dict[int, float]]:
    mode = M.FULL if ablation in (M.FULL, M.SCALAR_WEIGHTS) else ablation
    if ablation == M.SCALAR_WEIGHTS and params.config.weight_mode != M.SCALAR:
        raise CompatibilityError("scalar_weights evaluation needs a scalar-mode "
                                 "checkpoint")
    per_domain: dict[int, float] = {}
    hits = total = 0
    with T.no_grad():
        for domain in sorted(dataset.domains):
            samples = dataset.domains[domain]
            d_hits = 0
            for lo in range(0, len(samples), chunk):
                part = samples[lo:lo + chunk]
                xs = T.Tensor(np.stack([s.clip for s in part]))
                logits = M.forward_unseen_batch(params, xs, ablation=mode)
                preds = np.argmax(logits.values, axis=1)
                d_hits += int(sum(int(p) == s.label for p, s in zip(preds, part)))
            per_domain[domain] = d_hits / len(samples)
            hits += d_hits
            total += len(samples)
    return hits / total, per_domain


def cmd_eval_unseen(cfg: dict) -> tuple[dict, str]:
    if not cfg["checkpoint"]:
        raise InputError("eval-unseen needs --checkpoint")
    spec, _, unseen = _load_seen(cfg)
    params, hp, epoch = TR.load_checkpoint(cfg["checkpoint"])
    if params.config.input_shape != spec.clip_shape:
        raise CompatibilityError(f"checkpoint input_shape {params.config.input_shape} "
                                 f"vs dataset clips {spec.clip_shape}")
    if params.config.num_classes != spec.num_classes:
        raise CompatibilityError(f"checkpoint num_classes {params.config.num_classes} "
                                 f"vs dataset classes {spec.num_classes}")
    ablation = cfg["ablation"]
    overall, per_domain = _eval_accuracy(params, unseen, ablation)
    results = {"overall_accuracy": overall,
               "per_domain_accuracy": {str(k): v for k, v in per_domain.items()},
               "checkpoint_epoch": epoch}
    rows = [("overall accuracy", f"{overall:.4f}")]
    rows += [(f"domain {k}", f"{v:.4f}") for k, v in sorted(per_domain.items())]
    table = _table("unseen-domain evaluation", rows)
    if cfg["out"]:
        _write_report(cfg["out"], "eval-unseen", cfg, results, table)
    return results, table


VARIANTS = (M.FULL, M.NO_SPECIFIC, M.NO_GENERAL, M.SCALAR_WEIGHTS)


def _run_variant(cfg: dict, seen: S.DomainDataset, unseen: S.DomainDataset,
                 variant: str, seed: int) -> float:
    local = dict(cfg)
    local["weight_mode"] = M.SCALAR if variant == M.SCALAR_WEIGHTS else M.SPATIAL
    care_cfg = build_care_config(local)
    ablation = variant if variant in (M.NO_SPECIFIC, M.NO_GENERAL) else M.FULL
    hp = build_hyperparams(cfg, seed=seed)
    params, _ = TR.train(care_cfg, hp, seen.as_training_data(), ablation=ablation)
    eval_mode = variant if variant != M.SCALAR_WEIGHTS else M.SCALAR_WEIGHTS
    overall, _ = _eval_accuracy(params, unseen,
                                M.FULL if variant == M.FULL else eval_mode)
    return overall


def cmd_ablate(cfg: dict) -> tuple[dict, str]:
    spec, seen, unseen = _load_seen(cfg)
    care_cfg = build_care_config(cfg)
    if spec.clip_shape != care_cfg.input_shape or \
            spec.num_classes != care_cfg.num_classes or \
            len(seen.domains) != care_cfg.num_domains:
        raise CompatibilityError("dataset and model configuration disagree; "
                                 "check input_shape/num_classes/num_domains")
    n_seeds = cfg["seeds"]
    if n_seeds < 1:
        raise InputError("seeds must be at least 1")
    jobs = [(variant, cfg["seed"] + i) for variant in VARIANTS
            for i in range(n_seeds)]
    threads = max(1, int(os.environ.get("CARE_LAB_THREADS", "1")))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(
                lambda vs: _run_variant(cfg, seen, unseen, vs[0], vs[1]), jobs))
    else:
        accs = [_run_variant(cfg, seen, unseen, v, s) for v, s in jobs]
    results = {"seeds": [cfg["seed"] + i for i in range(n_seeds)], "variants": {}}
    rows = []
    for vi, variant in enumerate(VARIANTS):
        vals = accs[vi * n_seeds:(vi + 1) * n_seeds]
        results["variants"][variant] = {
            "accuracies": vals, "mean": float(np.mean(vals)),
            "std": float(np.std(vals))}
        rows.append((variant, f"{np.mean(vals):.4f} +- {np.std(vals):.4f}"))
    table = _table(f"ablation over {n_seeds} seeds (unseen accuracy)", rows)
    if cfg["out"]:
        _write_report(cfg["out"], "ablate", cfg, results, table)
    return results, table


# --- metrics command ----------------------------------------------------------


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _parse_scores_csv(data: bytes) -> tuple[list[str], dict[str, list[float]]]:
    """Prediction scores: CSV header ``clip_id,<class>,...``; 3-decimal scores."""
    lines = [l for l in data.decode("utf-8").split("\n") if l.strip()]
    if not lines:
        raise ValidationError("empty score file")
    header = lines[0].split(",")
    if header[0] != "clip_id" or len(header) < 2:
        raise ValidationError("score file needs header 'clip_id,<class>,...'")
    vocab = [h.strip() for h in header[1:]]
    rows = {}
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValidationError(f"line {no}: expected {len(header)} fields")
        rows[parts[0].strip()] = [float(v) for v in parts[1:]]
    return vocab, rows


def _parse_counts_csv(data: bytes) -> dict[str, int]:
    lines = [l for l in data.decode("utf-8").split("\n") if l.strip()]
    if not lines or lines[0].strip() != "label,count":
        raise ValidationError("counts file needs header 'label,count'")
    out = {}
    for no, line in enumerate(lines[1:], start=2):
        label, _, raw = line.partition(",")
        out[label.strip()] = int(raw)
    return out


def _require_matching_ids(gt_ids, pred_ids, kind: str) -> None:
    missing = sorted(set(gt_ids) - set(pred_ids))
    extra = sorted(set(pred_ids) - set(gt_ids))
    if missing or extra:
        raise InputError(f"{kind} ids disagree: missing from predictions "
                         f"{missing[:10]}, unmatched predictions {extra[:10]}")


def _metrics_actions(cfg: dict) -> MET.MetricReport:
    gt_records, diags = A.parse_actions(_read(cfg["gt"]), strict=True)
    vocab, score_rows = _parse_scores_csv(_read(cfg["pred"]))
    if not cfg["counts"]:
        raise InputError("actions metrics need --counts (training counts per class)")
    counts = _parse_counts_csv(_read(cfg["counts"]))
    _require_matching_ids([r.clip_id for r in gt_records], score_rows, "clip")
    missing_counts = sorted(set(vocab) - set(counts))
    if missing_counts:
        raise InputError(f"counts file lacks classes {missing_counts[:10]}")
    gt_records.sort(key=lambda r: r.clip_id)
    scores = np.array([score_rows[r.clip_id] for r in gt_records])
    labels = np.array([[c in r.labels for c in vocab] for r in gt_records])
    thresholds = MET.SegmentThresholds(hi=cfg["head_threshold"],
                                       lo=cfg["tail_threshold"])
    head, middle, tail = MET.segment_classes([counts[c] for c in vocab], thresholds)
    overall, per_class = MET.multilabel_map(scores, labels)
    out_scores = {"map_overall": overall}
    for name, subset in (("map_head", head), ("map_middle", middle),
                         ("map_tail", tail)):
        live = [c for c in subset if labels[:, c].any()]
        out_scores[name] = (MET.multilabel_map(scores, labels, live)[0]
                            if live else None)
    return MET.MetricReport(
        task="actions", scores=out_scores,
        per_class={vocab[c]: ap for c, ap in per_class.items() if ap is not None},
        params={"head_threshold": thresholds.hi, "tail_threshold": thresholds.lo})


def _parse_grounding_predictions(data: bytes) -> dict[str, list[MET.Interval]]:
    out = {}
    for no, line in enumerate(data.decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        segs = [MET.Interval(float(s), float(e)) for s, e in obj["segments"]]
        if not segs:
            raise ValidationError(f"line {no}: every query needs >= 1 segment")
        out[str(obj["video_id"])] = segs
    return out


def _metrics_grounding(cfg: dict) -> MET.MetricReport:
    gt_records, _ = A.parse_grounding(_read(cfg["gt"]), strict=True)
    preds = _parse_grounding_predictions(_read(cfg["pred"]))
    _require_matching_ids([r.video_id for r in gt_records], preds, "query")
    gt_records.sort(key=lambda r: r.video_id)
    gts = [r.span for r in gt_records]
    ranked = [preds[r.video_id] for r in gt_records]
    n = cfg["recall_n"]
    scores = {f"recall@{n}_iou={mu}": MET.recall_at_n(ranked, gts, n, mu)
              for mu in cfg["iou_thresholds"]}
    scores["mean_iou"] = MET.mean_iou([r[0] for r in ranked], gts)
    return MET.MetricReport(task="grounding", scores=scores,
                            params={"n": n, "mu": list(cfg["iou_thresholds"])})


def _metrics_pose(cfg: dict) -> MET.MetricReport:
    gt_records, _ = A.parse_pose(_read(cfg["gt"]), strict=True)
    pred_records, _ = A.parse_pose(_read(cfg["pred"]), strict=True)
    _require_matching_ids([r.image_id for r in gt_records],
                          [r.image_id for r in pred_records], "image")
    by_id = {r.image_id: r for r in pred_records}
    alpha = cfg["pck_alpha"]
    per_class_scores: dict[str, list[float]] = {}
    all_scores = []
    for gt in sorted(gt_records, key=lambda r: r.image_id):
        pred = by_id[gt.image_id]
        gt_pts, vis, bbox_hw = gt.arrays()
        pred_pts, _, _ = pred.arrays()
        score = MET.pck(pred_pts, gt_pts, vis, bbox_hw, alpha=alpha)
        all_scores.append(score)
        per_class_scores.setdefault(gt.animal_class, []).append(score)
    scores = {f"pck@{alpha}": float(np.mean(all_scores))}
    per_class = {cls: float(np.mean(vals))
                 for cls, vals in sorted(per_class_scores.items())}
    return MET.MetricReport(task="pose", scores=scores, per_class=per_class,
                            params={"alpha": alpha})


def cmd_metrics(cfg: dict, task: str) -> tuple[dict, str]:
    if not cfg["gt"] or not cfg["pred"]:
        raise InputError("metrics needs --gt and --pred")
    runner = {"actions": _metrics_actions, "grounding": _metrics_grounding,
              "pose": _metrics_pose}.get(task)
    if runner is None:
        raise InputError(f"unknown metrics task {task!r}")
    report = runner(cfg)
    results = {"task": report.task, "scores": report.scores,
               "per_class": report.per_class, "params": report.params}
    table = report.to_table()
    if cfg["out"]:
        _write_report(cfg["out"], f"metrics-{task}", cfg, results, table)
    return results, table


def cmd_gradcheck(cfg: dict) -> tuple[dict, str, int]:
    rows = G.run_all(trials=3)
    results = {name: err for name, err in rows}
    ok = all(err < G.TOLERANCE for _, err in rows)
    table = _table("gradient checks (max relative error)",
                   [(name, f"{err:.3e} {'ok' if err < G.TOLERANCE else 'FAIL'}")
                    for name, err in rows])
    if cfg["out"]:
        _write_report(cfg["out"], "gradcheck", cfg,
                      {"checks": results, "passed": ok}, table)
    return results, table, 0 if ok else 1


def cmd_split(cfg: dict) -> tuple[dict, str]:
    for key in ("input", "train_out", "test_out"):
        if not cfg[key]:
            raise InputError(f"split needs --{key.replace('_', '-')}")
    records, diags = A.parse_actions(_read(cfg["input"]), strict=True)
    split = A.stratified_split(records, ratio=cfg["split_ratio"], seed=cfg["seed"])
    train = [records[i] for i in split.train_indices()]
    test = [records[i] for i in split.test_indices()]
    train_bytes = A.serialize_actions(train)
    test_bytes = A.serialize_actions(test)
    summary = {}
    for lab in sorted({l for r in records for l in r.labels}):
        total = sum(1 for r in records if lab in r.labels)
        n_train = sum(1 for r in train if lab in r.labels)
        summary[lab] = {"total": total, "train": n_train, "test": total - n_train,
                        "deviation": abs(n_train - cfg["split_ratio"] * total)}
    # stage both files, then move both into place
    staged = []
    try:
        for path, blob in ((cfg["train_out"], train_bytes),
                           (cfg["test_out"], test_bytes)):
            target = Path(path)
            fd, tmp = tempfile.mkstemp(dir=target.parent or ".",
                                       prefix=f".{target.name}.")
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            staged.append((tmp, target))
        for tmp, target in staged:
            os.replace(tmp, target)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    results = {"n_train": len(train), "n_test": len(test), "per_class": summary}
    rows = [("records", str(len(records))),
            ("train / test", f"{len(train)} / {len(test)}")]
    rows += [(lab, f"{v['train']}/{v['total']} (dev {v['deviation']:.2f})")
             for lab, v in summary.items()]
    table = _table("stratified split", rows)
    if cfg["out"]:
        _write_report(cfg["out"], "split", cfg, results, table)
    return results, table


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value configuration file")
    for key in REGISTRY:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="care-lab",
        description="collaborative action recognition at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth-gen", "train", "eval-unseen", "ablate", "gradcheck",
                 "split"):
        p = sub.add_parser(name)
        _add_config_flags(p)
    p = sub.add_parser("metrics")
    p.add_argument("--task", required=True, choices=("actions", "grounding", "pose"))
    _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {key: getattr(args, key) for key in REGISTRY
                 if getattr(args, key, None) is not None}
    try:
        cfg = resolve_config(args.config, overrides)
        if args.command == "synth-gen":
            _, table = cmd_synth_gen(cfg)
        elif args.command == "train":
            _, table = cmd_train(cfg)
        elif args.command == "eval-unseen":
            _, table = cmd_eval_unseen(cfg)
        elif args.command == "ablate":
            _, table = cmd_ablate(cfg)
        elif args.command == "metrics":
            _, table = cmd_metrics(cfg, args.task)
        elif args.command == "split":
            _, table = cmd_split(cfg)
        else:  # gradcheck
            _, table, code = cmd_gradcheck(cfg)
            sys.stdout.write(table)
            return code
    except CareLabError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    sys.stdout.write(table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
