"""``czsl`` command-line entry point.

A data directory holds ``scenes.jsonl``, ``embeddings.txt``, ``splits.txt``
and optionally ``features.czfb`` (plus its ``.idx`` sidecar) and, for
synthetic worlds, ``world_truth.json``. A run directory holds
``checkpoint.czpm``, ``model.json``, ``loss.csv``, ``calibration.json`` and
one ``manifest.<command>.json`` per command.

Exit codes: 0 success, 2 usage, 3 input error, 4 numerical divergence,
5 oracle-flag violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .components import OracleFlagError, Scorers, context_model_name, parse_context_model, score_table
from .datamodel import (
    DataFormatError,
    apply_splits,
    candidate_classes,
    ingest_scenes,
    make_instances,
    read_splits,
    split_domains,
    split_images,
    write_scenes,
    write_splits,
)
from .diffprims import load_checkpoint, save_checkpoint
from .embeddings import EmbeddingFormatError, EmbeddingTable, load_embeddings, save_embeddings
from .inference import DEFAULT_GRID, CalibrationWeights, calibrate, ranks_from_table
from .inference import export_component_scores, write_score_csv
from .metrics import aggregate
from .oracles import CooccurrenceTable, build_image_cooc, build_text_cooc, oracle_score_table
from .training import COMPONENTS, TrainConfig, TrainingDiverged, build_scorers, read_config_file, train

log = logging.getLogger("czsl")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED, EXIT_ORACLE = 0, 2, 3, 4, 5

SCENES, EMBEDDINGS, SPLITS, BANK, TRUTH = (
    "scenes.jsonl",
    "embeddings.txt",
    "splits.txt",
    "features.czfb",
    "world_truth.json",
)
CHECKPOINT, MODEL, LOSS, CALIBRATION = "checkpoint.czpm", "model.json", "loss.csv", "calibration.json"


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digests(paths) -> dict[str, str]:
    return {str(p): _digest(Path(p)) for p in paths if Path(p).is_file()}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_manifest(outdir: Path, command: str, argv, config, seed, inputs, outputs, started) -> None:
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
        "timing": {"seconds": round(time.perf_counter() - started, 3)},
    }
    _write_json(outdir / f"manifest.{command}.json", doc)


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers, got {text!r}")


def _ints(text: str, name: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated integers, got {text!r}")


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise InputError(f"missing {what}: {path}")
    return path


def load_data(data_dir, need_splits: bool = True):
    """Dataset (with splits applied) and embedding table from a data directory."""
    data_dir = Path(data_dir)
    emb = load_embeddings(_require(data_dir / EMBEDDINGS, "embedding file"))
    bank = data_dir / BANK
    ing = ingest_scenes(_require(data_dir / SCENES, "scene file"), bank if bank.is_file() else None, 1, emb)
    dataset = ing.dataset()
    if need_splits:
        dataset = apply_splits(dataset, read_splits(_require(data_dir / SPLITS, "split file")))
    return dataset, emb


def _data_inputs(data_dir) -> list[Path]:
    d = Path(data_dir)
    return [d / SCENES, d / EMBEDDINGS, d / SPLITS, d / BANK]


def load_run(run_dir, dataset, emb) -> tuple[Scorers, dict]:
    """Rebuild the scorers recorded in ``model.json`` and load their tensors."""
    run_dir = Path(run_dir)
    model = json.loads(_require(run_dir / MODEL, "model description").read_text(encoding="utf-8"))
    if model["labels"] != list(dataset.vocab.labels):
        raise InputError(f"{run_dir}: checkpoint vocabulary does not match the dataset")
    cv = emb.matrix(dataset.vocab.labels)
    scorers = Scorers(cv)
    for comp, cfg in model["components"].items():
        built = build_scorers([comp], cv, dataset.d_visual, TrainConfig(**cfg))
        setattr(scorers, comp, getattr(built, comp))
    Scorers.__post_init__(scorers)
    scorers.load_tensors(load_checkpoint(_require(run_dir / CHECKPOINT, "checkpoint")))
    return scorers, model


def _is_devise(model: dict) -> bool:
    return any(cfg.get("devise_mode") for cfg in model["components"].values())


def _build_config(args) -> TrainConfig:
    pairs = read_config_file(args.config) if args.config else {}
    flags = {
        "epochs": args.epochs,
        "lr": args.lr,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "l2_weight": args.l2,
        "negatives_per_positive": args.negatives,
        "margin_prior": args.margin_prior,
        "margin_visual": args.margin_visual,
        "margin_context": args.margin_context,
        "hidden": args.hidden,
        "activation": args.activation,
        "context_model": args.context_model,
    }
    for key, value in flags.items():
        if value is not None:
            pairs[key] = str(value)
    if args.devise:
        pairs["devise_mode"] = "true"
    if args.oracle:
        pairs["oracle"] = "true"
    try:
        return TrainConfig.from_pairs(pairs)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}")


def _grid(args) -> list[tuple[float, ...]] | None:
    if not args.grid:
        return None
    values = tuple(_floats(args.grid, "--grid"))
    return [values, values, values]


def _components_arg(text: str) -> tuple[bool, bool, bool]:
    names = {x.strip() for x in text.split(",") if x.strip()}
    bad = names - {"context", "visual", "prior"}
    if bad:
        raise UsageError(f"--use: unknown component(s) {sorted(bad)}")
    return ("context" in names, "visual" in names, "prior" in names)


def _active(scorers: Scorers, model: dict, use: str | None) -> tuple[bool, bool, bool]:
    active = list(scorers.active)
    if use:
        want = _components_arg(use)
        for k, (w, have) in enumerate(zip(want, active)):
            if w and not have:
                raise InputError(f"--use requests a component the checkpoint lacks: {['context', 'visual', 'prior'][k]}")
        active = list(want)
    if _is_devise(model):
        active[2] = False
    if not any(active):
        raise InputError("no active component to score with")
    return tuple(active)


def _report(table, alpha, mode, ks, labels, oracle, extra) -> dict:
    ranks = ranks_from_table(table, alpha)
    rep = aggregate(ranks, len(table.candidates), ks, mode, classes=table.labels)
    return rep.to_dict(calibration=tuple(alpha), oracle=oracle, labels=labels, extra=extra)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    from .synthgen import WorldSpec, generate, pick_ambiguity_pairs

    started = time.perf_counter()
    spec = WorldSpec(
        n_classes=args.classes,
        zipf_exponent=args.zipf,
        d=args.dim,
        d_visual=args.d_visual,
        n_themes=args.themes,
        theme_concentration=args.concentration,
        visual_noise_sigma=args.visual_noise,
        embedding_noise_sigma=args.embedding_noise,
        objects_per_scene_mean=args.objects_mean,
        n_scenes=args.scenes,
        seed=args.seed,
        theme_strength=args.theme_strength,
        frequency_strength=args.frequency_strength,
        max_objects=args.max_objects,
    )
    try:
        spec.validate()
        if args.pairs:
            spec.ambiguity_pairs = pick_ambiguity_pairs(spec, args.pairs)
    except ValueError as exc:
        raise UsageError(str(exc))
    ratios = _floats(args.ratios, "--ratios")
    dataset, emb, truth = generate(spec)
    try:
        vocab = split_domains(dataset.vocab, args.p_sup, args.seed)
        partition = split_images(len(dataset.scenes), ratios, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    dataset.vocab, dataset.partition = vocab, partition

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scenes(out / SCENES, dataset.scenes, vocab.labels)
    save_embeddings(emb, out / EMBEDDINGS)
    write_splits(out / SPLITS, vocab, dataset)
    truth.save(out / TRUTH)
    outputs = [out / SCENES, out / EMBEDDINGS, out / SPLITS, out / TRUTH]
    config = {k: (list(map(list, v)) if k == "ambiguity_pairs" else v) for k, v in asdict(spec).items()}
    config.update(p_sup=args.p_sup, ratios=ratios)
    _write_manifest(out, "gen-synth", args.argv, config, args.seed, [], outputs, started)
    n_obj = sum(len(s.objects) for s in dataset.scenes)
    print(
        f"world: {len(vocab)} classes ({len(vocab.source)} source / {len(vocab.target)} target), "
        f"{len(dataset.scenes)} scenes, {n_obj} objects, d={spec.d}, d_visual={spec.d_visual}, "
        f"{len(spec.ambiguity_pairs)} ambiguity pairs -> {out}"
    )
    return EXIT_OK


def cmd_ingest(args) -> int:
    started = time.perf_counter()
    emb = load_embeddings(args.embeddings)
    res = ingest_scenes(args.scenes, args.features, args.min_count, emb)
    if not res.labels:
        raise InputError("no class survives filtering")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scenes(out / SCENES, res.scenes, res.labels)
    kept = EmbeddingTable(emb.dim, {lab: emb[lab] for lab in res.labels})
    save_embeddings(kept, out / EMBEDDINGS)
    inputs = [Path(args.scenes), Path(args.embeddings)] + ([Path(args.features)] if args.features else [])
    _write_manifest(
        out, "ingest", args.argv, {"min_count": args.min_count}, None, inputs, [out / SCENES, out / EMBEDDINGS], started
    )
    print(
        f"ingested {len(res.scenes)} scenes, {len(res.labels)} classes; dropped {len(res.dropped_classes)} classes, "
        f"{res.dropped_objects} objects, {res.dropped_scenes} scenes"
    )
    return EXIT_OK


def cmd_split(args) -> int:
    started = time.perf_counter()
    data = Path(args.data)
    dataset, _ = load_data(data, need_splits=False)
    forced = [x for x in (args.force_source or "").split(",") if x]
    ratios = _floats(args.ratios, "--ratios")
    try:
        vocab = split_domains(dataset.vocab, args.p_sup, args.seed, forced)
        partition = split_images(len(dataset.scenes), ratios, args.seed)
    except KeyError as exc:
        raise InputError(f"unknown forced-source class {exc}")
    except ValueError as exc:
        raise UsageError(str(exc))
    dataset.vocab, dataset.partition = vocab, partition
    out = Path(args.out) if args.out else data / SPLITS
    write_splits(out, vocab, dataset)
    config = {"p_sup": args.p_sup, "ratios": ratios, "force_source": forced}
    _write_manifest(out.parent, "split", args.argv, config, args.seed, _data_inputs(data)[:2], [out], started)
    print(f"|S|={len(vocab.source)} |T|={len(vocab.target)} train/val/test="
          f"{len(partition['train'])}/{len(partition['val'])}/{len(partition['test'])}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    config = _build_config(args)
    components = [c for c in COMPONENTS if c in set(args.components)]
    # validate the context model up front so an oracle-only model fails before any work
    parse_context_model(config.context_model, config.oracle)
    if config.devise_mode and "prior" in components:
        raise UsageError("--devise does not train a prior component")
    dataset, emb = load_data(args.data)
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    cv = emb.matrix(dataset.vocab.labels)

    if (run / MODEL).is_file():
        scorers, model = load_run(run, dataset, emb)
    else:
        scorers, model = Scorers(cv), {"labels": list(dataset.vocab.labels), "components": {}}
    fresh = build_scorers(components, cv, dataset.d_visual, config)
    for comp in components:
        setattr(scorers, comp, getattr(fresh, comp))
        model["components"][comp] = asdict(config)
    if "joint" in components:
        scorers.visual = None
        model["components"].pop("visual", None)
    if "visual" in components:
        scorers.joint = None
        model["components"].pop("joint", None)

    try:
        result = train(components, dataset, cv, config, scorers=scorers)
    except TrainingDiverged as exc:
        save_checkpoint(run / "checkpoint.diverged.czpm", {**scorers.tensors(), **exc.tensors})
        print(f"error: {exc}; last finite parameters saved to {run / 'checkpoint.diverged.czpm'}", file=sys.stderr)
        return EXIT_DIVERGED

    for comp in components:
        member = getattr(scorers, comp)
        if comp in ("context", "joint"):
            model["components"][comp]["context_model"] = context_model_name(member.model)
    save_checkpoint(run / CHECKPOINT, scorers.tensors())
    _write_json(run / MODEL, model)
    loss_path = run / LOSS
    _merge_loss(loss_path, result.curves, components)
    _write_manifest(
        run, "train", args.argv, asdict(config), config.seed, _data_inputs(args.data),
        [run / CHECKPOINT, run / MODEL, loss_path], started,
    )
    for comp in components:
        curve = result.curve(comp)
        print(f"{comp}: {len(curve)} epochs, final loss {curve[-1]:.6f}" if curve else f"{comp}: 0 epochs")
    return EXIT_OK


def _merge_loss(path: Path, curves, retrained) -> None:
    """Keep earlier curves of components not retrained by this command."""
    rows = []
    if path.is_file():
        for line in path.read_text(encoding="utf-8").splitlines()[1:]:
            epoch, comp, loss = line.split(",")
            if comp not in retrained:
                rows.append((int(epoch), comp, float(loss)))
    rows.extend(curves)
    order = {c: k for k, c in enumerate(COMPONENTS)}
    rows.sort(key=lambda r: (order[r[1]], r[0]))
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,component,loss\n")
        for epoch, comp, loss in rows:
            fh.write(f"{epoch},{comp},{loss!r}\n")


def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    dataset, emb = load_data(args.data)
    run = Path(args.run)
    scorers, model = load_run(run, dataset, emb)
    active = _active(scorers, model, args.use)
    instances = make_instances(dataset, args.partition, args.mode)
    if not instances:
        raise InputError(f"no {args.mode}-domain instances in the {args.partition} split")
    table = score_table(scorers, instances, candidate_classes(dataset.vocab, args.mode))
    result = calibrate(table, _grid(args), active)
    w = result.weights
    doc = {
        "alpha_c": w.alpha_c,
        "alpha_v": w.alpha_v,
        "alpha_p": w.alpha_p,
        "active": list(w.active),
        "mode": args.mode,
        "partition": args.partition,
        "mfr": result.mfr,
        "grid": [list(map(float, g)) for g in (_grid(args) or [DEFAULT_GRID] * 3)],
        "evaluated": len(result.evaluated),
    }
    out = Path(args.out) if args.out else run / CALIBRATION
    _write_json(out, doc)
    _write_manifest(run, "calibrate", args.argv, {"mode": args.mode, "use": args.use}, None,
                    _data_inputs(args.data) + [run / CHECKPOINT], [out], started)
    print(f"alpha=(C {w.alpha_c:g}, V {w.alpha_v:g}, P {w.alpha_p:g}) validation MFR {result.mfr:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    dataset, emb = load_data(args.data)
    run = Path(args.run)
    scorers, model = load_run(run, dataset, emb)
    cal_path = Path(args.calibration) if args.calibration else run / CALIBRATION
    if args.alpha:
        alpha = _floats(args.alpha, "--alpha")
        if len(alpha) != 3:
            raise UsageError("--alpha needs three values (context,visual,prior)")
    else:
        cal = json.loads(_require(cal_path, "calibration (run `czsl calibrate` or pass --alpha)").read_text("utf-8"))
        alpha = [cal["alpha_c"], cal["alpha_v"], cal["alpha_p"]]
    active = scorers.active
    if _is_devise(model):
        alpha[2] = 0.0
    for k, (a, on) in enumerate(zip(alpha, active)):
        if a and not on:
            raise InputError(f"calibration weights a component the checkpoint lacks (slot {k})")
    instances = make_instances(dataset, args.partition, args.mode)
    if not instances:
        raise InputError(f"no {args.mode}-domain instances in the {args.partition} split")
    table = score_table(scorers, instances, candidate_classes(dataset.vocab, args.mode))
    extra = {
        "partition": args.partition,
        "components": sorted(model["components"]),
        "devise": _is_devise(model),
    }
    ctx = model["components"].get("context") or model["components"].get("joint")
    if ctx:
        extra["context_model"] = ctx["context_model"]
    oracle = any(cfg.get("oracle") for cfg in model["components"].values())
    doc = _report(table, alpha, args.mode, _ints(args.ks, "--ks"), dataset.vocab.labels, oracle, extra)
    out = Path(args.out) if args.out else run / f"report.{args.mode}.json"
    _write_json(out, doc)
    _write_manifest(run, "eval", args.argv, {"mode": args.mode, "ks": args.ks, "alpha": alpha}, None,
                    _data_inputs(args.data) + [run / CHECKPOINT, cal_path], [out], started)
    print(f"{args.mode} MFR {doc['mfr']:.2f} over {doc['count']} instances (n={doc['n']}), MRR {doc['mrr']:.4f}")
    return EXIT_OK


def _truth_table(data: Path, labels) -> CooccurrenceTable:
    from .synthgen import WorldTruth, expected_cooc_table

    truth = WorldTruth.load(_require(data / TRUTH, "world truth"))
    full = expected_cooc_table(truth)
    idx = {lab: i for i, lab in enumerate(truth.labels)}
    try:
        sel = np.array([idx[lab] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"class {exc} missing from world truth")
    return CooccurrenceTable(full.M, full.marginals[sel], full.pairs[np.ix_(sel, sel)])


def cmd_oracle_eval(args) -> int:
    started = time.perf_counter()
    data = Path(args.data)
    dataset, emb = load_data(data)
    run = Path(args.run)
    scorers, model = load_run(run, dataset, emb)
    if scorers.visual is None:
        raise InputError("oracle evaluation needs a trained visual component")
    labels = dataset.vocab.labels
    inputs = _data_inputs(data) + [run / CHECKPOINT]
    if args.oracle == "textual-bayes":
        if not args.corpus:
            raise InputError("textual-bayes needs --corpus (a whitespace-tokenized text file)")
        table = build_text_cooc(_require(Path(args.corpus), "token stream"), labels, args.window)
        prior_table = table
        inputs.append(Path(args.corpus))
    elif args.cooc == "truth":
        table = prior_table = _truth_table(data, labels)
        inputs.append(data / TRUTH)
    else:
        table = prior_table = build_image_cooc(dataset, oracle=True)

    cands = candidate_classes(dataset.vocab, args.mode)
    tables = {}
    for part in ("val", args.partition):
        instances = make_instances(dataset, part, args.mode)
        if not instances:
            raise InputError(f"no {args.mode}-domain instances in the {part} split")
        tables[part] = oracle_score_table(args.oracle, instances, cands, scorers, table, prior_table, args.eps, True)
    active = (args.oracle != "true-prior", True, True)
    if args.oracle == "true-prior":
        alpha = (0.0, 1.0, 1.0) if args.no_calibrate else calibrate(tables["val"], _grid(args), active).weights.as_tuple()
    else:
        alpha = (1.0, 1.0, 1.0) if args.no_calibrate else calibrate(tables["val"], _grid(args), active).weights.as_tuple()
    extra = {"partition": args.partition, "oracle_kind": args.oracle}
    if args.oracle != "textual-bayes":
        extra["cooccurrence_source"] = args.cooc
    doc = _report(tables[args.partition], alpha, args.mode, _ints(args.ks, "--ks"), labels, True, extra)
    out = Path(args.out) if args.out else run / f"oracle.{args.oracle}.{args.mode}.json"
    _write_json(out, doc)
    _write_manifest(run, "oracle-eval", args.argv, {"oracle": args.oracle, "mode": args.mode, "eps": args.eps},
                    None, inputs, [out], started)
    print(f"{args.oracle} {args.mode} MFR {doc['mfr']:.2f} over {doc['count']} instances")
    return EXIT_OK


def cmd_export_scores(args) -> int:
    started = time.perf_counter()
    dataset, emb = load_data(args.data)
    run = Path(args.run)
    scorers, _ = load_run(run, dataset, emb)
    instances = make_instances(dataset, args.partition, args.mode)
    if args.n and len(instances) > args.n:
        keep = np.sort(np.random.default_rng(args.seed).choice(len(instances), args.n, replace=False))
        instances = [instances[i] for i in keep]
    rows = export_component_scores(
        scorers, instances, candidate_classes(dataset.vocab, args.mode), args.k, args.seed
    )
    out = Path(args.out) if args.out else run / "scores.csv"
    write_score_csv(out, rows)
    _write_manifest(run, "export-scores", args.argv, {"n": args.n, "k": args.k, "mode": args.mode}, args.seed,
                    _data_inputs(args.data) + [run / CHECKPOINT], [out], started)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="czsl", description="Context-aware zero-shot object ranking.")
    p.add_argument("--version", action="version", version=f"czsl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a synthetic world")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=_positive_int, default=50)
    g.add_argument("--scenes", type=_positive_int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--zipf", type=_nonneg_float, default=1.1)
    g.add_argument("--dim", type=_positive_int, default=16)
    g.add_argument("--d-visual", type=_positive_int, default=24)
    g.add_argument("--themes", type=_positive_int, default=4)
    g.add_argument("--concentration", type=_nonneg_float, default=8.0)
    g.add_argument("--visual-noise", type=_nonneg_float, default=0.1)
    g.add_argument("--embedding-noise", type=_nonneg_float, default=0.05)
    g.add_argument("--objects-mean", type=float, default=5.0)
    g.add_argument("--max-objects", type=int, default=0)
    g.add_argument("--theme-strength", type=_nonneg_float, default=0.0)
    g.add_argument("--frequency-strength", type=_nonneg_float, default=0.0)
    g.add_argument("--pairs", type=int, default=0, help="number of planted ambiguity pairs")
    g.add_argument("--p-sup", type=float, default=0.5)
    g.add_argument("--ratios", default="0.7,0.1,0.2")
    g.set_defaults(func=cmd_gen_synth)

    g = sub.add_parser("ingest", help="filter a scene file into a data directory")
    g.add_argument("--scenes", required=True)
    g.add_argument("--features", help="feature bank for feature_ref objects")
    g.add_argument("--embeddings", required=True)
    g.add_argument("--min-count", type=_positive_int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_ingest)

    g = sub.add_parser("split", help="write source/target and train/val/test splits")
    g.add_argument("--data", required=True)
    g.add_argument("--p-sup", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ratios", default="0.7,0.1,0.2")
    g.add_argument("--force-source", help="comma-separated labels forced into the source domain")
    g.add_argument("--out")
    g.set_defaults(func=cmd_split)

    g = sub.add_parser("train", help="train components into a run directory")
    g.add_argument("--data", required=True)
    g.add_argument("--run", required=True)
    g.add_argument("--components", nargs="+", choices=COMPONENTS, required=True)
    g.add_argument("--context-model")
    g.add_argument("--devise", action="store_true")
    g.add_argument("--oracle", action="store_true", help="allow context models reading target labels")
    g.add_argument("--config", help="flat key = value file; flags override it")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--l2", type=float)
    g.add_argument("--negatives", type=int)
    g.add_argument("--margin-prior", type=float)
    g.add_argument("--margin-visual", type=float)
    g.add_argument("--margin-context", type=float)
    g.add_argument("--hidden", type=int)
    g.add_argument("--activation", choices=("tanh", "sigmoid", "softplus", "identity"))
    g.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("calibrate", cmd_calibrate, "grid-search exponents on validation MFR"),
        ("eval", cmd_eval, "rank test instances and write a report"),
        ("oracle-eval", cmd_oracle_eval, "evaluate a count-based oracle"),
        ("export-scores", cmd_export_scores, "dump per-component log-scores"),
    ):
        g = sub.add_parser(name, help=helptext)
        g.add_argument("--data", required=True)
        g.add_argument("--run", required=True)
        g.add_argument("--mode", choices=("target", "source", "generalized"), default="target")
        g.add_argument("--out")
        g.set_defaults(func=func)
        if name == "calibrate":
            g.add_argument("--partition", default="val")
            g.add_argument("--grid", help="comma-separated exponent values (default 0,0.25,0.5,1,2,4)")
            g.add_argument("--use", help="subset of context,visual,prior to combine")
        if name == "eval":
            g.add_argument("--partition", default="test")
            g.add_argument("--ks", default="1,5,10")
            g.add_argument("--calibration")
            g.add_argument("--alpha", help="explicit context,visual,prior exponents")
        if name == "oracle-eval":
            g.add_argument("--oracle", choices=("true-prior", "visual-bayes", "textual-bayes"), required=True)
            g.add_argument("--partition", default="test")
            g.add_argument("--ks", default="1,5,10")
            g.add_argument("--cooc", choices=("images", "truth"), default="images")
            g.add_argument("--corpus")
            g.add_argument("--window", type=_positive_int, default=8)
            g.add_argument("--eps", type=_nonneg_float, default=1e-9)
            g.add_argument("--grid")
            g.add_argument("--no-calibrate", action="store_true")
        if name == "export-scores":
            g.add_argument("--partition", default="test")
            g.add_argument("--n", type=int, default=500, help="instances to sample (0 = all)")
            g.add_argument("--k", type=_positive_int, default=1)
            g.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"czsl {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OracleFlagError as exc:
        print(f"czsl {args.command}: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (InputError, DataFormatError, EmbeddingFormatError, OSError, KeyError, ValueError) as exc:
        print(f"czsl {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"czsl {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    raise SystemExit(main())
