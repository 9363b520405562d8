"""Command-line pipeline: graph validation/extraction, synthesis, training,
refinement, evaluation and the ablation ladder.

Every command is a thin deterministic wrapper over one module: identical
arguments and seed produce byte-identical artifacts.  JSON outputs embed a
provenance block (command line, seed, config digest); grid/parameter/trace
files get a ``<name>.meta.json`` sidecar with the same block, since their
formats have no comment syntax.

Exit codes: 0 success, 1 validation or input error, 2 runtime or numeric
error, 3 transport (LLM provider) error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings

from . import __version__, benchmark
from .extraction import ExtractionError, ProviderConfig, TransportError, extract_graph
from .gridio import GridFormatError, read_grid_as, read_params, write_grid, write_history_csv, write_params
from .inference import AttenuationConfig, infer
from .losses import LossWeights
from .metrics import miou, plausibility_rate, reliability
from .priors import MODALITIES, EmptyGraphWarning, PriorError, load_graph, save_graph
from .refiner import Scene, TrainConfig, TrainingError, evaluate_losses, train
from .synth import SynthConfig, synthesize_scene

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_RUNTIME = 2
EXIT_TRANSPORT = 3


def _load_config_file(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise ValueError("config file must hold a JSON object")
    return config


def _resolve(args, config, key, default):
    """Explicit CLI flag wins, then the config file, then the default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _provenance(argv, seed, resolved):
    digest = hashlib.sha256(
        json.dumps(resolved, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()
    return {"command": ["physeg"] + list(argv), "seed": seed, "config_digest": digest}


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_sidecar(path, provenance):
    _write_json(str(path) + ".meta.json", {"provenance": provenance})


def _parse_rasters(raw):
    """Parse 'ndvi=a.pgrd,sar=b.pgrd' into {modality: path}."""
    table = {}
    if not raw:
        return table
    for item in raw.split(","):
        if "=" not in item:
            raise ValueError(f"raster argument {item!r} must look like sar=PATH")
        key, path = item.split("=", 1)
        name = key.strip().upper()
        if name not in MODALITIES:
            raise ValueError(f"unknown raster modality {key!r}")
        table[name] = path.strip()
    return table


def _load_rasters(table):
    return {name: read_grid_as(path, name) for name, path in table.items()}


def _parse_modalities(raw, default=()):
    if raw is None:
        return tuple(default)
    names = [part.strip().upper() for part in raw.split(",") if part.strip()]
    for name in names:
        if name not in MODALITIES:
            raise ValueError(f"unknown modality {name!r}")
    return tuple(names)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pckg_validate(args, argv):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyGraphWarning)
        graph = load_graph(args.pckg)
    report = {
        "valid": True,
        "classes": graph.num_classes,
        "categories": list(graph.categories),
        "warnings": [str(w.message) for w in caught],
    }
    resolved = {"pckg": args.pckg}
    report["provenance"] = _provenance(argv, None, resolved)
    if args.out:
        _write_json(args.out, report)
    print(json.dumps({k: report[k] for k in ("valid", "classes", "warnings")}, sort_keys=True))
    return EXIT_OK


def cmd_pckg_extract(args, argv):
    config = _load_config_file(args.config)
    if args.vocab_file:
        with open(args.vocab_file, encoding="utf-8") as fh:
            terms = [line.strip() for line in fh if line.strip()]
    elif args.vocab:
        terms = [t.strip() for t in args.vocab.split(",") if t.strip()]
    else:
        raise ValueError("pckg extract needs --vocab or --vocab-file")
    provider = ProviderConfig(
        mode="live" if args.live else "fixture",
        endpoint=_resolve(args, config, "endpoint", "") or "",
        fixture_dir=_resolve(args, config, "fixtures", "") or "",
        request_timeout=float(_resolve(args, config, "timeout", 30.0)),
        max_retries=int(_resolve(args, config, "retries", 2)),
        model=_resolve(args, config, "model", "gpt-4o"),
        parallelism=int(_resolve(args, config, "parallelism", 1)),
    )
    graph, report = extract_graph(terms, provider)
    save_graph(graph, args.out)
    resolved = {"terms": terms, "mode": provider.mode, "retries": provider.max_retries}
    provenance = _provenance(argv, None, resolved)
    _write_sidecar(args.out, provenance)
    if args.report:
        payload = report.to_json_dict()
        payload["provenance"] = provenance
        _write_json(args.report, payload)
    print(
        json.dumps(
            {"classes": graph.num_classes, "failed": len(report.failures)}, sort_keys=True
        )
    )
    return EXIT_OK


def cmd_synth(args, argv):
    config = _load_config_file(args.config)
    seed = int(_resolve(args, config, "seed", 0))
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)

    if args.demo:
        resolved = {"demo": True, "seed": seed, "scenes": args.scenes, "size": args.size}
        provenance = _provenance(argv, seed, resolved)
        manifest = benchmark.build_demo(
            out_dir, seed=seed, num_scenes=args.scenes, size=args.size
        )
        manifest["provenance"] = provenance
        _write_json(os.path.join(out_dir, benchmark.MANIFEST_NAME), manifest)
        print(json.dumps({"scenes": len(manifest["scenes"]), "out": out_dir}, sort_keys=True))
        return EXIT_OK

    if not args.pckg or not args.labels:
        raise ValueError("synth needs --pckg and --labels (or --demo)")
    graph = load_graph(args.pckg)
    labels = read_grid_as(args.labels, "LABEL")
    modalities = _parse_modalities(
        _resolve(args, config, "modalities", None), default=MODALITIES
    )
    synth_config = SynthConfig(
        seed=seed,
        noise_model=_resolve(args, config, "noise", "truncated_gaussian"),
        smoothing_radius=int(_resolve(args, config, "smoothing", 1)),
    )
    resolved = {
        "seed": seed,
        "noise": synth_config.noise_model,
        "smoothing": synth_config.smoothing_radius,
        "modalities": list(modalities),
    }
    provenance = _provenance(argv, seed, resolved)
    rasters = synthesize_scene(labels, graph, modalities, synth_config)
    written = {}
    for name, grid in rasters.items():
        path = os.path.join(out_dir, f"{name.lower()}.pgrd")
        write_grid(path, name, grid)
        _write_sidecar(path, provenance)
        written[name] = path
    print(json.dumps({"written": written}, sort_keys=True))
    return EXIT_OK


def _scenes_from_args(args):
    if args.manifest:
        demo_dir = os.path.dirname(os.path.abspath(args.manifest))
        graph, scenes, manifest = benchmark.load_manifest(demo_dir)
        return graph, scenes, manifest
    needed = ("pckg", "labels", "features", "coarse")
    if not all(getattr(args, key) for key in needed):
        raise ValueError("train needs --manifest or all of --pckg/--labels/--features/--coarse")
    graph = load_graph(args.pckg)
    scene = Scene(
        features=read_grid_as(args.features, "FEAT"),
        coarse=read_grid_as(args.coarse, "PROB"),
        rasters=_load_rasters(_parse_rasters(args.rasters)),
        labels=read_grid_as(args.labels, "LABEL"),
    )
    return graph, [scene], {}


def cmd_train(args, argv):
    config = _load_config_file(args.config)
    graph, scenes, _ = _scenes_from_args(args)
    seed = int(_resolve(args, config, "seed", 0))
    train_config = TrainConfig(
        seed=seed,
        learning_rate=float(_resolve(args, config, "lr", 0.05)),
        epochs=int(_resolve(args, config, "epochs", 200)),
        batch_size=int(_resolve(args, config, "batch_size", 0)),
        weights=LossWeights(
            alpha=float(_resolve(args, config, "alpha", 1.0)),
            lambda1=float(_resolve(args, config, "lambda1", 0.05)),
            lambda2=float(_resolve(args, config, "lambda2", 0.40)),
        ),
        modality_dropout_prob=float(_resolve(args, config, "dropout", 0.5)),
        hidden=int(_resolve(args, config, "hidden", 32)),
        residual_scale=float(_resolve(args, config, "residual_scale", 0.5)),
    )
    params, history = train(scenes, graph, train_config)
    resolved = {
        "seed": seed,
        "lr": train_config.learning_rate,
        "epochs": train_config.epochs,
        "batch_size": train_config.batch_size,
        "alpha": train_config.weights.alpha,
        "lambda1": train_config.weights.lambda1,
        "lambda2": train_config.weights.lambda2,
        "dropout": train_config.modality_dropout_prob,
        "hidden": train_config.hidden,
        "residual_scale": train_config.residual_scale,
        "scenes": len(scenes),
    }
    provenance = _provenance(argv, seed, resolved)
    write_params(args.out, params)
    _write_sidecar(args.out, provenance)
    if args.history:
        write_history_csv(args.history, history)
        _write_sidecar(args.history, provenance)
    final = evaluate_losses(params, scenes, graph, train_config.weights)
    if args.losses:
        payload = dict(final)
        payload["provenance"] = provenance
        _write_json(args.losses, payload)
    print(
        json.dumps(
            {
                "steps": len(history),
                "seg": final["seg"],
                "region": final["region"],
                "phys": final["phys"],
                "total": final["total"],
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_refine(args, argv):
    config = _load_config_file(args.config)
    graph = load_graph(args.pckg)
    params = read_params(args.params)
    features = read_grid_as(args.features, "FEAT")
    coarse = read_grid_as(args.coarse, "PROB")
    raster_paths = _parse_rasters(args.rasters)
    rasters = _load_rasters(raster_paths)
    mode = _resolve(args, config, "mode", "physical")
    if mode not in ("visual", "physical"):
        raise ValueError(f"unknown mode {mode!r}; expected visual or physical")
    if mode == "visual":
        available = ()
    else:
        available = _parse_modalities(
            _resolve(args, config, "available", None), default=tuple(sorted(rasters))
        )
    att_config = AttenuationConfig(
        available=available,
        sigma_rel=float(_resolve(args, config, "sigma_rel", 0.5)),
        tau_rel=float(_resolve(args, config, "tau_rel", 2.0)),
    )
    labels, probs, trace = infer(params, features, coarse, rasters, graph, att_config)
    seed = int(_resolve(args, config, "seed", 0))
    resolved = {
        "mode": mode,
        "available": list(available),
        "sigma_rel": att_config.sigma_rel,
        "tau_rel": att_config.tau_rel,
        "seed": seed,
    }
    provenance = _provenance(argv, seed, resolved)
    os.makedirs(args.out, exist_ok=True)
    labels_path = os.path.join(args.out, "labels.pgrd")
    probs_path = os.path.join(args.out, "probs.pgrd")
    trace_path = os.path.join(args.out, "trace.jsonl")
    write_grid(labels_path, "LABEL", labels)
    write_grid(probs_path, "PROB", probs)
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(trace.to_jsonl())
    for path in (labels_path, probs_path, trace_path):
        _write_sidecar(path, provenance)
    print(
        json.dumps(
            {"flips": len(trace.flips), "warnings": len(trace.warnings), "out": args.out},
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_eval(args, argv):
    config = _load_config_file(args.config)
    graph = load_graph(args.pckg)
    pred = read_grid_as(args.pred, "LABEL")
    gt = read_grid_as(args.gt, "LABEL")
    report = miou(
        pred, gt, graph.num_classes, ignore_background=not args.include_background
    )
    payload = {"miou": report.miou, "per_class": report.to_json_dict()["per_class"]}
    rasters = _load_rasters(_parse_rasters(args.rasters))
    if rasters:
        rate, breakdown = plausibility_rate(pred, rasters, graph)
        payload["plausibility"] = {
            "rate": rate,
            "per_class": {str(k): v for k, v in breakdown.items()},
        }
    if args.synthetic and args.reference:
        modality = (args.modality or "SAR").upper()
        rel = reliability(
            read_grid_as(args.synthetic, modality),
            read_grid_as(args.reference, modality),
            gt,
            graph,
            modality,
        )
        payload["reliability"] = rel.to_json_dict()
    payload["provenance"] = _provenance(argv, None, {"pred": args.pred, "gt": args.gt})
    if args.out:
        _write_json(args.out, payload)
    if args.csv:
        _write_eval_csv(args.csv, payload)
    print(json.dumps({"miou": payload["miou"]}, sort_keys=True))
    return EXIT_OK


def _write_eval_csv(path, payload):
    lines = ["metric,class,value"]
    for cid, iou in sorted(payload["per_class"].items(), key=lambda kv: int(kv[0])):
        lines.append(f"iou,{cid},{'' if iou is None else repr(iou)}")
    lines.append(f"miou,,{payload['miou']!r}")
    if "plausibility" in payload:
        lines.append(f"plausibility,,{payload['plausibility']['rate']!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_ablate(args, argv):
    config = _load_config_file(args.config)
    graph, scenes, manifest = benchmark.load_manifest(args.demo_dir)
    seed = int(_resolve(args, config, "seed", 0))
    epochs = int(_resolve(args, config, "epochs", benchmark.DEMO_EPOCHS))
    lr = float(_resolve(args, config, "lr", benchmark.DEMO_LEARNING_RATE))
    table = benchmark.evaluate_rows(
        graph,
        scenes,
        manifest,
        seed=seed,
        epochs=epochs,
        learning_rate=lr,
        baseline_only=args.baseline_only,
    )
    table["provenance"] = _provenance(argv, seed, {"seed": seed, "epochs": epochs, "lr": lr})
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "ablation.json"), table)
    text = benchmark.format_table(table)
    with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physeg",
        description="Physics-prior segmentation refinement pipeline",
    )
    parser.add_argument("--version", action="version", version=f"physeg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    pckg = sub.add_parser("pckg", help="knowledge-graph validation and extraction")
    pckg_sub = pckg.add_subparsers(dest="subcommand", required=True)

    validate = pckg_sub.add_parser("validate", help="validate a graph file")
    validate.add_argument("--pckg", required=True)
    validate.add_argument("--out")
    validate.set_defaults(func=cmd_pckg_validate)

    extract = pckg_sub.add_parser("extract", help="extract a graph from vocabulary terms")
    extract.add_argument("--vocab")
    extract.add_argument("--vocab-file")
    extract.add_argument("--fixtures")
    extract.add_argument("--live", action="store_true")
    extract.add_argument("--endpoint")
    extract.add_argument("--model")
    extract.add_argument("--retries", type=int)
    extract.add_argument("--parallelism", type=int)
    extract.add_argument("--timeout", type=float)
    extract.add_argument("--out", required=True)
    extract.add_argument("--report")
    extract.add_argument("--config")
    extract.set_defaults(func=cmd_pckg_extract)

    synth = sub.add_parser("synth", help="synthesize physical rasters (or the demo benchmark)")
    synth.add_argument("--demo", action="store_true")
    synth.add_argument("--scenes", type=int, default=3)
    synth.add_argument("--size", type=int, default=32)
    synth.add_argument("--pckg")
    synth.add_argument("--labels")
    synth.add_argument("--modalities")
    synth.add_argument("--noise")
    synth.add_argument("--smoothing", type=int)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--config")
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)

    train_p = sub.add_parser("train", help="train the residual refinement head")
    train_p.add_argument("--manifest")
    train_p.add_argument("--pckg")
    train_p.add_argument("--labels")
    train_p.add_argument("--features")
    train_p.add_argument("--coarse")
    train_p.add_argument("--rasters")
    train_p.add_argument("--seed", type=int)
    train_p.add_argument("--lr", type=float)
    train_p.add_argument("--epochs", type=int)
    train_p.add_argument("--batch-size", dest="batch_size", type=int)
    train_p.add_argument("--alpha", type=float)
    train_p.add_argument("--lambda1", type=float)
    train_p.add_argument("--lambda2", type=float)
    train_p.add_argument("--dropout", type=float)
    train_p.add_argument("--hidden", type=int)
    train_p.add_argument("--residual-scale", dest="residual_scale", type=float)
    train_p.add_argument("--history")
    train_p.add_argument("--losses")
    train_p.add_argument("--config")
    train_p.add_argument("--out", required=True)
    train_p.set_defaults(func=cmd_train)

    refine_p = sub.add_parser("refine", help="refine a coarse map and re-weight with intervals")
    refine_p.add_argument("--params", required=True)
    refine_p.add_argument("--pckg", required=True)
    refine_p.add_argument("--features", required=True)
    refine_p.add_argument("--coarse", required=True)
    refine_p.add_argument("--rasters")
    refine_p.add_argument("--mode", choices=("visual", "physical"))
    refine_p.add_argument("--available")
    refine_p.add_argument("--sigma-rel", dest="sigma_rel", type=float)
    refine_p.add_argument("--tau-rel", dest="tau_rel", type=float)
    refine_p.add_argument("--seed", type=int)
    refine_p.add_argument("--config")
    refine_p.add_argument("--out", required=True)
    refine_p.set_defaults(func=cmd_refine)

    eval_p = sub.add_parser("eval", help="evaluate predicted labels")
    eval_p.add_argument("--pred", required=True)
    eval_p.add_argument("--gt", required=True)
    eval_p.add_argument("--pckg", required=True)
    eval_p.add_argument("--rasters")
    eval_p.add_argument("--synthetic")
    eval_p.add_argument("--reference")
    eval_p.add_argument("--modality")
    eval_p.add_argument("--include-background", action="store_true")
    eval_p.add_argument("--csv")
    eval_p.add_argument("--config")
    eval_p.add_argument("--out")
    eval_p.set_defaults(func=cmd_eval)

    ablate = sub.add_parser("ablate", help="run the 4-row ablation ladder on the demo benchmark")
    ablate.add_argument("--demo-dir", required=True)
    ablate.add_argument("--baseline-only", dest="baseline_only", action="store_true")
    ablate.add_argument("--seed", type=int)
    ablate.add_argument("--epochs", type=int)
    ablate.add_argument("--lr", type=float)
    ablate.add_argument("--config")
    ablate.add_argument("--out", required=True)
    ablate.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except TransportError as exc:
        return _fail(EXIT_TRANSPORT, exc)
    except (TrainingError, ArithmeticError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    except (
        PriorError,
        ExtractionError,
        GridFormatError,
        ValueError,
        KeyError,
        OSError,
        json.JSONDecodeError,
    ) as exc:
        return _fail(EXIT_INPUT, exc)
    except Exception as exc:  # anything else is a runtime failure
        return _fail(EXIT_RUNTIME, exc)


def _fail(code: int, exc: Exception) -> int:
    print(
        json.dumps(
            {"error": type(exc).__name__, "message": str(exc), "exit_code": code},
            sort_keys=True,
        ),
        file=sys.stderr,
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
