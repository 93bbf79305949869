"""Command-line entry point: the full pipeline as file-emitting subcommands.

Every subcommand that writes an output directory first records a manifest
of its resolved settings, so result directories are self-describing. Exit
codes: 0 success, 2 usage or validation failure, 3 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__, data, figures, localization, metrics, model, training
from .imageio import load_image, write_overlay_ppm, write_possibility_pgm
from .kvfile import write_kv
from .tensor import FormatError, ShapeError
from .training import NumericError

EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _write_manifest(out_dir, subcommand, pairs):
    os.makedirs(out_dir, exist_ok=True)
    rows = [("subcommand", subcommand), ("tool_version", __version__)] + list(pairs)
    write_kv(os.path.join(out_dir, "manifest.txt"), rows)


def _load_schema(path_or_default):
    if path_or_default == "default":
        return data.default_schema()
    with open(path_or_default, "r", encoding="utf-8") as fh:
        return data.schema_from_text(fh.read())


def _cmd_gen_data(args):
    schema = _load_schema(args.schema)
    if args.count < 1:
        raise ValueError(f"--count must be >= 1, got {args.count}")
    _write_manifest(
        args.out,
        "gen-data",
        [
            ("schema", args.schema),
            ("count", str(args.count)),
            ("seed", str(args.seed)),
            ("min_h", str(args.min_h)),
            ("max_h", str(args.max_h)),
            ("out", args.out),
        ],
    )
    samples = data.generate(schema, args.count, (args.min_h, args.max_h), args.seed)
    data.write_dataset(samples, args.out, schema)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _manifest_config_pairs(mcfg, tcfg):
    pairs = [("model." + k, v) for k, v in
             (line.split(" = ") for line in model.config_to_text(mcfg).strip().splitlines())]
    pairs += [("train." + k, v) for k, v in
              (line.split(" = ") for line in training.train_config_to_text(tcfg).strip().splitlines())]
    return pairs


def _cmd_train(args):
    samples, schema = data.read_dataset(args.data)
    mcfg = model.load_config(args.model_config) if args.model_config else model.default_config(
        num_attributes=len(schema)
    )
    if mcfg.num_attributes != len(schema):
        raise ValueError(
            f"model config predicts {mcfg.num_attributes} attributes, dataset has {len(schema)}"
        )
    if args.train_config:
        with open(args.train_config, "r", encoding="utf-8") as fh:
            tcfg = training.train_config_from_text(fh.read())
    else:
        tcfg = training.TrainConfig()

    start_epoch = 0
    velocity = None
    if args.resume:
        state, extras = model.load_checkpoint(args.resume)
        if model.config_to_text(state.config) != model.config_to_text(mcfg):
            raise ValueError("resume checkpoint was built from a different model config")
        if "opt.epoch" in extras:
            start_epoch = int(extras["opt.epoch"].item())
        velocity = {
            name: extras[f"opt.velocity.{name}"].data.copy()
            for name in state.params
            if f"opt.velocity.{name}" in extras
        } or None
    else:
        state = model.build(mcfg)

    pairs = [("data", args.data), ("out", args.out),
             ("resume", args.resume or ""), ("start_epoch", str(start_epoch))]
    _write_manifest(args.out, "train", pairs + _manifest_config_pairs(mcfg, tcfg))

    state, logs, velocity = training.train(state, samples, tcfg, start_epoch=start_epoch,
                                           velocity=velocity)
    from .tensor import Tensor

    extras = {f"opt.velocity.{n}": Tensor(v) for n, v in velocity.items()}
    extras["opt.epoch"] = Tensor(np.array(float(tcfg.epochs)))
    model.save_checkpoint(state, os.path.join(args.out, "checkpoint.wpal"), extras=extras)
    training.write_training_log(os.path.join(args.out, "training_log.csv"), logs)
    figures.save_loss_curve(logs, os.path.join(args.out, "loss_curve.png"))
    if logs:
        print(f"trained {tcfg.epochs} epochs, final mean loss {logs[-1].mean_loss:.4f}")
    return 0


def _predict_matrix(state, samples):
    preds = np.empty((len(samples), state.config.num_attributes))
    for i, s in enumerate(samples):
        preds[i] = model.forward(state, s.image).prediction.data
    return preds


def _cmd_eval(args):
    samples, schema = data.read_dataset(args.data)
    state, _ = model.load_checkpoint(args.checkpoint)
    if state.config.num_attributes != len(schema):
        raise ValueError("checkpoint and dataset disagree on attribute count")
    _write_manifest(args.out, "eval", [("data", args.data), ("checkpoint", args.checkpoint),
                                       ("out", args.out)])
    preds = _predict_matrix(state, samples)
    truth = np.stack([s.labels for s in samples])
    report = metrics.EvalReport.from_predictions(preds, truth)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_kv_text())
    with open(os.path.join(args.out, "per_attribute.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.per_attribute_csv(schema.names))
    figures.save_eval_bars(report, schema.names, os.path.join(args.out, "eval_bars.png"))
    print(report.to_kv_text().strip())
    return 0


def _cmd_estrel(args):
    samples, schema = data.read_dataset(args.data)
    state, _ = model.load_checkpoint(args.checkpoint)
    if state.config.num_attributes != len(schema):
        raise ValueError("checkpoint and dataset disagree on attribute count")
    _write_manifest(args.out, "estrel", [("data", args.data), ("checkpoint", args.checkpoint),
                                         ("out", args.out)])
    scores = localization.collect_scores(state, samples)
    labels = np.stack([s.labels for s in samples])
    per_attribute = {}
    for i, name in enumerate(schema.names):
        per_attribute[name] = localization.estimate_relationship(scores, labels[:, i])
    branch_index = state.config.bin_branch_index()
    localization.write_stats_csv(os.path.join(args.out, "stats.csv"), per_attribute, branch_index)
    print(f"wrote correlation stats for {len(per_attribute)} attributes")
    return 0


def _cmd_localize(args):
    if (args.image is None) == (args.data is None):
        raise ValueError("exactly one of --image and --data is required")
    if not os.path.exists(args.stats):
        raise ValueError(f"missing stats file {args.stats}")
    stats_by_attr, _ = localization.read_stats_csv(args.stats)
    state, _ = model.load_checkpoint(args.checkpoint)

    schema = None
    if args.data is not None:
        samples, schema = data.read_dataset(args.data)
        if not 0 <= args.sample < len(samples):
            raise ValueError(f"--sample {args.sample} out of range for {len(samples)} samples")
        image = samples[args.sample].image
        source = f"{args.data}[{args.sample}]"
    else:
        image = load_image(args.image, longest_side=args.longest_side)
        source = args.image
    if args.schema:
        schema = _load_schema(args.schema)

    names = list(stats_by_attr)
    if args.attributes:
        wanted = [a.strip() for a in args.attributes.split(",") if a.strip()]
        unknown = set(wanted) - set(names)
        if unknown:
            raise ValueError(f"unknown attributes: {sorted(unknown)}")
        names = wanted

    _write_manifest(
        args.out,
        "localize",
        [
            ("source", source),
            ("checkpoint", args.checkpoint),
            ("stats", args.stats),
            ("attributes", ",".join(names)),
            ("body", "true" if args.body else "false"),
            ("out", args.out),
        ],
    )

    result = model.forward(state, image)
    image_shape = image.shape[1:]
    all_names = list(stats_by_attr)
    positive = {n for n in all_names if result.prediction.data[all_names.index(n)] > 0.5}
    if args.body and not positive:
        raise ValueError("--body needs at least one positively predicted attribute")

    # The body region averages the maps of every positively predicted
    # attribute, so compute those even when --attributes selects a subset.
    needed = list(dict.fromkeys(names + (sorted(positive) if args.body else [])))
    heats = {}
    for name in needed:
        pred = float(result.prediction.data[all_names.index(name)])
        heats[name] = localization.estimate_shape(pred, result.detections,
                                                  result.activation_maps,
                                                  stats_by_attr[name], image_shape)

    loc_lines = ["attribute,rank,y,x,mass"]
    for name in names:
        heat = heats[name]
        pred = float(result.prediction.data[all_names.index(name)])
        k = schema.candidate_count(name) if schema is not None else 1
        located = localization.locate(heat, k)
        write_possibility_pgm(os.path.join(args.out, f"{name}_map.pgm"), heat)
        write_overlay_ppm(os.path.join(args.out, f"{name}_overlay.ppm"), image, heat)
        figures.save_heatmap_figure(image, heat, located.centroids,
                                    os.path.join(args.out, f"{name}_map.png"),
                                    title=f"{name} p={pred:.2f}")
        for rank, (c, m) in enumerate(zip(located.centroids, located.masses), start=1):
            loc_lines.append(f"{name},{rank},{float(c[0])!r},{float(c[1])!r},{float(m)!r}")
    with open(os.path.join(args.out, "locations.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(loc_lines) + "\n")

    if args.body:
        region = localization.body_region([heats[n] for n in sorted(positive)])
        write_possibility_pgm(os.path.join(args.out, "body_region.pgm"), region)
        figures.save_heatmap_figure(image, region, None,
                                    os.path.join(args.out, "body_region.png"), title="body region")
    print(f"localized {len(names)} attributes from {source}")
    return 0


def _cmd_gradcheck(args):
    from .tensor import Tensor
    from . import layers

    rng = np.random.default_rng(7)
    reports = []
    if args.scope == "layer":
        x = Tensor(rng.uniform(-2, 2, (2, 6, 6)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        reports.append(("conv2d", training.grad_check(
            lambda: (layers.conv2d(x, w, stride=1, pad=1) * rng_const((3, 6, 6))).sum(),
            {"input": x, "kernel": w}, args.tolerance)))
        x2 = Tensor(rng.uniform(-2, 2, (2, 6, 6)), requires_grad=True)
        reports.append(("relu", training.grad_check(
            lambda: (layers.relu(x2) * rng_const((2, 6, 6))).sum(), {"input": x2}, args.tolerance)))
        x3 = Tensor(rng.uniform(-2, 2, (2, 6, 6)), requires_grad=True)
        reports.append(("sigmoid", training.grad_check(
            lambda: (layers.sigmoid(x3) * rng_const((2, 6, 6))).sum(), {"input": x3}, args.tolerance)))
        x4 = Tensor(rng.uniform(-2, 2, (2, 6, 6)), requires_grad=True)
        reports.append(("maxpool2x2", training.grad_check(
            lambda: (layers.maxpool2x2(x4) * rng_const((2, 3, 3))).sum(), {"input": x4}, args.tolerance)))
        x5 = Tensor(rng.uniform(-2, 2, (2, 6, 6)), requires_grad=True)
        spec = layers.PyramidSpec.two_level(3, 3)
        reports.append(("fspp", training.grad_check(
            lambda: (layers.fspp_forward(x5, spec).scores * rng_const((20,))).sum(),
            {"input": x5}, args.tolerance)))
        a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        reports.append(("matmul", training.grad_check(
            lambda: ((a @ b) * rng_const((3, 2))).sum(), {"a": a, "b": b}, args.tolerance)))
    else:
        cfg = model.ModelConfig(
            trunk=(model.ConvBlockSpec(4), model.ConvBlockSpec(6), model.ConvBlockSpec(8)),
            taps=(1, 2, 3),
            branches=(
                model.BranchSpec(2, layers.PyramidSpec.two_level(2, 2)),
                model.BranchSpec(2, layers.PyramidSpec.two_level(2, 2)),
                model.BranchSpec(2, layers.PyramidSpec.two_level(2, 1)),
            ),
            num_attributes=2,
            seed=11,
        )
        state = model.build(cfg)
        img = Tensor(rng.uniform(0, 1, (3, 12, 8)), requires_grad=True)
        direction = rng.uniform(0.5, 1.5, 2)
        leaves = dict(state.params)
        leaves["image"] = img
        reports.append(("model", training.grad_check(
            lambda: (model.forward(state, img).prediction * direction).sum(),
            leaves, args.tolerance)))

    failed = False
    for name, report in reports:
        print(f"== {name}")
        print(report.format_table())
        failed = failed or not report.passed
    if failed:
        raise NumericError("gradient check failed")
    return 0


def rng_const(shape):
    # Fixed projection so scalar losses exercise every output element.
    rng = np.random.default_rng(1234)
    return rng.uniform(0.5, 1.5, shape)


def _cmd_rank_bins(args):
    stats_by_attr, branch_index = localization.read_stats_csv(args.stats)
    if args.attribute not in stats_by_attr:
        raise ValueError(f"attribute {args.attribute!r} not in stats file")
    ranked = localization.rank_bins(stats_by_attr[args.attribute], branch_index, args.k)
    print("rank,bin,branch,RS")
    for rank, (bin_idx, branch, rs) in enumerate(ranked, start=1):
        print(f"{rank},{bin_idx},{branch},{rs!r}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="wpal",
                                     description="Weakly-supervised attribute recognition "
                                                 "and localization pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--schema", default="default", help="schema file or 'default'")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-h", type=int, default=64)
    p.add_argument("--max-h", type=int, default=128)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("estrel", help="estimate bin-attribute correlation stats")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_estrel)

    p = sub.add_parser("localize", help="possibility maps and candidate locations")
    p.add_argument("--image", help="a P6 PPM image")
    p.add_argument("--data", help="dataset directory (use with --sample)")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attributes", help="comma-separated subset (default: all)")
    p.add_argument("--schema", help="schema for candidate counts (with --image)")
    p.add_argument("--body", action="store_true", help="also write the body-region map")
    p.add_argument("--longest-side", type=int, help="rescale --image to this longest side")
    p.set_defaults(fn=_cmd_localize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("layer", "model"), default="layer")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("rank-bins", help="top-k bins by correlation strength")
    p.add_argument("--stats", required=True)
    p.add_argument("--attribute", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(fn=_cmd_rank_bins)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FormatError, ShapeError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
