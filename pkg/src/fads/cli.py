"""Command line driver.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 anomaly detected
(``score --gate``).
"""
import argparse
import logging
import os
import sys

from . import core
from .data import DataError, ingest, load_manifest, write_synthetic
from .engine import DimensionError, NonFiniteError
from .localization import write_overlay, write_region_mask, write_saliency
from .netio import GraphError, WeightFormatError, make_reference_net, save_graph, save_weights
from .pipeline import (
    ConfigError, RunConfig, csv_text, fit_ensemble, fmt, load_config, localize_image, run_eval, score_images,
)

log = logging.getLogger("fads")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ANOMALY = 0, 1, 2, 3
DATA_ERRORS = (DataError, DimensionError, NonFiniteError, GraphError, WeightFormatError,
               core.DegenerateModelError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _config(args):
    if args.config:
        config = load_config(args.config)
    else:
        config = RunConfig.from_dict({"members": [{"reference_seed": 42, "input_size": [1, 32, 32]},
                                                  {"reference_seed": 42, "input_size": [1, 64, 64]}]})
    overrides = {}
    if getattr(args, "boundary", None) is not None:
        overrides["boundary"] = args.boundary
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = RunConfig(**{**config.__dict__, **overrides})
    return config


def _out_dir(args, config):
    out = args.out or config.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _manifest(args):
    if not args.manifest:
        raise UsageError("--manifest is required")
    return load_manifest(args.manifest)


def _model_path(args, out):
    return args.model or os.path.join(out, "ensemble.json")


def cmd_make_refnet(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    seed = 42 if args.seed is None else args.seed
    graph, weights = make_reference_net(seed)
    save_graph(graph, os.path.join(out, f"refnet_{seed}.json"))
    save_weights(weights, os.path.join(out, f"refnet_{seed}.bin"))
    print(os.path.join(out, f"refnet_{seed}.json"))
    return EXIT_OK


def cmd_synth(args):
    out = args.out or "synthetic"
    manifest = write_synthetic(out, 42 if args.seed is None else args.seed)
    print(f"wrote {len(manifest.entries)} images to {out}")
    return EXIT_OK


def cmd_fit(args):
    manifest = _manifest(args)
    config = _config(args)
    out = _out_dir(args, config)
    anomalous = [e.id for e in manifest.entries if e.label == 1]
    if anomalous:
        raise DataError(f"training manifest contains anomalous entries: {anomalous[:5]}")
    fit_ensemble(config, ingest(manifest), out_dir=out, jobs=args.jobs)
    print(os.path.join(out, "ensemble.json"))
    return EXIT_OK


def cmd_score(args):
    manifest = _manifest(args)
    config = _config(args)
    out = _out_dir(args, config)
    rows = []
    if manifest.entries:
        ensemble = core.load_ensemble(_model_path(args, out))
        scores = score_images(ensemble, ingest(manifest), args.jobs)
        rows = [[e.id, e.view, fmt(s), "" if e.label is None else e.label, int(s > config.boundary)]
                for e, s in zip(manifest.entries, scores)]
    _write(os.path.join(out, "scores.csv"), csv_text(["id", "view", "score", "label", "above_boundary"], rows))
    flagged = sum(r[4] for r in rows)
    print(f"scored {len(rows)} images, {flagged} above boundary {config.boundary}")
    if args.gate and flagged:
        return EXIT_ANOMALY
    return EXIT_OK


def cmd_localize(args):
    manifest = _manifest(args)
    config = _config(args)
    out = _out_dir(args, config)
    ensemble = core.load_ensemble(_model_path(args, out))
    overlay = args.overlay or config.overlay
    index = []
    for entry, image in zip(manifest.entries, ingest(manifest)):
        stem = f"{entry.id}_{entry.view}" if entry.view else entry.id
        sal, mask = localize_image(ensemble, image, config)
        write_saliency(sal, os.path.join(out, f"{stem}_saliency.png"))
        write_region_mask(mask, os.path.join(out, f"{stem}_mask.pgm"))
        if overlay:
            write_overlay(image, sal, os.path.join(out, f"{stem}_overlay.png"))
        index.append({"id": entry.id, "view": entry.view, "score": sal.source_score,
                      "regions": int(mask.cells.sum())})
    params = {"pixel_threshold": config.pixel_threshold, "window": config.window,
              "region_threshold": config.region_threshold, "images": index}
    _write(os.path.join(out, "localization.json"), core.dumps_canonical(params))
    print(f"localized {len(index)} images")
    return EXIT_OK


def cmd_eval(args):
    manifest = _manifest(args)
    config = _config(args)
    out = _out_dir(args, config)
    if not manifest.labeled:
        missing = [e.id for e in manifest.entries if e.label is None]
        raise DataError(f"eval needs a label for every manifest entry; unlabeled: {missing[:5]}")
    score_rows, fold_rows, summary = run_eval(config, manifest, args.k, config.seed, args.jobs)
    _write(os.path.join(out, "eval_scores.csv"), csv_text(["id", "view", "score", "label", "fold"], score_rows))
    _write(os.path.join(out, "folds.csv"), csv_text(["fold", "auc", "n_train", "n_test"], fold_rows))
    _write(os.path.join(out, "summary.json"), core.dumps_canonical(summary))
    print(f"mean AUC over {summary['k']} folds: {summary['mean_auc']}")
    return EXIT_OK


COMMANDS = {
    "fit": (cmd_fit, "fit per-member nominal statistics and ensemble normalizers"),
    "score": (cmd_score, "score images with a fitted ensemble"),
    "localize": (cmd_localize, "write saliency maps and region masks"),
    "eval": (cmd_eval, "stratified k-fold evaluation on a labeled manifest"),
    "make-refnet": (cmd_make_refnet, "write the seeded reference network"),
    "synth": (cmd_synth, "write the synthetic grating benchmark"),
}


def build_parser():
    parser = _Parser(prog="fads", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--manifest", help="dataset manifest CSV (id,view,path,label,stratum)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--boundary", type=float, help="decision boundary on the ensemble score (default 1.0)")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
        if name in ("score", "localize"):
            p.add_argument("--model", help="ensemble file (default OUT/ensemble.json)")
        if name == "score":
            p.add_argument("--gate", action="store_true", help="exit 3 if any score exceeds the boundary")
        if name == "localize":
            p.add_argument("--overlay", action="store_true", help="also write saliency blended onto the image")
        if name == "eval":
            p.add_argument("--k", type=int, help="number of folds (default from config, 7)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("fads: error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if args.jobs is not None and args.jobs < 1:
        print("fads: error: --jobs must be positive", file=sys.stderr)
        return EXIT_USAGE
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (UsageError, ConfigError) as exc:
        print(f"fads: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"fads: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"fads: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
