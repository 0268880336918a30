"""Run configuration and the fit / score / localize / eval workflows behind the CLI."""
import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import jsonschema
import numpy as np

from . import core
from .data import ingest
from .evaluation import per_part_score, roc_auc, stratified_kfold
from .localization import (
    DEFAULT_PIXEL_THRESHOLD, DEFAULT_REGION_THRESHOLD, DEFAULT_WINDOW, average_saliency, region_label, saliency,
)
from .netio import load_graph, load_weights, make_reference_net, save_graph, save_weights

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["members"],
    "properties": {
        "members": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["input_size"],
                "properties": {
                    "graph": {"type": "string"},
                    "weights": {"type": "string"},
                    "reference_seed": {"type": "integer", "minimum": 0},
                    "input_size": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                   "minItems": 3, "maxItems": 3},
                },
                "oneOf": [{"required": ["graph", "weights"]}, {"required": ["reference_seed"]}],
            },
        },
        "agg": {"enum": list(core.AGGREGATIONS)},
        "scoring": {"enum": list(core.SCORINGS)},
        "sigma_floor": {"type": "number", "exclusiveMinimum": 0},
        "tap": {"enum": ["conv", "relu"]},
        "localization": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pixel_threshold": {"type": "number", "minimum": 0, "maximum": 1},
                "window": {"type": "integer", "minimum": 1},
                "region_threshold": {"type": "number", "minimum": 0, "maximum": 1},
                "overlay": {"type": "boolean"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "boundary": {"type": "number"},
        "folds": {"type": "integer", "minimum": 2},
    },
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MemberSpec:
    input_size: tuple
    graph: str = None
    weights: str = None
    reference_seed: int = None


@dataclass(frozen=True)
class RunConfig:
    members: tuple
    agg: str = "max"
    scoring: str = "max"
    sigma_floor: float = core.DEFAULT_SIGMA_FLOOR
    tap: str = "conv"
    pixel_threshold: float = DEFAULT_PIXEL_THRESHOLD
    window: int = DEFAULT_WINDOW
    region_threshold: float = DEFAULT_REGION_THRESHOLD
    overlay: bool = False
    seed: int = 0
    output_dir: str = "fads-out"
    boundary: float = 1.0
    folds: int = 7

    @classmethod
    def from_dict(cls, d, base_dir="."):
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {where}: {exc.message}") from None
        members = []
        for m in d["members"]:
            def resolve(p):
                return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))
            members.append(MemberSpec(tuple(m["input_size"]), resolve(m.get("graph")), resolve(m.get("weights")),
                                      m.get("reference_seed")))
        loc = d.get("localization", {})
        kwargs = {k: d[k] for k in ("agg", "scoring", "sigma_floor", "tap", "seed", "output_dir", "boundary", "folds")
                  if k in d}
        kwargs.update({k: loc[k] for k in ("pixel_threshold", "window", "region_threshold", "overlay") if k in loc})
        return cls(tuple(members), **kwargs)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(d, os.path.dirname(os.path.abspath(path)))


def member_networks(config, out_dir=None):
    """Load (or generate) each member's network.

    Returns ``[(graph, weights, graph_file, weights_file)]``. Reference
    networks are written to ``out_dir`` when given so model files can point
    at them.
    """
    nets, cache = [], {}
    for spec in config.members:
        if spec.reference_seed is not None:
            key = ("ref", spec.reference_seed)
            if key not in cache:
                graph, weights = make_reference_net(spec.reference_seed, in_channels=spec.input_size[0])
                gfile = wfile = None
                if out_dir is not None:
                    gfile = os.path.join(out_dir, f"refnet_{spec.reference_seed}.json")
                    wfile = os.path.join(out_dir, f"refnet_{spec.reference_seed}.bin")
                    save_graph(graph, gfile)
                    save_weights(weights, wfile)
                cache[key] = (graph, weights, gfile, wfile)
        else:
            key = ("file", spec.graph, spec.weights)
            if key not in cache:
                graph = load_graph(spec.graph)
                cache[key] = (graph, load_weights(spec.weights, graph), spec.graph, spec.weights)
        nets.append(cache[key])
    return nets


def fit_ensemble(config, images, out_dir=None, jobs=None):
    """Fit every member on ``images`` and attach normalizers; optionally write model files."""
    if len(images) < 2:
        raise core.DegenerateModelError(f"need at least 2 training images, got {len(images)}")
    nets = member_networks(config, out_dir)
    members = []
    for spec, (graph, weights, gfile, wfile) in zip(config.members, nets):
        model = core.fit(images, graph, weights, config.agg, config.sigma_floor, spec.input_size, config.tap, jobs)
        if out_dir is not None:
            model = core.FadsModel(**{**model.__dict__,
                                      "graph_file": os.path.relpath(gfile, out_dir),
                                      "weights_file": os.path.relpath(wfile, out_dir)})
        members.append((model, graph, weights))
    ensemble = core.ensemble_fit(members, images, config.scoring, jobs)
    if out_dir is not None:
        files = []
        for z, member in enumerate(ensemble.members):
            path = os.path.join(out_dir, f"member_{z:02d}.json")
            core.save_model(member.model, path, config.scoring)
            files.append(path)
        core.save_ensemble(ensemble, os.path.join(out_dir, "ensemble.json"), files)
    return ensemble


def _pmap(fn, items, jobs):
    if not jobs or jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def score_images(ensemble, images, jobs=None):
    return _pmap(lambda img: core.ensemble_score(ensemble, img), images, jobs)


def localize_image(ensemble, image, config):
    """Ensemble saliency at the image's own size plus its region mask."""
    maps = [saliency(m.model.prepare(image), m.model, m.graph, m.weights, ensemble.scoring)
            for m in ensemble.members]
    combined = average_saliency(maps, image.shape[-2:])
    mask = region_label(combined, config.pixel_threshold, config.window, config.region_threshold)
    return combined, mask


def fmt(x):
    return repr(float(x))


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def run_eval(config, manifest, k=None, seed=None, jobs=None):
    """Stratified k-fold over parts (manifest ids): fit on nominal train parts, score test parts.

    Returns ``(score_rows, fold_rows, summary)``.
    """
    if not manifest.labeled:
        missing = [e.id for e in manifest.entries if e.label is None]
        raise ValueError(f"eval needs labels for every entry; unlabeled: {missing[:5]}")
    k = config.folds if k is None else k
    seed = config.seed if seed is None else seed
    images = ingest(manifest)
    part_label, part_stratum = {}, {}
    for e in manifest.entries:
        part_label[e.id] = max(part_label.get(e.id, 0), e.label)
        part_stratum.setdefault(e.id, e.stratum)
    parts = list(part_label)
    plan = stratified_kfold(parts, [part_stratum[p] for p in parts], [part_label[p] for p in parts], k, seed)

    score_of, fold_of = {}, {}
    fold_rows, fold_aucs = [], []
    for f, (train_ids, test_ids) in enumerate(plan.folds):
        train_ids, test_ids = set(train_ids), set(test_ids)
        train = [img for e, img in zip(manifest.entries, images) if e.id in train_ids]
        test = [(n, e) for n, e in enumerate(manifest.entries) if e.id in test_ids]
        ensemble = fit_ensemble(config, train, jobs=jobs)
        scores = score_images(ensemble, [images[n] for n, _ in test], jobs)
        for (n, _), s in zip(test, scores):
            score_of[n], fold_of[n] = s, f
        labels = [e.label for _, e in test]
        auc = roc_auc(scores, labels)[0] if 0 < sum(labels) < len(labels) else float("nan")
        fold_aucs.append(auc)
        fold_rows.append([f, fmt(auc), len(train), len(test)])

    score_rows = [[e.id, e.view, fmt(score_of[n]), e.label, fold_of[n]] for n, e in enumerate(manifest.entries)]
    by_part = {}
    for n, e in enumerate(manifest.entries):
        by_part.setdefault(e.id, []).append(score_of[n])
    valid = [a for a in fold_aucs if not np.isnan(a)]
    summary = {
        "k": k,
        "seed": seed,
        "folds": [{"fold": f, "auc": None if np.isnan(a) else a} for f, a in enumerate(fold_aucs)],
        "mean_auc": float(np.mean(valid)) if valid else None,
        "parts": {p: {"mean": m, "std": s, "label": part_label[p]} for p, (m, s) in per_part_score(by_part).items()},
    }
    return score_rows, fold_rows, summary
