"""``hdk`` command line: analyze, infer, replay, eval, gradcheck, split-folds.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 missing artifact,
4 partial failure.  Reports go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .blockgraph import BlockSpec, build_block, wrap_csp
from .cost import analyze, analyze_block, compare_blocks
from .dataio import (WeightFileError, atomic_write, invert, load_weights,
                     pad_resize, read_image, read_mask, split_folds, write_mask)
from .loss import grad_check, parse_flags
from .model import MissingWeightError, forward, init_weights
from .netspec import NetSpecError, load_config
from .postproc import TTAMode, dice, predict_mask, tta_ensemble

log = logging.getLogger("hdk")

OK, CHECK_FAILED, CONFIG_ERROR, MISSING_ARTIFACT, PARTIAL = 0, 1, 2, 3, 4
IMAGE_EXTS = (".ppm", ".pgm", ".pnm")
GRADCHECK_TOL = 1e-6


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- analyze -----------------------------------------------------------------

def _load_spec_file(path):
    """A file holding either a netspec or a bare block spec."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        return "net", _load_net(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                       CONFIG_ERROR) from None
    if isinstance(data, dict) and "n" in data and "stages" not in data:
        unknown = set(data) - {"version", "n", "g", "m", "csp_wrap"}
        if unknown:
            raise CLIError(f"{path}: unknown block field(s) {', '.join(sorted(unknown))}", CONFIG_ERROR)
        try:
            return "block", BlockSpec(**data)
        except (TypeError, ValueError) as exc:
            raise CLIError(f"{path}: {exc}", CONFIG_ERROR) from None
    return "net", _load_net(path)


def _load_net(path):
    try:
        return load_config(path)[0]
    except NetSpecError as exc:
        raise CLIError(f"{path}: {exc}", CONFIG_ERROR) from None
    except OSError as exc:
        raise CLIError(f"{path}: {exc}", CONFIG_ERROR) from None


def _table(report):
    lines = [f"{'layer':<28} {'kind':<6} {'macs':>14} {'cio':>12} {'params':>10}"]
    for r in report.rows:
        lines.append(f"{r.name:<28} {r.kind:<6} {r.macs:>14} {r.cio:>12} {r.params:>10}")
    t = report.totals()
    lines.append(f"{'TOTAL':<28} {'':<6} {t['macs']:>14} {t['cio']:>12} {t['params']:>10}")
    lines.append(f"MoC = {t['moc']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args):
    kind, spec = _load_spec_file(args.spec)
    size = args.input_size
    if args.compare:
        other_kind, other = _load_spec_file(args.compare)
        if kind != "block" or other_kind != "block":
            raise CLIError("--compare needs two block spec files", CONFIG_ERROR)
        record = compare_blocks(spec, other, (1, args.in_channels, size, size))
        if args.format == "json":
            _emit(record)
        else:
            for key in sorted(record):
                sys.stdout.write(f"{key:<14} {record[key]}\n")
        return OK
    try:
        if kind == "block":
            graph = build_block(spec, args.in_channels)
            if spec.csp_wrap:
                graph = wrap_csp(graph, 0.5)
            report = analyze_block(graph, (1, args.in_channels, size, size))
        else:
            report = analyze(spec, (1, spec.input_channels, size, size))
    except ValueError as exc:
        raise CLIError(str(exc), CONFIG_ERROR) from None
    if args.format == "json":
        _emit(report.to_dict())
    else:
        sys.stdout.write(_table(report))
    return OK


# -- infer -----------------------------------------------------------------

def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CLIError(f"invalid --seed {text!r}", CONFIG_ERROR) from None


def _load_stores(net, args):
    stores, records = [], []
    if args.weights:
        for path in [p for p in args.weights.split(",") if p]:
            if not os.path.isfile(path):
                raise CLIError(f"weight file not found: {path}", MISSING_ARTIFACT)
            try:
                stores.append(load_weights(path, net))
            except MissingWeightError as exc:
                raise CLIError(f"{path}: {exc}", MISSING_ARTIFACT) from None
            except (WeightFileError, ValueError) as exc:
                raise CLIError(f"{path}: {exc}", MISSING_ARTIFACT) from None
            records.append({"path": os.path.abspath(path), "sha256": _sha256(path)})
    elif args.seed is not None:
        for seed in _parse_seeds(args.seed):
            stores.append(init_weights(net, seed))
            records.append({"seed": seed})
    else:
        raise CLIError("no weights: pass --weights or --seed", MISSING_ARTIFACT)
    return stores, records


def _list_images(directory):
    if not os.path.isdir(directory):
        raise CLIError(f"input directory not found: {directory}", MISSING_ARTIFACT)
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))


def run_infer(net, spec_record, stores, weight_records, input_dir, output_dir,
              tta="none", method="tanh", fill=True, size=512):
    """Run the inference pipeline over a directory; returns (manifest, failures)."""
    mode = TTAMode.parse(tta)
    os.makedirs(output_dir, exist_ok=True)
    models = [lambda x, w=w: forward(net, w, x).main for w in stores]
    inputs, outputs, failed = [], [], []
    for name in _list_images(input_dir):
        path = os.path.join(input_dir, name)
        try:
            image = read_image(path)
        except (OSError, ValueError) as exc:
            log.error("skipping %s: %s", name, exc)
            failed.append(name)
            continue
        if image.shape[1] == 1 and net.input_channels == 3:
            image = np.repeat(image, 3, axis=1)
        x, geom = pad_resize(image, size)
        prob = tta_ensemble(models, x, mode, method)[0, 0]
        mask = predict_mask(prob, fill=fill)
        out = invert(mask, geom)
        out_name = os.path.splitext(name)[0] + ".pgm"
        out_path = os.path.join(output_dir, out_name)
        write_mask(out_path, out)
        inputs.append({"file": name, "sha256": _sha256(path)})
        outputs.append({"file": out_name, "sha256": _sha256(out_path)})
        log.info("%s -> %s (%dx%d)", name, out_name, geom.orig_h, geom.orig_w)

    manifest = {
        "tool": "hdk", "version": __version__, "command": "infer",
        "netspec": spec_record, "weights": weight_records,
        "seed": [r["seed"] for r in weight_records if "seed" in r] or None,
        "tta": mode.value, "compress": method, "fill": fill, "size": size,
        "folds": len(stores), "inputs": inputs, "outputs": outputs, "failed": failed,
    }
    atomic_write(os.path.join(output_dir, "manifest.json"),
                 (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return manifest, failed


def _spec_record(path):
    record = {"path": path}
    if os.path.isfile(path):
        record["sha256"] = _sha256(path)
    else:
        _, text = load_config(path)
        record["sha256"] = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return record


def cmd_infer(args):
    net = _load_net(args.spec)
    if args.size % 32:
        raise CLIError(f"--size {args.size} must be divisible by 32", CONFIG_ERROR)
    stores, records = _load_stores(net, args)
    manifest, failed = run_infer(net, _spec_record(args.spec), stores, records, args.input,
                                 args.output, args.tta, args.compress, not args.no_fill, args.size)
    _emit({"written": len(manifest["outputs"]), "failed": failed,
           "manifest": os.path.join(args.output, "manifest.json")})
    return PARTIAL if failed else OK


def cmd_replay(args):
    """Re-run an inference manifest and compare output hashes."""
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CLIError(f"{args.manifest}: {exc}", CONFIG_ERROR) from None
    spec_path = manifest["netspec"]["path"]
    net = _load_net(spec_path)
    if _spec_record(spec_path)["sha256"] != manifest["netspec"]["sha256"]:
        raise CLIError(f"netspec {spec_path} changed since the manifest was written", CHECK_FAILED)
    ns = argparse.Namespace(weights=None, seed=None)
    if manifest["weights"] and "path" in manifest["weights"][0]:
        ns.weights = ",".join(r["path"] for r in manifest["weights"])
    else:
        ns.seed = ",".join(str(r["seed"]) for r in manifest["weights"])
    stores, records = _load_stores(net, ns)
    again, failed = run_infer(net, manifest["netspec"], stores, records, args.input, args.output,
                              manifest["tta"], manifest["compress"], manifest["fill"], manifest["size"])
    same = again["outputs"] == manifest["outputs"] and again["inputs"] == manifest["inputs"]
    _emit({"reproduced": same, "outputs": len(again["outputs"])})
    if failed:
        return PARTIAL
    return OK if same else CHECK_FAILED


# -- eval ------------------------------------------------------------------

def _mask_files(directory):
    if not os.path.isdir(directory):
        raise CLIError(f"directory not found: {directory}", MISSING_ARTIFACT)
    return {os.path.splitext(f)[0]: f for f in sorted(os.listdir(directory))
            if f.lower().endswith(IMAGE_EXTS)}


def cmd_eval(args):
    pred, gt = _mask_files(args.pred), _mask_files(args.gt)
    common = sorted(set(pred) & set(gt))
    missing = sorted(set(pred) ^ set(gt))
    if not common:
        raise CLIError("no matching file names between --pred and --gt", CONFIG_ERROR)
    per_image, failed = {}, []
    for key in common:
        try:
            per_image[key] = dice(read_mask(os.path.join(args.pred, pred[key])),
                                  read_mask(os.path.join(args.gt, gt[key])))
        except (OSError, ValueError) as exc:
            log.error("skipping %s: %s", key, exc)
            failed.append(key)
    for key in missing:
        log.warning("no counterpart for %s; excluded", key)
    scores = [per_image[k] for k in sorted(per_image)]
    mean = float(np.mean(scores)) if scores else 0.0
    if args.format == "json":
        _emit({"mean_dice": mean, "per_image": per_image, "missing": missing, "failed": failed})
    else:
        for key in sorted(per_image):
            sys.stdout.write(f"{key:<32} {per_image[key]:.6f}\n")
        sys.stdout.write(f"{'MEAN':<32} {mean:.6f}\n")
    return PARTIAL if (missing or failed) else OK


# -- gradcheck / folds -----------------------------------------------------

def cmd_gradcheck(args):
    if not 1 <= args.size <= 32:
        raise CLIError(f"--size must lie in 1..32, got {args.size}", CONFIG_ERROR)
    try:
        flags = parse_flags(args.flags)
    except ValueError as exc:
        raise CLIError(str(exc), CONFIG_ERROR) from None
    report = grad_check(args.seed, (args.size, args.size), flags)
    report["tolerance"] = GRADCHECK_TOL
    report["passed"] = report["max_rel_err"] < GRADCHECK_TOL
    _emit(report)
    return OK if report["passed"] else CHECK_FAILED


def cmd_split_folds(args):
    try:
        with open(args.list, encoding="utf-8") as fh:
            ids = [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        raise CLIError(f"{args.list}: {exc}", MISSING_ARTIFACT) from None
    try:
        folds = split_folds(ids, args.k, args.seed)
    except ValueError as exc:
        raise CLIError(str(exc), CONFIG_ERROR) from None
    text = folds.to_json() + "\n"
    if args.out:
        atomic_write(args.out, text.encode("utf-8"))
        _emit({"k": folds.k, "seed": folds.seed, "sizes": folds.sizes(), "out": args.out})
    else:
        sys.stdout.write(text)
    return OK


def build_parser():
    p = argparse.ArgumentParser(prog="hdk", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hdk {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="MACs / CIO / MoC cost report")
    a.add_argument("--spec", required=True, help="netspec or block spec JSON (or shipped config name)")
    a.add_argument("--input-size", type=int, default=512)
    a.add_argument("--in-channels", type=int, default=64, help="block input width for block specs")
    a.add_argument("--compare", help="second block spec for a side-by-side record")
    a.add_argument("--format", choices=("json", "table"), default="table")
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("infer", help="segment a directory of NetPBM images")
    i.add_argument("--spec", default="hardnetv2-53")
    i.add_argument("--weights", help="comma-separated weight files (one per fold)")
    i.add_argument("--seed", help="comma-separated seeds for random weights (one per fold)")
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--tta", default="none", choices=("none", "h", "v", "hv"))
    i.add_argument("--compress", default="tanh", choices=("tanh", "sigmoid"))
    i.add_argument("--no-fill", action="store_true")
    i.add_argument("--size", type=int, default=512)
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("replay", help="re-run an inference manifest and verify outputs")
    r.add_argument("manifest")
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.set_defaults(func=cmd_replay)

    e = sub.add_parser("eval", help="per-image and mean Dice")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--format", choices=("json", "table"), default="table")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--flags", default="d1,d2,b")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("split-folds", help="seeded k-fold assignment")
    s.add_argument("--list", required=True, help="file with one id per line")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split_folds)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        log.error("%s", exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
