"""Command-line entry point: gen-data, search, train-eval, cv."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .data import ManifestError, VolumeFormatError, load_manifest, synth_generate, write_manifest, write_truth
from .genotype import GenotypeError, accuracy, parse_json, predict_scores
from .metrics import evaluate_cases, write_report_csv, write_roc_csv, write_scores_csv
from .pipeline import RunConfig, check_dims, run_cv, search_and_derive, train_and_score
from .supernet import MODALITY_MODES, ConfigError


class UsageError(Exception):
    """Validation failure; exits with status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(arg: str | None) -> Path:
    out = arg or os.environ.get("MMNAS_OUT")
    if not out:
        raise UsageError("no output directory: pass --out or set MMNAS_OUT")
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {p} is not writable: {exc}") from None
    return p


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--dims must look like 16,16,16, got {text!r}") from None
    if len(dims) != 3:
        raise UsageError(f"--dims needs three sizes, got {text!r}")
    return dims


def _config(path: str, modality: str | None = None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig.load(path)
    if seed is not None:
        cfg.supernet = cfg.supernet.__class__(**{**cfg.supernet.to_dict(), "seed": seed})
    if modality:
        cfg = cfg.with_mode(modality)
    return cfg


def cmd_gen_data(args) -> int:
    dims = _dims(args.dims)
    if args.n % 2:
        raise UsageError(f"--n must be even for exact class balance, got {args.n}")
    out = _out_dir(args.out)
    try:
        studies, spec = synth_generate(args.n, dims, args.noise, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = write_manifest(studies, out)
    write_truth(spec, out / "truth.csv")
    meta = {"n": args.n, "dims": list(dims), "noise_sigma": args.noise, "seed": args.seed,
            "pet_center": list(spec.pet_center), "ct_center": list(spec.ct_center),
            "blob_sigma": spec.blob_sigma}
    (out / "synth.json").write_text(json.dumps(meta, indent=1) + "\n")
    print(manifest)
    return 0


def cmd_search(args) -> int:
    cfg = _config(args.config, args.modality)
    studies = load_manifest(args.manifest)
    check_dims(studies, cfg.supernet)
    out = _out_dir(args.out)
    result, genotype = search_and_derive(studies, cfg, cfg.seed, out)
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.6f}")
    print(out / "genotype.json")
    return 0


def cmd_train_eval(args) -> int:
    cfg = _config(args.config, args.modality)
    gpath = Path(args.genotype)
    if not gpath.is_file():
        raise UsageError(f"genotype file not found: {gpath}")
    genotype = parse_json(gpath.read_text())
    if genotype.nodes != cfg.supernet.num_nodes:
        raise UsageError(f"genotype has {genotype.nodes} nodes, config expects {cfg.supernet.num_nodes}")
    studies = load_manifest(args.manifest)
    check_dims(studies, cfg.supernet)
    by_id = {s.id: s for s in studies}
    spath = Path(args.split)
    if not spath.is_file():
        raise UsageError(f"split file not found: {spath}")
    try:
        split = json.loads(spath.read_text())
        train_ids, test_ids = list(split["train"]), list(split["test"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"split file must be JSON with 'train' and 'test' id lists ({exc})") from None
    overlap = sorted(set(train_ids) & set(test_ids))
    if overlap:
        raise UsageError(f"train and test splits overlap: {overlap[:5]}")
    unknown = sorted(set(train_ids + test_ids) - set(by_id))
    if unknown:
        raise UsageError(f"split names ids missing from the manifest: {unknown[:5]}")
    train = [by_id[i] for i in train_ids]
    test = [by_id[i] for i in test_ids]
    out = _out_dir(args.out)
    net, cases = train_and_score(genotype, cfg, train, test, cfg.seed, out)
    train_cases = predict_scores(net, train)
    write_scores_csv(cases, out / "scores.csv")
    rows = []
    for name, cs in (("train", train_cases), ("test", cases)):
        if {c.label for c in cs} == {0, 1}:
            rows.append((name, evaluate_cases(cs)))
    write_report_csv(rows, out / "metrics.csv")
    if rows and rows[-1][0] == "test":
        write_roc_csv(rows[-1][1], out / "roc.csv")
    print(f"train acc {accuracy(train_cases):.4f}  test acc {accuracy(cases):.4f}")
    return 0


def cmd_cv(args) -> int:
    cfg = _config(args.config, seed=args.seed)
    modes = [m.strip() for m in (args.modes or cfg.supernet.modality_mode).split(",") if m.strip()]
    bad = [m for m in modes if m not in MODALITY_MODES]
    if bad:
        raise UsageError(f"unknown modality modes {bad}; choose from {MODALITY_MODES}")
    k = args.k if args.k is not None else cfg.k
    studies = load_manifest(args.manifest)
    if k > len(studies):
        raise UsageError(f"k = {k} exceeds the number of studies ({len(studies)})")
    if len({s.label for s in studies}) < 2:
        raise UsageError("cross-validation needs both classes in the manifest")
    check_dims(studies, cfg.supernet)
    out = _out_dir(args.out)
    result = run_cv(studies, cfg, k, cfg.seed, out, modes, jobs=args.jobs, shared_genotype=args.shared_genotype)
    for m in modes:
        r = result.reports[m]
        print(f"{m}: auc {r.auc:.4f} acc {r.acc:.4f} sen {r.sen:.4f} spe {r.spe:.4f} pre {r.pre:.4f} f1 {r.f1:.4f}")
    print(out / "summary.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmnas", description="Multi-modality 3D architecture search at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic XOR-fusion dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dims", default="16,16,16")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("search", help="architecture search, then derive a genotype")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--modality", choices=MODALITY_MODES)
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train-eval", help="retrain a genotype and score a held-out split")
    t.add_argument("--genotype", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--split", required=True, help='JSON file {"train": [ids], "test": [ids]}')
    t.add_argument("--modality", choices=MODALITY_MODES)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train_eval)

    c = sub.add_parser("cv", help="k-fold cross-validation of the whole method")
    c.add_argument("--config", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--k", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--modes", help="comma-separated subset of " + ",".join(MODALITY_MODES))
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--shared-genotype", action="store_true",
                   help="search once per mode on fold 0's training split and reuse the genotype")
    c.add_argument("--out")
    c.set_defaults(func=cmd_cv)
    return p


VALIDATION_ERRORS = (UsageError, ConfigError, ManifestError, VolumeFormatError, GenotypeError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
