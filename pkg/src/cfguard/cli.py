"""Command-line front end: ``cf <command> ...``.

Every command writes its artifacts to ``--out`` style paths and a run
manifest next to the main output (or at ``--manifest``). The manifest
records the argument vector, the derived seeds, digests of inputs and
outputs and per-stage wall times; ``cf replay`` re-runs it and checks that
the outputs come out byte-identical.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__, dataset, scenario
from .attack import AttackConfig, Detector, adversarial_rows, run_campaign
from .constraints import REPAIR_MODES, ConstraintSet, Perturbation, assemble, csr
from .correlation import build_phi_graph
from .detector import LinearModel, evaluate, train
from .errors import ArtifactError, DataError
from .opf import build_forest, select_prototypes
from .retrain import RetrainConfig, generate_adv_set, retrain
from .transform import THRESHOLD, RobustMap, apply_dataset, build_map

log = logging.getLogger("cfguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


def stage_seed(seed: int, stage: str) -> int:
    """Independent, reproducible sub-seed for one pipeline stage."""
    h = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "big")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def _write_json(path, doc) -> None:
    Path(path).write_text(_canonical(doc), encoding="utf-8")


class Run:
    """Collects inputs, outputs, seeds and timings for the manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.seeds: dict[str, int] = {}
        self.times: dict[str, float] = {}

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"{p}: no such file")
        self.inputs[str(p)] = sha256_file(p)
        return p

    def artifact(self, path) -> Path:
        # the loader reports missing files together with the schema version
        p = Path(path)
        if p.is_file():
            self.inputs[str(p)] = sha256_file(p)
        return p

    def output(self, path) -> Path | None:
        if path is None:
            return None
        self.outputs.append(str(path))
        return Path(path)

    def seed(self, stage: str) -> int:
        s = stage_seed(self.args.seed, stage)
        self.seeds[stage] = s
        return s

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except DataError as exc:
            raise DataError(f"[{name}] {exc}") from exc
        finally:
            self.times[name] = round(time.perf_counter() - t0, 6)

    def manifest(self, argv: list[str]) -> dict:
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        return {
            "version": MANIFEST_VERSION,
            "tool_version": __version__,
            "command": self.args.command,
            "argv": argv,
            "cwd": os.getcwd(),
            "flags": flags,
            "seed": self.args.seed,
            "stage_seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {p: sha256_file(p) for p in self.outputs if Path(p).is_file()},
            "wall_times": self.times,
        }


# ------------------------------------------------------------------ helpers


def _load_data(run: Run, path, args) -> dataset.SparseBinaryDataset:
    return dataset.load(run.input(path), format=args.format)


def _load_model(run: Run, path) -> LinearModel:
    return LinearModel.load(run.artifact(path))


def _load_constraints(run: Run, path) -> ConstraintSet:
    return ConstraintSet.load(run.artifact(path))


def _load_map(run: Run, path) -> RobustMap | None:
    return RobustMap.load(run.artifact(path)) if path else None


def _detector(run: Run, model_path, map_path) -> Detector:
    return Detector(_load_model(run, model_path), _load_map(run, map_path))


def _malware(ds: dataset.SparseBinaryDataset):
    idx = np.flatnonzero(ds.labels == 1)
    if not len(idx):
        raise DataError("dataset contains no malware")
    return ds.subset(idx), idx


def _attack_cfg(args, cs: ConstraintSet | None) -> AttackConfig:
    if args.mode == "constrained" and cs is None:
        raise UsageError("--mode constrained needs --constraints")
    return AttackConfig(args.max_added, args.mode, cs, args.repair, args.jitter_q)


def _summary(**items) -> None:
    for k, v in items.items():
        if isinstance(v, float):
            v = f"{v:.4f}"
        print(f"{k}: {v}")


def _parse_k(text: str) -> int | float:
    try:
        return float(text) if any(c in text for c in ".eE") else int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a count or ratio: {text!r}") from None


# ------------------------------------------------------------------ commands


def cmd_synth(args, run: Run) -> None:
    with run.stage("synth"):
        ds = scenario.make(args.preset, run.seed("synth"), args.n_samples)
    if args.test_fraction > 0:
        tr, te = scenario.split(ds, 1.0 - args.test_fraction, run.seed("split"))
        dataset.save(tr, run.output(args.out))
        dataset.save(te, run.output(args.test_out or f"{args.out}.test"))
    else:
        dataset.save(ds, run.output(args.out))
    _summary(preset=args.preset, samples=ds.n_samples, features=ds.n_features,
             malware=int(ds.labels.sum()))


def cmd_learn(args, run: Run) -> None:
    ds = _load_data(run, args.data, args)
    if ds.n_samples == 0:
        raise DataError(f"{args.data}: dataset is empty")
    selected = None
    if args.top_k is not None:
        if not args.selected_out:
            raise UsageError("--top-k needs --selected-out: the constraints index the reduced corpus")
        ds, remap = dataset.select_top_k(ds, args.top_k, malware_only=args.top_k_malware)
        selected = sorted(remap, key=remap.get)
        dataset.save(ds, run.output(args.selected_out))
    with run.stage("correlation"):
        g = build_phi_graph(ds, threads=args.threads)
    with run.stage("opf"):
        protos = select_prototypes(g, args.dense_threshold, run.seed("prototypes"))
        forest = build_forest(g, protos, args.min_cost)
    with run.stage("constraints"):
        cs = assemble(g, forest)
    cs.save(run.output(args.out))
    sizes = Counter(len(c) for c in cs.clusters)
    stats = {
        "n_features": cs.n_features,
        "n_samples": ds.n_samples,
        "edges": g.n_edges,
        "perfect_pairs": len(cs.bidirectional),
        "clusters": len(cs.clusters),
        "clustered_features": int(sum(len(c) for c in cs.clusters)),
        "constant_features": len(cs.constant_features),
        "cluster_size_histogram": {str(k): v for k, v in sorted(sizes.items())},
    }
    if selected is not None:
        stats["selected_features"] = selected
    if args.report:
        _write_json(run.output(args.report), stats)
    _summary(**{k: v for k, v in stats.items() if k not in ("cluster_size_histogram", "selected_features")})
    print("cluster sizes:", " ".join(f"{k}x{v}" for k, v in sorted(sizes.items())) or "-")
    print("time:", " ".join(f"{k}={v:.3f}s" for k, v in run.times.items()))


def cmd_transform(args, run: Run) -> None:
    ds = _load_data(run, args.data, args)
    if args.map:
        rmap = _load_map(run, args.map)
    elif args.constraints:
        rmap = build_map(_load_constraints(run, args.constraints), args.threshold, args.drop_singletons)
    else:
        raise UsageError("transform needs --constraints or --map")
    with run.stage("transform"):
        out = apply_dataset(rmap, ds)
    dataset.save(out, run.output(args.out))
    if args.map_out:
        rmap.save(run.output(args.map_out))
    _summary(samples=out.n_samples, features_in=rmap.n_in, features_out=rmap.out_dim,
             clusters=len(rmap.clusters), dropped=len(rmap.dropped))


def cmd_train(args, run: Run) -> None:
    ds = _load_data(run, args.data, args)
    with run.stage("train"):
        m = train(ds, epochs=args.epochs, lam=args.lam, seed=run.seed("train"))
    m.save(run.output(args.out))
    rep = evaluate(m, ds)
    _summary(samples=ds.n_samples, features=ds.n_features, train_tpr=rep.tpr, train_fpr=rep.fpr)


def cmd_evaluate(args, run: Run) -> None:
    ds = _load_data(run, args.data, args)
    m = _load_model(run, args.model)
    rmap = _load_map(run, args.map)
    if rmap is not None:
        ds = apply_dataset(rmap, ds)
    with run.stage("evaluate"):
        rep = evaluate(m, ds)
    doc = rep.to_dict()
    if args.out:
        _write_json(run.output(args.out), doc)
    _summary(tpr=rep.tpr, fpr=rep.fpr, tp=rep.tp, fp=rep.fp, tn=rep.tn, fn=rep.fn)


def cmd_attack(args, run: Run) -> None:
    ds = _load_data(run, args.data, args)
    mal, rows = _malware(ds)
    cs = _load_constraints(run, args.constraints) if args.constraints else None
    cfg = _attack_cfg(args, cs)
    att = _detector(run, args.model, args.map)
    tgt = _detector(run, args.target_model, args.target_map) if args.target_model else None
    with run.stage("campaign"):
        rep = run_campaign(att, tgt, mal, cfg, threads=args.threads)
    adv = adversarial_rows(rep, mal)
    for rec in rep.records:
        rec["sample"] = int(rows[rec["sample"]])
    Path(run.output(args.out)).write_text(rep.dumps(), encoding="utf-8")
    if args.adv_out:
        dataset.save(dataset.SparseBinaryDataset.from_rows(adv, [1] * len(adv), ds.n_features),
                     run.output(args.adv_out))
    _summary(mode=cfg.mode, eligible=rep.n_eligible, er=rep.er, transfer_er=rep.transfer_er,
             avg_added=rep.avg_added if rep.avg_added is not None else "-",
             csr_mean=rep.csr_mean if rep.csr_mean is not None else "-")


def cmd_csr(args, run: Run) -> None:
    ds = _load_data(run, args.data, args)
    cs = _load_constraints(run, args.constraints)
    path = run.input(args.campaign)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        records = doc["records"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArtifactError(path, f"not a campaign report: {exc}") from None
    per_sample = []
    for rec in records:
        i = int(rec["sample"])
        if not 0 <= i < ds.n_samples:
            raise DataError(f"{path}: sample {i} outside {args.data}")
        p = Perturbation(ds.row(i).tolist(), rec["primary"], rec["side_effect"])
        per_sample.append({"sample": i, "n_added": len(p.added), "csr": csr(cs, p)})
    rates = [r["csr"] for r in per_sample if r["csr"] is not None]
    out = {"csr_mean": float(np.mean(rates)) if rates else None, "n_perturbations": len(rates),
           "per_sample": per_sample}
    if args.out:
        _write_json(run.output(args.out), out)
    _summary(perturbations=len(rates), csr_mean=out["csr_mean"] if rates else "-")


def cmd_retrain(args, run: Run) -> None:
    ds = _load_data(run, args.data, args)
    test = _load_data(run, args.test, args) if args.test else ds
    model = _load_model(run, args.model)
    cs = _load_constraints(run, args.constraints) if args.constraints else None
    attack_cfg = _attack_cfg(args, cs)
    cfg = RetrainConfig(args.k, args.variants, attack_cfg, run.seed("adversarial"))
    with run.stage("adversarial"):
        adv = generate_adv_set(model, ds, cfg, threads=args.threads)
    with run.stage("retrain"):
        new = retrain(ds, adv, epochs=args.epochs, lam=args.lam, seed=run.seed("train"))
    new.save(run.output(args.out))
    if args.adv_out:
        dataset.save(adv.dataset(ds.n_features), run.output(args.adv_out))
    before, after = evaluate(model, test), evaluate(new, test)
    mal, _ = _malware(test)
    with run.stage("campaign"):
        c_before = run_campaign(model, None, mal, attack_cfg, threads=args.threads)
        c_after = run_campaign(model, new, mal, attack_cfg, threads=args.threads)
    report = {
        "adversarial": {"attacked": adv.n_attacked, "kept": len(adv.rows), "failed": adv.n_failed},
        "before": before.to_dict(),
        "after": after.to_dict(),
        # examples crafted on the original model, replayed against each model
        "campaign": {
            "mode": attack_cfg.mode,
            "max_added": attack_cfg.max_added,
            "er_before": c_before.er,
            "er_after": c_after.transfer_er,
            "eligible_before": c_before.n_eligible,
            "eligible_after": c_after.n_eligible,
        },
    }
    if args.report:
        _write_json(run.output(args.report), report)
    _summary(adversarial_rows=len(adv.rows), tpr_before=before.tpr, tpr_after=after.tpr,
             er_before=c_before.er, er_after=c_after.transfer_er)


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global seed; stages derive their own")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--format", choices=dataset.FORMATS, default="sparse-text")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--config", help="JSON object of flag defaults; explicit flags win")


def _add_attack(p: argparse.ArgumentParser, default_mode: str) -> None:
    p.add_argument("--mode", choices=("unconstrained", "constrained"), default=default_mode)
    p.add_argument("--max-added", type=int, default=200)
    p.add_argument("--constraints")
    p.add_argument("--repair", choices=REPAIR_MODES, default="phi")
    p.add_argument("--jitter-q", type=int, default=5)


def _add_hp(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lam", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cf", description="Learn feature dependency constraints and harden linear detectors.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--preset", choices=scenario.PRESETS, default="detection")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--test-out")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("learn", help="learn a constraint set from a corpus")
    p.add_argument("data")
    p.add_argument("--dense-threshold", type=float, default=0.9)
    p.add_argument("--min-cost", type=float, default=0.0)
    p.add_argument("--top-k", type=int, help="keep only the k most frequent features first")
    p.add_argument("--top-k-malware", action="store_true", help="count frequencies over malware only")
    p.add_argument("--selected-out", help="reduced corpus written when --top-k is used")
    p.add_argument("--report", help="write the stats report as JSON")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("transform", help="map a corpus into the robust feature space")
    p.add_argument("data")
    p.add_argument("--constraints")
    p.add_argument("--map", help="reuse an existing map instead of building one")
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.add_argument("--drop-singletons", action="store_true")
    p.add_argument("--map-out")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="train a linear detector")
    p.add_argument("data")
    _add_hp(p)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="TPR/FPR of a model on a corpus")
    p.add_argument("data")
    p.add_argument("--model", required=True)
    p.add_argument("--map", help="transform the corpus through this map first")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack", help="run a feature-addition evasion campaign")
    p.add_argument("data")
    p.add_argument("--model", required=True)
    p.add_argument("--map", help="the attacked model works on this robust map's outputs")
    p.add_argument("--target-model")
    p.add_argument("--target-map")
    p.add_argument("--adv-out", help="write the successful adversarial rows")
    _add_attack(p, "unconstrained")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("csr", help="constraint satisfaction rate of a campaign")
    p.add_argument("data", help="the corpus the campaign attacked")
    p.add_argument("--campaign", required=True)
    p.add_argument("--constraints", required=True)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_csr)

    p = sub.add_parser("retrain", help="adversarial retraining")
    p.add_argument("data")
    p.add_argument("--model", required=True)
    p.add_argument("--test", help="held-out corpus for the before/after comparison")
    p.add_argument("--k", type=_parse_k, default=0.2, help="malware count (int) or fraction (float)")
    p.add_argument("--variants", type=int, default=1)
    _add_attack(p, "constrained")
    _add_hp(p)
    p.add_argument("--adv-out")
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("replay", help="re-run a manifest and check its outputs")
    p.add_argument("manifest_file")
    p.set_defaults(func=None)
    ap.commands = sub.choices
    return ap


def _apply_config(run: Run, p: argparse.ArgumentParser, path) -> None:
    """Install the flags in a JSON config file as defaults of ``p``."""
    src = run.input(path)
    try:
        doc = json.loads(src.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{src}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{src}: config must be a JSON object")
    flags = {a.dest: a for a in p._actions if a.option_strings and a.dest not in ("help", "config")}
    defaults = {}
    for key, value in doc.items():
        dest = key.lstrip("-").replace("-", "_")
        action = flags.get(dest)
        if action is None:
            raise UsageError(f"{src}: unknown option {key!r} for {p.prog}")
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{src}: {key} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    p.set_defaults(**defaults)


# ------------------------------------------------------------------ entry


def _setup_logging() -> None:
    level = os.environ.get("CF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _execute(argv: list[str]) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "replay":
        return _replay(args.manifest_file)
    if getattr(args, "threads", 1) < 1:
        ap.error("--threads must be >= 1")
    run = Run(args)
    if args.config:
        _apply_config(run, ap.commands[args.command], args.config)
        args = ap.parse_args(argv)
        run.args = args
    args.func(args, run)
    target = args.manifest
    if target is None and getattr(args, "out", None):
        target = f"{args.out}.manifest.json"
    if target:
        _write_json(target, run.manifest(argv))
    return EXIT_OK


def _replay(path) -> int:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(p, f"cannot read manifest: {exc}", MANIFEST_VERSION) from None
    if doc.get("version") != MANIFEST_VERSION:
        raise ArtifactError(p, f"unsupported manifest version {doc.get('version')!r}", MANIFEST_VERSION)
    recorded = doc["outputs"]
    os.chdir(doc["cwd"])
    for f, digest in doc["inputs"].items():
        if not Path(f).is_file() or sha256_file(f) != digest:
            raise DataError(f"input {f} is missing or changed since the recorded run")
    argv = list(doc["argv"])
    # keep the original manifest intact
    argv += ["--manifest", f"{path}.replay.json"]
    code = _execute(argv)
    bad = [f for f, digest in recorded.items() if sha256_file(f) != digest]
    if bad:
        for f in bad:
            print(f"MISMATCH {f}")
        return EXIT_INTERNAL
    print(f"replayed {doc['command']}: {len(recorded)} outputs identical")
    return code


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _execute(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"cf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # configuration checks (budgets, fractions, modes) raise plain ValueError
        print(f"cf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"cf: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
