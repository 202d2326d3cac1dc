"""``protgnn`` command line: build, selftrain, infer, eval, synth, gradcheck."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, gnn, synth
from .evaluate import (
    decoy_qvalues,
    emit_report,
    entrapment_curve,
    pauc,
    read_scores,
    read_truth,
    write_scores,
    write_truth,
)
from .graph import GraphBuildConfig, build_graph, dump_graph, sharing_histogram
from .psm import (
    DEFAULT_DECOY_PREFIX,
    PinParseError,
    load_pin,
    peptide_protein_map,
    pooled_feature_stats,
    standardize_features,
)
from .trainer import (
    LabelSet,
    ModelEnsemble,
    RoundResult,
    TrainRunConfig,
    align_scores,
    baseline_scores,
    ensemble_score,
    read_base_scores,
    self_train,
)

log = logging.getLogger("protgnn")

RUN_DIR_ENV = "PROTGNN_RUN_DIR"

# Built-in defaults; a config file overrides these and flags override both.
DEFAULTS = {
    "layers": 6,
    "hidden": 100,
    "lr": 1e-3,
    "epochs": 1000,
    "rounds": 10,
    "patience": 50,
    "val_fraction": 0.1,
    "fdr_threshold": 0.05,
    "epsilon": 0.9,
    "decoy_prefix": DEFAULT_DECOY_PREFIX,
    "seed": 0,
    "fdr_lo": 0.01,
    "fdr_hi": 0.05,
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items()}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = _TYPES[key](value)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def resolve(args, keys) -> dict:
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else file_cfg.get(key, DEFAULTS[key])
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _graph_config(cfg) -> GraphBuildConfig:
    try:
        return GraphBuildConfig(epsilon=cfg["epsilon"], decoy_prefix=cfg["decoy_prefix"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load(path, prefix):
    try:
        return load_pin(path, prefix)
    except PinParseError as exc:
        raise ValueError(f"{path}:{exc}") from None


def _dataset_names(paths) -> list[str]:
    names, seen = [], {}
    for p in paths:
        stem = Path(p).name.split(".")[0] or "dataset"
        seen[stem] = seen.get(stem, 0) + 1
        names.append(stem if seen[stem] == 1 else f"{stem}_{seen[stem]}")
    return names


# -- build ---------------------------------------------------------------------

def cmd_build(args) -> int:
    cfg = resolve(args, ["epsilon", "decoy_prefix"])
    gcfg = _graph_config(cfg)
    out = sys.stdout
    out.write("dataset\tproteins\tprotein_groups\tpeptides\tpsms\tpro_pep_edges\tpep_psm_edges"
              "\tpeptides_1\tpeptides_2\tpeptides_ge3\n")
    for name, path in zip(_dataset_names(args.pin), args.pin):
        table = _load(path, gcfg.decoy_prefix)
        std, _ = standardize_features(table)
        graph = build_graph(std, gcfg)
        graph.validate()
        bmap = peptide_protein_map(table)
        hist = sharing_histogram(bmap)
        out.write(
            f"{name}\t{len(bmap.pro_to_pep)}\t{graph.n_pro}\t{graph.n_pep}\t{graph.n_psm}"
            f"\t{len(graph.pro_pep)}\t{len(graph.pep_psm)}\t{hist['1']}\t{hist['2']}\t{hist['>=3']}\n"
        )
        if args.dump_dir:
            Path(args.dump_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(args.dump_dir) / f"{name}.graph.txt", "w") as fh:
                dump_graph(graph, fh)
    return 0


# -- selftrain -----------------------------------------------------------------

TRAIN_KEYS = ["layers", "hidden", "lr", "epochs", "rounds", "patience", "val_fraction",
              "fdr_threshold", "epsilon", "decoy_prefix", "seed"]


def _validated_configs(cfg):
    try:
        net = gnn.NetConfig(layers=cfg["layers"], hidden=cfg["hidden"], lr=cfg["lr"],
                            seed=cfg["seed"], max_epochs=cfg["epochs"])
        run = TrainRunConfig(fdr_threshold=cfg["fdr_threshold"], rounds=cfg["rounds"],
                             epochs=cfg["epochs"], val_fraction=cfg["val_fraction"],
                             patience=cfg["patience"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return net, run, _graph_config(cfg)


def run_selftrain(cfg: dict, inputs: list[dict], run_dir: Path) -> dict:
    """Execute a fully resolved self-training run; returns the manifest."""
    net, run, gcfg = _validated_configs(cfg)
    names = _dataset_names([i["pin"] for i in inputs])
    run_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {
        "manifest": "manifest.json",
        "train_log": "train_log.tsv",
        "ensemble": "ensemble.ckpt",
        "rounds": [f"round_{r:02d}" for r in range(1, run.rounds + 1)],
        "scores": {n: f"scores_{n}.tsv" for n in names},
    }
    manifest = {
        "tool": "protgnn",
        "version": __version__,
        "config": cfg,
        "seed": cfg["seed"],
        "inputs": inputs,
        "artifacts": artifacts,
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    tables = [_load(i["pin"], gcfg.decoy_prefix) for i in inputs]
    stats = pooled_feature_stats(tables)
    graphs = [build_graph(stats.apply(t), gcfg) for t in tables]
    base = []
    for name, graph, inp in zip(names, graphs, inputs):
        if inp.get("base_scores"):
            try:
                base.append(align_scores(graph, read_base_scores(inp["base_scores"])))
            except KeyError as exc:
                raise KeyError(f"{name}: {exc.args[0]}") from None
        else:
            base.append(baseline_scores(graph))

    train_log = open(run_dir / "train_log.tsv", "w")
    train_log.write("round\tepoch\ttrain_loss\tval_loss\n")

    def on_epoch(r, entry):
        train_log.write(f"{r}\t{entry.epoch}\t{entry.train_loss!r}\t{entry.val_loss!r}\n")

    def on_round(r, labels: list[LabelSet], result: RoundResult):
        rdir = run_dir / f"round_{r:02d}"
        rdir.mkdir(exist_ok=True)
        for name, ls in zip(names, labels):
            ls.write(rdir / f"labels_{name}.tsv")
        checkpoint.save(rdir / "model.ckpt", ModelEnsemble([result.params], net, stats), gcfg)
        for w in result.warnings:
            log.warning("round %d: %s", r, w)

    try:
        result = self_train(graphs, base, net, run, feature_stats=stats,
                            on_round=on_round, on_epoch=on_epoch)
    finally:
        train_log.close()
    checkpoint.save(run_dir / "ensemble.ckpt", result.ensemble, gcfg)
    for name, graph in zip(names, graphs):
        scores = decoy_qvalues(ensemble_score(result.ensemble, graph))
        write_scores(scores, run_dir / artifacts["scores"][name])
    return manifest


def cmd_selftrain(args) -> int:
    if args.manifest:
        with open(args.manifest) as fh:
            old = json.load(fh)
        cfg, inputs = old["config"], old["inputs"]
        for inp in inputs:
            for key in ("pin", "base_scores"):
                if inp.get(key) and sha256_file(inp[key]) != inp[f"{key}_sha256"]:
                    raise UsageError(f"{inp[key]} changed since the manifest was written")
    else:
        if not args.pin:
            raise UsageError("selftrain needs PIN files or --manifest")
        cfg = resolve(args, TRAIN_KEYS)
        if args.baseline == bool(args.base_scores):
            raise UsageError("give exactly one of --baseline or --base-scores")
        if args.base_scores and len(args.base_scores) != len(args.pin):
            raise UsageError("need one --base-scores file per PIN file")
        _validated_configs(cfg)
        bases = args.base_scores or [None] * len(args.pin)
        inputs = []
        for pin, bs in zip(args.pin, bases):
            inp = {"pin": str(Path(pin).resolve()), "pin_sha256": sha256_file(pin)}
            if bs:
                inp["base_scores"] = str(Path(bs).resolve())
                inp["base_scores_sha256"] = sha256_file(bs)
            inputs.append(inp)
    run_dir = Path(args.run_dir or os.environ.get(RUN_DIR_ENV) or "protgnn-run")
    run_selftrain(cfg, inputs, run_dir)
    print(run_dir)
    return 0


# -- infer / eval ----------------------------------------------------------------

def cmd_infer(args) -> int:
    ensemble, gcfg = checkpoint.load(args.checkpoint)
    table = _load(args.pin, gcfg.decoy_prefix)
    if ensemble.feature_stats is None:
        raise UsageError("checkpoint carries no feature statistics")
    if len(table.feature_names) != ensemble.members[0].feature_dim:
        raise ValueError(
            f"dataset has {len(table.feature_names)} features, checkpoint expects "
            f"{ensemble.members[0].feature_dim}"
        )
    graph = build_graph(ensemble.feature_stats.apply(table), gcfg)
    scores = decoy_qvalues(ensemble_score(ensemble, graph))
    if args.truth:
        scores = scores.with_truth(read_truth(args.truth))
    if args.out:
        write_scores(scores, args.out)
    else:
        write_scores(scores, "/dev/stdout")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve(args, ["fdr_lo", "fdr_hi"])
    scores = read_scores(args.scores)
    truth = read_truth(args.truth)
    prefix = resolve(args, ["decoy_prefix"])["decoy_prefix"]
    missing = sorted(
        m for members, dec in zip(scores.members, scores.is_decoy) if not dec
        for m in members if m not in truth and not m.startswith(prefix)
    )
    if missing:
        raise KeyError(f"protein(s) missing from truth file: {', '.join(missing)}")
    scores = scores.with_truth(truth)
    if scores.q_values is None:
        scores = decoy_qvalues(scores)
    try:
        curve = entrapment_curve(scores, cfg["fdr_lo"], cfg["fdr_hi"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    value = pauc(curve)
    name = args.name or Path(args.scores).name.split(".")[0]
    emit_report({name: scores}, {name: curve}, {name: value}, args.out_dir)
    print(f"{name}\tpauc\t{value:.6f}")
    return 0


# -- synth / gradcheck -------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        config = synth.SynthConfig(
            n_true=args.n_true, n_entrapment=args.n_entrapment,
            peptides_min=args.peptides_min, peptides_max=args.peptides_max,
            p_share=args.p_share, psms_min=args.psms_min, psms_max=args.psms_max,
            decoy_fraction=args.decoy_fraction, decoy_prefix=args.decoy_prefix or DEFAULT_DECOY_PREFIX,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text, truth, info = synth.generate_pin(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.name}.pin").write_text(text)
    write_truth(truth, out / f"{args.name}.truth.tsv")
    print(f"{out / args.name}.pin\tpsms={info['n_psms']}\tpeptides={info['n_peptides']}"
          f"\tproteins={info['n_proteins']}")
    return 0


def gradcheck_trials(trials: int, seed: int, tolerance: float, layers: int, hidden: int,
                     max_nodes: int = 12):
    """Seeded random graphs with at most ``max_nodes`` nodes per type."""
    reports = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        n_pro = int(rng.integers(2, max_nodes + 1))
        n_pep = int(rng.integers(2, max_nodes + 1))
        n_psm = int(rng.integers(n_pep, max_nodes + 1))
        table = synth.random_small_table(rng, n_pro, n_pep, n_psm)
        std, _ = standardize_features(table)
        graph = build_graph(std)
        net = gnn.NetConfig(layers=layers, hidden=hidden)
        params = gnn.init_params(net, graph.feature_dim, int(rng.integers(2**31)))
        # nonzero biases so no unit starts exactly on a relu kink
        params = params.map(
            lambda n, v: rng.uniform(-0.5, 0.5, v.shape) if n.endswith(".b") else v
        )
        labels = rng.integers(0, 2, graph.n_pro)
        reports.append(gnn.grad_check(graph, params, labels, tolerance))
    return reports


def cmd_gradcheck(args) -> int:
    reports = gradcheck_trials(args.trials, args.seed, args.tolerance, args.layers, args.hidden,
                               args.max_nodes)
    worst = max(r.max_rel_error for r in reports)
    failed = [i for i, r in enumerate(reports) if not r.passed]
    print(f"trials\t{len(reports)}\nmax_rel_error\t{worst:.3e}\ntolerance\t{args.tolerance:g}")
    for i in failed:
        r = reports[i]
        log.error("trial %d failed: %s (%.3e)", i, r.worst_tensor, r.max_rel_error)
    print("PASS" if not failed else "FAIL")
    return 0 if not failed else 1


# -- entry point ---------------------------------------------------------------

def _add_common(p, keys):
    flags = {
        "layers": dict(type=int, help="GNN layers (default 6)"),
        "hidden": dict(type=int, help="hidden width (default 100)"),
        "lr": dict(type=float, help="Adam learning rate (default 0.001)"),
        "epochs": dict(type=int, help="epochs per round (default 1000)"),
        "rounds": dict(type=int, help="self-training rounds (default 10)"),
        "patience": dict(type=int, help="early-stop patience in epochs (default 50)"),
        "val_fraction": dict(type=float, help="validation share per class (default 0.1)"),
        "fdr_threshold": dict(type=float, help="pseudo-label q-value cutoff (default 0.05)"),
        "epsilon": dict(type=float, help="peptide score threshold for sharing (default 0.9)"),
        "decoy_prefix": dict(type=str, help="decoy accession prefix (default DECOY_)"),
        "seed": dict(type=int, help="random seed (default 0)"),
        "fdr_lo": dict(type=float, help="lower FDR bound (default 0.01)"),
        "fdr_hi": dict(type=float, help="upper FDR bound (default 0.05)"),
    }
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, **flags[key])
    p.add_argument("--config", help="key=value configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protgnn", description=__doc__)
    parser.add_argument("--version", action="version", version=f"protgnn {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="parse PIN files and build graphs")
    p.add_argument("pin", nargs="+")
    p.add_argument("--dump-dir", help="write <dataset>.graph.txt dumps here")
    _add_common(p, ["epsilon", "decoy_prefix"])
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("selftrain", help="pseudo-label self-training")
    p.add_argument("pin", nargs="*")
    p.add_argument("--base-scores", nargs="+", help="one base-score TSV per PIN file")
    p.add_argument("--baseline", action="store_true", help="use the built-in heuristic scorer")
    p.add_argument("--run-dir", help=f"output directory (default ${RUN_DIR_ENV} or ./protgnn-run)")
    p.add_argument("--manifest", help="re-run the configuration recorded in a manifest")
    _add_common(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("infer", help="score a dataset with a trained ensemble")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("pin")
    p.add_argument("--out", help="scores TSV (default stdout)")
    p.add_argument("--truth", help="optional ground-truth TSV to annotate rows")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="entrapment ROC, pAUC and calibration tables")
    p.add_argument("--scores", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", help="dataset name in report files")
    _add_common(p, ["fdr_lo", "fdr_hi", "decoy_prefix"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic PIN file and its ground truth")
    defaults = synth.SynthConfig()
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="synth")
    for field_name in ("n_true", "n_entrapment", "peptides_min", "peptides_max", "psms_min",
                       "psms_max", "seed"):
        p.add_argument("--" + field_name.replace("_", "-"), type=int,
                       default=getattr(defaults, field_name))
    p.add_argument("--p-share", type=float, default=defaults.p_share)
    p.add_argument("--decoy-fraction", type=float, default=defaults.decoy_fraction)
    p.add_argument("--decoy-prefix", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=3)
    p.add_argument("--max-nodes", type=int, default=12)
    p.set_defaults(func=cmd_gradcheck)
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _):
        pass


def _configure_logging(verbose: bool) -> None:
    root = logging.getLogger("protgnn")
    if not any(isinstance(h, _StderrHandler) for h in root.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
        root.propagate = False
    root.setLevel(logging.INFO if verbose else logging.WARNING)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        log.error("%s", exc.args[0] if isinstance(exc, KeyError) and exc.args else exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
