"""Command-line entry point: synth, train, eval, gradcheck, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, load_run_config
from .dataio import DataError, load_features, load_manifest, split_records
from .estimator import PartAwareReID
from .evaluation import (
    DescriptorSet,
    evaluate,
    random_baseline_map,
    summarize,
    vehicleid_protocol,
    write_ranking_csv,
    write_summary,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .synth import SyntheticSpec, synth_generate
from .training import CHECKPOINT_NAME

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("partreid")


class NumericFailure(RuntimeError):
    pass


# flags shared by train/eval that map onto RunConfig keys
_RUN_FLAGS = [
    ("--seed", int), ("--epochs", int), ("--batch", int), ("--lambda", float), ("--alpha", float),
    ("--beta", float), ("--delta", float), ("--p1", int), ("--p2", int), ("--momentum", float),
    ("--softmax-target", str), ("--memory-source", str), ("--source", str), ("--head-scale", float),
    ("--metric", str), ("--protocol", str), ("--trials", int), ("--manifest", str), ("--out", str),
]


def _add_run_flags(p):
    p.add_argument("--config", help="key=value config file")
    for flag, kind in _RUN_FLAGS:
        p.add_argument(flag, type=kind, default=None)
    p.add_argument("--branches", choices=("one", "two"), default=None)
    p.add_argument("--memory", choices=("on", "off"), default=None)
    p.add_argument("--loss", choices=("triplet", "tc"), default=None)


def _run_config(args):
    overrides = {flag.lstrip("-").replace("-", "_"): getattr(args, flag.lstrip("-").replace("-", "_"))
                 for flag, _ in _RUN_FLAGS}
    overrides.update(branches=args.branches, memory=args.memory, loss=args.loss)
    return load_run_config(args.config, overrides)


def _load_split(manifest, split):
    records = split_records(load_manifest(manifest), split)
    if not records:
        raise DataError(f"manifest {manifest} has no '{split}' records")
    return records, load_features(records)


def cmd_synth(args):
    spec = SyntheticSpec(
        num_identities=args.identities, samples_per_identity=args.per_identity, num_cameras=args.cameras,
        sigma_intra=args.sigma_intra, sigma_cam=args.sigma_cam, dim=args.dim,
        latent_dim=None if args.latent_dim == 0 else args.latent_dim, seed=args.seed,
    )
    path = synth_generate(spec, args.out)
    print(f"wrote {path}")


def cmd_train(args):
    cfg = _run_config(args)
    mc, tc = cfg.model_config(), cfg.train_config()
    if not cfg.manifest:
        raise ConfigError("train needs --manifest")
    records, x = _load_split(cfg.manifest, "train")
    y = np.array([r.identity for r in records])
    est = PartAwareReID(
        source=mc.source, input_dim=mc.input_dim, height=mc.height, width=mc.width, channels=mc.channels,
        tokens=mc.tokens, head_scale=mc.head_scale, p1=mc.p1, p2=mc.p2, epochs=tc.epochs,
        batch_size=tc.batch_size, lr_schedule=tc.lr_schedule, momentum=tc.momentum, lam=tc.loss.lam,
        alpha=tc.loss.alpha, beta=tc.loss.beta, softmax_target=tc.loss.softmax_target, delta=tc.delta,
        memory=tc.memory, loss=tc.loss_kind, memory_source=tc.memory_source, seed=tc.seed,
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    est.fit(x, y, out_dir=out, resume=args.resume)
    if any(not np.all(np.isfinite(v)) for v in est.params_.values()):
        raise NumericFailure("non-finite parameters after training")
    losses = [r["combined"] for r in est.log_]
    final = {
        "epochs": est.epoch_,
        "iterations": len(est.log_),
        "first10_combined": float(np.mean(losses[:10])) if losses else None,
        "last10_combined": float(np.mean(losses[-10:])) if losses else None,
        "label": run_label(mc.p2, tc.memory, tc.loss_kind),
    }
    (out / "train_metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    print(f"trained {est.epoch_} epochs -> {out / CHECKPOINT_NAME}")


def run_label(p2, memory, loss_kind):
    label = "TwoBranch" if p2 else "OneBranch"
    if memory:
        label += "+Mem"
    if loss_kind == "tc":
        label += "+TC"
    return label


def cmd_eval(args):
    cfg = _run_config(args)
    if not cfg.manifest:
        raise ConfigError("eval needs --manifest")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    est = PartAwareReID.from_checkpoint(ckpt)
    records = load_manifest(cfg.manifest)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    label = run_label(est.p2, est.memory, est.loss)

    if cfg.protocol == "veri":
        q_rec, q_x = _load_split(cfg.manifest, "query")
        g_rec, g_x = _load_split(cfg.manifest, "gallery")
        queries = DescriptorSet.from_records(q_rec, _embed(est, q_x))
        gallery = DescriptorSet.from_records(g_rec, _embed(est, g_x))
        results = evaluate(queries, gallery, cfg.metric)
        extra = {"label": label, "protocol": "veri", "metric": cfg.metric}
        if args.baseline_shuffles:
            extra["random_baseline_mAP"] = random_baseline_map(results, args.baseline_shuffles, cfg.seed)
        summary = summarize(results, extra=extra)
        write_ranking_csv(out / "ranking.csv", results)
    elif cfg.protocol == "vehicleid":
        test = [r for r in records if r.split in ("query", "gallery")]
        descs = DescriptorSet.from_records(test, _embed(est, load_features(test)))
        res = vehicleid_protocol(descs, cfg.trials, cfg.seed, cfg.metric)
        summary = {
            "mAP": res["mAP"], "cmc1": float(res["cmc"][0]), "cmc5": float(res["cmc"][4]),
            "cmc10": float(res["cmc"][9]), "trials": res["trials"], "label": label,
            "protocol": "vehicleid", "metric": cfg.metric,
        }
    else:
        raise ConfigError(f"unknown protocol {cfg.protocol!r}")
    for key in ("mAP", "cmc1"):
        if not np.isfinite(summary[key]):
            raise NumericFailure(f"{key} is not finite")
    write_summary(out / "metrics.json", summary)
    print(f"mAP={summary['mAP']:.4f} rank1={summary['cmc1']:.4f} -> {out / 'metrics.json'}")


def _embed(est, x):
    try:
        return est.transform(x)
    except ValueError as err:
        raise DataError(f"checkpoint does not match the data: {err}") from None


def cmd_gradcheck(args):
    worst = run_gradcheck(seed=args.seed, configs=args.configs)
    failed = False
    print(f"{'loss':<18} {'max_rel_err':>12}  status")
    for name, err in worst.items():
        ok = err < TOLERANCE
        failed |= not ok
        print(f"{name:<18} {err:12.3e}  {'pass' if ok else 'FAIL'}")
    if failed:
        raise NumericFailure(f"gradient check above {TOLERANCE:g}")


def cmd_report(args):
    rows = []
    for path in args.metrics:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"metrics file not found: {p}")
        try:
            m = json.loads(p.read_text())
            rows.append((m.get("label", p.parent.name), m["mAP"], m["cmc1"], m["cmc5"], p.parent.name))
        except (json.JSONDecodeError, KeyError) as err:
            raise DataError(f"{p}: not a metrics summary ({err})") from None
    print(f"{'run':<20} {'descriptor':<20} {'mAP':>7} {'Rank1':>7} {'Rank5':>7}")
    for label, m_ap, r1, r5, run in rows:
        print(f"{run:<20} {label:<20} {100 * m_ap:7.2f} {100 * r1:7.2f} {100 * r5:7.2f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="partreid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--per-identity", type=int, default=20)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--sigma-intra", type=float, default=SyntheticSpec.sigma_intra)
    p.add_argument("--sigma-cam", type=float, default=SyntheticSpec.sigma_cam)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--latent-dim", type=int, default=SyntheticSpec.latent_dim, help="0 for full rank")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and checkpoint every epoch")
    _add_run_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.pamf")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank query against gallery")
    p.add_argument("--checkpoint", required=True)
    _add_run_flags(p)
    p.add_argument("--baseline-shuffles", type=int, default=0,
                   help="also report a Monte-Carlo random-ranking mAP")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="tabulate metrics.json files")
    p.add_argument("metrics", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(code, kind, err):
    msg = str(err).replace("\n", " ")
    print(f"error code={code} kind={kind} msg={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config", err)
    except (DataError, FileNotFoundError) as err:
        return _fail(EXIT_DATA, "data", err)
    except (NumericFailure, ad.NonFiniteError, FloatingPointError) as err:
        return _fail(EXIT_NUMERIC, "numeric", err)
    except ValueError as err:
        return _fail(EXIT_CONFIG, "config", err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
