"""Command-line entry point.

Subcommands cover the full pipeline: synthetic data generation, negative
label mining, crop selection, training, scoring, metric evaluation, and a
gradient self-check. Exit codes: 0 success, 1 usage/config error, 2
data/format error, 3 numeric failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import data_io, mining, scoring
from .errors import ConfigError, DataError, NftError, NumericError
from .model import (
    FeatureBank,
    TrainingSet,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import (
    backward,
    fd_well_conditioned,
    finite_diff_grad,
    max_relative_error,
)
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _echo_config(out_dir, cfg_dict):
    _write_json(os.path.join(out_dir, "config.json"), cfg_dict)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}")


def _merged(file_cfg, args, keys):
    """File config overridden by any explicitly passed CLI flags."""
    out = dict(file_cfg)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _bank_from_dir(data_dir):
    labels = data_io.read_bank(os.path.join(data_dir, "labels.fbnk"), unit_rows=True)
    records = data_io.read_manifest(os.path.join(data_dir, "manifest.jsonl"))
    pos_rows = sorted(r["row"] for r in records if r["role"] == "pos_label")
    neg_rows = sorted(r["row"] for r in records if r["role"] == "neg_label")
    if not pos_rows:
        raise DataError("manifest declares no pos_label rows")
    return FeatureBank.from_rows(labels[pos_rows], labels[neg_rows])


def _training_from_dir(data_dir):
    feats = data_io.read_bank(os.path.join(data_dir, "train.fbnk"), unit_rows=True)
    records = data_io.read_manifest(os.path.join(data_dir, "manifest.jsonl"))
    n_labels = sum(r["role"] in ("pos_label", "neg_label") for r in records)
    pos = [(r["row"] - n_labels, r["class"]) for r in records if r["role"] == "train_pos"]
    neg = [r["row"] - n_labels for r in records if r["role"] == "train_neg"]
    pos.sort()
    neg.sort()
    pos_idx = [i for i, _ in pos]
    return TrainingSet(
        pos_features=feats[pos_idx],
        pos_labels=np.array([c for _, c in pos], dtype=int),
        neg_features=feats[neg],
    )


def cmd_synth(args):
    file_cfg = _load_config_file(args.config)
    keys = ("dim", "n_classes", "m_neg", "shots", "crops_per_sample", "select",
            "kappa", "seed", "n_test_per_class", "n_test_ood")
    cfg = data_io.SynthConfig(**_merged(file_cfg, args, keys))
    result = data_io.synth_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    data_io.write_bank(os.path.join(args.out, "labels.fbnk"), result.bank.rows())
    train_rows = np.vstack([result.training.pos_features,
                            result.training.neg_features])
    data_io.write_bank(os.path.join(args.out, "train.fbnk"), train_rows)
    data_io.write_bank(os.path.join(args.out, "test_id.fbnk"), result.test_id)
    data_io.write_bank(os.path.join(args.out, "test_ood.fbnk"), result.test_ood)
    data_io.write_manifest(os.path.join(args.out, "manifest.jsonl"), result.records)
    _echo_config(args.out, cfg.to_dict())
    print(f"wrote synthetic dataset to {args.out}")
    return EXIT_OK


def cmd_mine_neg(args):
    lex_feats = data_io.read_bank(args.lexicon, unit_rows=True)
    lexicon = mining.CandidateLexicon(
        features=lex_feats, names=[f"cand_{i}" for i in range(lex_feats.shape[0])]
    )
    id_rows = data_io.read_bank(args.id_bank, unit_rows=True)
    idx = mining.mine_negative_labels(
        lexicon, id_rows, args.m, stat=args.stat, quantile=args.quantile
    )
    _write_json(args.out, {"indices": [int(i) for i in idx]})
    _write_json(args.out + ".config.json", {
        "lexicon": args.lexicon, "id_bank": args.id_bank, "m": args.m,
        "stat": args.stat, "quantile": args.quantile,
    })
    print(f"selected {len(idx)} negative labels -> {args.out}")
    return EXIT_OK


def cmd_select_crops(args):
    crops = data_io.read_bank(args.crops, unit_rows=True)
    labels = data_io.read_bank(args.labels, unit_rows=True)
    records = data_io.read_manifest(args.crops_manifest, n_rows=crops.shape[0])
    groups = {}
    for rec in records:
        if rec["role"] != "crop":
            raise DataError(f"crops manifest contains non-crop role {rec['role']!r}")
        groups.setdefault((rec["parent"], rec["class"]), []).append(rec["row"])
    crop_sets = []
    selections = []
    for (parent, cls), rows in sorted(groups.items()):
        cs = mining.CropSet(parent_id=parent, label_index=cls,
                            features=crops[sorted(rows)])
        crop_sets.append(cs)
        selections.append(mining.select_outliers(cs, labels[cls], args.q))
    training = mining.build_training_set(selections, crop_sets)
    os.makedirs(args.out, exist_ok=True)
    train_rows = np.vstack([training.pos_features, training.neg_features])
    data_io.write_bank(os.path.join(args.out, "train.fbnk"), train_rows)
    out_records = []
    for i in range(training.n_pos):
        out_records.append({"row": i, "id": f"train_pos_{i}", "role": "train_pos",
                            "class": int(training.pos_labels[i])})
    for i in range(training.n_neg):
        out_records.append({"row": training.n_pos + i, "id": f"train_neg_{i}",
                            "role": "train_neg"})
    data_io.write_manifest(os.path.join(args.out, "manifest.jsonl"), out_records)
    _echo_config(args.out, {"crops": args.crops, "labels": args.labels, "q": args.q})
    print(f"selected {training.n_pos} positive / {training.n_neg} negative crops")
    return EXIT_OK


_TRAIN_KEYS = ("lambda1", "lambda2", "lr", "epochs", "batch_size", "tau_loss",
               "seed", "kr_variant", "kr_scope", "weight_decay")


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    data_dir = args.data or file_cfg.get("data_dir")
    if data_dir is None:
        raise ConfigError("train requires --data or a data_dir config entry")
    mode = args.mode or file_cfg.get("mode", "scale_shift")
    hidden = args.hidden if args.hidden is not None else file_cfg.get("hidden")
    train_kwargs = _merged(
        {k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS}, args, _TRAIN_KEYS
    )
    cfg = TrainConfig(**train_kwargs)
    bank = _bank_from_dir(data_dir)
    training = _training_from_dir(data_dir)
    state = init_model(bank.dim, hidden=hidden, mode=mode, seed=cfg.seed)
    ckpt, trace = train(state, bank, training, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(ckpt, os.path.join(args.out, "checkpoint.nftc"))
    trace.save_csv(os.path.join(args.out, "trace.csv"))
    echoed = dict(asdict(cfg), data_dir=data_dir, mode=mode, hidden=state.hidden)
    _echo_config(args.out, echoed)
    finals = trace.epoch_mean_totals()
    print("epoch mean totals: " + ", ".join(f"{e}:{t:.6f}" for e, t in finals.items()))
    return EXIT_OK


def cmd_score(args):
    bank = _bank_from_dir(args.bank)
    images = data_io.read_bank(args.images, unit_rows=True)
    state = None
    if args.method == "krnft":
        if args.checkpoint is None:
            raise ConfigError("krnft scoring requires --checkpoint")
        state = load_checkpoint(args.checkpoint).model
    scores = scoring.score_many(images, args.method, bank, state=state,
                                tau_score=args.tau_score)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "score", "truth"])
        for i, s in enumerate(scores):
            w.writerow([f"img_{i}", repr(float(s)), args.truth or ""])
    _write_json(args.out + ".config.json", {
        "bank": args.bank, "images": args.images, "method": args.method,
        "tau_score": args.tau_score, "checkpoint": args.checkpoint,
    })
    print(f"scored {len(scores)} samples -> {args.out}")
    return EXIT_OK


def _read_scores_csv(path):
    with open(path) as f:
        reader = csv.DictReader(f)
        if "score" not in reader.fieldnames:
            raise DataError(f"{path} has no 'score' column")
        return np.array([float(row["score"]) for row in reader])


def cmd_eval(args):
    if args.pair:
        a, b = args.pair
        out = {"hmean": round(scoring.hmean(a, b), 4)}
    else:
        id_scores = _read_scores_csv(args.scores_id)
        ood_scores = _read_scores_csv(args.scores_ood)
        report = scoring.evaluate(id_scores, ood_scores, tpr=args.tpr)
        out = report.to_dict()
        for key in ("auroc", "fpr95", "threshold"):
            out[key] = round(out[key], 4)
        if args.gamma is not None:
            out["gamma"] = args.gamma
    _write_json(args.out, out)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args):
    from .model import MODES
    from .objectives import Batch

    rng = np.random.Generator(np.random.Philox(key=np.uint64(args.seed)))
    modes = [args.mode] if args.mode else list(MODES)
    variants = [args.kr_variant] if args.kr_variant else ["feature", "logits", "prob"]
    worst = 0.0
    failures = []
    for mode in modes:
        for variant in variants:
            for inst in range(args.instances):
                d, n, m, hidden = 16, 5, 7, 8
                # moderate tau / lambda2 and batch size 4 keep the loss surface
                # smooth enough that central differences at eps=1e-5 stay well
                # clear of float64 cancellation noise; instances the oracle
                # cannot resolve (per fd_well_conditioned) are redrawn
                cfg = TrainConfig(kr_variant=variant, seed=args.seed,
                                  lambda1=0.3, lambda2=0.5, tau_loss=0.25)
                for _ in range(50):
                    bank = FeatureBank.from_rows(
                        _rand_unit(rng, n, d), _rand_unit(rng, m, d))
                    state = init_model(d, hidden=hidden, mode=mode,
                                       seed=int(rng.integers(0, 2**31)))
                    _perturb(state, rng, 0.2)
                    batch = Batch(
                        pos_features=_rand_unit(rng, 4, d),
                        pos_labels=rng.integers(0, n, size=4),
                        neg_features=_rand_unit(rng, 4, d),
                    )
                    _, analytic = backward(state, bank, batch, cfg)
                    if fd_well_conditioned(state, bank, batch, analytic):
                        break
                if args.corrupt_gradients:
                    for arr in analytic.values():
                        arr *= 1.01
                numeric = finite_diff_grad(state, bank, batch, cfg, eps=1e-5)
                err = max_relative_error(analytic, numeric)
                worst = max(worst, err)
                status = "ok" if err < args.tolerance else "FAIL"
                if status == "FAIL":
                    failures.append((mode, variant, inst, err))
                print(f"gradcheck mode={mode} kr={variant} instance={inst} "
                      f"max_rel_err={err:.3e} {status}")
    print(f"worst max_rel_err={worst:.3e} tolerance={args.tolerance:.1e}")
    if failures:
        raise NumericError(f"{len(failures)} gradient check failures")
    return EXIT_OK


def _rand_unit(rng, n, d):
    g = rng.standard_normal((n, d))
    return g / np.sqrt(np.sum(g * g, axis=1))[:, None]


def _perturb(state, rng, scale):
    # move off the identity initialization so the check exercises every path
    for arr in state.params().values():
        arr += scale * rng.standard_normal(arr.shape)


def build_parser():
    p = argparse.ArgumentParser(prog="nft-ood",
                                description="Feature tuning for OOD detection")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--n-classes", dest="n_classes", type=int)
    sp.add_argument("--m-neg", dest="m_neg", type=int)
    sp.add_argument("--shots", type=int)
    sp.add_argument("--crops-per-sample", dest="crops_per_sample", type=int)
    sp.add_argument("--select", type=int)
    sp.add_argument("--kappa", type=float)
    sp.add_argument("--n-test-per-class", dest="n_test_per_class", type=int)
    sp.add_argument("--n-test-ood", dest="n_test_ood", type=int)
    sp.set_defaults(func=cmd_synth)

    mp = sub.add_parser("mine-neg", help="mine negative labels from a lexicon")
    mp.add_argument("--lexicon", required=True)
    mp.add_argument("--id-bank", dest="id_bank", required=True)
    mp.add_argument("-m", type=int, required=True)
    mp.add_argument("--stat", choices=("max", "quantile"), default="max")
    mp.add_argument("--quantile", type=float)
    mp.add_argument("--out", required=True)
    mp.set_defaults(func=cmd_mine_neg)

    cp = sub.add_parser("select-crops", help="select top/bottom crops per sample")
    cp.add_argument("--crops", required=True)
    cp.add_argument("--crops-manifest", dest="crops_manifest", required=True)
    cp.add_argument("--labels", required=True)
    cp.add_argument("-q", type=int, required=True)
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_select_crops)

    tp = sub.add_parser("train", help="train the feature-tuning model")
    tp.add_argument("--config")
    tp.add_argument("--data")
    tp.add_argument("--out", required=True)
    tp.add_argument("--mode")
    tp.add_argument("--hidden", type=int)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--lambda1", type=float)
    tp.add_argument("--lambda2", type=float)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--batch-size", dest="batch_size", type=int)
    tp.add_argument("--tau-loss", dest="tau_loss", type=float)
    tp.add_argument("--weight-decay", dest="weight_decay", type=float)
    tp.add_argument("--kr-variant", dest="kr_variant",
                    choices=("feature", "logits", "prob"))
    tp.add_argument("--kr-scope", dest="kr_scope", choices=("pos", "both"))
    tp.set_defaults(func=cmd_train)

    scp = sub.add_parser("score", help="score image features")
    scp.add_argument("--bank", required=True, help="dataset directory")
    scp.add_argument("--images", required=True, help="fbnk file of image features")
    scp.add_argument("--method", choices=("mcm", "neglabel", "krnft"),
                     default="neglabel")
    scp.add_argument("--checkpoint")
    scp.add_argument("--tau-score", dest="tau_score", type=float, default=1.0)
    scp.add_argument("--truth", choices=("ID", "OOD"))
    scp.add_argument("--out", required=True)
    scp.set_defaults(func=cmd_score)

    ep = sub.add_parser("eval", help="compute AUROC / FPR95 metrics")
    ep.add_argument("--scores-id", dest="scores_id")
    ep.add_argument("--scores-ood", dest="scores_ood")
    ep.add_argument("--tpr", type=float, default=0.95)
    ep.add_argument("--gamma", type=float)
    ep.add_argument("--pair", nargs=2, type=float, metavar=("FPR_A", "FPR_B"),
                    help="combine two FPR95 values with their harmonic mean")
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_eval)

    gp = sub.add_parser("gradcheck", help="verify analytic gradients")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--mode", choices=("const_shift", "vec_shift", "scale_shift", "mlp"))
    gp.add_argument("--kr-variant", dest="kr_variant",
                    choices=("feature", "logits", "prob"))
    gp.add_argument("--instances", type=int, default=3)
    gp.add_argument("--tolerance", type=float, default=1e-4)
    gp.add_argument("--corrupt-gradients", dest="corrupt_gradients",
                    action="store_true", help=argparse.SUPPRESS)
    gp.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NftError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
