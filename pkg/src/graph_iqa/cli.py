"""Command-line entry point.

    iqa encode        --config cfg --manifest data.csv --out cache_dir
    iqa train         --config cfg --manifest data.csv --out run_dir
    iqa eval          --config cfg --manifest data.csv --checkpoint ckpt [--tta on|off]
    iqa predict       --config cfg --input image.png --checkpoint ckpt [--tta on|off]
    iqa cost          --config cfg
    iqa inspect-graph --config cfg --input image.png

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
All file outputs are written to a temp name and renamed, so interrupted
runs never leave truncated artifacts.
"""

import argparse
import os
import sys
import tempfile

import numpy as np

from . import checkpoint, encoder, pipeline, train
from .config import load_config
from .errors import DataError, NumericalError, UsageError
from .graph import estimate_cost


def _atomic_write_bytes(path, blob):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-iqa-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text):
    _atomic_write_bytes(path, text.encode("utf-8"))


def _save_checkpoint_atomic(tensors, path):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-iqa-")
    os.close(fd)
    try:
        checkpoint.save_checkpoint(tensors, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_sidecar(path):
    sidecar = path + ".txt"
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            entries = {}
            for line in fh:
                if "=" in line:
                    key, _, val = line.partition("=")
                    entries[key.strip()] = val.strip()
        return train.MosNormalizer(
            mean=float(entries["mos_mean"]), std=float(entries["mos_std"])
        )
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint sidecar {sidecar}: {exc}") from exc


def cmd_encode(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    samples = pipeline.read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    failures = []
    encoded_rows = []
    for sample in samples:
        if pipeline.is_cache_path(sample.path):
            encoded_rows.append((sample.path, sample.mos, sample.split))
            continue
        target = os.path.join(
            args.out, pipeline.cache_key(sample.path, cfg) + pipeline.CACHE_SUFFIX
        )
        if not os.path.exists(target):
            try:
                image = pipeline.load_image(sample.path)
                raw, layout = pipeline.encode_image(image, cfg)
            except DataError as exc:
                failures.append((sample.path, str(exc)))
                continue
            fd, tmp = tempfile.mkstemp(dir=args.out, prefix=".tmp-iqa-")
            os.close(fd)
            try:
                encoder.save_feature_cache(raw, layout, tmp)
                os.replace(tmp, target)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        # bare file names keep the encoded manifest relocatable with its
        # cache directory (manifest paths resolve against their own dir)
        encoded_rows.append((os.path.basename(target), sample.mos, sample.split))
    lines = ["path,mos,split"]
    lines += [f"{p},{m!r},{s}" for p, m, s in encoded_rows]
    _atomic_write_text(
        os.path.join(args.out, "encoded_manifest.csv"), "\n".join(lines) + "\n"
    )
    print(f"encoded {len(encoded_rows)} samples into {args.out}")
    if failures:
        for path, why in failures:
            print(f"error: {path}: {why}", file=sys.stderr)
        return 2
    return 0


def _format_float(x):
    return repr(float(x))


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    samples = pipeline.read_manifest(args.manifest)
    splits = {s.split for s in samples}
    if "train" not in splits or "val" not in splits:
        raise DataError("manifest must provide both train and val splits")
    prepared = [
        pipeline.prepare_sample(s, cfg) for s in samples if s.split in ("train", "val")
    ]
    os.makedirs(args.out, exist_ok=True)
    result = train.train_model(prepared, cfg)

    step_lines = ["step,raw_mse,raw_corr,raw_rank,raw_var,mu_mse,mu_corr,mu_rank,mu_var,total"]
    for rec in result.step_log:
        raw = rec.raw
        mu = rec.mu
        step_lines.append(
            ",".join(
                [str(rec.step)]
                + [_format_float(raw[t]) for t in ("mse", "corr", "rank", "var")]
                + [_format_float(mu[t]) for t in ("mse", "corr", "rank", "var")]
                + [_format_float(rec.total)]
            )
        )
    _atomic_write_text(
        os.path.join(args.out, "train_log.csv"), "\n".join(step_lines) + "\n"
    )

    epoch_lines = ["epoch,train_plcc,train_srcc,train_rmse,val_plcc,val_srcc,val_rmse"]
    for rec in result.epoch_log:
        epoch_lines.append(
            ",".join(
                [str(rec.epoch)]
                + [_format_float(v) for v in (rec.train.plcc, rec.train.srcc, rec.train.rmse)]
                + [_format_float(v) for v in (rec.val.plcc, rec.val.srcc, rec.val.rmse)]
            )
        )
    _atomic_write_text(
        os.path.join(args.out, "epoch_log.csv"), "\n".join(epoch_lines) + "\n"
    )

    for name, rows in (
        ("train_predictions.csv", result.train_predictions),
        ("val_predictions.csv", result.val_predictions),
    ):
        lines = ["path,mos,pred"]
        lines += [f"{p},{m!r},{pred!r}" for p, m, pred in rows]
        _atomic_write_text(os.path.join(args.out, name), "\n".join(lines) + "\n")

    ckpt_path = os.path.join(args.out, "best.ckpt")
    _save_checkpoint_atomic(result.checkpoint, ckpt_path)
    sidecar = "\n".join(
        [
            f"epoch = {result.best_epoch}",
            f"val_plcc = {result.best_val.plcc!r}",
            f"val_srcc = {result.best_val.srcc!r}",
            f"val_rmse = {result.best_val.rmse!r}",
            f"mos_mean = {result.normalizer.mean!r}",
            f"mos_std = {result.normalizer.std!r}",
        ]
    )
    _atomic_write_text(ckpt_path + ".txt", sidecar + "\n")
    print(
        f"best epoch {result.best_epoch}: "
        f"val PLCC {result.best_val.plcc:.4f} "
        f"SRCC {result.best_val.srcc:.4f} "
        f"RMSE {result.best_val.rmse:.4f}"
    )
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _print_report(rep):
    print(rep.csv_line())
    print(f"  PLCC {rep.plcc:9.6f}")
    print(f"  SRCC {rep.srcc:9.6f}")
    print(f"  RMSE {rep.rmse:9.6f}")
    print(f"  n    {rep.n:9d}")


def _is_predictions_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return header == "path,mos,pred"


def cmd_eval(args):
    from . import metrics as metrics_mod

    cfg = load_config(args.config)
    if _is_predictions_file(args.manifest):
        # score a predictions file directly, no model in the loop
        mos, preds = [], []
        with open(args.manifest, "r", encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                _path, m, p = line.rsplit(",", 2)
                mos.append(float(m))
                preds.append(float(p))
        rep = metrics_mod.report(np.array(preds), np.array(mos))
        _print_report(rep)
        return 0
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or a predictions file)")
    samples = [s for s in pipeline.read_manifest(args.manifest) if s.split == "test"]
    if not samples:
        raise DataError("manifest has an empty test split")
    tensors = checkpoint.load_checkpoint(args.checkpoint)
    normalizer = _load_sidecar(args.checkpoint)
    tta = args.tta != "off"
    preds = []
    mos = []
    for sample in samples:
        prepared = pipeline.prepare_sample(sample, cfg)
        preds.append(train.predict_tta(prepared, tensors, cfg, normalizer, tta=tta))
        mos.append(sample.mos)
    rep = metrics_mod.report(np.array(preds), np.array(mos))
    _print_report(rep)
    return 0


def cmd_predict(args):
    cfg = load_config(args.config)
    tensors = checkpoint.load_checkpoint(args.checkpoint)
    normalizer = _load_sidecar(args.checkpoint)
    sample = pipeline.Sample(path=args.input, mos=0.0, split="test")
    prepared = pipeline.prepare_sample(sample, cfg)
    tta = args.tta != "off"
    score = train.predict_tta(prepared, tensors, cfg, normalizer, tta=tta)
    print(repr(score))
    return 0


def cmd_cost(args):
    cfg = load_config(args.config)
    per_layer = estimate_cost(cfg.grid_n, cfg.k, cfg.d, 1)
    total = estimate_cost(cfg.grid_n, cfg.k, cfg.d, cfg.layers)
    print(f"nodes          {cfg.grid_n}")
    print(f"neighbors      {cfg.k}")
    print(f"embedding      {cfg.d}")
    print(f"layers         {cfg.layers}")
    print(f"message_ops    {per_layer.message_ops} per layer, {total.message_ops} total")
    print(
        f"transform_ops  {per_layer.transform_ops} per layer, "
        f"{total.transform_ops} total"
    )
    print(f"feature_memory {total.feature_memory} values")
    print(f"edge_memory    {total.edge_memory} entries")
    return 0


def cmd_inspect_graph(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    sample = pipeline.Sample(path=args.input, mos=0.0, split="test")
    prepared = pipeline.prepare_sample(sample, cfg)
    # graph construction needs node embeddings; use the seeded initial
    # projection so the dump is reproducible without a checkpoint
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed)))
    proj = encoder.init_projection(prepared.raw.d_raw, cfg.d, rng)
    _nodes, g = pipeline.node_graph(prepared.raw, prepared.layout, proj, cfg)
    order = np.lexsort((g.edges[:, 1], g.edges[:, 0]))
    for idx in order:
        src, dst = g.edges[idx]
        print(f"{src} {dst} {g.affinity[idx]:.9g}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="iqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "encode": cmd_encode,
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
        "cost": cmd_cost,
        "inspect-graph": cmd_inspect_graph,
    }
    for name, handler in specs.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("--checkpoint")
        p.add_argument("--input")
        p.add_argument("--tta", choices=["on", "off"], default="on")
        p.add_argument("--seed", type=int)
        p.set_defaults(handler=handler)
    return parser


_REQUIRED = {
    "encode": ("manifest", "out"),
    "train": ("manifest", "out"),
    "eval": ("manifest",),
    "predict": ("input", "checkpoint"),
    "cost": (),
    "inspect-graph": ("input",),
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        for field in _REQUIRED[args.command]:
            if getattr(args, field) is None:
                raise UsageError(f"{args.command} requires --{field}")
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
