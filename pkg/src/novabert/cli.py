"""Command-line entry points.

Subcommands: prepare-data, train, evaluate, ablate, dump-attention,
profile, compare. Configuration lives in an INI file with a [model] and
an optional [training] section; CLI flags override individual keys.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from novabert import checkpoint as CK
from novabert import data as D
from novabert import train as TR
from novabert.model import Model, ModelConfig
from novabert.profiler import profile_cost

REQUIRED_MODEL_KEYS = ("hidden_size", "num_heads", "num_layers", "max_len")


class CliError(RuntimeError):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config and output-directory plumbing
# ---------------------------------------------------------------------------

def read_config(path, overrides=None):
    """Parse the INI config into (ModelConfig, TrainConfig)."""
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}")
    except configparser.Error as e:
        raise CliError(f"config parse error in {path}: {e}", code=2)
    model = cp["model"] if cp.has_section("model") else {}
    for key in REQUIRED_MODEL_KEYS:
        if key not in model:
            raise CliError(
                f"config {path}: missing required key '{key}' in [model]",
                code=2)
    features = None
    if "features" in model:
        raw = model["features"].strip()
        features = [f.strip() for f in raw.split(",") if f.strip()]
    mc_kwargs = dict(
        hidden_size=int(model["hidden_size"]),
        num_heads=int(model["num_heads"]),
        num_layers=int(model["num_layers"]),
        max_len=int(model["max_len"]),
        attention=model.get("attention", "nova"),
        fusion=model.get("fusion", "add"),
        dropout=float(model.get("dropout", 0.1)),
        mask_prob=float(model.get("mask_prob", 0.2)),
        features=features,
        use_position=model.get("use_position", "true").lower() != "false",
        gating_mode=model.get("gating_mode", "softmax"),
    )
    tr = cp["training"] if cp.has_section("training") else {}
    tc_kwargs = dict(
        learning_rate=float(tr.get("learning_rate", 1e-4)),
        epochs=int(tr.get("epochs", 200)),
        batch_size=int(tr.get("batch_size", 128)),
        warmup_frac=float(tr.get("warmup_frac", 0.05)),
        seed=int(tr.get("seed", 0)),
        clip_norm=float(tr.get("clip_norm", 5.0)),
        eval_every=int(tr.get("eval_every", 1)),
    )
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key in mc_kwargs:
            mc_kwargs[key] = val
        elif key in tc_kwargs:
            tc_kwargs[key] = val
    try:
        return ModelConfig(**mc_kwargs), TR.TrainConfig(**tc_kwargs)
    except ValueError as e:
        raise CliError(f"config {path}: {e}", code=2)


class OutputDir:
    """Writable output directory guarded by a lock marker file."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        if self.lock.exists():
            raise CliError(
                f"output directory {self.path} is locked by another run "
                f"(remove {self.lock} if stale)")
        self.lock.write_text(str(os.getpid()))
        return self.path

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False


def _dtype_for(precision):
    return np.float32 if precision == "f32" else np.float64


def _load_split(args):
    schema = D.load_schema(args.schema)
    catalog, sequences = D.load_dataset(args.data, args.items, schema)
    return schema, catalog, D.leave_one_out_split(sequences)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# prepare-data
# ---------------------------------------------------------------------------

_YEAR_RE = re.compile(r"\((\d{4})\)\s*$")


def cmd_prepare_data(args):
    """Convert MovieLens ::-separated .dat files to the TSV layout."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items_out = out / "items.tsv"
    with open(args.items, encoding="latin-1") as fh, \
            open(items_out, "w", encoding="utf-8") as dst:
        dst.write("item_id\tyear\tgenre\n")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            movie_id, title, genres = line.split("::")
            m = _YEAR_RE.search(title)
            year = m.group(1) if m else ""
            dst.write(f"{movie_id}\t{year}\t{genres}\n")
    inter_out = out / "interactions.tsv"
    with open(args.data, encoding="latin-1") as fh, \
            open(inter_out, "w", encoding="utf-8") as dst:
        dst.write("user_id\titem_id\ttimestamp\trating\n")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            user, item, rating, ts = line.split("::")
            dst.write(f"{user}\t{item}\t{ts}\t{rating}\n")
    schema = D.SideInfoSchema([
        D.FeatureSpec("year", "item", "bucketed",
                      buckets=[1940.0, 1950.0, 1960.0, 1970.0, 1980.0,
                               1985.0, 1990.0, 1995.0]),
        D.FeatureSpec("genre", "item", "multi"),
        D.FeatureSpec("rating", "behavior", "categorical"),
    ])
    D.save_schema(schema, out / "schema.ini")
    print(f"wrote {items_out}, {inter_out}, {out / 'schema.ini'}")
    return 0


# ---------------------------------------------------------------------------
# train / evaluate / ablate / compare
# ---------------------------------------------------------------------------

def _train_one(schema, catalog, split, mcfg, tcfg, precision, log=print):
    model = Model(mcfg, schema, catalog, seed=tcfg.seed,
                  dtype=_dtype_for(precision))
    result = TR.train(model, split, tcfg, log=log)
    TR.load_params(model, result.best_params)
    return model, result


def cmd_train(args):
    mcfg, tcfg = read_config(args.config, overrides={
        "attention": args.attention, "fusion": args.fusion,
        "seed": args.seed})
    schema, catalog, split = _load_split(args)
    with OutputDir(args.out) as out:
        model, result = _train_one(schema, catalog, split, mcfg, tcfg,
                                   args.precision)
        test = TR.rank_all(model, split.test,
                           fingerprint=TR.config_fingerprint(mcfg, tcfg))
        pop = TR.popularity_metrics(
            TR.popularity_baseline(split.train), split.test, catalog.m)
        CK.save_checkpoint(out / "checkpoint.bin", model,
                           metadata={"best_epoch": result.best_epoch,
                                     "seed": tcfg.seed,
                                     "best_hr10": (result.best_val.hr10
                                                   if result.best_val else None)})
        _write_json(out / "metrics.json", {
            "validation": result.best_val.to_dict() if result.best_val else None,
            "test": test.to_dict(),
            "popularity_baseline": pop.to_dict(),
            "history": result.history,
        })
        print(f"test HR@10 {test.hr10:.4f} NDCG@10 {test.ndcg10:.4f}")
    return 0


def cmd_evaluate(args):
    model, meta, _ = CK.load_checkpoint(args.checkpoint)
    sequences = D.load_interactions(args.data, model.schema, model.catalog)
    split = D.leave_one_out_split(sequences)
    report = TR.rank_all(model, split.test)
    payload = {"test": report.to_dict(), "checkpoint_metadata": meta}
    if args.out:
        with OutputDir(args.out) as out:
            _write_json(out / "metrics.json", payload)
    print(json.dumps(payload["test"], indent=2, sort_keys=True))
    return 0


_METRIC_COLS = ("HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "users")


def cmd_ablate(args):
    mcfg, tcfg = read_config(args.config, overrides={
        "attention": args.attention, "fusion": args.fusion,
        "seed": args.seed})
    schema, catalog, split = _load_split(args)
    with OutputDir(args.out) as out:
        table = TR.ablate(schema, catalog, split, mcfg, tcfg, log=print)
        with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
            fh.write("subset," + ",".join(_METRIC_COLS) + "\n")
            for name, rep in table.items():
                row = rep.to_dict()
                fh.write(name + ","
                         + ",".join(str(row[c]) for c in _METRIC_COLS) + "\n")
        for name, rep in table.items():
            print(f"{name:>10}: HR@10 {rep.hr10:.4f} NDCG@10 {rep.ndcg10:.4f}")
    return 0


def cmd_compare(args):
    """Invasive vs non-invasive stack under a shared seed."""
    schema, catalog, split = _load_split(args)
    rows = {}
    with OutputDir(args.out) as out:
        for attention in ("invasive", "nova"):
            mcfg, tcfg = read_config(args.config, overrides={
                "attention": attention, "fusion": args.fusion,
                "seed": args.seed})
            model, result = _train_one(schema, catalog, split, mcfg, tcfg,
                                       args.precision,
                                       log=lambda m, a=attention: print(f"[{a}] {m}"))
            rows[attention] = TR.rank_all(model, split.test).to_dict()
        diff = {c: rows["nova"][c] - rows["invasive"][c]
                for c in _METRIC_COLS if c != "users"}
        _write_json(out / "compare.json",
                    {"invasive": rows["invasive"], "nova": rows["nova"],
                     "diff": diff})
        header = f"{'metric':>10} {'invasive':>10} {'nova':>10} {'diff':>10}"
        print(header)
        for c in _METRIC_COLS:
            if c == "users":
                continue
            print(f"{c:>10} {rows['invasive'][c]:>10.4f} "
                  f"{rows['nova'][c]:>10.4f} {diff[c]:>+10.4f}")
    return 0


# ---------------------------------------------------------------------------
# dump-attention
# ---------------------------------------------------------------------------

def _write_pgm(path, matrix):
    """8-bit grayscale, darker = higher weight."""
    top = matrix.max()
    scaled = matrix / top if top > 0 else matrix
    pixels = (255 - np.round(scaled * 255)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def cmd_dump_attention(args):
    model, _, _ = CK.load_checkpoint(args.checkpoint)
    if not 0 <= args.layer < model.config.num_layers:
        raise CliError(f"layer {args.layer} out of range "
                       f"(model has {model.config.num_layers} layers)")
    sequences = D.load_interactions(args.data, model.schema, model.catalog)
    split = D.leave_one_out_split(sequences)
    pairs = split.test
    n = args.samples
    if n > len(pairs):
        print(f"warning: only {len(pairs)} samples available, "
              f"clamping from {n}", file=sys.stderr)
        n = len(pairs)
    rng = np.random.default_rng(args.seed)
    chosen = rng.choice(len(pairs), size=n, replace=False)
    with OutputDir(args.out) as out:
        att_dir = out / "attention"
        att_dir.mkdir(exist_ok=True)
        L = model.config.max_len
        for s, idx in enumerate(chosen):
            pair = pairs[idx]
            batch = D.make_eval_batch([pair], model.schema, model.catalog, L)
            _, attns = model.encode(batch, collect_attn=True)
            a = attns[args.layer].data[0]          # [H, L, L]
            keep = batch.pad_mask[0]               # right-aligned
            lp = int(keep.sum())
            sub = a[:, L - lp:, L - lp:]
            for head in range(sub.shape[0]):
                mat = sub[head]
                base = att_dir / f"{s}_{head}"
                np.savetxt(f"{base}.csv", mat, delimiter=",", fmt="%.10g")
                _write_pgm(f"{base}.pgm", mat)
        print(f"wrote {n} samples x {model.config.num_heads} heads "
              f"to {att_dir}")
    return 0


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

def cmd_profile(args):
    mcfg, _ = read_config(args.config, overrides={
        "attention": args.attention, "fusion": args.fusion})
    schema = D.load_schema(args.schema)
    catalog = D.load_items(args.items, schema)
    # behavior vocabularies are frozen from the interaction log when given
    if args.data:
        D.load_interactions(args.data, schema, catalog)
    prof = profile_cost(mcfg, schema, catalog.m)
    if args.out:
        with OutputDir(args.out) as out:
            (out / "profile.json").write_text(prof.to_json() + "\n")
    print(prof.to_json())
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="novabert",
        description="Sequential recommender with non-invasive side-"
                    "information fusion.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        return sp

    common_model = argparse.ArgumentParser(add_help=False)
    common_model.add_argument("--config", required=True)
    common_model.add_argument("--data", required=True)
    common_model.add_argument("--items", required=True)
    common_model.add_argument("--schema", required=True)
    common_model.add_argument("--out", required=True)
    common_model.add_argument("--seed", type=int, default=None)
    common_model.add_argument("--fusion",
                              choices=["add", "concat", "gating"], default=None)
    common_model.add_argument("--attention",
                              choices=["invasive", "nova"], default=None)
    common_model.add_argument("--precision", choices=["f32", "f64"],
                              default="f64")

    sp = add("prepare-data", cmd_prepare_data,
             help="convert ::-separated rating/movie files to TSV")
    sp.add_argument("--data", required=True, help="ratings file")
    sp.add_argument("--items", required=True, help="movies file")
    sp.add_argument("--out", required=True)

    add("train", cmd_train, parents=[common_model],
        help="train a model and write checkpoint.bin + metrics.json")

    sp = add("evaluate", cmd_evaluate, help="rank-all metrics on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default=None)

    add("ablate", cmd_ablate, parents=[common_model],
        help="train per side-information subset, write ablation.csv")

    sp = add("compare", cmd_compare, parents=[common_model],
             help="train invasive vs nova with a shared seed")
    sp.set_defaults(attention=None)

    sp = add("dump-attention", cmd_dump_attention,
             help="write per-sample per-head attention CSV + PGM files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--samples", type=int, default=6)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("profile", cmd_profile, help="analytic FLOP/parameter report")
    sp.add_argument("--config", required=True)
    sp.add_argument("--items", required=True)
    sp.add_argument("--schema", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--fusion", choices=["add", "concat", "gating"],
                    default=None)
    sp.add_argument("--attention", choices=["invasive", "nova"], default=None)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (D.DataError, CK.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
