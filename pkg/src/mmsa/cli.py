"""``mmsa`` command line: corpus generation, training, embedding, retrieval, metrics."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import Dataset, gen_synthetic, load_csv, load_jsonl, save_jsonl, scaffold_split
from .fingerprint import ecfp
from .metrics import MetricReport, dbi, nmi, retrieve, rmse, roc_auc
from .model import PretrainConfig
from .smiles import read_smiles
from .trainer import CLASSIFICATION, REGRESSION, embed, finetune_seeds, load_checkpoint, pretrain, save_checkpoint

# small built-in reference set for retrieval when no --refs file is given
REFERENCE_PANEL = (
    "CC(=O)Nc1ccc(O)cc1",
    "CC(=O)Nc1cccc(O)c1",
    "CC(=O)Nc1ccccc1",
    "CC(=O)Nc1ccc(OCC)cc1",
    "COc1cccc(NC(C)=O)c1",
    "Nc1ccc(O)cc1",
    "Nc1cccc(O)c1",
    "Oc1ccccc1",
    "Nc1ccccc1",
    "CC(=O)Oc1ccccc1C(=O)O",
    "OC(=O)c1ccccc1O",
    "OC(=O)c1ccccc1",
    "Cc1ccccc1",
    "c1ccccc1",
    "c1ccncc1",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "CN1C=NC2=C1C(=O)N(C)C(=O)N2C",
    "CCN(CC)CC",
    "CC(=O)O",
    "CCO",
)


class UsageError(Exception):
    pass


def _write(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _merged(args, keys) -> dict:
    """Config file values overridden by explicitly given flags."""
    conf = json.loads(Path(args.config).read_text()) if args.config else {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            conf[k] = v
    return conf


def _load_dataset(path: str, label_columns=None) -> Dataset:
    p = Path(path)
    if p.suffix == ".csv":
        return load_csv(p, label_columns=label_columns or ())
    return load_jsonl(p)


def _ensure_splits(ds: Dataset, seed: int = 0) -> Dataset:
    return ds if ds.splits is not None else ds.with_splits(scaffold_split(ds, seed=seed))


PRETRAIN_KEYS = tuple(f.name for f in fields(PretrainConfig))


def cmd_gen(args) -> dict:
    conf = _merged(args, ("n", "seed"))
    ds = gen_synthetic(int(conf.get("n", 200)), seed=int(conf.get("seed", 0)))
    if args.split:
        ds = ds.with_splits(scaffold_split(ds, seed=int(conf.get("seed", 0))))
    if not args.out:
        raise UsageError("gen needs --out for the JSONL corpus")
    save_jsonl(ds, args.out)
    return {"molecules": len(ds), "out": args.out, "labels": list(ds.label_names)}


def cmd_ingest(args) -> dict:
    labels = args.labels.split(",") if args.labels else ()
    ds = load_csv(args.csv, smiles_column=args.smiles_column, label_columns=labels)
    if args.split:
        ds = ds.with_splits(scaffold_split(ds, seed=args.seed or 0))
    if not args.out:
        raise UsageError("ingest needs --out for the JSONL cache")
    save_jsonl(ds, args.out)
    return {"molecules": len(ds), "skipped": ds.skipped, "out": args.out}


def cmd_pretrain(args) -> dict:
    conf = _merged(args, PRETRAIN_KEYS + ("data", "checkpoint", "log"))
    data = conf.pop("data", None)
    ckpt_path = conf.pop("checkpoint", None)
    log_path = conf.pop("log", None)
    if not data or not ckpt_path:
        raise UsageError("pretrain needs --data and --checkpoint (flags or config)")
    cfg = PretrainConfig.from_dict(conf)
    ckpt, log = pretrain(load_jsonl(data), cfg, log_path=log_path)
    save_checkpoint(ckpt, ckpt_path)
    return {"checkpoint": ckpt_path, "log": log_path, "epochs": len(log),
            "first": log[0] if log else None, "last": log[-1] if log else None}


def cmd_finetune(args) -> dict:
    conf = _merged(args, ("data", "checkpoint", "task", "label", "epochs", "lr", "batch"))
    if not conf.get("data"):
        raise UsageError("finetune needs --data")
    ds = _ensure_splits(_load_dataset(conf["data"]))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(range(5))
    ckpt = load_checkpoint(conf["checkpoint"]) if conf.get("checkpoint") else None
    report = finetune_seeds(ckpt, ds, seeds=seeds, task=conf.get("task", CLASSIFICATION),
                            label=conf.get("label", 0), epochs=int(conf.get("epochs", 100)),
                            lr=float(conf.get("lr", 0.001)), batch=int(conf.get("batch", 32)))
    return {"pretrained": ckpt is not None, **report.to_dict()}


def cmd_embed(args) -> dict:
    ds = _load_dataset(args.data)
    emb = embed(load_checkpoint(args.checkpoint), ds)
    rows = []
    for mol, vec in zip(ds.molecules, emb):
        label = None if mol.labels is None or not len(mol.labels) else float(mol.labels[0])
        label = None if label is not None and np.isnan(label) else label
        rows.append({"id": mol.id, "smiles": mol.smiles, "embedding": vec.tolist(), "label": label})
    if args.out:
        with open(args.out, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
        return {"rows": len(rows), "dim": int(emb.shape[1]), "out": args.out}
    return {"rows": rows}


def cmd_retrieve(args) -> dict:
    if args.mode == "tanimoto":
        smiles = list(REFERENCE_PANEL)
        if args.refs:
            smiles = [m.smiles for m in _load_dataset(args.refs).molecules]
        refs = [ecfp(read_smiles(s)) for s in smiles]
        res = retrieve(ecfp(read_smiles(args.query)), refs, args.k, "tanimoto", ref_ids=smiles, query_id=args.query)
        return res.to_dict()
    if not args.checkpoint:
        raise UsageError("cosine retrieval needs --checkpoint")
    from .data import build_molecule
    ckpt = load_checkpoint(args.checkpoint)
    ref_mols = (list(_load_dataset(args.refs).molecules) if args.refs
                else [build_molecule(read_smiles(s)) for s in REFERENCE_PANEL])
    q = build_molecule(read_smiles(args.query))
    emb = embed(ckpt, ref_mols + [q])
    res = retrieve(emb[-1], emb[:-1], args.k, "cosine", ref_ids=[m.smiles for m in ref_mols], query_id=args.query)
    return res.to_dict()


def cmd_eval(args) -> dict:
    if args.embeddings:
        rows = [json.loads(line) for line in Path(args.embeddings).read_text().splitlines() if line.strip()]
        x = np.array([r["embedding"] for r in rows])
        labels = np.array([r["label"] for r in rows])
        from scipy.cluster.vq import kmeans2
        k = len(np.unique(labels))
        _, assigned = kmeans2(x, k, seed=args.seed or 0, minit="++")
        return {"dbi": dbi(x, labels), "nmi": nmi(assigned, labels), "clusters": int(k)}
    if args.predictions:
        obj = json.loads(Path(args.predictions).read_text())
        metric = args.metric or "roc_auc"
        fn = {"roc_auc": roc_auc, "rmse": rmse}[metric]
        return MetricReport.from_values(metric, [fn(obj["scores"], obj["labels"])]).to_dict()
    raise UsageError("eval needs --embeddings or --predictions")


def cmd_fingerprint(args) -> dict:
    fp = ecfp(read_smiles(args.smiles), radius=args.radius, nbits=args.nbits)
    return {"smiles": args.smiles, "radius": fp.radius, "nbits": fp.nbits, "on_bits": fp.on_bits,
            "popcount": fp.popcount()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmsa", description="multi-modal molecular pre-training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file with default values for the flags")
        sp.add_argument("--out", help="write JSON result here instead of stdout")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic labelled corpus")
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--split", action="store_true", help="attach a scaffold split")

    sp = add("ingest", cmd_ingest, "featurise a CSV into a JSONL cache")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--smiles-column", default="smiles")
    sp.add_argument("--labels", help="comma-separated label columns")
    sp.add_argument("--split", action="store_true")
    sp.add_argument("--seed", type=int)

    sp = add("pretrain", cmd_pretrain, "self-supervised pre-training")
    sp.add_argument("--data")
    sp.add_argument("--checkpoint", help="checkpoint output path")
    sp.add_argument("--log", help="JSON-lines loss log path")
    for key, typ in (("epochs", int), ("batch", int), ("lr", float), ("lam", float), ("tau", float),
                     ("alpha", float), ("K", int), ("L", int), ("d_c", int), ("d_o", int), ("d_h", int),
                     ("ae_hidden", int), ("image_size", int), ("seed", int)):
        sp.add_argument(f"--{key}", type=typ)
    sp.add_argument("--contrastive", choices=("in-batch", "single-negative"))
    sp.add_argument("--knn-metric", dest="knn_metric", choices=("inner", "euclidean"))
    sp.add_argument("--align-metric", dest="align_metric", choices=("cosine", "dot"))
    sp.add_argument("--conv", choices=("hgnn", "gcn"))
    for term in ("cl", "rl", "me", "pre"):
        sp.add_argument(f"--no-{term}", dest=f"use_{term}", action="store_const", const=False)
    for flag in ("normalize_labels", "detach_targets", "standardize_batch"):
        sp.add_argument(f"--no-{flag.replace('_', '-')}", dest=flag, action="store_const", const=False)

    sp = add("finetune", cmd_finetune, "fine-tune on a labelled dataset and score the test split")
    sp.add_argument("--data")
    sp.add_argument("--checkpoint", help="omit for the randomly initialised control")
    sp.add_argument("--task", choices=(CLASSIFICATION, REGRESSION))
    sp.add_argument("--label")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")

    sp = add("embed", cmd_embed, "export unified embeddings as JSON lines")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)

    sp = add("retrieve", cmd_retrieve, "nearest reference molecules for a query SMILES")
    sp.add_argument("--query", required=True)
    sp.add_argument("--mode", choices=("cosine", "tanimoto"), default="tanimoto")
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--refs", help="JSONL or CSV reference set (default: built-in panel)")
    sp.add_argument("--checkpoint")

    sp = add("eval", cmd_eval, "clustering metrics for embeddings or scoring of predictions")
    sp.add_argument("--embeddings", help="JSONL from `mmsa embed`")
    sp.add_argument("--predictions", help='JSON {"scores": [...], "labels": [...]}')
    sp.add_argument("--metric", choices=("roc_auc", "rmse"))
    sp.add_argument("--seed", type=int)

    sp = add("fingerprint", cmd_fingerprint, "ECFP bits of a SMILES string")
    sp.add_argument("--smiles", required=True)
    sp.add_argument("--radius", type=int, default=2)
    sp.add_argument("--nbits", type=int, default=2048)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        result = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmsa: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as structured JSON for scripting
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if args.command in ("gen", "ingest") or (args.command == "embed" and args.out):
        _write(result, None)
    else:
        _write(result, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
