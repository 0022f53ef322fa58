"""Command-line pipeline: ingest -> cluster -> train -> evaluate -> export-prompts.

Usage (each subcommand accepts ``--config run.json``; flags override the
file field by field)::

    tonel synth --out demo                         # demo corpus, not needed for real data
    tonel ingest --input vecs.csv --out data
    tonel cluster --embeddings data/embeddings.temb --manifest data/manifest.jsonl --out clu
    tonel train --embeddings data/embeddings.temb --manifest clu/manifest.jsonl --method tonel-pl --out tr
    tonel evaluate --method tonel-pl --checkpoint tr/model.tmdl --embeddings ... --queries ... --out ev
    tonel export-prompts --method pca --embeddings ... --queries ... --manifest ... --query-manifest ... --out pr

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
``TONEL_THREADS`` caps BLAS threads; results do not depend on it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import pca_fit, save_pca
from .cim_noise import perturb_matrix, resolve_profile
from .embedding_store import (
    EmbeddingSet,
    Manifest,
    ManifestEntry,
    _write_bytes,
    attach_labels,
    load_embeddings,
    load_manifest,
    save_embeddings,
    save_manifest,
)
from .errors import (
    ConfigError,
    DataError,
    DivergedTraining,
    FormatError,
    IdMismatch,
    MissingText,
    NumericalError,
    TonelError,
)
from .model import load_model, save_model
from .pgm_cluster import kmeans_fit, save_clusters, write_pseudo_labels
from .retrieval import (
    IdentityProjector,
    PcaProjector,
    TonelProjector,
    assemble_prompt,
    make_grid,
    mips_topk_batch,
    reports_to_csv,
    run_experiment,
)
from .quantizer import quantize_rows
from .synthetic import make_corpus
from .trainer import TrainConfig, train

log = logging.getLogger("tonel")

METHODS = ("tonel-pl", "tonel-tl", "pca", "oracle")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    out: str = "out"
    seed: int = 0
    input: str | None = None            # ingest source (.csv / .jsonl)
    id_prefix: str = "doc"
    embeddings: str | None = None
    queries: str | None = None
    manifest: str | None = None
    query_manifest: str | None = None
    checkpoint: str | None = None
    method: str = "tonel-pl"
    devices: list[str] = field(default_factory=lambda: ["Device-2"])
    noisy_fractions: list[float] = field(default_factory=lambda: [1.0])
    sigma_scales: list[float] = field(default_factory=lambda: [1.0])
    per_query_noise: bool = False
    k: int = 5
    n_clusters: int | None = None
    normalize: bool = False
    pca_solver: str = "eigh"
    per_query_detail: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_LIST_FIELDS = {"devices", "noisy_fractions", "sigma_scales"}


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def resolve_config(file_obj: dict, overrides: dict) -> RunConfig:
    """Merge a JSON config object with flag overrides and validate it.

    Raises ConfigError naming the offending field before any work is done.
    """
    merged = dict(file_obj)
    train_obj = merged.pop("train", None) or {}
    if not isinstance(train_obj, dict):
        raise ConfigError("train: expected an object")
    train_obj = dict(train_obj)
    train_over = overrides.pop("train", {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    train_obj.update({k: v for k, v in train_over.items() if v is not None})

    known = {f.name for f in fields(RunConfig)} - {"train"}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {unknown}")
    for name in _LIST_FIELDS & set(merged):
        merged[name] = _as_list(merged[name])

    seed = merged.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    method = merged.get("method", "tonel-pl")
    if method not in METHODS:
        raise ConfigError(f"method: expected one of {list(METHODS)}, got {method!r}")
    # the run seed drives training; the method picks the label source
    train_obj["seed"] = seed
    if method in ("tonel-pl", "tonel-tl"):
        want = "pseudo" if method == "tonel-pl" else "true"
        if train_obj.get("label_source", want) != want:
            raise ConfigError(f"train.label_source={train_obj['label_source']!r} contradicts method {method!r}")
        train_obj["label_source"] = want
    try:
        merged["train"] = TrainConfig.from_dict(train_obj)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    for name in ("noisy_fractions", "sigma_scales"):
        for v in getattr(cfg, name):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name}: invalid value {v!r}")
    if any(f > 1 for f in cfg.noisy_fractions):
        raise ConfigError("noisy_fractions: values must be in [0, 1]")
    for d in cfg.devices:
        resolve_profile(d)  # UnknownDevice lists the valid names
    if cfg.k < 5:
        raise ConfigError(f"k: must be >= 5 to score prec@5 / ndcg@5, got {cfg.k}")
    if cfg.n_clusters is not None and cfg.n_clusters < 1:
        raise ConfigError(f"n_clusters: must be positive, got {cfg.n_clusters}")
    if cfg.pca_solver not in ("eigh", "jacobi"):
        raise ConfigError(f"pca_solver: expected 'eigh' or 'jacobi', got {cfg.pca_solver!r}")
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if value is None:
            raise ConfigError(f"{name}: required for this command")
        if not Path(value).is_file():
            raise ConfigError(f"{name}: file not found: {value}")


def _dump_json(obj, path: Path) -> None:
    _write_bytes(path, [(json.dumps(obj, indent=2, ensure_ascii=False) + "\n").encode("utf-8")])


def _envelope(cfg: RunConfig, command: str, body: dict) -> dict:
    body = dict(body)
    body.pop("config", None)  # the full run config below already covers it
    return {"command": command, "version": __version__, "config": cfg.to_dict(), **body}


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- ingest ---------------------------------------------------------------

def _parse_vector(values, where: str) -> list[float]:
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: non-numeric value ({exc})") from exc


def read_vectors(path) -> tuple[np.ndarray, list[dict]]:
    """Rows from CSV (numbers only, optional header) or JSONL.

    JSONL lines are either a bare list of numbers or an object with
    ``embedding`` plus optional ``id``, ``text``, ``true_label``.
    Ragged rows raise FormatError naming the line.
    """
    path = Path(path)
    rows: list[list[float]] = []
    meta: list[dict] = []
    width = None
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        if path.suffix.lower() in (".jsonl", ".ndjson", ".json"):
            records = []
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path} line {lineno}: {exc.msg}") from exc
                if isinstance(obj, dict):
                    vec = obj.get("embedding")
                    info = {k: obj[k] for k in ("id", "text", "true_label") if k in obj}
                else:
                    vec, info = obj, {}
                if not isinstance(vec, list):
                    raise FormatError(f"{path} line {lineno}: expected a list of numbers")
                records.append((lineno, vec, info))
        else:
            records = []
            for lineno, rec in enumerate(csv.reader(fh), start=1):
                if not rec or all(not c.strip() for c in rec):
                    continue
                if lineno == 1:
                    try:
                        [float(c) for c in rec]
                    except ValueError:
                        continue  # header line
                records.append((lineno, rec, {}))
        for lineno, vec, info in records:
            where = f"{path} line {lineno}"
            values = _parse_vector(vec, where)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise FormatError(f"{where}: ragged row with {len(values)} values, expected {width}")
            rows.append(values)
            meta.append(info)
    if width == 0:
        raise FormatError(f"{path}: rows have no values")
    data = np.asarray(rows, dtype=np.float32).reshape(len(rows), width or 0)
    return data, meta


def cmd_ingest(cfg: RunConfig) -> dict:
    _require(cfg, "input")
    data, meta = read_vectors(cfg.input)
    ids = [str(m.get("id", f"{cfg.id_prefix}{i}")) for i, m in enumerate(meta)]
    emb = EmbeddingSet(data, ids)
    out = _out_dir(cfg)
    save_embeddings(emb, out / "embeddings.temb")
    manifest = Manifest([ManifestEntry(i, m.get("text"), m.get("true_label")) for i, m in zip(ids, meta)])
    save_manifest(manifest, out / "manifest.jsonl")
    report = _envelope(cfg, "ingest", {"count": emb.count, "dim": emb.dim})
    _dump_json(report, out / "ingest_report.json")
    return report


# -- cluster --------------------------------------------------------------

def _load_docs(cfg: RunConfig) -> tuple[EmbeddingSet, Manifest]:
    emb = load_embeddings(cfg.embeddings)
    manifest = load_manifest(cfg.manifest) if cfg.manifest else Manifest.from_ids(emb.ids)
    if manifest.ids != list(emb.ids):
        raise IdMismatch("manifest ids do not match the embedding ids (same order required)")
    return emb, manifest


def cmd_cluster(cfg: RunConfig) -> dict:
    _require(cfg, "embeddings")
    if cfg.manifest is not None:
        _require(cfg, "manifest")
    emb, manifest = _load_docs(cfg)
    K = cfg.n_clusters
    if K is None:
        true = [e.true_label for e in manifest if e.true_label is not None]
        if not true:
            raise ConfigError("n_clusters: required when the manifest has no true labels")
        K = max(true) + 1
    model = kmeans_fit(emb, K, seed=cfg.seed, normalize=cfg.normalize)
    out = _out_dir(cfg)
    save_manifest(write_pseudo_labels(model, manifest), out / "manifest.jsonl")
    save_clusters(model, out / "clusters.tkmn")
    report = _envelope(cfg, "cluster", {
        "K": K, "inertia": model.inertia, "n_iter": model.n_iter,
        "inertia_history": model.inertia_history, "degenerate": model.degenerate,
        "cluster_sizes": np.bincount(model.assignments, minlength=K).tolist(),
    })
    _dump_json(report, out / "cluster_report.json")
    return report


# -- train ----------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> dict:
    _require(cfg, "embeddings", "manifest")
    if cfg.method not in ("tonel-pl", "tonel-tl"):
        raise ConfigError(f"method: train needs 'tonel-pl' or 'tonel-tl', got {cfg.method!r}")
    emb, manifest = _load_docs(cfg)
    labeled = attach_labels(emb, manifest)
    out = _out_dir(cfg)
    try:
        model, tr = train(labeled, cfg.train)
    except DivergedTraining as exc:
        if exc.report is not None:
            _dump_json(_envelope(cfg, "train", {"error": str(exc), **exc.report.to_dict()}),
                       out / "train_report.json")
        raise
    save_model(model, out / "model.tmdl")
    tr.checkpoint = "model.tmdl"
    log.info("training took %.2f s", tr.wall_clock_s)
    report = _envelope(cfg, "train", tr.to_dict())
    _dump_json(report, out / "train_report.json")
    return report


# -- evaluate / export ----------------------------------------------------

def _projector(cfg: RunConfig, docs: EmbeddingSet, out: Path):
    if cfg.method in ("tonel-pl", "tonel-tl"):
        _require(cfg, "checkpoint")
        model = load_model(cfg.checkpoint)
        if model.d_in != docs.dim:
            raise DataError(f"checkpoint expects dim {model.d_in}, embeddings have dim {docs.dim}")
        return TonelProjector(model, name=cfg.method)
    if cfg.method == "pca":
        pca = pca_fit(docs, cfg.train.d_out, solver=cfg.pca_solver)
        save_pca(pca, out / "pca.tpca")
        return PcaProjector(pca)
    return IdentityProjector("oracle", quantized=False)


def _grid(cfg: RunConfig):
    grid = make_grid([resolve_profile(d) for d in cfg.devices], cfg.noisy_fractions, cfg.sigma_scales,
                     cfg.seed, cfg.per_query_noise)
    if cfg.method == "oracle" and any(g.noisy_fraction > 0 and g.sigma_scale > 0 for g in grid):
        raise ConfigError("method 'oracle' stores no codes; use noisy_fractions [0] or sigma_scales [0]")
    return grid


def _report_name(r) -> str:
    return f"{r.method}_{r.device}_f{r.noisy_fraction:g}_s{r.sigma_scale:g}.json"


def cmd_evaluate(cfg: RunConfig) -> dict:
    _require(cfg, "embeddings", "queries")
    grid = _grid(cfg)
    docs, queries = load_embeddings(cfg.embeddings), load_embeddings(cfg.queries)
    if docs.dim != queries.dim:
        raise DataError(f"documents have dim {docs.dim}, queries {queries.dim}")
    out = _out_dir(cfg)
    reports = run_experiment(_projector(cfg, docs, out), docs, queries, grid, k=cfg.k,
                             quant=cfg.train.quant_config(), per_query_detail=cfg.per_query_detail)
    (out / "reports").mkdir(exist_ok=True)
    for r in reports:
        _dump_json(_envelope(cfg, "evaluate", r.to_dict()), out / "reports" / _report_name(r))
    summary = _envelope(cfg, "evaluate", {"reports": [r.to_dict() for r in reports]})
    _dump_json(summary, out / "reports.json")
    _write_bytes(out / "summary.csv", [reports_to_csv(reports).encode("utf-8")])
    return summary


def cmd_export_prompts(cfg: RunConfig) -> dict:
    _require(cfg, "embeddings", "queries", "manifest", "query_manifest")
    grid = _grid(cfg)
    docs, manifest = _load_docs(cfg)
    queries = load_embeddings(cfg.queries)
    qman = load_manifest(cfg.query_manifest)
    if qman.ids != list(queries.ids):
        raise IdMismatch("query manifest ids do not match the query embedding ids")
    out = _out_dir(cfg)
    proj = _projector(cfg, docs, out)
    # retrieval under the first grid point (what the device would return)
    dz, qz = proj.embed(docs.data), proj.embed(queries.data)
    quant = cfg.train.quant_config()
    if proj.quantized:
        mat, _ = perturb_matrix(quantize_rows(dz, quant), grid[0])
        qz = quantize_rows(qz, quant).dequantize()
    else:
        mat = dz
    idx, _ = mips_topk_batch(mat, qz, min(cfg.k, docs.count))
    texts = [e.text for e in manifest]
    lines = []
    for j, entry in enumerate(qman):
        if entry.text is None:
            raise MissingText(f"query {entry.id!r} has no text")
        prompt = assemble_prompt(entry.text, [texts[i] for i in idx[j]])
        lines.append(json.dumps({"query_id": entry.id, "prompt": prompt}, ensure_ascii=False) + "\n")
    _write_bytes(out / "prompts.jsonl", ["".join(lines).encode("utf-8")])
    report = _envelope(cfg, "export-prompts", {"n_prompts": len(lines), "k": cfg.k,
                                               "device": grid[0].profile.name})
    _dump_json(report, out / "export_report.json")
    return report


# -- synth ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> dict:
    """Write a synthetic demo corpus (docs, queries, manifests with text and true labels)."""
    corpus = make_corpus(seed=cfg.seed)
    out = _out_dir(cfg)
    save_embeddings(EmbeddingSet(corpus.docs, corpus.doc_ids()), out / "docs.temb")
    save_embeddings(EmbeddingSet(corpus.queries, corpus.query_ids()), out / "queries.temb")
    save_manifest(corpus.manifest(), out / "manifest.jsonl")
    save_manifest(corpus.query_manifest(), out / "query_manifest.jsonl")
    report = _envelope(cfg, "synth", {"n_docs": len(corpus.docs), "n_queries": len(corpus.queries),
                                      "n_clusters": corpus.n_clusters, "dim": corpus.docs.shape[1]})
    _dump_json(report, out / "synth_report.json")
    return report


COMMANDS = {
    "ingest": cmd_ingest,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-prompts": cmd_export_prompts,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tonel", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"tonel {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--embeddings", help="document embeddings (.temb)")
    common.add_argument("--queries", help="query embeddings (.temb)")
    common.add_argument("--manifest", help="document manifest (.jsonl)")
    common.add_argument("--query-manifest", dest="query_manifest", help="query manifest with texts (.jsonl)")
    common.add_argument("--checkpoint", help="trained model (.tmdl)")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--device", dest="devices", action="append",
                        help="device profile name or JSON file (repeatable)")
    common.add_argument("--noisy-fraction", dest="noisy_fractions", type=float, action="append")
    common.add_argument("--sigma-scale", dest="sigma_scales", type=float, action="append")
    common.add_argument("--per-query-noise", dest="per_query_noise", action="store_const", const=True)
    common.add_argument("--per-query-detail", dest="per_query_detail", action="store_const", const=True)
    common.add_argument("--k", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", parents=[common], help="CSV/JSONL vectors -> TEMB + manifest")
    sp.add_argument("--input")
    sp.add_argument("--id-prefix", dest="id_prefix")

    sp = sub.add_parser("cluster", parents=[common], help="K-means pseudo labels")
    sp.add_argument("--clusters", "-K", dest="n_clusters", type=int)
    sp.add_argument("--normalize", action="store_const", const=True)

    sp = sub.add_parser("train", parents=[common], help="noise-aware training")
    for flag, typ in (("epochs", int), ("batch-size", int), ("lr", float), ("d-out", int),
                      ("arch", str), ("optimizer", str), ("sigma-scale-train", float)):
        sp.add_argument(f"--{flag}", dest=f"train.{flag.replace('-', '_')}", type=typ)
    sp.add_argument("--train-device", dest="train.device")

    sp = sub.add_parser("evaluate", parents=[common], help="retrieval metrics over a noise grid")
    sp.add_argument("--pca-solver", dest="pca_solver", choices=("eigh", "jacobi"))

    sub.add_parser("export-prompts", parents=[common], help="top-k prompts as JSONL")
    sub.add_parser("synth", parents=[common], help="write a synthetic demo corpus")
    return p


def _overrides(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "verbose"}
    over: dict = {"train": {}}
    for k, v in vars(ns).items():
        if k in skip or v is None:
            continue
        if k.startswith("train."):
            key = k[len("train."):]
            over["train"]["sigma_scale" if key == "sigma_scale_train" else key] = v
        else:
            over[k] = v
    return over


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config: {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be a JSON object")
    return obj


def _thread_limit():
    raw = os.environ.get("TONEL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TONEL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"TONEL_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(_load_config_file(args.config), _overrides(args))
        limiter = _thread_limit()
        try:
            COMMANDS[args.command](cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"tonel: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"tonel: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"tonel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TonelError as exc:
        print(f"tonel: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
