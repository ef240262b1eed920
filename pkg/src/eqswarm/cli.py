"""Command-line entry point: ``eqswarm <command> ...``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
Set ``EQSWARM_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import os

if "EQSWARM_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["EQSWARM_THREADS"])

import argparse
import csv
import io
import json
import logging
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cloud import DomainError, TypedPointCloud
from .config import ConfigError, RunConfig, dump_config, load_config
from .crystal import (EMBEDDING_KINDS, CellError, read_records, regression_benchmark,
                      standardize_orientation, synth_crystal_dataset, write_records)
from .data import (XYZFormatError, load_dataset, strip_hydrogens, synth_dataset, synth_molecule,
                   write_dataset, write_xyz)
from .matching import agglomerative_cluster, match_dataset, reports_to_csv
from .model import Embedding
from .training import (Checkpoint, CheckpointFormatError, DivergenceError, metrics_to_csv,
                       train_autoencoder)

log = logging.getLogger("eqswarm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

EMB_MAGIC = b"MO3EMB"
EMB_VERSION = 1


class UsageError(Exception):
    pass


# -- embedding files ------------------------------------------------------------

def write_embeddings(path, embs, n_atoms, cfg_hash: str = "") -> Path:
    k, ks = embs[0].vectors.shape[0], embs[0].scalars.shape[0]
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(struct.pack("<IIII", EMB_VERSION, len(embs), k, ks))
    raw = cfg_hash.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for e, n in zip(embs, n_atoms):
        buf.write(struct.pack("<I", int(n)))
        buf.write(np.ascontiguousarray(e.vectors, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(e.scalars, dtype="<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def read_embeddings(path) -> tuple[list[Embedding], list[int]]:
    blob = Path(path).read_bytes()
    f = io.BytesIO(blob)

    def read(n):
        chunk = f.read(n)
        if len(chunk) != n:
            raise CheckpointFormatError(f"{path}: truncated embedding file")
        return chunk

    if read(len(EMB_MAGIC)) != EMB_MAGIC:
        raise CheckpointFormatError(f"{path}: not an embedding file (bad magic)")
    version, count, k, ks = struct.unpack("<IIII", read(16))
    if version != EMB_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported embedding format version {version}")
    (hlen,) = struct.unpack("<I", read(4))
    read(hlen)
    embs, counts = [], []
    for _ in range(count):
        (n,) = struct.unpack("<I", read(4))
        vec = np.frombuffer(read(24 * k), dtype="<f8").reshape(k, 3).astype(np.float64)
        sca = np.frombuffer(read(8 * ks), dtype="<f8").astype(np.float64)
        embs.append(Embedding(vec, sca))
        counts.append(n)
    if f.read(1):
        raise CheckpointFormatError(f"{path}: trailing bytes after {count} embeddings")
    return embs, counts


# -- helpers --------------------------------------------------------------------

def _random_orthogonal(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return -q if rng.uniform() < 0.5 else q


def _conform(clouds, num_types: int) -> list[TypedPointCloud]:
    top = max(int(c.types.max()) for c in clouds) + 1
    if top > num_types:
        raise DomainError(f"data uses n_c={top} atom types but the checkpoint model has n_c={num_types}")
    return [TypedPointCloud(c.positions, c.types, num_types) for c in clouds]


def _training_sets(cfg: RunConfig, strip: bool):
    if cfg.data.path:
        train = load_dataset(cfg.data.path)
    else:
        train = synth_dataset(cfg.synth, cfg.data.n_train)
    if cfg.data.eval_path:
        evals = load_dataset(cfg.data.eval_path)
    elif cfg.data.n_eval > 0:
        evals = synth_dataset(replace(cfg.synth, seed=cfg.synth.seed + 1), cfg.data.n_eval)
    else:
        evals = list(train)
    if strip:
        def heavy(clouds):
            out = []
            for c in clouds:
                try:
                    out.append(strip_hydrogens(c))
                except DomainError:
                    log.info("skipping hydrogen-only molecule")
            return out
        train, evals = heavy(train), heavy(evals)
    if not train:
        raise DomainError("training set is empty")
    return train, evals or list(train)


# -- commands -------------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    if args.n is None or args.n < 1:
        raise UsageError("--n must be a positive integer")
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    clouds = synth_dataset(synth, args.n)
    path = write_dataset(clouds, args.out, synth, cfg.hash())
    print(f"wrote {args.n} molecules and {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, evals = _training_sets(cfg, args.strip_hydrogens)
    model_cfg = cfg.model
    if not cfg.data.path:
        model_cfg = replace(model_cfg, num_types=cfg.synth.num_types)
    train, evals = _conform(train, model_cfg.num_types), _conform(evals, model_cfg.num_types)
    (out / "config.yaml").write_text(dump_config(cfg))
    h = cfg.hash()
    try:
        res = train_autoencoder(train, cfg.train, model_cfg, cfg.loss, evals, cfg.synth,
                                checkpoint_path=out / "best.ckpt")
    except DivergenceError as exc:
        if exc.last_good is not None:
            exc.last_good.save(out / "best.ckpt")
        raise
    res.final.meta["config_hash"] = h
    res.final.save(out / "final.ckpt")
    (out / "metrics.csv").write_text(metrics_to_csv(res.history, h))
    print(f"stop={res.stop_reason} steps={len(res.history)} sigma={res.loss_config.sigma:.6g} "
          f"anneal_events={len(res.anneal_events)}")
    return EXIT_OK


def _hist_rows(reports, width: float = 0.025, top: float = 0.5):
    edges = np.arange(0.0, top + width / 2, width)
    means = np.array([r.mean_deviation for r in reports])
    finite = means[np.isfinite(means)]
    counts, _ = np.histogram(np.clip(finite, 0, top - 1e-12), bins=edges)
    rows = [(f"{lo:.3f}", f"{hi:.3f}", int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    rows.append(("unmatched", "", int(np.sum(~np.isfinite(means)))))
    return rows


def cmd_eval_recon(args, cfg: RunConfig) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build_model()
    clouds = _conform(load_dataset(args.data), model.cfg.num_types)
    swarms = []
    for lo in range(0, len(clouds), 64):
        swarms += model.reconstruct(clouds[lo:lo + 64])
    result = match_dataset(clouds, swarms)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    (out / "match_reports.csv").write_text(f"# config_hash={h}\n" + reports_to_csv(result.reports))
    summary = {"config_hash": h, "n_molecules": len(clouds), "atomwise": result.atomwise,
               "molwise": result.molwise, "matched_molecule_fraction": result.matched_molecule_fraction,
               "matched_atom_fraction": result.matched_atom_fraction}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["bin_lo", "bin_hi", "count"])
    wr.writerows(_hist_rows(result.reports))
    (out / "deviation_histogram.csv").write_text(f"# config_hash={h}\n" + buf.getvalue())
    print(json.dumps(summary))
    return EXIT_OK


def cmd_encode(args, cfg: RunConfig) -> int:
    model = Checkpoint.load(args.ckpt).build_model()
    clouds = _conform(load_dataset(args.inp), model.cfg.num_types)
    embs = model.encode(clouds)
    write_embeddings(args.out, embs, [c.n_atoms for c in clouds], cfg.hash())
    if args.verify_equivariance:
        rot = _random_orthogonal(np.random.default_rng(args.seed))
        rotated = model.encode([c.rotated(rot) for c in clouds])
        dev = max(float(np.abs(r.vectors - e.vectors @ rot.T).max()) for e, r in zip(embs, rotated))
        scale = max(float(np.abs(e.vectors).max()) for e in embs) or 1.0
        print(f"equivariance max relative deviation {dev / scale:.3e}")
        if dev / scale > 1e-8:
            return EXIT_NUMERIC
    print(f"encoded {len(embs)} molecules to {args.out}")
    return EXIT_OK


def cmd_decode(args, cfg: RunConfig) -> int:
    model = Checkpoint.load(args.ckpt).build_model()
    embs, counts = read_embeddings(args.inp)
    if args.n_atoms is not None:
        counts = [args.n_atoms] * len(embs)
    swarms = model.decode(embs, counts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(swarms):
        pseudo = TypedPointCloud(s.positions, np.argmax(s.type_probs, axis=1), s.num_types)
        extra = np.concatenate([s.weights[:, None], s.type_probs], axis=1)
        (out / f"swarm_{k:06d}.xyz").write_text(
            write_xyz(pseudo, f"swarm n_ref={s.n_ref} columns: symbol x y z weight type_probs", extra=extra))
        atoms = agglomerative_cluster(s)
        syn = TypedPointCloud(np.array([a.position for a in atoms]), [a.type_index for a in atoms], s.num_types)
        (out / f"atoms_{k:06d}.xyz").write_text(
            write_xyz(syn, "clustered synthetic atoms; extra column: mass",
                      extra=np.array([a.mass for a in atoms])))
    if args.verify_equivariance:
        rot = _random_orthogonal(np.random.default_rng(args.seed))
        rs = model.decode([e.rotated(rot) for e in embs], counts)
        dev = max(float(np.abs(b.positions - a.positions @ rot.T).max()) for a, b in zip(swarms, rs))
        print(f"decoder equivariance max deviation {dev:.3e} Å")
        if dev > 1e-8:
            return EXIT_NUMERIC
    print(f"decoded {len(swarms)} swarms into {out}")
    return EXIT_OK


def _crystal_molecules(records, cfg: RunConfig):
    mols = {}
    for r in records:
        if r.base not in mols:
            mols[r.base] = standardize_orientation(synth_molecule(cfg.crystal.synth.synth, r.mol_seed))[0]
    return mols


def cmd_crystal_synth(args, cfg: RunConfig) -> int:
    cc = cfg.crystal
    records, _ = synth_crystal_dataset(cc.n_base, cc.seed, cc.synth)
    path = Path(args.out or cc.dataset or Path(cfg.out) / "crystals.jsonl")
    write_records(records, path, cfg.hash())
    print(f"wrote {len(records)} crystal records to {path}")
    return EXIT_OK


def cmd_crystal_train(args, cfg: RunConfig) -> int:
    cc = cfg.crystal
    path = args.data or cc.dataset or str(Path(cfg.out) / "crystals.jsonl")
    records = read_records(path)
    if not records:
        raise DomainError(f"{path}: no crystal records")
    ckpt = args.ckpt or cc.checkpoint
    kinds = list(EMBEDDING_KINDS)
    model = None
    if "autoencoder" in kinds:
        if not ckpt:
            raise DomainError("the autoencoder embedding needs --ckpt (or crystal.checkpoint)")
        model = Checkpoint.load(ckpt).build_model()
    mols = _crystal_molecules(records, cfg)
    if model is not None:
        mols = {b: TypedPointCloud(m.positions, m.types, model.cfg.num_types) for b, m in mols.items()}
    results = regression_benchmark(records, mols, model, cc.target, cc.regression, kinds)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    lines = [f"# config_hash={h}", "kind,mae,r,n_train,n_test"]
    lines += [f"{r.kind},{r.mae!r},{r.r!r},{r.n_train},{r.n_test}" for r in results]
    (out / "crystal_regression.csv").write_text("\n".join(lines) + "\n")
    parity = [f"# config_hash={h}", "kind,true,pred"]
    for r in results:
        parity += [f"{r.kind},{t!r},{p!r}" for t, p in zip(r.test_true, r.test_pred)]
    (out / "crystal_parity.csv").write_text("\n".join(parity) + "\n")
    for r in results:
        print(f"{r.kind:12s} MAE={r.mae:.4g} R={r.r:.4f}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqswarm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-key override, e.g. train.epochs=5")
        return sp

    sp = common(sub.add_parser("synth-data", help="write synthetic molecules as XYZ + manifest"))
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_data)

    sp = common(sub.add_parser("train", help="train the autoencoder"), config_required=True)
    sp.add_argument("--strip-hydrogens", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval-recon", help="match reconstructions against inputs"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval_recon)

    sp = common(sub.add_parser("encode", help="molecules -> embedding file"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--verify-equivariance", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_encode)

    sp = common(sub.add_parser("decode", help="embedding file -> swarms and synthetic atoms"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-atoms", type=int)
    sp.add_argument("--verify-equivariance", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_decode)

    sp = common(sub.add_parser("crystal-synth", help="synthesize LJ-optimized crystals"), config_required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_crystal_synth)

    sp = common(sub.add_parser("crystal-train", help="energy regression per embedding kind"),
                config_required=True)
    sp.add_argument("--data")
    sp.add_argument("--ckpt")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_crystal_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"eqswarm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"eqswarm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, CellError, XYZFormatError, CheckpointFormatError, OSError, KeyError) as exc:
        print(f"eqswarm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
