"""Command-line pipeline: corpus generation, feature extraction, model
training, enrollment, scoring, evaluation, and full protocol runs.

Exit codes: 0 success, 2 validation failure, 3 upstream-artifact error.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import backend, gmm, ivector, xvector
from .config import config_to_text, load_config, load_synth_spec
from .dataio import (
    SynthSpec,
    generate_synthetic_corpus,
    load_manifest,
    read_recording,
    save_manifest,
    write_recording,
)
from .errors import ArtifactError, ValidationError
from .evaluation import ScoreTable, evaluate_table
from .features import read_features, write_features
from .pipeline import (
    Corpus,
    IvectorSystem,
    IxvectorSystem,
    UbmGmmSystem,
    XvectorSystem,
    build_feature_corpus,
    canonical_system,
)
from .protocols import PROTOCOL_NAMES, run_protocol
from .report import write_report

log = logging.getLogger("eegid")

FEATURE_INDEX = "features_index.csv"


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# corpus / feature helpers


def _load_corpus(corpus_dir) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest = load_manifest(corpus_dir / "manifest.csv")
    recordings = [read_recording(corpus_dir / row.path) for row in manifest.rows]
    return Corpus(recordings, manifest)


def _write_feature_index(rows, path, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(["subject_id", "session_id", "task_id", "start_sample", "split", "path"])
        writer.writerows(rows)


def _read_feature_index(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"feature index not found: {path}")
    config_hash = ""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        first = f.readline()
        if first.startswith("# config_hash="):
            config_hash = first.strip().split("=", 1)[1]
        else:
            f.seek(0)
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["subject_id", "session_id", "task_id", "start_sample", "split", "path"]:
            raise ValidationError(f"{path}: not a feature index")
        for fields in reader:
            rows.append(dict(zip(header, fields)))
    return rows, config_hash


def _load_split_features(index_path, split):
    rows, config_hash = _read_feature_index(index_path)
    base = Path(index_path).parent
    feats = [read_features(base / r["path"]) for r in rows if split in (None, r["split"])]
    if not feats:
        raise ValidationError(f"no segments in split {split!r}")
    return feats, config_hash


def _check_hashes(force: bool, *hashes) -> None:
    distinct = {h for h in hashes if h}
    if len(distinct) > 1 and not force:
        raise ArtifactError(
            f"inputs were produced under different configs ({', '.join(sorted(distinct))}); "
            "pass --force to mix them"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    spec = load_synth_spec(args.config) if args.config else SynthSpec()
    recordings, manifest = generate_synthetic_corpus(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec, row in zip(recordings, manifest.rows):
        write_recording(rec, out / row.path)
    save_manifest(manifest, out / "manifest.csv")
    print(f"wrote {len(recordings)} recordings to {out}")
    return 0


def cmd_extract_features(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    corpus = _load_corpus(args.corpus)
    fc = build_feature_corpus(corpus, cfg, duration_s=args.duration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for feat in fc.segments:
        name = f"{feat.subject_id}_{feat.session_id}_{feat.task_id}_{feat.start_sample:08d}.mcft"
        write_features(feat, out / name)
        rows.append(
            [feat.subject_id, feat.session_id, feat.task_id, feat.start_sample,
             fc.split_map[feat.key], name]
        )
    _write_feature_index(rows, out / FEATURE_INDEX, cfg.hash())
    print(f"wrote {len(rows)} feature segments to {out}")
    return 0


def cmd_train_ubm(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    feats, feat_hash = _load_split_features(args.features, "train")
    _check_hashes(args.force, feat_hash, cfg.hash())
    system = canonical_system(args.system)
    if system == "ivector-concat":
        feats = [ivector.variant_feature_concat(f) for f in feats]
    mixtures = args.mixtures or {
        "ubm-gmm": cfg.ubm_gmm_mixtures,
        "ivector-baseline": cfg.baseline_ivector_mixtures,
        "ivector-modified": cfg.modified_ivector_mixtures,
        "ivector-concat": cfg.concat_ivector_mixtures,
    }.get(system)
    if mixtures is None:
        raise ValidationError(f"no UBM role for system {system!r}")
    frames = np.concatenate([f.frames_matrix() for f in feats], axis=0)
    ubm = gmm.train_ubm(frames, mixtures, cfg.ubm_max_iters, cfg.ubm_tol, seed=cfg.seed + 11)
    gmm.write_ubm(ubm, args.out, config_hash=cfg.hash())
    print(f"trained {mixtures}-mixture UBM on {frames.shape[0]} frames -> {args.out}")
    return 0


def cmd_train_tmatrix(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    feats, feat_hash = _load_split_features(args.features, "train")
    ubm, prov = gmm.read_ubm(args.ubm)
    _check_hashes(args.force, feat_hash, prov.get("config_hash", ""))
    if args.concat:
        feats = [ivector.variant_feature_concat(f) for f in feats]
    stats = [ivector.accumulate_stats(ubm, f, args.mode) for f in feats]
    tv = ivector.train_tmatrix(ubm, stats, args.rank or cfg.ivector_rank,
                               cfg.tmatrix_iters, seed=cfg.seed + 23)
    ivector.write_tmatrix(tv, args.out, config_hash=cfg.hash())
    print(f"trained {tv.supervector_dim}x{tv.rank} total-variability matrix -> {args.out}")
    return 0


def cmd_train_xvector(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    train_feats, feat_hash = _load_split_features(args.features, "train")
    try:
        val_feats, _ = _load_split_features(args.features, "validation")
    except ValidationError:
        val_feats = []
    _check_hashes(args.force, feat_hash, cfg.hash())
    subjects = sorted({f.subject_id for f in train_feats})
    net = xvector.init_net(
        args.mode, train_feats[0].n_bins, cfg.xvector_hidden1, cfg.xvector_hidden2,
        cfg.embedding_dim, subjects, train_feats[0].n_channels, seed=cfg.seed + 37,
    )
    train_cfg = xvector.TrainConfig(
        learning_rate=cfg.learning_rate, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
        epsilon=cfg.adam_epsilon, batch_size=cfg.batch_size, epochs=cfg.epochs,
        patience=cfg.early_stop_patience, seed=cfg.seed + 41,
    )
    net = xvector.train(net, train_feats, val_feats, train_cfg)
    xvector.write_xvec(net, args.out, cfg=train_cfg, config_hash=cfg.hash())
    print(f"trained {args.mode} x-vector network on {len(train_feats)} segments -> {args.out}")
    return 0


def _assemble_system(args, cfg):
    """Build a scoring-ready system object from model files."""
    name = canonical_system(args.system)
    hashes = []

    def load_lda(path):
        lda, prov = backend.read_lda(path)
        hashes.append(prov.get("config_hash", ""))
        return lda

    if name == "ubm-gmm":
        system = UbmGmmSystem(cfg)
        system.ubm, prov = gmm.read_ubm(args.ubm)
        hashes.append(prov.get("config_hash", ""))
    elif name in ("ivector-baseline", "ivector-modified", "ivector-concat"):
        system = IvectorSystem(
            cfg,
            ivector.MODIFIED if name == "ivector-modified" else ivector.BASELINE,
            concat=name == "ivector-concat",
        )
        system.ubm, prov = gmm.read_ubm(args.ubm)
        hashes.append(prov.get("config_hash", ""))
        system.tv, prov = ivector.read_tmatrix(args.tmatrix)
        hashes.append(prov.get("config_hash", ""))
        ivector.check_tmatrix_ubm(system.tv, system.ubm)
        if getattr(args, "lda", None):
            system.lda = load_lda(args.lda)
    elif name in ("xvector-baseline", "xvector-modified"):
        system = XvectorSystem(
            cfg, xvector.MODIFIED if name == "xvector-modified" else xvector.BASELINE
        )
        system.net, prov = xvector.read_xvec(args.xvector)
        hashes.append(prov.get("config_hash", ""))
        if getattr(args, "lda", None):
            system.lda = load_lda(args.lda)
    elif name == "ixvector":
        iv = IvectorSystem(cfg, ivector.MODIFIED)
        iv.ubm, prov = gmm.read_ubm(args.ubm)
        hashes.append(prov.get("config_hash", ""))
        iv.tv, prov = ivector.read_tmatrix(args.tmatrix)
        hashes.append(prov.get("config_hash", ""))
        ivector.check_tmatrix_ubm(iv.tv, iv.ubm)
        xv = XvectorSystem(cfg, xvector.MODIFIED)
        xv.net, prov = xvector.read_xvec(args.xvector)
        hashes.append(prov.get("config_hash", ""))
        if getattr(args, "lda_iv", None):
            iv.lda = load_lda(args.lda_iv)
        if getattr(args, "lda_xv", None):
            xv.lda = load_lda(args.lda_xv)
        system = IxvectorSystem(cfg, iv, xv)
    else:
        raise ValidationError(
            f"system {name!r} is only available through run-protocol (per-channel models)"
        )
    return system, hashes


def cmd_fit_lda(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    feats, feat_hash = _load_split_features(args.features, "train")
    name = canonical_system(args.system)
    if name == "ixvector":
        raise ValidationError("fit LDA for the i-vector and x-vector parts separately")
    system, hashes = _assemble_system(args, cfg)
    _check_hashes(args.force, feat_hash, *hashes)
    if isinstance(system, IvectorSystem):
        raw = [system._raw_embedding(f) for f in feats]
    else:
        raw = [xvector.extract_xvector(system.net, f) for f in feats]
    n_subjects = len({e.subject_id for e in raw})
    dim = cfg.lda_dim if cfg.lda_dim is not None else len(raw[0].v)
    lda = backend.fit_lda(raw, min(dim, n_subjects - 1))
    backend.write_lda(lda, args.out, config_hash=cfg.hash())
    print(f"fit LDA {lda.in_dim}->{lda.out_dim} on {len(raw)} embeddings -> {args.out}")
    return 0


def cmd_enroll(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    feats, feat_hash = _load_split_features(args.features, args.split)
    system, hashes = _assemble_system(args, cfg)
    _check_hashes(args.force, feat_hash, *hashes)
    system.enroll_subjects(feats)
    if isinstance(system, UbmGmmSystem):
        gmm.write_adapted_models(
            [system.models[s] for s in sorted(system.models)], args.out, config_hash=cfg.hash()
        )
    else:
        backend.write_embeddings_csv([system.refs[s] for s in sorted(system.refs)], args.out)
    print(f"enrolled {len(feats)} segments -> {args.out}")
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    feats, feat_hash = _load_split_features(args.features, args.split)
    system, hashes = _assemble_system(args, cfg)
    _check_hashes(args.force, feat_hash, *hashes)
    if isinstance(system, UbmGmmSystem):
        models, prov = gmm.read_adapted_models(args.refs, system.ubm)
        system.models = {m.subject_id: m for m in models}
    else:
        refs = backend.read_embeddings_csv(args.refs)
        system.refs = {r.subject_id: r for r in refs}
    table = system.score_table(feats)
    write_scores_csv(table, args.out, config_hash=cfg.hash())
    print(f"scored {table.n_rows} segments against {len(table.subjects)} subjects -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    tables, hashes = zip(*[read_scores_csv(p) for p in args.scores])
    _check_hashes(args.force, *hashes)
    names = list(args.system or [])
    names += [f"system-{i}" for i in range(len(names), len(tables))]
    reports = [evaluate_table(t, args.protocol, s, 0) for t, s in zip(tables, names)]
    paths = write_report(reports, args.out_dir, prefix=args.prefix)
    print(format_paths(paths))
    for r in reports:
        print(f"{r.protocol} / {r.system}: accuracy={100 * r.rank1:.2f}% eer={100 * r.eer:.2f}%")
    return 0


def cmd_run_protocol(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    corpus = _load_corpus(args.corpus)
    options = {}
    if args.protocol == "channel-subsets":
        if not args.subsets:
            raise ValidationError("channel-subsets needs --subsets, e.g. '0,1,2;3,4,5'")
        options["subsets"] = [
            tuple(int(c) for c in group.split(",")) for group in args.subsets.split(";")
        ]
    if args.protocol == "segment-length" and args.durations:
        options["durations"] = tuple(float(d) for d in args.durations.split(","))
    systems = [canonical_system(s) for s in args.systems.split(",")]
    reports = run_protocol(args.protocol, systems, corpus, cfg, seed=cfg.seed, **options)
    paths = write_report(reports, args.out_dir, prefix=args.prefix)
    print(format_paths(paths))
    for r in reports:
        print(f"{r.protocol} / {r.system}: accuracy={100 * r.rank1:.2f}% eer={100 * r.eer:.2f}%")
    return 0


def cmd_show_config(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    print(config_to_text(cfg), end="")
    print(f"# config hash: {cfg.hash()}")
    return 0


def format_paths(paths) -> str:
    lines = [f"report CSV:   {paths['csv']}", f"report table: {paths['txt']}"]
    for fig in paths["figures"]:
        lines.append(f"figure:       {fig}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# score table CSV


def write_scores_csv(table: ScoreTable, path, config_hash: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(["subject_id", "session_id", "task_id", "start_sample", "true"] + list(table.subjects))
        keys = table.row_keys or [("", "", "", 0)] * table.n_rows
        for i, key in enumerate(keys):
            writer.writerow(
                list(key[:3])
                + [key[3], table.true_labels[i]]
                + [repr(float(x)) for x in table.scores[i]]
            )


def read_scores_csv(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"scores file not found: {path}")
    config_hash = ""
    with open(path, newline="", encoding="utf-8") as f:
        first = f.readline()
        if first.startswith("# config_hash="):
            config_hash = first.strip().split("=", 1)[1]
        else:
            f.seek(0)
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:5] != ["subject_id", "session_id", "task_id", "start_sample", "true"]:
            raise ValidationError(f"{path}: not a scores CSV")
        subjects = header[5:]
        rows, labels, keys = [], [], []
        for fields in reader:
            keys.append((fields[0], fields[1], fields[2], int(fields[3])))
            labels.append(fields[4])
            rows.append([float(x) for x in fields[5:]])
    return ScoreTable(subjects, np.array(rows), labels, keys), config_hash


# ---------------------------------------------------------------------------
# argument parsing


def _config_overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None and args.command != "gen-synth":
        out["seed"] = args.seed
    for name in ("segment_duration_s", "channels", "lda_dim"):
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eegid",
        description="Subspace person recognition from multichannel signals",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI config file; flags override it")
            p.add_argument("--seed", type=int, help="base seed override")
            p.add_argument("--force", action="store_true", help="allow mixed config hashes")

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--config", help="INI file with a [synth] section")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("extract-features", help="segment recordings and compute PSD features")
    common(p)
    p.add_argument("--corpus", required=True, help="directory with manifest.csv and recordings")
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, help="segment length override (s)")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-ubm", help="train a UBM on train-split frames")
    common(p)
    p.add_argument("--features", required=True, help="features_index.csv path")
    p.add_argument("--system", default="ivector-modified")
    p.add_argument("--mixtures", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ubm)

    p = sub.add_parser("train-tmatrix", help="train the total-variability subspace")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--mode", choices=["baseline", "modified"], default="modified")
    p.add_argument("--concat", action="store_true", help="concatenate channels into frames first")
    p.add_argument("--rank", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tmatrix)

    p = sub.add_parser("train-xvector", help="train the statistics-pooling network")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--mode", choices=["baseline", "modified"], default="modified")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_xvector)

    p = sub.add_parser("fit-lda", help="fit the LDA projection for one system")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--ubm")
    p.add_argument("--tmatrix")
    p.add_argument("--xvector")
    p.add_argument("--lda-dim", type=int, dest="lda_dim")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_lda)

    p = sub.add_parser("enroll", help="build per-subject references")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--system", required=True)
    p.add_argument("--ubm")
    p.add_argument("--tmatrix")
    p.add_argument("--xvector")
    p.add_argument("--lda")
    p.add_argument("--lda-iv", dest="lda_iv")
    p.add_argument("--lda-xv", dest="lda_xv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("score", help="score segments against references")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--system", required=True)
    p.add_argument("--ubm")
    p.add_argument("--tmatrix")
    p.add_argument("--xvector")
    p.add_argument("--lda")
    p.add_argument("--lda-iv", dest="lda_iv")
    p.add_argument("--lda-xv", dest="lda_xv")
    p.add_argument("--refs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="compute accuracy/EER from score tables")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--system", nargs="*")
    p.add_argument("--protocol", default="session-disjoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="report")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-protocol", help="end-to-end protocol run")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--protocol", choices=list(PROTOCOL_NAMES), default="session-disjoint")
    p.add_argument("--systems", default="ixvector", help="comma-separated system names")
    p.add_argument("--subsets", help="channel subsets, ';'-separated groups of ','-separated indices")
    p.add_argument("--durations", help="comma-separated test segment lengths (s)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="report")
    p.set_defaults(func=cmd_run_protocol)

    p = sub.add_parser("show-config", help="print the resolved configuration")
    common(p)
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        return _fail(2, str(exc))
    except (ArtifactError, FileNotFoundError) as exc:
        return _fail(3, str(exc))


if __name__ == "__main__":
    sys.exit(main())
