"""Command-line entry point ``mtad``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ConfigFileError, RunConfig, load_config, parse_config
from .data import load_image, load_manifest_images, make_toy_dataset, read_manifest
from .evaluation import (ABLATION_ROWS, CHECKPOINT_DIR, EvalReport, ablation_table, ensure_tables, evaluate_run,
                         parse_ablation_rows, row_config, write_table)
from .moe import ALL_TASKS
from .pseudo import ingest_external_generated, synthesize_corpus
from .scoring import ScoringOptions, anomaly_map, fuse, save_map, score_images
from .train import prepare_data, train

log = logging.getLogger("multitask_ad")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _seeds(text: str | None, cfg: RunConfig) -> list[int]:
    if not text:
        return list(cfg.seeds)
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigFileError("--seeds", f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> RunConfig:
    if args.config is None:
        cfg = parse_config({})
    else:
        cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = str(Path(args.out).resolve())
    return cfg


def _require(path: str | None, field: str) -> Path:
    if not path:
        raise ConfigFileError(field, "dataset path not set")
    if not Path(path).exists():
        raise ConfigFileError(field, f"dataset path does not exist: {path}")
    return Path(path)


def run_dir_for(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / cfg.fingerprint() / str(seed)


def _trained(run_dir: Path, cfg: RunConfig) -> bool:
    cfg_file = run_dir / "config.json"
    return ((run_dir / CHECKPOINT_DIR / "model.json").exists() and cfg_file.exists()
            and RunConfig.model_validate_json(cfg_file.read_text()).fingerprint() == cfg.fingerprint())


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    cfg = _config(args)
    _require(cfg.data.train, "data.train")
    seeds = _seeds(args.seeds, cfg)
    data = prepare_data(cfg)
    for seed in seeds:
        out = run_dir_for(cfg, seed)
        train(cfg, seed, out, data)
        print(out)
    return EXIT_OK


def _evaluate(cfg: RunConfig, seeds, maps: bool, test_path: str | None = None, stem: str = "report") -> EvalReport:
    test = read_manifest(_require(test_path or cfg.data.test, "data.test"), "test")
    runs = []
    for seed in seeds:
        rd = run_dir_for(cfg, seed)
        if not (rd / CHECKPOINT_DIR / "model.json").exists():
            raise FileNotFoundError(f"no checkpoint for seed {seed} under {rd}")
        runs.append(evaluate_run(rd, cfg, test, seed, rd / "maps" if maps else None))
    report = EvalReport.from_runs(cfg.fingerprint(), runs)
    report.write(Path(cfg.output_dir) / cfg.fingerprint(), stem)
    return report


def cmd_eval(args) -> int:
    cfg = _config(args)
    report = _evaluate(cfg, _seeds(args.seeds, cfg), args.maps, args.test)
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _require(cfg.data.train, "data.train")
    if args.matrix:
        try:
            rows = parse_ablation_rows(json.loads(Path(args.matrix).read_text()))
        except (ValueError, KeyError) as exc:
            raise ConfigFileError("--matrix", str(exc)) from None
    else:
        rows = list(ABLATION_ROWS)
    seed = _seeds(args.seeds, cfg)[0]
    results = []
    for flags in rows:
        rcfg = row_config(cfg, flags)
        rd = run_dir_for(rcfg, seed)
        if _trained(rd, rcfg):
            log.info("reusing trained run %s", rd)
        else:
            train(rcfg, seed, rd)
        # per-row report under its own stem so multi-seed reports of the same config survive
        results.append(_evaluate(rcfg, [seed], args.maps, stem=f"ablation_seed{seed}").mean)
    out = Path(cfg.output_dir) / f"ablation_{cfg.fingerprint()}_seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(rows, results)
    write_table(out / "ablation.csv", out / "ablation.txt", table, f"task ablation, seed {seed}")
    print((out / "ablation.txt").read_text(), end="")
    return EXIT_OK


def cmd_toydata(args) -> int:
    cfg = _config(args)
    toy = cfg.data.toy
    out = Path(args.out or "toy_data")
    paths = make_toy_dataset(out, toy.build(), seed=args.seed if args.seed is not None else toy.seed)
    for split, p in paths.items():
        print(f"{split}\t{p}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    manifest = read_manifest(_require(cfg.data.train, "data.train"), "train")
    size = cfg.encoder.image_size
    images = load_manifest_images(manifest, size)
    names = [Path(r.path).stem for r in manifest.records]
    ext_dir = args.external_gen or cfg.pseudo.external_gen_dir
    external = ingest_external_generated(ext_dir, names, size) if ext_dir else None
    target = args.out or cfg.pseudo.corpus_dir or (Path(cfg.output_dir) / "pseudo")
    n = synthesize_corpus(images, names, target, cfg.pseudo.seed, cfg.pseudo.augment(), cfg.pseudo.ellipse(size),
                          external)
    print(f"{n} images written to {target}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.checkpoint) if args.checkpoint else run_dir_for(cfg, _seeds(args.seeds, cfg)[0])
    ckpt = run_dir / CHECKPOINT_DIR if (run_dir / CHECKPOINT_DIR).exists() else run_dir
    model = load_checkpoint(ckpt)
    opts = ScoringOptions.from_config(cfg)
    tables, weights = ensure_tables(ckpt, model, cfg, opts)
    image = load_image(args.image, cfg.encoder.image_size)
    scored = score_images(model, image[None], opts)
    result = {"image": str(args.image), "fused": fuse(scored.raw[0], tables, weights),
              "scores": {t.label: float(scored.scores[0][int(t)]) for t in ALL_TASKS}}
    if args.maps:
        enc = model.enc_cfg
        amap = anomaly_map(scored.mim_residual[0], scored.demixup_probs[0], enc.grid, enc.patch_size)
        target = Path(args.maps)
        save_map(target, amap, image, target.with_name(target.stem + ".overlay.png"))
        result["map"] = str(target)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtad", description="Multi-task anomaly detection on image patches.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True, out=True):
        p.add_argument("--config", help="run configuration JSON")
        if seeds:
            p.add_argument("--seeds", help="comma-separated seeds, overriding the config")
        if out:
            p.add_argument("--out", help="output root, overriding output_dir")
        return p

    p = common(sub.add_parser("train", help="train one model per seed"))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score the test split and write AUROC reports"))
    p.add_argument("--maps", action="store_true", help="also write anomaly maps")
    p.add_argument("--test", help="test manifest, overriding data.test")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="train and evaluate task-flag combinations"))
    p.add_argument("--matrix", help="JSON list of rows; defaults to the nine standard rows")
    p.add_argument("--maps", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("toydata", help="write the procedural toy dataset"), seeds=False)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_toydata)

    p = common(sub.add_parser("synth", help="write the pseudo-anomaly corpus"), seeds=False)
    p.add_argument("--external-gen", help="directory of externally generated <name>.gen.<ext> images")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("score", help="fused score and anomaly map for one image"), out=False)
    p.add_argument("image")
    p.add_argument("--checkpoint", help="run directory or checkpoint directory")
    p.add_argument("--maps", help="write the anomaly map PNG here")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
