"""Thin command-line client for the simreid service.

Every subcommand resolves a RunConfig (defaults <- --config file <-
flags), sends one request to the service, and writes the returned
artifacts plus a fully resolved ``run_manifest.ini`` into the output
directory.  The engine itself runs server-side; start one with
``simreid serve`` (or any ASGI runner pointing at simreid.service.app).

Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import base64
import os
import sys
from pathlib import Path

import httpx

from . import config as config_mod
from .config import ConfigError, RunConfig

DEFAULT_URL = "http://127.0.0.1:8000"
COMMANDS = ("synth", "split", "train", "eval", "census", "gradcheck", "bench")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--url", default=None, help="service base URL (or SIMREID_URL)")
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--out", dest="out_dir", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simreid")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the service (uvicorn)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    p = sub.add_parser("synth", help="write a synthetic inline-feature manifest")
    _add_common(p)
    p.add_argument("--synth-individuals", type=int, default=None)
    p.add_argument("--synth-images", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--cluster-spread", type=float, default=None)
    p.add_argument("--inter-cluster-distance", type=float, default=None)
    p.add_argument("--species-tag", default=None)

    p = sub.add_parser("split", help="write a five-fold split plan")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--train-ratio", type=float, default=None)
    p.add_argument("--val-ratio", type=float, default=None)
    p.add_argument("--test-ratio", type=float, default=None)
    p.add_argument("--folds", type=int, default=None)

    def add_train_flags(p):
        p.add_argument("--dataset", default=None)
        p.add_argument("--species-tag", default=None)
        p.add_argument("--image-root", default=None)
        p.add_argument("--fold", type=int, default=None)
        p.add_argument("--loss-kind", choices=["siamese", "triplet"], default=None)
        p.add_argument("--margin", type=float, default=None)
        p.add_argument("--hidden-dims", default=None, help="comma list, e.g. 64,32")
        p.add_argument("--embedding-dim", type=int, default=None)
        p.add_argument("--l2-normalize", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--decay-per-epoch", type=float, default=None)
        p.add_argument("--decay-mode", choices=["lr", "l2"], default=None)
        p.add_argument("--individuals-per-batch", type=int, default=None)
        p.add_argument("--images-per-individual", type=int, default=None)
        p.add_argument("--train-ratio", type=float, default=None)
        p.add_argument("--val-ratio", type=float, default=None)
        p.add_argument("--test-ratio", type=float, default=None)
        p.add_argument("--folds", type=int, default=None)
        p.add_argument("--augment-enabled", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("train", help="train one fold, write checkpoint + loss log")
    _add_common(p)
    add_train_flags(p)
    p.add_argument("--early-stop-patience", type=int, default=None)

    p = sub.add_parser("eval", help="five-fold mAP protocol (or one checkpoint)")
    _add_common(p)
    add_train_flags(p)
    p.add_argument("--checkpoint", default=None, help="evaluate this net instead of training per fold")
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--ap-mode", choices=["ap", "hit"], default=None)

    p = sub.add_parser("census", help="open-set census over a sighting manifest")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="sighting stream manifest")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--census-threshold", type=float, default=None)
    p.add_argument("--calibrate-dataset", default=None)
    p.add_argument("--max-exemplars", type=int, default=None)
    p.add_argument("--ids-are-truth", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--image-root", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    _add_common(p)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = sub.add_parser("bench", help="triplet vs siamese on the synthetic benchmark")
    _add_common(p)
    p.add_argument("--bench-seeds", type=int, default=None)
    p.add_argument("--bench-base-seed", type=int, default=None)
    p.add_argument("--bench-train-individuals", type=int, default=None)
    p.add_argument("--bench-test-individuals", type=int, default=None)
    p.add_argument("--bench-images", type=int, default=None)
    p.add_argument("--bench-epochs", type=int, default=None)
    p.add_argument("--bench-spread", type=float, default=None)
    p.add_argument("--bench-separation", type=float, default=None)
    p.add_argument("--bench-repetitions", type=int, default=None)
    p.add_argument("--hidden-dims", default=None)
    p.add_argument("--embedding-dim", type=int, default=None)

    return parser


# --- request builders --------------------------------------------------------


def _model_settings(cfg: RunConfig) -> dict:
    return {
        "hidden_dims": list(config_mod.parse_hidden_dims(cfg.hidden_dims)),
        "embedding_dim": cfg.embedding_dim,
        "l2_normalize": cfg.l2_normalize,
    }


def _loss_settings(cfg: RunConfig) -> dict:
    return {
        "loss_kind": cfg.loss_kind,
        "margin": cfg.margin,
        "squared_distances": cfg.squared_distances,
    }


def _optim_settings(cfg: RunConfig) -> dict:
    return {
        "lr": cfg.lr,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "epsilon": cfg.epsilon,
        "decay_per_epoch": cfg.decay_per_epoch,
        "decay_mode": cfg.decay_mode,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "early_stop_patience": (
            None if cfg.early_stop_patience < 0 else cfg.early_stop_patience
        ),
    }


def _sampler_settings(cfg: RunConfig) -> dict:
    return {
        "individuals_per_batch": cfg.individuals_per_batch,
        "images_per_individual": cfg.images_per_individual,
    }


def _split_settings(cfg: RunConfig) -> dict:
    return {
        "train_ratio": cfg.train_ratio,
        "val_ratio": cfg.val_ratio,
        "test_ratio": cfg.test_ratio,
        "folds": cfg.folds,
    }


def _augment_settings(cfg: RunConfig) -> dict | None:
    if not cfg.augment_enabled:
        return None
    return {
        "probability": cfg.augment_probability,
        "shift_max_pixels": cfg.shift_max_pixels,
        "rotate_max_degrees": cfg.rotate_max_degrees,
        "channel_noise_std": cfg.channel_noise_std,
        "pixel_noise_std": cfg.pixel_noise_std,
        "dropout_rate": cfg.dropout_rate,
    }


def _read_text(path: str, what: str) -> str:
    p = Path(path)
    if not path:
        raise ConfigError(f"{what}: no path configured")
    if not p.is_file():
        raise ConfigError(f"{what}: no such file {path!r}")
    return p.read_text(encoding="utf-8")


def _read_checkpoint_b64(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint: no such file {path!r}")
    return base64.b64encode(p.read_bytes()).decode("ascii")


# --- command handlers --------------------------------------------------------


def _write(out_dir: Path, name: str, content: str | bytes) -> Path:
    path = out_dir / name
    if isinstance(content, bytes):
        path.write_bytes(content)
    else:
        path.write_text(content, encoding="utf-8")
    print(f"wrote {path}")
    return path


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code in (400, 422):
        detail = resp.json().get("detail", resp.text)
        raise ConfigError(f"server rejected request: {detail}")
    if resp.status_code != 200:
        raise RuntimeError(f"server error {resp.status_code}: {resp.text[:500]}")
    return resp.json()


def _run_synth(cfg: RunConfig, client, out_dir: Path) -> int:
    body = _post(client, "/synth", {
        "seed": cfg.seed,
        "num_individuals": cfg.synth_individuals,
        "images_per_individual": cfg.synth_images,
        "feature_dim": cfg.feature_dim,
        "cluster_spread": cfg.cluster_spread,
        "inter_cluster_distance": cfg.inter_cluster_distance,
        "species_tag": cfg.species_tag or "synthetic",
    })
    _write(out_dir, "manifest.csv", body["manifest_csv"])
    print(f"synthetic manifest: {body['num_entries']} samples, {body['num_individuals']} individuals")
    return EXIT_OK


def _run_split(cfg: RunConfig, client, out_dir: Path) -> int:
    body = _post(client, "/split", {
        "manifest_csv": _read_text(cfg.dataset, "dataset"),
        "seed": cfg.seed,
        "split": _split_settings(cfg),
    })
    _write(out_dir, "split_plan.csv", body["plan_csv"])
    for fold in body["folds"]:
        print(
            f"fold {fold['fold']}: train {fold['train_individuals']}/{fold['train_images']}"
            f" val {fold['val_individuals']}/{fold['val_images']}"
            f" test {fold['test_individuals']}/{fold['test_images']} (individuals/images)"
        )
    for note in body["notes"]:
        print(f"note: {note}")
    return EXIT_OK


def _train_payload(cfg: RunConfig) -> dict:
    return {
        "manifest_csv": _read_text(cfg.dataset, "dataset"),
        "seed": cfg.seed,
        "fold": cfg.fold,
        "species_tag": cfg.species_tag,
        "image_root": cfg.image_root or None,
        "model": _model_settings(cfg),
        "loss": _loss_settings(cfg),
        "optim": _optim_settings(cfg),
        "sampler": _sampler_settings(cfg),
        "split": _split_settings(cfg),
        "augment": _augment_settings(cfg),
    }


def _run_train(cfg: RunConfig, client, out_dir: Path) -> int:
    body = _post(client, "/train", _train_payload(cfg))
    _write(out_dir, "checkpoint.bin", base64.b64decode(body["checkpoint_b64"]))
    _write(out_dir, "loss_log.csv", body["loss_log_csv"])
    val = body["final_val_loss"]
    print(
        f"trained {body['model_tag']} ({cfg.loss_kind}) for {body['epochs_run']} epochs: "
        f"train loss {body['final_train_loss']:.6f}"
        + (f", val loss {val:.6f}" if val is not None else "")
    )
    return EXIT_OK


def _run_eval(cfg: RunConfig, client, out_dir: Path) -> int:
    payload = _train_payload(cfg)
    payload.update({"repetitions": cfg.repetitions, "ap_mode": cfg.ap_mode})
    if cfg.checkpoint:
        payload["checkpoint_b64"] = _read_checkpoint_b64(cfg.checkpoint)
        payload["fold"] = cfg.fold
    body = _post(client, "/eval", payload)
    _write(out_dir, "results.csv", body["results_csv"])
    for row in body["rows"]:
        print(
            f"fold {row['fold']}: mAP@1 {row['map1_mean']:.4f} +/- {row['map1_std']:.4f}"
            f"  mAP@5 {row['map5_mean']:.4f} +/- {row['map5_std']:.4f}"
        )
    return EXIT_OK


def _run_census(cfg: RunConfig, client, out_dir: Path) -> int:
    payload = {
        "manifest_csv": _read_text(cfg.dataset, "dataset"),
        "max_exemplars_per_id": cfg.max_exemplars,
        "ids_are_truth": cfg.ids_are_truth,
        "image_root": cfg.image_root or None,
    }
    if cfg.checkpoint:
        payload["checkpoint_b64"] = _read_checkpoint_b64(cfg.checkpoint)
    if cfg.census_threshold >= 0:
        payload["threshold"] = cfg.census_threshold
    elif cfg.calibrate_dataset:
        payload["calibrate_manifest_csv"] = _read_text(
            cfg.calibrate_dataset, "calibrate_dataset"
        )
    else:
        raise ConfigError("census needs --census-threshold >= 0 or --calibrate-dataset")
    body = _post(client, "/census", payload)
    _write(out_dir, "census_report.csv", body["report_csv"])
    line = f"estimated population: {body['estimated_population']}"
    if body["true_population"] is not None:
        line += f" (true {body['true_population']})"
    print(line)
    print(f"threshold used: {body['threshold_used']:.6f}")
    if body["assignment_precision"] is not None:
        print(f"assignment precision: {body['assignment_precision']:.4f}")
    if body["assignment_recall"] is not None:
        print(f"assignment recall: {body['assignment_recall']:.4f}")
    return EXIT_OK


def _run_gradcheck(cfg: RunConfig, client, out_dir: Path, cases: int, tolerance: float) -> int:
    body = _post(client, "/gradcheck", {"seed": cfg.seed, "cases": cases})
    _write(out_dir, "gradcheck_report.csv", body["report_csv"])
    for suite in body["suites"]:
        print(f"{suite['name']}: {suite['cases']} cases, max relative error {suite['max_rel_error']:.3g}")
    print(f"max relative error: {body['max_rel_error']:.3g}")
    if body["max_rel_error"] > tolerance:
        print(f"FAIL: exceeds tolerance {tolerance:.3g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _run_bench(cfg: RunConfig, client, out_dir: Path) -> int:
    seeds = list(range(cfg.bench_base_seed, cfg.bench_base_seed + cfg.bench_seeds))
    body = _post(client, "/bench", {
        "seeds": seeds,
        "train_individuals": cfg.bench_train_individuals,
        "test_individuals": cfg.bench_test_individuals,
        "images_per_individual": cfg.bench_images,
        "feature_dim": cfg.feature_dim,
        "cluster_spread": cfg.bench_spread,
        "inter_cluster_distance": cfg.bench_separation,
        "epochs": cfg.bench_epochs,
        "repetitions": cfg.bench_repetitions,
        "model": _model_settings(cfg),
        "loss": _loss_settings(cfg),
    })
    _write(out_dir, "bench.csv", body["table_csv"])
    print(body["table_csv"], end="")
    print(
        f"mean mAP@1 over {len(seeds)} seeds: "
        f"triplet {body['triplet_mean_map1']:.4f} vs siamese {body['siamese_mean_map1']:.4f}"
    )
    return EXIT_OK


# --- entry point -------------------------------------------------------------


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    file_text = None
    if args.config is not None:
        file_text = _read_text(args.config, "config")
    flag_names = set(vars(args)) - {"command", "url", "config", "cases", "tolerance", "host", "port"}
    overrides = {k: v for k, v in vars(args).items() if k in flag_names and v is not None}
    cfg = config_mod.resolve(file_text, overrides)
    cfg.command = args.command
    return cfg


def main(argv=None, client_factory=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        uvicorn.run("simreid.service.app:app", host=args.host, port=args.port)
        return EXIT_OK

    try:
        cfg = _resolve_config(args)
        url = args.url or os.environ.get("SIMREID_URL", DEFAULT_URL)
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if client_factory is None:
            client = httpx.Client(base_url=url, timeout=3600.0)
        else:
            client = client_factory(url)
        with client:
            if args.command == "synth":
                code = _run_synth(cfg, client, out_dir)
            elif args.command == "split":
                code = _run_split(cfg, client, out_dir)
            elif args.command == "train":
                code = _run_train(cfg, client, out_dir)
            elif args.command == "eval":
                code = _run_eval(cfg, client, out_dir)
            elif args.command == "census":
                code = _run_census(cfg, client, out_dir)
            elif args.command == "gradcheck":
                code = _run_gradcheck(cfg, client, out_dir, args.cases, args.tolerance)
            elif args.command == "bench":
                code = _run_bench(cfg, client, out_dir)
            else:  # pragma: no cover - argparse rejects unknown commands
                parser.error(f"unknown command {args.command!r}")
        _write(out_dir, "run_manifest.ini", config_mod.to_ini(cfg))
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except httpx.HTTPError as exc:
        print(f"cannot reach service: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
