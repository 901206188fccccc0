"""Experiment harness: generate data, run SSL/MSL training, evaluate.

Subcommands
-----------
gen-data   write per-site phantom volumes, truth masks and a manifest
train      --mode ssl --site X          local train-to-convergence
           --mode msl                   all site workers in-process (threads)
           --mode msl --site X          one worker process joining a shared store
evaluate   score checkpoints on every site's test set, emit report files
report     pretty-print a previously written report CSV

Exit codes: 0 converged/ok, 2 config error, 3 protocol fault, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, builtin_profile, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    ContractViolation,
    NumericError,
    ProtocolFault,
)
from .evaluate import evaluate_models
from .network import build_network
from .nifti import parse_nifti, write_nifti
from .patches import extract_patches, merge_patch_sets
from .phantom import generate_phantom
from .protocol import SiteRuntime, init_msl, run_site_worker, run_ssl
from .store import TOKEN_NAME, DirectoryStore, ExchangeStore, InMemoryStore
from .volumes import SegmentationMask

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_NUMERIC = 4

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(config: ExperimentConfig, out_dir: Path) -> dict:
    """Generate all site volumes plus a manifest; deterministic per seed."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "profile": config.profile,
        "master_seed": config.master_seed,
        "patch": {
            "size": config.patch.size,
            "per_volume": config.patch.per_volume,
            "lesion_fraction": config.patch.lesion_fraction,
        },
        "sites": {},
    }
    for site_cfg in config.sites:
        params = site_cfg.phantom_params(config.dims, config.spacing_mm, config.master_seed)
        site_dir = out_dir / site_cfg.site_id
        site_dir.mkdir(exist_ok=True)
        splits: dict[str, list[str]] = {"train": [], "test": []}
        index = 0
        for split, count in (("train", site_cfg.train_volumes), ("test", site_cfg.test_volumes)):
            for i in range(count):
                case_id = f"{site_cfg.site_id}_{split}_{i:02d}"
                volume, mask = generate_phantom(params, index)
                (site_dir / f"{case_id}.nii").write_bytes(write_nifti(volume))
                (site_dir / f"{case_id}_mask.nii").write_bytes(write_nifti(mask))
                splits[split].append(case_id)
                index += 1
        manifest["sites"][site_cfg.site_id] = {
            "phantom_seed": params.seed,
            **splits,
        }
        log.info(
            "generated %d train / %d test volumes for %s",
            site_cfg.train_volumes, site_cfg.test_volumes, site_cfg.site_id,
        )
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


def _load_manifest(data_dir: Path) -> dict:
    path = data_dir / MANIFEST_NAME
    if not path.is_file():
        raise ConfigError(f"no manifest at {path}; run gen-data first")
    return json.loads(path.read_text(encoding="utf-8"))


def _load_case(data_dir: Path, site: str, case_id: str):
    volume = parse_nifti((data_dir / site / f"{case_id}.nii").read_bytes())
    mask_vol = parse_nifti((data_dir / site / f"{case_id}_mask.nii").read_bytes())
    mask = SegmentationMask(mask_vol.voxels.astype("uint8"), mask_vol.spacing_mm)
    return volume, mask


def _site_patches(config: ExperimentConfig, manifest: dict, data_dir: Path, site: str):
    entry = manifest["sites"].get(site)
    if entry is None:
        raise ConfigError(f"site {site!r} not present in manifest")
    sets = []
    for case_id in entry["train"]:
        volume, mask = _load_case(data_dir, site, case_id)
        sets.append(
            extract_patches(
                volume,
                mask,
                n=config.patch.per_volume,
                size=config.patch.size,
                seed=config.patch_seed(site, case_id),
                lesion_fraction=config.patch.lesion_fraction,
                source_id=case_id,
            )
        )
    return merge_patch_sets(sets, source_id=site)


def _test_sets(manifest: dict, data_dir: Path) -> dict:
    out = {}
    for site, entry in manifest["sites"].items():
        out[site] = [
            (case_id, *_load_case(data_dir, site, case_id)) for case_id in entry["test"]
        ]
    return out


# ------------------------------------------------------------------- train

def _make_runtime(
    config: ExperimentConfig,
    site: str,
    data_dir: Path,
    store: ExchangeStore | None,
    out_dir: Path | None,
) -> SiteRuntime:
    manifest = _load_manifest(data_dir)
    audit = str(out_dir / f"audit_{site}.log") if out_dir else None
    return SiteRuntime(
        site_id=site,
        roster=config.roster,
        patches=_site_patches(config, manifest, data_dir, site),
        spec=config.arch_spec(),
        params=config.training,
        seed=config.site_train_seed(site),
        store=store,
        poll_interval=config.poll_interval,
        timeout=config.timeout,
        audit_path=audit,
    )


def _initial_checkpoint(config: ExperimentConfig) -> bytes:
    net = build_network(config.arch_spec(), config.init_seed())
    return save_checkpoint(net, global_epoch=0, adam=config.training.fresh_adam())


def _wait_for_token(store: ExchangeStore, timeout: float, poll: float) -> None:
    deadline = time.monotonic() + timeout
    while TOKEN_NAME not in store.list():
        if time.monotonic() > deadline:
            raise ProtocolFault("timed out waiting for the store to be initialized")
        time.sleep(poll)


def cmd_train(
    config: ExperimentConfig,
    mode: str,
    data_dir: Path,
    out_dir: Path,
    site: str | None = None,
    store_path: str | None = None,
) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    if mode == "ssl":
        if site is None:
            raise ConfigError("--mode ssl requires --site")
        config.site(site)  # validates membership
        runtime = _make_runtime(config, site, data_dir, store=None, out_dir=out_dir)
        final = run_ssl(runtime, config.init_seed())
        path = out_dir / f"ssl_{site}.ckpt"
        path.write_bytes(final)
        print(path)
        return EXIT_OK

    if mode != "msl":
        raise ConfigError(f"unknown mode {mode!r} (expected ssl or msl)")

    if site is None:
        # In-process test mode: one worker thread per site, shared store.
        store: ExchangeStore = (
            DirectoryStore(store_path) if store_path else InMemoryStore()
        )
        init_msl(store, config.roster, _initial_checkpoint(config))
        runtimes = [
            _make_runtime(config, s, data_dir, store=store, out_dir=out_dir)
            for s in config.roster
        ]
        finals: dict[str, bytes] = {}
        errors: dict[str, BaseException] = {}

        def work(rt: SiteRuntime):
            try:
                finals[rt.site_id] = run_site_worker(rt)
            except BaseException as exc:  # noqa: BLE001 - recorded, re-raised below
                errors[rt.site_id] = exc

        threads = [threading.Thread(target=work, args=(rt,)) for rt in runtimes]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            site_id, exc = sorted(errors.items())[0]
            log.error("worker %s failed: %s", site_id, exc)
            raise exc
        path = out_dir / "msl.ckpt"
        path.write_bytes(finals[config.roster[0]])
        print(path)
        return EXIT_OK

    # Deployment mode: a single worker joining a shared directory store.
    if store_path is None:
        raise ConfigError("--mode msl --site requires --store")
    config.site(site)
    store = DirectoryStore(store_path)
    if site == config.roster[0]:
        try:
            init_msl(store, config.roster, _initial_checkpoint(config))
        except ProtocolFault:
            log.info("store already initialized; joining existing run")
    else:
        _wait_for_token(store, config.timeout, config.poll_interval)
    runtime = _make_runtime(config, site, data_dir, store=store, out_dir=out_dir)
    final = run_site_worker(runtime)
    path = out_dir / f"msl_{site}.ckpt"
    path.write_bytes(final)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(
    config: ExperimentConfig,
    checkpoint_paths: list[Path],
    data_dir: Path,
    out_dir: Path,
) -> int:
    if not checkpoint_paths:
        raise ConfigError("evaluate needs at least one checkpoint")
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = config.arch_spec()
    named_models = []
    for path in checkpoint_paths:
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        try:
            net, _, _ = load_checkpoint(path.read_bytes(), spec)
        except CheckpointError as exc:
            raise ConfigError(f"cannot load {path}: {exc}") from exc
        named_models.append((path.stem, net))

    manifest = _load_manifest(data_dir)
    report = evaluate_models(
        named_models,
        _test_sets(manifest, data_dir),
        threshold=config.threshold,
        keep_predictions=True,
    )

    (out_dir / "report.csv").write_text("\n".join(report.csv_rows()) + "\n")
    for set_name in report.set_names:
        (out_dir / f"pvalues_{set_name}.csv").write_text(
            "\n".join(report.pairwise_csv_rows(set_name)) + "\n"
        )
    table = report.pretty_table()
    (out_dir / "table.txt").write_text(table + "\n")
    for (model, set_name, case_id), mask in report.predictions.items():
        mask_dir = out_dir / "masks" / model
        mask_dir.mkdir(parents=True, exist_ok=True)
        (mask_dir / f"{case_id}_pred.nii").write_bytes(write_nifti(mask))
    print(table)
    return EXIT_OK


def cmd_report(report_csv: Path) -> int:
    if not report_csv.is_file():
        raise ConfigError(f"report file not found: {report_csv}")
    lines = report_csv.read_text().strip().splitlines()
    rows = [ln.split(",") for ln in lines]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return EXIT_OK


# -------------------------------------------------------------------- main

def _resolve_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = builtin_profile(args.profile)
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwtseg",
        description="Multi-site segmentation training via cyclic weight transfer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON file")
        p.add_argument("--profile", default="ci", choices=["ci", "paper"],
                       help="built-in profile when --config is not given")
        p.add_argument("--seed", type=int, help="override the master seed")

    p = sub.add_parser("gen-data", help="generate phantom site datasets")
    common(p)
    p.add_argument("--out", required=True, help="output data directory")

    p = sub.add_parser("train", help="run SSL or MSL training")
    common(p)
    p.add_argument("--mode", required=True, choices=["ssl", "msl"])
    p.add_argument("--site", help="site id (ssl always; msl for deployment mode)")
    p.add_argument("--data", required=True, help="directory produced by gen-data")
    p.add_argument("--store", default=os.environ.get("CWTSEG_STORE"),
                   help="shared store directory (msl); defaults to $CWTSEG_STORE")
    p.add_argument("--out", required=True, help="output directory for checkpoints")

    p = sub.add_parser("evaluate", help="evaluate checkpoints on all test sets")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("checkpoints", nargs="+", help="checkpoint files to compare")

    p = sub.add_parser("report", help="pretty-print a report CSV")
    p.add_argument("report_csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            cmd_gen_data(_resolve_config(args), Path(args.out))
            return EXIT_OK
        if args.command == "train":
            return cmd_train(
                _resolve_config(args),
                args.mode,
                Path(args.data),
                Path(args.out),
                site=args.site,
                store_path=args.store,
            )
        if args.command == "evaluate":
            return cmd_evaluate(
                _resolve_config(args),
                [Path(p) for p in args.checkpoints],
                Path(args.data),
                Path(args.out),
            )
        if args.command == "report":
            return cmd_report(Path(args.report_csv))
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ContractViolation) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ProtocolFault as exc:
        log.error("protocol fault: %s", exc)
        return EXIT_PROTOCOL
    except NumericError as exc:
        log.error("numeric fault: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
