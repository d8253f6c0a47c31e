"""Command-line interface.

Subcommands: prepare-data, dock-weights, train-flow, train-fusion,
generate, generate-similar, evaluate, optimize-property, optimize-fragment,
export-plotdata. Exit codes: 0 success, 1 usage error, 2 data error,
3 external-scorer failure.

Reports are byte-deterministic for a given config and seed: CSV rows and
JSON summaries carry no timestamps (diagnostics go to stderr as key=value
lines), and every summary echoes the effective config.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import SeededRng
from .chem import SmilesError, parse_smiles, morgan_fingerprint, write_smiles
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import DataError, Dataset, ingest, synthetic_corpus, write_dataset
from .docking import (
    DockingRecord,
    ScoreCache,
    ScorerConfig,
    ScorerError,
    compute_weights,
    score_batch,
)
from .flow import init_flow
from .pipeline import (
    compute_plogp,
    compute_qed_lite,
    crippen_logp,
    evaluate_similarity_baseline,
    generate_random,
    generate_similar,
    novelty_pct,
    optimize_property,
    optimize_substructure,
    sa_proxy,
    train_flow,
    train_property_head,
    uniqueness_pct,
)
from .chem import molecular_weight
from .spherenet import init_spherenet, train_fusion
from .flow import encode


class UsageError(ValueError):
    pass


def log(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), file=sys.stderr)


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("seed", "epochs", "temperature", "fusion_epochs"):
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    return config.with_overrides(overrides)


def _load_dataset(paths, config: RunConfig) -> Dataset:
    if not paths:
        raise UsageError("no dataset paths given (--data)")
    ds = ingest(paths, n_max=config.n_max)
    log(event="ingest", records=len(ds.records), **{f"skip_{k}": v for k, v in ds.skipped.items()})
    if not ds.records:
        raise DataError(paths[0], 0, "dataset is empty after ingestion")
    return ds


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    if args.synthetic:
        ds = synthetic_corpus(args.synthetic, SeededRng(config.seed).spawn("corpus"),
                              n_max=config.n_max, with_geometry=not args.no_geometry)
    else:
        ds = _load_dataset(args.input, config)
    smi, xyz = write_dataset(ds, out)
    _write_json(out / "prepare_summary.json", {
        "config": config.to_dict(),
        "records": len(ds.records),
        "with_geometry": sum(1 for r in ds.records if r.has_geometry),
        "skipped": dict(ds.skipped),
        "files": [p.name for p in (smi, xyz) if p is not None],
    })
    log(event="prepare-data", records=len(ds.records), out=str(out))
    return 0


def cmd_dock_weights(args) -> int:
    config = _load_config(args)
    ds = _load_dataset(args.data, config)
    seen = set()
    molecules = []
    for rec in ds.records:
        if rec.smiles not in seen:
            seen.add(rec.smiles)
            molecules.append((rec.smiles, rec.molecule))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = ScoreCache.load(out / "score_cache.csv")
    scorer = None
    if config.scorer_command:
        scorer = ScorerConfig(config.scorer_command, config.scorer_timeout,
                              config.scorer_retries, config.scorer_parallelism)
    result = score_batch(molecules, scorer, cache)
    for mid, reason in sorted(result.failures.items()):
        log(event="score-failure", id=mid, reason=reason)
    if not result.records:
        raise ScorerError("unparseable", "no molecule could be scored")
    table = compute_weights(result.records, floor=config.weight_floor)
    rows = [
        (rec.molecule_id, _fmt(rec.energy), _fmt(rec.alpha), _fmt(table.weights[i]))
        for i, rec in enumerate(result.records)
    ]
    _write_csv(out / "weights.csv", ["smiles", "energy", "alpha", "weight"], rows)
    _write_json(out / "dock_summary.json", {
        "config": config.to_dict(),
        "scored": len(result.records),
        "failures": result.failures,
        "alpha_min": table.alpha_min,
        "alpha_max": table.alpha_max,
    })
    log(event="dock-weights", scored=len(result.records), failures=len(result.failures))
    return 0


def _read_weight_table(path: Path, config: RunConfig):
    records = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            records.append(DockingRecord(row["smiles"], float(row["energy"])))
    return compute_weights(records, floor=config.weight_floor)


def cmd_train_flow(args) -> int:
    config = _load_config(args)
    ds = _load_dataset(args.data, config)
    rng = SeededRng(config.seed)
    params = init_flow(config.flow_config(), rng.spawn("flow-init"))
    table = None
    if args.weights:
        full = _read_weight_table(Path(args.weights), config)
        by_id = dict(zip(full.ids, full.weights))
        missing = [r.smiles for r in ds.records if r.smiles not in by_id]
        if missing:
            raise DataError(args.weights, 0, f"{len(missing)} records lack weights")
        table = compute_weights(
            [DockingRecord(f"{i}", -by_id[r.smiles]) for i, r in enumerate(ds.records)],
            floor=config.weight_floor,
        )
    result = train_flow(
        params, ds.records, epochs=config.epochs, rng=rng.spawn("flow-train"),
        lr=config.learning_rate, batch_size=config.batch_size,
        clip_norm=config.clip_norm, weight_table=table,
        sampler_mode=config.sampler_mode, probe_every=config.probe_every,
        probe_count=config.probe_count, probe_temperature=config.temperature,
    )
    for epoch, nll in enumerate(result.epoch_nll):
        log(event="flow-epoch", epoch=epoch, nll=f"{nll:.3f}")
    for epoch, v in result.probe_history:
        log(event="flow-probe", epoch=epoch, raw_validity=f"{v:.4f}")
    log(event="flow-best", epoch=result.best_epoch, raw_validity=f"{result.best_validity:.4f}")
    save_checkpoint(args.out, config, params)
    log(event="train-flow", checkpoint=args.out)
    return 0


def cmd_train_fusion(args) -> int:
    config_ckpt, flow_params, _ = load_checkpoint(args.checkpoint)
    config = RunConfig.from_file(args.config) if args.config else config_ckpt
    config = config.with_overrides({
        k: getattr(args, k) for k in ("seed", "fusion_epochs")
        if getattr(args, k, None) is not None
    })
    ds = _load_dataset(args.data, config)
    usable = ds.with_geometry()
    if args.subset:
        usable = usable[: args.subset]
    if not usable:
        raise DataError(args.data[0], 0, "no record carries geometry")
    rng = SeededRng(config.seed)
    sphere = init_spherenet(config.sphere_config(), rng.spawn("sphere-init"))
    result = train_fusion(usable, flow_params, sphere, epochs=config.fusion_epochs,
                          rng=rng.spawn("fusion-train"), lr=config.fusion_learning_rate,
                          batch_size=config.fusion_batch_size)
    for epoch, loss in enumerate(result.epoch_losses):
        log(event="fusion-epoch", epoch=epoch, loss=f"{loss:.4f}")
    if result.skipped_no_geometry:
        log(event="fusion-skipped", count=result.skipped_no_geometry)
    save_checkpoint(args.out, config, flow_params, sphere)
    log(event="train-fusion", checkpoint=args.out)
    return 0


def cmd_generate(args) -> int:
    config, flow_params, _ = load_checkpoint(args.checkpoint)
    training = set()
    if args.data:
        training = _load_dataset(args.data, config).smiles_set()
    rng = SeededRng(config.seed).spawn("generate")
    temperature = args.temperature if args.temperature is not None else config.temperature
    molecules, report = generate_random(
        flow_params, args.count, check=args.check, temperature=temperature,
        rng=rng, training=training,
    )
    out = Path(args.out)
    _write_csv(out / "gen_report.csv", ["index", "valid", "smiles"],
               [(i, int(v), s) for i, v, s in report.entries])
    _write_json(out / "gen_summary.json", {
        "config": config.to_dict(),
        "seed": config.seed,
        "temperature": temperature,
        "check": args.check,
        "requested": report.requested,
        "returned": report.returned,
        "raw_attempts": report.raw_attempts,
        "validity_pct": report.validity_pct,
        "validity_wo_check_pct": report.validity_wo_check_pct,
        "novelty_pct": report.novelty_pct,
        "uniqueness_pct": report.uniqueness_pct,
        "cap_exhausted": report.cap_exhausted,
    })
    log(event="generate", returned=report.returned,
        validity=f"{report.validity_pct:.2f}",
        validity_wo_check=f"{report.validity_wo_check_pct:.2f}")
    return 0


def cmd_generate_similar(args) -> int:
    config, flow_params, sphere = load_checkpoint(args.checkpoint)
    if sphere is None:
        raise UsageError("checkpoint has no geometry encoder; run train-fusion first")
    ds = _load_dataset(args.data, config)
    usable = ds.with_geometry()
    if not usable:
        raise DataError(args.data[0], 0, "no record carries geometry")
    rng = SeededRng(config.seed).spawn("generate-similar")
    pick = rng.spawn("seeds")
    seeds = [usable[int(i)] for i in pick.integers(0, len(usable), args.count)]
    lam = config.noise_fraction if args.noise_fraction is None else args.noise_fraction
    _, report = generate_similar(flow_params, sphere, seeds, lam, rng)
    out = Path(args.out)
    _write_csv(out / "similar_report.csv",
               ["index", "smiles", "tanimoto", "fraggle", "maccs"],
               [(i, s, _fmt(t), _fmt(f), _fmt(k)) for i, s, t, f, k in report.rows])
    _write_json(out / "similar_summary.json", {
        "config": config.to_dict(),
        "seed": config.seed,
        "noise_fraction": lam,
        "seeds": report.seed_smiles,
        "generated": len(report.rows),
        "failures": report.failures,
        "mean_tanimoto": report.mean_tanimoto,
        "mean_fraggle": report.mean_fraggle,
        "mean_maccs": report.mean_maccs,
    })
    log(event="generate-similar", generated=len(report.rows), failures=report.failures,
        mean_fraggle=f"{report.mean_fraggle:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    ds = _load_dataset(args.data, config)
    rng = SeededRng(config.seed).spawn("evaluate")
    baseline = evaluate_similarity_baseline(ds.records, rng,
                                            sample_size=min(2000, len(ds.records)))
    payload = {"config": config.to_dict(), "seed": config.seed, "baseline": baseline}
    if args.generated:
        smiles = []
        with Path(args.generated).open() as fh:
            for row in csv.DictReader(fh):
                if int(row["valid"]):
                    smiles.append(row["smiles"])
        payload["generated"] = {
            "count": len(smiles),
            "uniqueness_pct": uniqueness_pct(smiles),
            "novelty_pct": novelty_pct(smiles, ds.smiles_set()),
        }
    _write_json(Path(args.out) / "eval_summary.json", payload)
    log(event="evaluate", baseline_fraggle=f"{baseline['mean_fraggle']:.4f}")
    return 0


_PROPERTIES = {"plogp": compute_plogp, "qed": compute_qed_lite}


def cmd_optimize_property(args) -> int:
    config, flow_params, _ = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data, config)
    prop_fn = _PROPERTIES[args.property]
    rng = SeededRng(config.seed).spawn("optimize-property")
    enc_rng = rng.spawn("latents")
    latents, values = [], []
    for i, rec in enumerate(ds.records):
        lat, _ = encode(flow_params, rec.molecule, enc_rng.spawn(f"m{i}"))
        latents.append(lat.z)
        values.append(prop_fn(rec.molecule))
    latents = np.stack(latents)
    values = np.asarray(values)
    head, r2 = train_property_head(latents, values, rng.spawn("head"))
    log(event="property-head", holdout_r2=f"{r2:.4f}")
    top = np.argsort(values)[::-1][: args.seeds]
    rows = []
    for rank, idx in enumerate(top):
        traj = optimize_property(latents[int(idx)], head, steps=config.ascent_steps,
                                 step_size=config.ascent_step_size,
                                 flow_params=flow_params, property_fn=prop_fn)
        best = traj.best
        rows.append((
            rank, ds.records[int(idx)].smiles, _fmt(values[int(idx)]),
            write_smiles(best.molecule) if best else "",
            _fmt(best.actual) if best else "",
        ))
    rows_best = sorted((r for r in rows if r[4]), key=lambda r: -float(r[4]))[:3]
    out = Path(args.out)
    _write_csv(out / "property_report.csv",
               ["rank", "seed_smiles", "seed_value", "best_smiles", "best_value"], rows)
    _write_json(out / "property_summary.json", {
        "config": config.to_dict(),
        "seed": config.seed,
        "property": args.property,
        "holdout_r2": r2,
        "top3": [
            {"smiles": r[3], "value": float(r[4])} for r in rows_best
        ],
    })
    log(event="optimize-property", seeds=len(rows), improved=len(rows_best))
    return 0


def cmd_optimize_fragment(args) -> int:
    config, flow_params, sphere = load_checkpoint(args.checkpoint)
    host = parse_smiles(args.host)
    atoms = {int(a) for a in args.fragment_atoms.split(",")}
    rng = SeededRng(config.seed).spawn("optimize-fragment")
    result = optimize_substructure(host, atoms, flow_params, sphere, rng,
                                   lam=config.noise_fraction)
    payload = {
        "config": config.to_dict(),
        "seed": config.seed,
        "host": write_smiles(host),
        "fragment_atoms": sorted(atoms),
        "replaced": result.replaced_ok,
        "candidates_tried": result.candidates_tried,
        "result": write_smiles(result.molecule) if result.molecule else None,
    }
    _write_json(Path(args.out) / "fragment_summary.json", payload)
    log(event="optimize-fragment", ok=result.replaced_ok, tried=result.candidates_tried)
    return 0 if result.replaced_ok else 2


def cmd_export_plotdata(args) -> int:
    report_dir = Path(args.report)
    out = Path(args.out)
    smiles: list[str] = []
    gen_csv = report_dir / "gen_report.csv"
    sim_csv = report_dir / "similar_report.csv"
    if gen_csv.exists():
        with gen_csv.open() as fh:
            smiles = [row["smiles"] for row in csv.DictReader(fh) if int(row["valid"])]
    elif sim_csv.exists():
        with sim_csv.open() as fh:
            smiles = [row["smiles"] for row in csv.DictReader(fh)]
    else:
        raise DataError(report_dir, 0, "no gen_report.csv or similar_report.csv found")

    mols = [parse_smiles(s) for s in smiles]
    _write_csv(out / "fingerprints.csv", ["smiles", "morgan_hex"],
               [(s, morgan_fingerprint(m).to_hex()) for s, m in zip(smiles, mols)])
    _write_csv(out / "properties.csv",
               ["smiles", "mol_weight", "plogp", "qed_lite", "sa_proxy", "crippen_logp"],
               [(s, _fmt(molecular_weight(m)), _fmt(compute_plogp(m)),
                 _fmt(compute_qed_lite(m)), _fmt(sa_proxy(m)), _fmt(crippen_logp(m)))
                for s, m in zip(smiles, mols)])
    bins = np.linspace(0.0, 1.0, 21)
    hist_rows = []
    if sim_csv.exists():
        sims = {"tanimoto": [], "fraggle": [], "maccs": []}
        with sim_csv.open() as fh:
            for row in csv.DictReader(fh):
                for k in sims:
                    sims[k].append(float(row[k]))
        counts = {k: np.histogram(v, bins=bins)[0] for k, v in sims.items()}
        for b in range(20):
            hist_rows.append((
                _fmt(bins[b]), _fmt(bins[b + 1]),
                int(counts["tanimoto"][b]), int(counts["fraggle"][b]), int(counts["maccs"][b]),
            ))
    _write_csv(out / "similarity_hist.csv",
               ["bin_lo", "bin_hi", "tanimoto_count", "fraggle_count", "maccs_count"],
               hist_rows)
    log(event="export-plotdata", molecules=len(smiles), out=str(out))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="molflow",
        description="flow-based molecular generation with 3D conditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("prepare-data", help="ingest or synthesize a dataset")
    common(p)
    p.add_argument("--input", nargs="*", default=[], help="SMILES or XYZ files")
    p.add_argument("--synthetic", type=int, default=0, help="synthesize N molecules")
    p.add_argument("--no-geometry", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("dock-weights", help="score molecules and derive sampling weights")
    common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dock_weights)

    p = sub.add_parser("train-flow", help="train the generative flow")
    common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--weights", default=None, help="weights.csv from dock-weights")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("train-fusion", help="train the geometry encoder against the flow latent")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--subset", type=int, default=None, help="use only the first N geometry records")
    p.add_argument("--fusion-epochs", dest="fusion_epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("generate", help="random generation with metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--check", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--data", nargs="*", default=[], help="training data for novelty")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("generate-similar", help="seed-conditioned generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--count", type=int, default=100, help="number of seeds")
    p.add_argument("--noise-fraction", dest="noise_fraction", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_similar)

    p = sub.add_parser("evaluate", help="similarity baseline and set metrics")
    common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--generated", default=None, help="gen_report.csv to evaluate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("optimize-property", help="latent gradient ascent on a property")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--property", choices=sorted(_PROPERTIES), required=True)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize_property)

    p = sub.add_parser("optimize-fragment", help="substructure replacement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", required=True, help="host molecule SMILES")
    p.add_argument("--fragment-atoms", required=True, help="comma-separated atom indices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize_fragment)

    p = sub.add_parser("export-plotdata", help="fingerprint/property/similarity CSVs")
    p.add_argument("--report", required=True, help="a generate/generate-similar output dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plotdata)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ScorerError as exc:
        print(f"scorer error: {exc}", file=sys.stderr)
        return 3
    except (DataError, SmilesError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
