"""Command-line entry point: preprocess | corrupt | train | infer | evaluate
| analyze | benchmark.

Every command is a pure function of (config, input files, seeds): rerunning
with the same config reproduces outputs byte for byte.  Exit codes: 0 on
success, 2 on configuration errors, 3 on numerical aborts.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    dump_config,
    parse_config,
    write_config_echo,
)
from .corruption import corrupt_cohort, subset_training
from .geometry import (
    Cohort,
    CohortShape,
    IllConditionedError,
    NormalizationParams,
    PointCloud,
    farthest_point_sample,
    icp_rigid_align,
    load_mesh,
    normalize_cohort,
    normalize_points,
    read_point_file,
    write_point_file,
)
from .metrics import (
    ShapeMetrics,
    chamfer_distance_np,
    earth_movers_distance,
    point_to_face_distance,
    write_metrics_csv,
)
from .model import (
    ModelConfig,
    NumericalDivergenceError,
    export_correspondence_map,
    load_checkpoint,
    save_checkpoint,
)
from .ssm_stats import (
    compactness,
    fit_pca,
    generalization,
    mean_shape,
    mode_walk,
    pca_summary,
    save_pca,
    specificity,
    write_compactness_csv,
)
from .store import load_cohort, save_cohort, source_cohort_dir
from .synthetic import generate_cohort, write_latents_csv
from .training import (
    TrainingDivergedError,
    infer,
    split_cohort,
    train,
    write_history_csv,
)


def _apply_normalization(cohort: Cohort, params: NormalizationParams) -> Cohort:
    """Normalize every shape's working cloud with the given params."""
    shapes = []
    for shape in cohort.shapes:
        cloud = PointCloud(
            normalize_points(shape.full_cloud().points, params), normalized=True
        )
        shapes.append(replace(shape, mesh=None, cloud=cloud))
    return Cohort(shapes, normalization=params)


def _align_cohort(cohort: Cohort) -> Cohort:
    """Rigidly align all shapes to the most-central one via ICP."""
    clouds = [s.full_cloud() for s in cohort.shapes]
    centroids = np.stack([c.points.mean(axis=0) for c in clouds])
    reference = int(
        np.argmin(np.linalg.norm(centroids - centroids.mean(axis=0), axis=1))
    )
    shapes = []
    for i, shape in enumerate(cohort.shapes):
        if i == reference:
            shapes.append(shape)
            continue
        transform = icp_rigid_align(clouds[i], clouds[reference])
        mesh = shape.mesh
        if mesh is not None:
            mesh = replace(mesh, vertices=transform.apply(mesh.vertices))
        cloud = shape.cloud
        if cloud is not None:
            cloud = PointCloud(transform.apply(cloud.points))
        shapes.append(replace(shape, mesh=mesh, cloud=cloud))
    return Cohort(shapes, normalization=cohort.normalization)


def _build_raw_cohort(config: ExperimentConfig) -> tuple[Cohort, np.ndarray | None]:
    if config.dataset.kind == "synthetic":
        return generate_cohort(config.dataset.cohort)
    mesh_dir = Path(config.dataset.mesh_dir)
    if not mesh_dir.is_dir():
        raise ConfigError(f"dataset.mesh_dir: not a directory: {mesh_dir}")
    files = sorted(
        p for p in mesh_dir.iterdir() if p.suffix.lower() in (".ply", ".obj")
    )
    if not files:
        raise ConfigError(f"dataset.mesh_dir: no .ply/.obj files in {mesh_dir}")
    shapes = [CohortShape(id=p.stem, mesh=load_mesh(p)) for p in files]
    return Cohort(shapes), None


def cmd_preprocess(config: ExperimentConfig) -> Path:
    """Build, align, split and record normalization for the cohort."""
    cohort, latents = _build_raw_cohort(config)
    if config.preprocess.align:
        cohort = _align_cohort(cohort)
    cohort = split_cohort(cohort, config.preprocess.ratios, config.preprocess.split_seed)
    _, params = normalize_cohort(cohort)
    cohort.normalization = params  # stored in mm; params applied downstream
    out = config.cohort_dir()
    save_cohort(cohort, out)
    if latents is not None:
        write_latents_csv(latents, [s.id for s in cohort.shapes], out / "latents.csv")
    write_config_echo(config, out)
    return out


def _ensure_cohort(config: ExperimentConfig) -> Cohort:
    cohort_dir = config.cohort_dir()
    if not (cohort_dir / "manifest.json").exists():
        cmd_preprocess(config)
    return load_cohort(cohort_dir)


def cmd_corrupt(config: ExperimentConfig) -> Path:
    """Apply the corruption spec to every shape and store the result.

    Normalization params are recomputed on the corrupted clouds so that the
    normalized frame stays inside [-1, 1] even with added noise.
    """
    cohort = _ensure_cohort(config)
    corrupted = corrupt_cohort(cohort, config.corruption)
    _, params = normalize_cohort(corrupted)
    corrupted.normalization = params
    for shape in corrupted.shapes:
        shape.mesh = None  # ground truth stays with the source cohort
    out = config.corrupted_dir()
    save_cohort(corrupted, out, source_cohort=str(config.cohort_dir()))
    write_config_echo(config, out)
    return out


def _ensure_input_cohort(config: ExperimentConfig) -> Cohort:
    target = config.input_cohort_dir()
    if not (target / "manifest.json").exists():
        if config.corruption.is_identity:
            cmd_preprocess(config)
        else:
            cmd_corrupt(config)
    return load_cohort(target)


def _effective_model_config(config: ExperimentConfig) -> ModelConfig:
    n = config.corruption.input_size_n
    if n is None:
        return config.model
    return replace(config.model, n_input=int(n))


def cmd_train(config: ExperimentConfig) -> Path:
    """Train on the (possibly corrupted) cohort; keep best-validation params."""
    cohort = _ensure_input_cohort(config)
    cohort = subset_training(
        cohort, config.corruption.train_subset_size, config.corruption.seed
    )
    if cohort.normalization is None:
        raise ConfigError("input cohort lacks normalization params; rerun preprocess")
    normalized = _apply_normalization(cohort, cohort.normalization)
    result = train(_effective_model_config(config), config.train, normalized)

    out = config.resolved_output_dir() / "train"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "checkpoint.pt")
    write_history_csv(result.history, out / "history.csv")
    (out / "summary.json").write_text(
        json.dumps(
            {
                "best_epoch": result.best_epoch,
                "best_val_cd": result.best_val_cd,
                "epochs_run": len(result.history),
            },
            indent=2,
        )
        + "\n"
    )
    write_config_echo(config, out)
    print(
        f"trained {len(result.history)} epochs; "
        f"best val CD {result.best_val_cd:.6f} at epoch {result.best_epoch}"
    )
    return out


def _checkpoint_path(config: ExperimentConfig, explicit: str | None) -> Path:
    path = Path(explicit) if explicit else config.resolved_output_dir() / "train" / "checkpoint.pt"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (run `train` first)")
    return path


def cmd_infer(
    config: ExperimentConfig,
    checkpoint: str | None = None,
    inputs: list[str] | None = None,
    out_dir: str | None = None,
    export_maps: bool = False,
) -> Path:
    """Predict correspondence points; writes one ``.particles`` per shape."""
    model = load_checkpoint(_checkpoint_path(config, checkpoint))
    out = Path(out_dir) if out_dir else config.resolved_output_dir() / "correspondences"
    out.mkdir(parents=True, exist_ok=True)

    if inputs:
        cohort = None
        params = NormalizationParams.from_json(
            config.input_cohort_dir() / "normalization.json"
        )
        items = [(Path(p).stem, read_point_file(p), None) for p in inputs]
    else:
        cohort = _ensure_input_cohort(config)
        params = cohort.normalization
        items = [(s.id, s.full_cloud(), s.split) for s in cohort.shapes]

    runtimes = []
    splits = {}
    for shape_id, cloud, split in items:
        points_mm, corr_map, runtime = infer(model, cloud, params)
        write_point_file(points_mm, out / f"{shape_id}.particles")
        if export_maps and corr_map is not None:
            export_correspondence_map(corr_map, out / f"{shape_id}_map.csv")
        runtimes.append(runtime)
        splits[shape_id] = split
    (out / "manifest.json").write_text(
        json.dumps({"splits": splits, "mean_runtime_s": float(np.mean(runtimes))},
                   indent=2)
    )
    write_config_echo(config, out)
    print(f"inferred {len(items)} shapes, mean runtime {np.mean(runtimes):.3f}s")
    return out


def _ground_truth_cohort(config: ExperimentConfig) -> Cohort:
    """The clean cohort metrics are computed against."""
    input_dir = config.input_cohort_dir()
    src = source_cohort_dir(input_dir) if (input_dir / "manifest.json").exists() else None
    return load_cohort(src) if src else load_cohort(config.cohort_dir())


def cmd_evaluate(config: ExperimentConfig, checkpoint: str | None = None) -> Path:
    """Surface-sampling metrics (CD, EMD, P2F) on the test split, in mm."""
    model = load_checkpoint(_checkpoint_path(config, checkpoint))
    input_cohort = _ensure_input_cohort(config)
    gt_cohort = _ground_truth_cohort(config)
    params = input_cohort.normalization
    want = set(config.evaluation.metrics)

    rows = []
    for shape in input_cohort.split_shapes("test"):
        points_mm, _, _ = infer(model, shape.full_cloud(), params)
        gt_shape = gt_cohort.shape_by_id(shape.id)
        gt_cloud = gt_shape.full_cloud().points
        cd = chamfer_distance_np(points_mm, gt_cloud) if "cd" in want else float("nan")
        emd = float("nan")
        if "emd" in want:
            target, _ = farthest_point_sample(
                PointCloud(gt_cloud), min(points_mm.shape[0], gt_cloud.shape[0])
            )
            source = points_mm
            if source.shape[0] > target.count:
                source = farthest_point_sample(
                    PointCloud(source), target.count
                )[0].points
            emd = earth_movers_distance(source, target.points)
        p2f_mean = p2f_max = float("nan")
        if "p2f" in want and gt_shape.mesh is not None:
            p2f = point_to_face_distance(points_mm, gt_shape.mesh)
            p2f_mean, p2f_max = float(p2f.mean()), float(p2f.max())
        rows.append(ShapeMetrics(shape.id, cd, emd, p2f_mean, p2f_max))

    out = config.resolved_output_dir() / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "metrics.csv")
    write_config_echo(config, out)
    print(f"evaluated {len(rows)} test shapes -> {out / 'metrics.csv'}")
    return out


def cmd_analyze(
    config: ExperimentConfig, correspondences: str | None = None
) -> Path:
    """Shape statistics from stored correspondence sets: compactness,
    generalization, specificity, mean shape and mode walks."""
    corr_dir = (
        Path(correspondences)
        if correspondences
        else config.resolved_output_dir() / "correspondences"
    )
    manifest_path = corr_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no correspondence manifest at {manifest_path}")
    splits = json.loads(manifest_path.read_text())["splits"]

    def sets_for(split: str) -> np.ndarray:
        ids = sorted(k for k, v in splits.items() if v == split)
        return np.stack(
            [read_point_file(corr_dir / f"{i}.particles").points for i in ids]
        )

    train_sets = sets_for("train")
    test_sets = sets_for("test")
    threshold = config.evaluation.variance_threshold

    pca = fit_pca(train_sets)
    modes, curve = compactness(pca, threshold)
    gen = generalization(pca, test_sets, threshold)
    spec = specificity(
        pca,
        train_sets,
        n_samples=config.evaluation.specificity_samples,
        threshold=threshold,
        rng=np.random.default_rng(config.evaluation.specificity_seed),
    )

    out = config.resolved_output_dir() / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    save_pca(pca, out / "pca_model.npz")
    write_compactness_csv(curve, out / "compactness.csv")
    write_point_file(mean_shape(pca), out / "mean_shape.particles")
    modes_dir = out / "modes"
    modes_dir.mkdir(exist_ok=True)
    n_walk = min(config.evaluation.mode_walk_modes, pca.eigenvalues.shape[0])
    for mode in range(n_walk):
        walk = mode_walk(pca, mode, config.evaluation.mode_walk_t_values)
        for t, pos in zip(walk.t_values, walk.positions):
            tag = f"{t:+.2f}".replace(".", "p")
            write_point_file(pos, modes_dir / f"mode{mode}_t{tag}.particles")

    summary = {
        "pca": pca_summary(pca, threshold),
        "compactness_modes": modes,
        "generalization_mean_sq": gen.mean_sq,
        "generalization_mean_per_point_mm": gen.mean_per_point_mm,
        "specificity_mean_sq": spec.mean_sq,
        "specificity_mc_stderr": spec.mc_stderr,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_config_echo(config, out)
    print(
        f"compactness={modes} modes @ {threshold:.0%}, "
        f"generalization={gen.mean_sq:.4f}, specificity={spec.mean_sq:.4f}"
    )
    return out


# ---------------------------------------------------------------------------
# Benchmark grid


def _benchmark_cells(config: ExperimentConfig) -> list[dict]:
    b = config.benchmark
    encoders = b.encoders or [config.model.encoder_kind]
    heads = b.heads or [config.model.head_kind]
    bottlenecks = b.bottlenecks or [config.model.bottleneck_kind]
    alphas = b.alphas if b.alphas is not None else [config.train.loss.alpha]
    input_sizes = b.input_sizes or [config.model.n_input]
    seeds = b.seeds if b.seeds is not None else [config.train.seed]
    cells = []
    for enc, head, bot, alpha, noise, frac, n, subset, seed in itertools.product(
        encoders, heads, bottlenecks, alphas, b.noise_sigmas_mm,
        b.partial_fractions, input_sizes, b.train_subset_sizes, seeds,
    ):
        cells.append(
            {
                "encoder": enc,
                "head": "mlp" if bot == "global" else head,
                "bottleneck": bot,
                "alpha": alpha,
                "noise_sigma_mm": noise,
                "partial_fraction": frac,
                "input_size_n": n,
                "train_subset_size": subset,
                "seed": seed,
            }
        )
    return cells


def _cell_name(cell: dict) -> str:
    def fmt(v) -> str:
        return str(v).replace(".", "p")

    return (
        f"{cell['encoder']}-{cell['head']}-{cell['bottleneck']}"
        f"-a{fmt(cell['alpha'])}-n{fmt(cell['noise_sigma_mm'])}"
        f"-f{fmt(cell['partial_fraction'])}-N{cell['input_size_n']}"
        f"-s{fmt(cell['train_subset_size'])}-seed{cell['seed']}"
    )


def _cell_config(config: ExperimentConfig, cell: dict, cell_dir: Path) -> ExperimentConfig:
    model = replace(
        config.model,
        encoder_kind=cell["encoder"],
        head_kind=cell["head"],
        bottleneck_kind=cell["bottleneck"],
        n_input=cell["input_size_n"],
        seed=cell["seed"],
    )
    loss = replace(config.train.loss, alpha=cell["alpha"])
    train_cfg = replace(config.train, loss=loss, seed=cell["seed"])
    corruption = replace(
        config.corruption,
        noise_sigma_mm=cell["noise_sigma_mm"],
        partial_fraction=cell["partial_fraction"],
        input_size_n=None,
        train_subset_size=cell["train_subset_size"],
        seed=cell["seed"],
    )
    dataset = replace(
        config.dataset,
        cohort_dir=str(config.cohort_dir()),
        corrupted_dir=str(cell_dir / "corrupted"),
    )
    return replace(
        config,
        dataset=dataset,
        model=model,
        train=train_cfg,
        corruption=corruption,
        output_dir=str(cell_dir),
    )


def _run_cell(args: tuple[dict, dict, str]) -> dict:
    config_data, cell, bench_dir = args
    config = parse_config(config_data)
    cell_dir = Path(bench_dir) / _cell_name(cell)
    cell_config = _cell_config(config, cell, cell_dir)
    train_dir = cmd_train(cell_config)
    cmd_evaluate(cell_config)
    corr_dir = cmd_infer(cell_config)
    cmd_analyze(cell_config, str(corr_dir))

    from .metrics import read_metrics_csv

    _, means = read_metrics_csv(cell_dir / "evaluation" / "metrics.csv")
    summary = json.loads((cell_dir / "analysis" / "summary.json").read_text())
    train_summary = json.loads((train_dir / "summary.json").read_text())
    return {
        "cell": _cell_name(cell),
        **cell,
        "best_epoch": train_summary["best_epoch"],
        "best_val_cd": train_summary["best_val_cd"],
        "test_cd_mm2": means.get("cd_mm2", float("nan")),
        "test_emd_mm": means.get("emd_mm", float("nan")),
        "test_p2f_mean_mm": means.get("p2f_mean_mm", float("nan")),
        "test_p2f_max_mm": means.get("p2f_max_mm", float("nan")),
        "compactness_modes": summary["compactness_modes"],
        "generalization_mean_sq": summary["generalization_mean_sq"],
        "specificity_mean_sq": summary["specificity_mean_sq"],
    }


def cmd_benchmark(config: ExperimentConfig) -> Path:
    """Run the {variants x corruption x training-size x seed} grid and emit a
    consolidated CSV report (one row per cell)."""
    _ensure_cohort(config)  # shared, built once
    cells = _benchmark_cells(config)
    bench_dir = config.resolved_output_dir() / "benchmark"
    bench_dir.mkdir(parents=True, exist_ok=True)
    config_data = dump_config(config)
    jobs = [(config_data, cell, str(bench_dir)) for cell in cells]

    if config.benchmark.workers > 1:
        with ProcessPoolExecutor(max_workers=config.benchmark.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]

    report = bench_dir / "report.csv"
    columns = list(results[0].keys())
    with open(report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(results)
    write_config_echo(config, bench_dir)
    print(f"benchmark complete: {len(results)} cells -> {report}")
    return bench_dir


# ---------------------------------------------------------------------------
# Entry point


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if args.set:
        data = apply_overrides(data, args.set)
    return parse_config(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudssm",
        description="Statistical shape models from unordered point clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="PATH=VALUE",
            help="override a config value by dot path, e.g. train.LR=0.001",
        )
        return p

    add("preprocess", "build, align, split and normalize the cohort")
    add("corrupt", "apply the corruption spec and store the corrupted cohort")
    add("train", "train the configured model")
    p_infer = add("infer", "predict correspondence points for shapes")
    p_infer.add_argument("--checkpoint", help="checkpoint path (default: train output)")
    p_infer.add_argument("--inputs", nargs="*", help="explicit .xyz/.particles files")
    p_infer.add_argument("--out", help="output directory for .particles files")
    p_infer.add_argument(
        "--export-maps", action="store_true", help="also write correspondence-map CSVs"
    )
    p_eval = add("evaluate", "compute CD/EMD/P2F metrics on the test split")
    p_eval.add_argument("--checkpoint", help="checkpoint path (default: train output)")
    p_analyze = add("analyze", "PCA statistics from correspondence outputs")
    p_analyze.add_argument("--correspondences", help="directory of .particles files")
    add("benchmark", "run the configured experiment grid")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "preprocess":
            cmd_preprocess(config)
        elif args.command == "corrupt":
            cmd_corrupt(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "infer":
            cmd_infer(
                config,
                checkpoint=args.checkpoint,
                inputs=args.inputs,
                out_dir=args.out,
                export_maps=args.export_maps,
            )
        elif args.command == "evaluate":
            cmd_evaluate(config, checkpoint=args.checkpoint)
        elif args.command == "analyze":
            cmd_analyze(config, correspondences=args.correspondences)
        elif args.command == "benchmark":
            cmd_benchmark(config)
    except (TrainingDivergedError, NumericalDivergenceError, IllConditionedError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
