"""
Command-line interface for the Density OoD toolkit.

This module provides the `density-ood` command and the pipeline runner that
composes loading, normalization, splitting, optional re-basing, fitting and
evaluation into one reproducible run.
"""

import argparse
import contextlib
import dataclasses
import logging
import sys
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from density_ood import (
    dataman,
    evalkit,
    flowcore,
    flows,
    gaussmods,
    linbasis,
    reference,
    sepcheck,
    storage,
)
from density_ood.config import (
    PRESET_NAMES,
    DatasetConfig,
    ModelFamily,
    ModelSpec,
    PipelineKind,
    RunConfig,
    TrainingConfig,
    config_to_dict,
    load_config,
    preset,
)
from density_ood.errors import DensityOODError, PipelineError
from density_ood.models import (
    Dataset,
    DensityModel,
    EvalReport,
    SeparabilityCertificate,
    SplitSpec,
)

logger = logging.getLogger(__name__)

# Rows x features above which the LP certifier hands over to the SVM.
LP_SIZE_LIMIT = 50_000_000


class StageTracker:
    """Records pipeline stages and refuses OoD reads before fitting completes."""

    def __init__(self, allow_early_ood: bool = False):
        self.allow_early_ood = allow_early_ood
        self.completed: List[str] = []

    def done(self, stage: str) -> None:
        self.completed.append(stage)

    def check_ood_read(self) -> None:
        if "fit" not in self.completed and not self.allow_early_ood:
            raise PipelineError(
                "ordering", RuntimeError("OoD data requested before model fitting completed")
            )


@contextlib.contextmanager
def stage(name: str, tracker: Optional[StageTracker] = None) -> Iterator[None]:
    """Tag any toolkit or I/O failure inside the block with the stage name."""
    logger.debug("stage %s", name)
    try:
        yield
    except PipelineError:
        raise
    except (DensityOODError, OSError) as exc:
        raise PipelineError(name, exc) from exc
    if tracker is not None:
        tracker.done(name)


def load_config_dataset(cfg: DatasetConfig) -> Dataset:
    return dataman.load_dataset(cfg.paths, cfg.format, cfg.labels_paths, name=cfg.name)


@dataclasses.dataclass
class Representation:
    """Maps normalized pixels onto the features a model is fitted on."""
    kind: PipelineKind
    basis: Optional[linbasis.OrthonormalBasis] = None
    components: Optional[int] = None

    def apply(self, data: Dataset) -> Dataset:
        if self.kind is PipelineKind.SVD_REBASIS:
            return linbasis.rebasis(data, self.basis)
        if self.kind is PipelineKind.PCA_TRUNCATE:
            return linbasis.truncate(data, self.basis, self.components)
        return data

    def label(self, d: int) -> Optional[str]:
        if self.kind is PipelineKind.PCA_TRUNCATE:
            return f"{self.components}/{d}"
        return None


def fit_model(spec: ModelSpec, train: Dataset, val: Dataset, full_train: Dataset,
              training: TrainingConfig, ood: Optional[Dataset] = None,
              ) -> Tuple[DensityModel, Optional[flowcore.TrainState]]:
    """Fit the configured family; closed-form families use the unsplit training set."""
    if spec.family is ModelFamily.GAUSSIAN:
        return gaussmods.fit_gaussian(full_train, ridge=spec.ridge), None
    if spec.family is ModelFamily.PPCA:
        k = spec.latent_dim or max(1, full_train.d // 2)
        model = gaussmods.fit_ppca(full_train, k, max_iters=spec.ppca_max_iters,
                                   tol=spec.ppca_tol)
        return model, None

    model = flows.build_flow(spec, train.d)
    state = flowcore.train(model, train, val, ood, training)
    if isinstance(model, flows.MafModel) and model.batch_norm:
        flows.calibrate_batch_norm(model, np.asarray(train.features))
    return model, state


def run_experiment(config: RunConfig, write: bool = True) -> EvalReport:
    """Run load -> normalize -> split -> (re-basis) -> fit -> report for one config."""
    if config.full_scale:
        logger.warning("Preset '%s' is full scale and may run for days", config.name)
    tracker = StageTracker(allow_early_ood=config.training.monitor_ood)

    with stage("load", tracker):
        train_raw = load_config_dataset(config.train)
        test_raw = load_config_dataset(config.test)
    with stage("normalize", tracker):
        full_train = dataman.normalize(train_raw, config.normalization, seed=config.data_seed)
        test = dataman.normalize(test_raw, config.normalization, seed=config.data_seed + 1)
        if config.train_subset:
            full_train = dataman.subsample(full_train, config.train_subset, config.split_seed)
    with stage("split", tracker):
        train, val = dataman.split(full_train,
                                   SplitSpec(config.train_fraction, config.split_seed))

    representation = Representation(config.pipeline.kind, components=config.pipeline.components)
    if config.pipeline.kind is not PipelineKind.BASELINE:
        with stage("basis", tracker):
            representation.basis = linbasis.fit_basis(train)
            full_train, train, val, test = (representation.apply(ds)
                                            for ds in (full_train, train, val, test))

    def read_ood() -> Dataset:
        tracker.check_ood_read()
        with stage("load-ood", tracker):
            raw = load_config_dataset(config.ood)
            return representation.apply(
                dataman.normalize(raw, config.normalization, seed=config.data_seed + 2)
            )

    ood = read_ood() if config.training.monitor_ood else None
    with stage("fit", tracker):
        model, state = fit_model(config.model, train, val, full_train, config.training,
                                 ood=ood)
    if ood is None:
        ood = read_ood()

    with stage("evaluate", tracker):
        result = evalkit.report(model, test, ood, config.n_samples,
                                seed=config.sample_seed, bins=config.histogram_bins)
        result.pipeline = config.pipeline.kind.value
        result.components = representation.label(test_raw.d)

    if write:
        with stage("write", tracker):
            write_run(config, model, result, state, representation)
    return result


def write_run(config: RunConfig, model: DensityModel, result: EvalReport,
              state: Optional[flowcore.TrainState], representation: Representation) -> None:
    run = storage.RunDirectory(config.output_dir, config.name)
    run.write_json("config.json", config_to_dict(config))
    storage.save_model(run.file("model.bin"), model)
    if representation.basis is not None:
        storage.save_basis(run.file("basis.bin"), representation.basis)
    if state is not None:
        storage.write_curve_csv(run.file("curve.csv"), state.curve)
    run.write_json("report.json", result)
    run.write_text("report_row.txt", evalkit.to_table_row(result) + "\n")
    if config.render_svg:
        evalkit.render_histograms(result.ll_histograms, run.file("histograms.svg"),
                                  title=config.name)
        if result.per_class_ll:
            evalkit.render_boxplot(result.per_class_ll, run.file("per_class.svg"),
                                   title=config.name)
        if state is not None:
            evalkit.render_curve(state.curve, run.file("curve.svg"), title=config.name)
    run.write_manifest()
    logger.info("Wrote run artifacts to %s", run.path)


def _separability_pair(config: RunConfig) -> Tuple[Dataset, Dataset]:
    with stage("load"):
        a = dataman.normalize(load_config_dataset(config.train), config.normalization,
                              seed=config.data_seed)
        b = dataman.normalize(load_config_dataset(config.ood), config.normalization,
                              seed=config.data_seed + 2)
    return a, b


def run_separability(config: RunConfig, method: str = "auto") -> SeparabilityCertificate:
    """Certify (or fail to certify) linear separability of train vs OoD data."""
    a, b = _separability_pair(config)
    if method == "auto":
        method = "lp" if (a.n + b.n) * a.d <= LP_SIZE_LIMIT else "svm"
    with stage("separability"):
        if method == "lp":
            return sepcheck.lp_separate(a, b, config.epsilon)
        if method == "svm":
            return sepcheck.svm_separate(a, b, config.svm_max_iters, epsilon=config.epsilon)
    raise PipelineError("separability", ValueError(f"unknown method '{method}'"))


def run_probe(config: RunConfig):
    a, b = _separability_pair(config)
    with stage("probe"):
        return sepcheck.ann_probe(a, b, config.probe_components, seed=config.split_seed)


def regenerate_tables(names: Sequence[str], runs_dir: str) -> Tuple[str, List[str]]:
    """Published-vs-reproduced tables for the named runs.

    Returns the document and the names whose reports are missing; missing
    cells still get a row so partial tables are emitted.
    """
    missing: List[str] = []
    sections = []
    by_table = {}
    for name in names:
        row = reference.PUBLISHED.get(name)
        table = row.table if row else "other"
        by_table.setdefault(table, []).append(name)

    for table in sorted(by_table):
        lines = [
            f"## {table}: {reference.TABLE_TITLES.get(table, 'other runs')}",
            "",
            "| run | Test | OoD | Samp | AUC | #Params | published | bands |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for name in by_table[table]:
            published = reference.PUBLISHED.get(name)
            expected = ("N/A" if published is None else
                     f"{published.test} / {published.ood} / {published.samples or 'N/A'}"
                     f" / {published.auc} / {published.params}")
            try:
                report = storage.load_report(f"{runs_dir}/{name}/report.json")
            except DensityOODError:
                missing.append(name)
                lines.append(f"| {name} | missing | | | | | {expected} | |")
                continue
            bands = reference.bands_for(name)
            verdict = ", ".join(
                f"{b.description}: {'pass' if b.passes(report) else 'FAIL'}" for b in bands
            ) or "n/a"
            cells = evalkit.to_table_row(report).strip("| ").split(" | ")[1:]
            lines.append(f"| {name} | " + " | ".join(cells) + f" | {expected} | {verdict} |")
        sections.append("\n".join(lines))
    document = "\n\n".join(sections)
    return (document + "\n") if document else "", missing


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        config = load_config(args.config)
    elif args.preset:
        config = preset(args.preset, data_root=args.data_root)
    else:
        raise PipelineError("config", ValueError("give --config or --preset"))
    if getattr(args, "output_dir", None):
        config.output_dir = args.output_dir
    if getattr(args, "render_svg", False):
        config.render_svg = True
    if getattr(args, "progress", False):
        config.training.progress = True
    return config


def cmd_fit(args: argparse.Namespace) -> int:
    """Run one experiment end to end."""
    try:
        config = _resolve_config(args)
        result = run_experiment(config)
    except DensityOODError as exc:
        print(f"Error: {exc}")
        return 1
    print(evalkit.to_table_row(result))
    print(f"Run written to {config.output_dir}/{config.name}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Re-score a stored run against its configured test and OoD data."""
    run_dir = args.run_dir.rstrip("/")
    try:
        with stage("load"):
            config = load_config(f"{run_dir}/config.json")
            model = storage.load_model(f"{run_dir}/model.bin")
            representation = Representation(config.pipeline.kind,
                                             components=config.pipeline.components)
            if config.pipeline.kind is not PipelineKind.BASELINE:
                representation.basis = storage.load_basis(f"{run_dir}/basis.bin")
            test_raw = load_config_dataset(config.test)
            test = representation.apply(dataman.normalize(
                test_raw, config.normalization, seed=config.data_seed + 1))
            ood = representation.apply(dataman.normalize(
                load_config_dataset(config.ood), config.normalization,
                seed=config.data_seed + 2))
        with stage("evaluate"):
            result = evalkit.report(model, test, ood, args.samples,
                                    seed=config.sample_seed, bins=config.histogram_bins)
            result.pipeline = config.pipeline.kind.value
            result.components = representation.label(test_raw.d)
    except DensityOODError as exc:
        print(f"Error: {exc}")
        return 1
    if args.output:
        evalkit.write_report(result, args.output)
    print(evalkit.to_table_row(result))
    return 0


def cmd_rebasis(args: argparse.Namespace) -> int:
    """Fit and store the orthonormal basis of a training set."""
    try:
        config = _resolve_config(args)
        with stage("load"):
            train = dataman.normalize(load_config_dataset(config.train), config.normalization,
                                      seed=config.data_seed)
            train, _ = dataman.split(train, SplitSpec(config.train_fraction, config.split_seed))
        with stage("basis"):
            basis = linbasis.fit_basis(train)
            rebased = linbasis.rebasis(train, basis)
        with stage("write"):
            storage.save_basis(args.output, basis)
    except DensityOODError as exc:
        print(f"Error: {exc}")
        return 1

    dims = list(range(min(args.dims, train.d)))
    raw_kurtosis = evalkit.feature_distributions(train, dims)
    new_kurtosis = evalkit.feature_distributions(rebased, dims)
    ratio = basis.explained_variance_ratio()
    print(f"Basis of dimension {basis.dim} written to {args.output}")
    if config.pipeline.components:
        k = config.pipeline.components
        print(f"Variance kept by {k} components: {ratio[:k].sum():.4f}")
    print("dim  raw-kurtosis  rebased-kurtosis")
    for dim in dims:
        print(f"{dim:>3}  {raw_kurtosis[str(dim)]['kurtosis']:>12.3f}  "
              f"{new_kurtosis[str(dim)]['kurtosis']:>16.3f}")
    return 0


def cmd_separability(args: argparse.Namespace) -> int:
    """Check linear (and optionally nonlinear) separability of train vs OoD."""
    try:
        config = _resolve_config(args)
        certificate = run_separability(config, method=args.method)
        probe = run_probe(config) if args.probe else None
    except DensityOODError as exc:
        print(f"Error: {exc}")
        return 1
    summary = certificate.summary()
    print(f"Status: {summary['status']} ({summary['method']})")
    print(f"Misclassified: {100 * certificate.misclassified_a:.1f}% / "
          f"{100 * certificate.misclassified_b:.1f}%")
    if probe is not None:
        print(f"Probe accuracy: {100 * probe.accuracy_a:.1f}% / {100 * probe.accuracy_b:.1f}%"
              + ("" if probe.converged else " (not converged)"))
    if args.output:
        storage.write_json(args.output, {"certificate": summary,
                                         "probe": probe})
    return 0


def cmd_tables(args: argparse.Namespace) -> int:
    """Emit published-vs-reproduced tables from finished runs."""
    names = args.names or []
    document, missing = regenerate_tables(names, args.runs_dir)
    if args.output:
        with open(args.output, "w") as f:
            f.write(document)
    else:
        sys.stdout.write(document)
    if missing:
        print(f"Missing reports: {', '.join(missing)}")
    return 0


def cmd_presets(args: argparse.Namespace) -> int:
    """List the shipped presets."""
    for name in PRESET_NAMES:
        config = preset(name, data_root=args.data_root)
        flag = " (full scale)" if config.full_scale else ""
        arch = config.model.architecture or config.model.family.value
        print(f"{name:<22} {arch:<9} {config.pipeline.kind.value}{flag}")
    return 0


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Path to a JSON run configuration")
    parser.add_argument("--preset", choices=PRESET_NAMES, help="Shipped preset name")
    parser.add_argument("--data-root", default="data", help="Dataset root for presets")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI."""
    parser = argparse.ArgumentParser(
        description="Density OoD - likelihood-based out-of-distribution experiments"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    # Fit command
    fit_parser = subparsers.add_parser("fit", help="Run an experiment and write its run directory")
    _add_config_args(fit_parser)
    fit_parser.add_argument("--output-dir", help="Override the run output directory")
    fit_parser.add_argument("--render-svg", action="store_true", help="Also write SVG plots")
    fit_parser.add_argument("--progress", action="store_true", help="Show epoch progress")

    # Eval command
    eval_parser = subparsers.add_parser("eval", help="Re-score a stored run")
    eval_parser.add_argument("run_dir", help="Run directory holding config.json and model.bin")
    eval_parser.add_argument("--samples", type=int, default=0, help="Samples to draw")
    eval_parser.add_argument("--output", help="Write the report JSON here")

    # Rebasis command
    rebasis_parser = subparsers.add_parser("rebasis", help="Fit and save an orthonormal basis")
    _add_config_args(rebasis_parser)
    rebasis_parser.add_argument("--output", required=True, help="Basis file to write")
    rebasis_parser.add_argument("--dims", type=int, default=10,
                                help="Leading dimensions to compare kurtosis on")

    # Separability command
    sep_parser = subparsers.add_parser("separability", help="Certify train vs OoD separability")
    _add_config_args(sep_parser)
    sep_parser.add_argument("--method", choices=["auto", "lp", "svm"], default="auto")
    sep_parser.add_argument("--probe", action="store_true", help="Also run the tiny ANN probe")
    sep_parser.add_argument("--output", help="Write the certificate summary JSON here")

    # Tables command
    tables_parser = subparsers.add_parser("tables",
                                          help="Compare finished runs with published values")
    tables_parser.add_argument("names", nargs="*", help="Run names (preset names)")
    tables_parser.add_argument("--runs-dir", default="runs", help="Directory holding run folders")
    tables_parser.add_argument("--output", help="Write the document here instead of stdout")

    # Presets command
    presets_parser = subparsers.add_parser("presets", help="List shipped presets")
    presets_parser.add_argument("--data-root", default="data")

    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "fit":
        return cmd_fit(args)
    elif args.command == "eval":
        return cmd_eval(args)
    elif args.command == "rebasis":
        return cmd_rebasis(args)
    elif args.command == "separability":
        return cmd_separability(args)
    elif args.command == "tables":
        return cmd_tables(args)
    elif args.command == "presets":
        return cmd_presets(args)
    else:
        parser.print_help()
        return 1


if __name__ == "__main__":
    sys.exit(main())
