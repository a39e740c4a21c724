"""Command-line entry point wiring all pipeline stages.

Every subcommand reads an optional JSON run config (flags win over config
values), emits a machine-readable summary JSON on stdout, and exits 0 on full
success, 1 when any per-item failure was recorded, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from . import analysis, pipeline
from .backends import BackendDescriptor, BackendError
from .dataset import (
    DatasetError,
    assign_frequency_groups,
    build_minitrain_subset,
    load_dataset,
    save_dataset,
)
from .prompts import PromptError, build_prompt_pool, load_prompt_pools, save_prompt_pools
from .taxonomy import (
    TaxonomyError,
    TaxonomyGraph,
    build_label_partition,
    load_synset_mapping,
    select_extra_categories,
)

ENV_EXCHANGE_DIR = "DIVERGEN_EXCHANGE_DIR"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 1,
    "timeout": 60.0,
    "created_at": None,
    "dataset": None,     # default --dataset for prompts/generate
    "pools": None,       # default --pools for generate
    "references": None,  # default --references for filter
    "backends": [
        {"id": "synthetic", "kind": "image_generator", "resolution": [512, 512], "params": {}},
        {"id": "synthetic-mask", "kind": "mask_predictor", "params": {}},
        {"id": "synthetic-embed", "kind": "embedder", "params": {}},
    ],
    "prompts": {"budget_per_category": 16, "llm_dir": None, "llm_expected_prompts": 32},
    "categories": {"similarity_threshold": 0.4},
    "annotation": {"attention_threshold_fraction": 0.5, "cluster_count": 5,
                   "sample_points": 3},
    "filtration": {"metric": "inter_similarity", "threshold": 0.6},
    "compositor": {"max_paste": 20, "scale_lo": 0.1, "scale_hi": 2.0},
    "analysis": {"tau": 0.9},
    "frequency_thresholds": {"rare_max": 10, "common_max": 100},
    "minitrain_cap": 5,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: malformed JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    config = _merge(DEFAULT_CONFIG, user)
    for key in ("dataset", "pools", "references"):
        if config[key] is not None and not Path(config[key]).exists():
            raise ConfigError(f"config {path}: {key} path does not exist: {config[key]}")
    return config


def _required(flag_value, config: dict, key: str):
    value = flag_value if flag_value is not None else config.get(key)
    if value is None:
        raise ConfigError(f"--{key} is required (flag or config key)")
    return value


def _descriptors(config: dict) -> list[BackendDescriptor]:
    return [BackendDescriptor.from_json(obj) for obj in config["backends"]]


def _exchange_dir(args) -> str | None:
    return os.environ.get(ENV_EXCHANGE_DIR) or getattr(args, "exchange_dir", None)


def _summary_exit(summary: dict, args, out_dir: Path | None = None) -> int:
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    path = getattr(args, "summary", None)
    if path is None and out_dir is not None:
        path = out_dir / f"summary_{summary.get('stage', 'run')}.json"
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")
    return 1 if summary.get("failure_count", 0) else 0


def cmd_prompts(args) -> int:
    config = load_config(args.config)
    bundle = load_dataset(_required(args.dataset, config, "dataset"))
    budget = args.budget if args.budget is not None else config["prompts"]["budget_per_category"]
    llm_dir = args.llm_dir or config["prompts"]["llm_dir"]
    expected = args.llm_expected or config["prompts"]["llm_expected_prompts"]
    pools = []
    shortfalls = []
    for category in sorted(bundle.categories, key=lambda c: c.id):
        response = None
        if llm_dir is not None:
            candidate = Path(llm_dir) / f"{category.id}.txt"
            if candidate.exists():
                response = candidate.read_text(encoding="utf-8")
        pool = build_prompt_pool(category, budget, llm_response=response,
                                 expected_llm_prompts=expected)
        if response is not None and len(pool.prompts) < expected + 1:
            shortfalls.append(category.id)
        pools.append(pool)
    save_prompt_pools(pools, args.out)
    summary = {"stage": "prompts", "categories": len(pools),
               "total_budget": sum(p.budget for p in pools),
               "llm_shortfall_categories": shortfalls, "failure_count": 0}
    return _summary_exit(summary, args, Path(args.out).parent)


def cmd_categories(args) -> int:
    config = load_config(args.config)
    threshold = args.threshold if args.threshold is not None \
        else config["categories"]["similarity_threshold"]
    graph = TaxonomyGraph.from_edge_file(args.taxonomy)
    candidates = load_synset_mapping(args.candidates)
    references = load_synset_mapping(args.references)
    matches = select_extra_categories(candidates, references, graph, threshold)
    doc = {
        "threshold": threshold,
        "selected": [
            {"source_category": m.source_category, "best_target": m.best_target,
             "similarity": m.similarity}
            for m in sorted(matches, key=lambda m: m.source_category)
        ],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    summary = {"stage": "categories", "candidates": len(candidates),
               "selected": len(matches), "failure_count": 0}
    if args.partition_base:
        base = load_dataset(args.partition_base).categories
        next_id = max((c.id for c in base), default=0) + 1
        extras = []
        for i, match in enumerate(sorted(matches, key=lambda m: m.source_category)):
            extras.append(argparse.Namespace(id=next_id + i))
        partition = build_label_partition(base, extras)
        partition_doc = {
            "base_ids": list(partition.base_ids),
            "extra_ids": list(partition.extra_ids),
            "total": partition.total,
            "truncation_indices": list(partition.truncation_indices()),
        }
        partition_out = Path(args.partition_out or out.with_name("label_partition.json"))
        partition_out.write_text(json.dumps(partition_doc, indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
        summary["partition_total"] = partition.total
    return _summary_exit(summary, args, out.parent)


def cmd_generate(args) -> int:
    config = load_config(args.config)
    descriptors = _descriptors(config)
    if args.backend:
        keep = set(args.backend)
        descriptors = [d for d in descriptors
                       if d.kind.value != "image_generator" or d.id in keep]
    pools = load_prompt_pools(_required(args.pools, config, "pools"))
    categories = load_dataset(_required(args.dataset, config, "dataset")).categories
    report = pipeline.stage_generate(
        pools, categories, descriptors, args.out,
        seed=args.seed if args.seed is not None else config["seed"],
        workers=args.workers or config["workers"],
        timeout=config["timeout"],
        exchange_dir=_exchange_dir(args),
        created_at=config["created_at"],
    )
    return _summary_exit(report.to_json(), args, Path(args.out))


def cmd_annotate(args) -> int:
    config = load_config(args.config)
    annotation_cfg = config["annotation"]
    report = pipeline.stage_annotate(
        args.run, _descriptors(config), args.backend,
        strategy=args.strategy,
        attention_dir=args.attention_dir,
        threshold_fraction=annotation_cfg["attention_threshold_fraction"],
        cluster_count=annotation_cfg["cluster_count"],
        sample_count=annotation_cfg["sample_points"],
        seed=args.seed if args.seed is not None else config["seed"],
        workers=args.workers or config["workers"],
        timeout=config["timeout"],
        exchange_dir=_exchange_dir(args),
        eval_truth_dir=args.eval_truth,
    )
    return _summary_exit(report.to_json(), args, Path(args.run))


def cmd_filter(args) -> int:
    config = load_config(args.config)
    threshold = args.threshold if args.threshold is not None \
        else config["filtration"]["threshold"]
    report = pipeline.stage_filter(
        args.run, _descriptors(config), args.backend,
        references_path=args.references if args.references is not None
            else config["references"],
        references_root=args.references_root,
        threshold=threshold,
        clip_scores_path=args.clip_scores,
        workers=args.workers or config["workers"],
        timeout=config["timeout"],
        exchange_dir=_exchange_dir(args),
    )
    return _summary_exit(report.to_json(), args, Path(args.run))


def cmd_compose(args) -> int:
    config = load_config(args.config)
    comp = config["compositor"]
    size = tuple(int(v) for v in args.target_size.split("x")) if args.target_size else (512, 512)
    report = pipeline.stage_compose(
        args.pool, args.out,
        target_count=args.target_count,
        target_size=size,
        targets_path=args.targets,
        max_paste=args.max_paste if args.max_paste is not None else comp["max_paste"],
        scale_range=(
            args.scale_lo if args.scale_lo is not None else comp["scale_lo"],
            args.scale_hi if args.scale_hi is not None else comp["scale_hi"],
        ),
        seed=args.seed if args.seed is not None else config["seed"],
        sources_root=args.sources_root or _exchange_dir(args),
    )
    return _summary_exit(report.to_json(), args, Path(args.out))


def cmd_validate(args) -> int:
    report = pipeline.stage_validate(args.dataset, root=args.root,
                                     check_files=args.check_files)
    return _summary_exit(report.to_json(), args, None)


def cmd_minitrain(args) -> int:
    config = load_config(args.config)
    bundle = load_dataset(args.dataset)
    thresholds = (config["frequency_thresholds"]["rare_max"],
                  config["frequency_thresholds"]["common_max"])
    bundle = assign_frequency_groups(bundle, thresholds)
    cap = args.cap if args.cap is not None else config["minitrain_cap"]
    seed = args.seed if args.seed is not None else config["seed"]
    subset = build_minitrain_subset(bundle, cap, seed)
    save_dataset(subset, args.out)
    summary = {"stage": "minitrain", "images": len(subset.images),
               "annotations": len(subset.annotations), "failure_count": 0}
    return _summary_exit(summary, args, Path(args.out).parent)


_ANALYZE_REQUIRED = {"energy": ("logits",), "kl": ("energies_p", "energies_q"),
                     "tvg": ("ap",), "sigma": ("fits",)}


def cmd_analyze(args) -> int:
    config = load_config(args.config)
    for flag in _ANALYZE_REQUIRED[args.action]:
        if getattr(args, flag) is None:
            raise ConfigError(f"analyze {args.action} needs --{flag.replace('_', '-')}")
    tau = args.tau if args.tau is not None else config["analysis"]["tau"]
    out = Path(args.out) if args.out else None
    summary: dict = {"stage": f"analyze_{args.action}", "failure_count": 0}
    if args.action == "energy":
        records = analysis.load_logit_records(args.logits)
        text = analysis.energy_tsv(records, analysis.EnergyConfig(tau=tau))
        summary["records"] = len(records)
    elif args.action == "kl":
        fit_p = analysis.fit_gaussian(_load_energy_column(args.energies_p))
        fit_q = analysis.fit_gaussian(_load_energy_column(args.energies_q))
        kl = analysis.gaussian_kl(fit_p, fit_q)
        text = (
            "mu_p\tsigma_p\tmu_q\tsigma_q\tkl\n"
            f"{fit_p.mu:.6f}\t{fit_p.sigma:.6f}\t{fit_q.mu:.6f}\t{fit_q.sigma:.6f}\t{kl:.6f}\n"
        )
        summary["kl"] = kl
    elif args.action == "tvg":
        results = analysis.compute_tvg(analysis.load_ap_records(args.ap))
        text = analysis.tvg_tsv(results)
        summary["pairs"] = len(results)
    elif args.action == "sigma":
        rows = _load_fit_rows(args.fits)
        text = analysis.sigma_bounds_tsv(rows, k=args.k)
        summary["rows"] = len(rows)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown analyze action {args.action!r}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return _summary_exit(summary, args, out.parent if out else None)


def _load_energy_column(path: str) -> list[float]:
    values = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if line.strip():
            values.append(float(line.split("\t")[1]))
    return values


def _load_fit_rows(path: str) -> list[tuple[float, float]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = []
    for obj in doc:
        if isinstance(obj, dict):
            rows.append((float(obj["mu"]), float(obj["sigma"])))
        else:
            rows.append((float(obj[0]), float(obj[1])))
    return rows


def cmd_config(args) -> int:
    if args.print_defaults:
        print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
        return 0
    config = load_config(args.config)
    print(json.dumps(config, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divergen",
                                     description="Deterministic generative-dataset engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_dir=False):
        p.add_argument("--config", help="run-config JSON; flags override its values")
        p.add_argument("--summary", help="write the summary JSON here as well")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--exchange-dir", help=f"backend exchange dir (or ${ENV_EXCHANGE_DIR})")

    p = sub.add_parser("prompts", help="build per-category prompt pools")
    common(p)
    p.add_argument("--dataset", help="dataset JSON (or config key 'dataset')")
    p.add_argument("--budget", type=int, default=None, help="images per category")
    p.add_argument("--llm-dir", help="directory of <category_id>.txt LLM responses")
    p.add_argument("--llm-expected", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("categories", help="select extra categories by taxonomy similarity")
    common(p)
    p.add_argument("--taxonomy", required=True, help="edge list: child<TAB>parent per line")
    p.add_argument("--candidates", required=True, help="JSON name -> synset list")
    p.add_argument("--references", required=True, help="JSON name -> synset list")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--partition-base", help="dataset JSON supplying base category ids")
    p.add_argument("--partition-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_categories)

    p = sub.add_parser("generate", help="run image-generation jobs")
    common(p)
    p.add_argument("--pools", help="prompt pools JSON (or config key 'pools')")
    p.add_argument("--dataset", help="dataset JSON supplying categories (or config key)")
    p.add_argument("--backend", action="append",
                   help="restrict to this generator id (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("annotate", help="mask annotation over a run dir")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--backend", default="synthetic-mask")
    p.add_argument("--strategy", choices=["sam-bg", "sam-fg"], default="sam-bg")
    p.add_argument("--attention-dir",
                   help="grayscale attention PNGs per image id (sam-fg only)")
    p.add_argument("--eval-truth",
                   help="dir of <image_id>.png truth masks; reports mean IoU")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("filter", help="similarity filtration over an annotated run dir")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--backend", default="synthetic-embed")
    p.add_argument("--references", help="reference dataset JSON (real annotated instances)")
    p.add_argument("--references-root", help="base dir for reference image uris")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--clip-scores", help="ingest external image-text scores instead")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("compose", help="instance-paste augmentation")
    common(p)
    p.add_argument("--pool", required=True, help="filtered dataset JSON to paste from")
    p.add_argument("--sources-root",
                   help="base dir for pool image uris (default: the pool file's dir)")
    p.add_argument("--targets", help="dataset JSON of target images (default: blank canvases)")
    p.add_argument("--target-count", type=int, default=8)
    p.add_argument("--target-size", help="WxH for blank canvases (default 512x512)")
    p.add_argument("--max-paste", type=int, default=None)
    p.add_argument("--scale-lo", type=float, default=None)
    p.add_argument("--scale-hi", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("validate", help="check a dataset file's invariants")
    common(p)
    p.add_argument("dataset")
    p.add_argument("--root", help="base dir for image uris")
    p.add_argument("--check-files", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("minitrain", help="per-category capped subset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_minitrain)

    p = sub.add_parser("analyze", help="distribution-discrepancy numerics")
    common(p)
    p.add_argument("action", choices=["energy", "kl", "tvg", "sigma"])
    p.add_argument("--logits", help="JSONL of {instance_id, logits}")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--energies-p", help="energy TSV for the left distribution")
    p.add_argument("--energies-q", help="energy TSV for the right distribution")
    p.add_argument("--ap", help="JSON array of {group, task, split, value}")
    p.add_argument("--fits", help="JSON array of {mu, sigma} rows")
    p.add_argument("--k", type=float, default=3.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("config", help="show effective or default configuration")
    p.add_argument("--config")
    p.add_argument("--print-defaults", action="store_true")
    p.set_defaults(func=cmd_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, PromptError, TaxonomyError, BackendError,
            analysis.AnalysisError, pipeline.PipelineError, OSError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
