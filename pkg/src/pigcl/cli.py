"""Command-line entry point.

Commands:
  train      run one training configuration on a graph container
  ablate     run the 3x3 (feature x edge) augmentation grid
  gen-synth  write a synthetic block-model graph in container format
  gradcheck  compare tape gradients of the full model against finite differences
  eval       probe a saved checkpoint under the repeated-split protocol

Exit codes: 0 success, 1 configuration error, 2 data error, 3 divergence.
Configuration files are TOML with sections mirroring the training config;
unknown keys are rejected so provenance files never rot silently. The output
directory can also be set through the PIGCL_OUT environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from . import evaluation as ev
from . import noise as nz
from .encoder import Dims, load_checkpoint, params_from_checkpoint, save_checkpoint
from .graph import (GraphFormatError, generate_sbm, load_graph, make_split,
                    save_graph)
from .losses import NEGATIVES_MODES
from .training import (TrainConfig, TrainingDiverged, derive_seed, embed,
                       full_model_gradcheck, train)

PRESET_DIR = Path(__file__).parent / "presets"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    cfg: TrainConfig
    data_dir: Path | None
    out_dir: Path | None
    eval_splits: int = 20
    eval_seeds: int = 5


_TRAIN_KEYS = {
    "epochs", "lr_encoder", "wd_encoder", "lr_edge_gen", "lr_attr_gen",
    "wd_gens", "tau", "seed", "gumbel_temperature", "gumbel_anneal",
    "samples_per_epoch", "negatives_mode", "symmetrize",
    "contrast_on_projection", "row_normalize_features",
}
_AUGMENT_KEYS = {"edge_mode", "feat_mode", "random_drop_rate", "random_mask_rate"}
_DIMS_KEYS = {"hidden", "embed", "proj", "edge_hidden", "attr_hidden"}
_EVAL_KEYS = {"n_splits", "n_seeds"}


def _reject_unknown(section: str, payload: dict, allowed: set) -> None:
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"config section [{section}] has unknown keys: {sorted(unknown)}")


def load_experiment_spec(path) -> ExperimentSpec:
    path = Path(path)
    if not path.exists():
        for candidate in (PRESET_DIR / path.name, PRESET_DIR / f"{path.name}.toml"):
            if candidate.exists():
                path = candidate
                break
        else:
            raise ConfigError(f"config file not found: {path}")
    try:
        payload = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})")
    _reject_unknown("<root>", payload, {"train", "augment", "dims", "eval", "data", "output"})

    train_sec = payload.get("train", {})
    _reject_unknown("train", train_sec, _TRAIN_KEYS)
    aug_sec = payload.get("augment", {})
    _reject_unknown("augment", aug_sec, _AUGMENT_KEYS)
    dims_sec = payload.get("dims", {})
    _reject_unknown("dims", dims_sec, _DIMS_KEYS)
    eval_sec = payload.get("eval", {})
    _reject_unknown("eval", eval_sec, _EVAL_KEYS)
    data_sec = payload.get("data", {})
    _reject_unknown("data", data_sec, {"dir"})
    out_sec = payload.get("output", {})
    _reject_unknown("output", out_sec, {"dir"})

    kwargs = dict(train_sec)
    if "edge_mode" in aug_sec:
        kwargs["aug_mode_edge"] = aug_sec["edge_mode"]
    if "feat_mode" in aug_sec:
        kwargs["aug_mode_feat"] = aug_sec["feat_mode"]
    for key in ("random_drop_rate", "random_mask_rate"):
        if key in aug_sec:
            kwargs[key] = aug_sec[key]
    if dims_sec:
        kwargs["dims"] = Dims(**dims_sec)
    try:
        cfg = TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}")
    if cfg.negatives_mode not in NEGATIVES_MODES:
        raise ConfigError(f"{path}: bad negatives_mode {cfg.negatives_mode!r}")
    return ExperimentSpec(
        cfg=cfg,
        data_dir=Path(data_sec["dir"]).resolve() if "dir" in data_sec else None,
        out_dir=Path(out_sec["dir"]).resolve() if "dir" in out_sec else None,
        eval_splits=int(eval_sec.get("n_splits", 20)),
        eval_seeds=int(eval_sec.get("n_seeds", 5)),
    )


def _resolve_out(args_out, spec_out: Path | None) -> Path:
    out = args_out or os.environ.get("PIGCL_OUT") or spec_out
    if out is None:
        raise ConfigError("no output directory: pass --out, set PIGCL_OUT, "
                          "or add [output].dir to the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_data(args_data, spec_data: Path | None) -> Path:
    data = args_data or spec_data
    if data is None:
        raise ConfigError("no data directory: pass --data or add [data].dir to the config")
    return Path(data)


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    spec = load_experiment_spec(args.config)
    cfg = spec.cfg
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    data_dir = _resolve_data(args.data, spec.data_dir)
    out = _resolve_out(args.out, spec.out_dir)
    g, _ = load_graph(data_dir)

    try:
        result = train(g, cfg)
    except TrainingDiverged as e:
        arrays = {name: vals for name, vals in e.last_good.items()}
        _write_last_good(out / "last_good.bin", arrays)
        print(f"training diverged at epoch {e.epoch}; "
              f"last good parameters in {out / 'last_good.bin'}", file=sys.stderr)
        return 3

    groups = {"encoder": result.encoder.tensors()}
    if result.edge_gen is not None:
        groups["edge_gen"] = result.edge_gen.tensors()
    if result.attr_gen is not None:
        groups["attr_gen"] = result.attr_gen.tensors()
    save_checkpoint(out / "params.bin", groups)
    _write_jsonl(out / "diagnostics.jsonl", result.trace)
    meta = {"fingerprint": ev.config_fingerprint(cfg),
            "row_normalize_features": cfg.row_normalize_features,
            "seed": cfg.seed, "epochs": cfg.epochs}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    if result.edge_gen is not None:
        probs = nz.edge_drop_probs(g, result.edge_gen)
        _, _, kept = nz.sample_edge_noise(probs, cfg.gumbel_temperature,
                                          derive_seed(cfg.seed, 8))
        nz.export_edge_noise_tsv(out / "edge_noise.tsv", g, probs.values, kept)
        nz.export_edge_noise_dot(out / "edge_noise.dot", g, probs.values)
    if result.trace:
        print(f"trained {cfg.epochs} epochs; final loss {result.trace[-1]['loss']:.6f}")
    else:
        print("trained 0 epochs")
    return 0


def _write_last_good(path: Path, arrays: dict[str, np.ndarray]) -> None:
    from .autodiff import Tensor
    tensors = [Tensor(v, name=k) for k, v in arrays.items()]
    save_checkpoint(path, {"last_good": tensors})


def cmd_ablate(args) -> int:
    spec = load_experiment_spec(args.config)
    data_dir = _resolve_data(args.data, spec.data_dir)
    out = _resolve_out(args.out, spec.out_dir)
    g, _ = load_graph(data_dir)
    matrix = ev.ablation_grid(g, spec.cfg, n_splits=spec.eval_splits,
                              n_seeds=spec.eval_seeds, workers=args.workers)
    summary = ev.grid_summary(matrix, spec.cfg)
    ev.write_report_json(summary, out / "report.json")
    ev.write_grid_csv(matrix, out / "report.csv")
    if args.emit_latex:
        ev.write_grid_latex(matrix, out / "report.tex")
    for (fmode, emode), rep in matrix.items():
        print(f"feat={fmode:9s} edge={emode:9s} "
              f"acc {100 * rep.mean:.2f} +- {100 * rep.std:.2f}")
    return 0


def cmd_gen_synth(args) -> int:
    out = _resolve_out(args.out, None)
    g, splits = generate_sbm(args.size, args.blocks, args.p_in, args.p_out,
                             args.feat_dim, args.shift, args.seed)
    save_graph(g, out, splits=splits, split_seed=args.seed)
    print(f"wrote {g.num_nodes} nodes / {g.num_edges} edges to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.inject_bug:
        report = full_model_gradcheck(seed=0, corrupt=True)
        if not report.ok:
            print("injected gradient bug detected, as it should be")
            return 1
        print("injected gradient bug was NOT detected", file=sys.stderr)
        return 0  # the checker failed to catch the bug; suspicious success
    n_seeds = 3 if args.scale == "tiny" else 20
    worst = 0.0
    for seed in range(n_seeds):
        report = full_model_gradcheck(seed=seed)
        worst = max(worst, report.max_rel_err)
        status = "ok" if report.ok else "FAIL"
        print(f"seed {seed:2d}: max rel err {report.max_rel_err:.3e} [{status}]")
        if not report.ok:
            print(report.summary(), file=sys.stderr)
            return 1
    print(f"all {n_seeds} seeds ok (worst rel err {worst:.3e})")
    return 0


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    g, container_splits = load_graph(data_dir)
    if g.labels is None:
        raise GraphFormatError(f"{data_dir}: labels.csv required for evaluation")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params = params_from_checkpoint(load_checkpoint(ckpt))

    meta_path = ckpt.parent / "run_meta.json"
    row_normalize = False
    if meta_path.exists():
        row_normalize = bool(json.loads(meta_path.read_text())
                             .get("row_normalize_features", False))
    cfg = TrainConfig(epochs=0, row_normalize_features=row_normalize)
    z = embed(g, cfg, params)

    accuracies = []
    if args.splits is not None:
        masks = _load_split_file(Path(args.splits), g.num_nodes)
        accuracies.append(ev.linear_probe(z, g.labels, masks, l2=args.l2))
    else:
        for rep in range(args.repeats):
            masks = make_split(g.num_nodes, derive_seed(args.split_seed, rep))
            accuracies.append(ev.linear_probe(z, g.labels, masks, l2=args.l2))
    report = ev.EvalReport.from_accuracies(accuracies, fingerprint=str(ckpt))
    if args.out:
        out = _resolve_out(args.out, None)
        ev.write_report_json(report, out / "report.json")
    print(f"accuracy {100 * report.mean:.2f} +- {100 * report.std:.2f} "
          f"over {len(accuracies)} run(s)")
    return 0


def _load_split_file(path: Path, num_nodes: int):
    from .graph import SplitMasks
    if not path.exists():
        raise GraphFormatError(f"{path}: split file not found")
    payload = json.loads(path.read_text())
    masks = {}
    for key in ("train", "val", "test"):
        if key not in payload:
            raise GraphFormatError(f"{path}: missing field '{key}'")
        mask = np.zeros(num_nodes, dtype=bool)
        mask[np.asarray(payload[key], dtype=np.int64)] = True
        masks[key] = mask
    return SplitMasks(**masks)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pigcl",
        description="graph contrastive learning with learnable noise augmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True, help="TOML config file or preset name")
    p.add_argument("--data", help="graph container directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the 3x3 augmentation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--emit-latex", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-synth", help="generate a synthetic block-model container")
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--size", type=int, required=True, help="nodes per block")
    p.add_argument("--p-in", type=float, required=True)
    p.add_argument("--p-out", type=float, required=True)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--feat-dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--scale", choices=("tiny", "default"), default="default")
    p.add_argument("--inject-bug", action="store_true",
                   help="negative control: corrupt a backward rule on purpose")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="probe a checkpoint under repeated splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", help="explicit splits.json to evaluate once")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except GraphFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
