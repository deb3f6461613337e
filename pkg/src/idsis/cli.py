"""Command-line entry point.

Subcommands map one-to-one to pipeline stages: gen-data, train-fr, train,
reconstruct, swap-id, swap-style, eval-recon, eval-attack, eval-sweep,
attn-maps, plot. Every command writes its artifacts plus a manifest (config
hash + input content hashes) under its output directory, guarded by a lock
file. Exit codes: 0 success, 2 validation, 3 missing prerequisite, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import evaluation as ev
from . import plotting
from .artifacts import output_lock, write_manifest
from .config import RunConfig, config_hash, data_config, fr_config, parse_config
from .errors import IdsisError, MissingPrerequisiteError, ValidationError
from .identity import ensure_configs_independent, load_fr, save_fr, train_fr
from .pipeline import load_checkpoint
from .training import records_to_tensors, train

COMMANDS = (
    "gen-data",
    "train-fr",
    "train",
    "reconstruct",
    "swap-id",
    "swap-style",
    "eval-recon",
    "eval-attack",
    "eval-sweep",
    "attn-maps",
    "plot",
)


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="FILE", help="flat key-value config file (YAML/JSON)")
    group = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        group.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"cfg_{f.name}",
            metavar="V",
            help=argparse.SUPPRESS,
        )


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    cfg = parse_config(args.config, overrides)
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    return cfg


def _out_dir(cfg: RunConfig, args, command: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_root) / command


def _data_root(cfg: RunConfig, args) -> Path:
    return Path(args.data_root) if getattr(args, "data_root", None) else Path(cfg.dataset_root)


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingPrerequisiteError(f"{path} not found; run `idsis {producer}` first")
    return Path(path)


def _save_png(path: Path, image: np.ndarray):
    """image: (H, W, 3) float in [-1, 1] or uint8."""
    if image.dtype != np.uint8:
        image = data_mod.image_to_uint8(image)
    Image.fromarray(image).save(path)


def _load_split(cfg: RunConfig, root: Path, split: str) -> list:
    _require(root / "meta.json", "gen-data")
    return data_mod.load_dataset(root, layout="toy", split=split)


def _fr_path(cfg: RunConfig, args, role: str) -> Path:
    flag = getattr(args, f"fr_{role}", None)
    return Path(flag) if flag else Path(cfg.output_root) / f"fr-{role}" / "fr.pt"


def _model_path(cfg: RunConfig, args) -> Path:
    return Path(args.model) if getattr(args, "model", None) else Path(cfg.output_root) / "train" / "model.pt"


def cmd_gen_data(cfg: RunConfig, args) -> int:
    root = _data_root(cfg, args)
    with output_lock(root):
        count = data_mod.write_dataset(root, data_config(cfg))
        write_manifest(root, "gen-data", cfg, outputs=["images/", "masks/", "meta.json"])
    print(f"wrote {count} records to {root}")
    return 0


def cmd_train_fr(cfg: RunConfig, args) -> int:
    root = _data_root(cfg, args)
    records = _load_split(cfg, root, "train")
    frcfg = fr_config(cfg, args.role)
    other_role = "eval" if args.role == "train" else "train"
    other_path = _fr_path(cfg, args, other_role)
    if other_path.exists():
        other = load_fr(other_path)
        ensure_configs_independent(frcfg, other.cfg)
    out = _out_dir(cfg, args, f"fr-{args.role}")
    with output_lock(out):
        model = train_fr(records, frcfg, role=args.role)
        save_fr(model, out / "fr.pt")
        write_manifest(
            out,
            "train-fr",
            cfg,
            inputs={"dataset_meta": root / "meta.json"},
            outputs=["fr.pt"],
            seeds={"seed": frcfg.seed},
        )
    print(f"{args.role}-FR trained: top-1 accuracy {model.training_accuracy:.4f} -> {out / 'fr.pt'}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    root = _data_root(cfg, args)
    records = _load_split(cfg, root, "train")
    fr = load_fr(_require(_fr_path(cfg, args, "train"), "train-fr --role train"))
    out = _out_dir(cfg, args, "train")
    with output_lock(out):
        result = train(records, fr, cfg, out)
        shutil.copyfile(result.checkpoint_paths[-1], out / "model.pt")
        write_manifest(
            out,
            "train",
            cfg,
            inputs={
                "fr_train": _fr_path(cfg, args, "train"),
                "dataset_meta": root / "meta.json",
            },
            outputs=[p.name for p in result.checkpoint_paths] + ["model.pt", "metrics.jsonl"],
        )
    print(f"trained {result.iteration} iterations -> {out / 'model.pt'}")
    return 0


def _load_eval_context(cfg: RunConfig, args):
    root = _data_root(cfg, args)
    test_records = _load_split(cfg, root, "test")
    model_path = _require(_model_path(cfg, args), "train")
    bundle = load_checkpoint(model_path)
    fr_train = load_fr(_require(_fr_path(cfg, args, "train"), "train-fr --role train"))
    fr_eval = load_fr(_require(_fr_path(cfg, args, "eval"), "train-fr --role eval"))
    return test_records, bundle, fr_train, fr_eval, model_path


def _record_tensors(record, num_classes: int):
    images, masks = records_to_tensors([record], num_classes)
    return images, masks


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    test_records, bundle, fr_train, fr_eval, model_path = _load_eval_context(cfg, args)
    if not 0 <= args.index < len(test_records):
        raise ValidationError(f"--index {args.index} out of range [0, {len(test_records)})")
    record = test_records[args.index]
    x, m = _record_tensors(record, bundle.model.cfg.num_classes)
    with torch.no_grad():
        out = bundle.model.reconstruct(x, m, fr_train.embed_t(x))
        recon = out.image[0].numpy().transpose(1, 2, 0)
    scores = {
        "train-FR": float(
            np.dot(ev.embed_records(fr_train, x)[0], ev.embed_records(fr_train, out.image)[0])
        ),
        "eval-FR": float(
            np.dot(ev.embed_records(fr_eval, x)[0], ev.embed_records(fr_eval, out.image)[0])
        ),
    }
    out_dir = _out_dir(cfg, args, "reconstruct")
    with output_lock(out_dir):
        _save_png(out_dir / "input.png", record.image)
        Image.fromarray(plotting.colorize_mask(record.mask)).save(out_dir / "mask.png")
        _save_png(out_dir / "output.png", recon)
        (out_dir / "scores.json").write_text(
            json.dumps({"index": args.index, "identity_id": record.identity_id, "cosine": scores}, indent=2)
        )
        write_manifest(
            out_dir,
            "reconstruct",
            cfg,
            inputs={"model": model_path},
            outputs=["input.png", "mask.png", "output.png", "scores.json"],
        )
    print(f"reconstruction cosine: {scores}")
    return 0


def _swap_command(cfg: RunConfig, args, command: str, swap_classes: tuple[int, ...]) -> int:
    test_records, bundle, fr_train, fr_eval, model_path = _load_eval_context(cfg, args)
    n = len(test_records)
    for name, idx in (("attacker", args.attacker), ("target", args.target)):
        if not 0 <= idx < n:
            raise ValidationError(f"--{name} {idx} out of range [0, {n})")
    attacker, target = test_records[args.attacker], test_records[args.target]
    if attacker.identity_id == target.identity_id:
        raise ValidationError(
            f"attacker and target must be distinct identities, both are {attacker.identity_id}"
        )
    pair = ev.AttackPair(
        attacker_index=0,
        target_index=1,
        attacker_id=attacker.identity_id,
        target_id=target.identity_id,
    )
    records = [attacker, target]
    images, masks = records_to_tensors(records, bundle.model.cfg.num_classes)
    with torch.no_grad():
        own = bundle.model.reconstruct(
            images[:1], masks[:1], fr_train.embed_t(images[:1])
        ).image
    _, _, swapped = next(
        ev._swap_generate(bundle.model, fr_train, images, masks, [pair], swap_classes, 4)
    )
    real_embs = ev.embed_records(fr_eval, images)
    gen_emb = ev.embed_records(fr_eval, swapped)[0]
    own_np = own[0].numpy().transpose(1, 2, 0)
    swapped_np = swapped[0].numpy().transpose(1, 2, 0)
    diff = np.abs(swapped_np - own_np).mean(axis=2)
    scores = {
        "vs_target": float(np.dot(gen_emb, real_embs[1])),
        "vs_attacker": float(np.dot(gen_emb, real_embs[0])),
        "mean_abs_pixel_diff": float(diff.mean()),
    }
    out_dir = _out_dir(cfg, args, command)
    with output_lock(out_dir):
        _save_png(out_dir / "attacker.png", attacker.image)
        _save_png(out_dir / "target.png", target.image)
        _save_png(out_dir / "own_recon.png", own_np)
        _save_png(out_dir / "swapped.png", swapped_np)
        _save_png(out_dir / "diff.png", np.stack([diff * 2 - 1] * 3, axis=2))
        (out_dir / "scores.json").write_text(
            json.dumps(
                {
                    "attacker_index": args.attacker,
                    "target_index": args.target,
                    "swap_classes": list(swap_classes),
                    "scores": scores,
                },
                indent=2,
            )
        )
        write_manifest(
            out_dir,
            command,
            cfg,
            inputs={"model": model_path},
            outputs=["attacker.png", "target.png", "own_recon.png", "swapped.png", "diff.png", "scores.json"],
        )
    print(f"{command}: {scores}")
    return 0


def cmd_swap_id(cfg: RunConfig, args) -> int:
    return _swap_command(cfg, args, "swap-id", ())


def cmd_swap_style(cfg: RunConfig, args) -> int:
    if args.classes.strip().lower() == "full":
        swap_classes = ev._swap_class_indices("FullSwap")
    else:
        swap_classes = tuple(
            sorted(
                {
                    ev._swap_class_indices(name.strip().capitalize())[0]
                    for name in args.classes.split(",")
                    if name.strip()
                }
            )
        )
        if not swap_classes:
            raise ValidationError("--classes must name at least one class or 'full'")
    return _swap_command(cfg, args, "swap-style", swap_classes)


def cmd_eval_recon(cfg: RunConfig, args) -> int:
    test_records, bundle, fr_train, fr_eval, model_path = _load_eval_context(cfg, args)
    suite_eval = ev.cosine_suite(bundle.model, test_records, fr_eval, fr_train, cfg.eval_batch_size)
    suite_train = ev.cosine_suite(bundle.model, test_records, fr_train, fr_train, cfg.eval_batch_size)
    images, masks = records_to_tensors(test_records, bundle.model.cfg.num_classes)
    recons = []
    with torch.no_grad():
        for a in range(0, len(test_records), cfg.eval_batch_size):
            x, m = images[a : a + cfg.eval_batch_size], masks[a : a + cfg.eval_batch_size]
            recons.append(bundle.model.reconstruct(x, m, fr_train.embed_t(x)).image)
    recon_np = torch.cat(recons).numpy().transpose(0, 2, 3, 1)
    real_np = images.numpy().transpose(0, 2, 3, 1)
    fid = ev.frechet_feature_distance(real_np, recon_np, ev.fr_feature_extractor(fr_eval))
    payload = {
        "checkpoint": str(model_path),
        "checkpoint_iteration": bundle.manifest["iteration"],
        "n_records": len(test_records),
        "C_mean": suite_eval.mean,
        "per_model_scores": {"eval-FR": suite_eval.mean, "train-FR": suite_train.mean},
        "per_record_scores": suite_eval.per_record,
        "frechet_feature_distance": fid,
    }
    out_dir = _out_dir(cfg, args, "eval-recon")
    with output_lock(out_dir):
        (out_dir / "recon_metrics.json").write_text(json.dumps(payload, indent=2))
        write_manifest(
            out_dir, "eval-recon", cfg, inputs={"model": model_path}, outputs=["recon_metrics.json"]
        )
    print(f"mean reconstruction cosine (eval-FR): {suite_eval.mean:.4f}, frechet: {fid:.4f}")
    return 0


def _calibrate(cfg: RunConfig, test_records, fr_eval) -> float:
    impostors = ev.sample_impostor_pairs(test_records, cfg.impostor_pair_count, cfg.eval_seed)
    return ev.calibrate_threshold(fr_eval, test_records, impostors, cfg.far_target)


def cmd_eval_attack(cfg: RunConfig, args) -> int:
    test_records, bundle, fr_train, fr_eval, model_path = _load_eval_context(cfg, args)
    tau = _calibrate(cfg, test_records, fr_eval)
    pairs = ev.build_attack_pairs(test_records, cfg.attack_pair_count, cfg.eval_seed)
    result = ev.attack_success_rate(
        bundle.model, test_records, pairs, fr_eval, tau, fr_train, cfg.eval_batch_size
    )
    payload = {
        "checkpoint": str(model_path),
        "tau": tau,
        "far_target": cfg.far_target,
        "asr": result.asr,
        "n_pairs": len(pairs),
        "pair_scores": [
            {
                "attacker": p.attacker_index,
                "target": p.target_index,
                "score_target": p.score_target,
                "score_attacker": p.score_attacker,
            }
            for p in result.pairs
        ],
    }
    out_dir = _out_dir(cfg, args, "eval-attack")
    with output_lock(out_dir):
        (out_dir / "attack_metrics.json").write_text(json.dumps(payload, indent=2))
        write_manifest(
            out_dir, "eval-attack", cfg, inputs={"model": model_path}, outputs=["attack_metrics.json"]
        )
    print(f"tau (FAR {cfg.far_target}): {tau:.4f}, ASR: {result.asr:.4f}")
    return 0


def cmd_eval_sweep(cfg: RunConfig, args) -> int:
    test_records, bundle, fr_train, fr_eval, model_path = _load_eval_context(cfg, args)
    tau = _calibrate(cfg, test_records, fr_eval)
    pairs = ev.build_attack_pairs(test_records, cfg.attack_pair_count, cfg.eval_seed)
    results = ev.style_swap_sweep(
        bundle.model,
        test_records,
        pairs,
        fr_eval,
        tau,
        fr_train.trunk_features,
        fr_train,
        cfg.eval_batch_size,
    )
    out_dir = _out_dir(cfg, args, "eval-sweep")
    with output_lock(out_dir):
        ev.write_sweep_csv(out_dir / "sweep.csv", results)
        (out_dir / "sweep_metrics.json").write_text(
            json.dumps(
                {
                    "checkpoint": str(model_path),
                    "tau": tau,
                    "far_target": cfg.far_target,
                    "n_pairs": len(pairs),
                    "sweep": [
                        {
                            "swap_set": r.swap_set,
                            "asr": r.asr,
                            "perceptual_distance": r.perceptual_distance,
                        }
                        for r in results
                    ],
                },
                indent=2,
            )
        )
        write_manifest(
            out_dir,
            "eval-sweep",
            cfg,
            inputs={"model": model_path},
            outputs=["sweep.csv", "sweep_metrics.json"],
        )
    for r in results:
        print(f"{r.swap_set:10s} ASR {r.asr:.4f}  perceptual {r.perceptual_distance:.6f}")
    return 0


def cmd_attn_maps(cfg: RunConfig, args) -> int:
    test_records, bundle, fr_train, _, model_path = _load_eval_context(cfg, args)
    if not 0 <= args.index < len(test_records):
        raise ValidationError(f"--index {args.index} out of range [0, {len(test_records)})")
    record = test_records[args.index]
    x, m = _record_tensors(record, bundle.model.cfg.num_classes)
    with torch.no_grad():
        out = bundle.model.reconstruct(x, m, fr_train.embed_t(x))
    out_dir = _out_dir(cfg, args, "attn-maps")
    token_names = list(data_mod.CLASS_NAMES) + ["identity"]
    with output_lock(out_dir):
        np.savez(
            out_dir / "maps.npz",
            **{f"block_{i}": attn[0].numpy() for i, attn in enumerate(out.attention)},
        )
        _save_png(out_dir / "base.png", out.image[0].numpy().transpose(1, 2, 0))
        _save_png(out_dir / "original.png", record.image)
        (out_dir / "meta.json").write_text(
            json.dumps(
                {
                    "index": args.index,
                    "blocks": len(out.attention),
                    "block_grids": out.block_grids,
                    "tokens": token_names,
                },
                indent=2,
            )
        )
        write_manifest(
            out_dir,
            "attn-maps",
            cfg,
            inputs={"model": model_path},
            outputs=["maps.npz", "base.png", "original.png", "meta.json"],
        )
    print(f"saved attention maps for {len(out.attention)} blocks to {out_dir}")
    return 0


def cmd_plot(cfg: RunConfig, args) -> int:
    sweep_csv = Path(args.sweep_csv) if args.sweep_csv else Path(cfg.output_root) / "eval-sweep" / "sweep.csv"
    maps_dir = Path(args.maps_dir) if args.maps_dir else Path(cfg.output_root) / "attn-maps"
    have_sweep, have_maps = sweep_csv.exists(), (maps_dir / "maps.npz").exists()
    if not have_sweep and not have_maps:
        raise MissingPrerequisiteError(
            f"nothing to plot: {sweep_csv} missing (run `idsis eval-sweep`) and "
            f"{maps_dir / 'maps.npz'} missing (run `idsis attn-maps`)"
        )
    out_dir = _out_dir(cfg, args, "plot")
    outputs = []
    inputs = {}
    with output_lock(out_dir):
        if have_sweep:
            rows = plotting.read_sweep_csv(sweep_csv)
            plotting.sweep_chart(rows, out_dir / "sweep_chart.svg")
            outputs.append("sweep_chart.svg")
            inputs["sweep_csv"] = sweep_csv
        if have_maps:
            maps = np.load(maps_dir / "maps.npz")
            meta = json.loads((maps_dir / "meta.json").read_text())
            base = np.asarray(Image.open(maps_dir / "base.png").convert("RGB"))
            res = base.shape[0]
            for block_name in maps.files:
                attn = maps[block_name]  # (N, T)
                grid = int(np.sqrt(attn.shape[0]))
                for t, token in enumerate(meta["tokens"]):
                    heat = attn[:, t].reshape(grid, grid)
                    heat = np.array(
                        Image.fromarray(heat.astype(np.float32), mode="F").resize(
                            (res, res), Image.BILINEAR
                        )
                    )
                    name = f"overlay_{block_name}_{token}.png"
                    plotting.attention_overlay(base, heat, out_dir / name)
                    outputs.append(name)
            inputs["maps"] = maps_dir / "maps.npz"
        write_manifest(out_dir, "plot", cfg, inputs=inputs, outputs=outputs)
    print(f"wrote {len(outputs)} plot artifacts to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idsis",
        description="Identity-conditioned semantic image synthesis: data, training, attacks, plots.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.add_argument("--out", help="output directory (default: <output_root>/<command>)")
        p.add_argument("--data-root", help="dataset directory (default: config dataset_root)")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "write the procedural toy-face dataset")

    p = add("train-fr", cmd_train_fr, "train a face-recognition embedder")
    p.add_argument("--role", choices=("train", "eval"), required=True)
    p.add_argument("--fr-train", help="path of the train-FR checkpoint (for the independence check)")
    p.add_argument("--fr-eval", help="path of the eval-FR checkpoint (for the independence check)")

    p = add("train", cmd_train, "train the synthesis model")
    p.add_argument("--fr-train", help="train-FR checkpoint path")

    for name, fn, extra in (
        ("reconstruct", cmd_reconstruct, ("index",)),
        ("swap-id", cmd_swap_id, ("attacker", "target")),
        ("swap-style", cmd_swap_style, ("attacker", "target", "classes")),
        ("eval-recon", cmd_eval_recon, ()),
        ("eval-attack", cmd_eval_attack, ()),
        ("eval-sweep", cmd_eval_sweep, ()),
        ("attn-maps", cmd_attn_maps, ("index",)),
    ):
        p = add(name, fn, f"{name} on the test split")
        p.add_argument("--model", help="model checkpoint (default: <output_root>/train/model.pt)")
        p.add_argument("--fr-train", help="train-FR checkpoint path")
        p.add_argument("--fr-eval", help="eval-FR checkpoint path")
        if "index" in extra:
            p.add_argument("--index", type=int, default=0, help="test-split record index")
        if "attacker" in extra:
            p.add_argument("--attacker", type=int, required=True, help="test-split attacker index")
            p.add_argument("--target", type=int, required=True, help="test-split target index")
        if "classes" in extra:
            p.add_argument(
                "--classes",
                required=True,
                help="comma-separated class names to swap (skin,eyes,eyebrows,mouth,hair) or 'full'",
            )

    p = add("plot", cmd_plot, "render charts/overlays from emitted metric files")
    p.add_argument("--sweep-csv", help="sweep CSV (default: <output_root>/eval-sweep/sweep.csv)")
    p.add_argument("--maps-dir", help="attention-maps dir (default: <output_root>/attn-maps)")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.fn(cfg, args)
    except IdsisError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
