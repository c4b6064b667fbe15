"""``msanet generate|train|eval|viz`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import build_backbone
from .checkpoint import apply_checkpoint, checkpoint_crc, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .correspondence import block_energy, correlation_tensor
from .dataset import DatasetManifest, generate_synthetic_dataset, load_dataset, manifest_checksum
from .episodes import Episode, FoldSpec, episode_from_indices, sample_episode
from .evaluation import THRESHOLD, evaluate, oracle_predictor
from .guidance import prior_mask
from .model import MetaLearner, build_model
from .netpbm import to_gray8, write_pgm
from .trainer import pretrain_backbone, smoothed, train

logger = logging.getLogger("msanet")

COMMANDS = ("generate", "train", "eval", "viz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msanet", description="Few-shot segmentation meta-learner on synthetic data.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (dataset directory for 'generate')")
    p.add_argument("--dump-masks", action="store_true", help="eval: write predicted and ground-truth PGMs")
    p.add_argument("--oracle-gt", action="store_true", help="eval: score the ground truth itself (testing hook)")
    p.add_argument("--episode", help="viz: manifest indices 'query,support[,support...]'")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _overrides(extra: Sequence[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into config overrides."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
                raise UsageError(f"option --{key} needs a value")
            val = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def resolve_config(args: argparse.Namespace, extra: Sequence[str]) -> RunConfig:
    overrides = _overrides(extra)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["data_dir" if args.command == "generate" else "out_dir"] = args.out
    if args.episode is not None:
        overrides["viz_indices"] = args.episode
    return RunConfig.load(args.config, overrides)


# ----------------------------------------------------------------- commands


def _load_manifest(cfg: RunConfig) -> DatasetManifest:
    path = Path(cfg.data_dir)
    if not path.exists():
        raise FileNotFoundError(f"dataset directory {path} not found (run 'msanet generate' first)")
    return load_dataset(path)


def _foldspec(cfg: RunConfig, manifest: DatasetManifest) -> FoldSpec:
    return FoldSpec(manifest.classes, cfg.fold, cfg.folds)


def _warn_query_only(cfg: RunConfig) -> None:
    if not (cfg.multi_similarity or cfg.attention or cfg.prototype or cfg.prior_mask):
        logger.warning("all guidance modules are off: the decoder only sees query features")


def _restore_model(cfg: RunConfig) -> MetaLearner:
    model = build_model(cfg.backbone_config(), cfg.model_config())
    apply_checkpoint(model, load_checkpoint(cfg.checkpoint_path()))
    return model


def cmd_generate(cfg: RunConfig) -> int:
    manifest = generate_synthetic_dataset(cfg.dataset_config(), cfg.data_dir)
    print(
        f"wrote {len(manifest)} samples ({cfg.classes} classes x {cfg.samples_per_class}) "
        f"of {cfg.image_size}x{cfg.image_size} to {cfg.data_dir}"
    )
    print(f"manifest checksum {manifest_checksum(cfg.data_dir)}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _warn_query_only(cfg)
    tcfg = cfg.train_config()
    manifest = _load_manifest(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = build_backbone(cfg.backbone_config())
    if cfg.backbone_pretrain_steps:
        losses = pretrain_backbone(
            backbone, manifest, _foldspec(cfg, manifest), cfg.backbone_pretrain_steps, seed=cfg.seed
        )
        print(f"backbone pretraining: {len(losses)} steps, final loss {losses[-1]:.4f}")
    model = build_model(model_cfg=cfg.model_config(), backbone=backbone)
    result = train(tcfg, manifest, model, log_path=out / "loss.csv")
    ckpt = cfg.checkpoint_path()
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model)
    (out / "config.txt").write_text(cfg.to_text())
    if result.losses:
        window = max(1, round(100 / tcfg.batch_size))
        s = smoothed(result.losses, window)
        print(f"trained {result.episodes_seen} episodes in {len(result.losses)} steps; "
              f"loss {s[0]:.4f} -> {s[-1]:.4f} (smoothed over {window} steps)")
    else:
        print("trained 0 episodes; checkpoint holds the initial weights")
    print(f"checkpoint {ckpt} crc32 {checkpoint_crc(ckpt):08x}")
    return 0


def cmd_eval(cfg: RunConfig, dump_masks: bool = False, oracle_gt: bool = False) -> int:
    manifest = _load_manifest(cfg)
    foldspec = _foldspec(cfg, manifest)
    predictor = oracle_predictor if oracle_gt else _restore_model(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    on_episode = None
    if dump_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)

        def on_episode(run: int, i: int, episode: Episode, pred: np.ndarray) -> None:
            stem = f"run{run}_{i:04d}_c{episode.class_id:02d}"
            write_pgm(mask_dir / f"{stem}_pred.pgm", (pred > 0).astype(np.uint8) * 255)
            write_pgm(mask_dir / f"{stem}_gt.pgm", (episode.query_mask > 0).astype(np.uint8) * 255)

    report = evaluate(
        predictor, manifest, foldspec,
        episodes_per_run=cfg.eval_episodes, runs=cfg.eval_runs, base_seed=cfg.seed,
        K=cfg.shots, workers=cfg.workers, mode=cfg.iou_mode, on_episode=on_episode,
    )
    (out / "eval_report.txt").write_text(report.to_text())
    (out / "eval_report.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_text())
    return 0


def _viz_episode(cfg: RunConfig, manifest: DatasetManifest) -> Episode:
    if cfg.viz_indices.strip():
        try:
            idx = [int(t) for t in cfg.viz_indices.split(",")]
        except ValueError:
            raise ConfigError(f"viz_indices = {cfg.viz_indices!r}: expected comma-separated integers") from None
        if len(idx) < 2:
            raise ConfigError("viz_indices needs a query index followed by at least one support index")
        bad = [i for i in idx if not 0 <= i < len(manifest)]
        if bad:
            raise ConfigError(f"viz_indices {bad} outside the manifest (0..{len(manifest) - 1})")
        return episode_from_indices(manifest, idx[1:], idx[0])
    rng = np.random.default_rng(cfg.seed)
    return sample_episode(manifest, _foldspec(cfg, manifest), "test", cfg.shots, rng)


def cmd_viz(cfg: RunConfig) -> int:
    manifest = _load_manifest(cfg)
    episode = _viz_episode(cfg, manifest)
    model = _restore_model(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    pyr_q = model.backbone.extract_features(episode.query_image[None])
    corr, prior = [], []
    for img, mask in zip(episode.support_images, episode.support_masks):
        pyr_s = model.backbone.extract_features(img[None])
        corr.append(correlation_tensor(pyr_q, pyr_s, mask[None])[0])
        prior.append(prior_mask(pyr_q.block_output(-1), pyr_s.block_output(-1), mask[None])[0, 0])
    energies = block_energy(np.mean(corr, axis=0), pyr_q.block_of_layer)
    written = []
    for b, energy in enumerate(energies):
        name = f"corr_b{b + 2}.pgm"
        write_pgm(out / name, to_gray8(energy))
        written.append(name)
    write_pgm(out / "prior.pgm", to_gray8(np.mean(prior, axis=0)))
    probs = model.predict_proba(episode.query_image, episode.support_images, episode.support_masks)
    write_pgm(out / "pred.pgm", to_gray8((probs[1] > THRESHOLD).astype(np.float64)))
    written += ["prior.pgm", "pred.pgm"]
    print(f"episode class {episode.class_id}: query {episode.query_index}, supports {list(episode.support_indices)}")
    print(f"wrote {', '.join(written)} to {out}")
    return 0


# --------------------------------------------------------------------- main


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = _parser().parse_known_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = resolve_config(args, extra)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, dump_masks=args.dump_masks, oracle_gt=args.oracle_gt)
        return cmd_viz(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"msanet: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: I/O, corrupt files, divergence
        print(f"msanet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
