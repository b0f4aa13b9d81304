"""Command-line interface.

Subcommands: gen-data, pretrain, finetune, guide, eval, ablate, report.
Every subcommand reads one config file (--config PATH) with repeated
--set key=value overrides, writes the fully resolved config next to its
outputs, and exits 0 on success / 2 on configuration errors / 1 otherwise.
The FOCUSFIX_OUT environment variable overrides the output root.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import (
    CheckpointError,
    load_classifier,
    load_diffusion,
    save_classifier,
    save_diffusion,
    save_lora,
)
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, to_text, validate
from .data import NUM_CONDITIONS, generate_dataset, load_dataset
from .evaluate import (
    EvalConfig,
    REPORT_HEADER,
    AblationRow,
    ablation_sweep,
    ablation_table_csv,
    eval_finetuned,
    eval_pairs_list,
    run_eval,
    write_report,
)
from .finetune import FineTuneConfig, load_state, run_finetune
from .guidance import GuidanceConfig, guided_sample
from .lora import effective_params
from .masks import MaskConfig, extract_region
from .metrics import perceptual_distance, psnr, region_change_stats, ssim
from .pretrain import PretrainConfig, build_model, calibrate, pretrain, train_classifier
from .rewards import build_reward
from .sampler import SampleRequest, draw_initial_noise, sample_batch
from .schedule import ConfigurationError, make_schedule
from .seeding import derive_seed
from .votes import JudgeConfig

log = logging.getLogger("focusfix")


class StartupError(RuntimeError):
    pass


def _out_root(cfg: ExperimentConfig) -> Path:
    import os

    env = os.environ.get("FOCUSFIX_OUT")
    return Path(env) if env else Path(cfg.out_dir)


def _mask_config(cfg: ExperimentConfig) -> MaskConfig:
    m = cfg.mask
    return MaskConfig(
        threshold=m.threshold,
        min_area=m.min_area,
        max_components=m.max_components,
        dilation_radius=m.dilation_radius,
    )


def _finetune_config(cfg: ExperimentConfig) -> FineTuneConfig:
    f = cfg.finetune
    return FineTuneConfig(
        beta=f.beta,
        lr0=f.lr0,
        truncate_k=f.truncate_k,
        rank=f.rank,
        steps=f.steps,
        batch_size=f.batch_size,
        method=f.method,
        seed=cfg.seed,
        cfg_weight=f.cfg_weight,
        clamp_denoised=f.clamp_denoised,
        lora_init_scale=f.lora_init_scale,
        reward=f.reward,
        num_pairs=f.num_pairs,
        smooth_kernel=f.smooth_kernel,
        smooth_sigma=f.smooth_sigma,
        cache_references=f.cache_references,
        checkpoint_every=f.checkpoint_every,
        mask=_mask_config(cfg),
    )


def _eval_config(cfg: ExperimentConfig) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(
        num_pairs=e.num_pairs,
        cfg_weight=cfg.finetune.cfg_weight,
        clamp_denoised=cfg.finetune.clamp_denoised,
        lora_scale=e.lora_scale,
        grid_pairs=e.grid_pairs,
        judge=JudgeConfig(
            num_judges=e.judges,
            pos_threshold=e.pos_threshold,
            neg_threshold=e.neg_threshold,
            noise_sigma=e.noise_sigma,
            seed=derive_seed(cfg.seed, "judges"),
        ),
        margin=e.margin,
    )


def _echo_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.cfg").write_text(to_text(cfg))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StartupError(f"missing {what}: {path}")
    return path


def _load_pretrained(cfg: ExperimentConfig):
    root = _out_root(cfg)
    model, schedule = load_diffusion(_require(root / "pretrain" / "diffusion.fnfx", "diffusion checkpoint"))
    classifier = load_classifier(_require(root / "pretrain" / "classifier.fnfx", "classifier checkpoint"))
    reward = build_reward(cfg.finetune.reward, image_size=model.image_shape[-1], classifier=classifier)
    return model, schedule, classifier, reward


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    out = _out_root(cfg) / "dataset"
    entries = generate_dataset(
        out,
        num_images=cfg.data.num_images,
        seed=derive_seed(cfg.seed, "data"),
        p_defect=cfg.data.p_defect,
        image_size=cfg.data.image_size,
    )
    _echo_config(cfg, out)
    n_defect = sum(1 for e in entries if e.defect)
    print(f"wrote {len(entries)} images ({n_defect} defected) to {out}")
    return 0


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    from .plots import loss_curve

    root = _out_root(cfg)
    images, conds, defects, _ = load_dataset(_require(root / "dataset", "dataset directory"))
    out = root / "pretrain"
    out.mkdir(parents=True, exist_ok=True)

    schedule = make_schedule(cfg.model.num_steps, (cfg.model.noise_min, cfg.model.noise_max))
    model = build_model(
        image_shape=(3, cfg.data.image_size, cfg.data.image_size),
        num_conditions=NUM_CONDITIONS,
        num_steps=cfg.model.num_steps,
        base_channels=cfg.model.base_channels,
        emb_dim=cfg.model.emb_dim,
        seed=cfg.seed,
    )
    pcfg = PretrainConfig(
        steps=cfg.pretrain.steps,
        batch_size=cfg.pretrain.batch_size,
        lr=cfg.pretrain.lr,
        cond_dropout=cfg.pretrain.cond_dropout,
        seed=derive_seed(cfg.seed, "pretrain"),
        classifier_steps=cfg.pretrain.classifier_steps,
        classifier_lr=cfg.pretrain.classifier_lr,
        classifier_channels=cfg.pretrain.classifier_channels,
        calibration_samples=cfg.pretrain.calibration_samples,
    )
    losses = pretrain(model, schedule, images, conds, pcfg)
    save_diffusion(out / "diffusion.fnfx", model, schedule)
    with open(out / "pretrain_log.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v:.10g}\n" for i, v in enumerate(losses))
    loss_curve(losses, out / "pretrain_loss.png", title="denoiser pretraining loss")

    classifier, acc = train_classifier(images, defects, pcfg)
    save_classifier(out / "classifier.fnfx", classifier)

    reward = build_reward("defect", image_size=cfg.data.image_size)
    calibration = calibrate(reward, images, defects, pcfg)
    calibration["classifier_accuracy"] = acc
    (out / "calibration.json").write_text(json.dumps(calibration, indent=2) + "\n")
    _echo_config(cfg, out)
    print(
        f"pretrained {cfg.pretrain.steps} steps (final loss {losses[-1]:.4f}); "
        f"classifier accuracy {acc:.3f}; score threshold {calibration['score_threshold']:.4f}"
    )
    return 0


def cmd_finetune(cfg: ExperimentConfig) -> int:
    from .plots import training_curves

    model, schedule, classifier, reward = _load_pretrained(cfg)
    ft_cfg = _finetune_config(cfg)
    out = _out_root(cfg) / cfg.finetune.out_name
    resume = None
    if (out / "state.fnfx").exists():
        resume = load_state(out / "state.fnfx", model, ft_cfg)
        print(f"resuming from step {resume.step}")
    state, rows = run_finetune(model, schedule, reward, ft_cfg, out, resume_state=resume)
    save_lora(out / "lora.fnfx", state.lora, meta={"method": ft_cfg.method, "beta": ft_cfg.beta})
    if rows:
        training_curves(rows, out / "training_curves.png")
    _echo_config(cfg, out)
    print(f"fine-tuned {state.step} steps ({ft_cfg.method}, beta={ft_cfg.effective_beta:g}) -> {out}")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    from .plots import triptych_grid

    model, schedule, classifier, reward = _load_pretrained(cfg)
    root = _out_root(cfg)
    run_dir = Path(cfg.eval.run_dir) if cfg.eval.run_dir else root / cfg.finetune.out_name
    ft_cfg = _finetune_config(cfg)
    state = load_state(_require(run_dir / "state.fnfx", "fine-tune state"), model, ft_cfg)
    eval_cfg = _eval_config(cfg)
    report = eval_finetuned(
        model, schedule, reward, classifier, state.lora, _mask_config(cfg), eval_cfg, cfg.seed
    )
    out = root / cfg.eval.out_name
    write_report(report, out)

    tuned = effective_params(model, state.lora, scale=eval_cfg.lora_scale)
    pairs = eval_pairs_list(cfg.seed, min(eval_cfg.grid_pairs, eval_cfg.num_pairs), model.num_conditions)
    refs, gens, masks = [], [], []
    with torch.no_grad():
        for cond, seed in pairs:
            x0 = draw_initial_noise((1,) + tuple(model.image_shape), seed, torch.float32)
            c = torch.tensor([cond])
            ref = sample_batch(model, schedule, c, x0, cfg_weight=eval_cfg.cfg_weight)[0]
            gen = sample_batch(tuned, schedule, c, x0, cfg_weight=eval_cfg.cfg_weight)[0]
            heat = reward.heatmap_batch(ref.unsqueeze(0))[0]
            refs.append(ref)
            gens.append(gen)
            masks.append(extract_region(heat, _mask_config(cfg)).data)
    triptych_grid(refs, gens, masks, out / "eval_grid.png", max_rows=eval_cfg.grid_pairs)
    _echo_config(cfg, out)
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_guide(cfg: ExperimentConfig) -> int:
    from .plots import triptych_grid

    model, schedule, classifier, reward = _load_pretrained(cfg)
    g = cfg.guidance
    use_rc = g.preset == "rg-rc"
    gcfg = GuidanceConfig(
        scale=g.scale,
        clip_norm=g.clip_norm,
        start_step=g.start_step,
        use_region_constraint=use_rc,
        mask_cfg=_mask_config(cfg),
    )
    out_name = g.out_name or g.preset
    out = _out_root(cfg) / out_name
    out.mkdir(parents=True, exist_ok=True)
    pairs = eval_pairs_list(cfg.seed, g.num_pairs, model.num_conditions)

    def r_fn(batch):
        return reward.score_batch(batch)

    lines = [REPORT_HEADER]
    refs, gens, masks = [], [], []
    for cond, seed in pairs:
        req = SampleRequest(condition=cond, seed=seed, cfg_weight=cfg.finetune.cfg_weight)
        guided, trace, mask = guided_sample(
            model, schedule, req, r_fn, gcfg, reward=reward, return_trace=True
        )
        with torch.no_grad():
            x0 = req.initial_noise(model.image_shape, torch.float32).unsqueeze(0)
            ref = sample_batch(model, schedule, torch.tensor([cond]), x0, cfg_weight=req.cfg_weight)[0]
            r_before = float(reward.score_batch(ref.unsqueeze(0))[0])
            r_after = float(reward.score_batch(guided.unsqueeze(0))[0])
        if mask is None:
            mask = extract_region(reward.heatmap_batch(ref.unsqueeze(0))[0], _mask_config(cfg)).data
        inside, outside = region_change_stats(ref, guided, mask)
        fmt = lambda v: "" if v is None else f"{v:.10g}"
        lines.append(
            f"{cond},{seed},{r_before:.10g},{r_after:.10g},{psnr(ref, guided):.10g},"
            f"{ssim(ref, guided):.10g},{perceptual_distance(ref, guided, classifier):.10g},"
            f"{fmt(inside)},{fmt(outside)}"
        )
        refs.append(ref)
        gens.append(guided)
        masks.append(mask)
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    triptych_grid(refs, gens, masks, out / "guide_grid.png")
    _echo_config(cfg, out)
    print(f"{g.preset} guidance over {len(pairs)} pairs -> {out}")
    return 0


def cmd_ablate(cfg: ExperimentConfig) -> int:
    from .plots import tradeoff_figure

    model, schedule, classifier, reward = _load_pretrained(cfg)
    out = _out_root(cfg) / cfg.ablate.out_name
    rows = ablation_sweep(
        model,
        schedule,
        reward,
        classifier,
        cfg.ablate.betas,
        _finetune_config(cfg),
        _eval_config(cfg),
        out,
        cfg.seed,
    )
    tradeoff_figure(rows, out / "tradeoff.png")
    _echo_config(cfg, out)
    failed = [r.beta for r in rows if r.error]
    print(f"ablation over betas {cfg.ablate.betas} -> {out}" + (f" (failed: {failed})" if failed else ""))
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    from .plots import tradeoff_figure

    root = _out_root(cfg)
    input_dir = Path(cfg.report.input_dir) if cfg.report.input_dir else root / cfg.ablate.out_name
    _require(input_dir, "ablation output directory")
    rows = []
    for beta in cfg.ablate.betas:
        run_dir = input_dir / f"beta_{beta:g}"
        csv_path = run_dir / "report.csv"
        if not csv_path.exists():
            rows.append(AblationRow(beta=beta, reward_gain=None, psnr=None, ssim=None, pdist=None, error="missing report"))
            continue
        recs = csv_path.read_text().strip().splitlines()[1:]
        cols = [line.split(",") for line in recs]
        before = [float(c[2]) for c in cols]
        after = [float(c[3]) for c in cols]
        rows.append(
            AblationRow(
                beta=beta,
                reward_gain=sum(after) / len(after) - sum(before) / len(before),
                psnr=sum(float(c[4]) for c in cols) / len(cols),
                ssim=sum(float(c[5]) for c in cols) / len(cols),
                pdist=sum(float(c[6]) for c in cols) / len(cols),
            )
        )
    out = root / cfg.report.out_name
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(ablation_table_csv(rows))
    tradeoff_figure(rows, out / "tradeoff.png")
    _echo_config(cfg, out)
    print(f"report over {input_dir} -> {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "guide": cmd_guide,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focusfix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field (repeatable)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, args.overrides)
        validate(cfg)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"focusfix: error: {exc.code}: {exc.key}: {exc.message}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"focusfix: error: invalid-value: {exc}", file=sys.stderr)
        return 2
    except (StartupError, CheckpointError) as exc:
        print(f"focusfix: error: startup: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line contract for the CLI
        log.exception("command failed")
        print(f"focusfix: error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
