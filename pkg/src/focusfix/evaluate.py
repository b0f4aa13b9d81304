"""Held-out evaluation: objective metrics, region-restricted change stats,
simulated-judge analysis, and the beta ablation sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .finetune import FineTuneConfig, make_pairs, run_finetune
from .lora import effective_params
from .masks import MaskConfig, extract_region
from .metrics import perceptual_distance, psnr, region_change_stats, ssim
from .rewards import DefectClassifier
from .sampler import draw_initial_noise, sample_batch
from .votes import JudgeConfig, VoteRecord, min_aggregate, mos, simulated_judge, vote_classify

log = logging.getLogger(__name__)

REPORT_HEADER = "condition,seed,reward_before,reward_after,psnr,ssim,pdist,inside_change,outside_change"
AXES = ("defect", "fidelity")


@dataclass
class EvalRow:
    condition: int
    seed: int
    reward_before: float
    reward_after: float
    psnr: float
    ssim: float
    pdist: float
    inside_change: float | None
    outside_change: float | None
    votes: dict[str, VoteRecord] = field(default_factory=dict)


@dataclass
class EvalReport:
    rows: list[EvalRow]
    margin: int = 3

    def mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        return sum(vals) / len(vals) if vals else float("nan")

    @property
    def reward_gain(self) -> float:
        return self.mean("reward_after") - self.mean("reward_before")

    def mos_values(self, axis: str) -> list[float]:
        return [mos(r.votes[axis]) for r in self.rows if axis in r.votes]

    def vote_percentages(self, axis: str) -> dict[str, float]:
        labels = [vote_classify(r.votes[axis], self.margin) for r in self.rows if axis in r.votes]
        n = len(labels)
        if n == 0:
            return {}
        return {
            "improves": 100.0 * labels.count("improves") / n,
            "degrades": 100.0 * labels.count("degrades") / n,
            "similar": 100.0 * labels.count("similar") / n,
        }

    def combined_min_score(self) -> float:
        a = self.mos_values(AXES[0])
        b = self.mos_values(AXES[1])
        if not a or not b:
            return float("nan")
        return min_aggregate(a, b)

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.10g}"

        lines = [REPORT_HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        str(r.condition),
                        str(r.seed),
                        fmt(r.reward_before),
                        fmt(r.reward_after),
                        fmt(r.psnr),
                        fmt(r.ssim),
                        fmt(r.pdist),
                        fmt(r.inside_change),
                        fmt(r.outside_change),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [
            f"pairs evaluated: {len(self.rows)}",
            f"mean reward before: {self.mean('reward_before'):.4f}",
            f"mean reward after:  {self.mean('reward_after'):.4f}",
            f"mean reward gain:   {self.reward_gain:.4f}",
            f"mean psnr:  {self.mean('psnr'):.3f} dB",
            f"mean ssim:  {self.mean('ssim'):.4f}",
            f"mean pdist: {self.mean('pdist'):.5f}",
            f"mean inside-mask |change|:  {self.mean('inside_change'):.5f}",
            f"mean outside-mask |change|: {self.mean('outside_change'):.5f}",
        ]
        for axis in AXES:
            vals = self.mos_values(axis)
            if not vals:
                continue
            pct = self.vote_percentages(axis)
            lines.append(
                f"{axis} MOS: {sum(vals) / len(vals):+.4f}  "
                f"improves {pct['improves']:.1f}% / degrades {pct['degrades']:.1f}% / "
                f"similar {pct['similar']:.1f}% (margin {self.margin})"
            )
        combined = self.combined_min_score()
        lines.append(f"combined min({AXES[0]}, {AXES[1]}) score: {combined:+.4f}")
        return "\n".join(lines) + "\n"


@dataclass
class EvalConfig:
    num_pairs: int = 64
    cfg_weight: float = 1.0
    clamp_denoised: bool = True
    lora_scale: float = 1.0
    grid_pairs: int = 16
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    margin: int = 3


def eval_pairs_list(global_seed: int, num_pairs: int, num_conditions: int):
    """Held-out pairs, stream-disjoint from the fine-tuning pair list."""
    return make_pairs(global_seed, num_pairs, num_conditions, purpose="eval")


def run_eval(
    base_model,
    tuned_model,
    schedule,
    reward,
    classifier: DefectClassifier,
    mask_cfg: MaskConfig,
    pairs: list[tuple[int, int]],
    cfg: EvalConfig,
) -> EvalReport:
    """Evaluate tuned vs frozen reference on (condition, seed) pairs.

    Pure and read-only: running it twice yields identical reports.
    """
    rows = []
    dtype = next(base_model.parameters()).dtype
    for cond, seed in pairs:
        x_init = draw_initial_noise((1,) + tuple(base_model.image_shape), seed, dtype)
        conds = torch.tensor([cond])
        with torch.no_grad():
            ref = sample_batch(
                base_model, schedule, conds, x_init,
                cfg_weight=cfg.cfg_weight, clamp_denoised=cfg.clamp_denoised,
            )[0]
            gen = sample_batch(
                tuned_model, schedule, conds, x_init,
                cfg_weight=cfg.cfg_weight, clamp_denoised=cfg.clamp_denoised,
            )[0]
            heatmap = reward.heatmap_batch(ref.unsqueeze(0))[0]
            mask = extract_region(heatmap, mask_cfg)
            r_before = float(reward.score_batch(ref.unsqueeze(0))[0])
            r_after = float(reward.score_batch(gen.unsqueeze(0))[0])
        inside, outside = region_change_stats(ref, gen, mask.data)

        def defect_fn(img):
            return reward.score_batch(img.unsqueeze(0))[0]

        def fidelity_fn(img, _ref=ref):
            return torch.tensor(-perceptual_distance(_ref, img, classifier))

        votes = {
            "defect": simulated_judge(ref, gen, defect_fn, cfg.judge, item_id=(cond, seed, "d")),
            "fidelity": simulated_judge(ref, gen, fidelity_fn, cfg.judge, item_id=(cond, seed, "f")),
        }
        rows.append(
            EvalRow(
                condition=cond,
                seed=seed,
                reward_before=r_before,
                reward_after=r_after,
                psnr=psnr(ref, gen),
                ssim=ssim(ref, gen),
                pdist=perceptual_distance(ref, gen, classifier),
                inside_change=inside,
                outside_change=outside,
                votes=votes,
            )
        )
    return EvalReport(rows, margin=cfg.margin)


def write_report(report: EvalReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    csv_path.write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary_text())
    return csv_path


def eval_finetuned(
    base_model, schedule, reward, classifier, lora, mask_cfg, cfg: EvalConfig, global_seed: int
) -> EvalReport:
    """Merge the adapter at the configured inference scale and evaluate."""
    tuned = effective_params(base_model, lora, scale=cfg.lora_scale)
    pairs = eval_pairs_list(global_seed, cfg.num_pairs, base_model.num_conditions)
    return run_eval(base_model, tuned, schedule, reward, classifier, mask_cfg, pairs, cfg)


@dataclass
class AblationRow:
    beta: float
    reward_gain: float | None
    psnr: float | None
    ssim: float | None
    pdist: float | None
    error: str = ""


ABLATION_HEADER = "beta,reward_gain,psnr,ssim,pdist,error"


def ablation_table_csv(rows: list[AblationRow]) -> str:
    def fmt(v):
        return "" if v is None else f"{v:.10g}"

    lines = [ABLATION_HEADER]
    for r in rows:
        lines.append(
            f"{r.beta:.10g},{fmt(r.reward_gain)},{fmt(r.psnr)},{fmt(r.ssim)},{fmt(r.pdist)},{r.error}"
        )
    return "\n".join(lines) + "\n"


def ablation_sweep(
    base_model,
    schedule,
    reward,
    classifier,
    betas: list[float],
    ft_cfg: FineTuneConfig,
    eval_cfg: EvalConfig,
    out_dir: str | Path,
    global_seed: int,
) -> list[AblationRow]:
    """One fine-tuning run per beta on identical seeds; failures are recorded
    per beta and the sweep continues."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[AblationRow] = []
    for beta in betas:
        run_dir = out / f"beta_{beta:g}"
        try:
            cfg = replace(ft_cfg, beta=beta, method="focus_n_fix")
            state, _ = run_finetune(base_model, schedule, reward, cfg, run_dir)
            report = eval_finetuned(
                base_model, schedule, reward, classifier, state.lora, cfg.mask, eval_cfg, global_seed
            )
            write_report(report, run_dir)
            rows.append(
                AblationRow(
                    beta=beta,
                    reward_gain=report.reward_gain,
                    psnr=report.mean("psnr"),
                    ssim=report.mean("ssim"),
                    pdist=report.mean("pdist"),
                )
            )
        except Exception as exc:  # noqa: BLE001 - sweep must survive per-beta failures
            log.exception("ablation run for beta=%g failed", beta)
            rows.append(AblationRow(beta=beta, reward_gain=None, psnr=None, ssim=None, pdist=None, error=str(exc)))
    (out / "table.csv").write_text(ablation_table_csv(rows))
    return rows
