"""Command-line entry point.

Exit status: 0 ok, 2 configuration/request error, 3 I/O error, 4 numeric
error. Failures print one JSON line on stderr.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional

import click
import torch

from . import checkpoint as ckpt
from .config import Config, load_config, override
from .data import STYLES, generate, load_image, read_dataset, save_image, select_contents, write_dataset
from .errors import FreeStyleError, RequestError
from .metrics import StyleScorer, evaluate, mean_record
from .pipeline import StylizeRequest, ablate, stylize, stylize_grid
from .schedule import make_linear_schedule
from .train import DiffusionTrainer, jsonl_logger, train_classifier
from .unet import StyleCondition, init_params

AXIS_ALIASES = {"levels": "apply_levels"}


def _schedule(cfg: Config):
    s = cfg.schedule
    return make_linear_schedule(s.T, s.beta_start, s.beta_end)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def parse_style(value: str, num_styles: int) -> int:
    v = value.strip().lower()
    k = int(v) if v.isdigit() else (STYLES.index(v) if v in STYLES else -1)
    if not 0 <= k < num_styles:
        raise RequestError(f"unknown style {value!r}; use 0..{num_styles - 1} or one of {STYLES[:num_styles]}")
    return k


def parse_values(axis: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise RequestError("--values must list at least one value")
    try:
        if axis == "apply_levels":
            return [frozenset(int(x) for x in v.split("+")) for v in items]
        if axis in ("sigma", "rho"):
            return [int(v) for v in items]
        return [float(v) for v in items]
    except ValueError as exc:
        raise RequestError(f"bad --values for axis {axis}: {exc}") from exc


def base_request(cfg: Config, content: torch.Tensor, style: int, sched) -> StylizeRequest:
    st = cfg.stylize
    return StylizeRequest(content, StyleCondition(style), cfg.modulation, sigma=round(st.sigma_fraction * sched.T),
                          num_steps=st.num_steps, seed=st.seed, content_mode=st.content_mode,
                          clip_denoised=st.clip_denoised)


def _load_scorer(path) -> StyleScorer:
    params, _ = ckpt.load_classifier(path)
    return StyleScorer(params)


def _contact_sheet(images: list) -> torch.Tensor:
    # one row per batch item, one column per cell
    return torch.cat([torch.cat(list(img), dim=2) for img in zip(*images)], dim=1)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="TOML config; flags override it.")
@click.pass_context
def cli(ctx, config_path):
    """Dual-stream diffusion style transfer on a synthetic benchmark."""
    ctx.obj = load_config(config_path)


@cli.command("generate-data")
@click.argument("out_dir")
@click.option("--seed", type=int)
@click.option("--samples-per-cell", type=int)
@click.pass_obj
def generate_data(cfg: Config, out_dir, seed, samples_per_cell):
    """Render the synthetic styled-shapes dataset to PNGs plus a manifest."""
    cfg = override(cfg, "data", seed=seed, samples_per_cell=samples_per_cell)
    out = _out_dir(out_dir)
    ds = generate(cfg.data)
    write_dataset(ds, out)
    cfg.echo(out)
    click.echo(json.dumps({"samples": len(ds), "out": str(out)}))


@cli.command("train")
@click.argument("data_dir")
@click.argument("out_checkpoint")
@click.option("--steps", type=int, help="Optimizer steps (overrides epochs).")
@click.option("--seed", type=int)
@click.option("--resume", type=click.Path(dir_okay=False), help="Continue from a U-Net checkpoint.")
@click.pass_obj
def train(cfg: Config, data_dir, out_checkpoint, steps, seed, resume):
    """Train the diffusion backbone."""
    cfg = override(cfg, "train", max_steps=steps, seed=seed)
    ds = read_dataset(data_dir)
    sched = _schedule(cfg)
    out = Path(out_checkpoint)
    _out_dir(out.parent)
    if resume:
        params, meta, opt = ckpt.load_unet(resume)
        trainer = DiffusionTrainer(params, sched, cfg.train, opt, step=int(meta.get("step", 0)))
    else:
        trainer = DiffusionTrainer(init_params(cfg.unet, cfg.train.seed), sched, cfg.train)
    total = cfg.train.total_steps(len(ds))

    def save(tr: DiffusionTrainer) -> None:
        ckpt.save_unet(out, tr.params, {"step": tr.step, "seed": cfg.train.seed, "config": cfg.to_dict()},
                       tr.optimizer_state())

    losses = trainer.fit(ds, steps=max(total - trainer.step, 0), log=jsonl_logger(out.with_suffix(".log.jsonl")),
                         on_checkpoint=save)
    save(trainer)
    cfg.echo(out.parent)
    click.echo(json.dumps({"step": trainer.step, "first_loss": losses[0] if losses else None,
                           "final_loss": losses[-1] if losses else None}))


@cli.command("train-classifier")
@click.argument("data_dir")
@click.argument("out_checkpoint")
@click.option("--epochs", type=int)
@click.pass_obj
def train_classifier_cmd(cfg: Config, data_dir, out_checkpoint, epochs):
    """Train the style classifier used for scoring."""
    cfg = override(cfg, "classifier", epochs=epochs)
    c = cfg.classifier
    ds = read_dataset(data_dir)
    params, acc = train_classifier(ds, epochs=c.epochs, seed=c.seed, lr=c.lr, batch_size=c.batch_size,
                                   num_classes=cfg.data.num_styles)
    out = Path(out_checkpoint)
    _out_dir(out.parent)
    ckpt.save_classifier(out, params, {"held_out_accuracy": acc, "config": cfg.to_dict()})
    cfg.echo(out.parent)
    click.echo(json.dumps({"held_out_accuracy": acc}))


def _modulation_flags(f):
    for opt in reversed([
        click.option("--style", required=True, help="Style name or id."),
        click.option("--b", "b", type=float), click.option("--s", "s", type=float),
        click.option("--n-fraction", type=float), click.option("--sigma", type=int, help="Noising depth (timestep)."),
        click.option("--steps", type=int), click.option("--seed", type=int),
        click.option("--reference", type=click.Path(dir_okay=False),
                     help="Classifier checkpoint; print metrics against the content image."),
    ]):
        f = opt(f)
    return f


def _request(cfg: Config, checkpoint, content_path, style, b, s, n_fraction, sigma, steps, seed):
    cfg = override(cfg, "modulation", b=b, s=s, n_fraction=n_fraction)
    cfg = override(cfg, "stylize", num_steps=steps, seed=seed)
    params, _, _ = ckpt.load_unet(checkpoint)
    sched = _schedule(cfg)
    content = load_image(content_path)
    params.config.check_image_size(content.shape[2], content.shape[3])
    req = base_request(cfg, content, parse_style(style, params.config.num_style_classes), sched)
    if sigma is not None:
        req = req.replace(sigma=sigma)
    return cfg, params, sched, req


@cli.command("stylize")
@click.argument("checkpoint")
@click.argument("content_image")
@click.argument("out_path")
@_modulation_flags
@click.pass_obj
def stylize_cmd(cfg: Config, checkpoint, content_image, out_path, style, b, s, n_fraction, sigma, steps, seed,
                reference):
    """Stylize one content image toward a target style."""
    cfg, params, sched, req = _request(cfg, checkpoint, content_image, style, b, s, n_fraction, sigma, steps, seed)
    out = stylize(req, params, sched)
    out_path = Path(out_path)
    _out_dir(out_path.parent)
    save_image(out[0], out_path)
    if reference:
        rec = evaluate(out, req.content_image, req.style.class_id, _load_scorer(reference))[0]
        click.echo(json.dumps(rec.to_dict(), sort_keys=True))


@cli.command("ablate")
@click.argument("checkpoint")
@click.argument("content_image")
@click.argument("out_dir")
@click.option("--axis", required=True, type=click.Choice(["b", "s", "sigma", "rho", "levels", "n_fraction"]))
@click.option("--values", required=True, help="Comma-separated; for levels join indices with '+'.")
@_modulation_flags
@click.pass_obj
def ablate_cmd(cfg: Config, checkpoint, content_image, out_dir, axis, values, style, b, s, n_fraction, sigma, steps,
               seed, reference):
    """Sweep one modulation or noise axis and write a contact sheet."""
    shown, axis = axis, AXIS_ALIASES.get(axis, axis)
    vals = parse_values(axis, values)
    cfg, params, sched, req = _request(cfg, checkpoint, content_image, style, b, s, n_fraction, sigma, steps, seed)
    metrics_fn = None
    if reference:
        scorer = _load_scorer(reference)

        def metrics_fn(img, r):
            return evaluate(img, r.content_image, r.style.class_id, scorer)

    grid = ablate(req, axis, vals, params, sched, metrics_fn)
    out = _out_dir(out_dir)
    lines = []
    for col, cell in enumerate(grid.cells):
        label = "+".join(map(str, sorted(cell.value))) if axis == "apply_levels" else str(cell.value)
        name = f"{shown}_{label}.png"
        save_image(cell.image[0], out / name)
        for rec in cell.records:
            lines.append(json.dumps({"path": name, "axis": shown, "value": label, "col": col, **rec.to_dict()},
                                    sort_keys=True))
    save_image(_contact_sheet([c.image for c in grid.cells]), out / "grid.png")
    (out / "metrics.jsonl").write_text("".join(line + "\n" for line in lines))
    cfg.echo(out)
    click.echo(json.dumps({"cells": len(grid.cells), "out": str(out)}))


@cli.command("eval")
@click.argument("checkpoint")
@click.argument("classifier")
@click.argument("data_dir")
@click.argument("out_dir")
@click.option("--num-contents", type=int, default=8, show_default=True)
@click.option("--seed", type=int)
@click.pass_obj
def eval_cmd(cfg: Config, checkpoint, classifier, data_dir, out_dir, num_contents, seed):
    """Score held-out contents across every target style."""
    cfg = override(cfg, "stylize", seed=seed)
    params, _, _ = ckpt.load_unet(checkpoint)
    scorer = _load_scorer(classifier)
    sched = _schedule(cfg)
    contents = select_contents(read_dataset(data_dir), num_contents, seed=cfg.data.seed)
    k = params.config.num_style_classes
    req = base_request(cfg, contents.images, 0, sched)
    _, records = stylize_grid(contents.images, range(k), req, params, sched, scorer)
    flat = []
    out = _out_dir(out_dir)
    with open(out / "metrics.jsonl", "w") as fh:
        for style, recs in enumerate(records):
            for i, rec in enumerate(recs):
                flat.append(rec)
                fh.write(json.dumps({"content": i, "style": style, **rec.to_dict()}, sort_keys=True) + "\n")
    summary = {"records": len(flat), **mean_record(flat).to_dict()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.echo(out)
    click.echo(json.dumps(summary, sort_keys=True))


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: Optional[list] = None) -> int:
    try:
        cli.main(args=argv, prog_name="freestyle", standalone_mode=False)
    except FreeStyleError as exc:
        return _fail(exc.exit_code, type(exc).__name__, str(exc))
    except click.exceptions.Abort:
        return _fail(1, "Aborted", "aborted")
    except click.ClickException as exc:
        return _fail(2, "UsageError", exc.format_message())
    except OSError as exc:
        return _fail(3, "StorageError", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
