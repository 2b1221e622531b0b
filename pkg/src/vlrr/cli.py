"""Command-line interface.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from . import harness
from .data import synth_dataset
from .dataset_io import save_dataset
from .errors import VlrrError
from .ops import limit_threads
from .plan import load_plan, with_overrides
from .rng import RandomState

EXIT_INTERNAL = 1
EXIT_USER = 2


class UserError(click.ClickException):
    exit_code = EXIT_USER


def _guard(fn, *args, **kwargs):
    try:
        with limit_threads():
            return fn(*args, **kwargs)
    except (VlrrError, FileNotFoundError, IsADirectoryError) as exc:
        raise UserError(str(exc)) from None


def _echo_pairs(pairs: dict) -> None:
    for k, v in pairs.items():
        click.echo(f"{k} = {v}")


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose: int):
    """Very-low-resolution recognition: training engine and experiment harness."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@click.option("--classes", type=int, default=8, show_default=True)
@click.option("--per-class", type=int, default=63, show_default=True)
@click.option("--side", type=int, default=32, show_default=True)
@click.option("--train", "n_train", type=int, default=None, help="Samples in the training file (rest go to test).")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def synth(classes, per_class, side, n_train, seed, out):
    """Write the synthetic glyph dataset as train.vlrd / test.vlrd."""

    def go():
        ds = synth_dataset(classes, per_class, side, RandomState(seed), n_train=n_train)
        train, test = ds.split()
        Path(out).mkdir(parents=True, exist_ok=True)
        return {
            "train.count": len(train),
            "test.count": len(test),
            "sha256.train.vlrd": save_dataset(train, Path(out) / "train.vlrd"),
            "sha256.test.vlrd": save_dataset(test, Path(out) / "test.vlrd"),
        }

    _echo_pairs(_guard(go))


@main.command()
@click.option("--input", "input_path", type=click.Path(), required=True, help="HR dataset (VLRD).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
@click.option("--scale", type=int, default=4, show_default=True, help="Downsampling factor s.")
@click.option("--sp-fraction", type=float, default=0.0, show_default=True, help="Salt-and-pepper fraction.")
def prepare(input_path, out, seed, scale, sp_fraction):
    """Degrade an HR dataset into LR images and LR/HR pairs; print a manifest."""
    _echo_pairs(_guard(harness.prepare, input_path, out, seed, scale, sp_fraction))


def _plan(path, seed, out):
    plan = load_plan(path)
    return with_overrides(plan, seed=seed, out=str(Path(out).resolve()) if out else None)


@main.command()
@click.option("--plan", "plan_path", type=click.Path(), required=True)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the plan seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Override the plan output directory.")
def run(plan_path, seed, out):
    """Train the plan's model variant end to end and write checkpoints and metrics."""

    def go():
        plan = _plan(plan_path, seed, out)
        result = harness.run_plan(plan)
        return {
            "out": plan.resolve(plan.out),
            "val.top1": result.val_error,
            **{f"test.top{k}": v for k, v in result.test_errors.items()},
        }

    _echo_pairs(_guard(go))


@main.command(name="eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--data", type=click.Path(), required=True, help="Dataset of LR images (VLRD).")
@click.option("--scale", type=int, default=None, help="Degrade full-size images by this factor first.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Also write eval.txt here.")
def eval_cmd(checkpoint, data, scale, out):
    """Top-1/top-5 error of a checkpoint; dual checkpoints use their decoupled LR channel."""

    def go():
        report = harness.evaluate_checkpoint(checkpoint, data, scale)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "eval.txt").write_text("".join(f"{k} = {v}\n" for k, v in report.items()))
        return report

    _echo_pairs(_guard(go))


@main.command()
@click.option("--plan", "plan_path", type=click.Path(), required=True)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--jobs", type=click.IntRange(1, None), default=1, show_default=True,
              help="Parallel trial workers (speculative evaluation of the next trials).")
@click.option("--oracle", type=click.Choice(["l1"]), default=None,
              help="Replace training with the synthetic |c - (0.5, 0.75, 0.75)|_1 error.")
def search(plan_path, seed, out, jobs, oracle):
    """Greedy deep-to-shallow search over coupled ratios; writes search.csv."""

    def go():
        plan = _plan(plan_path, seed, out)
        best, err, history, table = harness.search_plan(plan, jobs=jobs, oracle=oracle)
        click.echo(table, nl=False)
        return {"best.c": ",".join(f"{v:.2f}" for v in best), "best.top1_error": err, "trials": len(history)}

    _echo_pairs(_guard(go))


@main.command()
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
@click.option("--quick", is_flag=True, help="Fewer random shapes per check.")
def selfcheck(seed, quick):
    """Run the gradient and invariant suites; exit 1 if any check fails."""
    from .selfcheck import run_all

    results = _guard(run_all, seed, 5 if quick else 20)
    failed = 0
    for name, ok, detail in results:
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    if failed:
        click.echo(f"{failed} check(s) failed", err=True)
        sys.exit(EXIT_INTERNAL)


def run_cli(argv=None) -> int:
    """Entry point mapping unexpected exceptions to exit code 1."""
    try:
        main.main(args=argv, prog_name="vlrr", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return 0


def entry() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    entry()
