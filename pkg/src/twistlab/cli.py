"""Command-line entry point: ``twistlab {train,selflabel,eval,diagnose}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PROFILES, Settings, config_fingerprint, format_config, parse_config
from .data import Dataset, gen_gaussian_mixture, load_csv, load_idx
from .errors import InvalidInputError, TwistError
from .evaluation import clustering_metrics, collapse_report, linear_probe, write_labels
from .pipeline import (
    fit,
    load_checkpoint,
    make_checkpoint,
    new_train_state,
    predict,
    save_checkpoint,
    self_label_stage,
    state_from_checkpoint,
)

log = logging.getLogger("twistlab")

COMMANDS = ("train", "selflabel", "eval", "diagnose")


@dataclass(frozen=True)
class RunConfig:
    command: str
    config_path: str | None = None
    out_dir: str = "run"
    seed: int | None = None
    checkpoint: str | None = None
    profile: str = "desk"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise InvalidInputError(f"unknown command {self.command!r}")
        if self.profile not in PROFILES:
            raise InvalidInputError(f"unknown profile {self.profile!r}")


def load_settings(rc: RunConfig) -> Settings:
    text = Path(rc.config_path).read_text() if rc.config_path else ""
    s = parse_config(text, rc.profile)
    if rc.seed is not None:
        s.seed = rc.seed
    return s


def load_dataset(s: Settings) -> Dataset:
    if s.data_source == "gaussian":
        return gen_gaussian_mixture(s.mixture_k, s.mixture_dim, s.mixture_n,
                                    s.mixture_separation, s.data_seed)
    if s.data_source == "csv":
        return load_csv(s.data_path)
    if s.data_source == "idx":
        return load_idx(s.data_path, s.labels_path or None)
    raise InvalidInputError(f"unknown data_source {s.data_source!r}")


def _require_checkpoint(rc: RunConfig):
    if not rc.checkpoint:
        raise InvalidInputError(f"{rc.command} requires --checkpoint")
    if not Path(rc.checkpoint).is_file():
        raise InvalidInputError(f"checkpoint not found: {rc.checkpoint}")
    return load_checkpoint(rc.checkpoint)


def _cmd_train(rc, s, ds, out):
    cfg = s.train_config()
    fingerprint = config_fingerprint(s)
    if rc.checkpoint:
        cp = _require_checkpoint(rc)
        if cp.fingerprint and cp.fingerprint != fingerprint:
            log.warning("resuming from a checkpoint written under a different configuration")
        state = state_from_checkpoint(cp)
    else:
        state = new_train_state(s.model_config(ds.dim), cfg)
        for name in ("metrics.jsonl", "timings.jsonl"):
            (out / name).unlink(missing_ok=True)
    fit(state, ds, cfg, out, fingerprint)
    # covers runs with no epochs left to train
    save_checkpoint(out / "checkpoint.twst", make_checkpoint(state, cfg.seed, fingerprint))


def _cmd_selflabel(rc, s, ds, out):
    state = state_from_checkpoint(_require_checkpoint(rc))
    history = []
    self_label_stage(state, ds, s.self_label_config(), s.train_config(), history=history)
    save_checkpoint(out / "selflabel.twst", make_checkpoint(state, s.seed, config_fingerprint(s)))
    with open(out / "selflabel.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _cmd_eval(rc, s, ds, out):
    if not ds.has_labels:
        raise InvalidInputError("dataset has no labels; labels are required for scoring")
    state = state_from_checkpoint(_require_checkpoint(rc))
    probs, _ = predict(state.model, ds.samples)
    pred = np.argmax(probs, axis=1)
    report = clustering_metrics(pred, ds.true_labels)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    write_labels(out / "predictions.txt", pred)
    if s.probe_epochs > 0:
        order = np.random.default_rng(s.seed).permutation(len(ds))
        cut = int(round(s.probe_train_fraction * len(ds)))
        acc = linear_probe(state.model.embed(ds.samples), ds.true_labels, order[:cut], order[cut:],
                           epochs=s.probe_epochs, lr=s.probe_lr)
        (out / "probe.json").write_text(json.dumps({"linear_probe_accuracy": acc}) + "\n")
    print(report.to_json())


def _cmd_diagnose(rc, s, ds, out):
    state = state_from_checkpoint(_require_checkpoint(rc))
    probs, feats = predict(state.model, ds.samples)
    report = collapse_report(probs, feats)
    (out / "collapse.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    with open(out / "std_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "index", "std"])
        w.writerows(("column", i, repr(v)) for i, v in enumerate(report["col_std"]))
        w.writerows(("row", i, repr(v)) for i, v in enumerate(report["row_std"]))
    metrics = Path(rc.checkpoint).with_name("metrics.jsonl")
    if metrics.is_file():
        # per-epoch curves from the training log, if it sits next to the checkpoint
        with open(out / "std_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "col_std", "row_std", "total"])
            for line in metrics.read_text().splitlines():
                rec = json.loads(line)
                w.writerow([rec["epoch"], repr(rec["col_std"]), repr(rec["row_std"]), repr(rec["total"])])


_HANDLERS = {"train": _cmd_train, "selflabel": _cmd_selflabel,
             "eval": _cmd_eval, "diagnose": _cmd_diagnose}


def run(rc: RunConfig) -> int:
    """Execute one command; artifacts go to ``rc.out_dir``."""
    s = load_settings(rc)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config").write_text(format_config(s))
    ds = load_dataset(s)
    _HANDLERS[rc.command](rc, s, ds, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twistlab", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", dest="config_path")
    p.add_argument("--out", dest="out_dir", default="run")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--profile", choices=PROFILES, default="desk")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    kwargs = {k: v for k, v in vars(args).items() if k != "verbose"}
    try:
        return run(RunConfig(**kwargs))
    except (TwistError, OSError) as exc:
        print(f"twistlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
