"""Operator command line: dataset generation, training, evaluation,
diagnostics, and self-verification.

Subcommands::

    tirg generate  --out DIR [--config PATH] [--set section.key=value ...]
    tirg train     --data DIR --out DIR [--config PATH] [--strategy S]
                   [--iterations N] [--seeds N] [--set ...]
    tirg eval      --checkpoint PATH --data DIR [--config PATH] [--out DIR]
                   [--split NAME] [--ks LIST] [--set ...]
    tirg diagnose  --checkpoint PATH --data DIR [--config PATH] [--out DIR]
                   [--set ...]
    tirg selfcheck

Exit codes: 0 success, 1 verification/run failure, 2 usage or config error,
3 data error (missing/corrupt files, mismatched checkpoints).

Every command that writes an output directory drops the resolved config
snapshot (config.resolved.ini) next to its outputs, and eval/diagnose read
that snapshot back by default, so a checkpoint directory is self-describing.
All outputs are deterministic given (config, seed); wall-clock timings appear
on the console only, never in files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import figures
from .config import (ConfigError, RunConfig, SNAPSHOT_NAME, load_config,
                     write_snapshot)
from .css import (CONDITION_TABLES, DatasetConfig, apply_modification,
                  build_dataset, load_manifest, manifest_to_json, render_2d,
                  write_dataset)
from .encoders import build_vocabulary, tokenize
from .metric_learning import (LossConfig, TrainingDiverged, build_negative_sets,
                              loss, loss_soft_triplet_form, train)
from .model import RetrievalModel
from .retrieval_eval import (EmbeddedDatabase, build_eval_queries,
                             embed_database, evaluate, recall_from_embeddings,
                             target_ranks)

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "log.jsonl"


class UsageError(Exception):
    """Operator error that is not a malformed config document."""


class SelfcheckFailure(Exception):
    """One verification suite found a discrepancy."""


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects section.key=value, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def _config_for(args: argparse.Namespace,
                extra: Mapping[str, str] = {}) -> RunConfig:
    overrides = _parse_overrides(getattr(args, "set", None))
    overrides.update(extra)
    return load_config(args.config, overrides)


def _config_near_checkpoint(args: argparse.Namespace,
                            extra: Mapping[str, str] = {}) -> RunConfig:
    """eval/diagnose config source: --config flag, else the snapshot written
    next to the checkpoint at training time."""
    if args.config is None:
        snapshot = Path(args.checkpoint).parent / SNAPSHOT_NAME
        if not snapshot.is_file():
            raise UsageError(
                f"no {SNAPSHOT_NAME} next to {args.checkpoint}; pass --config")
        args.config = snapshot
    return _config_for(args, extra)


def _load_split(data_dir: Path, split: str, canvas_px: int):
    path = Path(data_dir) / f"{split}.json"
    if not path.is_file():
        raise FileNotFoundError(f"no {split}.json under {data_dir}")
    return load_manifest(path, split=split, canvas_px=canvas_px)


def _load_model(config: RunConfig, checkpoint: Path) -> RetrievalModel:
    model = RetrievalModel(config.model, build_vocabulary(), seed=config.train.seed)
    try:
        model.load(checkpoint)
    except ValueError as exc:
        raise ValueError(
            f"checkpoint {checkpoint} does not fit the configured model "
            f"(strategy {config.model.strategy!r}): {exc}") from None
    return model


def _write_log(log: Sequence[Mapping[str, object]], path: Path) -> None:
    lines = [json.dumps(record, sort_keys=True) for record in log]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_log(path: Path) -> List[Dict[str, object]]:
    return [json.loads(line) for line in
            path.read_text(encoding="utf-8").splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    config = _config_for(args)
    out = Path(args.out)
    train_manifest, test_manifest = build_dataset(config.dataset)
    out.mkdir(parents=True, exist_ok=True)
    counts = write_dataset(train_manifest, test_manifest, out)
    write_snapshot(config, out)
    print(f"wrote {out}")
    for manifest in (train_manifest, test_manifest):
        print(f"  {manifest.split}: {counts[manifest.split + '_scenes']} images, "
              f"{counts[manifest.split + '_queries']} queries "
              f"(condition {manifest.condition})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _final_record(log: Sequence[Mapping[str, object]]) -> Mapping[str, object]:
    if not log:
        raise ValueError("training produced an empty log")
    return log[-1]


def _train_one(config: RunConfig, manifest, out_dir: Path) -> Dict[str, object]:
    """One seed: checkpoint + JSON-lines log + snapshot + figures in out_dir."""
    result = train(config.train, manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.model.save(out_dir / CHECKPOINT_NAME)
    _write_log(result.log, out_dir / LOG_NAME)
    write_snapshot(config, out_dir)
    label = f"{config.model.strategy} seed {config.train.seed}"
    figures.write_log_csv(result.log, out_dir / "log.csv")
    figures.plot_training_curves({label: result.log}, out_dir / "curves.png")
    if config.model.strategy == "tirg":
        figures.plot_identity_trajectory({label: result.log},
                                         out_dir / "identity.png")
    final = _final_record(result.log)
    print(f"  seed {config.train.seed}: loss {final['loss']:.4f} | "
          f"held-out R@1 {final['r1']:.1f} | {config.train.iterations} iterations")
    return dict(final)


def cmd_train(args: argparse.Namespace) -> int:
    extra: Dict[str, str] = {}
    if args.strategy is not None:
        extra["model.strategy"] = args.strategy
    if args.iterations is not None:
        extra["train.iterations"] = str(args.iterations)
    config = _config_for(args, extra)
    manifest = _load_split(Path(args.data), "train", config.dataset.canvas_px)
    out = Path(args.out)

    if args.seeds is None:
        print(f"training {config.model.strategy} on {len(manifest.queries)} queries")
        _train_one(config, manifest, out)
        return 0

    if args.seeds < 1:
        raise UsageError(f"--seeds must be at least 1, got {args.seeds}")
    base = config.train.seed
    seeds = list(range(base, base + args.seeds))
    print(f"training {config.model.strategy} on {len(manifest.queries)} queries, "
          f"seeds {seeds[0]}..{seeds[-1]}")
    logs: Dict[str, List[Dict[str, object]]] = {}
    finals: Dict[str, float] = {}
    for seed in seeds:
        seed_config = config.with_overrides({"train.seed": str(seed)})
        final = _train_one(seed_config, manifest, out / f"seed{seed}")
        logs[f"seed {seed}"] = _read_log(out / f"seed{seed}" / LOG_NAME)
        finals[f"seed {seed}"] = float(final["r1"])
    values = np.array(list(finals.values()), dtype=np.float64)
    mean, std = float(values.mean()), float(values.std())
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(config, out)
    (out / "sweep.json").write_text(json.dumps({
        "strategy": config.model.strategy,
        "seeds": seeds,
        "final_r1": {label: finals[label] for label in finals},
        "mean_r1": mean,
        "std_r1": std,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    figures.write_sweep_csv(finals, out / "sweep.csv")
    figures.plot_training_curves(logs, out / "curves.png")
    if config.model.strategy == "tirg":
        figures.plot_identity_trajectory(logs, out / "identity.png")
    print(f"held-out R@1 over {len(seeds)} seeds: {mean:.1f} ±{std:.1f} "
          f"(population std)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    extra: Dict[str, str] = {}
    if args.ks is not None:
        extra["eval.ks"] = args.ks
    config = _config_near_checkpoint(args, extra)
    checkpoint = Path(args.checkpoint)
    model = _load_model(config, checkpoint)
    manifest = _load_split(Path(args.data), args.split, config.dataset.canvas_px)
    queries, images = build_eval_queries(manifest)
    db = embed_database(images, model, kernel=config.train.kernel)
    fingerprint = f"{config.model.strategy}/{manifest.split}/{checkpoint.name}"
    report = evaluate(queries, db, model, ks=config.eval_ks,
                      fingerprint=fingerprint)
    print(report.table())
    out = Path(args.out) if args.out else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    label = config.model.strategy
    figures.write_report_csv({label: report}, out / "report.csv")
    figures.plot_recall_bars({label: report}, out / "recall.png")
    write_snapshot(config, out)
    print(f"wrote {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def cmd_diagnose(args: argparse.Namespace) -> int:
    config = _config_near_checkpoint(args)
    if config.model.strategy != "tirg":
        raise UsageError(
            f"the identity-contribution diagnostic applies to the tirg strategy "
            f"only; this checkpoint was trained with {config.model.strategy!r}")
    checkpoint = Path(args.checkpoint)
    model = _load_model(config, checkpoint)
    manifest = _load_split(Path(args.data), args.split, config.dataset.canvas_px)
    sample = manifest.queries[:args.sample]
    if not sample:
        raise ValueError(f"{manifest.split}.json contains no queries")

    vocab = model.vocab
    weighted = 0.0
    degenerate = False
    for start in range(0, len(sample), 64):
        chunk = sample[start:start + 64]
        bases = np.stack([render_2d(manifest.scene_by_id[q.base_scene_id],
                                    manifest.canvas_px) for q in chunk])
        rows = [tokenize(" ".join(q.text), vocab) for q in chunk]
        value, flag = model.identity_contribution(bases, rows)
        weighted += value * len(chunk)
        degenerate = degenerate or flag
    mean_value = weighted / len(sample)

    log_path = checkpoint.parent / LOG_NAME
    trajectory: List[Dict[str, object]] = []
    if log_path.is_file():
        for record in _read_log(log_path):
            if record.get("identity_contribution") is not None:
                trajectory.append({"iter": record["iter"],
                                   "value": record["identity_contribution"]})

    print(f"identity contribution (gated-path share) over {len(sample)} "
          f"{manifest.split} queries: {mean_value:.4f}")
    if degenerate:
        print("warning: some samples had zero path norms (counted as 0.5)")
    if trajectory:
        print(f"trajectory from {log_path.name}:")
        for point in trajectory:
            print(f"  iter {point['iter']:>6}: {point['value']:.4f}")
    else:
        print(f"no training log next to the checkpoint ({LOG_NAME}); "
              f"trajectory omitted")

    out = Path(args.out) if args.out else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnosis.json").write_text(json.dumps({
        "strategy": config.model.strategy,
        "query_sample": len(sample),
        "split": manifest.split,
        "mean_identity_contribution": mean_value,
        "degenerate": degenerate,
        "trajectory": trajectory,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if trajectory:
        log = [{"iter": p["iter"], "loss": None, "r1": None,
                "identity_contribution": p["value"]} for p in trajectory]
        figures.plot_identity_trajectory({"training": log}, out / "identity.png")
    write_snapshot(config, out)
    print(f"wrote {out / 'diagnosis.json'}")
    return 0


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------


def _check_suite_gradients() -> None:
    """Central-difference checks on representative ops and a full pipeline."""
    rng = np.random.default_rng(20230817)
    tol = 1e-4

    def fp64(shape):
        return ad.tensor(rng.standard_normal(shape), requires_grad=True,
                         dtype=np.float64)

    def check(name, f, inputs):
        err = ad.grad_check(f, inputs)
        if not err < tol:
            raise SelfcheckFailure(
                f"{name}: max relative gradient error {err:.3g} >= {tol}")

    for _ in range(2):
        check("matmul", lambda a, b: ad.mean(ad.matmul(a, b)),
              [fp64((3, 4)), fp64((4, 2))])
        for name in ("relu", "sigmoid", "tanh", "softplus"):
            op = getattr(ad, name)
            check(name, lambda x, op=op: ad.mean(op(x)), [fp64((3, 5))])
        check("logsumexp", lambda x: ad.mean(ad.logsumexp(x)), [fp64((3, 5))])
        image = ad.tensor(rng.random((2, 5, 5, 2)), requires_grad=True,
                          dtype=np.float64)
        check("conv2d", lambda i, k, b: ad.mean(ad.conv2d(i, k, b)),
              [image, fp64((3, 3, 2, 3)), fp64((3,))])

    from .model import ModelConfig
    model = RetrievalModel(
        ModelConfig(strategy="tirg", canvas_px=12, image_channels=(2, 3),
                    embed_dim=8, text_embed_dim=3, text_hidden_dim=4,
                    compose_hidden_dim=8),
        build_vocabulary(), seed=3, dtype=np.float64)
    bases = rng.random((2, 12, 12, 3))
    targets = rng.random((2, 12, 12, 3))
    vocab = model.vocab
    rows = [tokenize("add big red cube", vocab),
            tokenize("remove bottom left object", vocab)]
    loss_config = LossConfig(2, 2, "dot")
    sets = build_negative_sets(2, 2, 1)

    def pipeline(*_params):
        return loss(model.compose_queries(bases, rows),
                    model.embed_images(targets), sets, loss_config)

    params = [p for _, p in sorted(model.parameters().items())
              if p.data.size <= 16][:8]
    err = ad.grad_check(pipeline, params)
    if not err < tol:
        raise SelfcheckFailure(
            f"tirg pipeline: max relative gradient error {err:.3g} >= {tol}")


def _check_suite_loss_algebra() -> None:
    """General-k softmax loss vs its pair form and a plain cross-entropy."""
    rng = np.random.default_rng(41)
    b = 4
    for kernel in ("dot", "neg_l2"):
        for _ in range(5):
            psi_data = rng.standard_normal((b, 5))
            phi_data = rng.standard_normal((b, 5))

            def fresh():
                return (ad.tensor(psi_data.copy(), requires_grad=True),
                        ad.tensor(phi_data.copy(), requires_grad=True))

            pair_sets = build_negative_sets(b, 2, b - 1)
            psi1, phi1 = fresh()
            general = loss(psi1, phi1, pair_sets, LossConfig(b, 2, kernel))
            psi2, phi2 = fresh()
            pair = loss_soft_triplet_form(psi2, phi2, pair_sets, kernel)
            gap = abs(float(general.data) - float(pair.data))
            if not gap < 1e-10:
                raise SelfcheckFailure(
                    f"k=2 dual forms disagree by {gap:.3g} ({kernel})")
            general.backward()
            pair.backward()
            grad_gap = max(np.abs(psi1.grad - psi2.grad).max(),
                           np.abs(phi1.grad - phi2.grad).max())
            if not grad_gap < 1e-8:
                raise SelfcheckFailure(
                    f"k=2 dual-form gradients disagree by {grad_gap:.3g} ({kernel})")

            psi3, phi3 = fresh()
            full = loss(psi3, phi3, build_negative_sets(b, b, 1),
                        LossConfig(b, b, kernel))
            if kernel == "dot":
                sim = psi_data @ phi_data.T
            else:
                sim = (2.0 * psi_data @ phi_data.T
                       - (psi_data ** 2).sum(1, keepdims=True)
                       - (phi_data ** 2).sum(1))
            shifted = sim - sim.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1)) + sim.max(axis=1)
            reference = float((lse - np.diag(sim)).mean())
            gap = abs(float(full.data) - reference)
            if not gap < 1e-10:
                raise SelfcheckFailure(
                    f"k=batch loss differs from plain cross-entropy by "
                    f"{gap:.3g} ({kernel})")


def _check_suite_dataset_replay() -> None:
    """Every recorded query replays exactly; attribute tables hold; rebuilds
    are byte-identical."""
    config = DatasetConfig(n_base=12, n_queries=60, seed=23, canvas_px=24,
                           test_n_base=8, test_n_queries=30)
    first = build_dataset(config)
    second = build_dataset(config)
    for manifest, rebuilt in zip(first, second):
        if manifest_to_json(manifest) != manifest_to_json(rebuilt):
            raise SelfcheckFailure(
                f"{manifest.split} split: rebuild with the same seed differs")
        table = CONDITION_TABLES[manifest.condition]
        for scene in manifest.scenes:
            for _, obj in scene.objects():
                if obj.color not in table[obj.shape]:
                    raise SelfcheckFailure(
                        f"{manifest.split} scene {scene.scene_id}: "
                        f"{obj.color} {obj.shape} breaks condition "
                        f"{manifest.condition}")
        for qi, query in enumerate(manifest.queries):
            base = manifest.scene_by_id[query.base_scene_id]
            target = manifest.scene_by_id[query.target_scene_id]
            replayed = apply_modification(base, query.modification)
            if replayed.content_key() != target.content_key():
                raise SelfcheckFailure(
                    f"{manifest.split} query {qi}: replay does not reproduce "
                    f"the target scene")


def _check_suite_ranking_oracle() -> None:
    """rank/recall against a from-scratch brute-force recomputation."""
    rng = np.random.default_rng(99)
    n, dim, n_queries = 60, 6, 20
    for kernel in ("dot", "neg_l2"):
        ids = [f"img{i:03d}" for i in rng.permutation(n)]
        matrix = rng.standard_normal((n, dim))
        db = EmbeddedDatabase(ids=ids, matrix=matrix, kernel=kernel)
        psis = rng.standard_normal((n_queries, dim))
        targets = [ids[i] for i in rng.integers(0, n, size=n_queries)]

        expected = []
        for qi in range(n_queries):
            scored = []
            for i in range(n):
                if kernel == "dot":
                    s = float(psis[qi] @ matrix[i])
                else:
                    diff = psis[qi] - matrix[i]
                    s = -float(diff @ diff)
                scored.append((-s, ids[i]))
            order = [ident for _, ident in sorted(scored)]
            expected.append(order.index(targets[qi]) + 1)

        ranks = target_ranks(psis, db, targets)
        if list(ranks) != expected:
            raise SelfcheckFailure(
                f"target_ranks disagrees with the brute-force oracle ({kernel})")
        previous = -1.0
        for k in (1, 3, 10, n):
            value = recall_from_embeddings(psis, targets, db, k)
            reference = 100.0 * sum(r <= k for r in expected) / n_queries
            if abs(value - reference) > 1e-9:
                raise SelfcheckFailure(
                    f"recall@{k} {value} != oracle {reference} ({kernel})")
            if value < previous:
                raise SelfcheckFailure(f"recall not monotone at k={k} ({kernel})")
            previous = value
        if recall_from_embeddings(psis, targets, db, n) != 100.0:
            raise SelfcheckFailure(f"recall@|db| is not 100 ({kernel})")


SELFCHECK_SUITES = (
    ("gradient-checks", _check_suite_gradients),
    ("loss-algebra", _check_suite_loss_algebra),
    ("dataset-replay", _check_suite_dataset_replay),
    ("ranking-oracle", _check_suite_ranking_oracle),
)


def cmd_selfcheck(args: argparse.Namespace) -> int:
    failures = []
    for name, suite in SELFCHECK_SUITES:
        started = time.perf_counter()
        try:
            suite()
        except SelfcheckFailure as exc:
            print(f"[FAIL] {name}: {exc}")
            failures.append(name)
        except Exception as exc:  # a crashed suite is a failed suite
            print(f"[FAIL] {name}: {type(exc).__name__}: {exc}")
            failures.append(name)
        else:
            print(f"[ ok ] {name} ({time.perf_counter() - started:.2f}s)")
    passed = len(SELFCHECK_SUITES) - len(failures)
    if failures:
        print(f"selfcheck: {passed}/{len(SELFCHECK_SUITES)} suites passed; "
              f"failing: {', '.join(failures)}")
        return 1
    print(f"selfcheck: {passed}/{len(SELFCHECK_SUITES)} suites passed")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tirg",
        description="Composed image+text retrieval: datasets, training, "
                    "evaluation, diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_set(p):
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    def add_config(p):
        p.add_argument("--config", type=Path, default=None,
                       help="INI config file (defaults apply when omitted)")

    p = sub.add_parser("generate", help="render a dataset to disk")
    add_config(p)
    p.add_argument("--out", type=Path, required=True)
    add_set(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model or a seed sweep")
    add_config(p)
    p.add_argument("--data", type=Path, required=True,
                   help="directory holding train.json")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--strategy", default=None,
                   help="shorthand for --set model.strategy=...")
    p.add_argument("--iterations", type=int, default=None,
                   help="shorthand for --set train.iterations=...")
    p.add_argument("--seeds", type=int, default=None, metavar="N",
                   help="train N seeds (base..base+N-1) and aggregate mean/std")
    add_set(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True,
                   help="directory holding <split>.json")
    add_config(p)
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default: the checkpoint's)")
    p.add_argument("--split", default="test")
    p.add_argument("--ks", default=None,
                   help="comma-separated recall cutoffs, e.g. 1,5,10,50")
    add_set(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose",
                       help="report the gated-path share of a tirg checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    add_config(p)
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default: the checkpoint's)")
    p.add_argument("--split", default="test")
    p.add_argument("--sample", type=int, default=200,
                   help="number of queries to average over")
    add_set(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("selfcheck", help="run the built-in verification suites")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
