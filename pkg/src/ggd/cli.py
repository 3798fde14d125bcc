"""Command-line interface: ``ggd <command> [options]``.

Run configuration is a YAML or JSON mapping with optional sections::

    seed: 0
    model: {embed_dim: 32, hidden_dim: 64, attention_dim: 32}
    task:  {vocab_size: 30, n_train: 10000, ...}   # synthetic data
    data:  {dir: path/from/gen-data, max_len: 50}  # or files on disk
    train: {batch_size: 64, max_updates: 1000, ...}

Values resolve as command-line flag > config file > built-in default.
``--set section.key=value`` overrides any single entry. Every command that
writes an output directory also writes ``config.json`` (the fully resolved
configuration) and ``seed`` next to its results.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import ConfigError, Corpus, SyntheticTaskSpec, Vocab, gen_synthetic, load_corpus, write_sentences
from .decoding import beam_search, greedy_decode_batch, rollout, sample_decode_batch
from .gumbel import gumbel_max, infer_noise
from .metrics import avg_log_likelihood, corpus_bleu, sentence_bleu_smoothed
from .model import EOS, ModelConfig, ModelParams, log_prob_batch
from .rng import stream
from .training import MetricsLog, TrainConfig, ggd_train, train_mle, train_reinforce

logger = logging.getLogger("ggd")

SPLITS = ("train", "valid", "test")
MODEL_KEYS = ("embed_dim", "hidden_dim", "attention_dim", "init_scale")


class CliError(Exception):
    """Any user-facing failure; reported as a one-line diagnostic."""


# ---------------------------------------------------------------- config


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise CliError(f"cannot parse config {path}: {str(exc).splitlines()[0]}") from None
    cfg = cfg or {}
    if not isinstance(cfg, dict):
        raise CliError("config file must contain a mapping")
    return cfg


def _apply_set(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise CliError(f"--set expects section.key=value, got {assignment!r}")
    *path, leaf = key.split(".")
    node = cfg
    for part in path:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise CliError(f"--set {key}: {part} is not a section")
    node[leaf] = yaml.safe_load(raw)


# GGD fine-tuning defaults that differ from maximum-likelihood training
GGD_TRAIN_DEFAULTS = {"optimizer": "rmsprop", "lr": 1e-4, "batch_size": 64}


def resolve_config(args, train_defaults: dict | None = None) -> dict:
    """Merge defaults, the config file and command-line flags."""
    cfg = _read_config(getattr(args, "config", None))
    for section in ("model", "task", "data", "train"):
        if cfg.get(section) is None:
            cfg[section] = {}
    if train_defaults:
        cfg["train"] = {**train_defaults, **cfg["train"]}
    unknown = set(cfg) - {"seed", "model", "task", "data", "train"}
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}")
    for assignment in getattr(args, "set", None) or []:
        _apply_set(cfg, assignment)
    for flag, key in (("max_updates", "max_updates"), ("tau", "tau"), ("estimator", "estimator")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg["train"][key] = value
    if getattr(args, "no_entropy_reg", False):
        cfg["train"]["entropy_reg"] = False
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    cfg["seed"] = int(cfg.get("seed", 0))

    bad = set(cfg["model"]) - set(MODEL_KEYS)
    if bad:
        raise CliError(f"unknown model options {sorted(bad)}")
    task_names = {f.name for f in fields(SyntheticTaskSpec)}
    bad = set(cfg["task"]) - task_names
    if bad:
        raise CliError(f"unknown task options {sorted(bad)}")
    cfg["task"] = {**SyntheticTaskSpec(seed=cfg["seed"]).to_dict(), **cfg["task"]}
    try:
        train = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    except (TypeError, ConfigError) as exc:
        raise CliError(str(exc)) from None
    cfg["train"] = train.to_dict()
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"]).validate()
    except (TypeError, ConfigError) as exc:
        raise CliError(f"invalid training options: {exc}") from None


def _prepare_out(path, cfg: dict) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "seed").write_text(f"{cfg['seed']}\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------- data


def _load_data(cfg: dict) -> tuple[Vocab, Vocab, dict[str, Corpus]]:
    data = cfg["data"]
    if data.get("dir"):
        d = Path(data["dir"])
        try:
            sv, tv = Vocab.load(d / "src.vocab"), Vocab.load(d / "tgt.vocab")
            corpora = {
                s: load_corpus(d / f"{s}.src", d / f"{s}.tgt", sv, tv, data.get("max_len"), s)
                for s in SPLITS
                if (d / f"{s}.src").exists()
            }
        except OSError as exc:
            raise CliError(f"cannot read data in {d}: {exc.strerror}: {exc.filename}") from None
        for s in ("train", "valid"):
            if s not in corpora or len(corpora[s]) == 0:
                raise CliError(f"data directory {d} has no usable {s} split")
        return sv, tv, corpora
    spec = SyntheticTaskSpec(**cfg["task"])
    task = gen_synthetic(spec)
    return task.src_vocab, task.tgt_vocab, {"train": task.train, "valid": task.valid, "test": task.test}


def _read_source(path, vocab: Vocab) -> list[list[int]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    if not lines:
        raise CliError(f"{path} is empty")
    return [vocab.encode(line.split()) for line in lines]


def _load_ckpt(path):
    ckpt = load_checkpoint(path)
    if ckpt.src_vocab is None or ckpt.tgt_vocab is None:
        raise CliError(f"checkpoint {path} carries no vocabularies")
    return ckpt


def _parse_mode(mode: str) -> tuple[str, int]:
    if mode in ("greedy", "sample"):
        return mode, 1
    if mode.startswith("beam:"):
        try:
            size = int(mode[5:])
        except ValueError:
            size = 0
        if size >= 1:
            return "beam", size
    raise CliError(f"mode must be greedy, sample or beam:S (S >= 1), got {mode!r}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args.out, cfg)
    task = gen_synthetic(SyntheticTaskSpec(**cfg["task"]))
    task.src_vocab.save(out / "src.vocab")
    task.tgt_vocab.save(out / "tgt.vocab")
    for split in SPLITS:
        corpus = getattr(task, split)
        write_sentences(out / f"{split}.src", corpus.src, task.src_vocab)
        write_sentences(out / f"{split}.tgt", corpus.tgt, task.tgt_vocab)
    print(f"wrote {len(task.train)}/{len(task.valid)}/{len(task.test)} sentence pairs to {out}")
    return 0


def _model_config(cfg: dict, sv: Vocab, tv: Vocab) -> ModelConfig:
    return ModelConfig(len(sv), len(tv), seed=cfg["seed"], **cfg["model"])


def cmd_train_mle(args) -> int:
    cfg = resolve_config(args)
    tc = _train_config(cfg)
    sv, tv, corpora = _load_data(cfg)
    out = _prepare_out(args.out, cfg)
    init = ModelParams.initialize(_model_config(cfg, sv, tv))
    params, log = train_mle(init, corpora["train"], corpora["valid"], tc, MetricsLog(out / "metrics.csv"))
    save_checkpoint(out / "model.ckpt", params, sv, tv, {"stage": "mle", "train": tc.to_dict()})
    print(f"saved {out / 'model.ckpt'}")
    return 0


def _check_vocab_match(ckpt, sv: Vocab, tv: Vocab) -> None:
    if ckpt.src_vocab != sv or ckpt.tgt_vocab != tv:
        raise CliError("checkpoint vocabularies do not match the configured data")


def cmd_train_rl(args) -> int:
    cfg = resolve_config(args)
    tc = _train_config(cfg)
    ckpt = _load_ckpt(args.checkpoint)
    sv, tv, corpora = _load_data(cfg)
    _check_vocab_match(ckpt, sv, tv)
    out = _prepare_out(args.out, cfg)
    params, _ = train_reinforce(ckpt.params, corpora["train"], corpora["valid"], tc, MetricsLog(out / "metrics.csv"))
    save_checkpoint(out / "model.ckpt", params, sv, tv, {"stage": "reinforce", "train": tc.to_dict()})
    print(f"saved {out / 'model.ckpt'}")
    return 0


def cmd_train_ggd(args) -> int:
    cfg = resolve_config(args, GGD_TRAIN_DEFAULTS)
    tc = _train_config(cfg)
    ckpt = _load_ckpt(args.checkpoint)
    sv, tv, corpora = _load_data(cfg)
    _check_vocab_match(ckpt, sv, tv)
    out = _prepare_out(args.out, cfg)
    res = ggd_train(corpora["train"], corpora["valid"], ckpt.params, tc, MetricsLog(out / "metrics.csv"))
    meta = {"train": tc.to_dict(), "final_bleu": res.final_bleu, "best_bleu": res.best_bleu}
    save_checkpoint(out / "generator.ckpt", res.generator, sv, tv, {"stage": "ggd-generator", **meta})
    save_checkpoint(out / "discriminator.ckpt", res.discriminator, sv, tv, {"stage": "ggd-discriminator", **meta})
    print(f"final greedy BLEU {res.final_bleu:.4f} (best {res.best_bleu:.4f})")
    return 0


def _decode_all(params, src, mode: str, beam: int, seed: int):
    if mode == "greedy":
        return greedy_decode_batch(src, params)
    if mode == "sample":
        return sample_decode_batch(src, params, stream(seed, "decode", "sample"))
    return [beam_search(x, params, beam) for x in src]


def cmd_decode(args) -> int:
    mode, beam = _parse_mode(args.mode)
    ckpt = _load_ckpt(args.checkpoint)
    src = _read_source(args.input, ckpt.src_vocab)
    results = _decode_all(ckpt.params, src, mode, beam, args.seed)
    out = Path(args.out)
    write_sentences(out, [r.tokens for r in results], ckpt.tgt_vocab)
    logprob_path = Path(args.logprob_out) if args.logprob_out else out.with_name(out.name + ".logprob")
    logprob_path.write_text("".join(f"{r.log_prob!r}\n" for r in results), encoding="utf-8")
    return 0


def _read_refs(path, vocab: Vocab, n: int) -> list[list[int]]:
    refs = _read_source(path, vocab)
    if len(refs) != n:
        raise CliError(f"{path}: {len(refs)} lines, expected {n}")
    return refs


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.hyp is None:
        raise CliError("eval needs --checkpoint or --hyp")
    ckpt = _load_ckpt(args.checkpoint) if args.checkpoint else None
    if ckpt is not None:
        sv, tv = ckpt.src_vocab, ckpt.tgt_vocab
    else:
        # score a hypothesis file on its own: a shared vocabulary built from both sides
        words = [ln.split() for p in (args.hyp, args.ref) for ln in Path(p).read_text(encoding="utf-8").splitlines()]
        sv = tv = Vocab.build(words)
    summary: dict[str, float] = {}
    refs = _read_source(args.ref, tv)
    n = len(refs)
    src = _read_refs(args.src, sv, n) if args.src else None
    if args.hyp:
        hyps = _read_refs(args.hyp, tv, n)
        summary["bleu"] = corpus_bleu(zip(hyps, refs))
    if ckpt is not None:
        if src is None:
            raise CliError("eval with a checkpoint needs --src")
        greedy = [r.tokens for r in greedy_decode_batch(src, ckpt.params)]
        summary["greedy_bleu"] = corpus_bleu(zip(greedy, refs))
        if args.beam_size > 1:
            beam = [beam_search(x, ckpt.params, args.beam_size).tokens for x in src]
            summary[f"beam{args.beam_size}_bleu"] = corpus_bleu(zip(beam, refs))
        summary["avg_loglik"] = avg_log_likelihood(ckpt.params, list(zip(src, refs)))
        if not args.hyp:
            hyps = greedy
    if args.report:
        loglik = log_prob_batch(refs, src, ckpt.params).data if ckpt is not None else None
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sentence_id", "bleu", "loglik", "hyp_len", "ref_len"])
            for i, (h, r) in enumerate(zip(hyps, refs)):
                ll = repr(float(loglik[i])) if loglik is not None else ""
                w.writerow([i, repr(sentence_bleu_smoothed(h, r)), ll, _body_len(h), _body_len(r)])
    print(json.dumps(summary, sort_keys=True))
    return 0


def _body_len(ids) -> int:
    return next((i for i, t in enumerate(ids) if t == EOS), len(ids))


def cmd_inspect_noise(args) -> int:
    mode, beam = _parse_mode(args.mode)
    ckpt = _load_ckpt(args.checkpoint)
    src = _read_source(args.src, ckpt.src_vocab)
    rng = stream(args.seed, "inspect-noise", mode)
    ro_mode = {"sample": "sampling", "greedy": "greedy", "beam": "beam"}[mode]
    ro = rollout(ckpt.params, src, mode=ro_mode, tau=args.tau, rng=rng, beam_size=beam)
    K = ckpt.params.config.tgt_vocab
    kinds = [("sampled" if mode == "sample" else "inferred", ro.noise)]
    if mode == "sample":
        # re-infer noise for the sampled words; pooled it should again be standard Gumbel
        inferred = np.stack(
            [infer_noise(ro.ids[:, t], ro.logits[:, t], rng) for t in range(ro.ids.shape[1])], axis=1
        )
        kinds.append(("inferred", inferred))
    violations, pool = 0, []
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sentence_id", "step", "kind", "token", "consistent", *[f"g{k}" for k in range(K)]])
        for kind, noise in kinds:
            for i in range(len(src)):
                for t in np.flatnonzero(ro.mask[i]):
                    g, a, y = noise[i, t], ro.logits[i, t], int(ro.ids[i, t])
                    ok = gumbel_max(a, g) == y
                    violations += not ok
                    if kind == "inferred":
                        pool.append(g)
                    w.writerow([i, int(t), kind, y, int(ok), *map(repr, g.tolist())])
    report = {"steps": int(ro.mask.sum()), "violations": violations}
    if pool:
        ks = stats.kstest(np.concatenate(pool), "gumbel_r")
        report.update(ks_statistic=float(ks.statistic), ks_pvalue=float(ks.pvalue))
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def _add_run_options(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry")
    p.add_argument("--out", required=out_required, help="output directory")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-updates", type=int, dest="max_updates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ggd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus and its vocabularies")
    _add_run_options(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-mle", help="teacher-forcing pretraining")
    _add_run_options(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_mle)

    p = sub.add_parser("train-rl", help="REINFORCE fine-tuning of a checkpoint")
    _add_run_options(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("train-ggd", help="Gumbel-greedy generator/discriminator training")
    _add_run_options(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True, help="pretrained model")
    p.add_argument("--tau", type=float)
    p.add_argument("--estimator", choices=("st-gumbel", "st"))
    p.add_argument("--no-entropy-reg", action="store_true", dest="no_entropy_reg")
    p.set_defaults(func=cmd_train_ggd)

    p = sub.add_parser("decode", help="translate a source file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="source sentences, one per line")
    p.add_argument("--mode", default="greedy", help="greedy, sample or beam:S")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="hypothesis file")
    p.add_argument("--logprob-out", help="per-sentence log-probabilities (default: OUT.logprob)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="BLEU and log-likelihood report")
    p.add_argument("--checkpoint")
    p.add_argument("--src", help="source sentences")
    p.add_argument("--ref", required=True, help="reference translations")
    p.add_argument("--hyp", help="score this hypothesis file instead of decoding")
    p.add_argument("--beam-size", type=int, default=4, dest="beam_size")
    p.add_argument("--report", help="per-sentence CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-noise", help="dump sampled/inferred Gumbel noise per step")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--mode", default="greedy", help="greedy, sample or beam:S")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV with one row per decoded word")
    p.set_defaults(func=cmd_inspect_noise)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, CheckpointError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ggd {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
