"""Command-line frontend.

Exit codes: 0 success, 2 config error, 3 upstream-service error,
4 input-validation failure.

Every subcommand that writes outputs also writes the fully-resolved config
(resolved_config.json) next to them; re-running from that file reproduces
the outputs byte for byte for deterministic backends.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import grpo, metrics, reward, rollout, secot, tagger, toolgw
from .metrics import SampleEval, Task
from .policy import PolicyUnavailable, make_policy
from .toolgw import BindFailure, CachingSearchTool, HttpToolClient, ToolUnavailable, make_backend

logger = logging.getLogger("gmnerkit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UPSTREAM = 3
EXIT_VALIDATION = 4


class ConfigError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    max_actions: int = 3
    max_invalid_retries: int = 3
    max_response_tokens: int = 18432
    k_results: int = 3
    difficulty_n: int = 4
    group_size: int = 8
    lambda_f1: float = 0.9
    lambda_fmt: float = 0.1
    lambda_search: float = 0.01
    gamma: float = 0.8
    clip_eps: float = 0.2
    kl_beta: float = 0.001
    cache_threshold: float = 0.9
    iou_threshold: float = 0.5
    temperature: float = 1.0
    seed: int = 0
    policy: str | None = None
    tools: str | None = None
    cache_path: str | None = None

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(doc) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then CLI flags override whatever was set."""
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for name in RunConfig.field_names():
        value = getattr(args, name, None)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{name: value})
    return cfg


def write_config_echo(outdir: Path, cfg: RunConfig) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def make_tools(cfg: RunConfig) -> rollout.ToolHandle:
    if not cfg.tools:
        raise ConfigError("no tool backend configured (--tools)")
    kind, _, arg = cfg.tools.partition(":")
    if kind in ("http", "https"):
        return HttpToolClient(cfg.tools)
    return CachingSearchTool(
        make_backend(cfg.tools),
        k_results=cfg.k_results,
        threshold=cfg.cache_threshold,
        cache_path=cfg.cache_path,
    )


def require_policy(cfg: RunConfig):
    if not cfg.policy:
        raise ConfigError("no policy backend configured (--policy)")
    try:
        return make_policy(cfg.policy)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"cannot build policy {cfg.policy!r}: {exc}") from exc


def _load_gold(path: str) -> list[metrics.GoldSample]:
    try:
        return metrics.load_gold_corpus(path)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"bad gold corpus {path}: {exc}") from exc


# --- subcommands ------------------------------------------------------------

def cmd_serve_tools(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    host, _, port = args.bind.partition(":")
    tool = make_tools(cfg)
    if not isinstance(tool, CachingSearchTool):
        raise ConfigError("serve-tools needs a local backend spec (e.g. local:index.jsonl)")
    server = toolgw.serve((host or "127.0.0.1", int(port or "8080")), tool)
    logger.info("serving on %s", server.url)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def cmd_rollout(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    outdir = Path(args.out)
    corpus = _load_gold(args.input)
    if args.manifest:
        keep = set(tagger.load_manifest(args.manifest))
        corpus = [s for s in corpus if s.sample_id in keep]
    policy = require_policy(cfg)
    tools = make_tools(cfg)
    rcfg = rollout.RolloutConfig(
        max_actions=cfg.max_actions,
        max_invalid_retries=cfg.max_invalid_retries,
        max_response_tokens=cfg.max_response_tokens,
    )
    trajectories = []
    for sample in corpus:
        rollout_input = rollout.RolloutInput(text=sample.text, image_ref=sample.image_ref)
        if cfg.group_size > 1:
            trajectories.extend(
                rollout.run_group(
                    rollout_input,
                    policy,
                    tools,
                    rcfg,
                    group_size=cfg.group_size,
                    seed=cfg.seed,
                    base_id=sample.sample_id,
                )
            )
        else:
            trajectories.append(
                rollout.run_rollout(
                    rollout_input, policy, tools, rcfg, trajectory_id=sample.sample_id
                )
            )
    write_config_echo(outdir, cfg)
    rollout.save_trajectories(outdir / "trajectories.jsonl", trajectories)
    logger.info("wrote %d trajectories to %s", len(trajectories), outdir)
    return EXIT_OK


def cmd_tag_gen(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    outdir = Path(args.out)
    corpus = _load_gold(args.gold)
    policy = require_policy(cfg)
    result = tagger.tag_dataset(
        corpus, policy, n=cfg.difficulty_n, seed=cfg.seed, iou_threshold=cfg.iou_threshold
    )
    write_config_echo(outdir, cfg)
    tagger.save_reports(outdir / "tag_reports.jsonl", result.reports)
    tagger.save_manifest(outdir / "coldstart_manifest.jsonl", result.cold_start_ids)
    tagger.save_manifest(outdir / "rl_manifest.jsonl", result.rl_ids)
    logger.info(
        "tagged %d entities; cold-start pool %d, RL pool %d",
        len(result.reports),
        len(result.cold_start_ids),
        len(result.rl_ids),
    )
    return EXIT_OK


def cmd_secot_build(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    outdir = Path(args.out)
    corpus = _load_gold(args.gold)
    reports = tagger.load_reports(args.tags)
    teacher = require_policy(cfg)
    tools = make_tools(cfg)
    rcfg = rollout.RolloutConfig(
        max_actions=cfg.max_actions,
        max_invalid_retries=cfg.max_invalid_retries,
        max_response_tokens=cfg.max_response_tokens,
    )
    records = secot.build_dataset(
        corpus,
        reports,
        teacher,
        tools,
        cfg=rcfg,
        teacher_id=cfg.policy or "teacher",
        max_resamples=args.max_resamples,
        iou_threshold=cfg.iou_threshold,
    )
    write_config_echo(outdir, cfg)
    secot.save_records(outdir / "secot_records.jsonl", records)
    (outdir / "secot_stats.md").write_text(secot.stats_markdown(records), encoding="utf-8")
    accepted = sum(1 for r in records if r.verdict and r.verdict.accepted)
    logger.info("synthesized %d records (%d accepted)", len(records), accepted)
    return EXIT_OK


def cmd_reward(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    outdir = Path(args.out)
    corpus = {s.sample_id: s for s in _load_gold(args.gold)}
    try:
        trajectories = rollout.load_trajectories(args.trajectories)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"bad trajectories file: {exc}") from exc
    rcfg = reward.RewardConfig(
        lambda_f1=cfg.lambda_f1,
        lambda_fmt=cfg.lambda_fmt,
        lambda_search=cfg.lambda_search,
        gamma=cfg.gamma,
    )
    write_config_echo(outdir, cfg)
    with (outdir / "rewarded.jsonl").open("w", encoding="utf-8") as f:
        for traj in trajectories:
            sample_id = traj.trajectory_id.rsplit("/", 1)[0]
            if sample_id not in corpus:
                raise ValidationError(f"trajectory {traj.trajectory_id} has no gold sample")
            breakdown = reward.compute_reward(
                traj, corpus[sample_id].entities, rcfg, iou_threshold=cfg.iou_threshold
            )
            record = traj.to_record()
            record["reward"] = breakdown.to_dict()
            f.write(json.dumps(record, separators=(",", ":")) + "\n")
    logger.info("rewarded %d trajectories", len(trajectories))
    return EXIT_OK


def cmd_grpo_batch(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    outdir = Path(args.out)
    try:
        with Path(args.trajectories).open(encoding="utf-8") as f:
            records = [json.loads(line) for line in f if line.strip()]
    except (OSError, ValueError) as exc:
        raise ValidationError(f"bad rewarded-trajectories file: {exc}") from exc
    groups: dict[str, list[dict]] = {}
    for record in records:
        if "reward" not in record:
            raise ValidationError("records must carry a 'reward' key (run the reward step)")
        groups.setdefault(str(record["trajectory_id"]).rsplit("/", 1)[0], []).append(record)

    write_config_echo(outdir, cfg)
    n_records = 0
    with (outdir / "grpo_batches.jsonl").open("w", encoding="utf-8") as f:
        for _, members in groups.items():
            trajectories = [rollout.Trajectory.from_record(r) for r in members]
            breakdowns = [reward.RewardBreakdown.from_dict(r["reward"]) for r in members]
            batch = grpo.build_batch_records(
                trajectories, breakdowns, clip_eps=cfg.clip_eps, kl_beta=cfg.kl_beta
            )
            for record in batch:
                f.write(json.dumps(record, separators=(",", ":")) + "\n")
                n_records += 1
    logger.info("emitted %d batch records for %d groups", n_records, len(groups))
    return EXIT_OK


def _predictions_from_args(args: argparse.Namespace) -> dict[str, list[metrics.EntityTriplet]]:
    from .protocol import entity_from_dict

    preds: dict[str, list[metrics.EntityTriplet]] = {}
    if args.pred:
        with Path(args.pred).open(encoding="utf-8") as f:
            for i, line in enumerate(f):
                if not line.strip():
                    continue
                rec = json.loads(line)
                sid = str(rec.get("sample_id", i))
                preds[sid] = [entity_from_dict(e) for e in rec["entities"]]
    else:
        member_suffix = f"/{args.member}"
        for traj in rollout.load_trajectories(args.trajectories):
            tid = traj.trajectory_id
            if "/" in tid and not tid.endswith(member_suffix):
                continue
            sid = tid.rsplit("/", 1)[0]
            preds[sid] = list(traj.final.entities) if traj.final else []
    return preds


def _tool_calls_by_sample(path: str, member: int) -> dict[str, int]:
    calls: dict[str, int] = {}
    for traj in rollout.load_trajectories(path):
        tid = traj.trajectory_id
        if "/" in tid and not tid.endswith(f"/{member}"):
            continue
        calls[tid.rsplit("/", 1)[0]] = traj.n_tool_calls
    return calls


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if bool(args.pred) == bool(args.trajectories):
        raise ConfigError("pass exactly one of --pred or --trajectories")
    golds = {s.sample_id: s for s in _load_gold(args.gold)}
    try:
        preds = _predictions_from_args(args)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"bad predictions: {exc}") from exc
    task = Task(args.task)
    pairs = [
        (preds.get(sid, []), sample.entities) for sid, sample in sorted(golds.items())
    ]
    report = metrics.score_corpus(pairs, task, iou_threshold=cfg.iou_threshold)
    doc = report.to_dict()
    print(json.dumps(doc, indent=2))
    if args.out:
        outdir = Path(args.out)
        write_config_echo(outdir, cfg)
        (outdir / "eval.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    golds = {s.sample_id: s for s in _load_gold(args.gold)}
    train = _load_gold(args.train)
    try:
        preds = _predictions_from_args(args)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"bad predictions: {exc}") from exc
    calls = (
        _tool_calls_by_sample(args.trajectories, args.member) if args.trajectories else {}
    )
    samples = [
        SampleEval(
            sample_id=sid,
            golds=sample.entities,
            preds=preds.get(sid, []),
            n_tool_calls=calls.get(sid, 0),
        )
        for sid, sample in sorted(golds.items())
    ]
    task = Task(args.task)
    split = metrics.seen_unseen_split(
        samples,
        train,
        task,
        iou_threshold=cfg.iou_threshold,
        by_type=args.by_type,
        by_region=args.by_region,
    )
    lines = [
        f"# {task.value.upper()} report",
        "",
        "| split | samples | SR (%) | precision | recall | F1 |",
        "|-------|---------|--------|-----------|--------|----|",
    ]
    for name, group in (("seen", split.seen), ("unseen", split.unseen), ("all", split.all)):
        r = group.report
        lines.append(
            f"| {name} | {group.n_samples} | {100 * group.search_ratio:.1f} "
            f"| {r.precision:.4f} | {r.recall:.4f} | {r.f1:.4f} |"
        )
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        outdir = Path(args.out)
        write_config_echo(outdir, cfg)
        (outdir / "report.md").write_text(text, encoding="utf-8")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--policy", default=None, help="scripted:PATH | replay:PATH | remote:URL")
    p.add_argument("--tools", default=None, help="local:INDEX.jsonl | http://host:port")
    p.add_argument("--cache-path", dest="cache_path", default=None)
    p.add_argument("--m", dest="max_actions", type=int, default=None, help="action budget")
    p.add_argument("--k", dest="k_results", type=int, default=None, help="results per query")
    p.add_argument("--n", dest="difficulty_n", type=int, default=None, help="forward samples")
    p.add_argument("--group", dest="group_size", type=int, default=None)
    p.add_argument("--lambda-f1", dest="lambda_f1", type=float, default=None)
    p.add_argument("--lambda-fmt", dest="lambda_fmt", type=float, default=None)
    p.add_argument("--lambda-search", dest="lambda_search", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--clip-eps", dest="clip_eps", type=float, default=None)
    p.add_argument("--kl-beta", dest="kl_beta", type=float, default=None)
    p.add_argument("--cache-threshold", dest="cache_threshold", type=float, default=None)
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmnerkit",
        description="Agentic grounded-multimodal-NER toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve-tools", help="run the multimodal search gateway")
    p.add_argument("--bind", default="127.0.0.1:8080")
    _add_config_flags(p)
    p.set_defaults(func=cmd_serve_tools)

    p = sub.add_parser("rollout", help="collect trajectories over a corpus")
    p.add_argument("--input", required=True, help="gold corpus JSONL")
    p.add_argument("--manifest", default=None, help="restrict to sample ids in this manifest")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("tag-gen", help="difficulty-aware search tag generation")
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_tag_gen)

    p = sub.add_parser("secot-build", help="synthesize and validate cold-start records")
    p.add_argument("--gold", required=True)
    p.add_argument("--tags", required=True, help="tag_reports.jsonl from tag-gen")
    p.add_argument("--max-resamples", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_secot_build)

    p = sub.add_parser("reward", help="attach reward breakdowns to trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("grpo-batch", help="emit training batches from rewarded groups")
    p.add_argument("--trajectories", required=True, help="rewarded.jsonl from the reward step")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_grpo_batch)

    p = sub.add_parser("eval", help="score predictions against gold")
    p.add_argument("--pred", default=None, help="JSONL of {sample_id, entities:[...]}")
    p.add_argument("--trajectories", default=None, help="extract finals from trajectories")
    p.add_argument("--member", type=int, default=0, help="group member used with --trajectories")
    p.add_argument("--gold", required=True)
    p.add_argument("--task", choices=[t.value for t in Task], default=Task.GMNER.value)
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="seen/unseen split report with search ratios")
    p.add_argument("--pred", default=None)
    p.add_argument("--trajectories", default=None)
    p.add_argument("--member", type=int, default=0)
    p.add_argument("--gold", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--task", choices=[t.value for t in Task], default=Task.GMNER.value)
    p.add_argument("--by-type", action="store_true")
    p.add_argument("--by-region", action="store_true")
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (PolicyUnavailable, ToolUnavailable, BindFailure) as exc:
        logger.error("upstream service error: %s", exc)
        return EXIT_UPSTREAM
    except (ValidationError, metrics.MissingTrainCorpus) as exc:
        logger.error("validation failure: %s", exc)
        return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
