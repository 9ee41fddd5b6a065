"""Experiment harness: configuration, artifact layout and the five stages
(generate, train classifier, train agent, evaluate, ablate) plus the
cross-seed report.

Every stage reads and writes files under ``<out>/seed-<n>/``; the only file
carrying wall-clock times is ``<out>/run_manifest.json``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, classifier as clf, metrics, plots, rl, synthdata as sd, tta

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("none", "random", "learned")
BUILTIN_DOMAINS = {"A": sd.DOMAIN_A, "B": sd.DOMAIN_B}
EVAL_FIELDS = ("seed", "train_domain", "eval_domain", "mode", "k") + metrics.MetricReport.CSV_FIELDS
ABLATION_FIELDS = ("seed", "train_domain", "eval_domain", "k") + metrics.MetricReport.CSV_FIELDS


class ConfigError(ValueError):
    """Bad or inconsistent configuration (exit code 2)."""


class MissingArtifact(FileNotFoundError):
    """A required input file is absent (exit code 3)."""


class ArtifactExists(FileExistsError):
    """Refusing to overwrite existing output without ``force``."""


# --- configuration ---------------------------------------------------------

@dataclass
class DataConfig:
    image_size: int = 32
    channels: int = 3
    splits: tuple = (0.6, 0.2, 0.2)
    counts: dict = field(default_factory=lambda: {"A": [1500, 1500], "B": [1500, 1500]})
    domains: dict = field(default_factory=dict)  # name -> DomainSpec field overrides
    paths: dict = field(default_factory=dict)    # name -> dataset file or labeled PNG dir


@dataclass
class AgentSettings:
    kind: str = "dqn"
    episodes: int = 3600
    log_window: int = 100
    dqn: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)


@dataclass
class EvalSettings:
    split: str = "test"
    workers: int = 1


@dataclass
class RunConfig:
    out: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0])
    train_domain: str = "A"
    eval_domains: list = field(default_factory=lambda: ["A", "B"])
    data: DataConfig = field(default_factory=DataConfig)
    classifier: dict = field(default_factory=dict)
    agent: AgentSettings = field(default_factory=AgentSettings)
    tta: dict = field(default_factory=dict)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def seed_dir(self, seed: int) -> Path:
        return self.out_dir / f"seed-{seed}"

    @property
    def domain_names(self) -> list:
        return sorted(set(self.data.counts) | set(self.data.paths) | {self.train_domain, *self.eval_domains})

    def domain_id(self, name: str) -> int:
        return self.domain_names.index(name)

    def domain_spec(self, name: str) -> sd.DomainSpec:
        over = dict(self.data.domains.get(name, {}))
        if name in BUILTIN_DOMAINS:
            base = dataclasses.asdict(BUILTIN_DOMAINS[name])
        elif over:
            base = {"name": name}
        else:
            raise ConfigError(f"domain {name!r} has neither a [data.domains.{name}] table nor a path")
        return sd.DomainSpec.from_dict({**base, **over, "name": name})

    def classifier_config(self) -> clf.ClassifierConfig:
        cc = {"input_size": self.data.image_size, "channels": self.data.channels, **self.classifier}
        return clf.ClassifierConfig(**cc)

    def tta_config(self, k: int | None = None) -> tta.TTAConfig:
        t = dict(self.tta)
        if k is not None:
            t["k"] = k
        return tta.TTAConfig(**t)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    return cls(**raw)


def build_config(raw: dict | None = None, **overrides) -> RunConfig:
    """Validate a parsed config table; keyword ``overrides`` (seed, agent,
    k, out) win over file values. Raises ConfigError or MissingArtifact."""
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(RunConfig)} | {"seed"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "seed" in raw:
        if "seeds" in raw:
            raise ConfigError("give either 'seed' or 'seeds', not both")
        raw["seeds"] = [raw.pop("seed")]
    try:
        cfg = RunConfig(**{k: v for k, v in raw.items() if k not in ("data", "agent", "eval")})
        cfg.data = _section(DataConfig, raw.get("data", {}), "data")
        cfg.agent = _section(AgentSettings, raw.get("agent", {}), "agent")
        cfg.eval = _section(EvalSettings, raw.get("eval", {}), "eval")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if overrides.get("seed") is not None:
        cfg.seeds = [overrides["seed"]]
    if overrides.get("agent") is not None:
        cfg.agent.kind = overrides["agent"]
    if overrides.get("k") is not None:
        cfg.tta = {**cfg.tta, "k": overrides["k"]}
    if overrides.get("out") is not None:
        cfg.out = str(overrides["out"])
    validate(cfg)
    return cfg


def load_config(path=None, **overrides) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingArtifact(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(raw, **overrides)


def validate(cfg: RunConfig) -> None:
    seeds = cfg.seeds
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    if cfg.agent.kind not in ("dqn", "ppo"):
        raise ConfigError(f"agent.kind must be 'dqn' or 'ppo', got {cfg.agent.kind!r}")
    if not isinstance(cfg.agent.episodes, int) or cfg.agent.episodes < 1:
        raise ConfigError("agent.episodes must be a positive integer")
    if cfg.eval.split not in sd.SPLITS:
        raise ConfigError(f"eval.split must be one of {sd.SPLITS}")
    if not isinstance(cfg.eval.workers, int) or cfg.eval.workers < 1:
        raise ConfigError("eval.workers must be >= 1")
    if not cfg.eval_domains:
        raise ConfigError("eval_domains must not be empty")
    for name in cfg.domain_names:
        if name not in cfg.data.paths:
            if name not in cfg.data.counts:
                raise ConfigError(f"domain {name!r} has no counts and no path")
            try:
                cfg.domain_spec(name)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"domain {name!r}: {exc}") from None
    for name, p in cfg.data.paths.items():
        if not Path(p).exists():
            raise MissingArtifact(f"dataset path for domain {name!r} not found: {p}")
    try:
        manifest(cfg, cfg.seeds[0])
        cfg.classifier_config()
        k = cfg.tta_config().k
        for kind, over in (("dqn", cfg.agent.dqn), ("ppo", cfg.agent.ppo)):
            rl.make_agent(kind, 2, 2, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if k > len(augment.default_bank()):
        raise ConfigError(f"tta.k={k} exceeds the augmentation bank size")


def manifest(cfg: RunConfig, seed: int) -> sd.DatasetManifest:
    counts = {n: list(c) for n, c in cfg.data.counts.items() if n not in cfg.data.paths}
    return sd.DatasetManifest(seed=seed, counts=counts, image_size=cfg.data.image_size,
                              channels=cfg.data.channels, splits=tuple(cfg.data.splits))


# --- artifact paths --------------------------------------------------------

def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found ({hint})")
    return path


def classifier_path(cfg, seed) -> Path:
    return cfg.seed_dir(seed) / "classifier.ckpt"


def agent_path(cfg, seed) -> Path:
    return cfg.seed_dir(seed) / "agent.ckpt"


def dataset_path(cfg, seed, name) -> Path:
    return cfg.seed_dir(seed) / "data" / f"{name}.dfta"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- stages ----------------------------------------------------------------

def generate_data(cfg: RunConfig, seed: int, force: bool = False) -> list[Path]:
    """Render every configured synthetic domain for ``seed`` and write it
    with a manifest JSON alongside."""
    data_dir = cfg.seed_dir(seed) / "data"
    man = manifest(cfg, seed)
    targets = [dataset_path(cfg, seed, n) for n in man.counts]
    man_path = data_dir / "manifest.json"
    existing = [p for p in targets + [man_path] if p.exists()]
    if existing and not force:
        raise ArtifactExists(f"{existing[0]} exists; pass --force to overwrite")
    data_dir.mkdir(parents=True, exist_ok=True)
    record = {"seed": seed, "image_size": man.image_size, "channels": man.channels,
              "splits": list(man.splits), "domains": {}}
    for name, path in zip(man.counts, targets):
        spec = cfg.domain_spec(name)
        ds = sd.generate(spec, man, domain_id=cfg.domain_id(name))
        sd.save(ds, path)
        record["domains"][name] = {
            "domain_id": cfg.domain_id(name), "spec": dataclasses.asdict(spec),
            "counts": list(man.counts[name]), "file": path.name, "sha256": _sha256(path)}
    for name, p in sorted(cfg.data.paths.items()):
        record["domains"][name] = {"domain_id": cfg.domain_id(name), "external": str(p)}
    man_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return targets + [man_path]


def load_domain(cfg: RunConfig, seed: int, name: str) -> sd.Dataset:
    if name in cfg.data.paths:
        p = Path(cfg.data.paths[name])
        if p.is_dir():
            return sd.import_png_dir(p)
        return sd.load(p)
    return sd.load(_require(dataset_path(cfg, seed, name), "run 'gen' first"))


def load_split(cfg: RunConfig, seed: int, name: str, part: str) -> sd.Dataset:
    return sd.split(load_domain(cfg, seed, name), tuple(cfg.data.splits), seed)[part]


def train_classifier(cfg: RunConfig, seed: int) -> list[Path]:
    ds = load_split(cfg, seed, cfg.train_domain, "train")
    model = clf.ClassifierModel.create(cfg.classifier_config(), seed)
    log = clf.train(model, ds.images, ds.labels, seed=seed)
    out = [classifier_path(cfg, seed), cfg.seed_dir(seed) / "classifier_log.csv"]
    model.save(out[0], meta={"seed": seed, "train_domain": cfg.train_domain})
    clf.write_log_csv(log, out[1])
    return out


def load_classifier(cfg: RunConfig, seed: int) -> clf.ClassifierModel:
    return clf.ClassifierModel.load(_require(classifier_path(cfg, seed), "run 'train' first"))


def train_rl_agent(cfg: RunConfig, seed: int) -> list[Path]:
    model = load_classifier(cfg, seed)
    ds = load_split(cfg, seed, cfg.train_domain, "train")
    bank = augment.default_bank()
    env = rl.AugmentationEnv(model, ds.images, ds.labels, bank)
    kind = cfg.agent.kind
    agent = rl.make_agent(kind, model.feature_dim, len(bank), seed, **getattr(cfg.agent, kind))
    log = rl.train_agent(agent, env, cfg.agent.episodes, seed=seed, log_window=cfg.agent.log_window)
    sdir = cfg.seed_dir(seed)
    out = [agent_path(cfg, seed), sdir / "reward_curve.csv", sdir / "reward_curve.svg"]
    rl.save_agent(agent, out[0], meta={"seed": seed, "train_domain": cfg.train_domain,
                                       "episodes": cfg.agent.episodes,
                                       "bank": [a.op for a in bank]})
    log.write_csv(out[1])
    plots.reward_curve(log, out[2], title=f"{kind.upper()} agent, seed {seed}")
    return out


def load_rl_agent(cfg: RunConfig, seed: int):
    agent, _ = rl.load_agent(_require(agent_path(cfg, seed), "run 'train-agent' first"))
    return agent


# --- scoring ---------------------------------------------------------------

def random_actions(n_images: int, n_actions: int, k: int, seed: int, domain_id: int) -> np.ndarray:
    """``(n_images, k)`` distinct uniformly drawn action indices per image."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, domain_id, k, 0x5A4D]))
    return np.stack([rng.choice(n_actions, size=k, replace=False) for _ in range(n_images)]) \
        if n_images else np.zeros((0, k), np.int64)


def _score_chunk(args):
    model, agent, images, mode, actions, config, bank = args
    scores, results = [], []
    for i, image in enumerate(images):
        if mode == "none":
            scores.append(float(model.probas(image)[0]))
        elif mode == "random":
            views = [augment.apply(bank[a], image) for a in actions[i]]
            if config.include_original:
                views.append(image)
            scores.append(tta.fuse(model.probas(np.stack(views))))
        else:
            r = tta.classify_with_tta(model, agent, image, config, bank)
            scores.append(r.score)
            results.append(r)
    return scores, results


def _chunks(n, parts):
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def score_images(model, images, mode: str, config: tta.TTAConfig, agent=None, seed: int = 0,
                 domain_id: int = 0, bank=None, workers: int = 1):
    """Per-image fake scores under ``mode``; returns ``(scores, tta results)``
    where the results list is filled only for learned mode. Random actions
    are drawn up front, so the output does not depend on ``workers``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "learned" and agent is None:
        raise ValueError("learned mode needs an agent")
    bank = bank or augment.default_bank()
    images = np.asarray(images)
    actions = random_actions(len(images), len(bank), config.k, seed, domain_id) if mode == "random" else None
    jobs = [(model, agent, images[a:b], mode, None if actions is None else actions[a:b], config, bank)
            for a, b in _chunks(len(images), max(1, workers))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_score_chunk, jobs))
    else:
        parts = [_score_chunk(j) for j in jobs]
    scores = np.array([s for p in parts for s in p[0]], dtype=np.float64)
    return scores, [r for p in parts for r in p[1]]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def evaluate(cfg: RunConfig, seed: int, modes=MODES, k: int | None = None) -> tuple[list[dict], list[Path]]:
    """Metrics for every (mode, eval domain) cell with the classifier (and,
    for learned mode, the agent) trained on ``cfg.train_domain``."""
    config = cfg.tta_config(k)
    model = load_classifier(cfg, seed)
    agent = load_rl_agent(cfg, seed) if "learned" in modes else None
    bank = augment.default_bank()
    sdir = cfg.seed_dir(seed)
    data = {name: load_split(cfg, seed, name, cfg.eval.split) for name in cfg.eval_domains}
    rows, written = [], []
    for mode in modes:
        tag = f"{mode}_k{config.k}"
        csv_rows, curves, audit = [], {}, []
        for name, ds in data.items():
            scores, results = score_images(model, ds.images, mode, config, agent, seed,
                                           cfg.domain_id(name), bank, cfg.eval.workers)
            rep = metrics.evaluate(scores, ds.labels)
            rows.append({"seed": seed, "train_domain": cfg.train_domain, "eval_domain": name,
                         "mode": mode, "k": config.k, "report": rep})
            csv_rows.append([seed, cfg.train_domain, name, mode, config.k] + rep.csv_row())
            curves[f"{cfg.train_domain}->{name}"] = (scores, ds.labels)
            for i, r in enumerate(results):
                audit.append(tta.audit_record(f"{name}/{cfg.eval.split}/{i}", r, ds.labels[i], bank))
        paths = [sdir / f"eval_{tag}.csv", sdir / f"roc_{tag}.svg"]
        _write_csv(paths[0], EVAL_FIELDS, csv_rows)
        plots.roc_curves(curves, paths[1], title=f"mode={mode}, k={config.k}, seed {seed}")
        if mode == "learned":
            paths.append(sdir / f"audit_{tag}.jsonl")
            paths[-1].write_text("".join(line + "\n" for line in audit))
        written += paths
    return rows, written


def ablation_rows(model, agent, datasets: dict, k_range=range(1, 6), include_original: bool = False,
                  bank=None) -> list[dict]:
    """Learned-TTA metrics for each k in ``k_range`` on each dataset.

    ``datasets`` maps a domain name to ``(images, labels)``. Each image is
    ranked once; top-k scores reuse the leading k view probabilities, which
    equals running ``classify_with_tta`` per k.
    """
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1:
        raise ValueError("k_range must contain positive integers")
    bank = bank or augment.default_bank()
    if ks[-1] > len(bank):
        raise ValueError(f"k={ks[-1]} exceeds bank size {len(bank)}")
    rows = []
    for name, (images, labels) in datasets.items():
        fused = {k: [] for k in ks}
        for image in images:
            _, probs, orig = tta.ranked_probas(model, agent, image, ks[-1], bank)
            for k in ks:
                views = np.append(probs[:k], orig) if include_original else probs[:k]
                fused[k].append(tta.fuse(views))
        for k in ks:
            rows.append({"eval_domain": name, "k": k,
                         "report": metrics.evaluate(np.array(fused[k]), labels)})
    return rows


def best_k(rows: list[dict], domain: str, key: str = "auc") -> int:
    cand = [(getattr(r["report"], key), -r["k"], r["k"]) for r in rows if r["eval_domain"] == domain]
    return max(cand)[2]


def format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def ablate(cfg: RunConfig, seed: int, k_range=range(1, 6)) -> tuple[list[dict], list[Path]]:
    model = load_classifier(cfg, seed)
    agent = load_rl_agent(cfg, seed)
    data = {}
    for name in cfg.eval_domains:
        ds = load_split(cfg, seed, name, cfg.eval.split)
        data[name] = (ds.images, ds.labels)
    rows = ablation_rows(model, agent, data, k_range, cfg.tta_config().include_original)
    table = [[seed, cfg.train_domain, r["eval_domain"], r["k"]] + r["report"].csv_row() for r in rows]
    sdir = cfg.seed_dir(seed)
    out = [sdir / "ablation.csv", sdir / "ablation.txt"]
    _write_csv(out[0], ABLATION_FIELDS, table)
    best = "".join(f"best k on {d}: {best_k(rows, d)}\n" for d in cfg.eval_domains)
    out[1].write_text(format_table(ABLATION_FIELDS, table) + "\n" + best)
    return rows, out


# --- report ----------------------------------------------------------------

def _read_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def _aggregate(rows, keys, values=("auc", "pauc", "eer")):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda t: tuple((0, int(x)) if x.isdigit() else (1, x) for x in t)):
        g = groups[key]
        stats = []
        for v in values:
            arr = np.array([float(r[v]) for r in g])
            stats += [f"{arr.mean():.4f}", f"{arr.std():.4f}"]
        out.append(list(key) + [len(g)] + stats)
    return out


def report(cfg: RunConfig) -> tuple[str, list[Path]]:
    """Mean and std over seeds of every eval and ablation CSV found."""
    seeds = [s for s in cfg.seeds if cfg.seed_dir(s).is_dir()]
    evals = [p for s in seeds for p in sorted(cfg.seed_dir(s).glob("eval_*.csv"))]
    ablations = [p for s in seeds for p in sorted(cfg.seed_dir(s).glob("ablation.csv"))]
    if not evals and not ablations:
        raise MissingArtifact(f"no eval or ablation CSVs under {cfg.out_dir}; run 'eval' or 'ablate' first")
    stat_cols = ["n_seeds", "auc_mean", "auc_std", "pauc_mean", "pauc_std", "eer_mean", "eer_std"]
    text, out = "", []
    if evals:
        keys = ["train_domain", "eval_domain", "mode", "k"]
        agg = _aggregate(_read_rows(evals), keys)
        out.append(cfg.out_dir / "report_eval.csv")
        _write_csv(out[-1], keys + stat_cols, agg)
        text += "Evaluation (mean over seeds)\n" + format_table(keys + stat_cols, agg) + "\n"
    if ablations:
        keys = ["train_domain", "eval_domain", "k"]
        agg = _aggregate(_read_rows(ablations), keys)
        out.append(cfg.out_dir / "report_ablation.csv")
        _write_csv(out[-1], keys + stat_cols, agg)
        text += "Top-k ablation (learned TTA, mean over seeds)\n" + format_table(keys + stat_cols, agg)
    out.append(cfg.out_dir / "report.txt")
    out[-1].write_text(text)
    return text, out


# --- run manifest ----------------------------------------------------------

def record_run(cfg: RunConfig, command: str, argv, started: float, status: str, outputs) -> Path:
    """Append one entry to ``run_manifest.json``, the only timestamped file."""
    path = cfg.out_dir / "run_manifest.json"
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    runs = json.loads(path.read_text())["runs"] if path.exists() else []
    stamp = lambda t: time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t)) + "Z"  # noqa: E731
    runs.append({
        "command": command, "argv": list(argv), "status": status,
        "started": stamp(started), "finished": stamp(time.time()),
        "config": cfg.to_dict(),
        "outputs": {str(p): _sha256(Path(p)) for p in outputs if Path(p).is_file()},
    })
    path.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True) + "\n")
    return path
