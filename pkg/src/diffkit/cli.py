"""``diffkit`` command line: gen-data, train, eval, sweep, plot.

Every command writes ``run_config.json`` into its output directory; passing
that file back through ``--config`` reruns the command with identical CSV
output.  Randomness derives from ``--seed`` plus fixed per-component offsets
(see ``SEED_OFFSETS``).

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets, nn, plotting, toy
from .agents import AGENTS, evaluate, make_agent
from .diffusion import Denoiser, TrainConfig, train
from .envs import PointMazeEnv, make_policy, make_spec
from .errors import ArgumentError, ConfigurationError, DimensionError, DomainError, FormatError, NumericError
from .schedules import make_schedule
from .solvers import SampleConfig, SolverKind, check_compatible, sample

SEED_OFFSETS = {"data": 0, "train": 1, "sweep_data": 2, "sweep_eval_data": 3, "sweep_sample": 100,
                "eval": 1000}

EXIT_CONFIG, EXIT_NUMERIC, EXIT_FORMAT = 2, 3, 4

DEFAULT_SWEEP_SOLVERS = ("ddpm", "ddim", "sde_dpmpp_1", "ode_dpmpp_2m")
CHAIN_AGENTS = {"dql", "edp", "idql"}
SOLVER_AGENTS = {"diffuser", "dd", "adaptdiffuser", "diffbc", "diffpolicy", "synther"}


@dataclass
class RunConfig:
    command: str
    out: str
    seed: int = 0
    seeds: list[int] | None = None
    # environment and data
    env: str = "pointmaze-open"
    max_steps: int | None = None
    policy: str = "medium"
    episodes: int = 100
    data: str | None = None
    run: str | None = None
    # agent
    algo: str = "bc"
    train_steps: int | None = None
    target_return: float | None = None
    one_step: bool = False
    # diffusion and sampling
    schedule: str = "linear"
    beta0: float | None = None
    beta1: float | None = None
    solver: str | None = None
    sample_steps: int | None = None
    spacing: str | None = None
    temperature: float | None = None
    clip: list[float] | None = None
    guidance: str = "none"
    w: float | None = None
    n_candidates: int | None = None
    diffusion_x: int | None = None
    warm_start: list[float] | None = None
    # sweeps
    sweep: str = "solvers"
    solvers: list[str] | None = None
    steps_list: list[int] | None = None
    ema_rates: list[float] | None = None
    checkpoint_every: int = 2000
    n_samples: int = 2048
    # evaluation and plotting
    workers: int = 1
    csv: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: unreadable config at offset {exc.pos}: {exc.msg}") from None
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    @property
    def run_id(self) -> str:
        """Content hash of everything except the output location."""
        d = dataclasses.asdict(self)
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    # -- validation ----------------------------------------------------------
    def noise_schedule(self):
        kw = {k: v for k, v in (("beta0", self.beta0), ("beta1", self.beta1)) if v is not None}
        if kw and self.schedule != "linear":
            raise ConfigurationError("--beta0/--beta1 only apply to the linear schedule")
        return make_schedule(self.schedule, **kw)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigurationError(f"unknown command {self.command!r}")
        if self.episodes < 0:
            raise ConfigurationError("--episodes must be non-negative")
        if self.workers < 1:
            raise ConfigurationError("--workers must be at least 1")
        if self.sample_steps is not None and self.sample_steps < 1:
            raise ConfigurationError("--sample-steps must be at least 1")
        if self.clip is not None and (len(self.clip) != 2 or self.clip[0] >= self.clip[1]):
            raise ConfigurationError("--clip needs lo,hi with lo < hi")
        if self.warm_start is not None and (len(self.warm_start) != 2 or self.warm_start[1] < 1):
            raise ConfigurationError("--warm-start needs t_w,k with k >= 1")
        if self.guidance not in ("none", "cg", "cfg"):
            raise ConfigurationError(f"unknown guidance {self.guidance!r}")
        sched = self.noise_schedule()
        if self.command in ("train", "eval"):
            self._validate_agent(sched)
        if self.command == "sweep":
            self._validate_sweep(sched)
        if self.command == "plot" and not self.csv:
            raise ConfigurationError("plot needs --csv")
        if self.command == "eval" and not self.run:
            raise ConfigurationError("eval needs --run pointing at a train output directory")
        make_spec(self.env)
        return self

    def _validate_agent(self, sched):
        if self.command == "train" and self.algo not in AGENTS:
            raise ConfigurationError(f"unknown algorithm {self.algo!r}; choose from {sorted(AGENTS)}")
        if self.command == "eval":
            return
        if self.algo != "bc" and self.schedule not in ("linear", "cosine"):
            raise ConfigurationError(f"{self.algo} uses a noise-prediction denoiser; pick a VP schedule")
        if self.solver is not None:
            if self.algo in CHAIN_AGENTS and self.solver != "ddpm":
                raise ConfigurationError(f"{self.algo} samples through a differentiable ddpm chain")
            if self.algo == "bc":
                raise ConfigurationError("bc has no sampler")
            check_compatible(self.solver, sched, "noise")
        allowed = {"diffuser": {"none", "cg"}, "adaptdiffuser": {"none", "cg"}, "dd": {"none", "cfg"}}
        if self.guidance not in allowed.get(self.algo, {"none"}):
            raise ConfigurationError(f"{self.algo} does not support {self.guidance} guidance")

    def _validate_sweep(self, sched):
        if self.sweep not in ("solvers", "ema"):
            raise ConfigurationError(f"unknown sweep {self.sweep!r}")
        if self.schedule in ("edm", "rectified"):
            raise ConfigurationError("the toy sweep trains a noise-prediction model; pick a VP schedule")
        for s in self.solvers or []:
            check_compatible(s, sched, "noise")
        if any(n < 1 for n in self.steps_list or []):
            raise ConfigurationError("--steps-list entries must be positive")
        if self.checkpoint_every < 1 or self.n_samples < 1:
            raise ConfigurationError("--checkpoint-every and --n-samples must be positive")


# ---------------------------------------------------------------------------
# Agent construction


def agent_kwargs(cfg: RunConfig) -> dict:
    """Constructor options for ``cfg.algo`` derived from the flags that were set."""
    algo = cfg.algo
    kw: dict = {"seed": cfg.seed + SEED_OFFSETS["train"]}
    if algo == "bc":
        if cfg.train_steps is not None:
            kw["steps"] = cfg.train_steps
        return kw
    sampler = {"schedule": cfg.noise_schedule()}
    if cfg.sample_steps is not None:
        sampler["sample_steps"] = cfg.sample_steps
    if cfg.temperature is not None:
        sampler["temperature"] = cfg.temperature
    if cfg.solver is not None and algo in SOLVER_AGENTS:
        sampler["solver"] = cfg.solver
    if algo == "synther":
        synth = dict(sampler)
        if cfg.train_steps is not None:
            synth["steps"] = cfg.train_steps
        return {**kw, "synth_kw": synth}
    kw.update(sampler)
    if cfg.train_steps is not None:
        kw["steps"] = cfg.train_steps
    if cfg.n_candidates is not None and algo in ("diffuser", "adaptdiffuser", "dql", "edp", "idql"):
        kw["n_candidates"] = cfg.n_candidates
    if algo in ("diffuser", "adaptdiffuser", "dd"):
        if cfg.clip is not None:
            kw["clip"] = tuple(cfg.clip)
        if cfg.w is not None:
            kw["w"] = cfg.w
        if cfg.guidance == "none":
            kw["w"] = 1.0 if algo == "dd" else 0.0
    if algo in ("diffuser", "adaptdiffuser") and cfg.warm_start is not None:
        kw["warm"] = (float(cfg.warm_start[0]), int(cfg.warm_start[1]))
    if algo == "dd" and cfg.target_return is not None:
        kw["target_return"] = cfg.target_return
    if algo == "dql":
        kw["one_step"] = cfg.one_step
    if algo == "diffbc" and cfg.diffusion_x is not None:
        kw["M"] = cfg.diffusion_x
    return kw


def _solver_label(agent, cfg: RunConfig) -> str:
    if cfg.algo == "bc":
        return ""
    if cfg.algo in CHAIN_AGENTS:
        return "ddpm"
    inner = getattr(agent, "synth", agent)
    return str(getattr(inner, "solver", ""))


def _steps_label(agent) -> int | str:
    inner = getattr(agent, "synth", agent)
    return getattr(inner, "sample_steps", "")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def save_agent(agent, path: Path) -> None:
    groups = agent.state()
    meta = json.loads(json.dumps(agent.meta(), default=_json_default))
    nn.save_params(path / "checkpoint.ckpt", nn.pack(groups), {"agent": meta})
    ema = {k: v for k, v in groups.items() if "ema" in k}
    if ema:
        nn.save_params(path / "ema.ckpt", nn.pack(ema), {})


def load_agent(run_dir: Path, overrides: RunConfig | None = None):
    """Rebuild the agent of a train run and load its checkpoint."""
    train_cfg = RunConfig.from_file(run_dir / "run_config.json")
    cfg = train_cfg
    if overrides is not None:
        changes = {k: getattr(overrides, k) for k in
                   ("solver", "sample_steps", "temperature", "clip", "n_candidates", "diffusion_x", "warm_start",
                    "target_return", "w") if getattr(overrides, k) is not None}
        if overrides.guidance != "none":
            changes["guidance"] = overrides.guidance
        cfg = dataclasses.replace(train_cfg, **changes)
        cfg._validate_agent(cfg.noise_schedule())
    spec = make_spec(cfg.env)
    agent = make_agent(cfg.algo, spec.obs_dim, spec.act_dim, **agent_kwargs(cfg))
    flat, meta = nn.load_params(run_dir / "checkpoint.ckpt")
    groups = {g: {k: v.astype(float) for k, v in ps.items()} for g, ps in nn.unpack(flat).items()}
    agent.load(groups, meta["agent"])
    return agent, train_cfg, cfg


# ---------------------------------------------------------------------------
# Commands


def _env(cfg: RunConfig) -> PointMazeEnv:
    return PointMazeEnv(make_spec(cfg.env, max_steps=cfg.max_steps))


def _write_trace(path: Path, agent) -> None:
    traces = {}
    inner = [("", agent)] if not hasattr(agent, "synth") else [("synth", agent.synth), ("bc", agent.bc)]
    for prefix, a in inner:
        t = getattr(a, "trace", None)
        if isinstance(t, dict):
            for k, v in t.items():
                traces[f"{prefix}{'/' if prefix else ''}{k}"] = v
        elif t is not None:
            traces[prefix or "loss"] = t
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["series", "step", "loss"])
        for name in sorted(traces):
            for i, v in enumerate(traces[name]):
                w.writerow([name, i + 1, repr(round(float(v), 10))])


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    env = _env(cfg)
    rng = np.random.default_rng(cfg.seed + SEED_OFFSETS["data"])
    data = datasets.collect(env, make_policy(cfg.policy), cfg.episodes, rng)
    path = Path(cfg.data) if cfg.data else out / "dataset.dkd"
    datasets.save(data, path)
    mean, se = datasets.mean_and_stderr(data.returns)
    se_txt = "n/a" if se is None else f"{se:.4f}"
    print(f"{cfg.episodes} episodes of {cfg.policy} on {cfg.env}: success {data.success_rate():.3f}, "
          f"return {mean:.4f} +- {se_txt} -> {path}")


def _training_data(cfg: RunConfig, out: Path):
    if cfg.data:
        return datasets.load(cfg.data)
    rng = np.random.default_rng(cfg.seed + SEED_OFFSETS["data"])
    data = datasets.collect(_env(cfg), make_policy(cfg.policy), cfg.episodes, rng)
    datasets.save(data, out / "dataset.dkd")
    return data


def cmd_train(cfg: RunConfig, out: Path) -> None:
    data = _training_data(cfg, out)
    if len(data) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    agent = make_agent(cfg.algo, data.obs_dim, data.act_dim, **agent_kwargs(cfg))
    agent.fit(data, _env(cfg))
    save_agent(agent, out)
    _write_trace(out / "trace.csv", agent)
    print(f"trained {cfg.algo} on {len(data)} transitions -> {out / 'checkpoint.ckpt'}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    agent, train_cfg, eff = load_agent(Path(cfg.run), cfg)
    env_cfg = dataclasses.replace(train_cfg, max_steps=cfg.max_steps or train_cfg.max_steps)
    results = evaluate(agent, _env(env_cfg), cfg.episodes, cfg.seed + SEED_OFFSETS["eval"], cfg.workers)
    base = {"run_id": cfg.run_id, "algo": train_cfg.algo, "env": train_cfg.env,
            "solver": _solver_label(agent, eff), "steps": _steps_label(agent)}
    rows = [{**base, "seed": r.seed, "score": float(r.ret)} for r in results]
    mean, se = datasets.mean_and_stderr([r.ret for r in results])
    rows.append({**base, "seed": "", "score": mean, "stderr": se})
    datasets.write_metrics(out / "metrics.csv", rows)
    print(f"{train_cfg.algo} on {train_cfg.env}: mean return {mean:.4f} over {cfg.episodes} episodes, "
          f"success {np.mean([r.success for r in results]) if results else 0.0:.3f}")


def _gmm_model(cfg: RunConfig, hidden=(128, 128, 128)) -> Denoiser:
    return Denoiser(2, cfg.noise_schedule(), "noise", hidden_widths=hidden, seed=cfg.seed + SEED_OFFSETS["train"])


class TrainingCounter:
    """Counts how many models a sweep trained (the cross-solver sweep must train one)."""

    def __init__(self):
        self.count = 0

    def __call__(self, *args, **kwargs):
        self.count += 1
        return train(*args, **kwargs)


def cmd_sweep(cfg: RunConfig, out: Path) -> dict:
    rng = np.random.default_rng(cfg.seed + SEED_OFFSETS["sweep_data"])
    x_train, _ = toy.gmm_data(20_000, rng)
    x_ref, _ = toy.gmm_data(cfg.n_samples, np.random.default_rng(cfg.seed + SEED_OFFSETS["sweep_eval_data"]))
    model = _gmm_model(cfg)
    counter = TrainingCounter()
    rows = []
    if cfg.sweep == "solvers":
        solvers = cfg.solvers or list(DEFAULT_SWEEP_SOLVERS)
        steps_list = cfg.steps_list or [5, 10, 20, 50]
        counter(model, x_train, TrainConfig(cfg.train_steps or 6000, 256, 1e-3, 0.999,
                                            seed=cfg.seed + SEED_OFFSETS["train"]))
        for solver in solvers:
            for n in steps_list:
                if SolverKind(solver) is SolverKind.ODE_DPMPP_2M and n < 2:
                    raise ConfigurationError("ode_dpmpp_2m needs at least 2 steps")
                for seed in cfg.seed_list:
                    sc = SampleConfig(solver, n, cfg.temperature if cfg.temperature is not None else 1.0,
                                      cfg.n_samples, tuple(cfg.clip) if cfg.clip else None,
                                      seed + SEED_OFFSETS["sweep_sample"], cfg.spacing,
                                      diffusion_x=cfg.diffusion_x or 0)
                    x = sample(model, sc)
                    rows.append({"run_id": cfg.run_id, "algo": "denoiser", "env": "gmm8", "solver": solver,
                                 "steps": n, "seed": seed, "score": toy.energy_distance(x, x_ref)})
        ylabel = "energy distance"
    else:
        rates = cfg.ema_rates or [0.999, 0.9999]
        x_eval, _ = toy.gmm_data(4096, np.random.default_rng(cfg.seed + SEED_OFFSETS["sweep_eval_data"] + 1))
        tcfg = TrainConfig(cfg.train_steps or 20_000, 256, 1e-3, 0.0, seed=cfg.seed + SEED_OFFSETS["train"])
        counter.count += 1
        traces = toy.ema_sweep(model, x_train, x_eval, tcfg, rates, cfg.checkpoint_every, cfg.seed)
        for label, trace in sorted(traces.items()):
            for i, v in enumerate(trace):
                rows.append({"run_id": cfg.run_id, "algo": "denoiser", "env": "gmm8", "solver": label,
                             "steps": (i + 1) * cfg.checkpoint_every, "seed": cfg.seed, "score": v})
        ylabel = "evaluation loss"
    datasets.write_metrics(out / "sweep.csv", rows)
    series = plotting.series_from_rows([{k: str(v) for k, v in r.items()} for r in rows])
    title = "solver x sampling steps" if cfg.sweep == "solvers" else "EMA rate"
    xlabel = "sampling steps" if cfg.sweep == "solvers" else "gradient steps"
    (out / "sweep.svg").write_text(plotting.line_chart(series, title, xlabel, ylabel))
    print(f"sweep {cfg.sweep}: {len(rows)} rows, {counter.count} model(s) trained -> {out / 'sweep.csv'}")
    return {"trainings": counter.count, "rows": len(rows)}


def cmd_plot(cfg: RunConfig, out: Path) -> None:
    try:
        with open(cfg.csv, newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError:
        raise ConfigurationError(f"{cfg.csv} not found") from None
    if rows and not {"steps", "score", "solver"} <= set(rows[0]):
        raise FormatError(f"{cfg.csv}: missing metric columns (offset 0)")
    series = plotting.series_from_rows(rows)
    path = out / (Path(cfg.csv).stem + ".svg")
    path.write_text(plotting.line_chart(series, Path(cfg.csv).stem, "steps", "score"))
    print(f"wrote {path}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "plot": cmd_plot}


# ---------------------------------------------------------------------------
# Argument parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffkit", description="Diffusion models for toy decision making.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--out", help="output directory (created if missing)")
    g.add_argument("--config", help="rerun from a saved run_config.json; other flags except --out are ignored")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=_ints, help="comma-separated seeds (sweeps)")
    g.add_argument("--workers", type=int, default=1)
    e = common.add_argument_group("environment and data")
    e.add_argument("--env", default="pointmaze-open")
    e.add_argument("--max-steps", type=int)
    e.add_argument("--policy", default="medium", help="scripted policy for data collection")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--data", help="dataset file (written by gen-data, read by train)")
    a = common.add_argument_group("agent")
    a.add_argument("--algo", default="bc", choices=sorted(AGENTS))
    a.add_argument("--train-steps", type=int, help="gradient steps")
    a.add_argument("--target-return", type=float, help="dd: normalised return to condition on")
    a.add_argument("--one-step", action="store_true", help="dql: backpropagate through the last step only")
    a.add_argument("--n-candidates", type=int)
    d = common.add_argument_group("diffusion and sampling")
    d.add_argument("--schedule", default="linear", choices=["linear", "cosine", "edm", "rectified"])
    d.add_argument("--beta0", type=float)
    d.add_argument("--beta1", type=float)
    d.add_argument("--solver", choices=[s.value for s in SolverKind])
    d.add_argument("--sample-steps", type=int)
    d.add_argument("--spacing", choices=["uniform", "quadratic", "power", "logsnr"])
    d.add_argument("--temperature", type=float)
    d.add_argument("--clip", type=_floats, metavar="LO,HI")
    d.add_argument("--guidance", default="none", choices=["none", "cg", "cfg"])
    d.add_argument("--w", type=float, help="guidance scale")
    d.add_argument("--diffusion-x", type=int, metavar="M")
    d.add_argument("--warm-start", type=_floats, metavar="T_W,K")
    s = common.add_argument_group("sweeps, evaluation and plots")
    s.add_argument("--sweep", default="solvers", choices=["solvers", "ema"])
    s.add_argument("--solvers", type=_strs)
    s.add_argument("--steps-list", type=_ints)
    s.add_argument("--ema-rates", type=_floats)
    s.add_argument("--checkpoint-every", type=int, default=2000)
    s.add_argument("--n-samples", type=int, default=2048)
    s.add_argument("--run", help="eval: directory written by train")
    s.add_argument("--csv", help="plot: metrics CSV to draw")
    helps = {"gen-data": "collect a dataset with a scripted policy", "train": "train an agent",
             "eval": "evaluate a trained agent", "sweep": "solver/steps or EMA sweep on a toy GMM",
             "plot": "draw an SVG from a metrics CSV"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    if ns.config:
        cfg = RunConfig.from_file(ns.config)
        if cfg.command != ns.command:
            raise ConfigurationError(f"config is for {cfg.command!r}, not {ns.command!r}")
        if ns.out:
            cfg = dataclasses.replace(cfg, out=ns.out)
        return cfg
    if not ns.out:
        raise ConfigurationError("--out is required")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    kw = {k: v for k, v in vars(ns).items() if k in names}
    return RunConfig(**kw)


def run(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = config_from_args(ns).validate()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(cfg.to_json())
        COMMANDS[cfg.command](cfg, out)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ArgumentError, DimensionError, DomainError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
