"""Online joint training and the amortized inference front end."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import ndiff as nd
from .classifiers import MODES, FilterNet, IndependentClassifier, joint_loss, smooth_combine, softmax_np
from .flow import FlowStack, PosteriorDraws, flow_sample, npe_loss
from .ndiff import Graph, NumericError, ParamStore, Tensor
from .simulators import Dataset, Model, SimBatch, make_model, model_config
from .summary import DeepSetGlobal, DeepSetLocal, RecurrentGlobal, mmd_penalty

log = logging.getLogger(__name__)

ARCH_DEFAULTS = {
    "gmm": dict(local_dim=2, local_hidden=16, global_dim=16, global_hidden=32, flow_layers=6, flow_hidden=64,
                classifier_hidden=32, classifier_depth=3),
    "hmm": dict(local_dim=4, local_hidden=16, rnn_hidden=32, flow_layers=6, flow_hidden=64, filter_hidden=32,
                classifier_hidden=32, classifier_depth=2),
    "decision": dict(front=16, rnn_hidden=16, bidirectional=True, flow_layers=6, flow_hidden=64, filter_hidden=32,
                     classifier_hidden=64, classifier_depth=2, mmd_weight=1.0),
    "toy": dict(global_dim=8, global_hidden=32, flow_layers=4, flow_hidden=32),
}
COMMON_ARCH = dict(s_max=3.0, flow_depth=2, mmd_weight=0.0)


@dataclass
class TrainConfig:
    model: str = "gmm"
    epochs: int = 10
    iterations_per_epoch: int = 1000
    batch_size: int = 64
    lr: float = 5e-4
    lr_min: float = 0.0
    clip_norm: float | None = 10.0
    seed: int = 0
    arch: dict = field(default_factory=dict)
    model_overrides: dict = field(default_factory=dict)
    n_standardize: int = 1000
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        for k in ("epochs", "iterations_per_epoch", "batch_size", "n_standardize"):
            if int(getattr(self, k)) < 1:
                raise ValueError(f"{k} must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Encoded:
    locals: Tensor | None
    glob: Tensor
    cond: Tensor
    theta_std: np.ndarray


def decision_features(batch: SimBatch) -> np.ndarray:
    """Per-trial (log rt, signed choice), zero in padded slots."""
    y = batch.y[:, :, 0, :]
    rt = np.where(batch.unit_mask, y[..., 0], 1.0)
    f = np.stack([np.log(rt), 2.0 * y[..., 1] - 3.0], axis=-1)
    return np.where(batch.unit_mask[..., None], f, 0.0)


class Networks:
    """All learnable pieces for one model, sharing one ParamStore."""

    def __init__(self, model: Model, arch: dict, rng: np.random.Generator):
        self.model = model
        a = {**COMMON_ARCH, **ARCH_DEFAULTS[model.name], **arch}
        self.arch = a
        self.store = s = ParamStore()
        D, K = model.D, model.K
        self.local = self.glob = self.independent = self.forward = self.backward = None
        self.mmd_weight = float(a["mmd_weight"])
        name = model.name
        if name == "gmm":
            self.local = DeepSetLocal(s, "local", 1, a["local_dim"], rng, a["local_hidden"])
            self.glob = DeepSetGlobal(s, "global", a["local_dim"], a["global_dim"], rng, a["global_hidden"])
            E = a["local_dim"]
        elif name == "hmm":
            self.local = DeepSetLocal(s, "local", 1, a["local_dim"], rng, a["local_hidden"])
            self.glob = RecurrentGlobal(s, "global", a["local_dim"], a["rnn_hidden"], rng)
            E = a["local_dim"]
        elif name == "decision":
            self.glob = RecurrentGlobal(s, "global", 2, a["rnn_hidden"], rng, a["bidirectional"], a["front"])
            E = 2
        elif name == "toy":
            self.glob = DeepSetGlobal(s, "global", 1, a["global_dim"], rng, a["global_hidden"])
            E = 1
        else:
            raise ValueError(f"no architecture for model {name!r}")
        self.ctx_dim = len(model.context(1, [1]))
        s.add("context.loc", np.zeros(self.ctx_dim), trainable=False)
        s.add("context.scale", np.ones(self.ctx_dim), trainable=False)
        self.flow = FlowStack(s, "flow", D, self.glob.out_dim + self.ctx_dim, rng, a["flow_layers"],
                              a["flow_hidden"], a["flow_depth"], a["s_max"])
        if K > 1 and not model.dependent:
            self.independent = IndependentClassifier(s, "classifier", E, D, K, rng, a["classifier_hidden"],
                                                     a["classifier_depth"])
        elif model.dependent:
            self.forward = FilterNet(s, "filter_fwd", E, D, K, rng, a["filter_hidden"], a["classifier_hidden"],
                                     a["classifier_depth"])
            self.backward = FilterNet(s, "filter_bwd", E, D, K, rng, a["filter_hidden"], a["classifier_hidden"],
                                      a["classifier_depth"], reverse=True)

    # ---- standardization

    def fit_standardization(self, seed: int, n: int):
        """Freeze theta and context moments from ``n`` prior simulations."""
        m = self.model
        b = m.simulate_batch(n, seed, stream=0)
        th = b.theta_unc
        ctx = m.batch_context(b)
        self.flow.set_standardization(th.mean(0), _safe_sd(th))
        self.store.set("context.loc", ctx.mean(0))
        self.store.set("context.scale", _safe_sd(ctx))

    def context_std(self, ctx) -> np.ndarray:
        return (np.asarray(ctx, float) - self.store["context.loc"].value) / self.store["context.scale"].value

    # ---- forward passes

    def local_features(self, g: Graph | None, batch: SimBatch) -> Tensor:
        name = self.model.name
        if self.local is not None:
            return self.local(g, batch.y, batch.obs_mask)
        if name == "decision":
            return Tensor(decision_features(batch))
        return Tensor(batch.y[:, :, 0, :])

    def encode(self, g: Graph | None, batch: SimBatch) -> Encoded:
        loc = self.local_features(g, batch)
        glob = self.glob(g, loc, batch.unit_mask)
        ctx = Tensor(self.context_std(self.model.batch_context(batch)))
        cond = nd.concat([glob, ctx], axis=-1)
        return Encoded(loc, glob, cond, self.flow.standardize(batch.theta_unc))

    def npe_term(self, g, batch: SimBatch, enc: Encoded) -> Tensor:
        return npe_loss(self.flow, batch.theta_unc, enc.cond, g)

    def mmd_term(self, enc: Encoded, rng) -> Tensor:
        return mmd_penalty(enc.glob, rng)

    def refresh(self):
        self.flow.refresh()

    def modes(self) -> list[str]:
        if self.independent is not None:
            return ["independent"]
        if self.forward is not None:
            return ["filter_forward", "filter_backward", "smooth"]
        return []


def _safe_sd(x) -> np.ndarray:
    sd = np.asarray(x, float).std(0)
    return np.where(sd > 1e-8, sd, 1.0)


def cosine_lr(base: float, floor: float, it: int, total: int) -> float:
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * it / max(total, 1)))


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TraceRow:
    epoch: int
    iteration: int
    lr: float
    total: float
    terms: dict


def _init_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def train_joint(cfg: TrainConfig, trace_path=None, progress=None) -> "AmortizedModel":
    """Online training: every iteration simulates a fresh batch.

    Batches with a non-finite loss or gradient are skipped and logged; if
    more than ``max_skip_fraction`` of all iterations are skipped the run is
    aborted.
    """
    model = make_model(cfg.model, **cfg.model_overrides)
    nets = Networks(model, cfg.arch, _init_rng(cfg.seed, 2))
    nets.fit_standardization(cfg.seed, cfg.n_standardize)
    mmd_rng = _init_rng(cfg.seed, 3)
    total = cfg.iterations
    skipped, next_start = 0, 0
    trace: list[TraceRow] = []
    sums: dict[str, float] = {}
    for it in range(total):
        epoch = it // cfg.iterations_per_epoch
        lr = cosine_lr(cfg.lr, cfg.lr_min, it, total)
        start = it * cfg.batch_size
        if start < next_start:
            raise AssertionError("simulation index reused")
        next_start = start + cfg.batch_size
        batch = model.simulate_batch(cfg.batch_size, cfg.seed, start=start, stream=1)
        g = Graph()
        try:
            loss, terms = joint_loss(nets, batch, g, mmd_rng)
            nets.store.zero_grad()
            nd.grad_backward(g, loss, nets.store)
            if not all(np.all(np.isfinite(p.grad)) for _, p in nets.store.trainable()):
                raise NumericError("non-finite gradient")
        except NumericError as exc:
            g.free()
            nets.store.zero_grad()
            skipped += 1
            th = batch.theta_unc
            log.warning("iteration %d skipped (%s); theta range [%.3g, %.3g]", it, exc, th.min(), th.max())
            if skipped > cfg.max_skip_fraction * total:
                raise TrainingAborted(f"{skipped} of {total} batches skipped; last error: {exc}") from exc
            continue
        nd.adam_step(nets.store, lr, clip_norm=cfg.clip_norm)
        row = TraceRow(epoch, it, lr, float(loss.data), terms)
        trace.append(row)
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v
        if (it + 1) % cfg.iterations_per_epoch == 0:
            n = cfg.iterations_per_epoch
            log.info("epoch %d: %s", epoch + 1, ", ".join(f"{k}={v / n:.4f}" for k, v in sums.items()))
            if progress:
                progress(epoch + 1, {k: v / n for k, v in sums.items()})
            sums = {}
    am = AmortizedModel(nets, cfg, trace=trace, skipped=skipped)
    if trace_path is not None:
        am.write_trace(trace_path)
    return am


@dataclass
class ClassProbs:
    probs: np.ndarray  # (N, K, S)
    mode: str

    def summary(self) -> np.ndarray:
        """(N, K, 3) array of 2.5%, 50% and 97.5% quantiles over draws."""
        return np.moveaxis(np.quantile(self.probs, [0.025, 0.5, 0.975], axis=-1), 0, -1)

    def to_csv(self, path, header_lines=()):
        q = self.summary()
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# mode={self.mode}\n")
            w = csv.writer(fh)
            w.writerow(["unit", "state", "quantile_0.025", "median", "quantile_0.975"])
            for n in range(q.shape[0]):
                for k in range(q.shape[1]):
                    w.writerow([n + 1, k + 1] + [format(v, ".10g") for v in q[n, k]])


class AmortizedModel:
    """Trained networks plus everything needed to rebuild and audit them."""

    def __init__(self, nets: Networks, cfg: TrainConfig, trace=None, skipped: int = 0):
        self.nets, self.cfg = nets, cfg
        self.model = nets.model
        self.trace = trace or []
        self.skipped = skipped

    @property
    def store(self) -> ParamStore:
        return self.nets.store

    def manifest(self) -> dict:
        return {
            "tool": "abmix",
            "version": __version__,
            "model": self.model.name,
            "model_config": model_config(self.model),
            "arch": self.nets.arch,
            "train_config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "skipped_batches": self.skipped,
            "modes": self.nets.modes(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        man = self.manifest()
        nd.save_checkpoint(self.store, path, meta=man)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "AmortizedModel":
        store, meta = nd.load_checkpoint(path)
        cfg = TrainConfig(**meta["train_config"])
        model = make_model(cfg.model, **cfg.model_overrides)
        nets = Networks(model, cfg.arch, np.random.default_rng(0))
        for name in nets.store:
            if name not in store:
                raise ValueError(f"checkpoint lacks entry {name!r}")
            nets.store.set(name, store[name].value)
        nets.store.step_count = store.step_count
        nets.refresh()
        return cls(nets, cfg, skipped=meta.get("skipped_batches", 0))

    def write_trace(self, path, header_lines=()):
        keys = sorted({k for r in self.trace for k in r.terms})
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "iteration", "lr", "total"] + keys)
            for r in self.trace:
                w.writerow([r.epoch + 1, r.iteration + 1, format(r.lr, ".6g"), format(r.total, ".10g")]
                           + [format(r.terms.get(k, float("nan")), ".10g") for k in keys])

    # ---- inference

    def _check_scope(self, d: Dataset):
        cfg = self.model.cfg
        nr = getattr(cfg, "n_range", None)
        if nr and not (nr[0] <= d.N <= nr[1]):
            log.warning("dataset has N=%d outside the training range %s", d.N, tuple(nr))
        pr = getattr(cfg, "p_range", None)
        if pr and (d.P.min() < pr[0] or d.P.max() > pr[1]):
            log.warning("dataset has unit sizes outside the training range %s", tuple(pr))

    def batch(self, d: Dataset) -> SimBatch:
        if d.model != self.model.name:
            raise ValueError(f"dataset is for model {d.model!r}, checkpoint for {self.model.name!r}")
        return self.model.batch_of([d])

    def condition(self, datasets: list[Dataset]) -> np.ndarray:
        return self.nets.encode(None, self.model.batch_of(datasets)).cond.data

    def sample_posterior(self, d: Dataset, S: int = 1000, seed: int = 0, cond=None) -> PosteriorDraws:
        self._check_scope(d)
        if cond is None:
            cond = self.nets.encode(None, self.batch(d)).cond.data[0]
        return flow_sample(self.nets.flow, cond, S, np.random.default_rng(seed), self.model.display,
                           self.model.param_names)

    def sample_many(self, datasets: list[Dataset], S: int, seed: int = 0, chunk: int = 64) -> list[PosteriorDraws]:
        """Posterior draws for many datasets; dataset i uses seed stream (seed, i)."""
        out = []
        for i in range(0, len(datasets), chunk):
            conds = self.condition(datasets[i: i + chunk])
            for j, c in enumerate(conds):
                rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i + j,)))
                out.append(flow_sample(self.nets.flow, c, S, rng, self.model.display, self.model.param_names))
        return out

    def class_logits(self, d: Dataset, theta_unc, which: str, chunk: int = 256) -> np.ndarray:
        """Logits (S, N, K) of one classifier for each parameter row."""
        net = {"independent": self.nets.independent, "forward": self.nets.forward,
               "backward": self.nets.backward}[which]
        b = self.batch(d)
        loc = self.nets.local_features(None, b).data
        th = self.nets.flow.standardize(np.atleast_2d(theta_unc))
        outs = []
        for i in range(0, len(th), chunk):
            t = th[i: i + chunk]
            L = Tensor(np.broadcast_to(loc, (len(t),) + loc.shape[1:]))
            if which == "independent":
                outs.append(net(None, L, t).data)
            else:
                m = np.broadcast_to(b.unit_mask, (len(t), b.unit_mask.shape[1]))
                outs.append(net(None, L, t, m).data)
        return np.concatenate(outs)

    def classify(self, d: Dataset, draws, mode: str | None = None) -> ClassProbs:
        """Per-draw membership probabilities, shape (N, K, S)."""
        modes = self.nets.modes()
        if not modes:
            raise ValueError(f"model {self.model.name!r} has no mixture indicators to classify")
        mode = mode or modes[0]
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
        if mode not in modes:
            raise ValueError(f"mode {mode!r} is not supported for model {self.model.name!r}; use one of {modes}")
        theta = getattr(draws, "unconstrained", draws)
        if mode == "independent":
            p = softmax_np(self.class_logits(d, theta, "independent"))
        elif mode == "filter_forward":
            p = softmax_np(self.class_logits(d, theta, "forward"))
        elif mode == "filter_backward":
            bl = self.class_logits(d, theta, "backward")
            p = softmax_np(bl)
        else:
            p = smooth_combine(self.class_logits(d, theta, "forward"), self.class_logits(d, theta, "backward"))
        return ClassProbs(np.moveaxis(p, 0, -1), mode)
