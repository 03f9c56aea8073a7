"""A small convolutional classifier with named hook points.

Each block is conv3x3 -> ReLU -> optional 2x2 average pool, followed by a
global-average-pool linear head. There are no normalization layers, so the
channel statistics observed at the hooks are unconfounded. Style transforms
attach at hooks during training (balancing first, then augmentation); the
test-time shifter attaches at one hook during evaluation.

Gradients come from the package's reverse-mode engine. Hook operations record
the randomness and sorting permutations they used, and can be replayed with
that state frozen; finite-difference checks difference the replayed forward,
which is the function the stop-gradient contracts differentiate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, DivergenceError
from .style_balance import BatchMeta, MovePlan, build_balance_plan, sb_apply_var
from .style_ops import DEFAULT_LAMBDA_SHAPE, dsu_var, efdmix_hook, mixstyle_var
from .tensor_core import EPS_STD, batch_style_vectors
from .test_time_shift import OFF, DomainRegistry, ShiftMode, ts_apply

AUG_KINDS = ("none", "mixstyle", "dsu", "efdmix")


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    stride: int = 1
    pool: bool = True


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    image_size: int = 32
    blocks: tuple[BlockSpec, ...] = (BlockSpec(8), BlockSpec(16), BlockSpec(32))
    n_classes: int = 7

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if len(blocks) < 2:
            raise ConfigError("need at least 2 blocks so a shifter can attach mid-network")
        size = self.image_size
        for i, blk in enumerate(blocks):
            if blk.out_channels < 1 or blk.stride < 1:
                raise ConfigError("block channels and stride must be positive")
            size = (size + 2 - 3) // blk.stride + 1
            if blk.pool:
                if size % 2:
                    raise ConfigError(f"block {i + 1} pooling needs even input, got {size}")
                size //= 2
        if size < 1:
            raise ConfigError("network reduces the image to nothing")

    @property
    def hook_names(self) -> tuple[str, ...]:
        return tuple(f"block{i + 1}" for i in range(len(self.blocks)))

    def channels_at(self, hook: str) -> int:
        return self.blocks[self.hook_names.index(hook)].out_channels

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "blocks": [{"out_channels": b.out_channels, "stride": b.stride, "pool": b.pool}
                       for b in self.blocks],
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetConfig":
        return cls(in_channels=doc["in_channels"], image_size=doc["image_size"],
                   blocks=tuple(BlockSpec(**b) for b in doc["blocks"]),
                   n_classes=doc["n_classes"])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    sb: bool = False
    sb_prob: float = 0.5
    sb_hooks: tuple[str, ...] | None = None     # None = every hook
    aug: str = "none"
    aug_prob: float = 0.5
    aug_hooks: tuple[str, ...] | None = None
    lambda_shape: float = DEFAULT_LAMBDA_SHAPE

    def __post_init__(self):
        if self.aug not in AUG_KINDS:
            raise ConfigError(f"unknown augmentation {self.aug!r}")
        if not 0.0 <= self.sb_prob <= 1.0 or not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError("activation probabilities must lie in [0, 1]")


# -- hook operations ---------------------------------------------------------

class SbHookOp:
    """Style balancing at one hook; keeps the executed plan for audit."""

    kind = "sb"

    def __init__(self, meta: BatchMeta, rng: np.random.Generator,
                 lambda_shape: float = DEFAULT_LAMBDA_SHAPE, eps_std: float = EPS_STD):
        self.meta = meta
        self.rng = rng
        self.lambda_shape = lambda_shape
        self.eps_std = eps_std
        self.plan: MovePlan | None = None
        self._state = None
        self._frozen = False

    def __call__(self, v: Var) -> Var:
        if self._frozen:
            out, _ = sb_apply_var(v, self.plan.moves, frozen=self._state)
            return out
        styles = batch_style_vectors(v.value, self.eps_std)
        self.plan = build_balance_plan(styles, self.meta, self.rng, self.lambda_shape)
        out, self._state = sb_apply_var(v, self.plan.moves)
        return out

    def replay(self) -> "SbHookOp":
        clone = SbHookOp(self.meta, self.rng, self.lambda_shape, self.eps_std)
        clone.plan = self.plan
        clone._state = self._state
        clone._frozen = True
        return clone


class MixstyleHookOp:
    kind = "mixstyle"

    def __init__(self, perm, lambdas, eps_std: float = EPS_STD):
        self.perm = perm
        self.lambdas = lambdas
        self.eps_std = eps_std

    @classmethod
    def draw(cls, batch_size: int, rng: np.random.Generator,
             lambda_shape: float, eps_std: float = EPS_STD) -> "MixstyleHookOp":
        return cls(rng.permutation(batch_size), rng.beta(lambda_shape, lambda_shape, batch_size),
                   eps_std)

    def __call__(self, v: Var) -> Var:
        return mixstyle_var(v, self.lambdas, self.perm, self.eps_std)

    def replay(self) -> "MixstyleHookOp":
        return self  # fully determined by the recorded draws


class DsuHookOp:
    kind = "dsu"

    def __init__(self, eps_mu, eps_sig, eps_std: float = EPS_STD):
        self.eps_mu = eps_mu
        self.eps_sig = eps_sig
        self.eps_std = eps_std

    @classmethod
    def draw(cls, batch_size: int, channels: int, rng: np.random.Generator,
             eps_std: float = EPS_STD) -> "DsuHookOp":
        return cls(rng.standard_normal((batch_size, channels)),
                   rng.standard_normal((batch_size, channels)), eps_std)

    def __call__(self, v: Var) -> Var:
        return dsu_var(v, self.eps_mu, self.eps_sig, self.eps_std)

    def replay(self) -> "DsuHookOp":
        return self


class EfdmixHookOp:
    kind = "efdmix"

    def __init__(self, perm, lambdas):
        self.perm = perm
        self.lambdas = lambdas
        self._state = None

    @classmethod
    def draw(cls, batch_size: int, rng: np.random.Generator,
             lambda_shape: float) -> "EfdmixHookOp":
        return cls(rng.permutation(batch_size), rng.beta(lambda_shape, lambda_shape, batch_size))

    def __call__(self, v: Var) -> Var:
        out, state = efdmix_hook(v, self.perm, self.lambdas, frozen=self._state)
        if self._state is None:
            self._state = state
        return out

    def replay(self) -> "EfdmixHookOp":
        clone = EfdmixHookOp(self.perm, self.lambdas)
        clone._state = self._state
        return clone


class TsHookOp:
    """Evaluation-time shifter; applied per sample, blocks gradients."""

    kind = "ts"

    def __init__(self, reg: DomainRegistry, alpha: float | None, mode: ShiftMode,
                 sample_pool=None, rng: np.random.Generator | None = None,
                 eps_std: float = EPS_STD):
        self.reg = reg
        self.alpha = alpha
        self.mode = mode
        self.sample_pool = sample_pool
        self.rng = rng
        self.eps_std = eps_std
        self.decisions = []

    def __call__(self, v: Var) -> Var:
        vals = v.value
        out = np.empty_like(vals)
        for i in range(vals.shape[0]):
            out[i], decision = ts_apply(vals[i], self.reg, self.alpha, self.mode,
                                        self.sample_pool, self.rng, self.eps_std)
            self.decisions.append(decision)
        return Var(out)


# -- the network -------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: Var
    hook_inputs: dict[str, Var]
    param_vars: dict[str, Var]


class MicroNet:
    def __init__(self, config: NetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0) -> "MicroNet":
        rng = np.random.Generator(np.random.PCG64(seed))
        params: dict[str, np.ndarray] = {}
        cin = config.in_channels
        for i, blk in enumerate(config.blocks):
            fan_in = cin * 9
            params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                              (blk.out_channels, cin, 3, 3))
            params[f"conv{i}_b"] = np.zeros(blk.out_channels)
            cin = blk.out_channels
        params["head_w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, config.n_classes))
        params["head_b"] = np.zeros(config.n_classes)
        return cls(config, params)

    @property
    def hook_names(self) -> tuple[str, ...]:
        return self.config.hook_names

    @property
    def param_order(self) -> list[str]:
        names = []
        for i in range(len(self.config.blocks)):
            names += [f"conv{i}_w", f"conv{i}_b"]
        return names + ["head_w", "head_b"]

    def forward(self, x, hook_ops=None, from_hook: str | None = None) -> ForwardResult:
        """Run the network, applying hook operations in their listed order.

        ``from_hook`` treats x as the raw hook input at that point and runs
        only the remainder of the network (used by gradient checks).
        """
        by_hook: dict[str, list] = {}
        for name, op in hook_ops or []:
            if name not in self.hook_names:
                raise ConfigError(f"unknown hook {name!r}")
            by_hook.setdefault(name, []).append(op)
        pv = {name: Var(val) for name, val in self.params.items()}
        h = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
        hook_inputs: dict[str, Var] = {}
        started = from_hook is None
        for i, blk in enumerate(self.config.blocks):
            name = f"block{i + 1}"
            if started:
                h = ad.conv2d(h, pv[f"conv{i}_w"], pv[f"conv{i}_b"], stride=blk.stride, pad=1)
                h = ad.relu(h)
                if blk.pool:
                    h = ad.avg_pool2(h)
            elif name == from_hook:
                started = True
            else:
                continue
            hook_inputs[name] = h
            for op in by_hook.get(name, []):
                h = op(h)
        feats = ad.global_avg_pool(h)
        logits = ad.linear(feats, pv["head_w"], pv["head_b"])
        return ForwardResult(logits=logits, hook_inputs=hook_inputs, param_vars=pv)

    def style_vectors_at(self, x, layer: str, batch_size: int = 256,
                         eps_std: float = EPS_STD) -> np.ndarray:
        """Per-sample style vectors at one hook from clean forward passes."""
        if layer not in self.hook_names:
            raise ConfigError(f"unknown hook {layer!r}")
        x = np.asarray(x, dtype=np.float64)
        out = []
        for start in range(0, x.shape[0], batch_size):
            res = self.forward(x[start:start + batch_size])
            out.append(batch_style_vectors(res.hook_inputs[layer].value, eps_std))
        return np.concatenate(out, axis=0)

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "param_order": self.param_order,
            "params": {
                name: {"shape": list(self.params[name].shape),
                       "data": self.params[name].ravel().tolist()}
                for name in self.param_order
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "MicroNet":
        doc = json.loads(Path(path).read_text())
        config = NetConfig.from_dict(doc["config"])
        params = {
            name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            for name, spec in doc["params"].items()
        }
        return cls(config, params)


# -- training ------------------------------------------------------------------

@dataclass
class TrainMetrics:
    epochs: list[dict] = field(default_factory=list)   # {"epoch", "loss", "accuracy"}
    audit: list[dict] = field(default_factory=list)    # per-batch balancing records


def _draw_hook_ops(cfg: TrainConfig, net: MicroNet, meta: BatchMeta,
                   batch_size: int, rng: np.random.Generator):
    # style modules default to the non-final blocks: restyling the features
    # that feed the pooled head directly destroys the class signal
    ops: list[tuple[str, object]] = []
    if cfg.sb:
        hooks = cfg.sb_hooks or net.hook_names[:-1]
        hook = hooks[int(rng.integers(len(hooks)))]
        if rng.random() < cfg.sb_prob:
            ops.append((hook, SbHookOp(meta, rng, cfg.lambda_shape)))
    if cfg.aug != "none":
        for hook in cfg.aug_hooks or net.hook_names[:-1]:
            if rng.random() < cfg.aug_prob:
                if cfg.aug == "mixstyle":
                    op = MixstyleHookOp.draw(batch_size, rng, cfg.lambda_shape)
                elif cfg.aug == "dsu":
                    op = DsuHookOp.draw(batch_size, net.config.channels_at(hook), rng)
                else:
                    op = EfdmixHookOp.draw(batch_size, rng, cfg.lambda_shape)
                ops.append((hook, op))
    return ops


def train(net: MicroNet, images, class_labels, domain_labels, cfg: TrainConfig,
          n_domains: int | None = None) -> TrainMetrics:
    """SGD-with-momentum training with per-batch stochastic hook placement.

    Balancing (when enabled) runs at one uniformly chosen hook with its
    activation probability; any configured augmentation runs after it.
    Deterministic given (net, data, cfg.seed).
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(class_labels, dtype=np.intp)
    doms = np.asarray(domain_labels, dtype=np.intp)
    if n_domains is None:
        n_domains = int(doms.max()) + 1 if doms.size else 1
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    velocity = {name: np.zeros_like(val) for name, val in net.params.items()}
    metrics = TrainMetrics()
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        correct = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            meta = BatchMeta(doms[idx], yb, n_domains, net.config.n_classes)
            ops = _draw_hook_ops(cfg, net, meta, len(idx), rng) if len(idx) >= 2 else []
            res = net.forward(xb, ops)
            loss = ad.softmax_cross_entropy(res.logits, yb)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite loss {loss_val} at epoch {epoch} batch {bi}; "
                    f"lr={cfg.lr} may be too high")
            loss.backward()
            for name in net.params:
                grad = res.param_vars[name].grad
                if grad is None:
                    continue
                velocity[name] = cfg.momentum * velocity[name] + grad
                net.params[name] -= cfg.lr * velocity[name]
            losses.append(loss_val)
            correct += int((res.logits.value.argmax(axis=1) == yb).sum())
            for hook, op in ops:
                if isinstance(op, SbHookOp) and op.plan is not None:
                    for rec in op.plan.to_audit_dicts():
                        metrics.audit.append({"epoch": epoch, "batch": bi, "hook": hook, **rec})
        metrics.epochs.append({"epoch": epoch, "loss": float(np.mean(losses)),
                               "accuracy": correct / n})
    return metrics


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    domains: dict[int, dict]   # id -> {"n", "correct", "shifted"}

    def accuracy(self, domain: int) -> float:
        d = self.domains[domain]
        return d["correct"] / d["n"]

    def shift_rate(self, domain: int) -> float:
        d = self.domains[domain]
        return d["shifted"] / d["n"]

    @property
    def overall_accuracy(self) -> float:
        n = sum(d["n"] for d in self.domains.values())
        return sum(d["correct"] for d in self.domains.values()) / n


def evaluate(net: MicroNet, images, class_labels, domain_labels,
             registry: DomainRegistry | None = None, mode: ShiftMode = OFF,
             alpha: float | None = None, sample_pool=None,
             rng: np.random.Generator | None = None,
             batch_size: int = 128) -> EvalResult:
    """Top-1 accuracy and shift rate per domain, with the shifter at the
    registry's layer when a mode other than off is requested."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(class_labels, dtype=np.intp)
    doms = np.asarray(domain_labels, dtype=np.intp)
    use_ts = mode.kind != "off"
    if use_ts:
        if registry is None:
            raise ConfigError("evaluation with shifting requires a registry")
        if registry.layer not in net.hook_names:
            raise ConfigError(
                f"registry layer {registry.layer!r} is not a hook of this network")
        if registry.channels != net.config.channels_at(registry.layer):
            raise ConfigError("registry channel count does not match the hook")
    stats: dict[int, dict] = {int(d): {"n": 0, "correct": 0, "shifted": 0}
                              for d in np.unique(doms)}
    for start in range(0, x.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        ops = []
        ts_op = None
        if use_ts:
            ts_op = TsHookOp(registry, alpha, mode, sample_pool, rng)
            ops.append((registry.layer, ts_op))
        res = net.forward(x[sl], ops)
        preds = res.logits.value.argmax(axis=1)
        for i, (p, truth, dom) in enumerate(zip(preds, y[sl], doms[sl])):
            rec = stats[int(dom)]
            rec["n"] += 1
            rec["correct"] += int(p == truth)
            if ts_op is not None and ts_op.decisions[i].shifted:
                rec["shifted"] += 1
    return EvalResult(domains=stats)


# -- finite-difference harness ----------------------------------------------

def finite_difference_check(net: MicroNet, x, y, hook_ops=None, n_coords: int = 200,
                            step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between backprop gradients and central differences.

    The recorded hook operations are replayed with their randomness, sorting
    permutations and detached copies frozen, so the differenced function is
    exactly the one the gradients are defined against.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    hook_ops = hook_ops or []
    res = net.forward(x, hook_ops)
    loss = ad.softmax_cross_entropy(res.logits, y)
    loss.backward()
    grads = {name: res.param_vars[name].grad for name in net.params}
    replay_ops = [(h, op.replay()) for h, op in hook_ops]

    def loss_at() -> float:
        r = net.forward(x, replay_ops)
        return float(ad.softmax_cross_entropy(r.logits, y).value)

    rng = np.random.Generator(np.random.PCG64(seed))
    names = sorted(net.params)
    sizes = np.array([net.params[n].size for n in names])
    total = int(sizes.sum())
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    worst = 0.0
    for coord in coords:
        ni = int(np.searchsorted(np.cumsum(sizes), coord, side="right"))
        offset = coord - int(np.cumsum(sizes)[ni - 1]) if ni else int(coord)
        name = names[ni]
        flat = net.params[name].ravel()
        orig = flat[offset]
        flat[offset] = orig + step
        up = loss_at()
        flat[offset] = orig - step
        down = loss_at()
        flat[offset] = orig
        fd = (up - down) / (2 * step)
        an = 0.0 if grads[name] is None else grads[name].ravel()[offset]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, err)
    return worst
