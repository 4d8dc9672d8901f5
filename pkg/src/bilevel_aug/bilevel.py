"""Online approximate bilevel training loop.

The classifier (omega) takes plain SGD steps on augmented batches; the
augmenter (theta) is updated on clean validation batches through a
truncated-backprop hypergradient. With unroll length K, the last K inner
steps of every update cycle (length J >= K) are recorded on a tape so that
the validation gradient can flow through the recorded update directions
into theta; weights entering the window are treated as constants, which is
exactly the truncation.

Two hypergradient modes: "exact" differentiates the recorded backward
passes (double backprop); "central-diff" replaces each vector-times-
second-derivative contraction with a central finite difference of
first-order gradients at perturbed weights.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

HVP_MODES = ("exact", "central-diff")


class NonFiniteLossError(RuntimeError):
    """Inner training loss became NaN/Inf; the run is aborted."""


@dataclass
class BilevelConfig:
    unroll_steps: int = 1  # K: recorded steps per hypergradient
    update_period: int = 1  # J: inner steps between outer updates
    lr_inner: float = 0.1
    lr_outer: float = 0.05
    hvp_mode: str = "exact"
    eps_hvp: float = 1e-2
    epochs: int = 10
    batch_size: int = 16
    momentum: float = 0.0
    outer_optimizer: str = "sgd"  # or "adam"
    outer_schedule: str = "constant"  # or "cosine" (anneals lr_outer to 0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.unroll_steps < 1:
            raise ValueError("unroll_steps (K) must be >= 1")
        if self.update_period < self.unroll_steps:
            raise ValueError("update_period (J) must be >= unroll_steps (K)")
        if self.lr_inner <= 0:
            raise ValueError("lr_inner must be > 0")
        if self.lr_outer < 0:
            raise ValueError("lr_outer must be >= 0")
        if self.hvp_mode not in HVP_MODES:
            raise ValueError(f"hvp_mode must be one of {HVP_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.outer_schedule not in ("constant", "cosine"):
            raise ValueError("outer_schedule must be constant or cosine")


@dataclass
class WindowEntry:
    prepared: object
    omega_before: list  # np arrays, the weights entering the step
    grad_values: list  # np arrays, G^(t)


class UnrollWindow:
    """Ring buffer of the last K recorded inner steps plus their tape."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.entries = deque(maxlen=capacity)
        self.tape = Tape()

    def push(self, entry):
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)


class BilevelEngine:
    """Drives inner SGD steps and periodic truncated-backprop outer steps.

    The problem object supplies the losses:
      theta_params() / omega_params(): lists of leaf tensors
      prepare_batch(batch): capture per-step randomness (noise draws)
      train_loss(omega, prepared) / val_loss(omega, batch): scalar tensors
    """

    def __init__(self, problem, config):
        self.problem = problem
        self.config = config
        self.theta = list(problem.theta_params())
        self.omega_leaves = list(problem.omega_params())
        self.omega = list(self.omega_leaves)
        self.learned = bool(self.theta)
        self.step_count = 0
        self.skipped_updates = 0
        self._window = None
        self._momentum = [np.zeros_like(p.data) for p in self.omega_leaves]
        self._adam_m = [np.zeros_like(p.data) for p in self.theta]
        self._adam_v = [np.zeros_like(p.data) for p in self.theta]
        self._adam_t = 0
        self.outer_lr_scale = 1.0

    # -- window bookkeeping -------------------------------------------------

    @property
    def window(self):
        return self._window

    def _in_window(self):
        k, j = self.config.unroll_steps, self.config.update_period
        return self.learned and self.config.lr_outer > 0 and (self.step_count % j) >= j - k

    def outer_update_due(self):
        return (
            self.learned
            and self.config.lr_outer > 0
            and self.step_count % self.config.update_period == 0
            and self.step_count > 0
        )

    def _open_window(self):
        self._window = UnrollWindow(self.config.unroll_steps)
        tape = self._window.tape
        tape.__enter__()
        for p in self.theta:
            tape.watch(p)
        for p in self.omega:
            tape.watch(p)

    def _close_window(self):
        if self._window is None:
            return
        self._window.tape.__exit__(None, None, None)
        # detach current weights back onto the persistent leaves
        for leaf, cur in zip(self.omega_leaves, self.omega):
            if cur is not leaf:
                leaf.data = cur.data
                leaf.node = None
        self.omega = list(self.omega_leaves)
        self._window = None

    def abort(self):
        """Release any open tape (used on errors and at run end)."""
        self._close_window()

    # -- inner loop ----------------------------------------------------------

    def step(self, batch):
        """One inner SGD step on ``batch``; records it when inside a window."""
        prepared = self.problem.prepare_batch(batch)
        if self._in_window():
            if self._window is None:
                self._open_window()
            loss_val = self._recorded_step(prepared)
        else:
            loss_val = self._plain_step(prepared)
        self.step_count += 1
        return loss_val

    def _check_finite(self, loss):
        val = float(loss.data)
        if not np.isfinite(val):
            raise NonFiniteLossError(
                f"training loss became {val} at inner step {self.step_count}"
            )
        return val

    def _recorded_step(self, prepared):
        cfg = self.config
        loss = self.problem.train_loss(self.omega, prepared)
        val = self._check_finite(loss)
        grads = T.grad(loss, self.omega, create_graph=True)
        new_omega = []
        for w, g, buf in zip(self.omega, grads, self._momentum):
            update = g
            if cfg.momentum > 0:
                update = T.add(g, Tensor(cfg.momentum * buf))
            new_omega.append(T.sub(w, T.mul(update, cfg.lr_inner)))
        for buf, g in zip(self._momentum, grads):
            if cfg.momentum > 0:
                buf *= cfg.momentum
                buf += g.data
        self._window.push(
            WindowEntry(
                prepared=prepared,
                omega_before=[w.data for w in self.omega],
                grad_values=[g.data for g in grads],
            )
        )
        self.omega = new_omega
        return val

    def _plain_step(self, prepared):
        cfg = self.config
        with Tape() as tape:
            for p in self.omega:
                tape.watch(p)
            loss = self.problem.train_loss(self.omega, prepared)
            val = self._check_finite(loss)
            grads = T.grad(loss, self.omega)
        for w, g, buf in zip(self.omega, grads, self._momentum):
            if cfg.momentum > 0:
                buf *= cfg.momentum
                buf += g.data
                w.data = w.data - cfg.lr_inner * buf
            else:
                w.data = w.data - cfg.lr_inner * g.data
        return val

    # -- hypergradient ---------------------------------------------------------

    def hypergradient(self, val_batch):
        """Truncated hypergradient of the validation loss w.r.t. theta."""
        if self._window is None or len(self._window) == 0:
            raise T.TapeError("hypergradient: no recorded inner steps in the window")
        if self.config.hvp_mode == "exact":
            return self._hypergradient_exact(val_batch)
        return self._hypergradient_central(val_batch)

    def _hypergradient_exact(self, val_batch):
        val_loss = self.problem.val_loss(self.omega, val_batch)
        grads = T.grad(val_loss, self.theta)
        return [g.data for g in grads], float(val_loss.data)

    def _theta_grad(self, omega_values, prepared):
        """First-order train-loss gradient w.r.t. theta at fixed omega values."""
        omega = [Tensor(v) for v in omega_values]
        with Tape() as tape:
            for p in self.theta:
                tape.watch(p)
            loss = self.problem.train_loss(omega, prepared)
            grads = T.grad(loss, self.theta)
        return [g.data for g in grads]

    def _omega_grad(self, omega_values, prepared):
        """First-order train-loss gradient w.r.t. omega at fixed values."""
        omega = [Tensor(v) for v in omega_values]
        with Tape() as tape:
            for w in omega:
                tape.watch(w)
            loss = self.problem.train_loss(omega, prepared)
            grads = T.grad(loss, omega)
        return [g.data for g in grads]

    def _hypergradient_central(self, val_batch):
        cfg = self.config
        omega_now = [w.data for w in self.omega]
        with Tape() as tape:
            omega_t = [Tensor(v) for v in omega_now]
            for p in omega_t:
                tape.watch(p)
            val_loss = self.problem.val_loss(omega_t, val_batch)
            vgrads = T.grad(val_loss, omega_t)
        v = [g.data.astype(np.float64) for g in vgrads]
        gtheta = [np.zeros_like(p.data, dtype=np.float64) for p in self.theta]
        entries = list(self._window.entries)
        for step_idx in range(len(entries) - 1, -1, -1):
            entry = entries[step_idx]
            vnorm = float(np.sqrt(sum(np.sum(x * x) for x in v)))
            if vnorm == 0.0:
                break  # degenerate direction: remaining terms are zero
            eps = cfg.eps_hvp / vnorm
            omega_p = [w + eps * d.astype(w.dtype) for w, d in zip(entry.omega_before, v)]
            omega_m = [w - eps * d.astype(w.dtype) for w, d in zip(entry.omega_before, v)]
            gp = self._theta_grad(omega_p, entry.prepared)
            gm = self._theta_grad(omega_m, entry.prepared)
            for acc, a, b in zip(gtheta, gp, gm):
                acc -= cfg.lr_inner * (a.astype(np.float64) - b) / (2 * eps)
            if step_idx > 0:
                hp = self._omega_grad(omega_p, entry.prepared)
                hm = self._omega_grad(omega_m, entry.prepared)
                v = [
                    d - cfg.lr_inner * (a.astype(np.float64) - b) / (2 * eps)
                    for d, a, b in zip(v, hp, hm)
                ]
        gtheta = [g.astype(p.dtype) for g, p in zip(gtheta, self.theta)]
        return gtheta, float(val_loss.data)

    # -- outer step --------------------------------------------------------------

    def outer_step(self, grads):
        """theta <- theta - lr_outer * grad (SGD) or an Adam update."""
        cfg = self.config
        if any(not np.isfinite(g).all() for g in grads):
            self.skipped_updates += 1
            log.warning(
                "skipping outer update %d: non-finite hypergradient", self.skipped_updates
            )
            return False
        lr = cfg.lr_outer * self.outer_lr_scale
        if cfg.outer_optimizer == "adam":
            self._adam_t += 1
            b1, b2 = cfg.adam_beta1, cfg.adam_beta2
            for p, g, m, v in zip(self.theta, grads, self._adam_m, self._adam_v):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1**self._adam_t)
                vhat = v / (1 - b2**self._adam_t)
                p.data = p.data - (lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(
                    p.dtype
                )
        else:
            for p, g in zip(self.theta, grads):
                p.data = p.data - (lr * g).astype(p.dtype)
        return True

    def outer_update(self, val_batch):
        """Hypergradient + outer step + window teardown; returns val loss."""
        grads, val_loss = self.hypergradient(val_batch)
        self.outer_step(grads)
        self._close_window()
        return val_loss

    # -- optimizer state (for resumable runs) --------------------------------------

    def optimizer_state(self):
        return {
            "momentum": [b.copy() for b in self._momentum],
            "adam_m": [m.copy() for m in self._adam_m],
            "adam_v": [v.copy() for v in self._adam_v],
            "adam_t": self._adam_t,
            "step_count": self.step_count,
            "skipped_updates": self.skipped_updates,
        }

    def load_optimizer_state(self, state):
        self._momentum = [b.copy() for b in state["momentum"]]
        self._adam_m = [m.copy() for m in state["adam_m"]]
        self._adam_v = [v.copy() for v in state["adam_v"]]
        self._adam_t = state["adam_t"]
        self.step_count = state["step_count"]
        self.skipped_updates = state["skipped_updates"]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    test_acc: float
    deviations: dict = field(default_factory=dict)


class ValSampler:
    """Seeded round-robin minibatch sampler over the validation set."""

    def __init__(self, count, batch_size, seed):
        self.count = count
        self.batch_size = min(batch_size, count)
        self.rng = np.random.default_rng(seed)
        self._order = self.rng.permutation(count)
        self._pos = 0

    def next_indices(self):
        if self._pos + self.batch_size > self.count:
            self._order = self.rng.permutation(self.count)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out

    def state(self):
        return {
            "rng": self.rng.bit_generator.state,
            "order": self._order.tolist(),
            "pos": self._pos,
        }

    def set_state(self, state):
        self.rng.bit_generator.state = state["rng"]
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._pos = state["pos"]


def train(problem, config, data, seed, on_epoch_end=None, start_epoch=0,
          data_rng_state=None, val_sampler_state=None, optimizer_state=None):
    """Run the full training loop over ``data`` = dict(train/val/test).

    Emits one EpochRecord per epoch. ``on_epoch_end(engine, record, states)``
    lets a caller checkpoint; resumable via the ``start_epoch``, rng state
    and ``optimizer_state`` arguments. Validation and test images are never
    transformed; the validation set is digest-checked every epoch.
    """
    train_x, train_y = data["train"]
    val_x, val_y = data["val"]
    engine = BilevelEngine(problem, config)
    if optimizer_state is not None:
        engine.load_optimizer_state(optimizer_state)
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD47A]))
    if data_rng_state is not None:
        data_rng.bit_generator.state = data_rng_state
    val_sampler = ValSampler(len(val_y), config.batch_size, np.random.SeedSequence([seed, 0x7A1]))
    if val_sampler_state is not None:
        val_sampler.set_state(val_sampler_state)

    val_digest = val_x.tobytes()
    records = []
    n = len(train_y)
    try:
        for epoch in range(start_epoch, config.epochs):
            if config.outer_schedule == "cosine":
                engine.outer_lr_scale = 0.5 * (1 + np.cos(np.pi * epoch / config.epochs))
            order = data_rng.permutation(n)
            losses = []
            val_losses = []
            for start in range(0, n - config.batch_size + 1, config.batch_size):
                idx = order[start : start + config.batch_size]
                losses.append(engine.step((train_x[idx], train_y[idx])))
                if engine.outer_update_due():
                    vidx = val_sampler.next_indices()
                    val_losses.append(engine.outer_update((val_x[vidx], val_y[vidx])))
            if val_x.tobytes() != val_digest:
                raise AssertionError("validation set was mutated during training")
            metrics = problem.epoch_metrics(engine.omega, data)
            if not val_losses:
                with T.record_suspended():
                    vl = problem.val_loss([Tensor(w.data) for w in engine.omega], (val_x, val_y))
                val_losses.append(float(vl.data))
            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)) if losses else float("nan"),
                val_loss=float(np.mean(val_losses)),
                val_acc=metrics.get("val_acc", float("nan")),
                test_acc=metrics.get("test_acc", float("nan")),
                deviations=problem.pop_deviations(),
            )
            records.append(record)
            if on_epoch_end is not None:
                on_epoch_end(
                    engine,
                    record,
                    {
                        "data_rng": data_rng.bit_generator.state,
                        "val_sampler": val_sampler.state(),
                    },
                )
    finally:
        engine.abort()
    return engine, records
