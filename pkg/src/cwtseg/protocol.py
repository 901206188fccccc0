"""Cyclic weight transfer: turn-taking site workers over a shared store.

One model travels around a fixed site roster, one epoch per turn.  All
coordination state (turn token, epoch-stamped checkpoints, validation-loss
log) lives in the exchange store, which is the single source of truth:
a worker that dies between store operations can be restarted and the run
completes with the identical audit trail, because every turn is a
deterministic function of the runtime seed and the predecessor checkpoint.

The convergence rule is shared: one monitor folds the interleaved
validation-loss stream of all sites, firing when the best loss has not
improved by more than ``min_delta`` for ``patience`` consecutive epochs.
"""

from __future__ import annotations

import datetime
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchitectureSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NumericError, ProtocolFault, ProtocolTimeout
from .network import build_network, train_epoch
from .ops import AdamState
from .patches import PatchSet
from .store import TOKEN_NAME, ExchangeStore

__all__ = [
    "TurnToken",
    "ConvergenceMonitor",
    "check_convergence",
    "TrainingParams",
    "SiteRuntime",
    "init_msl",
    "acquire_turn",
    "release_turn",
    "run_site_worker",
    "run_ssl",
    "read_audit",
]

log = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss_log.csv"
LOSS_LOG_HEADER = "global_epoch,site_id,val_loss,utc_timestamp"
CHECKPOINT_DIR = "checkpoints"
INIT_CHECKPOINT = f"{CHECKPOINT_DIR}/init.ckpt"

RUNNING, CONVERGED, ABORTED = "running", "converged", "aborted"


@dataclass(frozen=True)
class TurnToken:
    current_site: str
    global_epoch: int
    status: str = RUNNING

    def serialize(self) -> str:
        return f"{self.current_site} {self.global_epoch} {self.status}"

    @classmethod
    def parse(cls, text: str) -> "TurnToken":
        fields = text.split()
        if len(fields) != 3 or fields[2] not in (RUNNING, CONVERGED, ABORTED):
            raise ProtocolFault(f"corrupt turn token {text!r}")
        try:
            epoch = int(fields[1])
        except ValueError:
            raise ProtocolFault(f"corrupt turn token {text!r}") from None
        if epoch < 0:
            raise ProtocolFault(f"corrupt turn token {text!r}")
        return cls(fields[0], epoch, fields[2])


class ConvergenceMonitor:
    """Stall counter over a loss stream: strict improvement resets it."""

    def __init__(self, min_delta: float = 1e-4, patience: int = 10):
        self.min_delta = min_delta
        self.patience = patience
        self.best: float | None = None
        self.stall_count = 0

    def update(self, loss: float) -> bool:
        """Fold one loss in; return True once the stream has converged."""
        if not np.isfinite(loss):
            raise NumericError(f"non-finite validation loss {loss!r}")
        if self.best is None:
            self.best = loss
        elif loss < self.best - self.min_delta:
            self.best = loss
            self.stall_count = 0
        else:
            self.stall_count += 1
        return self.stall_count >= self.patience


def check_convergence(monitor: ConvergenceMonitor, new_loss: float) -> bool:
    return monitor.update(new_loss)


@dataclass
class TrainingParams:
    learning_rate: float = 1e-4
    batch_size: int = 8
    min_delta: float = 1e-4
    patience: int = 10
    max_epochs: int = 500
    # "merged": one monitor over the interleaved loss stream of all sites.
    # "per_site": one monitor per site; the run converges when every site's
    # own stream has converged.  With short patience and sites of unequal
    # difficulty the merged stream stalls on the harder site's entries long
    # before that site stops improving, so multi-site runs cut off early;
    # per_site treats each site's stream the way single-site training would.
    convergence_mode: str = "merged"

    def fresh_adam(self) -> AdamState:
        return AdamState(learning_rate=self.learning_rate)


@dataclass
class SiteRuntime:
    """Everything one site worker needs; the patches never leave this object."""

    site_id: str
    roster: tuple[str, ...]
    patches: PatchSet
    spec: ArchitectureSpec
    params: TrainingParams
    seed: int
    store: ExchangeStore | None = None
    poll_interval: float = 0.5
    timeout: float = 600.0
    audit_path: str | None = None
    audit_records: list[dict] = field(default_factory=list)

    def shuffle_seed(self, epoch: int) -> int:
        from .config import derive_seed

        return derive_seed(self.seed, "shuffle", str(epoch))


def _checkpoint_name(epoch: int, site: str) -> str:
    return f"{CHECKPOINT_DIR}/epoch_{epoch}_{site}.ckpt"


def _read_token(store: ExchangeStore) -> TurnToken:
    try:
        raw = store.get(TOKEN_NAME)
    except KeyError:
        raise ProtocolFault("protocol not initialized: no turn token in store") from None
    return TurnToken.parse(raw.decode("utf-8"))


def _read_loss_rows(store: ExchangeStore) -> list[tuple[int, str, float, str]]:
    try:
        text = store.get(LOSS_LOG_NAME).decode("utf-8")
    except KeyError:
        return []
    rows = []
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        epoch_s, site, loss_s, stamp = line.split(",")
        rows.append((int(epoch_s), site, float(loss_s), stamp))
    return rows


def _write_loss_rows(store: ExchangeStore, rows) -> None:
    lines = [LOSS_LOG_HEADER]
    lines += [f"{e},{s},{loss!r},{stamp}" for e, s, loss, stamp in rows]
    store.put_atomic(LOSS_LOG_NAME, ("\n".join(lines) + "\n").encode("utf-8"))


def read_audit(store: ExchangeStore) -> list[tuple[int, str, float]]:
    """Canonical (epoch, site, val_loss) sequence of a run, from the store."""
    return [(e, s, loss) for e, s, loss, _ in sorted(_read_loss_rows(store))]


def init_msl(
    store: ExchangeStore, roster: tuple[str, ...], initial_checkpoint: bytes
) -> TurnToken:
    """Seed the store with the initial checkpoint and hand the turn to roster[0].

    Refuses to touch a store that already carries protocol artifacts; a
    stale run must be reset explicitly.
    """
    if len(roster) < 1:
        raise ProtocolFault("roster must name at least one site")
    if len(set(roster)) != len(roster):
        raise ProtocolFault(f"roster has duplicate sites: {roster}")
    existing = set(store.list())
    stale = {n for n in existing if n == TOKEN_NAME or n == LOSS_LOG_NAME
             or n.startswith(f"{CHECKPOINT_DIR}/")}
    if stale:
        raise ProtocolFault(
            f"store already initialized (found {sorted(stale)}); explicit reset required"
        )
    store.put_atomic(INIT_CHECKPOINT, initial_checkpoint)
    _write_loss_rows(store, [])
    token = TurnToken(roster[0], 0, RUNNING)
    if not store.swap_token(None, token.serialize()):
        raise ProtocolFault("store already initialized: token appeared concurrently")
    return token


def acquire_turn(runtime: SiteRuntime) -> tuple[TurnToken, bytes | None]:
    """Block (bounded polling) until it is this site's turn.

    Returns the token plus the predecessor checkpoint bytes, or
    ``(token, None)`` as the terminal signal once the run has converged.
    """
    store = runtime.store
    deadline = time.monotonic() + runtime.timeout
    while True:
        token = _read_token(store)
        if token.status == CONVERGED:
            return token, None
        if token.status == ABORTED:
            raise ProtocolFault("run aborted by a peer site")
        if token.current_site not in runtime.roster:
            raise ProtocolFault(
                f"token names unknown site {token.current_site!r} (roster {runtime.roster})"
            )
        if token.current_site == runtime.site_id:
            epoch = token.global_epoch
            if epoch == 0:
                name = INIT_CHECKPOINT
            else:
                prev_site = runtime.roster[(epoch - 1) % len(runtime.roster)]
                name = _checkpoint_name(epoch - 1, prev_site)
            try:
                return token, store.get(name)
            except KeyError:
                raise ProtocolFault(
                    f"turn token points at epoch {epoch} but {name} is missing"
                ) from None
        if time.monotonic() > deadline:
            raise ProtocolTimeout(
                f"{runtime.site_id} waited over {runtime.timeout}s; turn currently "
                f"held by {token.current_site}"
            )
        time.sleep(runtime.poll_interval)


def release_turn(
    runtime: SiteRuntime,
    token: TurnToken,
    trained_checkpoint: bytes,
    validation_loss: float,
) -> TurnToken:
    """Publish this epoch's checkpoint and advance the turn.

    The checkpoint lands under its epoch-stamped name, the loss log gains
    (or idempotently replaces, after a crash-restart) this epoch's row, and
    the shared convergence rule is re-derived from the full interleaved
    loss stream before the token moves via compare-and-swap.
    """
    store = runtime.store
    epoch = token.global_epoch
    store.put_atomic(_checkpoint_name(epoch, runtime.site_id), trained_checkpoint)

    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    rows = [r for r in _read_loss_rows(store) if r[0] != epoch]
    rows.append((epoch, runtime.site_id, validation_loss, stamp))
    rows.sort(key=lambda r: r[0])
    _write_loss_rows(store, rows)

    converged = _stream_converged(rows, runtime)
    if epoch + 1 >= runtime.params.max_epochs:
        converged = True

    next_site = runtime.roster[(epoch + 1) % len(runtime.roster)]
    new = TurnToken(next_site, epoch + 1, CONVERGED if converged else RUNNING)
    if not store.swap_token(token.serialize(), new.serialize()):
        raise ProtocolFault(
            f"compare-and-swap failed releasing epoch {epoch}: is a duplicate "
            f"worker running for {runtime.site_id}?"
        )
    return new


def _stream_converged(rows, runtime: SiteRuntime) -> bool:
    """Re-derive the convergence decision from the full loss log."""
    params = runtime.params
    if params.convergence_mode == "per_site":
        fired: dict[str, bool] = {}
        monitors: dict[str, ConvergenceMonitor] = {}
        for site in runtime.roster:
            monitors[site] = ConvergenceMonitor(params.min_delta, params.patience)
            fired[site] = False
        for _, site, loss, _ in rows:
            if site in monitors:
                fired[site] = monitors[site].update(loss)
        return all(fired.values())
    monitor = ConvergenceMonitor(params.min_delta, params.patience)
    converged = False
    for _, _, loss, _ in rows:
        converged = monitor.update(loss)
    return converged


def _write_audit(runtime: SiteRuntime, record: dict) -> None:
    runtime.audit_records.append(record)
    line = " ".join(f"{k}={v}" for k, v in record.items())
    log.info("audit %s", line)
    if runtime.audit_path:
        with open(runtime.audit_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def _abort(runtime: SiteRuntime, token: TurnToken) -> None:
    aborted = TurnToken(token.current_site, token.global_epoch, ABORTED)
    runtime.store.swap_token(token.serialize(), aborted.serialize())


def _final_checkpoint(store: ExchangeStore) -> bytes:
    best_epoch, best_name = -1, INIT_CHECKPOINT
    for name in store.list():
        if name.startswith(f"{CHECKPOINT_DIR}/epoch_"):
            epoch = int(name.split("_")[1])
            if epoch > best_epoch:
                best_epoch, best_name = epoch, name
    return store.get(best_name)


def run_site_worker(runtime: SiteRuntime) -> bytes:
    """Acquire/train/release until the shared convergence rule fires.

    Protocol and numeric faults mark the run aborted in the store so peers
    terminate; anything else (a genuine crash) leaves the store untouched
    for a restarted worker to pick up.
    """
    if runtime.store is None:
        raise ProtocolFault("runtime has no store handle")
    if runtime.site_id not in runtime.roster:
        raise ProtocolFault(f"{runtime.site_id} is not in roster {runtime.roster}")
    adam_template = runtime.params.fresh_adam()
    while True:
        token, ckpt_bytes = acquire_turn(runtime)
        if ckpt_bytes is None:
            return _final_checkpoint(runtime.store)
        epoch = token.global_epoch
        try:
            net, adam, ckpt = load_checkpoint(
                ckpt_bytes, runtime.spec, adam_template=adam_template
            )
            report = train_epoch(
                net,
                runtime.patches,
                adam,
                runtime.params.batch_size,
                runtime.shuffle_seed(epoch),
                epoch_index=epoch,
            )
        except NumericError:
            _abort(runtime, token)
            raise
        history = ckpt.site_history + [(runtime.site_id, epoch, report.val_loss)]
        trained = save_checkpoint(
            net, global_epoch=epoch + 1, site_history=history, adam=adam
        )
        release_turn(runtime, token, trained, report.val_loss)
        _write_audit(
            runtime,
            {
                "site": runtime.site_id,
                "epoch": epoch,
                "train_loss": f"{report.train_loss:.6f}",
                "val_loss": f"{report.val_loss:.6f}",
                "wall_s": f"{report.wall_time_s:.3f}",
            },
        )


def run_ssl(runtime: SiteRuntime, init_seed: int) -> bytes:
    """Local train-to-convergence under the same rule, no store interaction."""
    net = build_network(runtime.spec, init_seed)
    adam = runtime.params.fresh_adam()
    monitor = ConvergenceMonitor(runtime.params.min_delta, runtime.params.patience)
    history: list[tuple[str, int, float]] = []
    epoch = 0
    while True:
        report = train_epoch(
            net,
            runtime.patches,
            adam,
            runtime.params.batch_size,
            runtime.shuffle_seed(epoch),
            epoch_index=epoch,
        )
        history.append((runtime.site_id, epoch, report.val_loss))
        _write_audit(
            runtime,
            {
                "site": runtime.site_id,
                "epoch": epoch,
                "train_loss": f"{report.train_loss:.6f}",
                "val_loss": f"{report.val_loss:.6f}",
                "wall_s": f"{report.wall_time_s:.3f}",
            },
        )
        converged = monitor.update(report.val_loss)
        epoch += 1
        if converged or epoch >= runtime.params.max_epochs:
            return save_checkpoint(
                net, global_epoch=epoch, site_history=history, adam=adam
            )
