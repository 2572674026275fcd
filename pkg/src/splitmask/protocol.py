"""Deterministic simulation of the trusted coordinator and its untrusted workers.

Workers are in-process actors with an inbox each. The coordinator posts jobs,
then drains inboxes round-robin in worker-index order; results land in an
index-ordered buffer, so decoding never depends on delivery order. Every
message is appended to a :class:`Transcript` for auditing.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import coding
from .coding import DEFAULT_TAU, VirtualBatch, IntegrityVerdict
from .errors import InsufficientWorkersError, StaleWeightsError, WorkerTimeoutError, ShapeError
from .nn import DTYPES, LayerSpec, input_grad, linear_forward, weight_grad
from .serialize import derive_seed, dumps17, tensor_digest

FORWARD_LINEAR = "forward_linear"
GRAD_EQUATION = "grad_equation"
INPUT_GRAD_LINEAR = "input_grad_linear"
BEHAVIORS = ("honest", "faulty", "colluding", "crashed")

# sub-seed namespaces under the session seed
_NS_SCHEME, _NS_NOISE, _NS_WORKER, _NS_ASSIGN = 11, 12, 13, 14
STREAM_ACT, STREAM_GRAD = 0, 1


@dataclass(frozen=True)
class WorkerProfile:
    """How a simulated worker behaves.

    ``crashed`` workers never answer, which the coordinator sees as a timeout.
    """
    worker_id: int
    behavior: str = "honest"
    perturbation_scale: float = 0.0
    fault_probability: float = 0.0
    group_id: Optional[int] = None

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.perturbation_scale < 0:
            raise ValueError("perturbation_scale must be >= 0")
        if not 0 <= self.fault_probability <= 1:
            raise ValueError("fault_probability must lie in [0, 1]")
        if self.behavior == "colluding" and self.group_id is None:
            raise ValueError("colluding workers need a group_id")

    @classmethod
    def honest(cls, worker_id):
        return cls(worker_id)

    @classmethod
    def faulty(cls, worker_id, perturbation_scale, fault_probability=1.0):
        return cls(worker_id, "faulty", perturbation_scale, fault_probability)

    @classmethod
    def colluding(cls, worker_id, group_id):
        return cls(worker_id, "colluding", group_id=group_id)


def honest_workers(n):
    return [WorkerProfile.honest(i) for i in range(n)]


@dataclass(frozen=True)
class LinearJob:
    job_id: int
    layer_ref: int
    op_kind: str
    payload: np.ndarray
    weights_version: int
    gradient: Optional[np.ndarray] = None
    # paper-literal placement: workers receive every per-input gradient and mix them
    raw_gradients: Optional[tuple] = None
    beta_row: Optional[np.ndarray] = None
    encoding_index: int = 0
    batch_id: int = 0
    stream: int = STREAM_ACT
    input_shape: Optional[tuple] = None

    def tensors(self):
        out = [self.payload]
        if self.gradient is not None:
            out.append(self.gradient)
        if self.raw_gradients is not None:
            out.extend(self.raw_gradients)
        if self.beta_row is not None:
            out.append(self.beta_row)
        return out


@dataclass(frozen=True)
class LinearResult:
    job_id: int
    worker_id: int
    output: np.ndarray


class CollusionBoard:
    """Payloads pooled by colluding workers, keyed by group id."""

    def __init__(self):
        self.entries = {}

    def record(self, group_id, job: LinearJob):
        self.entries.setdefault(group_id, []).append(
            (job.batch_id, job.layer_ref, job.stream, job.encoding_index, job.payload))

    def payloads(self, group_id, batch_id, layer_ref=0, stream=STREAM_ACT):
        """Distinct ``(encoding_index, tensor)`` pairs the group saw for one batch."""
        seen = {}
        for b, l, s, idx, payload in self.entries.get(group_id, []):
            if (b, l, s) == (batch_id, layer_ref, stream) and idx not in seen:
                seen[idx] = payload
        return sorted(seen.items())


def _perturb(out, scale, rng):
    g = rng.standard_normal(out.shape)
    unit = g / np.max(np.abs(g))
    mag = float(np.max(np.abs(out))) if out.size else 0.0
    return (out + scale * mag * unit).astype(out.dtype)


def worker_step(job: LinearJob, profile: WorkerProfile, replica, layer: LayerSpec, rng=None, board=None):
    """Execute one job on a worker holding ``replica = (W, version)``.

    Returns ``None`` for a crashed worker.
    """
    W, version = replica
    if job.weights_version != version:
        raise StaleWeightsError(f"worker {profile.worker_id} holds weights v{version}, "
                                f"job {job.job_id} needs v{job.weights_version}")
    if job.op_kind == FORWARD_LINEAR:
        out = linear_forward(layer, W, job.payload)
    elif job.op_kind == GRAD_EQUATION:
        if job.gradient is not None:
            g = job.gradient
        else:
            g = coding.combine_gradients(job.raw_gradients, job.beta_row[None, :])[0]
        out = weight_grad(layer, g, job.payload)
    elif job.op_kind == INPUT_GRAD_LINEAR:
        out = input_grad(layer, W, job.payload, job.input_shape)
    else:
        raise ValueError(f"unknown op kind {job.op_kind!r}")
    if profile.behavior == "crashed":
        return None
    if profile.behavior == "faulty" and profile.perturbation_scale > 0:
        if rng.random() < profile.fault_probability:
            out = _perturb(out, profile.perturbation_scale, rng)
    if profile.behavior == "colluding" and board is not None:
        board.record(profile.group_id, job)
    return LinearResult(job.job_id, profile.worker_id, out)


class Worker:
    def __init__(self, profile: WorkerProfile, layers, seed):
        self.profile = profile
        self.layers = layers
        self.replicas = {}
        self.rng = np.random.default_rng(seed)
        self.inbox = deque()

    def load_weights(self, layer_ref, W, version):
        self.replicas[layer_ref] = (W.copy(), version)

    def step(self, job, board=None):
        replica = self.replicas.get(job.layer_ref, (None, -1))
        return worker_step(job, self.profile, replica, self.layers[job.layer_ref], self.rng, board)


COORDINATOR = "coordinator"


def worker_name(i):
    return f"worker-{i}"


@dataclass
class Transcript:
    """Message log. ``lines`` is what gets exported; ``meta`` keeps the
    tensors and batch bookkeeping in memory for audits."""
    record_digests: bool = True
    lines: list = field(default_factory=list)
    meta: list = field(default_factory=list)

    def record(self, frm, to, kind, job_id, tensors, batch_id=None, layer_ref=None, stream=None,
               encoding_index=None):
        seq = len(self.lines)
        digest = tensor_digest(*tensors) if self.record_digests else None
        self.lines.append({"seq": seq, "from": frm, "to": to, "kind": kind, "job_id": job_id,
                           "tensor_digest": digest, "shape": list(np.shape(tensors[0]))})
        self.meta.append({"tensors": tensors, "batch_id": batch_id, "layer_ref": layer_ref,
                          "stream": stream, "encoding_index": encoding_index})

    def to_jsonl(self):
        return "".join(dumps17(line) + "\n" for line in self.lines)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def worker_bound(self):
        """``(line, meta)`` pairs for every message a worker received."""
        return [(l, m) for l, m in zip(self.lines, self.meta) if l["to"] != COORDINATOR]

    def encodings_per_worker(self):
        """Distinct encoded payloads per (worker, batch, layer, stream)."""
        seen = {}
        for line, meta in self.worker_bound():
            if line["kind"] == "weights":
                continue
            key = (line["to"], meta["batch_id"], meta["layer_ref"], meta["stream"])
            seen.setdefault(key, set()).add(tensor_digest(meta["tensors"][0]))
        return {k: len(v) for k, v in seen.items()}


@dataclass
class ProtocolConfig:
    K: int = 2
    M: int = 1
    E: int = 1
    sigma2: float = 1e8
    noise_mean: float = 0.0
    tau: Optional[float] = None
    C_min: float = 0.1
    precision: str = "f64"
    seed: int = 0
    paper_literal: bool = False
    offload_input_grad: bool = True
    assignment: str = "identity"
    scheme_mode: str = "random"
    record_digests: bool = True

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.E < 0:
            raise ValueError("need K >= 1, M >= 1, E >= 0")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.assignment not in ("identity", "permuted"):
            raise ValueError("assignment must be 'identity' or 'permuted'")
        if self.scheme_mode not in ("random", "identity"):
            raise ValueError("scheme_mode must be 'random' or 'identity'")

    @property
    def P(self):
        return self.K + self.M

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def threshold(self):
        """Integrity threshold: ``tau`` if set, else the precision default."""
        return DEFAULT_TAU[self.precision] if self.tau is None else self.tau

    def to_dict(self):
        return asdict(self)


@dataclass
class ForwardRecord:
    """What the coordinator keeps from one masked forward offload."""
    batch_id: int
    layer_ref: int
    stream: int
    scheme: coding.CodingScheme
    encoded: list
    assignment: list
    outputs: list
    verdict: Optional[IntegrityVerdict]


class Coordinator:
    """Trusted side of the split: owns schemes, encodes, dispatches, decodes, verifies."""

    def __init__(self, layers, workers, cfg: ProtocolConfig):
        self.layers = list(layers)
        self.cfg = cfg
        needed = cfg.P + cfg.E
        if len(workers) < needed:
            raise InsufficientWorkersError(f"{len(workers)} workers for {needed} encodings per batch")
        self.workers = [Worker(p, self.layers, derive_seed(cfg.seed, _NS_WORKER, i))
                        for i, p in enumerate(workers)]
        self.transcript = Transcript(record_digests=cfg.record_digests)
        self.board = CollusionBoard()
        self.version = 0
        self._job_id = 0
        self._batch_id = -1

    # -- bookkeeping --------------------------------------------------------

    def new_batch(self):
        self._batch_id += 1
        return self._batch_id

    def _next_job_id(self):
        self._job_id += 1
        return self._job_id

    def scheme_for(self, batch_id, layer_ref, stream):
        cfg = self.cfg
        seed = derive_seed(cfg.seed, _NS_SCHEME, batch_id, layer_ref, stream)
        if cfg.scheme_mode == "identity":
            return coding.identity_scheme(cfg.K, cfg.M, cfg.E, seed)
        return coding.gen_scheme(cfg.K, cfg.M, cfg.E, cfg.C_min, seed)

    def assignment_for(self, batch_id):
        n = self.cfg.P + self.cfg.E
        if self.cfg.assignment == "identity":
            return list(range(n))
        rng = np.random.default_rng(derive_seed(self.cfg.seed, _NS_ASSIGN, batch_id))
        return [int(w) for w in rng.permutation(len(self.workers))[:n]]

    # -- transport ----------------------------------------------------------

    def broadcast_weights(self, weights: dict):
        """Push new public weights to every replica; returns the new version."""
        self.version += 1
        for i, w in enumerate(self.workers):
            for layer_ref, W in weights.items():
                self.transcript.record(COORDINATOR, worker_name(i), "weights", None, (W,),
                                       layer_ref=layer_ref)
                w.load_weights(layer_ref, W, self.version)
        return self.version

    def _exchange(self, jobs):
        """Deliver ``(worker_index, job)`` pairs and collect outputs by job id."""
        for w, job in jobs:
            self.transcript.record(COORDINATOR, worker_name(w), job.op_kind, job.job_id, job.tensors(),
                                   job.batch_id, job.layer_ref, job.stream, job.encoding_index)
            self.workers[w].inbox.append(job)
        results = {}
        pending = True
        while pending:
            pending = False
            for w, worker in enumerate(self.workers):
                if not worker.inbox:
                    continue
                job = worker.inbox.popleft()
                pending = pending or bool(worker.inbox)
                res = worker.step(job, self.board)
                if res is None:
                    continue
                self.transcript.record(worker_name(w), COORDINATOR, "result", res.job_id, (res.output,),
                                       job.batch_id, job.layer_ref, job.stream, job.encoding_index)
                results[res.job_id] = res.output
            pending = pending or any(wk.inbox for wk in self.workers)
        missing = [job.job_id for _, job in jobs if job.job_id not in results]
        if missing:
            raise WorkerTimeoutError(f"no result for jobs {missing}")
        return [results[job.job_id] for _, job in jobs]

    # -- offloaded operations -------------------------------------------------

    def masked_linear(self, layer_ref, inputs, batch_id, stream=STREAM_ACT, noises=None, input_shape=None):
        """Mask ``inputs`` (K tensors), offload the linear map, decode and verify.

        ``stream`` selects the activation path (``<W, x>``) or the
        input-gradient path (``W^T delta``); both are linear in the masked tensor.
        """
        cfg = self.cfg
        if len(inputs) != cfg.K:
            raise ShapeError(f"virtual batch needs exactly K={cfg.K} inputs, got {len(inputs)}")
        dtype = cfg.dtype
        inputs = [np.asarray(x, dtype=dtype) for x in inputs]
        scheme = self.scheme_for(batch_id, layer_ref, stream)
        if noises is None:
            rng = np.random.default_rng(derive_seed(cfg.seed, _NS_NOISE, batch_id, layer_ref, stream))
            noises = coding.draw_noise(inputs[0].shape, cfg.M, cfg.sigma2, rng, cfg.noise_mean, dtype)
        enc = coding.encode(VirtualBatch(inputs, list(noises)), scheme).encoded
        assign = self.assignment_for(batch_id)
        op = FORWARD_LINEAR if stream == STREAM_ACT else INPUT_GRAD_LINEAR
        jobs = [(assign[j], LinearJob(self._next_job_id(), layer_ref, op, enc[j], self.version,
                                      encoding_index=j, batch_id=batch_id, stream=stream,
                                      input_shape=input_shape))
                for j in range(len(enc))]
        results = self._exchange(jobs)
        outputs = coding.decode_forward(results, scheme)
        verdict = coding.verify_forward(results, scheme, cfg.threshold) if scheme.E else None
        return ForwardRecord(batch_id, layer_ref, stream, scheme, enc, assign, outputs, verdict)

    def masked_weight_grad(self, record: ForwardRecord, deltas):
        """Sum over the virtual batch of ``<delta_i, x_i>``, reusing the stored forward encodings."""
        cfg = self.cfg
        scheme, enc, assign = record.scheme, record.encoded, record.assignment
        deltas = [np.asarray(d, dtype=cfg.dtype) for d in deltas]
        plan = [(j, scheme.B[j]) for j in range(scheme.P)]
        if scheme.E:
            subset, B2, _ = coding.check_grad_coefficients(scheme)
            plan += [(idx, B2[s]) for s, idx in enumerate(subset)]
        mixed = coding.combine_gradients(deltas, np.array([row for _, row in plan]))
        jobs = []
        for (idx, row), g in zip(plan, mixed):
            extra = ({"raw_gradients": tuple(deltas), "beta_row": row.astype(cfg.dtype)}
                     if cfg.paper_literal else {"gradient": g})
            jobs.append((assign[idx], LinearJob(self._next_job_id(), record.layer_ref, GRAD_EQUATION, enc[idx],
                                                self.version, encoding_index=idx, batch_id=record.batch_id,
                                                stream=record.stream, **extra)))
        results = self._exchange(jobs)
        dW = coding.decode_grad(results[:scheme.P], scheme)
        verdict = coding.verify_grad(results, scheme, cfg.threshold) if scheme.E else None
        return dW, verdict


def run_virtual_batch(batch, layer: LayerSpec, W, workers, cfg: ProtocolConfig):
    """Offload one layer's forward product for one virtual batch.

    ``batch`` is a :class:`VirtualBatch` (noise supplied) or a list of K inputs
    (noise drawn from the session seed). Returns ``(outputs, verdict, transcript)``.
    """
    coord = Coordinator([layer], workers, cfg)
    coord.broadcast_weights({0: np.asarray(W, dtype=cfg.dtype)})
    if isinstance(batch, VirtualBatch):
        inputs, noises = batch.inputs, [np.asarray(r, dtype=cfg.dtype) for r in batch.noises]
    else:
        inputs, noises = batch, None
    rec = coord.masked_linear(0, inputs, coord.new_batch(), noises=noises)
    return rec.outputs, rec.verdict, coord.transcript


def broadcast_weights(coordinator: Coordinator, weights: dict, grads: dict, eta, count):
    """Apply ``W <- W - eta * grad / count`` per layer and push the result to every replica."""
    from .nn import sgd_update

    new = {ref: sgd_update(weights[ref], grads[ref], eta, count) for ref in weights}
    version = coordinator.broadcast_weights(new)
    return new, version


def load_transcript(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
