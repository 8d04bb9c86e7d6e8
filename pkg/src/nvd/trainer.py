"""Training orchestration: mapping pre-training, metamodel training over one
or more videos, fine-tuning from a metamodel initialization, checkpoints.

Everything is seeded and single-threaded deterministic: a full run is
bit-reproducible, and a checkpoint stores the RNG and optimizer state so a
resumed run replays the uninterrupted one exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from . import dataio, model
from .autodiff import Parameter, Tensor
from .hypernet import HyperNet, HyperNetConfig, descriptor_embedding, \
    generate_parameters
from .losses import LossWeights, compute_losses
from .model import ArchSpec
from .optim import Adam

CKPT_MAGIC = b"NVDC"
CKPT_VERSION = 1

# paper-scale schedule fractions: 5k and 10k out of 25k iterations
RIGID_FRACTION = 0.2
BOOTSTRAP_FRACTION = 0.4

DIVERGENCE_LIMIT = 1e6

EMBEDDING_MODES = ("file", "descriptor", "learnable")
MRHE_MODES = ("hyper", "universal")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 5000
    pretrain_iterations: int = 100
    batch_size: int = 8192
    lr_hash: float = 1e-2
    lr_other: float = 5e-4
    pretrain_lr: float = 1e-2
    seed: int = 0
    videos: list = field(default_factory=list)
    embedding_mode: str = "descriptor"
    mrhe_mode: str = "hyper"
    log_interval: int = 100
    eval_interval: int = 1000
    scale_schedules: bool = True
    restart_schedules: bool = True
    arch: ArchSpec = field(default_factory=ArchSpec)
    hyper: HyperNetConfig = field(default_factory=HyperNetConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.lr_hash <= 0 or self.lr_other <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ValueError(f"embedding_mode must be one of {EMBEDDING_MODES}")
        if self.mrhe_mode not in MRHE_MODES:
            raise ValueError(f"mrhe_mode must be one of {MRHE_MODES}")
        if self.scale_schedules:
            self.weights = dataclasses.replace(
                self.weights,
                rigid_until=int(round(self.iterations * RIGID_FRACTION)),
                bootstrap_until=int(round(self.iterations * BOOTSTRAP_FRACTION)),
            )
            self.scale_schedules = False  # applied once; digest stays stable

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"] = self.arch.to_dict()
        d["hyper"] = self.hyper.to_dict()
        d["weights"] = self.weights.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["arch"] = ArchSpec.from_dict(d["arch"])
        d["hyper"] = HyperNetConfig.from_dict(d["hyper"])
        d["weights"] = LossWeights.from_dict(d["weights"])
        d.setdefault("scale_schedules", False)
        return TrainConfig(**d)

    @staticmethod
    def from_json(path) -> "TrainConfig":
        return TrainConfig.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


# -- checkpoint format --------------------------------------------------------

def save_checkpoint(path, mode: str, iteration: int, config: TrainConfig,
                    tensors: dict, extra: dict | None = None) -> None:
    """Write header JSON plus concatenated raw tensor payloads."""
    names = sorted(tensors)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        blob = arr.tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CKPT_VERSION,
        "mode": mode,
        "iteration": iteration,
        "arch": config.arch.to_dict(),
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "extra": extra or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


@dataclass
class Checkpoint:
    header: dict
    tensors: dict

    @property
    def mode(self):
        return self.header["mode"]

    @property
    def iteration(self):
        return self.header["iteration"]

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.header["config"])


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12 : 12 + header_len])
    if header["config_digest"] != TrainConfig.from_dict(header["config"]).digest():
        raise CheckpointError(f"{path}: config digest mismatch")
    base = 12 + header_len
    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        blob = raw[lo : lo + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(
            blob, dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"]).copy()
    return Checkpoint(header=header, tensors=tensors)


# -- shared helpers -----------------------------------------------------------

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state

def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def evaluate_psnr(spec: ArchSpec, params, ds: dataio.VideoDataset) -> float:
    recon = atlas_mod.reconstruct_video(
        spec, params, (ds.n_frames, ds.height, ds.width))
    return atlas_mod.psnr(recon, ds.frames)


def _pretrain_loss(spec: ArchSpec, params, coords: np.ndarray) -> Tensor:
    """Mean squared error of every mapping against 0.9 * (x, y)."""
    target = Tensor.const(0.9 * coords[:, :2])
    total = None
    for layer in model.layer_ids(spec):
        uv = model.map_points(params, layer, coords)
        term = ((uv - target) ** 2).sum(axis=1).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(model.layer_ids(spec)))


class _Logger:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def write(self, line: str) -> None:
        if self.path:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def _resolve_datasets(config: TrainConfig, datasets):
    """Video list entries are directories unless datasets are given directly."""
    if datasets is not None:
        return dict(datasets), {}
    out, paths = {}, {}
    for entry in config.videos:
        ds = dataio.load_video_dataset(entry)
        out[ds.id] = ds
        paths[ds.id] = Path(entry)
    return out, paths


# -- metamodel training -------------------------------------------------------

class MetaTrainer:
    """Hypernet training over one or more videos (round-robin schedule)."""

    def __init__(self, config: TrainConfig, datasets=None, embeddings=None,
                 log_path=None):
        if not config.videos:
            raise ValueError("video list must be nonempty")
        self.config = config
        self.arch = config.arch
        self.datasets, self._paths = _resolve_datasets(config, datasets)
        self.video_ids = [vid if datasets is not None else Path(vid).name
                          for vid in config.videos]
        for vid in self.video_ids:
            if vid not in self.datasets:
                raise ValueError(f"no dataset for video {vid!r}")
        self.log = _Logger(log_path)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.pretrained = False

        universal = config.mrhe_mode == "universal"
        self.hyper = HyperNet(self.arch, config.hyper, self.rng,
                              skip_tables=universal)
        self.universal_tables: dict[str, Parameter] = {}
        if universal:
            for name, shape in model.param_shapes(self.arch).items():
                if ".table" in name:
                    self.universal_tables[name] = Parameter(
                        self.rng.uniform(-1e-4, 1e-4, size=shape), name=name)

        self.embeddings: dict[str, object] = {}
        for vid in self.video_ids:
            if embeddings is not None and vid in embeddings:
                self.embeddings[vid] = np.asarray(embeddings[vid], dtype=float)
            elif config.embedding_mode == "descriptor":
                self.embeddings[vid] = descriptor_embedding(
                    self.datasets[vid].frames)
            elif config.embedding_mode == "learnable":
                dim = config.hyper.embed_dim
                self.embeddings[vid] = Parameter(
                    self.rng.standard_normal(dim) / np.sqrt(dim),
                    name=f"emb.{vid}")
            elif config.embedding_mode == "file":
                path = self._paths.get(vid, Path(vid)) / f"{vid}.emb.nvdt"
                self.embeddings[vid] = dataio.load_tensor(path).astype(float)

        hash_params = (list(self.universal_tables.values()) if universal
                       else self.hyper.table_head_params())
        other_params = self.hyper.other_head_params()
        if universal:
            other_params = other_params + self.hyper.table_head_params()
        other_params += [e for e in self.embeddings.values()
                         if isinstance(e, Parameter)]
        groups = []
        if hash_params:
            groups.append((hash_params, config.lr_hash))
        groups.append((other_params, config.lr_other))
        self.opt = Adam(groups)

    # -- parameter plumbing ---------------------------------------------------

    def embedding_tensor(self, vid: str) -> Tensor:
        e = self.embeddings[vid]
        return e if isinstance(e, Tensor) else Tensor.const(e)

    def params_for(self, vid: str) -> dict:
        gen = generate_parameters(self.hyper, self.embedding_tensor(vid))
        gen.update(self.universal_tables)
        return gen

    # -- training -------------------------------------------------------------

    def pretrain(self) -> list:
        """Configure the mappings toward an axis-aligned rectangular layout."""
        losses = []
        for it in range(self.config.pretrain_iterations):
            vid = self.video_ids[it % len(self.video_ids)]
            params = self.params_for(vid)
            coords = self.rng.uniform(-1.0, 1.0, size=(self.config.batch_size, 3))
            loss = _pretrain_loss(self.arch, params, coords)
            if not np.isfinite(loss.data):
                raise TrainingDiverged("non-finite pretrain loss")
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            losses.append(float(loss.data))
            if self.config.log_interval and it % self.config.log_interval == 0:
                self.log.write(f"phase=pretrain iter={it} loss={loss.data:.6g}")
        self.pretrained = True
        return losses

    def step(self):
        vid = self.video_ids[self.iteration % len(self.video_ids)]
        ds = self.datasets[vid]
        params = self.params_for(vid)
        batch = dataio.sample_point_batch(ds, self.config.batch_size, self.rng)
        total, report = compute_losses(
            self.arch, params, batch, self.config.weights, self.iteration,
            self.rng, (ds.n_frames, ds.height, ds.width))
        if not np.isfinite(report.total) or report.total > DIVERGENCE_LIMIT:
            raise TrainingDiverged(
                f"loss {report.total} at iteration {self.iteration}")
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        self.iteration += 1
        if self.config.log_interval and \
                (self.iteration - 1) % self.config.log_interval == 0:
            self.log.write("phase=train video=" + vid + " " + report.line())
        return report

    def eval_all(self) -> dict:
        scores = {}
        for vid in self.video_ids:
            params = self.params_for(vid)
            scores[vid] = evaluate_psnr(self.arch, params, self.datasets[vid])
            self.log.write(
                f"phase=eval iter={self.iteration} video={vid} "
                f"psnr={scores[vid]:.4f}")
        return scores

    def run(self) -> dict:
        """Pretrain (if fresh) then train to config.iterations; returns PSNRs."""
        if not self.pretrained and self.config.pretrain_iterations > 0:
            self.pretrain()
        self.pretrained = True
        while self.iteration < self.config.iterations:
            self.step()
            if self.config.eval_interval and \
                    self.iteration % self.config.eval_interval == 0 and \
                    self.iteration < self.config.iterations:
                self.eval_all()
        return self.eval_all()

    # -- checkpointing --------------------------------------------------------

    def save(self, path) -> None:
        tensors = {name: p.data for name, p in self.hyper.params.items()}
        tensors.update({n: p.data for n, p in self.universal_tables.items()})
        for vid, e in self.embeddings.items():
            tensors[f"emb.{vid}"] = e.data if isinstance(e, Tensor) else e
        tensors.update(self.opt.state_tensors())
        extra = {
            "rng_state": _jsonable(_rng_state(self.rng)),
            "adam_t": self.opt.t,
            "pretrained": self.pretrained,
            "video_ids": self.video_ids,
        }
        save_checkpoint(path, "meta", self.iteration, self.config,
                        tensors, extra)

    @staticmethod
    def load(path, datasets=None, log_path=None) -> "MetaTrainer":
        ckpt = load_checkpoint(path)
        if ckpt.mode != "meta":
            raise CheckpointError(
                f"{path}: expected a meta checkpoint, found mode={ckpt.mode!r}")
        config = ckpt.config
        trainer = MetaTrainer(config, datasets=datasets, log_path=log_path)
        for name, p in trainer.hyper.params.items():
            p.data[...] = ckpt.tensors[name]
        for name, p in trainer.universal_tables.items():
            p.data[...] = ckpt.tensors[name]
        for vid in trainer.video_ids:
            stored = ckpt.tensors[f"emb.{vid}"]
            e = trainer.embeddings[vid]
            if isinstance(e, Tensor):
                e.data[...] = stored
            else:
                trainer.embeddings[vid] = stored
        trainer.opt.load_state(ckpt.tensors, ckpt.header["extra"]["adam_t"])
        trainer.rng = _restore_rng(_unjsonable(ckpt.header["extra"]["rng_state"]))
        trainer.iteration = ckpt.iteration
        trainer.pretrained = ckpt.header["extra"]["pretrained"]
        return trainer


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjsonable(obj):
    return obj


def train_meta(config: TrainConfig, datasets=None, embeddings=None,
               out_path=None, log_path=None) -> MetaTrainer:
    """Convenience wrapper: build, run, optionally checkpoint."""
    trainer = MetaTrainer(config, datasets=datasets, embeddings=embeddings,
                          log_path=log_path)
    try:
        trainer.run()
    except TrainingDiverged:
        if out_path:
            trainer.save(out_path)
        raise
    if out_path:
        trainer.save(out_path)
    return trainer


# -- direct NVD training (fine-tune / scratch) --------------------------------

class NVDTrainer:
    """Direct training of one decomposition model on one video."""

    def __init__(self, config: TrainConfig, dataset: dataio.VideoDataset,
                 init_tensors: dict | None = None, log_path=None):
        self.config = config
        self.arch = config.arch
        self.dataset = dataset
        self.log = _Logger(log_path)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.pretrained = False
        self.psnr_curve: list[tuple[int, float]] = []
        if init_tensors is None:
            self.params = model.init_params(self.arch, self.rng)
        else:
            model.check_params(self.arch, {
                k: Tensor.const(v) for k, v in init_tensors.items()})
            self.params = {
                name: Parameter(np.array(init_tensors[name], dtype=float),
                                name=name)
                for name in model.param_shapes(self.arch)
            }
        hash_params = [p for n, p in self.params.items() if ".table" in n]
        other_params = [p for n, p in self.params.items() if ".table" not in n]
        self.opt = Adam([(hash_params, config.lr_hash),
                         (other_params, config.lr_other)])

    def pretrain(self) -> list:
        # A throwaway optimizer over the mapping MLPs only: the pretrain
        # target needs a faster rate than lr_other, and its Adam state
        # should not leak into the main run.
        mapping = [p for n, p in self.params.items() if ".mapping." in n]
        opt = Adam([(mapping, self.config.pretrain_lr)])
        losses = []
        for it in range(self.config.pretrain_iterations):
            coords = self.rng.uniform(-1.0, 1.0, size=(self.config.batch_size, 3))
            loss = _pretrain_loss(self.arch, self.params, coords)
            if not np.isfinite(loss.data):
                raise TrainingDiverged("non-finite pretrain loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        self.pretrained = True
        return losses

    def step(self):
        ds = self.dataset
        batch = dataio.sample_point_batch(ds, self.config.batch_size, self.rng)
        total, report = compute_losses(
            self.arch, self.params, batch, self.config.weights, self.iteration,
            self.rng, (ds.n_frames, ds.height, ds.width))
        if not np.isfinite(report.total) or report.total > DIVERGENCE_LIMIT:
            raise TrainingDiverged(
                f"loss {report.total} at iteration {self.iteration}")
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        self.iteration += 1
        if self.config.log_interval and \
                (self.iteration - 1) % self.config.log_interval == 0:
            self.log.write("phase=train " + report.line())
        return report

    def eval(self) -> float:
        score = evaluate_psnr(self.arch, self.params, self.dataset)
        self.psnr_curve.append((self.iteration, score))
        self.log.write(f"phase=eval iter={self.iteration} psnr={score:.4f}")
        return score

    def run(self) -> float:
        if not self.pretrained and self.config.pretrain_iterations > 0:
            self.pretrain()
        self.pretrained = True
        while self.iteration < self.config.iterations:
            self.step()
            if self.config.eval_interval and \
                    self.iteration % self.config.eval_interval == 0:
                self.eval()
        if not self.psnr_curve or self.psnr_curve[-1][0] != self.iteration:
            self.eval()
        return self.psnr_curve[-1][1]

    def save(self, path) -> None:
        tensors = {name: p.data for name, p in self.params.items()}
        tensors.update(self.opt.state_tensors())
        extra = {
            "rng_state": _jsonable(_rng_state(self.rng)),
            "adam_t": self.opt.t,
            "pretrained": self.pretrained,
            "video_id": self.dataset.id,
            "psnr_curve": self.psnr_curve,
        }
        save_checkpoint(path, "nvd", self.iteration, self.config, tensors, extra)

    @staticmethod
    def load(path, dataset: dataio.VideoDataset, log_path=None) -> "NVDTrainer":
        ckpt = load_checkpoint(path)
        if ckpt.mode != "nvd":
            raise CheckpointError(
                f"{path}: expected an nvd checkpoint, found mode={ckpt.mode!r}")
        trainer = NVDTrainer(ckpt.config, dataset, log_path=log_path)
        for name, p in trainer.params.items():
            p.data[...] = ckpt.tensors[name]
        trainer.opt.load_state(ckpt.tensors, ckpt.header["extra"]["adam_t"])
        trainer.rng = _restore_rng(ckpt.header["extra"]["rng_state"])
        trainer.iteration = ckpt.iteration
        trainer.pretrained = ckpt.header["extra"]["pretrained"]
        trainer.psnr_curve = [tuple(x) for x in ckpt.header["extra"]["psnr_curve"]]
        return trainer


def nvd_params_from_checkpoint(ckpt: Checkpoint) -> dict:
    """Extract the model tensor dict from an nvd checkpoint."""
    arch = ArchSpec.from_dict(ckpt.header["arch"])
    return {name: ckpt.tensors[name] for name in model.param_shapes(arch)}


def generate_init_from_meta(ckpt_path, dataset: dataio.VideoDataset,
                            embedding: np.ndarray | None = None) -> dict:
    """Detached NVD tensors generated by a metamodel for one video."""
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.mode != "meta":
        raise CheckpointError(f"{ckpt_path}: not a meta checkpoint")
    config = ckpt.config
    hyper = HyperNet(config.arch, config.hyper, np.random.default_rng(0),
                     skip_tables=config.mrhe_mode == "universal")
    for name, p in hyper.params.items():
        p.data[...] = ckpt.tensors[name]
    if embedding is None:
        if config.embedding_mode == "learnable":
            stored = [ckpt.tensors[f"emb.{vid}"]
                      for vid in ckpt.header["extra"]["video_ids"]]
            embedding = np.mean(stored, axis=0)
        else:
            embedding = descriptor_embedding(dataset.frames)
    gen = generate_parameters(hyper, Tensor.const(embedding))
    out = {name: t.data.copy() for name, t in gen.items()}
    for name in model.param_shapes(config.arch):
        if name not in out:  # universal tables live in the checkpoint directly
            out[name] = ckpt.tensors[name].copy()
    return out


def finetune_nvd(meta_ckpt_path, dataset: dataio.VideoDataset,
                 config: TrainConfig, scratch: bool = False,
                 embedding: np.ndarray | None = None,
                 log_path=None) -> NVDTrainer:
    """Fine-tune from a metamodel initialization, or from scratch as baseline.

    The scratch baseline shares the config exactly; only the initial
    tensors differ. The hypernet itself is never touched.
    """
    init = None if scratch else generate_init_from_meta(
        meta_ckpt_path, dataset, embedding)
    trainer = NVDTrainer(config, dataset, init_tensors=init, log_path=log_path)
    return trainer
