"""The full pre-training model and its configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from types import SimpleNamespace

import numpy as np

from . import tensor as T
from .autoencoder import (IN_BATCH, SINGLE_NEGATIVE, ContrastiveConfig, ModalityAutoencoder, ae_loss, aggregate,
                          check_weight, contrastive_loss, encode_all, reconstruction_loss)
from .encoders import Geo3dEncoder, GinEncoder, GraphBatch, ImageEncoder
from .features import FeatureConfig
from .nn import Module, standardize_columns
from .structure import COSINE, DOT, EUCLIDEAN, INNER, StructureAwareness, sa_loss
from .tensor import DomainError

LOSS_TERMS = ("L_cl", "L_rl", "L_ae", "L_me", "L_pre", "L_sa", "L_overall")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch: int = 128
    lr: float = 0.001
    lam: float = 0.6
    tau: float = 0.5
    alpha: float = 0.5
    K: int = 10
    L: int = 128
    d_c: int = 256
    d_o: int = 256
    d_h: int = 64
    ae_hidden: int = 256
    image_size: int = 64
    seed: int = 0
    contrastive: str = IN_BATCH
    knn_metric: str = INNER
    align_metric: str = COSINE
    conv: str = "hgnn"
    use_cl: bool = True
    use_rl: bool = True
    use_me: bool = True
    use_pre: bool = True
    normalize_labels: bool = True
    detach_targets: bool = True
    standardize_batch: bool = True

    def __post_init__(self):
        for name in ("lam", "tau", "alpha"):
            check_weight(name, getattr(self, name))
        if self.K < 1:
            raise DomainError(f"K must be at least 1, got {self.K}")
        if self.batch < 2:
            raise DomainError(f"batch must be at least 2, got {self.batch}")
        if self.L < 1 or self.epochs < 0 or self.lr < 0:
            raise DomainError("L must be positive; epochs and lr non-negative")
        if self.contrastive not in (IN_BATCH, SINGLE_NEGATIVE):
            raise ValueError(f"unknown contrastive mode {self.contrastive!r}")
        if self.knn_metric not in (INNER, EUCLIDEAN):
            raise ValueError(f"unknown KNN metric {self.knn_metric!r}")
        if self.align_metric not in (COSINE, DOT):
            raise ValueError(f"unknown alignment metric {self.align_metric!r}")
        if self.conv not in ("hgnn", "gcn"):
            raise ValueError(f"unknown convolution {self.conv!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "PretrainConfig":
        return PretrainConfig.from_dict({**self.to_dict(), **kw})

    # fields that fix parameter shapes; a checkpoint is only usable when these agree
    ARCH_FIELDS = ("L", "d_c", "d_o", "d_h", "ae_hidden", "image_size")


class MMSAModel(Module):
    def __init__(self, config: PretrainConfig, features: FeatureConfig = FeatureConfig(),
                 geom_dim: int = 3, prop_dim: int = 4):
        rng = np.random.default_rng(config.seed)
        self.config = config
        d_v, d_e = features.atom_dim, features.bond_dim
        self.gin = GinEncoder(rng, d_v, d_e, config.d_h, config.d_o)
        self.image = ImageEncoder(rng, config.d_o, config.image_size)
        self.geo3d = Geo3dEncoder(rng, d_v, d_e, config.d_h, config.d_o)
        self.autoencoders = [ModalityAutoencoder(rng, config.d_o, config.d_c, config.ae_hidden) for _ in range(3)]
        self.structure = StructureAwareness(rng, config.d_c, config.L, geom_dim, prop_dim)

    def modality_features(self, batch: GraphBatch) -> list[T.Tensor]:
        return [self.gin(batch), self.image(batch.images), self.geo3d(batch)]

    def embed(self, batch: GraphBatch) -> T.Tensor:
        return aggregate(encode_all(self.modality_features(batch), self.autoencoders))

    def losses(self, batch: GraphBatch, y_geom: np.ndarray, y_prop: np.ndarray,
               rng: np.random.Generator | None = None) -> SimpleNamespace:
        """Every loss term on one batch; disabled terms are excluded from the sums."""
        cfg = self.config
        xs = self.modality_features(batch)
        cs = encode_all(xs, self.autoencoders)
        cl = contrastive_loss(cs, ContrastiveConfig(cfg.contrastive, cfg.seed), rng)
        targets = [T.Tensor(x.data) for x in xs] if cfg.detach_targets else xs
        rl = reconstruction_loss(targets, cs, [ae.decode for ae in self.autoencoders], cfg.tau)
        C = aggregate(cs)
        S = standardize_columns(C) if cfg.standardize_batch else C
        sa = self.structure.losses(S, y_geom, y_prop, cfg.K, cfg.knn_metric, cfg.align_metric, cfg.conv)
        zero = T.Tensor(0.0)
        l_ae = ae_loss(cl if cfg.use_cl else zero, rl if cfg.use_rl else zero, cfg.lam)
        l_sa = sa_loss(sa.me if cfg.use_me else zero, sa.pre if cfg.use_pre else zero, cfg.alpha)
        return SimpleNamespace(L_cl=cl, L_rl=rl, L_ae=l_ae, L_me=sa.me, L_pre=sa.pre, L_sa=l_sa,
                               L_overall=l_ae + l_sa, C=C, cs=cs, xs=xs, Z=sa.Z)
