"""Multi-modal self-supervised molecular representation learning at desk scale."""
from .autoencoder import aggregate, ae_loss, contrastive_loss, reconstruction_loss
from .data import Dataset, Molecule, gen_synthetic, load_csv, load_jsonl, save_jsonl, scaffold_split
from .fingerprint import ecfp, tanimoto
from .metrics import dbi, nmi, retrieve, rmse, roc_auc
from .model import MMSAModel, PretrainConfig
from .smiles import parse_smiles, read_smiles
from .structure import build_knn_hypergraph, hgnn_conv, memory_align, memory_loss, prediction_loss, sa_loss
from .trainer import embed, finetune, load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"
