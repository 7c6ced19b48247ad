#!/usr/bin/env python3
"""
Full pipeline: scale data -> pretrain the autoencoder -> calibrate the latent
scale -> joint training -> forecast / evaluate.

The model bundles the image autoencoder, the conditional U-Net, the condition
encoders, the temporal encoder, the vision head and the gated fusion.

Usage:
    python run_pipeline.py                        # toy data, toy_config.json, out/
    python run_pipeline.py --config my.json --out runs/etth1 --input ETTh1.csv
"""

import copy
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.preprocessing import StandardScaler
from torch.utils.data import DataLoader, Dataset

from build_conditions import ConditionFusion, PromptConfig, TextEncoder, fft_encode, generate_prompt
from diffusion import NoiseSource, build_schedule, calibrate_scale, diffusion_terms, predict_z0, sample_loop
from encode_images import VisionConfig, build_images, export_png, select_period
from errors import (ConfigurationError, TrainingError, ValidationError)
from model_config import TrainConfig, config_hash
from networks import GatedFusion, TemporalEncoder, TinyVAE, UNet, VisionHead
from numerics import Adam, RngStream
from series_data import (DATASETS, SeriesFrame, SplitSpec, WindowStream, apply_scaler,
                         compute_metrics, denormalize, fit_scaler, instance_normalize,
                         make_windows, naive_forecast)

CHECKPOINT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.pt"
TRAIN_LOG_FILE = "train_log.csv"
LOG_COLUMNS = ["epoch", "step", "l_diff", "l_pred", "l_recon", "val_mse"]

# full model plus the ablations: no diffusion, vision or temporal branch only,
# text or frequency condition zeroed
OUTPUT_TYPES = ("full", "no_ldm", "no_ve", "no_te", "no_tc", "no_fc")
FORCED_GATES = {"no_ve": 1.0, "no_te": 0.0}


def banner(title: str):
    print(f"\n{'='*60}")
    print(f"📋 {title}")
    print(f"{'='*60}\n", flush=True)


class LDM4TS(nn.Module):
    """All trainable parts plus the fixed noise schedule and latent scale."""

    def __init__(self, cfg: Mapping, n_features: int, period: int, description: str = ""):
        super().__init__()
        self.cfg = dict(cfg)
        self.n_features = n_features
        self.seq_len = cfg["data.seq_len"]
        self.pred_len = cfg["data.pred_len"]
        self.norm_const = cfg["data.norm_const"]
        self.use_latent = cfg["conditioning.use_latent"]
        self.output_type = cfg["model.output_type"]
        if self.output_type not in OUTPUT_TYPES:
            raise ConfigurationError(f"model.output_type must be one of {OUTPUT_TYPES}, got {self.output_type!r}")

        self.vision = VisionConfig.from_config(cfg, period=period)
        self.prompt_cfg = PromptConfig(self.pred_len, self.seq_len,
                                       description or cfg["data.description"])
        image_size = cfg["vision.image_size"]
        latent_channels = cfg["vae.latent_channels"]
        d_model = cfg["model.d_model"]
        n_heads = cfg["model.n_heads"]

        self.vae = TinyVAE(image_size, latent_channels, cfg["vae.channels"], cfg["vae.kl_weight"])
        self.text = TextEncoder(d_model, cfg["model.d_ff"], cfg["conditioning.text_bins"],
                                cfg["conditioning.max_tokens"], seed=cfg["train.seed"])
        self.cond = ConditionFusion(d_model, 2 * n_features * self.seq_len, latent_channels,
                                    n_heads, use_latent=self.use_latent)
        self.unet = UNet(latent_channels, cfg["model.d_ldm"], cfg["unet.layers"], d_cond=d_model,
                         n_heads=n_heads)
        self.temporal = TemporalEncoder(self.seq_len, self.pred_len, cfg["temporal.patch_len"],
                                        cfg["temporal.stride"], cfg["temporal.padding"], d_model,
                                        n_heads, cfg["temporal.e_layers"], cfg["model.d_ff"])
        self.head = VisionHead(self.pred_len, n_features, image_size)
        self.fusion = GatedFusion(n_features, cfg["model.d_fusion"])

        self.schedule = build_schedule(cfg["diffusion.num_timesteps"], cfg["diffusion.beta_start"],
                                       cfg["diffusion.beta_end"], cfg["diffusion.schedule"])
        self.register_buffer("latent_scale", torch.tensor(float(cfg["diffusion.latent_scale"])))

    @property
    def period(self) -> int:
        return self.vision.period

    def check_input(self, X: torch.Tensor):
        if X.dim() != 3 or X.shape[1] != self.seq_len or X.shape[2] != self.n_features:
            raise ValidationError(
                f"Model expects B×{self.seq_len}×{self.n_features} windows, got {tuple(X.shape)}")

    def images(self, X: torch.Tensor) -> torch.Tensor:
        return build_images(X, self.vision, self.norm_const)

    def encode_latent(self, img: torch.Tensor, rng: Optional[RngStream] = None) -> torch.Tensor:
        """z0 = s · E(I); the posterior mean unless rng is given."""
        _, _, z = self.vae.encode(img, rng=rng)
        z0 = self.latent_scale * z
        if not any(p.requires_grad for p in self.vae.parameters()):
            z0 = z0.detach()
        return z0

    def condition_inputs(self, X: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(c_text, c_freq), with the ablated one zeroed."""
        X_norm, _ = instance_normalize(X)
        c_freq = fft_encode(X_norm)
        c_text = self.text(generate_prompt(X, self.prompt_cfg))
        if self.output_type == "no_tc":
            c_text = torch.zeros_like(c_text)
        elif self.output_type == "no_fc":
            c_freq = torch.zeros_like(c_freq)
        return c_text, c_freq

    def condition(self, X: torch.Tensor, z0: Optional[torch.Tensor]) -> torch.Tensor:
        c_text, c_freq = self.condition_inputs(X)
        return self.cond(c_text, c_freq, z0 if self.use_latent else None)

    def eps_model(self, z_t: torch.Tensor, t: torch.Tensor, c_m: torch.Tensor) -> torch.Tensor:
        return self.unet(z_t, t, c_m)

    def branches(self, X: torch.Tensor, z0_hat: torch.Tensor, gate_override: Optional[float] = None):
        """
        Decode the denoised latent, run both forecasting branches and fuse.

        An explicit gate_override wins over the one implied by output_type.

        Returns:
            (Ŷ in input units, gate, unclamped reconstructed image)
        """
        if gate_override is None:
            gate_override = FORCED_GATES.get(self.output_type)
        img_rec_raw = self.vae.decode_raw(z0_hat / self.latent_scale)
        z_ve = self.head(img_rec_raw.clamp(0.0, 1.0))
        X_norm, stats = instance_normalize(X)
        z_te = self.temporal(X_norm)
        y_norm, g = self.fusion(z_te, z_ve, gate_override=gate_override, return_gate=True)
        return denormalize(y_norm, stats), g, img_rec_raw

    def predict(self, X: torch.Tensor, rng: NoiseSource, sampler: str = "ddim", steps: int = 50,
                gate_override: Optional[float] = None):
        """rng is one stream for the batch or one per window."""
        self.check_input(X)
        z_cond = self.encode_latent(self.images(X))
        if self.output_type == "no_ldm":
            z0 = z_cond
        else:
            c_m = self.condition(X, z_cond)
            shape = (X.shape[0],) + self.vae.latent_shape
            z0 = sample_loop(shape, c_m, self.eps_model, self.schedule, sampler=sampler, steps=steps, rng=rng)
        y_hat, g, _ = self.branches(X, z0, gate_override)
        return y_hat, g


def build_model(cfg: Mapping, n_features: int, period: Optional[int] = None) -> LDM4TS:
    """Construct the model with initialization seeded by train.seed (global RNG untouched)."""
    if period is None:
        period = cfg["vision.period"]
        if period == "auto":
            raise ConfigurationError("vision.period='auto' must be resolved before building the model")
    name = cfg["data.name"]
    description = DATASETS[name]["description"] if name in DATASETS else ""
    with torch.random.fork_rng():
        torch.manual_seed(cfg["train.seed"])
        return LDM4TS(cfg, n_features, int(period), description)


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

def split_spec_for(cfg: Mapping) -> SplitSpec:
    name = cfg["data.name"]
    if name in DATASETS:
        return SplitSpec.for_dataset(name, cfg["data.few_shot"], cfg["data.borrow_lookback"])
    train, val, test = cfg["data.split"]
    return SplitSpec(train, val, test, few_shot=cfg["data.few_shot"],
                     borrow_lookback=cfg["data.borrow_lookback"])


def resolve_period(frame: SeriesFrame, spec: SplitSpec, cfg: Mapping) -> int:
    """Configured period, or the best candidate on the training split's feature mean."""
    period = cfg["vision.period"]
    if period != "auto":
        return int(period)
    n_train = spec.row_counts(frame.n_rows)[0]
    series = frame.values[:n_train].mean(dim=1).detach().cpu().numpy()
    chosen = select_period(series, cfg["vision.period_candidates"])
    print(f"📊 Selected period {chosen} from {cfg['vision.period_candidates']}")
    return chosen


class ImageWindows(Dataset):
    """Look-back windows of a stream rendered as images (one per item)."""

    def __init__(self, stream: WindowStream, vision: VisionConfig, norm_const: float):
        self.stream = stream
        self.vision = vision
        self.norm_const = norm_const

    def __len__(self):
        return len(self.stream)

    def __getitem__(self, i: int) -> torch.Tensor:
        x, _ = self.stream[i]
        return build_images(x.unsqueeze(0), self.vision, self.norm_const)[0]


def subsample(stream: WindowStream, limit: Optional[int]) -> WindowStream:
    """Evenly spaced subset of at most limit windows."""
    if limit is None or len(stream) <= limit:
        return stream
    picks = np.linspace(0, len(stream) - 1, limit).round().astype(int)
    origins = [stream.origins[i] for i in picks]
    return WindowStream(stream.values, origins, stream.L, stream.H, stream.label_len, stream.split)


def make_loader(dataset: Dataset, batch_size: int, rng: Optional[RngStream] = None,
                num_workers: int = 0) -> DataLoader:
    shuffle = rng is not None
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle,
                      generator=rng.torch_generator() if shuffle else None,
                      num_workers=num_workers)


def scaler_state(scaler: Optional[StandardScaler]) -> Optional[Dict]:
    if scaler is None:
        return None
    return {"mean": scaler.mean_.tolist(), "scale": scaler.scale_.tolist()}


def scaler_from_state(state: Optional[Dict]) -> Optional[StandardScaler]:
    if state is None:
        return None
    scaler = StandardScaler()
    scaler.mean_ = np.asarray(state["mean"], dtype=float)
    scaler.scale_ = np.asarray(state["scale"], dtype=float)
    scaler.var_ = scaler.scale_ ** 2
    scaler.n_features_in_ = len(scaler.mean_)
    return scaler


def _snapshot(module: nn.Module) -> Dict:
    return copy.deepcopy(module.state_dict())


# ---------------------------------------------------------------------------
# Stage 1: autoencoder
# ---------------------------------------------------------------------------

def vae_reconstruction_mse(vae: TinyVAE, loader: DataLoader) -> float:
    """Per-pixel MSE of decode(mean) against the input images."""
    vae.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for img in loader:
            mean, _, _ = vae.encode(img)
            total += float(((vae.decode(mean) - img) ** 2).sum())
            count += img.numel()
    return total / count if count else float("nan")


def pretrain_vae(vae: TinyVAE, train_stream: WindowStream, val_stream: WindowStream,
                 vision: VisionConfig, norm_const: float, tcfg: TrainConfig, rng: RngStream) -> Dict:
    """
    Fit the autoencoder on rendered images, early-stopping on validation
    reconstruction MSE, then freeze it when train.freeze_ldm is set.

    Returns:
        history dict with per-epoch 'train' and 'val' losses
    """
    history = {"train": [], "val": []}
    if tcfg.vae_epochs > 0:
        opt = Adam(vae.named_parameters(), lr=tcfg.vae_learning_rate)
        train_loader = make_loader(ImageWindows(train_stream, vision, norm_const), tcfg.batch_size,
                                   rng.spawn("shuffle"), tcfg.num_workers)
        val_loader = make_loader(ImageWindows(val_stream, vision, norm_const), tcfg.batch_size,
                                 num_workers=tcfg.num_workers)
        best, best_state, bad = math.inf, _snapshot(vae), 0

        for epoch in range(1, tcfg.vae_epochs + 1):
            vae.train()
            running, batches = 0.0, 0
            for batch_index, img in enumerate(train_loader):
                total, recon, kl = vae.loss(img, rng=rng.spawn(f"epoch-{epoch}/batch-{batch_index}"))
                if not math.isfinite(float(total)):
                    raise TrainingError(f"Autoencoder loss is not finite at epoch {epoch}, batch {batch_index}",
                                        batch_index=batch_index,
                                        losses={"recon": float(recon), "kl": float(kl)},
                                        last_good_state=best_state)
                opt.zero_grad()
                total.backward()
                opt.step()
                running += float(recon)
                batches += 1

            val = vae_reconstruction_mse(vae, val_loader)
            history["train"].append(running / max(batches, 1))
            history["val"].append(val)
            print(f"   VAE epoch {epoch}: recon {history['train'][-1]:.5f}  val {val:.5f}", flush=True)
            if val < best:
                best, best_state, bad = val, _snapshot(vae), 0
            else:
                bad += 1
                if bad >= tcfg.patience:
                    print(f"   Early stop after {epoch} epochs (best val {best:.5f})")
                    break
        vae.load_state_dict(best_state)

    if tcfg.freeze_ldm:
        vae.requires_grad_(False)
    vae.eval()
    return history


def calibrate_latent_scale(model: LDM4TS, stream: WindowStream, rng: RngStream,
                           max_windows: int = 1024, batch_size: int = 64) -> float:
    """Set model.latent_scale to 1 / std of sampled latents over up to max_windows windows."""
    sample = subsample(stream, max_windows)
    loader = make_loader(ImageWindows(sample, model.vision, model.norm_const), batch_size)
    latents = []
    model.vae.eval()
    with torch.no_grad():
        for i, img in enumerate(loader):
            latents.append(model.vae.encode(img, rng=rng.spawn(f"batch-{i}"))[2])
    s = calibrate_scale(torch.cat(latents))
    model.latent_scale.fill_(s)
    return s


# ---------------------------------------------------------------------------
# Stage 2: joint training
# ---------------------------------------------------------------------------

def training_terms(model: LDM4TS, X: torch.Tensor, Y: torch.Tensor, rng: RngStream,
                   tcfg: TrainConfig, eps_model=None) -> Dict[str, torch.Tensor]:
    """
    One batch of the composite objective.

    The prediction branch uses the one-shot ẑ0 from the sampled noise level
    rather than a full reverse loop. Without the diffusion model (no_ldm) the
    clean latent goes straight to the decoder and l_diff is 0.
    """
    model.check_input(X)
    img = model.images(X)
    z0 = model.encode_latent(img, rng=rng.spawn("vae"))
    if model.output_type == "no_ldm":
        l_diff, z0_hat = z0.new_zeros(()), z0
    else:
        c_m = model.condition(X, z0)
        terms = diffusion_terms(z0, c_m, eps_model or model.eps_model, model.schedule, rng.spawn("diffusion"))
        l_diff = terms.loss
        z0_hat = predict_z0(terms.z_t, terms.t, terms.eps_hat, model.schedule)
    y_hat, _, img_rec_raw = model.branches(X, z0_hat)

    l_recon = F.mse_loss(img_rec_raw, img)
    l_pred = F.mse_loss(y_hat, Y) if tcfg.loss == "MSE" else F.l1_loss(y_hat, Y)
    total = tcfg.lambda_diff * l_diff + tcfg.lambda_pred * l_pred + tcfg.lambda_recon * l_recon
    return {"total": total, "l_diff": l_diff, "l_pred": l_pred, "l_recon": l_recon}


@dataclass
class TrainResult:
    best_val_mse: float
    steps: int
    epochs_run: int
    log: List[Dict] = field(default_factory=list)
    optimizer_state: Optional[Dict] = None


def validation_mse(model: LDM4TS, stream: WindowStream, tcfg: TrainConfig) -> float:
    if len(stream) == 0:
        return float("nan")
    sample = subsample(stream, tcfg.val_max_windows)
    batch = sample.to_batch()
    result = forecast(model, batch.X, batch.Y, seed=tcfg.seed, sampler=tcfg.sampler,
                      steps=tcfg.inference_steps, batch_size=tcfg.batch_size)
    return result.metrics["mse"]


def train(model: LDM4TS, train_stream: WindowStream, val_stream: WindowStream, tcfg: TrainConfig,
          rng: RngStream, log_path: Optional[Path] = None) -> TrainResult:
    """
    Joint training with early stopping on validation forecast MSE.

    The best-validation parameters are restored before returning. One log row
    is written per optimizer step.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = Adam(named, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay,
               decoupled=tcfg.optimizer == "adamw")
    loader = make_loader(train_stream, tcfg.batch_size, rng.spawn("shuffle"), tcfg.num_workers)

    best_val, best_state, bad = math.inf, _snapshot(model), 0
    log, step, epochs_run, done = [], 0, 0, False

    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        for batch_index, (X, Y) in enumerate(loader):
            terms = training_terms(model, X, Y, rng.spawn(f"step-{step}"), tcfg)
            losses = {k: float(v) for k, v in terms.items()}
            if not all(math.isfinite(v) for v in losses.values()):
                raise TrainingError(f"Loss is not finite at epoch {epoch}, batch {batch_index}",
                                    batch_index=batch_index, losses=losses, last_good_state=best_state)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            step += 1

            log.append({"epoch": epoch, "step": step, "l_diff": losses["l_diff"],
                        "l_pred": losses["l_pred"], "l_recon": losses["l_recon"], "val_mse": None})
            if step % tcfg.log_every == 0:
                print(f"   epoch {epoch} step {step}: diff {losses['l_diff']:.4f}  "
                      f"pred {losses['l_pred']:.4f}  recon {losses['l_recon']:.4f}", flush=True)
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                done = True
                break

        epochs_run = epoch
        val = validation_mse(model, val_stream, tcfg)
        if log:
            log[-1]["val_mse"] = val
        print(f"📊 Epoch {epoch}: val MSE {val:.5f}", flush=True)
        if val < best_val:
            best_val, best_state, bad = val, _snapshot(model), 0
        else:
            bad += 1
            if bad >= tcfg.patience:
                print(f"   Early stop after {epoch} epochs (best val {best_val:.5f})")
                break
        if done:
            break

    model.load_state_dict(best_state)
    if log_path is not None:
        write_train_log(log, log_path)
    return TrainResult(best_val, step, epochs_run, log, opt.state_dict())


def write_train_log(log: List[Dict], path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(log, columns=LOG_COLUMNS).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------

@dataclass
class ForecastResult:
    """Ŷ (B×H×D, model input units) with optional metrics, mean gate and timings in ms."""
    Y_hat: torch.Tensor
    metrics: Optional[Dict[str, float]] = None
    per_sample: List[Tuple[float, float]] = field(default_factory=list)
    gate_mean: float = float("nan")
    timings: Dict[str, float] = field(default_factory=dict)


def forecast(model: LDM4TS, X: torch.Tensor, Y: Optional[torch.Tensor] = None, seed: int = 0,
             sampler: str = "ddim", steps: int = 50, batch_size: Optional[int] = None,
             gate_override: Optional[float] = None) -> ForecastResult:
    """
    Run the inference path; a fixed seed gives bit-identical output.

    Window b draws its noise from its own stream, so a window's forecast does
    not depend on batch_size or on the other windows in X.
    """
    model.check_input(X)
    if Y is not None and Y.shape != (X.shape[0], model.pred_len, model.n_features):
        raise ValidationError(f"Targets must be B×{model.pred_len}×{model.n_features}, got {tuple(Y.shape)}")
    batch_size = batch_size or max(X.shape[0], 1)
    rng = RngStream(seed, "forecast")

    model.eval()
    outputs, gates, batch_ms = [], [], []
    with torch.no_grad():
        for start in range(0, X.shape[0], batch_size):
            chunk = X[start:start + batch_size]
            streams = [rng.spawn(f"window-{start + b}") for b in range(chunk.shape[0])]
            t0 = time.perf_counter()
            y_hat, g = model.predict(chunk, streams, sampler=sampler, steps=steps, gate_override=gate_override)
            batch_ms.append((time.perf_counter() - t0) * 1000.0)
            outputs.append(y_hat)
            gates.append(g)

    Y_hat = torch.cat(outputs) if outputs else X.new_zeros(0, model.pred_len, model.n_features)
    total_ms = sum(batch_ms)
    result = ForecastResult(
        Y_hat,
        gate_mean=float(torch.cat(gates).mean()) if gates else float("nan"),
        timings={"total_ms": total_ms,
                 "per_batch_ms": total_ms / max(len(batch_ms), 1),
                 "per_sample_ms": total_ms / max(X.shape[0], 1)},
    )
    if Y is not None:
        mse, mae = compute_metrics(Y, Y_hat)
        result.metrics = {"mse": mse, "mae": mae}
        result.per_sample = [compute_metrics(Y[b], Y_hat[b]) for b in range(Y.shape[0])]
    return result


def metrics_table(pairs: Mapping[int, Tuple[torch.Tensor, torch.Tensor]]) -> pd.DataFrame:
    """
    Args:
        pairs: horizon -> (targets, predictions)

    Returns:
        DataFrame with columns horizon, mse, mae and a final 'avg' row
    """
    rows = []
    for horizon in sorted(pairs):
        Y, Y_hat = pairs[horizon]
        mse, mae = compute_metrics(Y, Y_hat)
        rows.append({"horizon": str(horizon), "mse": mse, "mae": mae})
    if rows:
        rows.append({"horizon": "avg",
                     "mse": float(np.mean([r["mse"] for r in rows])),
                     "mae": float(np.mean([r["mae"] for r in rows]))})
    return pd.DataFrame(rows, columns=["horizon", "mse", "mae"])


def evaluate(models: Mapping[int, LDM4TS], frame: SeriesFrame, spec: SplitSpec, seed: int = 0,
             sampler: str = "ddim", steps: int = 50, batch_size: int = 32,
             out_path: Optional[Path] = None, max_windows: Optional[int] = None) -> pd.DataFrame:
    """
    Test-split MSE/MAE per horizon (models keyed by their pred_len) plus the
    average row. Horizons whose windows do not fit are skipped with a warning.
    """
    pairs, naive = {}, {}
    for horizon in sorted(models):
        model = models[horizon]
        try:
            _, _, test = make_windows(frame, spec, model.seq_len, horizon)
        except ConfigurationError as e:
            print(f"⚠️  Skipping horizon {horizon}: {e}")
            continue
        batch = subsample(test, max_windows).to_batch()
        result = forecast(model, batch.X, batch.Y, seed=seed, sampler=sampler, steps=steps,
                          batch_size=batch_size)
        pairs[horizon] = (batch.Y, result.Y_hat)
        naive[horizon] = compute_metrics(batch.Y, naive_forecast(batch.X, horizon))[0]

    table = metrics_table(pairs)
    print(f"{'horizon':>8} {'mse':>10} {'mae':>10} {'naive mse':>10}")
    for row in table.itertuples():
        base = f"{naive[int(row.horizon)]:10.4f}" if row.horizon != "avg" else f"{np.mean(list(naive.values())):10.4f}"
        print(f"{row.horizon:>8} {row.mse:10.4f} {row.mae:10.4f} {base}")
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_path, index=False)
        print(f"✅ Wrote metrics to {out_path}")
    return table


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, model: LDM4TS, scaler: Optional[StandardScaler] = None,
                    feature_names: Optional[List[str]] = None, result: Optional[TrainResult] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = dict(model.cfg)
    config["vision.period"] = model.period
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "n_features": model.n_features,
        "feature_names": list(feature_names or []),
        "state_dict": model.state_dict(),
        "optimizer": result.optimizer_state if result else None,
        "schedule": model.schedule.config(),
        "scaler": scaler_state(scaler),
        "latent_scale": float(model.latent_scale),
        "best_val_mse": result.best_val_mse if result else None,
    }, path)


def load_checkpoint(path) -> Tuple[LDM4TS, Dict]:
    """
    Returns:
        (model, metadata); metadata holds 'scaler' (a StandardScaler or None),
        'feature_names', 'config_hash' and 'schedule'
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {ckpt.get('version')} in {path}")
    config = ckpt["config"]
    if config_hash(config) != ckpt["config_hash"]:
        raise ConfigurationError(f"Config hash mismatch in {path}")
    model = build_model(config, ckpt["n_features"], config["vision.period"])
    model.load_state_dict(ckpt["state_dict"])
    if config["train.freeze_ldm"]:
        model.vae.requires_grad_(False)
    model.eval()
    meta = {
        "scaler": scaler_from_state(ckpt["scaler"]),
        "feature_names": ckpt["feature_names"],
        "config_hash": ckpt["config_hash"],
        "schedule": ckpt["schedule"],
        "best_val_mse": ckpt["best_val_mse"],
    }
    return model, meta


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

@dataclass
class FitOutput:
    model: LDM4TS
    scaler: Optional[StandardScaler]
    frame: SeriesFrame
    spec: SplitSpec
    result: TrainResult
    vae_history: Dict
    checkpoint: Optional[Path] = None


def prepare_frame(frame: SeriesFrame, cfg: Mapping) -> Tuple[SeriesFrame, SplitSpec, Optional[StandardScaler]]:
    """Split spec plus (optionally) the train-fitted scaler applied to the whole series."""
    spec = split_spec_for(cfg)
    if not cfg["data.scale"]:
        return frame, spec, None
    scaler = fit_scaler(frame, spec)
    return apply_scaler(frame, scaler), spec, scaler


def fit(frame: SeriesFrame, cfg: Mapping, out_dir: Optional[Path] = None, num_workers: int = 0) -> FitOutput:
    """Scale, pretrain the autoencoder, calibrate, train jointly and save a checkpoint."""
    tcfg = TrainConfig.from_config(cfg, num_workers)
    scaled, spec, scaler = prepare_frame(frame, cfg)
    L, H = cfg["data.seq_len"], cfg["data.pred_len"]
    train_s, val_s, _ = make_windows(scaled, spec, L, H, cfg["data.label_len"])
    print(f"📊 {frame.n_rows} rows × {frame.n_features} features; "
          f"windows train/val: {len(train_s)}/{len(val_s)}")

    model = build_model(cfg, frame.n_features, resolve_period(scaled, spec, cfg))
    rng = RngStream(tcfg.seed, "fit")

    banner("Stage 1: autoencoder pretraining")
    vae_history = pretrain_vae(model.vae, train_s, val_s, model.vision, model.norm_const, tcfg,
                               rng.spawn("vae"))
    if cfg["diffusion.calibrate_scale"]:
        s = calibrate_latent_scale(model, train_s, rng.spawn("calibrate"))
        print(f"📊 Latent scale s = {s:.5f}")

    if out_dir is not None and cfg["vision.save_images"]:
        images = model.images(subsample(val_s, tcfg.batch_size).to_batch().X)
        paths = export_png(images, Path(out_dir) / "images", split="val")
        print(f"✅ Wrote {len(paths)} images to {Path(out_dir) / 'images'}")

    banner("Stage 2: joint training")
    log_path = Path(out_dir) / TRAIN_LOG_FILE if out_dir is not None else None
    result = train(model, train_s, val_s, tcfg, rng.spawn("joint"), log_path=log_path)
    print(f"✅ Trained {result.steps} steps over {result.epochs_run} epochs, best val MSE {result.best_val_mse:.5f}")

    checkpoint = None
    if out_dir is not None:
        checkpoint = Path(out_dir) / CHECKPOINT_FILE
        save_checkpoint(checkpoint, model, scaler, frame.feature_names, result)
        print(f"✅ Saved checkpoint to {checkpoint}")
    return FitOutput(model, scaler, scaled, spec, result, vae_history, checkpoint)


def main():
    """Synthesize the toy dataset (or read --input), train, then evaluate on the test split."""
    import argparse

    from model_config import load_config, load_environment
    from numerics import set_precision
    from series_data import load_csv, make_synthetic_frame

    parser = argparse.ArgumentParser(description="Train and evaluate the forecaster end to end")
    parser.add_argument("--config", default=str(Path(__file__).resolve().parent / "toy_config.json"),
                        help="JSON config file (default: toy_config.json)")
    parser.add_argument("--input", help="CSV with a 'date' column; synthetic data when omitted")
    parser.add_argument("--out", default="out", help="Output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Config override")
    args = parser.parse_args()

    try:
        cfg = load_config(args.config, args.set)
        env = load_environment()
        set_precision(cfg["numerics.precision"])
        frame = load_csv(args.input, name=cfg["data.name"]) if args.input else make_synthetic_frame(seed=cfg["train.seed"])
        output = fit(frame, cfg, Path(args.out), env["num_workers"])
        banner("Evaluation")
        evaluate({cfg["data.pred_len"]: output.model}, output.frame, output.spec, seed=cfg["train.seed"],
                 sampler="ddim" if cfg["diffusion.use_ddim"] else "ddpm",
                 steps=cfg["diffusion.inference_steps"], batch_size=cfg["train.batch_size"],
                 out_path=Path(args.out) / "metrics.csv")
    except (FileNotFoundError, ValueError) as e:
        print(f"\n❌ {e}")
        sys.exit(2)
    except RuntimeError as e:
        print(f"\n❌ {e}")
        sys.exit(3)


if __name__ == "__main__":
    main()
