"""Experiment orchestration: dataset preparation, scratch training, LoRA
pretrain/fine-tune, rank sweeps, generation, evaluation, and rank-vs-metric
correlation.

Every run is a pure function of its config (wall-clock excluded): component
streams are derived from the root seed, outputs land in run-scoped
directories, and checkpoints/reports carry the config digest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import lora as lora_mod
from . import metrics as M
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_digest, config_text
from .diffusion import (GuidanceConfig, NoiseSchedule, ddpm_sample_many,
                        make_cosine_schedule, make_linear_schedule, q_sample)
from .errors import ConfigError, ContractError, NumericError
from .nets import (UnetParams, VaeParams, init_unet, init_vae, unet_forward_batch,
                   vae_decode, vae_encode, vae_loss)
from .optim import AdamW
from .rng import Stream, derive_seed
from .synthdata import (DatasetManifest, ImageSample, PromptRecord, augment,
                        build_dataset, paraphrase, split_holdout)
from .textenc import TextEmbedding, TextEncoder

SMOOTH_WINDOW = 25
MAX_SAMPLE_BATCH = 64


# ------------------------------------------------------------------- bundles


@dataclass
class MsdmModel:
    vae: VaeParams
    unet: UnetParams
    textenc: TextEncoder
    schedule: NoiseSchedule
    image_size: int = 32

    def all_state(self) -> dict[str, np.ndarray]:
        state = {}
        state.update(self.vae.state())
        state.update(self.unet.state())
        state.update(self.textenc.state())
        return state

    def base_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.all_state()):
            h.update(name.encode())
            h.update(self.all_state()[name].tobytes())
        return h.hexdigest()


@dataclass
class RunResult:
    config_digest: str
    per_run_fids: list[float] = field(default_factory=list)
    report_path: str = ""
    wall_clock: float = 0.0
    checkpoints: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    if cfg.schedule_kind == "linear":
        return make_linear_schedule(cfg.schedule_T, cfg.schedule_beta_start, cfg.schedule_beta_end)
    if cfg.schedule_kind == "cosine":
        return make_cosine_schedule(cfg.schedule_T)
    raise ConfigError(f"unknown schedule kind {cfg.schedule_kind!r}")


def save_model(path: str | Path, model: MsdmModel) -> None:
    state = model.all_state()
    state["meta.betas"] = model.schedule.betas
    state["meta.arch"] = np.array([float(model.vae.width), float(model.unet.width),
                                   float(model.image_size)])
    save_checkpoint(path, state)


def load_model(path: str | Path) -> MsdmModel:
    state = load_checkpoint(path)
    betas = state.pop("meta.betas")
    alphas = 1.0 - betas
    schedule = NoiseSchedule(len(betas), betas, alphas, np.cumprod(alphas))
    arch = state.pop("meta.arch")
    vae = init_vae(0, width=int(arch[0]))
    unet = init_unet(0, T_steps=len(betas), width=int(arch[1]))
    enc = TextEncoder(0)
    for k, v in vae.params.items():
        v.data = state[f"vae.{k}"].copy()
    for k, v in unet.params.items():
        v.data = state[f"unet.{k}"].copy()
    enc.load_state({k: v for k, v in state.items() if k.startswith("textenc.")})
    return MsdmModel(vae=vae, unet=unet, textenc=enc, schedule=schedule,
                     image_size=int(arch[2]))


# ------------------------------------------------------------------ datasets


def prepare_dataset(cfg: ExperimentConfig, domain: str | None = None,
                    tag: str = "dataset") -> DatasetManifest:
    domain = domain or cfg.dataset_domain
    m = build_dataset(cfg.dataset_n_images, derive_seed(cfg.seed, tag, domain),
                      image_size=cfg.dataset_image_size,
                      n_prompts=cfg.dataset_n_prompts, modality=domain)
    m = split_holdout(m, cfg.dataset_holdout_fraction, derive_seed(cfg.seed, tag, domain, "split"))
    if cfg.dataset_augment != "none":
        m = augment(m, cfg.dataset_augment, fraction=cfg.dataset_substitute_fraction,
                    seed=derive_seed(cfg.seed, tag, domain, "augment"),
                    k=cfg.dataset_paraphrase_k)
    return m


def _pixels_to_unit(images: list[ImageSample]) -> np.ndarray:
    arr = np.stack([im.pixels for im in images]).astype(np.float64)
    return (arr / 127.5 - 1.0).transpose(0, 3, 1, 2)


# ------------------------------------------------------------------- training


def train_vae_on(images: list[ImageSample], cfg: ExperimentConfig, *,
                 width: int, seed_label: str) -> tuple[VaeParams, list[float]]:
    vae = init_vae(derive_seed(cfg.seed, seed_label, "init"), width=width)
    data = _pixels_to_unit(images)
    pick = Stream(cfg.seed, seed_label, "batches")
    noise = Stream(cfg.seed, seed_label, "reparam")
    opt = AdamW(vae.trainable(), lr=cfg.train_lr, weight_decay=cfg.train_weight_decay)
    losses = []
    bs = min(cfg.train_batch_size, len(images))
    for step in range(cfg.train_vae_steps):
        idx = pick.choice(len(images), bs)
        x = data[idx]
        with T.Tape() as tape:
            mean, logvar, z = vae_encode(x, vae, noise)
            xhat = vae_decode(z, vae)
            loss = vae_loss(x, mean, logvar, xhat, cfg.train_kl_weight)
            T.backward(tape, loss)
        opt.step()
        losses.append(loss.item())
    return vae, losses


class _PromptCache:
    """Constant per-prompt pieces of the text encoding; the learned mixing
    layer is applied per step so its gradient flows."""

    def __init__(self, enc: TextEncoder, prompts: list[PromptRecord]):
        self.enc = enc
        self.rows: dict[str, T.Tensor] = {}
        self.lengths: dict[str, int] = {}
        for p in prompts:
            rows, length = enc.raw_rows(p.text)
            self.rows[p.id] = T.Tensor(rows)
            self.lengths[p.id] = max(length, 1)

    def embed(self, pid: str) -> TextEmbedding:
        full = T.matmul(self.enc.mix, self.rows[pid])
        return TextEmbedding(tokens=full, pooled=full.data.mean(axis=0),
                             padded=full, length=self.lengths[pid])


def train_unet_on(manifest: DatasetManifest, vae: VaeParams, cfg: ExperimentConfig, *,
                  width: int, seed_label: str,
                  adapters: dict | None = None,
                  unet: UnetParams | None = None,
                  textenc: TextEncoder | None = None,
                  steps: int | None = None) -> tuple[UnetParams, TextEncoder, list[float]]:
    """Noise-prediction training; with adapters given, only adapter weights
    train and the base stays frozen."""
    schedule = build_schedule(cfg)
    guidance = GuidanceConfig(scale=cfg.sample_guidance_scale,
                              drop_probability=cfg.sample_drop_probability)
    if unet is None:
        unet = init_unet(derive_seed(cfg.seed, seed_label, "init"), cfg.schedule_T, width=width)
    if textenc is None:
        textenc = TextEncoder(derive_seed(cfg.seed, seed_label, "text"))
    train_images = manifest.train_images()
    latents = _encode_latents(train_images, vae)
    cache = _PromptCache(textenc, manifest.prompts)
    null_emb = textenc.null_embedding()

    if adapters is None:
        params = unet.trainable() + [textenc.mix]
    else:
        params = lora_mod.trainable_params(adapters)
    opt = AdamW(params, lr=cfg.train_lr, weight_decay=cfg.train_weight_decay)
    pick = Stream(cfg.seed, seed_label, "batches")
    draws = Stream(cfg.seed, seed_label, "diffusion")
    n_steps = steps if steps is not None else cfg.train_steps
    bs = min(cfg.train_batch_size, len(train_images))
    losses = []
    for step in range(n_steps):
        idx = pick.choice(len(train_images), bs)
        ts, noises, pids, x_ts = [], [], [], []
        for i in idx:
            im = train_images[int(i)]
            t = draws.randint(1, schedule.T + 1)
            eps = draws.normal(latents[int(i)].shape)
            pid_pool = im.prompt_ids
            pid = pid_pool[draws.randint(0, len(pid_pool))]
            dropped = draws.uniform() < guidance.drop_probability
            pids.append(None if dropped else pid)
            ts.append(t)
            noises.append(eps)
            x_ts.append(q_sample(latents[int(i)], t, eps, schedule))
        with T.Tape() as tape:
            texts = [null_emb if pid is None else cache.embed(pid) for pid in pids]
            eps_hat = unet_forward_batch(np.stack(x_ts), ts, texts, unet, adapters)
            loss = T.mse(eps_hat, T.Tensor(np.stack(noises)))
            T.backward(tape, loss)
        opt.step()
        losses.append(loss.item())
    return unet, textenc, losses


def _encode_latents(images: list[ImageSample], vae: VaeParams) -> np.ndarray:
    data = _pixels_to_unit(images)
    mean, _, _ = vae_encode(data, vae)
    return mean.data


def smoothed(losses: list[float], window: int = SMOOTH_WINDOW) -> list[float]:
    out = []
    for i in range(len(losses)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(losses[lo : i + 1])))
    return out


def write_loss_csv(losses: list[float], path: str | Path) -> None:
    sm = smoothed(losses)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "smoothed"])
        for i, (l, s) in enumerate(zip(losses, sm), start=1):
            w.writerow([i, repr(l), repr(s)])


def train_msdm(cfg: ExperimentConfig, out_dir: str | Path | None = None,
               manifest: DatasetManifest | None = None) -> tuple[MsdmModel, RunResult]:
    """VAE first, then the denoiser against the frozen VAE."""
    t0 = time.time()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        manifest = prepare_dataset(cfg)
    try:
        vae, vae_losses = train_vae_on(manifest.train_images(), cfg,
                                       width=16, seed_label="vae")
        for p in vae.params.values():
            p.requires_grad = False
        unet, enc, losses = train_unet_on(manifest, vae, cfg, width=32, seed_label="unet")
    except NumericError as e:
        raise NumericError(f"training diverged: {e}") from e
    model = MsdmModel(vae=vae, unet=unet, textenc=enc, schedule=build_schedule(cfg),
                      image_size=cfg.dataset_image_size)
    ckpt = out / "msdm.ckpt"
    save_model(ckpt, model)
    model.schedule.to_csv(out / "schedule.csv")
    write_loss_csv(vae_losses, out / "vae_loss.csv")
    write_loss_csv(losses, out / "unet_loss.csv")
    (out / "config.txt").write_text(config_text(cfg))
    result = RunResult(config_digest=config_digest(cfg), wall_clock=time.time() - t0,
                       checkpoints=[str(ckpt)],
                       extra={"final_loss": losses[-1] if losses else None})
    return model, result


# ----------------------------------------------------------------- generation


def plan_generation(prompt_ids: list[str], n_per_prompt: int | None = None,
                    n_total: int | None = None) -> dict[str, int]:
    """Per-prompt image counts; n_total distributes as evenly as possible
    (the large-evaluation mode, e.g. 5000 across the prompt list)."""
    if not prompt_ids:
        raise ContractError("no prompts to generate for")
    if (n_per_prompt is None) == (n_total is None):
        raise ContractError("exactly one of n_per_prompt / n_total required")
    if n_per_prompt is not None:
        return {pid: n_per_prompt for pid in prompt_ids}
    base, rem = divmod(n_total, len(prompt_ids))
    return {pid: base + (1 if i < rem else 0) for i, pid in enumerate(prompt_ids)}


def generate_set(model: MsdmModel, prompts: list[PromptRecord], n_per_prompt: int,
                 seed: int, out_dir: str | Path | None = None,
                 adapters: dict | None = None,
                 guidance: GuidanceConfig | None = None,
                 n_total: int | None = None,
                 schedule: NoiseSchedule | None = None) -> list[tuple[ImageSample, str]]:
    """Sample images per prompt with per-image derived seeds; returns
    (image, prompt_id) pairs and optionally writes a generation manifest.
    `schedule` overrides the checkpoint schedule (shorter chains for smoke
    runs); sampling timesteps must stay within the model's trained range."""
    guidance = guidance or GuidanceConfig()
    sched = schedule if schedule is not None else model.schedule
    counts = plan_generation([p.id for p in prompts],
                             None if n_total is not None else n_per_prompt, n_total)
    null_emb = model.textenc.null_embedding()
    side = model.image_size // model.vae.reduction
    latent_shape = (model.unet.latent_channels, side, side)
    results: list[tuple[ImageSample, str]] = []

    def model_many(x, t, embs):
        return unet_forward_batch(x, [t] * x.shape[0], embs, model.unet, adapters).data

    # one fused sampling loop over every (prompt, index) job; per-image streams
    # keep each output a function of (seed, prompt, checkpoint) alone
    jobs = []
    emb_cache: dict[str, object] = {}
    for p in prompts:
        emb_cache[p.id] = model.textenc.encode(p.text)
        for i in range(counts[p.id]):
            jobs.append((p, i, Stream(derive_seed(seed, "sample", p.id, i))))
    for lo in range(0, len(jobs), MAX_SAMPLE_BATCH):
        chunk = jobs[lo : lo + MAX_SAMPLE_BATCH]
        embs = [emb_cache[p.id] for p, _, _ in chunk]
        streams = [s for _, _, s in chunk]
        z = ddpm_sample_many(model_many, embs, sched, guidance,
                             streams, latent_shape, null_emb=null_emb)
        imgs = vae_decode(z, model.vae).data
        px = np.clip((imgs + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
        for j, (p, i, _) in enumerate(chunk):
            im = ImageSample(id=f"gen-{p.id}-{i:04d}",
                             pixels=px[j].transpose(1, 2, 0),
                             attributes=p.attributes, prompt_ids=[p.id])
            results.append((im, p.id))
    results.sort(key=lambda r: r[0].id)

    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        with open(out / "gen.jsonl", "w") as f:
            for im, pid in results:
                fname = f"images/{im.id}.png"
                Image.fromarray(im.pixels).save(out / fname)
                f.write(json.dumps({"id": im.id, "file": fname, "prompt_id": pid,
                                    "seed": seed}) + "\n")
    return results


def load_generated(out_dir: str | Path) -> list[tuple[ImageSample, str]]:
    out = Path(out_dir)
    results = []
    for line in (out / "gen.jsonl").read_text().splitlines():
        d = json.loads(line)
        px = np.asarray(Image.open(out / d["file"]).convert("RGB"), dtype=np.uint8)
        im = ImageSample(id=d["id"], pixels=px, attributes=None, prompt_ids=[d["prompt_id"]])
        results.append((im, d["prompt_id"]))
    return results


# ----------------------------------------------------------------- evaluation


def eval_prompt_records(manifest: DatasetManifest, cfg: ExperimentConfig,
                        include_rephrased: bool = True) -> list[PromptRecord]:
    """Original validation-linked prompts (plus one rephrase each for the
    Agreement pairing), evaluation-seeded so rephrasings never match
    training paraphrases."""
    byid = manifest.prompt_by_id()
    counts: dict[str, int] = {}
    for im in manifest.validation_images():
        for pid in im.prompt_ids:
            if pid in byid and byid[pid].origin == "original":
                counts[pid] = counts.get(pid, 0) + 1
    usable = sorted(pid for pid, c in counts.items() if c >= 2)
    chosen = usable[: cfg.sample_eval_prompts]
    if not chosen:
        raise ContractError("no validation prompts with >= 2 real images")
    records = [byid[pid] for pid in chosen]
    if include_rephrased:
        for pid in chosen:
            rec = paraphrase(byid[pid], 1, derive_seed(cfg.seed, "eval-rephrase", pid))[0]
            records.append(rec)
    return records


def default_assumptions(cfg: ExperimentConfig) -> list[str]:
    return [
        f"embedder={cfg.embedder} stand-in feature space",
        "diversity distance = cosine distance",
        "per-prompt FID uses diagonal covariance when n < embedding dim",
        f"schedule {cfg.schedule_kind} T={cfg.schedule_T} (toolkit convention)",
        f"guidance scale {cfg.sample_guidance_scale} (toolkit convention)",
    ]


def evaluate(real_manifest: DatasetManifest, generated: list[tuple[ImageSample, str]],
             cfg: ExperimentConfig, out_dir: str | Path | None = None,
             vae: VaeParams | None = None) -> M.MetricReport:
    """Fidelity / Agreement / Diversity / FBD plus the pooled dev FID for one
    generated set; per-prompt detail optionally lands in a CSV."""
    byid = real_manifest.prompt_by_id()
    val_images = real_manifest.validation_images()

    def embed(images, pids, source):
        return M.embed_images(images, cfg.embedder, seed=real_manifest.root_seed,
                              vae=vae, source=source, prompt_ids=pids)

    gen_by_pid: dict[str, list[ImageSample]] = {}
    for im, pid in generated:
        gen_by_pid.setdefault(pid, []).append(im)

    orig_pids = [pid for pid in gen_by_pid
                 if pid in byid and byid[pid].origin == "original"]
    reph = [(pid, byid[pid].parent_id) for pid in gen_by_pid
            if pid not in orig_pids and pid in byid and byid[pid].parent_id]
    # rephrasings produced by eval_prompt_records are not in the manifest table
    for pid in gen_by_pid:
        if pid not in byid and "-r" in pid:
            parent = pid.rsplit("-r", 1)[0]
            if parent in byid:
                reph.append((pid, parent))

    real_by_pid: dict[str, list[ImageSample]] = {}
    for im in val_images:
        for pid in im.prompt_ids:
            real_by_pid.setdefault(pid, []).append(im)

    rows = []
    per_prompt_fids = []
    per_prompt_div = []
    for pid in sorted(orig_pids):
        gens = gen_by_pid[pid]
        fid_val = None
        if pid in real_by_pid and len(real_by_pid[pid]) >= 2 and len(gens) >= 2:
            fid_val = M.fid(embed(real_by_pid[pid], [pid] * len(real_by_pid[pid]), "real"),
                            embed(gens, [pid] * len(gens), "generated"))
            per_prompt_fids.append(fid_val)
        div_val = None
        if len(gens) >= 2:
            div_val = M.diversity(embed(gens, [pid] * len(gens), "generated"))
            per_prompt_div.append(div_val)
        rows.append((pid, fid_val, div_val))

    agreement_val = float("nan")
    pair_agreement: dict[str, float] = {}
    pairs = [(parent, pid) for pid, parent in reph if parent in gen_by_pid]
    if pairs:
        for parent, rp in pairs:
            es_o = embed(gen_by_pid[parent], [parent] * len(gen_by_pid[parent]), "generated")
            es_r = embed(gen_by_pid[rp], [parent] * len(gen_by_pid[rp]), "generated")
            pair_agreement[parent] = M.agreement(es_o, es_r)
        agreement_val = float(np.mean(list(pair_agreement.values())))

    all_gen = [im for im, _ in generated]
    all_gen_pids = [pid for _, pid in generated]
    fbd_val = M.fbd(embed(val_images, ["*"] * len(val_images), "real"),
                    embed(all_gen, all_gen_pids, "generated"))

    assumptions = default_assumptions(cfg) + [
        f"sample counts: {len(all_gen)} generated vs {len(val_images)} real, "
        f"{len(per_prompt_fids)} prompts with per-prompt FID"
    ]
    report = M.MetricReport(
        fidelity=M.fidelity(per_prompt_fids) if per_prompt_fids else float("nan"),
        agreement=agreement_val,
        diversity=float(np.mean(per_prompt_div)) if per_prompt_div else float("nan"),
        fbd=fbd_val,
        fid_mean=fbd_val, fid_std=0.0, run_count=1,
        embedder=cfg.embedder, assumptions=assumptions,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / "report.json")
        with open(out / "per_prompt.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["prompt_id", "fid", "diversity", "agreement_pair"])
            for pid, fv, dv in rows:
                av = pair_agreement.get(pid)
                w.writerow([pid, "" if fv is None else repr(fv),
                            "" if dv is None else repr(dv),
                            "" if av is None else repr(av)])
    return report


def comparison_table(reports: dict[str, M.MetricReport], path: str | Path) -> None:
    """Model comparison in the shape of the headline results table."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "fid", "fidelity", "agreement", "diversity", "fbd"])
        for name, r in reports.items():
            w.writerow([name, M.format_mean_std(r.fid_mean, r.fid_std),
                        f"{r.fidelity:.2f}", f"{r.agreement:.2f}",
                        f"{r.diversity:.2f}", f"{r.fbd:.2f}"])


# ------------------------------------------------------------- LoRA pipeline


def pretrain_backbone(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[MsdmModel, DatasetManifest]:
    """Train the 2x-wider backbone: a broad-corpus autoencoder (all palettes,
    mirroring general-purpose latent compressors) plus a denoiser pretrained
    on the generic domain whose palette is held out of the target set."""
    generic = "xray" if cfg.dataset_domain == "endo" else "endo"
    broad = prepare_dataset(cfg, domain=None, tag="generic-vae")
    manifest = prepare_dataset(cfg, domain=generic, tag="generic")
    vae, _ = train_vae_on(broad.train_images(), cfg, width=32, seed_label="base-vae")
    for p in vae.params.values():
        p.requires_grad = False
    unet, enc, losses = train_unet_on(manifest, vae, cfg, width=64,
                                      seed_label="base-unet",
                                      steps=cfg.lora_pretrain_steps)
    model = MsdmModel(vae=vae, unet=unet, textenc=enc, schedule=build_schedule(cfg),
                      image_size=cfg.dataset_image_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "base.ckpt", model)
    write_loss_csv(losses, out / "base_loss.csv")
    return model, manifest


def freeze_model(model: MsdmModel) -> None:
    for p in model.vae.params.values():
        p.requires_grad = False
    for p in model.unet.params.values():
        p.requires_grad = False
    model.textenc.mix.requires_grad = False


def lora_finetune(model: MsdmModel, target_manifest: DatasetManifest,
                  cfg: ExperimentConfig, run_seed: int,
                  strict_rank: bool = True) -> dict[str, lora_mod.LoraAdapter]:
    """Attach adapters to the frozen backbone and train them on the target
    domain; base weights are untouched by construction and verified by digest
    in the caller."""
    freeze_model(model)
    adapters = lora_mod.attach(model.unet.params, model.unet.attention_targets(),
                               rank=cfg.lora_rank, alpha=cfg.lora_alpha,
                               seed=run_seed, strict_rank=strict_rank)
    run_cfg_seed = derive_seed(run_seed, "lora-finetune")
    sub_cfg = _with_seed(cfg, run_cfg_seed)
    train_unet_on(target_manifest, model.vae, sub_cfg, width=model.unet.width,
                  seed_label="lora", adapters=adapters, unet=model.unet,
                  textenc=model.textenc, steps=cfg.lora_steps)
    return adapters


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    from dataclasses import replace
    return replace(cfg, seed=seed)


def _fid_for_generation(model: MsdmModel, manifest: DatasetManifest,
                        cfg: ExperimentConfig, seed: int,
                        adapters: dict | None = None, eval_vae=None) -> float:
    prompts = eval_prompt_records(manifest, cfg, include_rephrased=False)
    gen = generate_set(model, prompts, cfg.sample_images_per_prompt, seed,
                       adapters=adapters,
                       guidance=GuidanceConfig(scale=cfg.sample_guidance_scale,
                                               drop_probability=cfg.sample_drop_probability),
                       schedule=build_schedule(cfg))
    report = evaluate(manifest, gen, cfg, vae=eval_vae if eval_vae is not None else model.vae)
    return report.fbd


def pretrain_then_lora(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                       base: MsdmModel | None = None,
                       target_manifest: DatasetManifest | None = None,
                       eval_vae=None) -> RunResult:
    """Generic-domain pretrain, zero-shot eval, run_count LoRA fine-tunes.

    eval_vae selects the feature space for the vae-encoder embedder; passing a
    target-domain autoencoder keeps the measurement independent of the
    backbone under test."""
    t0 = time.time()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if base is None:
        base, _ = pretrain_backbone(cfg, out)
    if target_manifest is None:
        target_manifest = prepare_dataset(cfg)
    freeze_model(base)
    digest_before = base.base_digest()
    zero_shot = _fid_for_generation(base, target_manifest, cfg,
                                    derive_seed(cfg.seed, "zero-shot-gen"),
                                    eval_vae=eval_vae)
    per_run = []
    improved = 0
    for r in range(cfg.run_count):
        run_seed = derive_seed(cfg.seed, "lora-run", r)
        adapters = lora_finetune(base, target_manifest, cfg, run_seed)
        fid_r = _fid_for_generation(base, target_manifest, cfg,
                                    derive_seed(run_seed, "gen"), adapters=adapters,
                                    eval_vae=eval_vae)
        per_run.append(fid_r)
        improved += int(fid_r < zero_shot)
        lora_mod.save_adapters(out / f"adapters_run{r}.ckpt", adapters)
    if base.base_digest() != digest_before:
        raise ContractError("frozen base weights changed during fine-tuning")
    mean, std = M.aggregate_runs(per_run)
    result = RunResult(config_digest=config_digest(cfg), per_run_fids=per_run,
                       wall_clock=time.time() - t0,
                       checkpoints=[str(out / "base.ckpt")],
                       extra={"zero_shot_fid": zero_shot, "fid_mean": mean,
                              "fid_std": std, "improved_runs": improved,
                              "rank": cfg.lora_rank})
    result.to_json(out / "lora_result.json")
    return result


DEFAULT_SWEEP_RANKS = (4, 8, 16, 32, 64, 128, 256)


def rank_sweep(cfg: ExperimentConfig, ranks=DEFAULT_SWEEP_RANKS,
               out_path: str | Path | None = None,
               base: MsdmModel | None = None,
               target_manifest: DatasetManifest | None = None) -> list[dict]:
    """run_count fine-tunes per rank; emits rank/params/fid_mean/fid_std rows.

    Ranks above the toy backbone's dimensions attach in non-strict mode so
    the parameter column stays exactly linear across the reference grid."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if base is None:
        base, _ = pretrain_backbone(cfg, out)
    if target_manifest is None:
        target_manifest = prepare_dataset(cfg)
    rows = []
    for rank in ranks:
        sub = _with_rank(cfg, rank)
        fids = []
        params = None
        for r in range(cfg.run_count):
            run_seed = derive_seed(cfg.seed, "sweep", rank, r)
            adapters = lora_finetune(base, target_manifest, sub, run_seed,
                                     strict_rank=False)
            params = lora_mod.trainable_param_count(adapters)
            fids.append(_fid_for_generation(base, target_manifest, sub,
                                            derive_seed(run_seed, "gen"),
                                            adapters=adapters))
        if params is None:
            raise ContractError("rank sweep produced no runs")
        mean, std = M.aggregate_runs(fids)
        rows.append({"rank": rank, "params": params,
                     "fid_mean": mean, "fid_std": std})
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rank", "params", "fid_mean", "fid_std"])
            for row in rows:
                w.writerow([row["rank"], row["params"],
                            f"{row['fid_mean']:.4f}", f"{row['fid_std']:.4f}"])
    return rows


def _with_rank(cfg: ExperimentConfig, rank: int) -> ExperimentConfig:
    from dataclasses import replace
    return replace(cfg, lora_rank=rank)


# --------------------------------------------------- augmentation experiment


def augmentation_experiment(cfg: ExperimentConfig, out_path: str | Path) -> list[dict]:
    """Train once per paraphrase strategy and compare; 'add' is the documented
    default strategy. Evaluation always uses the original prompt table (the
    replace strategy has no originals left to evaluate on otherwise)."""
    from dataclasses import replace
    eval_manifest = prepare_dataset(replace(cfg, dataset_augment="none"))
    rows = []
    for strategy in ("add", "substitute", "replace"):
        sub = replace(cfg, dataset_augment=strategy,
                      out_dir=str(Path(cfg.out_dir) / f"aug-{strategy}"))
        manifest = prepare_dataset(sub)
        model, _ = train_msdm(sub, manifest=manifest)
        fid_val = _fid_for_generation(model, eval_manifest, sub,
                                      derive_seed(sub.seed, "aug-eval", strategy))
        rows.append({"strategy": strategy, "prompt_count": len(manifest.prompts),
                     "fid": fid_val, "is_default": strategy == "add"})
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy", "prompt_count", "fid", "is_default"])
        for row in rows:
            w.writerow([row["strategy"], row["prompt_count"],
                        f"{row['fid']:.4f}", str(row["is_default"]).lower()])
    return rows


# ----------------------------------------------------------------- correlation


def _average_ranks(values: list[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    sv = v[order]
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: list[float], y: list[float]) -> float:
    """Rank correlation with average-rank ties; zero-variance input gives 0."""
    if len(x) != len(y) or len(x) < 2:
        raise ContractError("spearman needs two equal-length lists, n >= 2")
    rx, ry = _average_ranks(x), _average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def correlate_ranks(export_rows: list[dict], metrics_by_model: dict[str, dict[str, float]],
                    out_path: str | Path | None = None) -> dict[str, dict]:
    """Group export rows by expert rank tier and correlate tier with each
    metric (Spearman); expected signs: better tiers pair with lower FBD."""
    metric_names = sorted({m for d in metrics_by_model.values() for m in d})
    pairs: dict[str, list[tuple[float, float]]] = {m: [] for m in metric_names}
    tiers_seen = set()
    for row in export_rows:
        model = row["model_id"]
        rank = int(row["rank"])
        tiers_seen.add(rank)
        if model not in metrics_by_model:
            continue
        for m in metric_names:
            if m in metrics_by_model[model]:
                pairs[m].append((rank, metrics_by_model[model][m]))
    out: dict[str, dict] = {}
    for m in metric_names:
        if not pairs[m]:
            continue
        ranks = [p[0] for p in pairs[m]]
        vals = [p[1] for p in pairs[m]]
        tier_means = {}
        for tier in sorted(tiers_seen):
            tv = [v for r, v in pairs[m] if r == tier]
            tier_means[tier] = float(np.mean(tv)) if tv else float("nan")
        out[m] = {"spearman": spearman(ranks, vals), "tier_means": tier_means}
    if out_path is not None:
        tiers = sorted(tiers_seen)
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "spearman"] + [f"tier{t}_mean" for t in tiers])
            for m, d in out.items():
                w.writerow([m, f"{d['spearman']:.6f}"]
                           + [f"{d['tier_means'][t]:.6f}" for t in tiers])
    return out
