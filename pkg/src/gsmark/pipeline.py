"""End-to-end embedding pipeline.

Order of operations: prune invisible Gaussians, select and densify
carriers, build the frozen decoder, snapshot pre-watermark reference
renders, closed-form align carrier colors to the message margin, then
(optionally) run the decoupled finetuning loop to polish fidelity and
distortion robustness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gsmark import codec, finetune, pruning, sbag
from gsmark.align import AlignReport, align_carriers
from gsmark.codec import Decoder, Message
from gsmark.config import Config
from gsmark.experts import compute_features, evidence, knn
from gsmark.groupmask import GroupMask, build_masks, channel_weights
from gsmark.model import GaussianModel
from gsmark.render import render
from gsmark.sbag import CarrierPlan, proxy_scores


@dataclass
class EmbedResult:
    model: GaussianModel
    plan: CarrierPlan
    mask: GroupMask
    decoder: Decoder
    message: Message
    align_report: AlignReport
    manifest: finetune.RunManifest | None
    kept_indices: np.ndarray
    train_references: list
    eval_references: list


def split_cameras(cameras, cfg: Config):
    n = len(cameras)
    n_eval = max(1, int(round(cfg.eval.holdout_fraction * n)))
    return cameras[:n - n_eval], cameras[n - n_eval:]


def build_group_mask(model: GaussianModel, cfg: Config) -> GroupMask:
    """Recompute expert evidence on the (densified) model and collapse it
    into the channel-group routing mask."""
    nbrs = knn(model.positions, min(cfg.experts.k_neighbors,
                                    len(model) - 1))
    features = compute_features(model, nbrs, cfg.experts)
    ev = evidence(features, nbrs, cfg.experts)
    proxy = proxy_scores(ev, cfg.sbag.beta)
    weights = channel_weights(proxy, features)
    return build_masks(weights, model.roles, cfg.mask)


def embed(model: GaussianModel, cameras, message: Message | None = None,
          cfg: Config | None = None, threads: int = 1,
          callback=None) -> EmbedResult:
    """Watermark ``model`` in place of a copy and return all artifacts.

    ``cameras`` covers training and holdout views together; the trailing
    holdout fraction is excluded from selection, alignment, and
    finetuning and only used for fidelity reporting.  Set
    cfg.train.epochs = 0 to skip the finetuning polish.
    """
    cfg = cfg or Config()
    if message is None:
        message = Message.random(cfg.codec.message_bits,
                                 np.random.default_rng(cfg.codec.seed))
    if len(message) != cfg.codec.message_bits:
        raise codec.ConfigurationError(
            "message length does not match codec config")
    train_cams, eval_cams = split_cameras(cameras, cfg)

    pruned, kept = pruning.prune_by_contribution(
        model, cameras, cfg.eval.prune_threshold, threads=threads)
    work, plan = sbag.build_carrier_plan(pruned, train_cams,
                                         cfg.codec.message_bits,
                                         cfg.sbag, cfg.experts)
    decoder = codec.decoder_from_config(cfg.codec)

    train_refs = [render(work, cam, threads=threads).image
                  for cam in train_cams]
    eval_refs = [render(work, cam, threads=threads).image
                 for cam in eval_cams]

    report = align_carriers(work, train_cams, decoder, message, cfg.align)

    mask = build_group_mask(work, cfg)
    manifest = None
    if cfg.train.epochs > 0:
        manifest = finetune.train(work, train_cams, train_refs, decoder,
                                  message, mask, cfg,
                                  plan_digest=plan.digest(),
                                  threads=threads, callback=callback)

    return EmbedResult(model=work, plan=plan, mask=mask, decoder=decoder,
                       message=message, align_report=report,
                       manifest=manifest, kept_indices=kept,
                       train_references=train_refs,
                       eval_references=eval_refs)
