#pragma once

#include <span>

#include "mshift/dataset.hpp"
#include "mshift/distance.hpp"
#include "mshift/model.hpp"
#include "mshift/netcore.hpp"

namespace mshift {

/// Loss value plus gradients for exactly the tensors the loss trains.
struct LossResult {
  double value = 0.0;
  GradMap grads;
  bool skipped = false;  // nothing contributed (e.g. no class met min_class_count)
};

/// Dropout mode for a loss evaluation. Each batch draws its mask from a
/// stream keyed by the batch's domain, so a batch encoded twice within one
/// step sees the same mask.
EncodeMode stream_mode(EncodeMode mode, int domain);

/// Supervised cross-entropy over all sources, each routed through its own
/// branch; batches[i] feeds branch i (empty batches are skipped). Trains
/// encoder, disentanglers, adaptors and classifiers.
LossResult loss_ce(const DaNet& net, std::span<const Batch> batches, EncodeMode mode = {});

/// Cross-entropy of source i through branch i, gradients for D_i only.
LossResult loss_fcd_max(const DaNet& net, int i, const Batch& batch, EncodeMode mode = {});

/// Alpha-weighted squared distance of the cross-branch predictions of
/// source i's representation from the uniform distribution, normalised by
/// M * |batch|. `alpha` holds alpha_{i,m} for m != i in increasing m.
/// Gradients for D_i only.
LossResult loss_fcd_min(const DaNet& net, int i, const Batch& batch, std::span<const double> alpha,
                        EncodeMode mode = {});

/// Sum over branches of loss_fcd_max + loss_fcd_min; the diagonal of
/// `alpha` is ignored. Gradients for all disentanglers and nothing else.
LossResult loss_fcd_total(const DaNet& net, std::span<const Batch> batches, const Tensor2& alpha,
                          EncodeMode mode = {});

struct AlignOptions {
  double tau = 0.5;
  int min_class_count = 2;
  double epsilon = 1e-8;
  KernelConfig kernel = KernelConfig::median();
};

/// Class-aware distribution contrast on branch i's adaptor outputs. For each
/// class present with at least min_class_count samples on both sides:
///   -log( 2 exp(-d(P^k,Q^k)/tau) / (sum_o exp(-d(P^k,P^o)/tau)
///                                  + sum_o exp(-d(Q^k,Q^o)/tau) + eps) )
/// with d the squared MMD and negatives the other usable classes on each
/// side. Target labels are pseudo-labels (constants); -1 marks an unused
/// target sample. Gradients for the encoder, adaptor i and classifier i.
LossResult loss_ca(const DaNet& net, int i, const Batch& source, const Batch& target,
                   const AlignOptions& options, EncodeMode mode = {});

/// Sum of loss_ca over all branches.
LossResult loss_cpa(const DaNet& net, std::span<const Batch> sources, const Batch& target,
                    const AlignOptions& options, EncodeMode mode = {});

/// Class-agnostic variant: sum over branches of the squared MMD between
/// source i and target adaptor outputs. Gradients for encoder and adaptors.
LossResult loss_cpa_language(const DaNet& net, std::span<const Batch> sources,
                             const Batch& target, const KernelConfig& kernel = KernelConfig::median(),
                             EncodeMode mode = {});

/// Sample-level supervised contrastive loss on L2-normalised adaptor
/// outputs of the joint source+target batch. Per anchor with at least one
/// positive: -log( sum_pos exp(s/tau) / sum_{b != a} exp(s/tau) ), averaged
/// over those anchors. Gradients for the encoder, adaptor i and classifier i.
LossResult loss_scl(const DaNet& net, int i, const Batch& source, const Batch& target, double tau,
                    EncodeMode mode = {});

}  // namespace mshift
