#pragma once

#include <array>
#include <map>
#include <set>
#include <span>
#include <string_view>
#include <vector>

#include "xmodal/autodiff.hpp"
#include "xmodal/model.hpp"
#include "xmodal/projection.hpp"

namespace xmodal {

enum class LossTerm { Ls, Lc, Lkl, Lce, Ldi, Ltr };
inline constexpr std::array<LossTerm, 6> kAllLosses = {LossTerm::Ls,  LossTerm::Lc,  LossTerm::Lkl,
                                                        LossTerm::Lce, LossTerm::Ldi, LossTerm::Ltr};
std::string_view loss_name(LossTerm t);

/// How entropy and modality classification are combined.
///  Unified: one discriminator D; L_s reaches only the generator, L_c only D.
///  Separate: D predicts uncertainty for L_s, a distinct classifier C learns
///  L_c while the generator receives L_c's gradient through a reversal.
enum class Paradigm { Unified, Separate };
std::string_view paradigm_name(Paradigm p);
Paradigm parse_paradigm(std::string_view s);

/// Modality label convention: column 0 visual, column 1 textual.
inline constexpr std::size_t kImageModality = 0;
inline constexpr std::size_t kTextModality = 1;

/// Guard used inside log() for the entropy and modality terms: it only turns
/// log(0) into a finite number and leaves every representable p > 1e-290 exact.
inline constexpr double kLogFloor = 1e-300;

/// Negative Shannon entropy of the discriminator rows, averaged over the
/// batch and summed over both modalities. Lies in [-2 ln 2, 0] for two outputs.
ad::Var entropy_loss(ad::Var p_image, ad::Var p_text);

/// -(1/N) sum_j [log P_i(j, 0) + log P_t(j, 1)].
ad::Var modality_classification_loss(ad::Var p_image, ad::Var p_text);

/// KL of the row-softmaxed similarity matrices against the supervisory matrix,
/// both directions, averaged by 1/N.
ad::Var kl_projection_loss(const SimilarityMatrices& a, const Tensor2& supervisory, double eps);

/// Norm-softmax cross entropy on the paired projections, both directions.
ad::Var label_ce_loss(const PairedProjections& proj, std::span<const Label> labels,
                      const LabelClassifier& classifier, const Binding& params);

/// Temperature-scaled symmetric KL between the label distributions of the two
/// projection directions, multiplied by tau^2 / N.
ad::Var imbalance_kl_loss(const PairedProjections& proj, const LabelClassifier& classifier,
                          const Binding& params, double tau, double eps);

/// The same symmetric KL with no temperature at all; reference for tau = 1.
ad::Var symmetric_kl_loss(const PairedProjections& proj, const LabelClassifier& classifier,
                          const Binding& params, double eps);

/// Anchor with its hardest positive (lowest similarity among same-label
/// candidates) and hardest negative (highest similarity among the rest).
struct Triplet {
    std::size_t anchor;
    std::size_t positive;
    std::size_t negative;
};

/// Hard mining over a similarity matrix (rows anchors, columns candidates).
/// With `exclude_self`, candidate j is never a positive for anchor j. Anchors
/// without a positive or a negative are skipped. Ties go to the lower index.
std::vector<Triplet> mine_hardest(const Tensor2& similarity, std::span<const Label> anchor_labels,
                                  std::span<const Label> candidate_labels, bool exclude_self);

struct TripletWeights {
    double inter = 1.0;
    double intra = 1.0;
};

/// Bi-directional inter- and intra-modality hinge loss on cosine similarities.
ad::Var triplet_loss(const EmbeddingPair& e, std::span<const Label> labels, double margin,
                     TripletWeights weights = {});

/// Scalar loss values of one batch plus the parameter groups each term updates.
struct LossBundle {
    std::map<LossTerm, double> values;
    std::map<LossTerm, std::set<Group>> routing;

    double get(LossTerm t) const;
};

/// Which groups receive gradient from each loss term under `p`.
std::map<LossTerm, std::set<Group>> loss_routing(Paradigm p);

}  // namespace xmodal
