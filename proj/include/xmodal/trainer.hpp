#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "xmodal/checkpoint.hpp"
#include "xmodal/data.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/model.hpp"

namespace xmodal {

/// Ablation presets; each adds terms to the previous one.
///   baseline1: L_ce + L_tr
///   baseline2: + L_di
///   baseline3: + L_kl
///   full:      + L_s + L_c
enum class Preset { Baseline1, Baseline2, Baseline3, Full };
std::string_view preset_name(Preset p);
Preset parse_preset(std::string_view s);
std::set<LossTerm> active_losses(Preset p);

enum class OptimizerKind { Sgd, Adam };
std::string_view optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);

struct TrainConfig {
    ModelConfig model;
    std::size_t batch_size = 64;
    double margin = 0.5;
    double tau = 4.0;
    double eps = 1e-8;
    TripletWeights triplet;
    /// Replace L_di by the plain symmetric KL (no temperature, no tau^2).
    bool plain_di = false;
    std::size_t k_steps = 5;
    /// Separate paradigm: the generator receives -reversal_weight times the
    /// gradient of the modality classifier's loss.
    double reversal_weight = 1.0;
    double lr1 = 2e-5;
    double lr2 = 2e-4;
    /// Rate for D and C; 0 means lr2.
    double lr_disc = 0.0;
    double lr_decay = 0.9;
    std::size_t lr_decay_every = 2;
    /// Update the image head with lr1 (as if it sat on a fine-tuned backbone).
    bool image_head_uses_lr1 = false;
    OptimizerKind optimizer = OptimizerKind::Sgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t epochs = 10;
    Paradigm paradigm = Paradigm::Unified;
    Preset preset = Preset::Full;
    std::uint64_t seed = 17;
    /// Before every update, back-propagate each term on its own and assert
    /// that groups outside its routing receive exactly zero gradient.
    bool verify_routing = false;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
};

/// Per-group gradient step. SGD: theta -= lr g. Adam keeps first and second
/// moments per leaf plus a step count per group.
class Optimizer {
public:
    Optimizer() = default;
    Optimizer(OptimizerKind kind, double beta1, double beta2, double eps);

    void step(ParameterStore& store, Group g, const std::vector<Tensor2>& grads, double lr);

    /// Sections "<group>.m", "<group>.v", "<group>.t" (Adam only).
    std::map<std::string, std::vector<NamedLeaf>> state(const ParameterStore& store) const;
    void load_state(const std::map<std::string, std::vector<NamedLeaf>>& state, const ParameterStore& store);

private:
    OptimizerKind kind_ = OptimizerKind::Sgd;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::map<Group, std::vector<Tensor2>> m_, v_;
    std::map<Group, std::uint64_t> t_;
};

/// The loss graph of one batch. Terms not requested are absent.
struct LossGraph {
    ad::Var z_image, z_text;
    ad::Var p_image, p_text;  ///< entropy-predictor outputs, D frozen
    std::map<LossTerm, ad::Var> terms;
};

/// Builds the requested terms on params.tape() with the routing of the
/// generator update: L_s through a frozen D; L_c (value only for the
/// generator) from the modality classifier of `paradigm` on detached Z.
LossGraph build_losses(const Model& model, const Binding& params, const FeatureBatch& batch,
                       const TrainConfig& cfg, const std::set<LossTerm>& terms, Paradigm paradigm);

struct EpochReport {
    std::size_t epoch = 0;
    std::map<LossTerm, double> losses;  ///< batch means; inactive terms are 0
    double disc_loss = 0.0;             ///< mean L_c over discriminator steps
    double disc_accuracy = 0.0;         ///< modality accuracy of the modality classifier
    double lr1 = 0.0;
    double lr2 = 0.0;
    std::size_t generator_steps = 0;
    std::size_t discriminator_steps = 0;
    double seconds = 0.0;
    Paradigm paradigm = Paradigm::Unified;
    Preset preset = Preset::Full;

    /// Everything except wall time.
    bool same_values(const EpochReport& other) const;
};

class Trainer {
public:
    Trainer(TrainConfig cfg, std::size_t image_dim, std::size_t text_dim, std::size_t num_labels);

    const TrainConfig& config() const { return cfg_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }

    /// Fixes D (and C); updates E1, E2, P on the active generator terms.
    LossBundle generator_step(const FeatureBatch& batch);
    /// Unified: updates D on L_c. Separate: D and C learn L_c while E1/E2
    /// receive the reversed gradient of C's loss. Returns C's (or D's) L_c.
    double discriminator_step(const FeatureBatch& batch);
    /// One pass over the train split: every batch takes a generator step and
    /// every k-th generator step is followed by a discriminator step.
    EpochReport train_epoch(const Dataset& data);

    /// Values of every term at the current parameters, no update.
    LossBundle forward_losses(const FeatureBatch& batch) const;

    double lr_e1() const;
    double lr2() const { return cfg_.lr2; }
    double lr_disc() const { return cfg_.lr_disc > 0.0 ? cfg_.lr_disc : cfg_.lr2; }
    std::size_t epoch() const { return epoch_; }
    std::size_t generator_steps() const { return gen_steps_; }
    std::size_t discriminator_steps() const { return disc_steps_; }
    double last_disc_accuracy() const { return last_accuracy_; }

    Checkpoint checkpoint() const;
    /// Restores parameters, optimizer state and counters.
    void restore(const Checkpoint& ckpt);

private:
    bool adversarial() const;
    void check_finite(const std::map<LossTerm, ad::Var>& terms) const;
    void check_routing(ad::Tape& tape, const Binding& params, ad::Var loss, LossTerm term) const;

    TrainConfig cfg_;
    Model model_;
    Optimizer opt_;
    std::set<LossTerm> active_;
    std::size_t epoch_ = 0;
    std::size_t gen_steps_ = 0;
    std::size_t disc_steps_ = 0;
    std::size_t epoch_step_ = 0;
    double last_accuracy_ = 0.0;
};

/// Modality accuracy of two-column probabilities: image rows should favour
/// column 0 and text rows column 1.
double modality_accuracy(const Tensor2& p_image, const Tensor2& p_text);

}  // namespace xmodal
