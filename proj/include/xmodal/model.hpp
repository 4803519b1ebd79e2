#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "xmodal/autodiff.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

/// Trainable parameter groups. C exists only for the separate paradigm, where
/// the modality classifier is a head distinct from the entropy predictor D.
enum class Group { E1, E2, D, P, C };

inline constexpr Group kAllGroups[] = {Group::E1, Group::E2, Group::D, Group::P, Group::C};

std::string_view group_name(Group g);
Group parse_group(std::string_view name);

struct NamedLeaf {
    std::string name;
    Tensor2 value;

    friend bool operator==(const NamedLeaf&, const NamedLeaf&) = default;
};

/// Owns every trainable tensor, keyed by group then leaf name. A leaf lives in
/// exactly one group, so the groups are disjoint by construction.
class ParameterStore {
public:
    void add(Group g, std::string name, Tensor2 value);
    Tensor2& at(Group g, std::string_view name);
    const Tensor2& at(Group g, std::string_view name) const;

    bool has(Group g) const { return groups_.contains(g); }
    std::vector<NamedLeaf>& group(Group g);
    const std::vector<NamedLeaf>& group(Group g) const;
    std::vector<Group> groups() const;
    std::size_t parameter_count() const;

    friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

private:
    std::map<Group, std::vector<NamedLeaf>> groups_;
};

/// Parameters of a store placed on a tape as leaves. Groups listed as
/// trainable become requires_grad leaves; the rest are constants.
class Binding {
public:
    Binding(ad::Tape& tape, const ParameterStore& store, std::initializer_list<Group> trainable);
    Binding(ad::Tape& tape, const ParameterStore& store, const std::vector<Group>& trainable);

    ad::Tape& tape() const { return *tape_; }
    ad::Var var(Group g, std::string_view name) const;
    const std::vector<ad::Var>& vars(Group g) const;
    /// Gradients of group `g` after backward, aligned with store.group(g).
    std::vector<Tensor2> grads(Group g) const;

private:
    ad::Tape* tape_;
    const ParameterStore* store_;
    std::map<Group, std::vector<ad::Var>> vars_;
};

/// Stack of affine layers with ReLU between them (none after the last).
/// Leaves are "layer<i>.weight" (in x out) and "layer<i>.bias" (1 x out).
class MlpHead {
public:
    MlpHead() = default;
    /// widths = {input, hidden..., output}; at least two entries.
    MlpHead(Group group, std::vector<std::size_t> widths);

    Group group() const { return group_; }
    std::size_t input_dim() const { return widths_.front(); }
    std::size_t output_dim() const { return widths_.back(); }
    std::size_t layers() const { return widths_.size() - 1; }
    const std::vector<std::size_t>& widths() const { return widths_; }

    /// Uniform in +-sqrt(6 / (fan_in + fan_out)), zero bias.
    void initialize(ParameterStore& store, std::mt19937_64& rng) const;
    /// Identity weights (square layers only) and zero bias; with one layer the head is Z = X.
    void initialize_identity(ParameterStore& store) const;

    /// With `frozen`, the parameters contribute to the value but receive no gradient.
    ad::Var forward(const Binding& params, ad::Var x, bool frozen = false) const;

private:
    Group group_ = Group::E1;
    std::vector<std::size_t> widths_;
};

/// Two-output modality classifier; column 0 is the visual modality, column 1 textual.
ad::Var discriminate(const MlpHead& head, const Binding& params, ad::Var z, bool frozen = false);

/// Norm-softmax label classifier: W is d x C, no bias, unit-norm columns.
class LabelClassifier {
public:
    LabelClassifier() = default;
    LabelClassifier(std::size_t dim, std::size_t num_labels) : dim_(dim), labels_(num_labels) {}

    std::size_t dim() const { return dim_; }
    std::size_t num_labels() const { return labels_; }

    void initialize(ParameterStore& store, std::mt19937_64& rng) const;
    /// Logits z W for rows of z.
    ad::Var logits(const Binding& params, ad::Var z) const;
    /// softmax(z W / tau) per row.
    ad::Var classify(const Binding& params, ad::Var z, double tau) const;

    /// Projects every column of W back onto the unit sphere.
    static void renormalize(Tensor2& weight);
    void renormalize(ParameterStore& store) const;

    static constexpr std::string_view kWeight = "weight";

private:
    std::size_t dim_ = 0;
    std::size_t labels_ = 0;
};

struct ModelConfig {
    std::size_t image_dim = 0;
    std::size_t text_dim = 0;
    std::size_t embed_dim = 512;     ///< shared-space dimension d
    std::size_t head_layers = 2;     ///< affine layers per embedding head
    std::size_t head_hidden = 0;     ///< 0 means d
    std::size_t disc_layers = 2;     ///< affine layers in D and C
    std::size_t disc_hidden = 0;     ///< 0 means d / 2
    std::size_t num_labels = 0;
    /// Start with identity embedding heads (requires head_layers == 1 and
    /// square dims). Used for fixed-pipeline checks.
    bool identity_heads = false;
};

/// The generator heads E1/E2, discriminator D, modality classifier C and
/// label classifier P together with their parameters.
class Model {
public:
    explicit Model(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return store_; }
    const ParameterStore& params() const { return store_; }

    const MlpHead& image_head() const { return image_head_; }
    const MlpHead& text_head() const { return text_head_; }
    const MlpHead& discriminator() const { return disc_; }
    const MlpHead& modality_classifier() const { return classifier_; }
    const LabelClassifier& label_classifier() const { return labels_; }

    /// Z = E(X) on the tape; X columns must match the head input.
    ad::Var embed_image(const Binding& params, ad::Var x) const;
    ad::Var embed_text(const Binding& params, ad::Var x) const;

    /// Plain forward passes for evaluation (no gradients kept).
    Tensor2 embed_image(const Tensor2& x) const;
    Tensor2 embed_text(const Tensor2& x) const;
    Tensor2 discriminator_probs(const Tensor2& z) const;
    Tensor2 label_logits(const Tensor2& z) const;

private:
    ModelConfig cfg_;
    MlpHead image_head_;
    MlpHead text_head_;
    MlpHead disc_;
    MlpHead classifier_;
    LabelClassifier labels_;
    ParameterStore store_;
};

ad::Var embed(const MlpHead& head, const Binding& params, ad::Var x);

}  // namespace xmodal
