#include "xmodal/model.hpp"

#include <algorithm>
#include <cmath>

#include "xmodal/errors.hpp"

namespace xmodal {

std::string_view group_name(Group g) {
    switch (g) {
        case Group::E1: return "E1";
        case Group::E2: return "E2";
        case Group::D: return "D";
        case Group::P: return "P";
        case Group::C: return "C";
    }
    return "?";
}

Group parse_group(std::string_view name) {
    for (Group g : kAllGroups)
        if (group_name(g) == name) return g;
    throw ContractError("unknown parameter group '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// ParameterStore

void ParameterStore::add(Group g, std::string name, Tensor2 value) {
    auto& leaves = groups_[g];
    for (const auto& leaf : leaves) {
        if (leaf.name == name) {
            throw ContractError("duplicate leaf " + std::string(group_name(g)) + "/" + name);
        }
    }
    leaves.push_back({std::move(name), std::move(value)});
}

Tensor2& ParameterStore::at(Group g, std::string_view name) {
    return const_cast<Tensor2&>(std::as_const(*this).at(g, name));
}

const Tensor2& ParameterStore::at(Group g, std::string_view name) const {
    for (const auto& leaf : group(g))
        if (leaf.name == name) return leaf.value;
    throw ContractError("no leaf " + std::string(group_name(g)) + "/" + std::string(name));
}

std::vector<NamedLeaf>& ParameterStore::group(Group g) {
    return const_cast<std::vector<NamedLeaf>&>(std::as_const(*this).group(g));
}

const std::vector<NamedLeaf>& ParameterStore::group(Group g) const {
    auto it = groups_.find(g);
    if (it == groups_.end()) throw ContractError("no parameter group " + std::string(group_name(g)));
    return it->second;
}

std::vector<Group> ParameterStore::groups() const {
    std::vector<Group> out;
    for (const auto& [g, _] : groups_) out.push_back(g);
    return out;
}

std::size_t ParameterStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, leaves] : groups_)
        for (const auto& leaf : leaves) n += leaf.value.size();
    return n;
}

// ---------------------------------------------------------------------------
// Binding

Binding::Binding(ad::Tape& tape, const ParameterStore& store, std::initializer_list<Group> trainable)
    : Binding(tape, store, std::vector<Group>(trainable)) {}

Binding::Binding(ad::Tape& tape, const ParameterStore& store, const std::vector<Group>& trainable)
    : tape_(&tape), store_(&store) {
    for (Group g : store.groups()) {
        const bool grad = std::find(trainable.begin(), trainable.end(), g) != trainable.end();
        auto& vars = vars_[g];
        for (const auto& leaf : store.group(g)) vars.push_back(tape.leaf(leaf.value, grad));
    }
}

ad::Var Binding::var(Group g, std::string_view name) const {
    const auto& leaves = store_->group(g);
    for (std::size_t i = 0; i < leaves.size(); ++i)
        if (leaves[i].name == name) return vars_.at(g)[i];
    throw ContractError("no leaf " + std::string(group_name(g)) + "/" + std::string(name));
}

const std::vector<ad::Var>& Binding::vars(Group g) const {
    auto it = vars_.find(g);
    if (it == vars_.end()) throw ContractError("group " + std::string(group_name(g)) + " not bound");
    return it->second;
}

std::vector<Tensor2> Binding::grads(Group g) const {
    std::vector<Tensor2> out;
    for (const auto& v : vars(g)) out.push_back(v.grad());
    return out;
}

// ---------------------------------------------------------------------------
// MlpHead

namespace {

std::string weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

}  // namespace

MlpHead::MlpHead(Group group, std::vector<std::size_t> widths) : group_(group), widths_(std::move(widths)) {
    if (widths_.size() < 2) throw ConfigError("MlpHead needs at least input and output widths");
    for (std::size_t w : widths_)
        if (w == 0) throw ConfigError("MlpHead widths must be positive");
}

void MlpHead::initialize(ParameterStore& store, std::mt19937_64& rng) const {
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        const std::size_t fan_in = widths_[l], fan_out = widths_[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        Tensor2 w(fan_in, fan_out);
        for (auto& v : w.data()) v = dist(rng);
        store.add(group_, weight_name(l), std::move(w));
        store.add(group_, bias_name(l), Tensor2(1, fan_out));
    }
}

void MlpHead::initialize_identity(ParameterStore& store) const {
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        if (widths_[l] != widths_[l + 1]) throw ConfigError("identity head needs square layers");
        store.add(group_, weight_name(l), Tensor2::identity(widths_[l]));
        store.add(group_, bias_name(l), Tensor2(1, widths_[l + 1]));
    }
}

ad::Var MlpHead::forward(const Binding& params, ad::Var x, bool frozen) const {
    if (x.cols() != input_dim()) {
        throw DimensionError("head " + std::string(group_name(group_)) + ": input has " +
                             std::to_string(x.cols()) + " columns, expected " +
                             std::to_string(input_dim()));
    }
    ad::Var h = x;
    for (std::size_t l = 0; l < layers(); ++l) {
        ad::Var w = params.var(group_, weight_name(l));
        ad::Var b = params.var(group_, bias_name(l));
        if (frozen) {
            w = ad::grad_scale(w, 0.0);
            b = ad::grad_scale(b, 0.0);
        }
        h = ad::add(ad::matmul(h, w), b);
        if (l + 1 < layers()) h = ad::relu(h);
    }
    return h;
}

ad::Var embed(const MlpHead& head, const Binding& params, ad::Var x) { return head.forward(params, x); }

ad::Var discriminate(const MlpHead& head, const Binding& params, ad::Var z, bool frozen) {
    if (head.output_dim() != 2) throw ContractError("discriminator must have exactly two outputs");
    return ad::rowwise_softmax(head.forward(params, z, frozen));
}

// ---------------------------------------------------------------------------
// LabelClassifier

void LabelClassifier::initialize(ParameterStore& store, std::mt19937_64& rng) const {
    const double limit = std::sqrt(6.0 / static_cast<double>(dim_ + labels_));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor2 w(dim_, labels_);
    for (auto& v : w.data()) v = dist(rng);
    renormalize(w);
    store.add(Group::P, std::string(kWeight), std::move(w));
}

ad::Var LabelClassifier::logits(const Binding& params, ad::Var z) const {
    if (z.cols() != dim_) throw DimensionError("label classifier: feature width mismatch");
    return ad::matmul(z, params.var(Group::P, kWeight));
}

ad::Var LabelClassifier::classify(const Binding& params, ad::Var z, double tau) const {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    ad::Var l = logits(params, z);
    return ad::rowwise_softmax(tau == 1.0 ? l : ad::scalar_mul(l, 1.0 / tau));
}

void LabelClassifier::renormalize(Tensor2& weight) {
    for (std::size_t c = 0; c < weight.cols(); ++c) {
        double ss = 0.0;
        for (std::size_t r = 0; r < weight.rows(); ++r) ss += weight(r, c) * weight(r, c);
        const double n = std::sqrt(ss);
        if (!(n >= ad::kMinRowNorm)) {
            throw DegenerateError("label classifier column " + std::to_string(c) + " has zero norm");
        }
        for (std::size_t r = 0; r < weight.rows(); ++r) weight(r, c) /= n;
    }
}

void LabelClassifier::renormalize(ParameterStore& store) const { renormalize(store.at(Group::P, kWeight)); }

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    const std::size_t d = cfg.embed_dim;
    if (d == 0 || cfg.image_dim == 0 || cfg.text_dim == 0) throw ConfigError("model dimensions must be positive");
    if (cfg.num_labels == 0) throw ConfigError("model needs at least one label");
    if (cfg.head_layers == 0) throw ConfigError("embedding heads need at least one layer");
    const std::size_t hidden = cfg.head_hidden == 0 ? d : cfg.head_hidden;
    const std::size_t disc_hidden = cfg.disc_hidden == 0 ? std::max<std::size_t>(1, d / 2) : cfg.disc_hidden;

    auto head_widths = [&](std::size_t in) {
        std::vector<std::size_t> w{in};
        for (std::size_t l = 1; l < cfg.head_layers; ++l) w.push_back(hidden);
        w.push_back(d);
        return w;
    };
    image_head_ = MlpHead(Group::E1, head_widths(cfg.image_dim));
    text_head_ = MlpHead(Group::E2, head_widths(cfg.text_dim));
    if (cfg.disc_layers == 0) throw ConfigError("the discriminator needs at least one layer");
    std::vector<std::size_t> disc_widths{d};
    for (std::size_t l = 1; l < cfg.disc_layers; ++l) disc_widths.push_back(disc_hidden);
    disc_widths.push_back(2);
    disc_ = MlpHead(Group::D, disc_widths);
    classifier_ = MlpHead(Group::C, disc_widths);
    labels_ = LabelClassifier(d, cfg.num_labels);

    std::mt19937_64 rng(seed);
    if (cfg.identity_heads) {
        image_head_.initialize_identity(store_);
        text_head_.initialize_identity(store_);
    } else {
        image_head_.initialize(store_, rng);
        text_head_.initialize(store_, rng);
    }
    disc_.initialize(store_, rng);
    // C starts as a copy of D so both paradigms begin from identical forward values.
    for (const auto& leaf : store_.group(Group::D)) store_.add(Group::C, leaf.name, leaf.value);
    labels_.initialize(store_, rng);
}

ad::Var Model::embed_image(const Binding& params, ad::Var x) const { return image_head_.forward(params, x); }
ad::Var Model::embed_text(const Binding& params, ad::Var x) const { return text_head_.forward(params, x); }

Tensor2 Model::embed_image(const Tensor2& x) const {
    ad::Tape tape;
    Binding b(tape, store_, {});
    return image_head_.forward(b, tape.constant(x)).value();
}

Tensor2 Model::embed_text(const Tensor2& x) const {
    ad::Tape tape;
    Binding b(tape, store_, {});
    return text_head_.forward(b, tape.constant(x)).value();
}

Tensor2 Model::discriminator_probs(const Tensor2& z) const {
    ad::Tape tape;
    Binding b(tape, store_, {});
    return discriminate(disc_, b, tape.constant(z)).value();
}

Tensor2 Model::label_logits(const Tensor2& z) const {
    ad::Tape tape;
    Binding b(tape, store_, {});
    return labels_.logits(b, tape.constant(z)).value();
}

}  // namespace xmodal
