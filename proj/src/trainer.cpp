#include "xmodal/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "xmodal/errors.hpp"

namespace xmodal {

std::string_view preset_name(Preset p) {
    switch (p) {
        case Preset::Baseline1: return "baseline1";
        case Preset::Baseline2: return "baseline2";
        case Preset::Baseline3: return "baseline3";
        case Preset::Full: return "full";
    }
    return "?";
}

Preset parse_preset(std::string_view s) {
    for (Preset p : {Preset::Baseline1, Preset::Baseline2, Preset::Baseline3, Preset::Full}) {
        if (s == preset_name(p)) return p;
    }
    throw ConfigError("unknown preset '" + std::string(s) + "' (baseline1, baseline2, baseline3, full)");
}

std::set<LossTerm> active_losses(Preset p) {
    std::set<LossTerm> s{LossTerm::Lce, LossTerm::Ltr};
    if (p == Preset::Baseline1) return s;
    s.insert(LossTerm::Ldi);
    if (p == Preset::Baseline2) return s;
    s.insert(LossTerm::Lkl);
    if (p == Preset::Baseline3) return s;
    s.insert(LossTerm::Ls);
    s.insert(LossTerm::Lc);
    return s;
}

std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer '" + std::string(s) + "' (sgd, adam)");
}

void TrainConfig::validate() const {
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (!(margin > 0.0)) throw ConfigError("margin must be positive");
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (k_steps < 1) throw ConfigError("k must be at least 1");
    if (!(lr1 > 0.0) || !(lr2 > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(reversal_weight >= 0.0)) throw ConfigError("reversal weight must be nonnegative");
    if (lr_disc < 0.0) throw ConfigError("discriminator learning rate must be nonnegative");
    if (!(lr_decay > 0.0) || lr_decay > 1.0) throw ConfigError("lr decay must lie in (0, 1]");
    if (lr_decay_every < 1) throw ConfigError("lr decay interval must be at least 1 epoch");
    if (triplet.inter < 0.0 || triplet.intra < 0.0) throw ConfigError("triplet weights must be nonnegative");
    if (optimizer == OptimizerKind::Adam) {
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
            throw ConfigError("adam betas must lie in [0, 1)");
        }
        if (!(adam_eps > 0.0)) throw ConfigError("adam eps must be positive");
    }
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(OptimizerKind kind, double beta1, double beta2, double eps)
    : kind_(kind), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Optimizer::step(ParameterStore& store, Group g, const std::vector<Tensor2>& grads, double lr) {
    auto& leaves = store.group(g);
    if (grads.size() != leaves.size()) throw ContractError("optimizer: gradient count differs from the group");
    if (kind_ == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            Tensor2& w = leaves[i].value;
            const Tensor2& gr = grads[i];
            for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * gr[j];
        }
        return;
    }
    auto& m = m_[g];
    auto& v = v_[g];
    if (m.empty()) {
        for (const auto& leaf : leaves) {
            m.emplace_back(leaf.value.rows(), leaf.value.cols());
            v.emplace_back(leaf.value.rows(), leaf.value.cols());
        }
    }
    const std::uint64_t t = ++t_[g];
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        Tensor2& w = leaves[i].value;
        const Tensor2& gr = grads[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[i][j] = beta1_ * m[i][j] + (1.0 - beta1_) * gr[j];
            v[i][j] = beta2_ * v[i][j] + (1.0 - beta2_) * gr[j] * gr[j];
            w[j] -= lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps_);
        }
    }
}

std::map<std::string, std::vector<NamedLeaf>> Optimizer::state(const ParameterStore& store) const {
    std::map<std::string, std::vector<NamedLeaf>> out;
    if (kind_ == OptimizerKind::Sgd) return out;
    for (const auto& [g, m] : m_) {
        const auto& leaves = store.group(g);
        const std::string base(group_name(g));
        auto& ms = out[base + ".m"];
        auto& vs = out[base + ".v"];
        for (std::size_t i = 0; i < m.size(); ++i) {
            ms.push_back({leaves[i].name, m[i]});
            vs.push_back({leaves[i].name, v_.at(g)[i]});
        }
        out[base + ".t"].push_back({"count", Tensor2(1, 1, static_cast<double>(t_.at(g)))});
    }
    return out;
}

void Optimizer::load_state(const std::map<std::string, std::vector<NamedLeaf>>& state, const ParameterStore& store) {
    m_.clear();
    v_.clear();
    t_.clear();
    if (kind_ == OptimizerKind::Sgd) {
        if (!state.empty()) throw CheckpointError("checkpoint carries adaptive optimizer state but the optimizer is sgd");
        return;
    }
    for (Group g : store.groups()) {
        const std::string base(group_name(g));
        const auto mi = state.find(base + ".m");
        if (mi == state.end()) continue;
        const auto vi = state.find(base + ".v");
        const auto ti = state.find(base + ".t");
        if (vi == state.end() || ti == state.end() || ti->second.size() != 1) {
            throw CheckpointError("incomplete optimizer state for group " + base);
        }
        const auto& leaves = store.group(g);
        if (mi->second.size() != leaves.size() || vi->second.size() != leaves.size()) {
            throw CheckpointError("optimizer state for group " + base + " does not match the model");
        }
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            if (!mi->second[i].value.same_shape(leaves[i].value) || !vi->second[i].value.same_shape(leaves[i].value)) {
                throw CheckpointError("optimizer state shape mismatch at " + base + "." + leaves[i].name);
            }
            m_[g].push_back(mi->second[i].value);
            v_[g].push_back(vi->second[i].value);
        }
        t_[g] = static_cast<std::uint64_t>(ti->second[0].value[0]);
    }
}

// ---------------------------------------------------------------------------
// Loss graph

namespace {

const MlpHead& modality_head(const Model& model, Paradigm p) {
    return p == Paradigm::Unified ? model.discriminator() : model.modality_classifier();
}

bool finite(const Tensor2& t) { return t.all_finite(); }

}  // namespace

LossGraph build_losses(const Model& model, const Binding& params, const FeatureBatch& batch,
                       const TrainConfig& cfg, const std::set<LossTerm>& terms, Paradigm paradigm) {
    ad::Tape& tape = params.tape();
    LossGraph g;
    g.z_image = model.embed_image(params, tape.constant(batch.image));
    g.z_text = model.embed_text(params, tape.constant(batch.text));
    if (!finite(g.z_image.value()) || !finite(g.z_text.value())) return g;
    const EmbeddingPair e(g.z_image, g.z_text);

    if (terms.contains(LossTerm::Ls)) {
        g.p_image = discriminate(model.discriminator(), params, g.z_image, /*frozen=*/true);
        g.p_text = discriminate(model.discriminator(), params, g.z_text, /*frozen=*/true);
        g.terms[LossTerm::Ls] = entropy_loss(g.p_image, g.p_text);
    }
    if (terms.contains(LossTerm::Lc)) {
        const MlpHead& head = modality_head(model, paradigm);
        ad::Var pi = discriminate(head, params, ad::grad_scale(g.z_image, 0.0));
        ad::Var pt = discriminate(head, params, ad::grad_scale(g.z_text, 0.0));
        g.terms[LossTerm::Lc] = modality_classification_loss(pi, pt);
    }
    if (terms.contains(LossTerm::Lkl)) {
        g.terms[LossTerm::Lkl] =
            kl_projection_loss(similarity_matrices(e), supervisory_matrix(batch.labels), cfg.eps);
    }
    if (terms.contains(LossTerm::Lce) || terms.contains(LossTerm::Ldi)) {
        const PairedProjections proj = paired_projections(e);
        const LabelClassifier& p = model.label_classifier();
        if (terms.contains(LossTerm::Lce)) g.terms[LossTerm::Lce] = label_ce_loss(proj, batch.labels, p, params);
        if (terms.contains(LossTerm::Ldi)) {
            g.terms[LossTerm::Ldi] = cfg.plain_di ? symmetric_kl_loss(proj, p, params, cfg.eps)
                                                  : imbalance_kl_loss(proj, p, params, cfg.tau, cfg.eps);
        }
    }
    if (terms.contains(LossTerm::Ltr)) {
        g.terms[LossTerm::Ltr] = triplet_loss(e, batch.labels, cfg.margin, cfg.triplet);
    }
    return g;
}

double modality_accuracy(const Tensor2& p_image, const Tensor2& p_text) {
    const std::size_t n = p_image.rows() + p_text.rows();
    if (n == 0) return 0.0;
    std::size_t hit = 0;
    for (std::size_t r = 0; r < p_image.rows(); ++r) hit += p_image(r, 0) > p_image(r, 1) ? 1 : 0;
    for (std::size_t r = 0; r < p_text.rows(); ++r) hit += p_text(r, 1) > p_text(r, 0) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(n);
}

bool EpochReport::same_values(const EpochReport& o) const {
    return epoch == o.epoch && losses == o.losses && disc_loss == o.disc_loss && disc_accuracy == o.disc_accuracy &&
           lr1 == o.lr1 && lr2 == o.lr2 && generator_steps == o.generator_steps &&
           discriminator_steps == o.discriminator_steps && paradigm == o.paradigm && preset == o.preset;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

ModelConfig with_dims(ModelConfig m, std::size_t image_dim, std::size_t text_dim, std::size_t num_labels) {
    m.image_dim = image_dim;
    m.text_dim = text_dim;
    m.num_labels = num_labels;
    return m;
}

std::vector<Group> trainable_all(const ParameterStore& store) { return store.groups(); }

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::size_t image_dim, std::size_t text_dim, std::size_t num_labels)
    : cfg_((cfg.validate(), std::move(cfg))),
      model_(with_dims(cfg_.model, image_dim, text_dim, num_labels), cfg_.seed),
      opt_(cfg_.optimizer, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps),
      active_(active_losses(cfg_.preset)) {
    cfg_.model = model_.config();
}

bool Trainer::adversarial() const { return active_.contains(LossTerm::Ls) || active_.contains(LossTerm::Lc); }

double Trainer::lr_e1() const {
    if (!cfg_.image_head_uses_lr1) return cfg_.lr2;
    const auto decays = static_cast<double>(epoch_ / cfg_.lr_decay_every);
    return cfg_.lr1 * std::pow(cfg_.lr_decay, decays);
}

void Trainer::check_finite(const std::map<LossTerm, ad::Var>& terms) const {
    for (const auto& [t, v] : terms) {
        if (!std::isfinite(v.item())) {
            std::ostringstream msg;
            msg << "loss " << loss_name(t) << " is " << v.item() << " at epoch " << epoch_ << ", step " << epoch_step_;
            throw DivergenceError(std::string(loss_name(t)), static_cast<long>(epoch_),
                                  static_cast<long>(epoch_step_), msg.str());
        }
    }
}

void Trainer::check_routing(ad::Tape& tape, const Binding& params, ad::Var loss, LossTerm term) const {
    const auto routing = loss_routing(cfg_.paradigm).at(term);
    tape.zero_grad();
    tape.backward(loss);
    for (Group g : model_.params().groups()) {
        if (routing.contains(g)) continue;
        for (const Tensor2& gr : params.grads(g)) {
            for (double x : gr.data()) {
                if (x != 0.0) {
                    throw ContractError("routing violated: " + std::string(loss_name(term)) +
                                        " produced gradient on group " + std::string(group_name(g)));
                }
            }
        }
    }
    tape.zero_grad();
}

LossBundle Trainer::generator_step(const FeatureBatch& batch) {
    ad::Tape tape;
    const std::vector<Group> trainable =
        cfg_.verify_routing ? trainable_all(model_.params()) : std::vector<Group>{Group::E1, Group::E2, Group::P};
    Binding params(tape, model_.params(), trainable);
    LossGraph g = build_losses(model_, params, batch, cfg_, active_, cfg_.paradigm);
    if (g.terms.empty() && !active_.empty()) {
        throw DivergenceError("Z", static_cast<long>(epoch_), static_cast<long>(epoch_step_),
                              "embeddings became non-finite at epoch " + std::to_string(epoch_) + ", step " +
                                  std::to_string(epoch_step_));
    }
    check_finite(g.terms);

    ad::Var total;
    for (const auto& [t, v] : g.terms) {
        if (t == LossTerm::Lc) continue;
        total = total.valid() ? total + v : v;
    }
    if (cfg_.verify_routing) {
        for (const auto& [t, v] : g.terms) check_routing(tape, params, v, t);
    }
    tape.backward(total);

    const Tensor2 before_d = cfg_.verify_routing && model_.params().has(Group::D) ? model_.params().group(Group::D)[0].value
                                                                                   : Tensor2{};
    opt_.step(model_.params(), Group::E1, params.grads(Group::E1), lr_e1());
    opt_.step(model_.params(), Group::E2, params.grads(Group::E2), cfg_.lr2);
    opt_.step(model_.params(), Group::P, params.grads(Group::P), cfg_.lr2);
    model_.label_classifier().renormalize(model_.params());
    if (cfg_.verify_routing && !(model_.params().group(Group::D)[0].value == before_d)) {
        throw ContractError("routing violated: generator step changed D");
    }

    // Modality accuracy of the classifier the generator is playing against.
    const MlpHead& head = modality_head(model_, cfg_.paradigm);
    {
        ad::Tape t2;
        Binding frozen(t2, model_.params(), {});
        last_accuracy_ = modality_accuracy(discriminate(head, frozen, t2.constant(g.z_image.value())).value(),
                                           discriminate(head, frozen, t2.constant(g.z_text.value())).value());
    }

    LossBundle bundle;
    bundle.routing = loss_routing(cfg_.paradigm);
    for (LossTerm t : kAllLosses) bundle.values[t] = 0.0;
    for (const auto& [t, v] : g.terms) bundle.values[t] = v.item();
    ++gen_steps_;
    return bundle;
}

double Trainer::discriminator_step(const FeatureBatch& batch) {
    ad::Tape tape;
    double reported = 0.0;
    if (cfg_.paradigm == Paradigm::Unified) {
        const std::vector<Group> trainable =
            cfg_.verify_routing ? trainable_all(model_.params()) : std::vector<Group>{Group::D};
        Binding params(tape, model_.params(), trainable);
        ad::Var zi = ad::grad_scale(model_.embed_image(params, tape.constant(batch.image)), 0.0);
        ad::Var zt = ad::grad_scale(model_.embed_text(params, tape.constant(batch.text)), 0.0);
        ad::Var lc = modality_classification_loss(discriminate(model_.discriminator(), params, zi),
                                                  discriminate(model_.discriminator(), params, zt));
        check_finite({{LossTerm::Lc, lc}});
        if (cfg_.verify_routing) check_routing(tape, params, lc, LossTerm::Lc);
        tape.backward(lc);
        opt_.step(model_.params(), Group::D, params.grads(Group::D), lr_disc());
        reported = lc.item();
    } else {
        const std::vector<Group> trainable =
            cfg_.verify_routing ? trainable_all(model_.params())
                                : std::vector<Group>{Group::D, Group::C, Group::E1, Group::E2};
        Binding params(tape, model_.params(), trainable);
        ad::Var zi = model_.embed_image(params, tape.constant(batch.image));
        ad::Var zt = model_.embed_text(params, tape.constant(batch.text));
        // C plays the adversary through the reversal; D keeps fitting modalities on detached Z.
        ad::Var lc_c = modality_classification_loss(
            discriminate(model_.modality_classifier(), params, ad::grad_scale(zi, -cfg_.reversal_weight)),
            discriminate(model_.modality_classifier(), params, ad::grad_scale(zt, -cfg_.reversal_weight)));
        ad::Var lc_d = modality_classification_loss(
            discriminate(model_.discriminator(), params, ad::grad_scale(zi, 0.0)),
            discriminate(model_.discriminator(), params, ad::grad_scale(zt, 0.0)));
        check_finite({{LossTerm::Lc, lc_c}});
        check_finite({{LossTerm::Lc, lc_d}});
        ad::Var total = lc_c + lc_d;
        if (cfg_.verify_routing) check_routing(tape, params, total, LossTerm::Lc);
        tape.backward(total);
        opt_.step(model_.params(), Group::D, params.grads(Group::D), lr_disc());
        opt_.step(model_.params(), Group::C, params.grads(Group::C), lr_disc());
        opt_.step(model_.params(), Group::E1, params.grads(Group::E1), lr_e1());
        opt_.step(model_.params(), Group::E2, params.grads(Group::E2), cfg_.lr2);
        reported = lc_c.item();
    }
    ++disc_steps_;
    return reported;
}

EpochReport Trainer::train_epoch(const Dataset& data) {
    const auto start = std::chrono::steady_clock::now();
    const auto batches = make_batches(data, Split::Train, cfg_.batch_size, cfg_.seed, epoch_);
    EpochReport rep;
    rep.epoch = epoch_;
    rep.paradigm = cfg_.paradigm;
    rep.preset = cfg_.preset;
    rep.lr1 = lr_e1();
    rep.lr2 = cfg_.lr2;
    for (LossTerm t : kAllLosses) rep.losses[t] = 0.0;

    const std::size_t gen0 = gen_steps_, disc0 = disc_steps_;
    double acc = 0.0;
    epoch_step_ = 0;
    for (const auto& batch : batches) {
        const LossBundle b = generator_step(batch);
        for (const auto& [t, v] : b.values) rep.losses[t] += v;
        acc += last_accuracy_;
        if (adversarial() && gen_steps_ % cfg_.k_steps == 0) rep.disc_loss += discriminator_step(batch);
        ++epoch_step_;
    }
    rep.generator_steps = gen_steps_ - gen0;
    rep.discriminator_steps = disc_steps_ - disc0;
    if (!batches.empty()) {
        const auto n = static_cast<double>(batches.size());
        for (auto& [t, v] : rep.losses) v /= n;
        rep.disc_accuracy = acc / n;
    }
    if (rep.discriminator_steps > 0) rep.disc_loss /= static_cast<double>(rep.discriminator_steps);
    ++epoch_;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

LossBundle Trainer::forward_losses(const FeatureBatch& batch) const {
    ad::Tape tape;
    Binding params(tape, model_.params(), {});
    const std::set<LossTerm> all(kAllLosses.begin(), kAllLosses.end());
    const LossGraph g = build_losses(model_, params, batch, cfg_, all, cfg_.paradigm);
    LossBundle bundle;
    bundle.routing = loss_routing(cfg_.paradigm);
    for (const auto& [t, v] : g.terms) bundle.values[t] = v.item();
    return bundle;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.params = model_.params();
    c.optimizer = opt_.state(model_.params());
    c.meta["epoch"] = std::to_string(epoch_);
    c.meta["generator_steps"] = std::to_string(gen_steps_);
    c.meta["discriminator_steps"] = std::to_string(disc_steps_);
    c.meta["optimizer"] = std::string(optimizer_name(cfg_.optimizer));
    c.meta["paradigm"] = std::string(paradigm_name(cfg_.paradigm));
    c.meta["preset"] = std::string(preset_name(cfg_.preset));
    c.meta["embed_dim"] = std::to_string(cfg_.model.embed_dim);
    c.meta["image_dim"] = std::to_string(cfg_.model.image_dim);
    c.meta["text_dim"] = std::to_string(cfg_.model.text_dim);
    c.meta["num_labels"] = std::to_string(cfg_.model.num_labels);
    return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
    auto counter = [&](const char* key) -> std::size_t {
        const auto it = ckpt.meta.find(key);
        if (it == ckpt.meta.end()) throw CheckpointError(std::string("checkpoint lacks '") + key + "'");
        try {
            return static_cast<std::size_t>(std::stoull(it->second));
        } catch (const std::exception&) {
            throw CheckpointError(std::string("checkpoint field '") + key + "' is not a count");
        }
    };
    const std::size_t epoch = counter("epoch");
    const std::size_t gen = counter("generator_steps");
    const std::size_t disc = counter("discriminator_steps");
    if (const auto it = ckpt.meta.find("optimizer");
        it != ckpt.meta.end() && it->second != optimizer_name(cfg_.optimizer)) {
        throw CheckpointError("checkpoint was written by optimizer " + it->second + ", config uses " +
                              std::string(optimizer_name(cfg_.optimizer)));
    }
    ParameterStore next = model_.params();
    restore_params(ckpt.params, next);
    opt_.load_state(ckpt.optimizer, next);
    model_.params() = std::move(next);
    epoch_ = epoch;
    gen_steps_ = gen;
    disc_steps_ = disc;
}

}  // namespace xmodal
