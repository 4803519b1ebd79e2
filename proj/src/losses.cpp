#include "xmodal/losses.hpp"

#include <cmath>
#include <optional>
#include <string>

#include "xmodal/errors.hpp"

namespace xmodal {

std::string_view loss_name(LossTerm t) {
    switch (t) {
        case LossTerm::Ls: return "L_s";
        case LossTerm::Lc: return "L_c";
        case LossTerm::Lkl: return "L_kl";
        case LossTerm::Lce: return "L_ce";
        case LossTerm::Ldi: return "L_di";
        case LossTerm::Ltr: return "L_tr";
    }
    return "?";
}

std::string_view paradigm_name(Paradigm p) { return p == Paradigm::Unified ? "unified" : "separate"; }

Paradigm parse_paradigm(std::string_view s) {
    if (s == "unified") return Paradigm::Unified;
    if (s == "separate") return Paradigm::Separate;
    throw ConfigError("unknown paradigm '" + std::string(s) + "' (expected unified|separate)");
}

namespace {

void check_probability_rows(const Tensor2& p, const char* who) {
    for (std::size_t r = 0; r < p.rows(); ++r) {
        double s = 0.0;
        for (double v : p.row(r)) {
            if (v < 0.0) throw ContractError(std::string(who) + ": negative probability");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) {
            throw ContractError(std::string(who) + ": row " + std::to_string(r) + " sums to " +
                                std::to_string(s));
        }
    }
}

void check_pair(ad::Var a, ad::Var b, const char* who) {
    if (!a.value().same_shape(b.value())) throw DimensionError(std::string(who) + ": shape mismatch");
    if (a.rows() == 0) throw ContractError(std::string(who) + ": empty batch");
}

double inv_rows(ad::Var a) { return 1.0 / static_cast<double>(a.rows()); }

/// sum(P * (log P - log Q)) where log P comes from the logits directly.
ad::Var kl_rows(ad::Var p, ad::Var log_p, ad::Var log_q) { return ad::sum(ad::mul(p, ad::sub(log_p, log_q))); }

ad::Var picked_log_probs(ad::Var logits, std::span<const Label> labels) {
    std::vector<std::pair<std::size_t, std::size_t>> entries;
    entries.reserve(labels.size());
    for (std::size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] < 0 || static_cast<std::size_t>(labels[j]) >= logits.cols()) {
            throw ContractError("label " + std::to_string(labels[j]) + " out of range [0, " +
                                std::to_string(logits.cols()) + ")");
        }
        entries.emplace_back(j, static_cast<std::size_t>(labels[j]));
    }
    return ad::gather(ad::rowwise_log_softmax(logits), std::move(entries));
}

}  // namespace

ad::Var entropy_loss(ad::Var p_image, ad::Var p_text) {
    check_pair(p_image, p_text, "entropy_loss");
    check_probability_rows(p_image.value(), "entropy_loss");
    check_probability_rows(p_text.value(), "entropy_loss");
    ad::Var s = ad::add(ad::sum(ad::mul(p_image, ad::log_eps(p_image, kLogFloor))),
                        ad::sum(ad::mul(p_text, ad::log_eps(p_text, kLogFloor))));
    return ad::scalar_mul(s, inv_rows(p_image));
}

ad::Var modality_classification_loss(ad::Var p_image, ad::Var p_text) {
    check_pair(p_image, p_text, "modality_classification_loss");
    check_probability_rows(p_image.value(), "modality_classification_loss");
    check_probability_rows(p_text.value(), "modality_classification_loss");
    if (p_image.cols() != 2) throw DimensionError("modality_classification_loss: expected two columns");
    const std::size_t n = p_image.rows();
    std::vector<std::pair<std::size_t, std::size_t>> img, txt;
    for (std::size_t j = 0; j < n; ++j) {
        img.emplace_back(j, kImageModality);
        txt.emplace_back(j, kTextModality);
    }
    ad::Var s = ad::add(ad::sum(ad::log_eps(ad::gather(p_image, img), kLogFloor)),
                        ad::sum(ad::log_eps(ad::gather(p_text, txt), kLogFloor)));
    return ad::scalar_mul(s, -1.0 / static_cast<double>(n));
}

ad::Var kl_projection_loss(const SimilarityMatrices& a, const Tensor2& supervisory, double eps) {
    check_pair(a.image_to_text, a.text_to_image, "kl_projection_loss");
    if (!a.image_to_text.value().same_shape(supervisory)) {
        throw DimensionError("kl_projection_loss: supervisory matrix is " + supervisory.shape_string() +
                             ", similarity is " + a.image_to_text.value().shape_string());
    }
    if (!(eps > 0.0)) throw ConfigError("kl_projection_loss: eps must be positive");
    ad::Tape& tape = *a.image_to_text.tape();
    Tensor2 log_q = supervisory;
    for (auto& v : log_q.data()) v = std::log(v + eps);
    ad::Var lq = tape.constant(std::move(log_q));
    ad::Var it = kl_rows(ad::rowwise_softmax(a.image_to_text), ad::rowwise_log_softmax(a.image_to_text), lq);
    ad::Var ti = kl_rows(ad::rowwise_softmax(a.text_to_image), ad::rowwise_log_softmax(a.text_to_image), lq);
    return ad::scalar_mul(ad::add(it, ti), inv_rows(a.image_to_text));
}

ad::Var label_ce_loss(const PairedProjections& proj, std::span<const Label> labels,
                      const LabelClassifier& classifier, const Binding& params) {
    check_pair(proj.image_to_text, proj.text_to_image, "label_ce_loss");
    if (labels.size() != proj.image_to_text.rows()) throw DimensionError("label_ce_loss: label count mismatch");
    ad::Var it = picked_log_probs(classifier.logits(params, proj.image_to_text), labels);
    ad::Var ti = picked_log_probs(classifier.logits(params, proj.text_to_image), labels);
    return ad::scalar_mul(ad::add(ad::sum(it), ad::sum(ti)), -inv_rows(proj.image_to_text));
}

ad::Var imbalance_kl_loss(const PairedProjections& proj, const LabelClassifier& classifier,
                          const Binding& params, double tau, double eps) {
    check_pair(proj.image_to_text, proj.text_to_image, "imbalance_kl_loss");
    if (!(tau > 0.0)) throw ConfigError("imbalance_kl_loss: temperature must be positive");
    ad::Var s_it = ad::scalar_mul(classifier.logits(params, proj.image_to_text), 1.0 / tau);
    ad::Var s_ti = ad::scalar_mul(classifier.logits(params, proj.text_to_image), 1.0 / tau);
    ad::Var p_it = ad::rowwise_softmax(s_it);
    ad::Var p_ti = ad::rowwise_softmax(s_ti);
    ad::Var fwd = kl_rows(p_it, ad::rowwise_log_softmax(s_it), ad::log_eps(p_ti, eps));
    ad::Var bwd = kl_rows(p_ti, ad::rowwise_log_softmax(s_ti), ad::log_eps(p_it, eps));
    return ad::scalar_mul(ad::add(fwd, bwd), tau * tau * inv_rows(proj.image_to_text));
}

ad::Var symmetric_kl_loss(const PairedProjections& proj, const LabelClassifier& classifier,
                          const Binding& params, double eps) {
    check_pair(proj.image_to_text, proj.text_to_image, "symmetric_kl_loss");
    ad::Var s_it = classifier.logits(params, proj.image_to_text);
    ad::Var s_ti = classifier.logits(params, proj.text_to_image);
    ad::Var p_it = ad::rowwise_softmax(s_it);
    ad::Var p_ti = ad::rowwise_softmax(s_ti);
    ad::Var fwd = kl_rows(p_it, ad::rowwise_log_softmax(s_it), ad::log_eps(p_ti, eps));
    ad::Var bwd = kl_rows(p_ti, ad::rowwise_log_softmax(s_ti), ad::log_eps(p_it, eps));
    return ad::scalar_mul(ad::add(fwd, bwd), inv_rows(proj.image_to_text));
}

std::vector<Triplet> mine_hardest(const Tensor2& similarity, std::span<const Label> anchor_labels,
                                  std::span<const Label> candidate_labels, bool exclude_self) {
    if (similarity.rows() != anchor_labels.size() || similarity.cols() != candidate_labels.size()) {
        throw DimensionError("mine_hardest: label counts do not match similarity " + similarity.shape_string());
    }
    std::vector<Triplet> out;
    for (std::size_t a = 0; a < similarity.rows(); ++a) {
        std::size_t pos = 0, neg = 0;
        bool has_pos = false, has_neg = false;
        for (std::size_t c = 0; c < similarity.cols(); ++c) {
            const double s = similarity(a, c);
            if (candidate_labels[c] == anchor_labels[a]) {
                if (exclude_self && c == a) continue;
                if (!has_pos || s < similarity(a, pos)) {
                    pos = c;
                    has_pos = true;
                }
            } else if (!has_neg || s > similarity(a, neg)) {
                neg = c;
                has_neg = true;
            }
        }
        if (has_pos && has_neg) out.push_back({a, pos, neg});
    }
    return out;
}

namespace {

/// sum over mined anchors of max(0, m - S_pos + S_neg); empty when nothing was mined.
std::optional<ad::Var> hinge_sum(ad::Var s, std::span<const Label> anchor_labels,
                                 std::span<const Label> candidate_labels, bool exclude_self, double margin) {
    const auto triplets = mine_hardest(s.value(), anchor_labels, candidate_labels, exclude_self);
    if (triplets.empty()) return std::nullopt;
    std::vector<std::pair<std::size_t, std::size_t>> pos, neg;
    for (const auto& t : triplets) {
        pos.emplace_back(t.anchor, t.positive);
        neg.emplace_back(t.anchor, t.negative);
    }
    ad::Var gap = ad::sub(ad::gather(s, std::move(neg)), ad::gather(s, std::move(pos)));
    return ad::sum(ad::relu(ad::add_scalar(gap, margin)));
}

}  // namespace

ad::Var triplet_loss(const EmbeddingPair& e, std::span<const Label> labels, double margin,
                     TripletWeights weights) {
    if (labels.size() != e.batch()) throw DimensionError("triplet_loss: label count mismatch");
    if (!(margin > 0.0)) throw ConfigError("triplet_loss: margin must be positive");
    ad::Var zi = ad::row_l2_normalize(e.image);
    ad::Var zt = ad::row_l2_normalize(e.text);
    ad::Var s_it = ad::matmul(zi, ad::transpose(zt));
    ad::Var s_ti = ad::transpose(s_it);
    ad::Var s_ii = ad::matmul(zi, ad::transpose(zi));
    ad::Var s_tt = ad::matmul(zt, ad::transpose(zt));

    ad::Tape& tape = *e.image.tape();
    const double scale = 1.0 / static_cast<double>(e.batch());
    ad::Var total = tape.constant(Tensor2(1, 1));
    auto accumulate = [&](std::optional<ad::Var> term, double w) {
        if (term && w != 0.0) total = ad::add(total, ad::scalar_mul(*term, w * scale));
    };
    accumulate(hinge_sum(s_it, labels, labels, false, margin), weights.inter);
    accumulate(hinge_sum(s_ti, labels, labels, false, margin), weights.inter);
    accumulate(hinge_sum(s_ii, labels, labels, true, margin), weights.intra);
    accumulate(hinge_sum(s_tt, labels, labels, true, margin), weights.intra);
    return total;
}

double LossBundle::get(LossTerm t) const {
    auto it = values.find(t);
    return it == values.end() ? 0.0 : it->second;
}

std::map<LossTerm, std::set<Group>> loss_routing(Paradigm p) {
    std::map<LossTerm, std::set<Group>> r;
    const std::set<Group> gen{Group::E1, Group::E2};
    r[LossTerm::Ls] = gen;
    r[LossTerm::Lkl] = gen;
    r[LossTerm::Ltr] = gen;
    r[LossTerm::Lce] = {Group::E1, Group::E2, Group::P};
    r[LossTerm::Ldi] = {Group::E1, Group::E2, Group::P};
    if (p == Paradigm::Unified) {
        r[LossTerm::Lc] = {Group::D};
    } else {
        r[LossTerm::Lc] = {Group::C, Group::D, Group::E1, Group::E2};
    }
    return r;
}

}  // namespace xmodal
