#include "xmodal/projection.hpp"

#include <cmath>

#include "xmodal/errors.hpp"

namespace xmodal {

EmbeddingPair::EmbeddingPair(ad::Var zi, ad::Var zt) : image(zi), text(zt) {
    if (!zi.value().same_shape(zt.value())) {
        throw DimensionError("embedding pair shapes differ: " + zi.value().shape_string() + " vs " +
                             zt.value().shape_string());
    }
}

std::vector<double> project_feature(std::span<const double> src, std::span<const double> dst) {
    if (src.size() != dst.size()) throw DimensionError("project_feature: length mismatch");
    double nn = 0.0;
    for (double v : dst) nn += v * v;
    const double norm = std::sqrt(nn);
    if (!(norm >= ad::kMinRowNorm)) throw DegenerateError("project_feature: zero target vector");
    double dot = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) dot += src[i] * dst[i] / norm;
    std::vector<double> out(dst.size());
    for (std::size_t i = 0; i < dst.size(); ++i) out[i] = dot * dst[i] / norm;
    return out;
}

SimilarityMatrices similarity_matrices(const EmbeddingPair& e) {
    ad::Var zi_bar = ad::row_l2_normalize(e.image);
    ad::Var zt_bar = ad::row_l2_normalize(e.text);
    return {ad::matmul(e.image, ad::transpose(zt_bar)), ad::matmul(e.text, ad::transpose(zi_bar))};
}

PairedProjections paired_projections(const EmbeddingPair& e) {
    ad::Var zi_bar = ad::row_l2_normalize(e.image);
    ad::Var zt_bar = ad::row_l2_normalize(e.text);
    ad::Var len_it = ad::row_sum(ad::mul(e.image, zt_bar));
    ad::Var len_ti = ad::row_sum(ad::mul(e.text, zi_bar));
    return {ad::mul(zt_bar, len_it), ad::mul(zi_bar, len_ti)};
}

Tensor2 supervisory_matrix(std::span<const Label> labels) {
    const std::size_t n = labels.size();
    if (n == 0) throw ContractError("supervisory_matrix: empty batch");
    Tensor2 q(n, n);
    // Row entries take only two values, exp(1) for matches and exp(0) for the rest.
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t matches = 0;
        for (std::size_t k = 0; k < n; ++k) matches += labels[j] == labels[k];
        const double hit = std::exp(1.0);
        const double z = hit * static_cast<double>(matches) + static_cast<double>(n - matches);
        for (std::size_t k = 0; k < n; ++k) q(j, k) = (labels[j] == labels[k] ? hit : 1.0) / z;
    }
    return q;
}

}  // namespace xmodal
