#pragma once

#include <span>
#include <vector>

#include "xmodal/autodiff.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

using Label = int;

/// Shared-space embeddings of a batch; row j of both sides is a ground-truth pair.
struct EmbeddingPair {
    ad::Var image;  ///< Z_i, N x d
    ad::Var text;   ///< Z_t, N x d

    EmbeddingPair(ad::Var zi, ad::Var zt);
    std::size_t batch() const { return image.rows(); }
    std::size_t dim() const { return image.cols(); }
};

/// Projection of `src` onto the direction of `dst`: <src, dst/|dst|> dst/|dst|.
std::vector<double> project_feature(std::span<const double> src, std::span<const double> dst);

struct SimilarityMatrices {
    ad::Var image_to_text;  ///< A_it = Z_i normalize(Z_t)^T
    ad::Var text_to_image;  ///< A_ti = Z_t normalize(Z_i)^T
};

/// Entry (j, k) of A_it is the signed length of project_feature(z_i[j], z_t[k]).
SimilarityMatrices similarity_matrices(const EmbeddingPair& e);

/// Row-wise projection onto the paired partner only (row j onto row j).
struct PairedProjections {
    ad::Var image_to_text;  ///< <z_i[j], zbar_t[j]> zbar_t[j]
    ad::Var text_to_image;  ///< <z_t[j], zbar_i[j]> zbar_i[j]
};
PairedProjections paired_projections(const EmbeddingPair& e);

/// Row-wise softmax of the label co-occurrence matrix: entry (j, k) of
/// Y^T Y is 1 when labels[j] == labels[k], else 0.
Tensor2 supervisory_matrix(std::span<const Label> labels);

}  // namespace xmodal
