#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmodal/losses.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

struct GradcheckOptions {
    std::size_t embed_dim = 8;
    std::size_t batch = 6;
    std::size_t labels = 3;
    std::size_t image_dim = 5;
    std::size_t text_dim = 4;
    double tau = 4.0;
    double margin = 0.5;
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Entries where both derivatives are below this are not compared.
    double floor = 1e-8;
    std::uint64_t seed = 3;
};

struct GradcheckEntry {
    std::string name;
    double worst_error = 0.0;
    std::string worst_at;  ///< leaf and flat index of the worst entry
    std::size_t compared = 0;
    bool pass = true;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> losses;  ///< exactly one entry per loss term
    std::vector<GradcheckEntry> ops;     ///< one entry per tape operation
    bool pass() const;
};

/// |a - n| / max(|a|, |n|), or 0 when both are below `floor`.
double relative_error(double analytic, double numeric, double floor);

/// Central differences of f around x compared with `analytic` elementwise.
GradcheckEntry check_gradient(const std::string& name, const std::function<double(const Tensor2&)>& f,
                              Tensor2 x, const Tensor2& analytic, const GradcheckOptions& opt);

/// Every loss on a seeded small model, against the groups each term routes
/// to, plus every tape operation on seeded inputs.
GradcheckReport run_gradcheck(const GradcheckOptions& opt = {});

}  // namespace xmodal
