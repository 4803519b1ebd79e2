#include "xmodal/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "xmodal/autodiff.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/data.hpp"
#include "xmodal/model.hpp"
#include "xmodal/trainer.hpp"

namespace xmodal {

bool GradcheckReport::pass() const {
    const auto ok = [](const GradcheckEntry& e) { return e.pass; };
    return std::all_of(losses.begin(), losses.end(), ok) && std::all_of(ops.begin(), ops.end(), ok);
}

double relative_error(double analytic, double numeric, double floor) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < floor) return 0.0;
    return std::abs(analytic - numeric) / scale;
}

namespace {

void merge(GradcheckEntry& into, const GradcheckEntry& e, double tolerance) {
    into.compared += e.compared;
    if (e.worst_error > into.worst_error || into.worst_at.empty()) {
        into.worst_error = std::max(into.worst_error, e.worst_error);
        if (!e.worst_at.empty()) into.worst_at = e.worst_at;
    }
    into.pass = into.worst_error <= tolerance;
}

Tensor2 random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor2 t(r, c);
    for (double& v : t.data()) v = u(rng);
    return t;
}

// Scalar sum(y * weights) recorded as its own node so that no other tape op
// takes part in checking the op that produced y.
ad::Var contract(ad::Var y, const Tensor2& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += y.value()[i] * weights[i];
    return y.tape()->record(Tensor2(1, 1, s), {y.id()}, "gradcheck_contract",
                            [yid = y.id(), weights](ad::Tape& t, std::size_t, const Tensor2& g) {
                                Tensor2 d = weights;
                                for (double& v : d.data()) v *= g[0];
                                t.accumulate(yid, d);
                            });
}

using UnaryBuild = std::function<ad::Var(ad::Var)>;
using BinaryBuild = std::function<ad::Var(ad::Var, ad::Var)>;

GradcheckEntry check_unary(const std::string& name, const UnaryBuild& op, const Tensor2& x, std::mt19937_64& rng,
                           const GradcheckOptions& opt) {
    Tensor2 weights;
    {
        ad::Tape probe;
        const ad::Var y = op(probe.leaf(x));
        weights = random_tensor(y.rows(), y.cols(), rng);
    }
    auto f = [&](const Tensor2& v) {
        ad::Tape t;
        return contract(op(t.leaf(v, false)), weights).item();
    };
    ad::Tape t;
    const ad::Var xv = t.leaf(x);
    t.backward(contract(op(xv), weights));
    return check_gradient(name, f, x, xv.grad(), opt);
}

GradcheckEntry check_binary(const std::string& name, const BinaryBuild& op, const Tensor2& a, const Tensor2& b,
                            std::mt19937_64& rng, const GradcheckOptions& opt) {
    Tensor2 weights;
    {
        ad::Tape probe;
        const ad::Var y = op(probe.leaf(a), probe.leaf(b));
        weights = random_tensor(y.rows(), y.cols(), rng);
    }
    ad::Tape t;
    const ad::Var av = t.leaf(a), bv = t.leaf(b);
    t.backward(contract(op(av, bv), weights));
    auto fa = [&](const Tensor2& v) {
        ad::Tape s;
        return contract(op(s.leaf(v, false), s.leaf(b, false)), weights).item();
    };
    auto fb = [&](const Tensor2& v) {
        ad::Tape s;
        return contract(op(s.leaf(a, false), s.leaf(v, false)), weights).item();
    };
    GradcheckEntry e = check_gradient(name, fa, a, av.grad(), opt);
    GradcheckEntry eb = check_gradient(name, fb, b, bv.grad(), opt);
    if (!e.worst_at.empty()) e.worst_at = "a" + e.worst_at;
    if (!eb.worst_at.empty()) eb.worst_at = "b" + eb.worst_at;
    merge(e, eb, opt.tolerance);
    return e;
}

std::vector<GradcheckEntry> check_ops(const GradcheckOptions& opt) {
    std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
    const std::size_t r = 4, c = 3;
    // Keep relu inputs away from the kink and log inputs positive.
    auto away_from_zero = [&](std::size_t rows, std::size_t cols) {
        Tensor2 t = random_tensor(rows, cols, rng, 0.2, 1.0);
        std::bernoulli_distribution sign(0.5);
        for (double& v : t.data()) v = sign(rng) ? v : -v;
        return t;
    };
    std::vector<GradcheckEntry> out;
    out.push_back(check_binary("matmul", ad::matmul, random_tensor(r, c, rng), random_tensor(c, 2, rng), rng, opt));
    out.push_back(check_unary("transpose", ad::transpose, random_tensor(r, c, rng), rng, opt));

    for (auto [name, fn] : {std::pair<const char*, BinaryBuild>{"add", ad::add}, {"sub", ad::sub}, {"mul", ad::mul}}) {
        GradcheckEntry e = check_binary(name, fn, random_tensor(r, c, rng), random_tensor(r, c, rng), rng, opt);
        merge(e, check_binary(name, fn, random_tensor(r, c, rng), random_tensor(1, c, rng), rng, opt), opt.tolerance);
        merge(e, check_binary(name, fn, random_tensor(r, c, rng), random_tensor(r, 1, rng), rng, opt), opt.tolerance);
        merge(e, check_binary(name, fn, random_tensor(r, c, rng), random_tensor(1, 1, rng), rng, opt), opt.tolerance);
        out.push_back(e);
    }
    out.push_back(check_unary("scalar_mul", [](ad::Var x) { return ad::scalar_mul(x, -1.7); },
                              random_tensor(r, c, rng), rng, opt));
    out.push_back(check_unary("add_scalar", [](ad::Var x) { return ad::add_scalar(x, 0.3); },
                              random_tensor(r, c, rng), rng, opt));
    out.push_back(check_unary("log_eps", [](ad::Var x) { return ad::log_eps(x, 1e-8); },
                              random_tensor(r, c, rng, 0.2, 2.0), rng, opt));
    out.push_back(check_unary("relu", ad::relu, away_from_zero(r, c), rng, opt));
    out.push_back(check_unary("sum", ad::sum, random_tensor(r, c, rng), rng, opt));
    out.push_back(check_unary("mean", ad::mean, random_tensor(r, c, rng), rng, opt));
    out.push_back(check_unary("row_sum", ad::row_sum, random_tensor(r, c, rng), rng, opt));
    out.push_back(check_unary("rowwise_softmax", ad::rowwise_softmax, random_tensor(r, c, rng, -3.0, 3.0), rng, opt));
    out.push_back(
        check_unary("rowwise_log_softmax", ad::rowwise_log_softmax, random_tensor(r, c, rng, -3.0, 3.0), rng, opt));
    out.push_back(check_unary("row_l2_normalize", ad::row_l2_normalize, away_from_zero(r, c), rng, opt));
    out.push_back(check_unary("grad_scale", [](ad::Var x) { return ad::grad_scale(x, 1.0); },
                              random_tensor(r, c, rng), rng, opt));
    out.push_back(check_unary("gather", [](ad::Var x) { return ad::gather(x, {{0, 1}, {2, 0}, {0, 1}, {3, 2}}); },
                              random_tensor(r, c, rng), rng, opt));
    return out;
}

}  // namespace

GradcheckEntry check_gradient(const std::string& name, const std::function<double(const Tensor2&)>& f, Tensor2 x,
                              const Tensor2& analytic, const GradcheckOptions& opt) {
    if (!analytic.same_shape(x)) throw DimensionError("check_gradient: gradient shape differs from the input");
    GradcheckEntry e;
    e.name = name;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + opt.step;
        const double up = f(x);
        x[i] = orig - opt.step;
        const double down = f(x);
        x[i] = orig;
        const double numeric = (up - down) / (2.0 * opt.step);
        const double err = relative_error(analytic[i], numeric, opt.floor);
        ++e.compared;
        if (err > e.worst_error || e.worst_at.empty()) {
            e.worst_error = std::max(e.worst_error, err);
            e.worst_at = "[" + std::to_string(i) + "]";
        }
    }
    e.pass = e.worst_error <= opt.tolerance;
    return e;
}

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
    std::mt19937_64 rng(opt.seed);
    TrainConfig cfg;
    cfg.model.embed_dim = opt.embed_dim;
    cfg.model.image_dim = opt.image_dim;
    cfg.model.text_dim = opt.text_dim;
    cfg.model.num_labels = opt.labels;
    cfg.tau = opt.tau;
    cfg.margin = opt.margin;
    const Model model(cfg.model, opt.seed);

    FeatureBatch batch;
    batch.image = random_tensor(opt.batch, opt.image_dim, rng);
    batch.text = random_tensor(opt.batch, opt.text_dim, rng);
    for (std::size_t j = 0; j < opt.batch; ++j) batch.labels.push_back(static_cast<Label>(j % opt.labels));
    std::shuffle(batch.labels.begin(), batch.labels.end(), rng);
    batch.items.resize(opt.batch);
    std::iota(batch.items.begin(), batch.items.end(), std::size_t{0});

    const auto routing = loss_routing(Paradigm::Unified);
    GradcheckReport report;
    for (LossTerm term : kAllLosses) {
        ad::Tape tape;
        Binding params(tape, model.params(), model.params().groups());
        const LossGraph g = build_losses(model, params, batch, cfg, {term}, Paradigm::Unified);
        tape.backward(g.terms.at(term));

        GradcheckEntry entry;
        entry.name = std::string(loss_name(term));
        for (Group grp : routing.at(term)) {
            const auto grads = params.grads(grp);
            const auto& leaves = model.params().group(grp);
            for (std::size_t li = 0; li < leaves.size(); ++li) {
                auto f = [&](const Tensor2& v) {
                    ParameterStore store = model.params();
                    store.group(grp)[li].value = v;
                    ad::Tape t;
                    Binding b(t, store, {});
                    return build_losses(model, b, batch, cfg, {term}, Paradigm::Unified).terms.at(term).item();
                };
                GradcheckEntry e = check_gradient(entry.name, f, leaves[li].value, grads[li], opt);
                e.worst_at = std::string(group_name(grp)) + "." + leaves[li].name + e.worst_at;
                merge(entry, e, opt.tolerance);
            }
        }
        report.losses.push_back(entry);
    }
    report.ops = check_ops(opt);
    return report;
}

}  // namespace xmodal
