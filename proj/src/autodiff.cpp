#include "xmodal/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "xmodal/errors.hpp"

namespace xmodal::ad {

namespace {

thread_local std::string g_corrupt_op;
thread_local double g_corrupt_factor = 1.0;

Tape& tape_of(Var a) {
    if (!a.valid()) throw ContractError("autodiff: use of an unbound Var");
    return *a.tape();
}

Tape& tape_of(Var a, Var b) {
    if (a.tape() != b.tape()) throw ContractError("autodiff: operands live on different tapes");
    return tape_of(a);
}

enum class Broadcast { Same, Row, Col, Scalar };

Broadcast broadcast_kind(const Tensor2& a, const Tensor2& b, const char* op) {
    if (a.same_shape(b)) return Broadcast::Same;
    if (b.rows() == 1 && b.cols() == 1) return Broadcast::Scalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
    if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::Col;
    throw DimensionError(std::string(op) + ": cannot combine " + a.shape_string() + " with " +
                         b.shape_string());
}

std::size_t bindex(Broadcast kind, std::size_t r, std::size_t c, std::size_t cols) {
    switch (kind) {
        case Broadcast::Same: return r * cols + c;
        case Broadcast::Row: return c;
        case Broadcast::Col: return r;
        case Broadcast::Scalar: return 0;
    }
    return 0;
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
Tensor2 reduce_to(const Tensor2& g, Broadcast kind, const Tensor2& like) {
    if (kind == Broadcast::Same) return g;
    Tensor2 out(like.rows(), like.cols());
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) out[bindex(kind, r, c, g.cols())] += g(r, c);
    return out;
}

enum class BinaryOp { Add, Sub, Mul };

Var binary(Var a, Var b, BinaryOp op, const char* name) {
    Tape& tape = tape_of(a, b);
    const Tensor2& av = a.value();
    const Tensor2& bv = b.value();
    const Broadcast kind = broadcast_kind(av, bv, name);
    Tensor2 out(av.rows(), av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t c = 0; c < av.cols(); ++c) {
            const double x = av(r, c);
            const double y = bv[bindex(kind, r, c, av.cols())];
            out(r, c) = op == BinaryOp::Add ? x + y : op == BinaryOp::Sub ? x - y : x * y;
        }
    }
    const std::size_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {ia, ib}, name, [ia, ib, kind, op](Tape& t, std::size_t, const Tensor2& g) {
        const Tensor2& av = t.value(ia);
        const Tensor2& bv = t.value(ib);
        if (t.requires_grad(ia)) {
            if (op == BinaryOp::Mul) {
                Tensor2 ga(g.rows(), g.cols());
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c)
                        ga(r, c) = g(r, c) * bv[bindex(kind, r, c, g.cols())];
                t.accumulate(ia, ga);
            } else {
                t.accumulate(ia, g);
            }
        }
        if (t.requires_grad(ib)) {
            Tensor2 gb = g;
            if (op == BinaryOp::Sub) {
                for (auto& v : gb.data()) v = -v;
            } else if (op == BinaryOp::Mul) {
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
            }
            t.accumulate(ib, reduce_to(gb, kind, bv));
        }
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Var

const Tensor2& Var::value() const { return tape_of(*this).value(id_); }
const Tensor2& Var::grad() const { return tape_of(*this).grad(id_); }
bool Var::requires_grad() const { return tape_of(*this).requires_grad(id_); }

double Var::item() const {
    const Tensor2& v = value();
    if (v.rows() != 1 || v.cols() != 1) throw ContractError("item(): node is " + v.shape_string());
    return v[0];
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(Tensor2 value, bool requires_grad) {
    Node node;
    node.grad = Tensor2(value.rows(), value.cols());
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.op = "leaf";
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor2 value, std::vector<std::size_t> parents, std::string_view op, BackwardFn fn) {
    Node node;
    node.grad = Tensor2(value.rows(), value.cols());
    node.value = std::move(value);
    node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                     [this](std::size_t p) { return nodes_[p].requires_grad; });
    node.op = op;
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Tensor2& g) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (!node.grad.same_shape(g)) {
        throw DimensionError("backward: gradient " + g.shape_string() + " for node " +
                             node.value.shape_string());
    }
    for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

const Tensor2& Tape::grad(std::size_t id) const { return nodes_[id].grad; }

void Tape::backward(Var loss) {
    if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    const Tensor2& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ContractError("backward: loss must be 1x1, got " + lv.shape_string());
    }
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.requires_grad || !node.backward) continue;
        if (!g_corrupt_op.empty() && node.op == g_corrupt_op) {
            Tensor2 g = node.grad;
            for (auto& v : g.data()) v *= g_corrupt_factor;
            node.backward(*this, i, g);
        } else {
            const Tensor2 g = node.grad;
            node.backward(*this, i, g);
        }
    }
}

void Tape::zero_grad() {
    for (auto& node : nodes_) node.grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
    Tape& tape = tape_of(a, b);
    const Tensor2& av = a.value();
    const Tensor2& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw DimensionError("matmul: " + av.shape_string() + " x " + bv.shape_string());
    }
    const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
    Tensor2 out(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av(i, p);
            for (std::size_t j = 0; j < m; ++j) out(i, j) += x * bv(p, j);
        }
    const std::size_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {ia, ib}, "matmul", [ia, ib](Tape& t, std::size_t, const Tensor2& g) {
        const Tensor2& av = t.value(ia);
        const Tensor2& bv = t.value(ib);
        const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
        if (t.requires_grad(ia)) {
            // dA = G * B^T
            Tensor2 ga(n, k);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j) s += g(i, j) * bv(p, j);
                    ga(i, p) = s;
                }
            t.accumulate(ia, ga);
        }
        if (t.requires_grad(ib)) {
            // dB = A^T * G
            Tensor2 gb(k, m);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = av(i, p);
                    for (std::size_t j = 0; j < m; ++j) gb(p, j) += x * g(i, j);
                }
            t.accumulate(ib, gb);
        }
    });
}

Var transpose(Var a) {
    Tape& tape = tape_of(a);
    const std::size_t ia = a.id();
    return tape.record(a.value().transposed(), {ia}, "transpose",
                       [ia](Tape& t, std::size_t, const Tensor2& g) { t.accumulate(ia, g.transposed()); });
}

Var add(Var a, Var b) { return binary(a, b, BinaryOp::Add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinaryOp::Sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinaryOp::Mul, "mul"); }

Var scalar_mul(Var a, double s) {
    Tape& tape = tape_of(a);
    Tensor2 out = a.value();
    for (auto& v : out.data()) v *= s;
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "scalar_mul", [ia, s](Tape& t, std::size_t, const Tensor2& g) {
        Tensor2 ga = g;
        for (auto& v : ga.data()) v *= s;
        t.accumulate(ia, ga);
    });
}

Var add_scalar(Var a, double s) {
    Tape& tape = tape_of(a);
    Tensor2 out = a.value();
    for (auto& v : out.data()) v += s;
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "add_scalar",
                       [ia](Tape& t, std::size_t, const Tensor2& g) { t.accumulate(ia, g); });
}

Var log_eps(Var a, double eps) {
    Tape& tape = tape_of(a);
    Tensor2 out = a.value();
    for (auto& v : out.data()) {
        if (!(v + eps > 0.0)) throw ContractError("log_eps: non-positive argument");
        v = std::log(v + eps);
    }
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "log_eps", [ia, eps](Tape& t, std::size_t, const Tensor2& g) {
        const Tensor2& x = t.value(ia);
        Tensor2 ga(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / (x[i] + eps);
        t.accumulate(ia, ga);
    });
}

Var relu(Var a) {
    Tape& tape = tape_of(a);
    Tensor2 out = a.value();
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "relu", [ia](Tape& t, std::size_t, const Tensor2& g) {
        const Tensor2& x = t.value(ia);
        Tensor2 ga(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = x[i] > 0.0 ? g[i] : 0.0;
        t.accumulate(ia, ga);
    });
}

Var sum(Var a) {
    Tape& tape = tape_of(a);
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const std::size_t ia = a.id();
    return tape.record(Tensor2(1, 1, s), {ia}, "sum", [ia](Tape& t, std::size_t, const Tensor2& g) {
        const Tensor2& x = t.value(ia);
        t.accumulate(ia, Tensor2(x.rows(), x.cols(), g[0]));
    });
}

Var mean(Var a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw ContractError("mean: empty input");
    Tape& tape = tape_of(a);
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const double inv = 1.0 / static_cast<double>(n);
    const std::size_t ia = a.id();
    return tape.record(Tensor2(1, 1, s * inv), {ia}, "mean", [ia, inv](Tape& t, std::size_t, const Tensor2& g) {
        const Tensor2& x = t.value(ia);
        t.accumulate(ia, Tensor2(x.rows(), x.cols(), g[0] * inv));
    });
}

Var row_sum(Var a) {
    Tape& tape = tape_of(a);
    const Tensor2& av = a.value();
    Tensor2 out(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (double v : av.row(r)) out[r] += v;
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "row_sum", [ia](Tape& t, std::size_t, const Tensor2& g) {
        const Tensor2& x = t.value(ia);
        Tensor2 ga(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) ga(r, c) = g[r];
        t.accumulate(ia, ga);
    });
}

namespace {

Tensor2 softmax_rows(const Tensor2& x) {
    Tensor2 out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) z += (o[c] = std::exp(in[c] - mx));
        for (auto& v : o) v /= z;
    }
    return out;
}

}  // namespace

Var rowwise_softmax(Var a) {
    const Tensor2& av = a.value();
    if (av.empty()) throw ContractError("rowwise_softmax: empty input");
    Tape& tape = tape_of(a);
    const std::size_t ia = a.id();
    return tape.record(softmax_rows(av), {ia}, "rowwise_softmax",
                       [ia](Tape& t, std::size_t self, const Tensor2& g) {
                           const Tensor2& y = t.value(self);
                           Tensor2 ga(y.rows(), y.cols());
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                               double dot = 0.0;
                               for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                               for (std::size_t c = 0; c < y.cols(); ++c)
                                   ga(r, c) = y(r, c) * (g(r, c) - dot);
                           }
                           t.accumulate(ia, ga);
                       });
}

Var rowwise_log_softmax(Var a) {
    const Tensor2& av = a.value();
    if (av.empty()) throw ContractError("rowwise_log_softmax: empty input");
    Tape& tape = tape_of(a);
    Tensor2 out(av.rows(), av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        auto in = av.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (double v : in) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < in.size(); ++c) out(r, c) = in[c] - lse;
    }
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "rowwise_log_softmax",
                       [ia](Tape& t, std::size_t self, const Tensor2& g) {
                           const Tensor2& y = t.value(self);
                           Tensor2 ga(y.rows(), y.cols());
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                               double gs = 0.0;
                               for (std::size_t c = 0; c < y.cols(); ++c) gs += g(r, c);
                               for (std::size_t c = 0; c < y.cols(); ++c)
                                   ga(r, c) = g(r, c) - std::exp(y(r, c)) * gs;
                           }
                           t.accumulate(ia, ga);
                       });
}

Var row_l2_normalize(Var a) {
    Tape& tape = tape_of(a);
    const Tensor2& av = a.value();
    Tensor2 out(av.rows(), av.cols());
    Tensor2 norms(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r) {
        double ss = 0.0;
        for (double v : av.row(r)) ss += v * v;
        const double n = std::sqrt(ss);
        if (!(n >= kMinRowNorm)) {
            throw DegenerateError("row_l2_normalize: row " + std::to_string(r) +
                                  " has norm below 1e-12");
        }
        norms[r] = n;
        for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = av(r, c) / n;
    }
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "row_l2_normalize",
                       [ia, norms = std::move(norms)](Tape& t, std::size_t self, const Tensor2& g) {
                           const Tensor2& y = t.value(self);
                           Tensor2 ga(y.rows(), y.cols());
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                               double dot = 0.0;
                               for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                               for (std::size_t c = 0; c < y.cols(); ++c)
                                   ga(r, c) = (g(r, c) - y(r, c) * dot) / norms[r];
                           }
                           t.accumulate(ia, ga);
                       });
}

Var grad_scale(Var a, double factor) {
    Tape& tape = tape_of(a);
    const std::size_t ia = a.id();
    return tape.record(Tensor2(a.value()), {ia}, "grad_scale", [ia, factor](Tape& t, std::size_t, const Tensor2& g) {
        if (factor == 0.0) return;
        Tensor2 ga = g;
        for (auto& v : ga.data()) v *= factor;
        t.accumulate(ia, ga);
    });
}

Var gather(Var a, std::vector<std::pair<std::size_t, std::size_t>> entries) {
    Tape& tape = tape_of(a);
    const Tensor2& av = a.value();
    Tensor2 out(entries.size(), 1);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto [r, c] = entries[i];
        if (r >= av.rows() || c >= av.cols()) throw DimensionError("gather: entry out of range");
        out[i] = av(r, c);
    }
    const std::size_t ia = a.id();
    return tape.record(std::move(out), {ia}, "gather",
                       [ia, entries = std::move(entries)](Tape& t, std::size_t, const Tensor2& g) {
                           const Tensor2& x = t.value(ia);
                           Tensor2 ga(x.rows(), x.cols());
                           for (std::size_t i = 0; i < entries.size(); ++i)
                               ga(entries[i].first, entries[i].second) += g[i];
                           t.accumulate(ia, ga);
                       });
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator*(double s, Var a) { return scalar_mul(a, s); }

namespace debug {
void corrupt_backward(std::string op, double factor) {
    g_corrupt_op = std::move(op);
    g_corrupt_factor = factor;
}
}  // namespace debug

}  // namespace xmodal::ad
