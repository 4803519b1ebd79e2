#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "xmodal/autodiff.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/gradcheck.hpp"

using namespace xmodal;
using ad::Tape;

namespace {

Tensor2 random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor2 t(r, c);
    for (double& v : t.data()) v = u(rng);
    return t;
}

}  // namespace

TEST_CASE("tensor basics") {
    const Tensor2 t = Tensor2::from({{1, 2, 3}, {4, 5, 6}});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.size() == 6);
    CHECK(t(1, 0) == 4);
    CHECK(t.transposed() == Tensor2::from({{1, 4}, {2, 5}, {3, 6}}));
    const std::vector<std::size_t> pick{1, 0, 1};
    CHECK(t.select_rows(pick) == Tensor2::from({{4, 5, 6}, {1, 2, 3}, {4, 5, 6}}));
    CHECK_THROWS_AS(Tensor2(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor2::from({{1, 2}, {3}}), DimensionError);
    Tensor2 bad = t;
    CHECK(bad.all_finite());
    bad(0, 0) = NAN;
    CHECK_FALSE(bad.all_finite());
}

TEST_CASE("matmul values and errors") {
    Tape tape;
    const Tensor2 m = random_tensor(2, 2, 1);
    CHECK(ad::matmul(tape.constant(Tensor2::identity(2)), tape.constant(m)).value() == m);
    const auto r = ad::matmul(tape.constant(Tensor2::from({{1, 2}, {3, 4}})), tape.constant(Tensor2::from({{5}, {6}})));
    CHECK(r.value() == Tensor2::from({{17}, {39}}));
    CHECK_THROWS_AS(ad::matmul(tape.constant(Tensor2(2, 3)), tape.constant(Tensor2(2, 3))), DimensionError);
}

TEST_CASE("gradient of sum(A B) with respect to A is ones times B transposed") {
    Tape tape;
    const Tensor2 a = random_tensor(3, 4, 2), b = random_tensor(4, 2, 3);
    auto av = tape.leaf(a);
    tape.backward(ad::sum(ad::matmul(av, tape.constant(b))));
    Tensor2 expected(3, 4);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) expected(i, k) = b(k, 0) + b(k, 1);
    CHECK(max_abs_diff(av.grad(), expected) < 1e-14);

    // The same gradient by central differences.
    GradcheckOptions opt;
    auto f = [&](const Tensor2& x) {
        Tape t;
        return ad::sum(ad::matmul(t.constant(x), t.constant(b))).item();
    };
    CHECK(check_gradient("matmul", f, a, av.grad(), opt).pass);
}

TEST_CASE("rowwise softmax examples") {
    Tape tape;
    auto s = ad::rowwise_softmax(tape.constant(Tensor2::from({{0, 0}, {0, std::log(3.0)}, {1000, 1000}})));
    CHECK(s.value()(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.value()(1, 0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(s.value()(1, 1) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(s.value()(2, 0) == 0.5);
    CHECK(s.value()(2, 1) == 0.5);
    auto r = ad::rowwise_softmax(tape.constant(random_tensor(5, 7, 4)));
    for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (double v : r.value().row(i)) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
    auto ls = ad::rowwise_log_softmax(tape.constant(Tensor2::from({{0, std::log(3.0)}})));
    CHECK(ls.value()(0, 0) == doctest::Approx(std::log(0.25)));
}

TEST_CASE("row_l2_normalize") {
    Tape tape;
    auto n = ad::row_l2_normalize(tape.constant(Tensor2::from({{3, 4}, {1, 0}})));
    CHECK(n.value()(0, 0) == doctest::Approx(0.6));
    CHECK(n.value()(0, 1) == doctest::Approx(0.8));
    CHECK(n.value()(1, 0) == 1.0);
    CHECK(n.value()(1, 1) == 0.0);
    CHECK_THROWS_AS(ad::row_l2_normalize(tape.constant(Tensor2::from({{0, 0}}))), DegenerateError);
}

TEST_CASE("elementwise examples") {
    Tape tape;
    CHECK(ad::relu(tape.constant(Tensor2::from({{-2}}))).item() == 0.0);
    CHECK(ad::log_eps(tape.constant(Tensor2::from({{0}})), 1e-8).item() == doctest::Approx(std::log(1e-8)));
    CHECK(ad::log_eps(tape.constant(Tensor2::from({{0}})), 1e-8).item() == doctest::Approx(-18.42).epsilon(1e-3));
    CHECK(ad::mean(tape.constant(Tensor2::from({{1, 2, 3, 4}}))).item() == 2.5);
    CHECK(ad::sum(tape.constant(Tensor2::from({{1, 2}, {3, 4}}))).item() == 10.0);
    CHECK(ad::row_sum(tape.constant(Tensor2::from({{1, 2}, {3, 4}}))).value() == Tensor2::from({{3}, {7}}));
    CHECK(ad::scalar_mul(tape.constant(Tensor2::from({{1, -2}})), 3).value() == Tensor2::from({{3, -6}}));
    CHECK(ad::add_scalar(tape.constant(Tensor2::from({{1, -2}})), 1).value() == Tensor2::from({{2, -1}}));

    auto a = tape.constant(Tensor2::from({{1, 2}, {3, 4}}));
    CHECK(ad::add(a, tape.constant(Tensor2::from({{10, 20}}))).value() == Tensor2::from({{11, 22}, {13, 24}}));
    CHECK(ad::sub(a, tape.constant(Tensor2::from({{1}, {2}}))).value() == Tensor2::from({{0, 1}, {1, 2}}));
    CHECK(ad::mul(a, tape.constant(Tensor2::from({{2}}))).value() == Tensor2::from({{2, 4}, {6, 8}}));
    CHECK_THROWS_AS(ad::add(a, tape.constant(Tensor2(3, 2))), DimensionError);
    CHECK_THROWS_AS(ad::mul(a, tape.constant(Tensor2(2, 3))), DimensionError);
    CHECK(ad::gather(a, {{1, 0}, {0, 1}}).value() == Tensor2::from({{3}, {2}}));
    CHECK_THROWS_AS(ad::gather(a, {{2, 0}}), DimensionError);
}

TEST_CASE("backward examples") {
    SUBCASE("sum gives ones") {
        Tape tape;
        auto x = tape.leaf(random_tensor(3, 2, 5));
        tape.backward(ad::sum(x));
        CHECK(x.grad() == Tensor2(3, 2, 1.0));
    }
    SUBCASE("sum of squares") {
        Tape tape;
        auto x = tape.leaf(Tensor2::from({{1, 2}}));
        tape.backward(ad::sum(ad::mul(x, x)));
        CHECK(x.grad() == Tensor2::from({{2, 4}}));
    }
    SUBCASE("non-scalar loss is rejected") {
        Tape tape;
        auto x = tape.leaf(Tensor2(2, 2, 1.0));
        CHECK_THROWS_AS(tape.backward(x), ContractError);
    }
    SUBCASE("constants hold zero gradient") {
        Tape tape;
        auto x = tape.leaf(Tensor2(2, 2, 1.0));
        auto c = tape.constant(Tensor2(2, 2, 3.0));
        tape.backward(ad::sum(ad::mul(x, c)));
        CHECK(c.grad() == Tensor2(2, 2, 0.0));
        CHECK(x.grad() == Tensor2(2, 2, 3.0));
    }
    SUBCASE("unreachable leaves hold zeros") {
        Tape tape;
        auto x = tape.leaf(Tensor2(1, 3, 1.0));
        auto y = tape.leaf(Tensor2(1, 3, 1.0));
        tape.backward(ad::sum(x));
        CHECK(y.grad() == Tensor2(1, 3, 0.0));
        CHECK(y.grad().same_shape(y.value()));
    }
    SUBCASE("deterministic after zero_grad") {
        Tape tape;
        auto x = tape.leaf(random_tensor(4, 3, 6));
        auto loss = ad::sum(ad::rowwise_softmax(ad::mul(x, x)));
        tape.backward(loss);
        const Tensor2 first = x.grad();
        tape.zero_grad();
        tape.backward(loss);
        CHECK(x.grad() == first);
        tape.backward(loss);
        CHECK(max_abs_diff(x.grad(), [&] {
                  Tensor2 t = first;
                  for (double& v : t.data()) v *= 2.0;
                  return t;
              }()) < 1e-15);
    }
}

TEST_CASE("grad_scale") {
    const Tensor2 v = random_tensor(2, 3, 7);
    for (double factor : {1.0, -1.0, 0.0, 0.25}) {
        Tape tape;
        auto x = tape.leaf(v);
        auto y = ad::grad_scale(x, factor);
        CHECK(y.value() == v);
        tape.backward(ad::sum(y));
        CHECK(x.grad() == Tensor2(2, 3, factor));
    }
}

TEST_CASE("corrupted backward rule is observable") {
    Tape tape;
    auto x = tape.leaf(Tensor2(1, 2, 1.0));
    {
        ad::debug::ScopedCorruption c("sum", 3.0);
        tape.backward(ad::sum(x));
    }
    CHECK(x.grad() == Tensor2(1, 2, 3.0));
    Tape clean;
    auto y = clean.leaf(Tensor2(1, 2, 1.0));
    clean.backward(ad::sum(y));
    CHECK(y.grad() == Tensor2(1, 2, 1.0));
}

TEST_CASE("every op passes central differences") {
    const GradcheckReport rep = run_gradcheck();
    for (const auto& e : rep.ops) {
        INFO(e.name << " worst " << e.worst_error << " at " << e.worst_at);
        CHECK(e.pass);
        CHECK(e.compared > 0);
    }
}

TEST_CASE("relative error helper") {
    CHECK(relative_error(1.0, 1.0, 1e-8) == 0.0);
    CHECK(relative_error(1e-9, -1e-9, 1e-8) == 0.0);
    CHECK(relative_error(2.0, 1.0, 1e-8) == doctest::Approx(0.5));
}
