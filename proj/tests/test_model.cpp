#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/model.hpp"
#include "xmodal/projection.hpp"

using namespace xmodal;
using ad::Tape;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.image_dim = 5;
    c.text_dim = 4;
    c.embed_dim = 6;
    c.num_labels = 3;
    return c;
}

double column_norm(const Tensor2& w, std::size_t c) {
    double s = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) s += w(r, c) * w(r, c);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("parameter groups are disjoint and complete") {
    const Model m(small_config(), 1);
    const auto groups = m.params().groups();
    CHECK(groups.size() == 5);
    CHECK(m.params().group(Group::E1).size() == 4);  // two layers
    CHECK(m.params().group(Group::D).size() == 4);
    CHECK(m.params().group(Group::P).size() == 1);
    CHECK(m.params().at(Group::P, "weight").rows() == 6);
    CHECK(m.params().at(Group::P, "weight").cols() == 3);
    CHECK(m.params().at(Group::D, "layer0.weight").cols() == 3);  // d / 2 hidden

    Model changed = m;
    for (auto& leaf : changed.params().group(Group::D)) leaf.value.fill(7.0);
    for (Group g : {Group::E1, Group::E2, Group::P, Group::C}) {
        CHECK(changed.params().group(g) == m.params().group(g));
    }
    CHECK_FALSE(changed.params().group(Group::D) == m.params().group(Group::D));
    CHECK_THROWS_AS(m.params().at(Group::E1, "nope"), ContractError);
    ParameterStore s;
    s.add(Group::E1, "w", Tensor2(1, 1));
    CHECK_THROWS_AS(s.add(Group::E1, "w", Tensor2(1, 1)), ContractError);
    CHECK(parse_group("C") == Group::C);
    CHECK_THROWS_AS(parse_group("Q"), ContractError);
}

TEST_CASE("modality classifier starts as a copy of the discriminator") {
    const Model m(small_config(), 4);
    CHECK(m.params().group(Group::C) == m.params().group(Group::D));
}

TEST_CASE("initialization range") {
    const Model m(small_config(), 2);
    const Tensor2& w = m.params().at(Group::E1, "layer0.weight");
    const double bound = std::sqrt(6.0 / (5.0 + 6.0));
    for (double v : w.data()) CHECK(std::abs(v) <= bound);
    for (double v : m.params().at(Group::E1, "layer0.bias").data()) CHECK(v == 0.0);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(column_norm(m.params().at(Group::P, "weight"), c) - 1.0) < 1e-12);
}

TEST_CASE("embed") {
    SUBCASE("identity single-layer head is Z = X") {
        ModelConfig c = small_config();
        c.image_dim = c.text_dim = c.embed_dim = 4;
        c.head_layers = 1;
        c.identity_heads = true;
        const Model m(c, 1);
        std::mt19937_64 rng(9);
        const Tensor2 x = oracle::to_tensor(oracle::random_mat(3, 4, rng));
        CHECK(m.embed_image(x) == x);
        CHECK(m.embed_text(x) == x);
    }
    SUBCASE("identity heads demand square layers") {
        ModelConfig c = small_config();
        c.head_layers = 1;
        c.identity_heads = true;
        CHECK_THROWS_AS(Model(c, 1), ConfigError);
    }
    SUBCASE("N = 1 through two layers gives 1 x d") {
        const Model m(small_config(), 3);
        CHECK(m.embed_image(Tensor2(1, 5, 0.3)).rows() == 1);
        CHECK(m.embed_image(Tensor2(1, 5, 0.3)).cols() == 6);
    }
    SUBCASE("fixed seed is byte-identical and matches the loop forward") {
        std::mt19937_64 rng(11);
        const Tensor2 x = oracle::to_tensor(oracle::random_mat(4, 5, rng));
        const Model a(small_config(), 3), b(small_config(), 3);
        CHECK(a.embed_image(x) == b.embed_image(x));
        const auto expected = oracle::mlp(a.params(), Group::E1, oracle::to_mat(x));
        CHECK(max_abs_diff(a.embed_image(x), oracle::to_tensor(expected)) < 1e-14);
    }
    SUBCASE("wrong input width") {
        const Model m(small_config(), 3);
        CHECK_THROWS_AS(m.embed_image(Tensor2(2, 4)), DimensionError);
    }
    SUBCASE("bad configs") {
        ModelConfig c = small_config();
        c.embed_dim = 0;
        CHECK_THROWS_AS(Model(c, 1), ConfigError);
        c = small_config();
        c.num_labels = 0;
        CHECK_THROWS_AS(Model(c, 1), ConfigError);
        c = small_config();
        c.disc_layers = 0;
        CHECK_THROWS_AS(Model(c, 1), ConfigError);
    }
}

TEST_CASE("discriminate") {
    ParameterStore store;
    const MlpHead head(Group::D, {2, 2});
    store.add(Group::D, "layer0.weight", Tensor2(2, 2));
    store.add(Group::D, "layer0.bias", Tensor2(1, 2));
    Tape tape;
    {
        Binding b(tape, store, {});
        auto p = discriminate(head, b, tape.constant(Tensor2::from({{1, 2}, {-3, 4}})));
        CHECK(p.value() == Tensor2::from({{0.5, 0.5}, {0.5, 0.5}}));
    }
    store.at(Group::D, "layer0.bias") = Tensor2::from({{std::log(3.0), 0}});
    Binding b(tape, store, {});
    auto p = discriminate(head, b, tape.constant(Tensor2(1, 2)));
    CHECK(p.value()(0, 0) == doctest::Approx(0.75));
    CHECK(p.value()(0, 1) == doctest::Approx(0.25));

    const Model m(small_config(), 5);
    std::mt19937_64 rng(1);
    const Tensor2 z = oracle::to_tensor(oracle::random_mat(6, 6, rng, -20, 20));
    const Tensor2 probs = m.discriminator_probs(z);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        CHECK(probs(r, 0) > 0.0);
        CHECK(probs(r, 1) < 1.0);
        CHECK(std::abs(probs(r, 0) + probs(r, 1) - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(m.discriminator_probs(Tensor2(2, 5)), DimensionError);
    CHECK_THROWS_AS(discriminate(MlpHead(Group::D, {2, 3}), b, tape.constant(Tensor2(1, 2))), ContractError);
}

TEST_CASE("classify_labels") {
    ParameterStore store;
    const LabelClassifier cls(3, 3);
    store.add(Group::P, "weight", Tensor2::identity(3));
    Tape tape;
    Binding b(tape, store, {});

    auto p = cls.classify(b, tape.constant(Tensor2::from({{1, 0, 0}})), 1.0);
    CHECK(p.value()(0, 0) > p.value()(0, 1));
    CHECK(p.value()(0, 0) > p.value()(0, 2));

    auto z = tape.constant(Tensor2::from({{0.9, -0.4, 0.1}}));
    auto far = cls.classify(b, z, 1e6);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(far.value()(0, c) - 1.0 / 3.0) < 1e-4);

    std::mt19937_64 rng(21);
    const Tensor2 zr = oracle::to_tensor(oracle::random_mat(1, 3, rng, -3, 3));
    auto p1 = cls.classify(b, tape.constant(zr), 1.0).value();
    auto p4 = cls.classify(b, tape.constant(zr), 4.0).value();
    auto argmax = [](const Tensor2& t) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < t.cols(); ++c)
            if (t(0, c) > t(0, best)) best = c;
        return best;
    };
    auto entropy = [](const Tensor2& t) {
        double h = 0.0;
        for (double v : t.data()) h -= v * std::log(v);
        return h;
    };
    CHECK(argmax(p1) == argmax(p4));
    CHECK(entropy(p4) > entropy(p1));
    CHECK_THROWS_AS(cls.classify(b, z, 0.0), ConfigError);
    CHECK_THROWS_AS(cls.classify(b, z, -1.0), ConfigError);
    CHECK_THROWS_AS(cls.logits(b, tape.constant(Tensor2(1, 2))), DimensionError);
}

TEST_CASE("renormalize") {
    Tensor2 w = Tensor2::from({{3, 1}, {4, 0}, {0, 0}});
    LabelClassifier::renormalize(w);
    CHECK(w(0, 0) == doctest::Approx(0.6));
    CHECK(w(1, 0) == doctest::Approx(0.8));
    CHECK(w(2, 0) == 0.0);
    CHECK(w(0, 1) == 1.0);
    Tensor2 again = w;
    LabelClassifier::renormalize(again);
    CHECK(max_abs_diff(again, w) < 1e-16);
    Tensor2 zero = Tensor2::from({{1, 0}, {0, 0}});
    CHECK_THROWS_AS(LabelClassifier::renormalize(zero), DegenerateError);
}

// ---------------------------------------------------------------------------
// projection

TEST_CASE("project_feature") {
    const std::vector<double> z{0.3, -1.2, 2.0};
    const auto self = project_feature(z, z);
    for (std::size_t i = 0; i < 3; ++i) CHECK(self[i] == doctest::Approx(z[i]));
    const std::vector<double> a{1, 0}, b{0, 5};
    const auto orth = project_feature(a, b);
    CHECK(orth[0] == 0.0);
    CHECK(orth[1] == 0.0);
    const std::vector<double> s{1, 1}, d{2, 0};
    const auto p = project_feature(s, d);
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(p[1] == 0.0);
    const std::vector<double> zero{0, 0};
    CHECK_THROWS_AS(project_feature(s, zero), DegenerateError);
    const std::vector<double> three{1, 2, 3};
    CHECK_THROWS_AS(project_feature(s, three), DimensionError);
}

TEST_CASE("similarity matrices") {
    std::mt19937_64 rng(5);
    SUBCASE("unit rows against themselves give a unit diagonal") {
        Tape tape;
        Tensor2 u = oracle::to_tensor(oracle::random_mat(4, 3, rng));
        for (std::size_t r = 0; r < 4; ++r) {
            const auto v = oracle::unit(oracle::to_mat(u)[r]);
            for (std::size_t c = 0; c < 3; ++c) u(r, c) = v[c];
        }
        const auto a = similarity_matrices(EmbeddingPair(tape.constant(u), tape.constant(u)));
        for (std::size_t j = 0; j < 4; ++j) CHECK(a.image_to_text.value()(j, j) == doctest::Approx(1.0));
    }
    SUBCASE("matrix form equals per-pair projection lengths") {
        Tape tape;
        const auto zi = oracle::random_mat(5, 3, rng), zt = oracle::random_mat(5, 3, rng);
        const auto a = similarity_matrices(EmbeddingPair(tape.constant(oracle::to_tensor(zi)), tape.constant(oracle::to_tensor(zt))));
        for (std::size_t j = 0; j < 5; ++j) {
            for (std::size_t k = 0; k < 5; ++k) {
                const auto p = project_feature(zi[j], zt[k]);
                const double signed_len = oracle::dot(p, oracle::unit(zt[k]));
                CHECK(std::abs(a.image_to_text.value()(j, k) - signed_len) < 1e-10);
                CHECK(std::abs(a.image_to_text.value()(j, k) - oracle::dot(zi[j], oracle::unit(zt[k]))) < 1e-10);
                CHECK(std::abs(a.text_to_image.value()(j, k) - oracle::dot(zt[j], oracle::unit(zi[k]))) < 1e-10);
                CHECK(std::abs(a.image_to_text.value()(j, k)) <= oracle::norm(zi[j]) + 1e-12);
            }
        }
    }
    SUBCASE("N = 2 by hand") {
        Tape tape;
        const Tensor2 zi = Tensor2::from({{1, 1}, {2, 0}}), zt = Tensor2::from({{2, 0}, {0, 3}});
        const auto a = similarity_matrices(EmbeddingPair(tape.constant(zi), tape.constant(zt)));
        CHECK(a.image_to_text.value() == Tensor2::from({{1, 1}, {2, 0}}));
        CHECK(max_abs_diff(a.text_to_image.value(), Tensor2::from({{std::sqrt(2.0), 2}, {3 / std::sqrt(2.0), 0}})) <
              1e-15);
    }
    SUBCASE("scaling the image side scales A_it") {
        Tape tape;
        const auto zi = oracle::to_tensor(oracle::random_mat(4, 3, rng)), zt = oracle::to_tensor(oracle::random_mat(4, 3, rng));
        Tensor2 scaled = zi;
        for (double& v : scaled.data()) v *= 2.5;
        const auto a = similarity_matrices(EmbeddingPair(tape.constant(zi), tape.constant(zt)));
        const auto b = similarity_matrices(EmbeddingPair(tape.constant(scaled), tape.constant(zt)));
        for (std::size_t i = 0; i < 16; ++i) {
            CHECK(std::abs(b.image_to_text.value()[i] - 2.5 * a.image_to_text.value()[i]) < 1e-12);
        }
    }
    SUBCASE("errors") {
        Tape tape;
        CHECK_THROWS_AS(EmbeddingPair(tape.constant(Tensor2(2, 3, 1.0)), tape.constant(Tensor2(3, 3, 1.0))),
                        DimensionError);
        CHECK_THROWS_AS(similarity_matrices(EmbeddingPair(tape.constant(Tensor2::from({{1, 0}, {0, 0}})),
                                                          tape.constant(Tensor2::from({{1, 0}, {0, 1}})))),
                        DegenerateError);
    }
}

TEST_CASE("paired projections match the per-row formula") {
    std::mt19937_64 rng(8);
    Tape tape;
    const auto zi = oracle::random_mat(4, 3, rng), zt = oracle::random_mat(4, 3, rng);
    const auto p = paired_projections(EmbeddingPair(tape.constant(oracle::to_tensor(zi)), tape.constant(oracle::to_tensor(zt))));
    for (std::size_t j = 0; j < 4; ++j) {
        const auto it = project_feature(zi[j], zt[j]);
        const auto ti = project_feature(zt[j], zi[j]);
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(std::abs(p.image_to_text.value()(j, c) - it[c]) < 1e-12);
            CHECK(std::abs(p.text_to_image.value()(j, c) - ti[c]) < 1e-12);
        }
    }
}

TEST_CASE("supervisory matrix") {
    const std::vector<Label> distinct{4, 9};
    const Tensor2 q = supervisory_matrix(distinct);
    CHECK(q(0, 0) == doctest::Approx(0.7310585786300049));
    CHECK(q(0, 1) == doctest::Approx(0.2689414213699951));
    CHECK(q(1, 1) == doctest::Approx(0.7310585786300049));

    const std::vector<Label> same{2, 2, 2};
    const Tensor2 u = supervisory_matrix(same);
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0));

    const std::vector<Label> labels{0, 1, 0, 2, 1};
    const Tensor2 base = supervisory_matrix(labels);
    const auto expected = oracle::supervisory(labels);
    for (std::size_t j = 0; j < 5; ++j) {
        double row = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
            row += base(j, k);
            CHECK(std::abs(base(j, k) - expected[j][k]) < 1e-15);
            for (std::size_t k2 = 0; k2 < 5; ++k2) {
                if (labels[j] == labels[k] && labels[j] != labels[k2]) CHECK(base(j, k) > base(j, k2));
            }
        }
        CHECK(std::abs(row - 1.0) < 1e-12);
    }
    // Relabeling does not change Q; permuting the batch permutes it.
    const std::vector<Label> relabeled{7, 3, 7, 5, 3};
    CHECK(supervisory_matrix(relabeled) == base);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<Label> permuted;
    for (std::size_t i : perm) permuted.push_back(labels[i]);
    const Tensor2 qp = supervisory_matrix(permuted);
    for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t k = 0; k < 5; ++k) CHECK(qp(j, k) == base(perm[j], perm[k]));
    CHECK_THROWS_AS(supervisory_matrix(std::vector<Label>{}), ContractError);
}
