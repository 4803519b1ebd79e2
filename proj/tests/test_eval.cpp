#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/eval.hpp"

using namespace xmodal;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("xmodal_eval_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<Label> labels_of(std::size_t n, int classes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> u(0, classes - 1);
    std::vector<Label> y(n);
    for (auto& v : y) v = u(rng);
    return y;
}

}  // namespace

TEST_CASE("identity embeddings retrieve perfectly") {
    const Tensor2 z = Tensor2::identity(4);
    const std::vector<Label> y{0, 1, 2, 3};
    for (Direction d : {Direction::ImageToText, Direction::TextToImage}) {
        const RetrievalResult r = evaluate_retrieval(z, z, y, y, d);
        CHECK(r.recall_at.at(1) == 1.0);
        CHECK(r.recall_at.at(10) == 1.0);
        CHECK(r.mean_ap == 1.0);
        CHECK(r.queries == 4);
        CHECK(r.excluded == 0);
        CHECK(r.pr_curve.size() == 4);
        CHECK(r.pr_curve.front() == PrPoint{1.0, 1.0});
    }
}

TEST_CASE("the match ranked second") {
    // The query sits closest to a wrong-label item; its own match comes second.
    const Tensor2 zi = Tensor2::from({{1, 0}});
    const Tensor2 zt = Tensor2::from({{1, 1}, {1, 0.1}, {-1, 0}});
    const std::vector<Label> yi{0}, yt{0, 1, 1};
    const std::vector<int> ks{1, 2, 5};
    const RetrievalResult r = evaluate_retrieval(zi, zt, yi, yt, Direction::ImageToText, ks);
    CHECK(r.recall_at.at(1) == 0.0);
    CHECK(r.recall_at.at(2) == 1.0);
    CHECK(r.recall_at.at(5) == 1.0);
    CHECK(r.mean_ap == doctest::Approx(0.5));
}

TEST_CASE("ties go to the lower gallery index") {
    const Tensor2 zi = Tensor2::from({{1, 0}});
    const Tensor2 zt = Tensor2::from({{2, 0}, {1, 0}});
    const std::vector<int> ks{1};
    CHECK(evaluate_retrieval(zi, zt, std::vector<Label>{1}, std::vector<Label>{0, 1}, Direction::ImageToText, ks)
              .recall_at.at(1) == 0.0);
    CHECK(evaluate_retrieval(zi, zt, std::vector<Label>{0}, std::vector<Label>{0, 1}, Direction::ImageToText, ks)
              .recall_at.at(1) == 1.0);
}

TEST_CASE("retrieval against brute force") {
    std::mt19937_64 rng(5);
    const std::vector<int> ks{1, 5, 10, 20};
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t ni = 50, nt = 50 + trial;
        const auto zi = oracle::random_mat(ni, 6, rng), zt = oracle::random_mat(nt, 6, rng);
        const auto yi = labels_of(ni, 12, rng), yt = labels_of(nt, 10, rng);
        const auto got_it = evaluate_retrieval(oracle::to_tensor(zi), oracle::to_tensor(zt), yi, yt,
                                               Direction::ImageToText, ks);
        const auto got_ti = evaluate_retrieval(oracle::to_tensor(zi), oracle::to_tensor(zt), yi, yt,
                                               Direction::TextToImage, ks);
        const auto want_it = oracle::retrieval(zi, zt, yi, yt, ks);
        const auto want_ti = oracle::retrieval(zt, zi, yt, yi, ks);
        for (int k : ks) {
            CHECK(got_it.recall_at.at(k) == want_it.recall_at.at(k));
            CHECK(got_ti.recall_at.at(k) == want_ti.recall_at.at(k));
        }
        CHECK(std::abs(got_it.mean_ap - want_it.mean_ap) < 1e-12);
        CHECK(std::abs(got_ti.mean_ap - want_ti.mean_ap) < 1e-12);
        CHECK(got_it.queries == want_it.queries);
        CHECK(got_it.excluded == want_it.excluded);
        CHECK(got_ti.excluded == want_ti.excluded);
    }
}

TEST_CASE("retrieval properties") {
    std::mt19937_64 rng(6);
    const auto zi = oracle::to_tensor(oracle::random_mat(30, 4, rng));
    const auto zt = oracle::to_tensor(oracle::random_mat(30, 4, rng));
    const auto yi = labels_of(30, 5, rng), yt = labels_of(30, 5, rng);
    const std::vector<int> ks{1, 2, 5, 10, 30};
    const auto base = evaluate_retrieval(zi, zt, yi, yt, Direction::ImageToText, ks);
    SUBCASE("positive scaling changes nothing") {
        Tensor2 si = zi;
        for (double& v : si.data()) v *= 7.5;
        const auto scaled = evaluate_retrieval(si, zt, yi, yt, Direction::ImageToText, ks);
        CHECK(scaled.recall_at == base.recall_at);
        CHECK(std::abs(scaled.mean_ap - base.mean_ap) < 1e-12);
    }
    SUBCASE("recall is monotone in K and PR is valid") {
        double prev = 0.0;
        for (int k : ks) {
            CHECK(base.recall_at.at(k) >= prev);
            prev = base.recall_at.at(k);
        }
        CHECK(base.recall_at.at(30) == 1.0);
        REQUIRE(base.pr_curve.size() == 30);
        for (std::size_t i = 0; i < base.pr_curve.size(); ++i) {
            CHECK(base.pr_curve[i].precision >= 0.0);
            CHECK(base.pr_curve[i].precision <= 1.0);
            if (i > 0) CHECK(base.pr_curve[i].recall >= base.pr_curve[i - 1].recall);
        }
        CHECK(base.pr_curve.back().recall == doctest::Approx(1.0));
        CHECK(base.mean_ap > 0.0);
        CHECK(base.mean_ap <= 1.0);
    }
    SUBCASE("queries with no relevant item are excluded") {
        std::vector<Label> qy = yi;
        qy[0] = 99;
        qy[3] = 98;
        const auto r = evaluate_retrieval(zi, zt, qy, yt, Direction::ImageToText, ks);
        CHECK(r.excluded == 2);
        CHECK(r.queries == 28);
    }
    SUBCASE("bad input") {
        CHECK_THROWS_AS(evaluate_retrieval(zi, zt, std::vector<Label>{0}, yt, Direction::ImageToText), DimensionError);
        CHECK_THROWS_AS(evaluate_retrieval(zi, Tensor2(30, 3), yi, yt, Direction::ImageToText), DimensionError);
    }
}

TEST_CASE("modality probe") {
    std::mt19937_64 rng(8);
    SUBCASE("one shared distribution is at chance") {
        const auto a = oracle::to_tensor(oracle::random_mat(400, 8, rng));
        const auto b = oracle::to_tensor(oracle::random_mat(400, 8, rng));
        CHECK(std::abs(probe_accuracy(a, b) - 0.5) < 0.1);
    }
    SUBCASE("shifted distributions are separable") {
        const auto a = oracle::to_tensor(oracle::random_mat(200, 8, rng, -1.0, 1.0));
        const auto b = oracle::to_tensor(oracle::random_mat(200, 8, rng, 1.5, 3.5));
        CHECK(probe_accuracy(a, b) > 0.95);
    }
    SUBCASE("deterministic") {
        const auto a = oracle::to_tensor(oracle::random_mat(100, 4, rng));
        const auto b = oracle::to_tensor(oracle::random_mat(100, 4, rng, 0.0, 1.5));
        CHECK(probe_accuracy(a, b) == probe_accuracy(a, b));
    }
    SUBCASE("entropy") {
        CHECK(mean_entropy(Tensor2(5, 2, 0.5)) == doctest::Approx(std::log(2.0)));
        CHECK(mean_entropy(Tensor2::from({{1, 0}, {0, 1}})) == 0.0);
        const GapProbe g = probe_gap(oracle::to_tensor(oracle::random_mat(50, 3, rng)),
                                     oracle::to_tensor(oracle::random_mat(50, 3, rng)), Tensor2(50, 2, 0.5),
                                     Tensor2(50, 2, 0.5));
        CHECK(g.mean_entropy == doctest::Approx(std::log(2.0)));
    }
}

TEST_CASE("model evaluation on identity heads") {
    SyntheticSpec s;
    s.num_classes = 5;
    s.items_per_class = 12;
    s.texts_per_image = 3;
    s.image_dim = 8;
    s.text_dim = 8;
    const Dataset d = generate_synthetic(s);
    ModelConfig mc;
    mc.image_dim = 8;
    mc.text_dim = 8;
    mc.embed_dim = 8;
    mc.head_layers = 1;
    mc.num_labels = 5;
    mc.identity_heads = true;
    const Model m(mc, 1);
    const SplitEmbeddings raw = split_features(d, Split::Test);
    const SplitEmbeddings emb = embed_split(m, d, Split::Test);
    CHECK(raw.image == emb.image);
    CHECK(raw.text == emb.text);
    CHECK(emb.text.rows() == 3 * emb.image.rows());
    const EvaluationReport a = evaluate_model(m, d, Split::Test);
    const EvaluationReport b = evaluate_model(m, d, Split::Test);
    REQUIRE(a.retrieval.size() == 2);
    const auto want = oracle::retrieval(oracle::to_mat(raw.image), oracle::to_mat(raw.text), raw.image_labels,
                                        raw.text_labels, {1, 5, 10});
    CHECK(a.retrieval[0].recall_at == want.recall_at);
    CHECK(a.retrieval[0].mean_ap == b.retrieval[0].mean_ap);
    CHECK(a.gap.probe_accuracy == b.gap.probe_accuracy);
    CHECK(a.image_label_accuracy == b.image_label_accuracy);
    CHECK(a.image_label_accuracy >= 0.0);
    CHECK(a.image_label_accuracy <= 1.0);
}

TEST_CASE("csv reports") {
    const fs::path dir = temp_dir("csv");
    std::mt19937_64 rng(9);
    const auto zi = oracle::to_tensor(oracle::random_mat(12, 3, rng));
    const auto zt = oracle::to_tensor(oracle::random_mat(12, 3, rng));
    const auto y = labels_of(12, 3, rng);
    const std::vector<RetrievalResult> rs{evaluate_retrieval(zi, zt, y, y, Direction::ImageToText),
                                          evaluate_retrieval(zi, zt, y, y, Direction::TextToImage)};
    SUBCASE("metrics round trip") {
        write_metrics_csv(dir / "metrics.csv", rs);
        const auto back = read_metrics_csv(dir / "metrics.csv");
        REQUIRE(back.size() == 2);
        for (std::size_t i = 0; i < 2; ++i) {
            CHECK(back[i].direction == rs[i].direction);
            CHECK(back[i].recall_at == rs[i].recall_at);
            CHECK(back[i].mean_ap == rs[i].mean_ap);
            CHECK(back[i].queries == rs[i].queries);
        }
    }
    SUBCASE("pr round trip and the empty curve") {
        write_pr_csv(dir / "pr.csv", rs[0].pr_curve);
        CHECK(read_pr_csv(dir / "pr.csv") == rs[0].pr_curve);
        write_pr_csv(dir / "empty.csv", {});
        std::ifstream in(dir / "empty.csv");
        std::string header, rest;
        std::getline(in, header);
        CHECK(header == "recall,precision");
        CHECK_FALSE(std::getline(in, rest));
        CHECK(read_pr_csv(dir / "empty.csv").empty());
    }
    SUBCASE("loss trace round trip") {
        EpochReport e;
        e.epoch = 3;
        for (LossTerm t : kAllLosses) e.losses[t] = 0.1 * static_cast<double>(static_cast<int>(t)) + 1.0 / 3.0;
        e.disc_loss = 0.7;
        e.disc_accuracy = 0.55;
        e.lr1 = 2e-5;
        e.lr2 = 2e-4;
        e.generator_steps = 40;
        e.discriminator_steps = 8;
        write_loss_trace_csv(dir / "trace.csv", {e, e});
        const auto back = read_loss_trace_csv(dir / "trace.csv");
        REQUIRE(back.size() == 2);
        CHECK(back[0].losses == e.losses);
        CHECK(back[1].epoch == 3);
        CHECK(back[0].generator_steps == 40);
    }
    SUBCASE("shortest round-trip doubles") {
        for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 0.0, 123456789.125}) CHECK(std::stod(format_double(v)) == v);
        CHECK(format_double(0.1) == "0.1");
    }
    SUBCASE("emit writes every file") {
        EvaluationReport rep;
        rep.retrieval = rs;
        emit_reports(dir / "out", rep, {});
        for (const char* f : {"metrics.csv", "gap.csv", "loss_trace.csv"}) CHECK(fs::exists(dir / "out" / f));
    }
    fs::remove_all(dir);
}
