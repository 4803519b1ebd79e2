#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "xmodal/cli.hpp"
#include "xmodal/config.hpp"
#include "xmodal/errors.hpp"

using namespace xmodal;
namespace fs = std::filesystem;

namespace {

struct Scratch {
    fs::path root;
    Scratch() {
        root = fs::temp_directory_path() / ("xmodal_cli_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Scratch() { fs::remove_all(root); }
    fs::path operator/(const std::string& s) const { return root / s; }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "xmodal");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    return cli::run(static_cast<int>(args.size()), argv.data());
}

RunConfig tiny() {
    RunConfig c;
    c.data.num_classes = 4;
    c.data.items_per_class = 10;
    c.data.texts_per_image = 2;
    c.data.image_dim = 6;
    c.data.text_dim = 5;
    c.data.latent_dim = 3;
    c.train.model.embed_dim = 8;
    c.train.batch_size = 8;
    c.train.epochs = 2;
    c.train.k_steps = 2;
    c.train.optimizer = OptimizerKind::Adam;
    c.train.lr2 = 1e-3;
    c.probe.iterations = 50;
    return c;
}

const char* kTinySets[] = {"data.num_classes=4", "data.items_per_class=10", "data.texts_per_image=2",
                           "data.image_dim=6",   "data.text_dim=5",         "data.latent_dim=3",
                           "model.embed_dim=8",  "train.batch_size=8",      "train.epochs=2",
                           "probe.iterations=50"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
    for (const char* s : kTinySets) {
        args.push_back("--set");
        args.push_back(s);
    }
    return args;
}

}  // namespace

TEST_CASE("config text") {
    SUBCASE("sections, comments and dotted keys") {
        RunConfig c;
        parse_config_text(c, "# top\n[train]\ntau = 2.5  # inline\nmodel.embed_dim = 16\n[data]\nseed = 9\n");
        CHECK(c.train.tau == 2.5);
        CHECK(c.train.model.embed_dim == 16);
        CHECK(c.data.seed == 9);
    }
    SUBCASE("dump round trip") {
        RunConfig c = tiny();
        c.train.paradigm = Paradigm::Separate;
        c.train.preset = Preset::Baseline2;
        c.train.tau = 1.0 / 3.0;
        c.eval_split = Split::Val;
        RunConfig back;
        parse_config_text(back, dump_config(c));
        CHECK(dump_config(back) == dump_config(c));
        CHECK(back.train.tau == c.train.tau);
        CHECK(back.train.paradigm == Paradigm::Separate);
        CHECK(back.eval_split == Split::Val);
        for (const std::string& k : config_keys()) CHECK(get_setting(back, k) == get_setting(c, k));
    }
    SUBCASE("errors") {
        RunConfig c;
        CHECK_THROWS_AS(parse_config_text(c, "train.nope = 1\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text(c, "train.tau = abc\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text(c, "train.tau\n"), ConfigError);
        CHECK_THROWS_AS(apply_override(c, "train.paradigm=both"), ConfigError);
        CHECK_THROWS_AS(apply_override(c, "no_equals_sign"), ConfigError);
        try {
            parse_config_text(c, "\n\ntrain.bogus = 1\n", "file.cfg");
            FAIL("expected a config error");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("file.cfg:3") != std::string::npos);
        }
    }
}

TEST_CASE("generate") {
    Scratch s;
    const RunConfig c = tiny();
    cli::generate(c, s / "a", false);
    for (const char* f : {"manifest.txt", "images.xmf", "texts.xmf", "effective.cfg"}) CHECK(fs::exists(s / "a" / f));
    const Dataset d = load_dataset(s / "a" / "manifest.txt");
    CHECK(d.images.rows() == 40);
    CHECK(d.texts.rows() == 2 * d.images.rows());
    cli::generate(c, s / "b", false);
    CHECK(slurp(s / "a" / "images.xmf") == slurp(s / "b" / "images.xmf"));
    CHECK(slurp(s / "a" / "manifest.txt") == slurp(s / "b" / "manifest.txt"));
    CHECK_THROWS_AS(cli::generate(c, s / "a", false), ConfigError);
    CHECK_NOTHROW(cli::generate(c, s / "a", true));
    CHECK(run_cli(with_tiny({"generate", "--out", (s / "a").string()})) == cli::kConfigError);

    SUBCASE("five captions per image") {
        RunConfig five = tiny();
        five.data.texts_per_image = 5;
        cli::generate(five, s / "five", false);
        const Dataset f = load_dataset(s / "five" / "manifest.txt");
        CHECK(f.texts.rows() == 5 * f.images.rows());
    }
}

TEST_CASE("train, resume and evaluate") {
    Scratch s;
    RunConfig c = tiny();
    c.train.preset = Preset::Baseline1;
    cli::TrainOptions opt;
    const auto start = std::chrono::steady_clock::now();
    const auto trace = cli::train(c, s / "run", opt);
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() < 60.0);
    REQUIRE(trace.size() == 2);
    for (const char* f : {"checkpoint_epoch0.xmck", "checkpoint.xmck", "epochs.jsonl", "loss_trace.csv", "effective.cfg"})
        CHECK(fs::exists(s / "run" / f));
    const auto log = cli::read_epoch_log(s / "run" / "epochs.jsonl");
    REQUIRE(log.size() == 2);
    CHECK(log[1].same_values(trace[1]));
    CHECK(log[0].preset == Preset::Baseline1);

    SUBCASE("resume continues the same run") {
        RunConfig more = c;
        more.train.epochs = 4;
        const auto straight = cli::train(more, s / "straight", opt);
        cli::TrainOptions r;
        r.resume = true;
        const auto resumed = cli::train(more, s / "run", r);
        REQUIRE(resumed.size() == 4);
        for (std::size_t e = 0; e < 4; ++e) {
            for (LossTerm t : kAllLosses)
                CHECK(std::abs(resumed[e].losses.at(t) - straight[e].losses.at(t)) <= 1e-12);
        }
        CHECK(cli::read_epoch_log(s / "run" / "epochs.jsonl").size() == 4);
    }
    SUBCASE("resume refuses a different preset") {
        RunConfig other = c;
        other.train.preset = Preset::Full;
        other.train.epochs = 3;
        cli::TrainOptions r;
        r.resume = true;
        CHECK_THROWS_AS(cli::train(other, s / "run", r), CheckpointError);
    }
    SUBCASE("evaluate twice gives the same reports") {
        cli::evaluate(c, s / "run" / "checkpoint.xmck", std::nullopt, s / "e1");
        cli::evaluate(c, s / "run" / "checkpoint.xmck", std::nullopt, s / "e2");
        for (const char* f : {"metrics.csv", "pr_image_to_text.csv", "pr_text_to_image.csv", "gap.csv", "loss_trace.csv"}) {
            INFO(std::string(f));
            REQUIRE(fs::exists(s / "e1" / f));
            CHECK(slurp(s / "e1" / f) == slurp(s / "e2" / f));
        }
        CHECK(read_loss_trace_csv(s / "e1" / "loss_trace.csv").size() == 2);
    }
    SUBCASE("evaluate refuses a checkpoint of another shape") {
        RunConfig other = c;
        other.train.model.embed_dim = 4;
        CHECK_THROWS_AS(cli::evaluate(other, s / "run" / "checkpoint.xmck", std::nullopt, s / "bad"), CheckpointError);
        CHECK(run_cli({"evaluate", "--checkpoint", (s / "missing.xmck").string(), "--out", (s / "m").string()}) ==
              cli::kLoadError);
    }
    SUBCASE("training refuses a non-empty directory") {
        CHECK_THROWS_AS(cli::train(c, s / "run", opt), ConfigError);
    }
}

TEST_CASE("evaluation with identity heads is deterministic") {
    Scratch s;
    RunConfig c = tiny();
    c.data.image_dim = 8;
    c.data.text_dim = 8;
    c.train.model.embed_dim = 8;
    c.train.model.head_layers = 1;
    c.train.model.identity_heads = true;
    c.train.epochs = 0;
    cli::train(c, s / "run", {});
    const EvaluationReport a = cli::evaluate(c, s / "run" / "checkpoint.xmck", std::nullopt, s / "e1");
    const EvaluationReport b = cli::evaluate(c, s / "run" / "checkpoint.xmck", std::nullopt, s / "e2");
    const Dataset d = cli::resolve_dataset(c, std::nullopt);
    const SplitEmbeddings raw = split_features(d, Split::Test);
    const auto want = evaluate_retrieval(raw.image, raw.text, raw.image_labels, raw.text_labels, Direction::ImageToText);
    CHECK(a.retrieval[0].recall_at == want.recall_at);
    CHECK(a.retrieval[0].mean_ap == want.mean_ap);
    CHECK(a.retrieval[1].mean_ap == b.retrieval[1].mean_ap);
}

TEST_CASE("separate paradigm records") {
    Scratch s;
    RunConfig c = tiny();
    c.train.paradigm = Paradigm::Separate;
    c.train.reversal_weight = 0.1;
    c.train.epochs = 1;
    cli::train(c, s / "run", {});
    const std::string line = slurp(s / "run" / "epochs.jsonl");
    CHECK(line.find("\"paradigm\":\"separate\"") != std::string::npos);
    CHECK(cli::read_epoch_log(s / "run" / "epochs.jsonl").front().paradigm == Paradigm::Separate);
}

TEST_CASE("epoch records round trip") {
    EpochReport e;
    e.epoch = 4;
    for (LossTerm t : kAllLosses) e.losses[t] = 1.0 / (3.0 + static_cast<int>(t));
    e.disc_loss = 0.6931;
    e.disc_accuracy = 0.5;
    e.generator_steps = 10;
    e.discriminator_steps = 2;
    e.paradigm = Paradigm::Separate;
    e.preset = Preset::Baseline3;
    CHECK(cli::parse_epoch_record(cli::epoch_record(e)).same_values(e));
    CHECK_THROWS(cli::parse_epoch_record("{not json"));
}

TEST_CASE("sweep") {
    Scratch s;
    RunConfig c = tiny();
    c.train.epochs = 1;
    c.train.preset = Preset::Baseline2;
    const auto rows = cli::sweep(c, "train.tau", {"1", "2", "4"}, s / "sw", {});
    REQUIRE(rows.size() == 3);
    std::ifstream in(s / "sw" / "sweep.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "train.tau,i2t_R@1,i2t_R@10,i2t_mAP,t2i_R@1,t2i_R@10,t2i_mAP");
    std::vector<std::string> first;
    while (std::getline(in, line)) first.push_back(line.substr(0, line.find(',')));
    CHECK(first == std::vector<std::string>{"1", "2", "4"});
    for (int i = 0; i < 3; ++i) {
        RunConfig back;
        load_config_file(back, s / "sw" / ("run_" + std::to_string(i)) / "effective.cfg");
        CHECK(back.train.tau == std::stod(rows[i].value));
    }
    CHECK_THROWS_AS(cli::sweep(c, "train.nope", {"1"}, s / "bad", {}), ConfigError);
}

TEST_CASE("gradcheck and exit codes") {
    Scratch s;
    std::ostringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    const int ok = run_cli({"gradcheck", "--out", (s / "g1").string()});
    const std::string report = sink.str();
    const int broken = run_cli({"gradcheck", "--out", (s / "g2").string(), "--corrupt", "matmul"});
    const int unknown = run_cli({"train", "--set", "train.bogus=1", "--out", (s / "t").string()});
    const int usage = run_cli({"frobnicate"});
    const int bad_data = run_cli({"train", "--data", (s / "nowhere").string(), "--out", (s / "t2").string()});
    std::cout.rdbuf(old);
    CHECK(ok == cli::kOk);
    for (const char* name : {"L_s", "L_c", "L_kl", "L_ce", "L_di", "L_tr"}) CHECK(report.find(name) != std::string::npos);
    CHECK(broken == cli::kGradcheckFailed);
    CHECK(sink.str().find("failing op: matmul") != std::string::npos);
    CHECK(unknown == cli::kConfigError);
    CHECK(usage == cli::kConfigError);
    CHECK(bad_data == cli::kLoadError);
    CHECK(fs::exists(s / "g1" / "effective.cfg"));
}

TEST_CASE("command line training run") {
    Scratch s;
    std::ostringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    const int gen = run_cli(with_tiny({"generate", "--out", (s / "data").string()}));
    const int tr = run_cli(with_tiny({"train", "--data", (s / "data").string(), "--out", (s / "run").string(),
                                      "--preset", "baseline1", "--seed", "3"}));
    const int ev = run_cli({"evaluate", "--checkpoint", (s / "run" / "checkpoint.xmck").string(), "--data",
                            (s / "data").string(), "--out", (s / "eval").string()});
    std::cout.rdbuf(old);
    CHECK(gen == 0);
    CHECK(tr == 0);
    CHECK(ev == 0);
    RunConfig eff;
    load_config_file(eff, s / "run" / "effective.cfg");
    CHECK(eff.train.preset == Preset::Baseline1);
    CHECK(eff.train.seed == 3);
    CHECK(eff.data.seed == 3);
    CHECK(fs::exists(s / "eval" / "metrics.csv"));
}
