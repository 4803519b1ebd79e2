#include "xmodal/cli.hpp"

#include <spawn.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "xmodal/autodiff.hpp"
#include "xmodal/checkpoint.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/gradcheck.hpp"

extern char** environ;

namespace xmodal::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    out.flush();
    if (!out) throw LoadError("cannot write " + path.string());
}

void prepare_dir(const fs::path& dir, bool force, std::string_view command) {
    std::error_code ec;
    if (fs::exists(dir, ec) && !fs::is_directory(dir, ec)) throw LoadError(dir.string() + " is not a directory");
    if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force) {
        throw ConfigError(std::string(command) + ": output directory " + dir.string() +
                          " is not empty (pass --force to overwrite)");
    }
    fs::create_directories(dir);
}

// Write-then-rename so an interrupted run never leaves a torn checkpoint.
void save_checkpoint_atomic(const fs::path& path, const Checkpoint& c) {
    fs::path tmp = path;
    tmp += ".tmp";
    save_checkpoint(tmp, c);
    fs::rename(tmp, path);
}

TrainConfig sized(TrainConfig t, const Dataset& data) {
    t.model.image_dim = data.image_dim();
    t.model.text_dim = data.text_dim();
    t.model.num_labels = data.num_labels;
    return t;
}

void check_meta(const Checkpoint& c, std::string_view key, const std::string& expected) {
    const auto it = c.meta.find(std::string(key));
    if (it != c.meta.end() && it->second != expected) {
        throw CheckpointError("checkpoint " + std::string(key) + " is " + it->second + ", config has " + expected);
    }
}

void check_shape_meta(const Checkpoint& c, const TrainConfig& t) {
    check_meta(c, "embed_dim", std::to_string(t.model.embed_dim));
    check_meta(c, "image_dim", std::to_string(t.model.image_dim));
    check_meta(c, "text_dim", std::to_string(t.model.text_dim));
    check_meta(c, "num_labels", std::to_string(t.model.num_labels));
}

std::string progress_line(const EpochReport& r) {
    std::ostringstream s;
    s << "epoch " << r.epoch << " [" << paradigm_name(r.paradigm) << "/" << preset_name(r.preset) << "]";
    for (const auto& [t, v] : r.losses) s << " " << loss_name(t) << "=" << std::setprecision(5) << v;
    s << " disc_acc=" << std::setprecision(3) << r.disc_accuracy << " (" << std::setprecision(2) << r.seconds
      << " s)";
    return s.str();
}

}  // namespace

int exit_code_for_current_exception() {
    try {
        throw;
    } catch (const ConfigError&) {
        return kConfigError;
    } catch (const CLI::Error&) {
        return kConfigError;
    } catch (const LoadError&) {
        return kLoadError;
    } catch (const CheckpointError&) {
        return kLoadError;
    } catch (const fs::filesystem_error&) {
        return kLoadError;
    } catch (const DivergenceError&) {
        return kDivergence;
    } catch (const DegenerateError&) {
        return kDivergence;
    } catch (...) {
        return kFailure;
    }
}

fs::path default_output_root() {
    const char* env = std::getenv("XMODAL_OUT_ROOT");
    return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

std::string epoch_record(const EpochReport& r) {
    json j;
    j["epoch"] = r.epoch;
    j["paradigm"] = paradigm_name(r.paradigm);
    j["preset"] = preset_name(r.preset);
    json losses = json::object();
    for (const auto& [t, v] : r.losses) losses[std::string(loss_name(t))] = v;
    j["losses"] = losses;
    j["disc_loss"] = r.disc_loss;
    j["disc_accuracy"] = r.disc_accuracy;
    j["lr1"] = r.lr1;
    j["lr2"] = r.lr2;
    j["generator_steps"] = r.generator_steps;
    j["discriminator_steps"] = r.discriminator_steps;
    j["seconds"] = r.seconds;
    return j.dump();
}

EpochReport parse_epoch_record(const std::string& line) {
    try {
        const json j = json::parse(line);
        EpochReport r;
        r.epoch = j.at("epoch").get<std::size_t>();
        r.paradigm = parse_paradigm(j.at("paradigm").get<std::string>());
        r.preset = parse_preset(j.at("preset").get<std::string>());
        for (LossTerm t : kAllLosses) r.losses[t] = j.at("losses").at(std::string(loss_name(t))).get<double>();
        r.disc_loss = j.at("disc_loss").get<double>();
        r.disc_accuracy = j.at("disc_accuracy").get<double>();
        r.lr1 = j.at("lr1").get<double>();
        r.lr2 = j.at("lr2").get<double>();
        r.generator_steps = j.at("generator_steps").get<std::size_t>();
        r.discriminator_steps = j.at("discriminator_steps").get<std::size_t>();
        r.seconds = j.at("seconds").get<double>();
        return r;
    } catch (const json::exception& e) {
        throw LoadError(std::string("bad epoch record: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("bad epoch record: ") + e.what());
    }
}

std::vector<EpochReport> read_epoch_log(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::vector<EpochReport> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // Divergence diagnostics share the log but are not epoch records.
        if (line.empty() || line.find("\"diverged\"") != std::string::npos) continue;
        try {
            out.push_back(parse_epoch_record(line));
        } catch (const LoadError& e) {
            throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void generate(const RunConfig& cfg, const fs::path& out, bool force) {
    prepare_dir(out, force, "generate");
    const Dataset data = generate_synthetic(cfg.data);
    save_dataset(data, out);
    write_text(out / "effective.cfg", dump_config(cfg));
}

Dataset resolve_dataset(const RunConfig& cfg, const std::optional<fs::path>& data) {
    if (!data) return generate_synthetic(cfg.data);
    fs::path manifest = *data;
    if (fs::is_directory(manifest)) manifest /= "manifest.txt";
    return load_dataset(manifest);
}

std::vector<EpochReport> train(const RunConfig& cfg, const fs::path& out, const TrainOptions& opt) {
    cfg.train.validate();
    const fs::path ckpt_path = out / "checkpoint.xmck";
    const fs::path log_path = out / "epochs.jsonl";
    if (opt.resume) {
        if (!fs::exists(ckpt_path)) throw CheckpointError("--resume: no checkpoint at " + ckpt_path.string());
    } else {
        prepare_dir(out, opt.force, "train");
    }
    const Dataset data = resolve_dataset(cfg, opt.data);
    Trainer trainer(sized(cfg.train, data), data.image_dim(), data.text_dim(), data.num_labels);

    std::vector<EpochReport> trace;
    if (opt.resume) {
        const Checkpoint c = load_checkpoint(ckpt_path);
        check_meta(c, "paradigm", std::string(paradigm_name(cfg.train.paradigm)));
        check_meta(c, "preset", std::string(preset_name(cfg.train.preset)));
        check_shape_meta(c, trainer.config());
        trainer.restore(c);
        if (fs::exists(log_path)) {
            for (const EpochReport& r : read_epoch_log(log_path)) {
                if (r.epoch < trainer.epoch()) trace.push_back(r);
            }
        }
        if (trace.size() != trainer.epoch()) {
            throw CheckpointError("epochs.jsonl holds " + std::to_string(trace.size()) +
                                  " records before the checkpointed epoch " + std::to_string(trainer.epoch()));
        }
        std::string kept;
        for (const EpochReport& r : trace) kept += epoch_record(r) + "\n";
        write_text(log_path, kept);
    } else {
        write_text(log_path, "");
        save_checkpoint_atomic(out / "checkpoint_epoch0.xmck", trainer.checkpoint());
        save_checkpoint_atomic(ckpt_path, trainer.checkpoint());
    }
    write_text(out / "effective.cfg", dump_config(cfg));

    std::ofstream log(log_path, std::ios::app);
    while (trainer.epoch() < cfg.train.epochs) {
        EpochReport r;
        try {
            r = trainer.train_epoch(data);
        } catch (const DivergenceError& e) {
            json j;
            j["diverged"] = e.loss();
            j["epoch"] = e.epoch();
            j["step"] = e.step();
            j["message"] = e.what();
            log << j.dump() << "\n" << std::flush;
            throw;
        }
        save_checkpoint_atomic(ckpt_path, trainer.checkpoint());
        log << epoch_record(r) << "\n" << std::flush;
        if (!log) throw LoadError("cannot append to " + log_path.string());
        if (opt.log != nullptr) *opt.log << progress_line(r) << "\n" << std::flush;
        trace.push_back(std::move(r));
    }
    write_loss_trace_csv(out / "loss_trace.csv", trace);
    return trace;
}

EvaluationReport evaluate(const RunConfig& cfg, const fs::path& checkpoint, const std::optional<fs::path>& data,
                          const fs::path& out) {
    const Checkpoint c = load_checkpoint(checkpoint);
    const Dataset ds = resolve_dataset(cfg, data);
    const TrainConfig t = sized(cfg.train, ds);
    check_shape_meta(c, t);
    Model model(t.model, t.seed);
    restore_params(c.params, model.params());

    const EvaluationReport report = evaluate_model(model, ds, cfg.eval_split, cfg.probe);
    std::vector<EpochReport> trace;
    const fs::path log = checkpoint.parent_path() / "epochs.jsonl";
    if (fs::exists(log)) trace = read_epoch_log(log);
    fs::create_directories(out);
    emit_reports(out, report, trace);
    write_text(out / "effective.cfg", dump_config(cfg));
    return report;
}

void write_sweep_csv(const fs::path& path, const std::string& param, const std::vector<SweepRow>& rows) {
    std::string text = param;
    for (const char* dir : {"i2t", "t2i"}) {
        text += std::string(",") + dir + "_R@1," + dir + "_R@10," + dir + "_mAP";
    }
    text += "\n";
    for (const SweepRow& row : rows) {
        text += row.value;
        for (Direction d : {Direction::ImageToText, Direction::TextToImage}) {
            const RetrievalResult* res = nullptr;
            for (const RetrievalResult& r : row.report.retrieval) {
                if (r.direction == d) res = &r;
            }
            if (res == nullptr) throw ContractError("sweep row lacks a retrieval direction");
            text += "," + format_double(res->recall_at.at(1)) + "," + format_double(res->recall_at.at(10)) + "," +
                    format_double(res->mean_ap);
        }
        text += "\n";
    }
    write_text(path, text);
}

namespace {

pid_t spawn_train(const fs::path& self, const fs::path& config, const fs::path& out,
                  const std::optional<fs::path>& data) {
    std::vector<std::string> args = {self.string(), "train", "--config", config.string(), "--out", out.string(),
                                     "--force"};
    if (data) {
        args.push_back("--data");
        args.push_back(data->string());
    }
    std::vector<char*> argv;
    for (std::string& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ) != 0) {
        throw LoadError("cannot start " + self.string());
    }
    return pid;
}

}  // namespace

std::vector<SweepRow> sweep(const RunConfig& cfg, const std::string& param, const std::vector<std::string>& values,
                            const fs::path& out, const SweepOptions& opt) {
    if (values.empty()) throw ConfigError("sweep: no values given");
    std::vector<RunConfig> runs;
    for (const std::string& v : values) {
        RunConfig r = cfg;
        apply_setting(r, param, v);
        r.train.validate();
        runs.push_back(std::move(r));
    }
    fs::create_directories(out);
    write_text(out / "effective.cfg", dump_config(cfg));

    auto run_dir = [&](std::size_t i) { return out / ("run_" + std::to_string(i)); };
    std::vector<SweepRow> rows(values.size());
    if (opt.parallel) {
        std::vector<pid_t> children;
        for (std::size_t i = 0; i < runs.size(); ++i) {
            prepare_dir(run_dir(i), true, "sweep");
            write_text(run_dir(i) / "requested.cfg", dump_config(runs[i]));
            children.push_back(spawn_train(opt.self, run_dir(i) / "requested.cfg", run_dir(i), opt.data));
        }
        int worst = 0;
        for (pid_t pid : children) {
            int status = 0;
            waitpid(pid, &status, 0);
            const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kFailure;
            if (code != 0 && worst == 0) worst = code;
        }
        if (worst == kDivergence) throw DivergenceError("sweep", -1, -1, "sweep: a run diverged");
        if (worst != 0) throw Error("sweep: a run failed with exit code " + std::to_string(worst));
        for (std::size_t i = 0; i < runs.size(); ++i) rows[i].trace = read_epoch_log(run_dir(i) / "epochs.jsonl");
    } else {
        for (std::size_t i = 0; i < runs.size(); ++i) {
            if (opt.log != nullptr) *opt.log << param << " = " << values[i] << "\n";
            TrainOptions t;
            t.data = opt.data;
            t.force = true;
            t.log = opt.log;
            rows[i].trace = train(runs[i], run_dir(i), t);
        }
    }
    for (std::size_t i = 0; i < runs.size(); ++i) {
        rows[i].value = values[i];
        rows[i].report = evaluate(runs[i], run_dir(i) / "checkpoint.xmck", opt.data, run_dir(i) / "eval");
    }
    write_sweep_csv(out / "sweep.csv", param, rows);
    return rows;
}

// ---------------------------------------------------------------------------
// Argument handling

namespace {

struct CommonArgs {
    std::string config;
    std::string out;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> preset, paradigm;
    std::optional<double> tau, margin;
    std::optional<std::size_t> k_steps, epochs;
    bool force = false;
};

void add_common(CLI::App* app, CommonArgs& a) {
    app->add_option("--config", a.config, "config file");
    app->add_option("--out", a.out, "output directory");
    app->add_option("--set", a.sets, "override, key=value (repeatable)");
    app->add_option("--seed", a.seed, "sets data.seed and train.seed");
    app->add_option("--preset", a.preset, "baseline1|baseline2|baseline3|full");
    app->add_option("--paradigm", a.paradigm, "unified|separate");
    app->add_option("--tau", a.tau, "L_di temperature");
    app->add_option("--margin", a.margin, "triplet margin");
    app->add_option("--k-steps", a.k_steps, "generator steps per discriminator step");
    app->add_option("--epochs", a.epochs, "training epochs");
    app->add_flag("--force", a.force, "overwrite a non-empty output directory");
}

RunConfig build_config(const CommonArgs& a) {
    RunConfig cfg;
    if (!a.config.empty()) load_config_file(cfg, a.config);
    for (const std::string& s : a.sets) apply_override(cfg, s);
    if (a.seed) {
        cfg.data.seed = *a.seed;
        cfg.train.seed = *a.seed;
    }
    if (a.preset) apply_setting(cfg, "train.preset", *a.preset);
    if (a.paradigm) apply_setting(cfg, "train.paradigm", *a.paradigm);
    if (a.tau) cfg.train.tau = *a.tau;
    if (a.margin) cfg.train.margin = *a.margin;
    if (a.k_steps) cfg.train.k_steps = *a.k_steps;
    if (a.epochs) cfg.train.epochs = *a.epochs;
    return cfg;
}

fs::path out_dir(const CommonArgs& a, const char* command) {
    return a.out.empty() ? default_output_root() / command : fs::path(a.out);
}

void print_gradcheck(const GradcheckReport& rep, double tolerance) {
    auto line = [&](const char* kind, const GradcheckEntry& e) {
        std::cout << kind << " " << std::left << std::setw(20) << e.name << " worst_rel_err=" << std::scientific
                  << std::setprecision(3) << e.worst_error << std::defaultfloat << " at " << e.worst_at << " ("
                  << e.compared << " entries) " << (e.pass ? "PASS" : "FAIL") << "\n";
    };
    for (const GradcheckEntry& e : rep.losses) line("loss", e);
    for (const GradcheckEntry& e : rep.ops) line("op  ", e);
    for (const GradcheckEntry& e : rep.ops) {
        if (!e.pass) std::cout << "failing op: " << e.name << "\n";
    }
    std::cout << "tolerance " << tolerance << ": " << (rep.pass() ? "PASS" : "FAIL") << "\n";
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"Adversarial cross-modal embedding trainer"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, sweep_args, gc_args;
    auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
    add_common(gen, gen_args);

    auto* tr = app.add_subcommand("train", "train a model");
    add_common(tr, train_args);
    std::string train_data;
    bool resume = false;
    tr->add_option("--data", train_data, "manifest or dataset directory (default: synthetic from config)");
    tr->add_flag("--resume", resume, "continue from <out>/checkpoint.xmck");

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
    add_common(ev, eval_args);
    std::string eval_data, checkpoint;
    ev->add_option("--data", eval_data, "manifest or dataset directory");
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

    auto* sw = app.add_subcommand("sweep", "train one run per parameter value");
    add_common(sw, sweep_args);
    std::string sweep_data, param = "train.tau";
    std::vector<std::string> values;
    bool parallel = false;
    sw->add_option("--data", sweep_data, "manifest or dataset directory");
    sw->add_option("--param", param, "config key to vary")->capture_default_str();
    sw->add_option("--values", values, "values, space or comma separated")->required()->delimiter(',');
    sw->add_flag("--parallel", parallel, "run the trainings as concurrent processes");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(gc, gc_args);
    std::string corrupt;
    double corrupt_factor = 2.0;
    gc->add_option("--corrupt", corrupt, "scale the backward rule of this op (negative control)");
    gc->add_option("--corrupt-factor", corrupt_factor, "factor for --corrupt")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    auto opt_path = [](const std::string& s) { return s.empty() ? std::optional<fs::path>{} : fs::path(s); };
    try {
        if (gen->parsed()) {
            const RunConfig cfg = build_config(gen_args);
            const fs::path out = out_dir(gen_args, "generate");
            generate(cfg, out, gen_args.force);
            std::cout << "wrote dataset to " << out.string() << "\n";
        } else if (tr->parsed()) {
            const RunConfig cfg = build_config(train_args);
            TrainOptions t;
            t.data = opt_path(train_data);
            t.resume = resume;
            t.force = train_args.force;
            t.log = &std::cout;
            const fs::path out = out_dir(train_args, "train");
            train(cfg, out, t);
            std::cout << "wrote " << (out / "checkpoint.xmck").string() << "\n";
        } else if (ev->parsed()) {
            CommonArgs a = eval_args;
            // A run directory carries its own config; use it unless told otherwise.
            const fs::path beside = fs::path(checkpoint).parent_path() / "effective.cfg";
            if (a.config.empty() && fs::exists(beside)) a.config = beside.string();
            const RunConfig cfg = build_config(a);
            const fs::path out = out_dir(a, "evaluate");
            const EvaluationReport rep = evaluate(cfg, checkpoint, opt_path(eval_data), out);
            for (const RetrievalResult& r : rep.retrieval) {
                std::cout << direction_name(r.direction);
                for (const auto& [k, v] : r.recall_at) std::cout << " R@" << k << "=" << format_double(v);
                std::cout << " mAP=" << format_double(r.mean_ap) << "\n";
            }
            std::cout << "probe_accuracy=" << format_double(rep.gap.probe_accuracy)
                      << " mean_entropy=" << format_double(rep.gap.mean_entropy) << "\n";
            std::cout << "wrote reports to " << out.string() << "\n";
        } else if (sw->parsed()) {
            const RunConfig cfg = build_config(sweep_args);
            SweepOptions s;
            s.data = opt_path(sweep_data);
            s.parallel = parallel;
            s.self = fs::read_symlink("/proc/self/exe");
            s.log = &std::cout;
            const fs::path out = out_dir(sweep_args, "sweep");
            sweep(cfg, param, values, out, s);
            std::ifstream table(out / "sweep.csv");
            std::cout << table.rdbuf();
        } else if (gc->parsed()) {
            const RunConfig cfg = build_config(gc_args);
            std::optional<ad::debug::ScopedCorruption> damage;
            if (!corrupt.empty()) damage.emplace(corrupt, corrupt_factor);
            const GradcheckReport rep = run_gradcheck(cfg.gradcheck);
            print_gradcheck(rep, cfg.gradcheck.tolerance);
            const fs::path out = out_dir(gc_args, "gradcheck");
            fs::create_directories(out);
            write_text(out / "effective.cfg", dump_config(cfg));
            return rep.pass() ? kOk : kGradcheckFailed;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for_current_exception();
    }
    return kOk;
}

}  // namespace xmodal::cli
