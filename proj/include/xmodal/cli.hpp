#pragma once

// The xmodal command line. Subcommands:
//
//   generate   synthetic dataset (manifest.txt, images.xmf, texts.xmf)
//   train      checkpoints plus epochs.jsonl / loss_trace.csv
//   evaluate   metrics.csv, pr_*.csv, gap.csv, loss_trace.csv
//   sweep      one training run per value of a config key, then sweep.csv
//   gradcheck  finite-difference report; exit 5 when any entry fails
//
// Every command writes effective.cfg (the config after all overrides) into
// its output directory. Without --out, output goes under $XMODAL_OUT_ROOT
// (default "runs") in a directory named after the command.
//
// Exit codes:
//   0  success
//   1  unexpected failure
//   2  usage or config error (includes a non-empty output directory)
//   3  load, I/O or checkpoint error
//   4  divergence or degenerate embeddings
//   5  gradcheck failure

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "xmodal/config.hpp"
#include "xmodal/eval.hpp"
#include "xmodal/trainer.hpp"

namespace xmodal::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kConfigError = 2,
    kLoadError = 3,
    kDivergence = 4,
    kGradcheckFailed = 5,
};

/// Exit code for the exception currently being handled.
int exit_code_for_current_exception();

std::filesystem::path default_output_root();

/// Writes the synthetic dataset of cfg.data plus effective.cfg into `out`.
void generate(const RunConfig& cfg, const std::filesystem::path& out, bool force);

/// `data` is a manifest path or a directory holding manifest.txt; without it
/// the synthetic dataset of cfg.data is generated in memory.
Dataset resolve_dataset(const RunConfig& cfg, const std::optional<std::filesystem::path>& data);

struct TrainOptions {
    std::optional<std::filesystem::path> data;
    bool resume = false;
    bool force = false;
    std::ostream* log = nullptr;  ///< progress lines, one per epoch
};

/// Trains into `out`: checkpoint_epoch0.xmck before the first epoch,
/// checkpoint.xmck and one epochs.jsonl record after every epoch, and
/// loss_trace.csv at the end. With `resume`, continues from checkpoint.xmck
/// and drops log records past the checkpointed epoch. Returns the full trace.
std::vector<EpochReport> train(const RunConfig& cfg, const std::filesystem::path& out, const TrainOptions& opt);

/// Embeds cfg.eval_split with the checkpointed heads and writes the reports.
/// The loss trace is copied from epochs.jsonl next to the checkpoint when
/// present.
EvaluationReport evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                          const std::optional<std::filesystem::path>& data, const std::filesystem::path& out);

struct SweepRow {
    std::string value;  ///< exactly as requested
    EvaluationReport report;
    std::vector<EpochReport> trace;
};

struct SweepOptions {
    std::optional<std::filesystem::path> data;
    /// Run the trainings as concurrent child processes of `self`.
    bool parallel = false;
    std::filesystem::path self;
    std::ostream* log = nullptr;
};

/// One run per value under out/run_<i>, all with the same seeds, then
/// sweep.csv with R@1, R@10 and mAP per direction.
std::vector<SweepRow> sweep(const RunConfig& cfg, const std::string& param, const std::vector<std::string>& values,
                            const std::filesystem::path& out, const SweepOptions& opt);

void write_sweep_csv(const std::filesystem::path& path, const std::string& param, const std::vector<SweepRow>& rows);

/// One epochs.jsonl line and its inverse.
std::string epoch_record(const EpochReport& r);
EpochReport parse_epoch_record(const std::string& line);
std::vector<EpochReport> read_epoch_log(const std::filesystem::path& path);

int run(int argc, char** argv);

}  // namespace xmodal::cli
