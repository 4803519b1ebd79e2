#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xmodal/data.hpp"
#include "xmodal/model.hpp"
#include "xmodal/trainer.hpp"

namespace xmodal {

enum class Direction { ImageToText, TextToImage };
std::string_view direction_name(Direction d);

struct PrPoint {
    double recall;
    double precision;

    friend bool operator==(const PrPoint&, const PrPoint&) = default;
};

struct RetrievalResult {
    Direction direction = Direction::ImageToText;
    std::map<int, double> recall_at;
    double mean_ap = 0.0;
    /// Mean precision and recall over queries at every cutoff 1..gallery size.
    std::vector<PrPoint> pr_curve;
    std::size_t queries = 0;   ///< queries that were scored
    std::size_t excluded = 0;  ///< queries whose label never occurs in the gallery
};

/// Ranks the gallery of the other modality for every query by cosine
/// similarity (descending, ties to the lower gallery index). Same-label
/// gallery items are the relevant ones.
RetrievalResult evaluate_retrieval(const Tensor2& z_image, const Tensor2& z_text, std::span<const Label> image_labels,
                                   std::span<const Label> text_labels, Direction direction,
                                   std::span<const int> ks = std::vector<int>{1, 5, 10});

struct ProbeConfig {
    double train_fraction = 0.5;
    std::size_t iterations = 500;
    double learning_rate = 0.5;
    double l2 = 1e-4;
    std::uint64_t seed = 7;
};

/// Held-out balanced accuracy (mean of the per-modality accuracies) of a
/// logistic-regression modality probe. Each modality is split separately
/// into probe-train and probe-test rows.
double probe_accuracy(const Tensor2& z_image, const Tensor2& z_text, const ProbeConfig& cfg = {});

/// Mean Shannon entropy in nats of probability rows.
double mean_entropy(const Tensor2& probs);

struct GapProbe {
    double probe_accuracy = 0.0;
    double mean_entropy = 0.0;  ///< of the discriminator on both modalities
};

/// Probe accuracy on the embeddings plus the mean entropy of the given
/// discriminator outputs for the same rows.
GapProbe probe_gap(const Tensor2& z_image, const Tensor2& z_text, const Tensor2& disc_image,
                   const Tensor2& disc_text, const ProbeConfig& cfg = {});

/// Embeddings of one split: one image row per item, every caption as a text row.
struct SplitEmbeddings {
    Tensor2 image;
    Tensor2 text;
    std::vector<Label> image_labels;
    std::vector<Label> text_labels;
    /// Row of `text` holding the first caption of each image, aligned with `image`.
    std::vector<std::size_t> first_caption;
};

SplitEmbeddings split_features(const Dataset& data, Split split);
SplitEmbeddings embed_split(const Model& model, const Dataset& data, Split split);

/// Fraction of rows whose argmax of z W matches the label.
double label_accuracy(const Model& model, const Tensor2& z, std::span<const Label> labels);

struct PairedLabelAccuracy {
    double image_query = 0.0;  ///< classifying <z_i, zbar_t> zbar_t
    double text_query = 0.0;   ///< classifying <z_t, zbar_i> zbar_i
};

/// Label accuracy of the paired cross-modal projections; row j of both
/// sides is a ground-truth pair with label labels[j].
PairedLabelAccuracy paired_label_accuracy(const Model& model, const Tensor2& z_image, const Tensor2& z_text,
                                          std::span<const Label> labels);

struct EvaluationReport {
    std::vector<RetrievalResult> retrieval;
    GapProbe gap;
    double image_label_accuracy = 0.0;  ///< image-query projections, every caption pair
    double text_label_accuracy = 0.0;   ///< text-query projections, every caption pair
};

/// Both retrieval directions, the gap probe (on each image and its first
/// caption) and paired label accuracies for `split`.
EvaluationReport evaluate_model(const Model& model, const Dataset& data, Split split, const ProbeConfig& probe = {});

// ---------------------------------------------------------------------------
// CSV reports. Values are written in shortest round-trip form.
//
// metrics.csv     direction,queries,excluded,R@<K>...,mAP
// pr_<dir>.csv    recall,precision
// gap.csv         probe_accuracy,mean_entropy,image_label_accuracy,text_label_accuracy
// loss_trace.csv  epoch,L_s,L_c,L_kl,L_ce,L_di,L_tr,disc_loss,disc_accuracy,lr1,lr2,generator_steps,discriminator_steps,seconds

void emit_reports(const std::filesystem::path& dir, const EvaluationReport& report,
                  const std::vector<EpochReport>& trace);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<RetrievalResult>& results);
std::vector<RetrievalResult> read_metrics_csv(const std::filesystem::path& path);
void write_pr_csv(const std::filesystem::path& path, const std::vector<PrPoint>& curve);
std::vector<PrPoint> read_pr_csv(const std::filesystem::path& path);
void write_loss_trace_csv(const std::filesystem::path& path, const std::vector<EpochReport>& trace);
std::vector<EpochReport> read_loss_trace_csv(const std::filesystem::path& path);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace xmodal
