#include "xmodal/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "xmodal/errors.hpp"
#include "xmodal/projection.hpp"

namespace xmodal {

std::string_view direction_name(Direction d) {
    return d == Direction::ImageToText ? "image_to_text" : "text_to_image";
}

namespace {

Tensor2 normalized_rows(const Tensor2& z, const char* what) {
    Tensor2 out = z;
    for (std::size_t r = 0; r < z.rows(); ++r) {
        double ss = 0.0;
        for (double x : z.row(r)) ss += x * x;
        const double n = std::sqrt(ss);
        if (!(n >= ad::kMinRowNorm)) {
            throw DegenerateError(std::string(what) + " row " + std::to_string(r) + " has zero norm");
        }
        for (std::size_t c = 0; c < z.cols(); ++c) out(r, c) = z(r, c) / n;
    }
    return out;
}

}  // namespace

RetrievalResult evaluate_retrieval(const Tensor2& z_image, const Tensor2& z_text, std::span<const Label> image_labels,
                                   std::span<const Label> text_labels, Direction direction, std::span<const int> ks) {
    if (z_image.rows() != image_labels.size() || z_text.rows() != text_labels.size()) {
        throw DimensionError("evaluate_retrieval: label count differs from embedding rows");
    }
    if (z_image.cols() != z_text.cols()) throw DimensionError("evaluate_retrieval: embedding widths differ");
    for (int k : ks) {
        if (k < 1) throw ContractError("evaluate_retrieval: K must be positive");
    }
    const bool i2t = direction == Direction::ImageToText;
    const Tensor2 q = normalized_rows(i2t ? z_image : z_text, i2t ? "image query" : "text query");
    const Tensor2 g = normalized_rows(i2t ? z_text : z_image, i2t ? "text gallery" : "image gallery");
    const auto qlab = i2t ? image_labels : text_labels;
    const auto glab = i2t ? text_labels : image_labels;
    if (g.rows() == 0) throw ContractError("evaluate_retrieval: empty gallery");

    RetrievalResult res;
    res.direction = direction;
    for (int k : ks) res.recall_at[k] = 0.0;
    const std::size_t n_gal = g.rows();
    std::vector<double> prec_sum(n_gal, 0.0), rec_sum(n_gal, 0.0);
    std::vector<double> score(n_gal);
    std::vector<std::size_t> order(n_gal);

    for (std::size_t qi = 0; qi < q.rows(); ++qi) {
        std::size_t relevant = 0;
        for (Label l : glab) relevant += l == qlab[qi] ? 1 : 0;
        if (relevant == 0) {
            ++res.excluded;
            continue;
        }
        ++res.queries;
        for (std::size_t j = 0; j < n_gal; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) s += q(qi, c) * g(j, c);
            score[j] = s;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

        std::size_t hits = 0, first_hit = n_gal;
        double ap = 0.0;
        for (std::size_t r = 0; r < n_gal; ++r) {
            if (glab[order[r]] == qlab[qi]) {
                ++hits;
                if (first_hit == n_gal) first_hit = r;
                ap += static_cast<double>(hits) / static_cast<double>(r + 1);
            }
            prec_sum[r] += static_cast<double>(hits) / static_cast<double>(r + 1);
            rec_sum[r] += static_cast<double>(hits) / static_cast<double>(relevant);
        }
        res.mean_ap += ap / static_cast<double>(relevant);
        for (int k : ks) {
            if (first_hit < static_cast<std::size_t>(k)) res.recall_at[k] += 1.0;
        }
    }
    if (res.queries > 0) {
        const auto nq = static_cast<double>(res.queries);
        res.mean_ap /= nq;
        for (auto& [k, v] : res.recall_at) v /= nq;
        res.pr_curve.reserve(n_gal);
        for (std::size_t r = 0; r < n_gal; ++r) res.pr_curve.push_back({rec_sum[r] / nq, prec_sum[r] / nq});
    }
    return res;
}

// ---------------------------------------------------------------------------
// Gap probe

double probe_accuracy(const Tensor2& z_image, const Tensor2& z_text, const ProbeConfig& cfg) {
    if (z_image.cols() != z_text.cols()) throw DimensionError("probe: modality widths differ");
    if (z_image.rows() < 2 || z_text.rows() < 2) throw ContractError("probe: needs at least two rows per modality");
    if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) throw ConfigError("probe train fraction must lie in (0, 1)");

    std::mt19937_64 rng(cfg.seed);
    struct Row {
        const Tensor2* src;
        std::size_t r;
        int y;
    };
    std::vector<Row> train, test;
    for (int y = 0; y < 2; ++y) {
        const Tensor2& src = y == 0 ? z_image : z_text;
        std::vector<std::size_t> idx(src.rows());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(src.rows())));
        n_train = std::clamp<std::size_t>(n_train, 1, src.rows() - 1);
        for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? train : test).push_back({&src, idx[i], y});
    }

    const std::size_t d = z_image.cols();
    // Standardize with probe-train statistics.
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (const Row& row : train)
        for (std::size_t c = 0; c < d; ++c) mu[c] += (*row.src)(row.r, c);
    for (double& m : mu) m /= static_cast<double>(train.size());
    for (const Row& row : train)
        for (std::size_t c = 0; c < d; ++c) sd[c] += std::pow((*row.src)(row.r, c) - mu[c], 2);
    for (double& s : sd) s = std::sqrt(s / static_cast<double>(train.size())) + 1e-12;
    auto feature = [&](const Row& row, std::size_t c) { return ((*row.src)(row.r, c) - mu[c]) / sd[c]; };

    // Class weights equalize the two modalities.
    std::size_t count[2] = {0, 0};
    for (const Row& row : train) ++count[row.y];
    const double cw[2] = {0.5 / static_cast<double>(count[0]), 0.5 / static_cast<double>(count[1])};

    std::vector<double> w(d, 0.0);
    double b = 0.0;
    std::vector<double> gw(d);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (const Row& row : train) {
            double s = b;
            for (std::size_t c = 0; c < d; ++c) s += w[c] * feature(row, c);
            const double p = 1.0 / (1.0 + std::exp(-s));
            const double err = cw[row.y] * (p - static_cast<double>(row.y));
            for (std::size_t c = 0; c < d; ++c) gw[c] += err * feature(row, c);
            gb += err;
        }
        for (std::size_t c = 0; c < d; ++c) w[c] -= cfg.learning_rate * (gw[c] + cfg.l2 * w[c]);
        b -= cfg.learning_rate * gb;
    }

    std::size_t hit[2] = {0, 0}, total[2] = {0, 0};
    for (const Row& row : test) {
        double s = b;
        for (std::size_t c = 0; c < d; ++c) s += w[c] * feature(row, c);
        const int pred = s > 0.0 ? 1 : 0;
        ++total[row.y];
        hit[row.y] += pred == row.y ? 1 : 0;
    }
    return 0.5 * (static_cast<double>(hit[0]) / static_cast<double>(total[0]) +
                  static_cast<double>(hit[1]) / static_cast<double>(total[1]));
}

double mean_entropy(const Tensor2& probs) {
    if (probs.rows() == 0) throw ContractError("mean_entropy: no rows");
    double h = 0.0;
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        for (double p : probs.row(r)) {
            if (p > 0.0) h -= p * std::log(p);
        }
    }
    return h / static_cast<double>(probs.rows());
}

GapProbe probe_gap(const Tensor2& z_image, const Tensor2& z_text, const Tensor2& disc_image, const Tensor2& disc_text,
                   const ProbeConfig& cfg) {
    GapProbe g;
    g.probe_accuracy = probe_accuracy(z_image, z_text, cfg);
    const double ni = static_cast<double>(disc_image.rows()), nt = static_cast<double>(disc_text.rows());
    g.mean_entropy = (mean_entropy(disc_image) * ni + mean_entropy(disc_text) * nt) / (ni + nt);
    return g;
}

// ---------------------------------------------------------------------------
// Split helpers

SplitEmbeddings split_features(const Dataset& data, Split split) {
    SplitEmbeddings out;
    std::vector<std::size_t> image_rows, text_rows;
    for (const ItemRecord& item : data.manifest.items) {
        if (item.split != split) continue;
        image_rows.push_back(item.image_row);
        out.image_labels.push_back(item.label);
        out.first_caption.push_back(text_rows.size());
        for (std::size_t t : item.text_rows) {
            text_rows.push_back(t);
            out.text_labels.push_back(item.label);
        }
    }
    if (image_rows.empty()) throw ContractError("split " + std::string(split_name(split)) + " has no items");
    out.image = data.images.select_rows(image_rows);
    out.text = data.texts.select_rows(text_rows);
    return out;
}

SplitEmbeddings embed_split(const Model& model, const Dataset& data, Split split) {
    SplitEmbeddings s = split_features(data, split);
    s.image = model.embed_image(s.image);
    s.text = model.embed_text(s.text);
    return s;
}

double label_accuracy(const Model& model, const Tensor2& z, std::span<const Label> labels) {
    if (z.rows() != labels.size()) throw DimensionError("label_accuracy: label count differs from rows");
    if (labels.empty()) return 0.0;
    const Tensor2 logits = model.label_logits(z);
    std::size_t hit = 0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        const auto best = static_cast<Label>(std::max_element(row.begin(), row.end()) - row.begin());
        hit += best == labels[r] ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

PairedLabelAccuracy paired_label_accuracy(const Model& model, const Tensor2& z_image, const Tensor2& z_text,
                                          std::span<const Label> labels) {
    if (!z_image.same_shape(z_text) || z_image.rows() != labels.size()) {
        throw DimensionError("paired_label_accuracy: pair shapes or label count differ");
    }
    PairedLabelAccuracy acc;
    if (labels.empty()) return acc;
    ad::Tape tape;
    const PairedProjections proj = paired_projections(EmbeddingPair(tape.constant(z_image), tape.constant(z_text)));
    acc.image_query = label_accuracy(model, proj.image_to_text.value(), labels);
    acc.text_query = label_accuracy(model, proj.text_to_image.value(), labels);
    return acc;
}

EvaluationReport evaluate_model(const Model& model, const Dataset& data, Split split, const ProbeConfig& probe) {
    const SplitEmbeddings e = embed_split(model, data, split);
    EvaluationReport rep;
    for (Direction d : {Direction::ImageToText, Direction::TextToImage}) {
        rep.retrieval.push_back(evaluate_retrieval(e.image, e.text, e.image_labels, e.text_labels, d));
    }
    const Tensor2 paired_text = e.text.select_rows(e.first_caption);
    rep.gap = probe_gap(e.image, paired_text, model.discriminator_probs(e.image), model.discriminator_probs(paired_text),
                        probe);
    std::vector<std::size_t> image_of_caption;
    for (std::size_t i = 0; i < e.first_caption.size(); ++i) {
        const std::size_t end = i + 1 < e.first_caption.size() ? e.first_caption[i + 1] : e.text.rows();
        for (std::size_t t = e.first_caption[i]; t < end; ++t) image_of_caption.push_back(i);
    }
    const PairedLabelAccuracy acc =
        paired_label_accuracy(model, e.image.select_rows(image_of_caption), e.text, e.text_labels);
    rep.image_label_accuracy = acc.image_query;
    rep.text_label_accuracy = acc.text_query;
    return rep;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    return out;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, std::vector<std::string>& header) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        return cells;
    };
    std::string line;
    if (!std::getline(in, line)) throw LoadError(path.string() + ": missing header");
    header = split(line);
    std::vector<std::vector<std::string>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto cells = split(line);
        if (cells.size() != header.size()) {
            throw LoadError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(header.size()) + " fields");
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw LoadError(path.string() + ": bad number '" + s + "'");
    }
    return v;
}

std::size_t parse_count(const std::string& s, const std::filesystem::path& path) {
    std::size_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw LoadError(path.string() + ": bad count '" + s + "'");
    }
    return v;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<RetrievalResult>& results) {
    std::vector<int> ks;
    for (const auto& r : results)
        for (const auto& [k, v] : r.recall_at)
            if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
    std::sort(ks.begin(), ks.end());
    auto out = open_out(path);
    out << "direction,queries,excluded";
    for (int k : ks) out << ",R@" << k;
    out << ",mAP\n";
    for (const auto& r : results) {
        out << direction_name(r.direction) << ',' << r.queries << ',' << r.excluded;
        for (int k : ks) {
            const auto it = r.recall_at.find(k);
            out << ',' << (it == r.recall_at.end() ? std::string() : format_double(it->second));
        }
        out << ',' << format_double(r.mean_ap) << '\n';
    }
}

std::vector<RetrievalResult> read_metrics_csv(const std::filesystem::path& path) {
    std::vector<std::string> header;
    const auto rows = read_csv(path, header);
    if (header.size() < 4 || header[0] != "direction" || header.back() != "mAP") {
        throw LoadError(path.string() + ": not a metrics table");
    }
    std::vector<RetrievalResult> out;
    for (const auto& row : rows) {
        RetrievalResult r;
        if (row[0] == "image_to_text") {
            r.direction = Direction::ImageToText;
        } else if (row[0] == "text_to_image") {
            r.direction = Direction::TextToImage;
        } else {
            throw LoadError(path.string() + ": unknown direction '" + row[0] + "'");
        }
        r.queries = parse_count(row[1], path);
        r.excluded = parse_count(row[2], path);
        for (std::size_t c = 3; c + 1 < header.size(); ++c) {
            if (!header[c].starts_with("R@")) throw LoadError(path.string() + ": bad column " + header[c]);
            if (row[c].empty()) continue;
            r.recall_at[std::stoi(header[c].substr(2))] = parse_double(row[c], path);
        }
        r.mean_ap = parse_double(row.back(), path);
        out.push_back(std::move(r));
    }
    return out;
}

void write_pr_csv(const std::filesystem::path& path, const std::vector<PrPoint>& curve) {
    auto out = open_out(path);
    out << "recall,precision\n";
    for (const auto& p : curve) out << format_double(p.recall) << ',' << format_double(p.precision) << '\n';
}

std::vector<PrPoint> read_pr_csv(const std::filesystem::path& path) {
    std::vector<std::string> header;
    const auto rows = read_csv(path, header);
    if (header != std::vector<std::string>{"recall", "precision"}) throw LoadError(path.string() + ": not a PR table");
    std::vector<PrPoint> out;
    for (const auto& row : rows) out.push_back({parse_double(row[0], path), parse_double(row[1], path)});
    return out;
}

namespace {
const std::vector<std::string> kTraceHeader = {
    "epoch", "L_s", "L_c", "L_kl", "L_ce", "L_di", "L_tr", "disc_loss", "disc_accuracy",
    "lr1", "lr2", "generator_steps", "discriminator_steps", "seconds"};
}

void write_loss_trace_csv(const std::filesystem::path& path, const std::vector<EpochReport>& trace) {
    auto out = open_out(path);
    for (std::size_t i = 0; i < kTraceHeader.size(); ++i) out << (i ? "," : "") << kTraceHeader[i];
    out << '\n';
    for (const auto& r : trace) {
        out << r.epoch;
        for (LossTerm t : kAllLosses) {
            const auto it = r.losses.find(t);
            out << ',' << format_double(it == r.losses.end() ? 0.0 : it->second);
        }
        out << ',' << format_double(r.disc_loss) << ',' << format_double(r.disc_accuracy) << ','
            << format_double(r.lr1) << ',' << format_double(r.lr2) << ',' << r.generator_steps << ','
            << r.discriminator_steps << ',' << format_double(r.seconds) << '\n';
    }
}

std::vector<EpochReport> read_loss_trace_csv(const std::filesystem::path& path) {
    std::vector<std::string> header;
    const auto rows = read_csv(path, header);
    if (header != kTraceHeader) throw LoadError(path.string() + ": not a loss trace");
    std::vector<EpochReport> out;
    for (const auto& row : rows) {
        EpochReport r;
        r.epoch = parse_count(row[0], path);
        for (std::size_t i = 0; i < kAllLosses.size(); ++i) r.losses[kAllLosses[i]] = parse_double(row[1 + i], path);
        r.disc_loss = parse_double(row[7], path);
        r.disc_accuracy = parse_double(row[8], path);
        r.lr1 = parse_double(row[9], path);
        r.lr2 = parse_double(row[10], path);
        r.generator_steps = parse_count(row[11], path);
        r.discriminator_steps = parse_count(row[12], path);
        r.seconds = parse_double(row[13], path);
        out.push_back(std::move(r));
    }
    return out;
}

void emit_reports(const std::filesystem::path& dir, const EvaluationReport& report,
                  const std::vector<EpochReport>& trace) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw LoadError("cannot create " + dir.string() + ": " + ec.message());
    write_metrics_csv(dir / "metrics.csv", report.retrieval);
    for (const auto& r : report.retrieval) {
        write_pr_csv(dir / ("pr_" + std::string(direction_name(r.direction)) + ".csv"), r.pr_curve);
    }
    {
        auto out = open_out(dir / "gap.csv");
        out << "probe_accuracy,mean_entropy,image_label_accuracy,text_label_accuracy\n"
            << format_double(report.gap.probe_accuracy) << ',' << format_double(report.gap.mean_entropy) << ','
            << format_double(report.image_label_accuracy) << ',' << format_double(report.text_label_accuracy) << '\n';
    }
    write_loss_trace_csv(dir / "loss_trace.csv", trace);
}

}  // namespace xmodal
