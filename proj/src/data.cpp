#include "xmodal/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "xmodal/errors.hpp"

namespace xmodal {

namespace fs = std::filesystem;

std::string_view split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw LoadError("unknown split '" + std::string(s) + "'");
}

double DatasetManifest::texts_per_image() const {
    if (items.empty()) return 0.0;
    return static_cast<double>(text_count()) / static_cast<double>(items.size());
}

std::size_t DatasetManifest::text_count() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.text_rows.size();
    return n;
}

// ---------------------------------------------------------------------------
// Feature store

namespace {

constexpr char kStoreMagic[4] = {'X', 'M', 'F', 'S'};
constexpr std::uint32_t kStoreVersion = 1;
constexpr std::size_t kStoreHeader = 32;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_le(const std::string& buf, std::size_t off, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void write_feature_store(const fs::path& path, Modality modality, const Tensor2& features) {
    std::string buf;
    buf.reserve(kStoreHeader + features.size() * 8);
    buf.append(kStoreMagic, 4);
    put_u32(buf, kStoreVersion);
    put_u32(buf, static_cast<std::uint32_t>(modality));
    put_u32(buf, 0);
    put_u64(buf, features.rows());
    put_u64(buf, features.cols());
    for (double v : features.data()) put_u64(buf, std::bit_cast<std::uint64_t>(v));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw LoadError("short write to " + path.string());
}

Tensor2 read_feature_store(const fs::path& path, Modality expected) {
    const std::string buf = read_file(path);
    const std::string where = path.string();
    if (buf.size() < kStoreHeader || !std::equal(kStoreMagic, kStoreMagic + 4, buf.begin())) {
        throw LoadError(where + ": not a feature store");
    }
    const auto version = get_le(buf, 4, 4);
    if (version != kStoreVersion) throw LoadError(where + ": unsupported version " + std::to_string(version));
    const auto modality = get_le(buf, 8, 4);
    if (modality != static_cast<std::uint32_t>(expected)) {
        throw LoadError(where + ": holds modality " + std::to_string(modality) + ", expected " +
                        std::to_string(static_cast<std::uint32_t>(expected)));
    }
    const auto rows = get_le(buf, 16, 8);
    const auto cols = get_le(buf, 24, 8);
    if (cols == 0 && rows != 0) throw LoadError(where + ": zero dimension");
    if (buf.size() != kStoreHeader + rows * cols * 8) {
        throw LoadError(where + ": ragged store, header says " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " but payload has " + std::to_string(buf.size() - kStoreHeader) +
                        " bytes");
    }
    Tensor2 t(rows, cols);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(get_le(buf, kStoreHeader + 8 * i, 8));
    return t;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

constexpr std::string_view kManifestHeader = "xmodal-manifest 1";

std::vector<std::size_t> parse_rows(const std::string& s, const std::string& where) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw LoadError(where + ": bad row reference '" + tok + "'");
        }
    }
    return out;
}

}  // namespace

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    out << kManifestHeader << '\n';
    out << "images " << manifest.image_store << '\n';
    out << "texts " << manifest.text_store << '\n';
    for (const auto& it : manifest.items) {
        out << "item id=" << it.id << " label=" << it.label << " split=" << split_name(it.split)
            << " image=" << it.image_row << " texts=";
        for (std::size_t i = 0; i < it.text_rows.size(); ++i) out << (i ? "," : "") << it.text_rows[i];
        out << '\n';
    }
    if (!out) throw LoadError("short write to " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    DatasetManifest m;
    m.image_store.clear();
    m.text_store.clear();
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t')) line.pop_back();
        if (line.empty()) continue;
        if (!header) {
            if (line != kManifestHeader) throw LoadError(where + ": missing '" + std::string(kManifestHeader) + "' header");
            header = true;
            continue;
        }
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "images" || kind == "texts") {
            std::string file;
            ls >> file;
            if (file.empty()) throw LoadError(where + ": missing file name");
            (kind == "images" ? m.image_store : m.text_store) = file;
        } else if (kind == "item") {
            ItemRecord rec;
            std::map<std::string, std::string> fields;
            std::string tok;
            while (ls >> tok) {
                const auto eq = tok.find('=');
                if (eq == std::string::npos) throw LoadError(where + ": field '" + tok + "' lacks '='");
                fields[tok.substr(0, eq)] = tok.substr(eq + 1);
            }
            for (const char* key : {"id", "label", "split", "image", "texts"}) {
                if (!fields.contains(key)) throw LoadError(where + ": item lacks field '" + key + "'");
            }
            if (fields.size() != 5) throw LoadError(where + ": item has unknown fields");
            rec.id = fields["id"];
            try {
                std::size_t used = 0;
                rec.label = std::stoi(fields["label"], &used);
                if (used != fields["label"].size()) throw std::invalid_argument("label");
            } catch (const std::exception&) {
                throw LoadError(where + ": item " + rec.id + " has a bad label");
            }
            rec.split = parse_split(fields["split"]);
            const auto img = parse_rows(fields["image"], where);
            if (img.size() != 1) throw LoadError(where + ": item " + rec.id + " must name exactly one image");
            rec.image_row = img.front();
            rec.text_rows = parse_rows(fields["texts"], where);
            m.items.push_back(std::move(rec));
        } else {
            throw LoadError(where + ": unknown record '" + kind + "'");
        }
    }
    if (!header) throw LoadError(path.string() + ": empty manifest");
    if (m.image_store.empty() || m.text_store.empty()) throw LoadError(path.string() + ": store files not named");
    return m;
}

void validate(const Dataset& data) {
    std::set<std::string> ids;
    std::set<Label> labels;
    for (const auto& it : data.manifest.items) {
        if (!ids.insert(it.id).second) throw LoadError("duplicate item id '" + it.id + "'");
        if (it.image_row >= data.images.rows()) {
            throw LoadError("item " + it.id + ": image row " + std::to_string(it.image_row) + " not in store");
        }
        if (it.text_rows.empty()) throw LoadError("item " + it.id + ": no texts");
        for (std::size_t r : it.text_rows) {
            if (r >= data.texts.rows()) throw LoadError("item " + it.id + ": text row " + std::to_string(r) + " not in store");
        }
        if (it.label < 0) throw LoadError("item " + it.id + ": negative label");
        labels.insert(it.label);
    }
    if (!labels.empty() && (*labels.begin() != 0 || static_cast<std::size_t>(*labels.rbegin()) + 1 != labels.size())) {
        throw LoadError("labels are not dense 0..C-1");
    }
}

Dataset load_features(const fs::path& manifest_path, const fs::path& images_path, const fs::path& texts_path) {
    Dataset d;
    d.manifest = read_manifest(manifest_path);
    d.images = read_feature_store(images_path, Modality::Image);
    d.texts = read_feature_store(texts_path, Modality::Text);

    std::set<Label> raw;
    for (const auto& it : d.manifest.items) {
        if (it.label < 0) throw LoadError("item " + it.id + ": negative label");
        raw.insert(it.label);
    }
    std::map<Label, Label> dense;
    for (Label l : raw) dense.emplace(l, static_cast<Label>(dense.size()));
    for (auto& it : d.manifest.items) it.label = dense.at(it.label);
    d.num_labels = dense.size();
    validate(d);
    return d;
}

Dataset load_dataset(const fs::path& manifest_path) {
    const DatasetManifest m = read_manifest(manifest_path);
    const fs::path dir = manifest_path.parent_path();
    return load_features(manifest_path, dir / m.image_store, dir / m.text_store);
}

void save_dataset(const Dataset& data, const fs::path& dir) {
    fs::create_directories(dir);
    write_feature_store(dir / data.manifest.image_store, Modality::Image, data.images);
    write_feature_store(dir / data.manifest.text_store, Modality::Text, data.texts);
    write_manifest(dir / "manifest.txt", data.manifest);
}

// ---------------------------------------------------------------------------
// Batching

std::vector<PairRef> split_pairs(const Dataset& data, Split split) {
    std::vector<PairRef> out;
    const auto& items = data.manifest.items;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].split != split) continue;
        for (std::size_t r : items[i].text_rows) out.push_back({i, items[i].image_row, r, items[i].label});
    }
    return out;
}

FeatureBatch gather_batch(const Dataset& data, std::span<const PairRef> pairs, std::span<const std::size_t> order) {
    FeatureBatch b;
    b.image = Tensor2(order.size(), data.images.cols());
    b.text = Tensor2(order.size(), data.texts.cols());
    for (std::size_t j = 0; j < order.size(); ++j) {
        const PairRef& p = pairs[order[j]];
        std::copy(data.images.row(p.image_row).begin(), data.images.row(p.image_row).end(), b.image.row(j).begin());
        std::copy(data.texts.row(p.text_row).begin(), data.texts.row(p.text_row).end(), b.text.row(j).begin());
        b.labels.push_back(p.label);
        b.items.push_back(p.item);
    }
    return b;
}

std::vector<std::vector<std::size_t>> batch_plan(std::size_t pair_count, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch) {
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (batch_size > pair_count) {
        throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds " + std::to_string(pair_count) +
                          " pairs");
    }
    std::vector<std::size_t> perm(pair_count);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(sseq);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<std::size_t>> plan;
    for (std::size_t start = 0; start + batch_size <= pair_count; start += batch_size) {
        plan.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                          perm.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
    }
    return plan;
}

std::vector<FeatureBatch> make_batches(const Dataset& data, Split split, std::size_t batch_size,
                                       std::uint64_t seed, std::uint64_t epoch) {
    const auto pairs = split_pairs(data, split);
    std::vector<FeatureBatch> out;
    for (const auto& order : batch_plan(pairs.size(), batch_size, seed, epoch)) {
        out.push_back(gather_batch(data, pairs, order));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.num_classes == 0 || spec.items_per_class == 0 || spec.texts_per_image == 0 || spec.image_dim == 0 ||
        spec.text_dim == 0 || spec.latent_dim == 0) {
        throw ConfigError("synthetic spec: counts and dimensions must be positive");
    }
    if (spec.train_fraction < 0 || spec.val_fraction < 0 || spec.train_fraction + spec.val_fraction > 1.0) {
        throw ConfigError("synthetic spec: split fractions must lie in [0, 1] and sum to at most 1");
    }
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t L = spec.latent_dim;

    auto affine = [&](std::size_t out_dim) {
        Tensor2 a(L, out_dim);
        const double scale = 1.0 / std::sqrt(static_cast<double>(L));
        for (auto& v : a.data()) v = normal(rng) * scale;
        Tensor2 b(1, out_dim);
        for (auto& v : b.data()) v = normal(rng) * spec.modality_shift;
        return std::pair{a, b};
    };
    const auto [a_img, b_img] = affine(spec.image_dim);
    const auto [a_txt, b_txt] = affine(spec.text_dim);

    Tensor2 centers(spec.num_classes, L);
    for (auto& v : centers.data()) v = normal(rng) * spec.sigma_between;

    const std::size_t n_items = spec.num_classes * spec.items_per_class;
    Dataset d;
    d.num_labels = spec.num_classes;
    d.images = Tensor2(n_items, spec.image_dim);
    d.texts = Tensor2(n_items * spec.texts_per_image, spec.text_dim);

    const double view_sigma = spec.view_noise * spec.sigma_within;
    std::vector<double> latent(L), view(L);
    auto emit = [&](const Tensor2& a, const Tensor2& b, std::span<double> out) {
        for (std::size_t k = 0; k < L; ++k) view[k] = latent[k] + view_sigma * normal(rng);
        for (std::size_t c = 0; c < out.size(); ++c) {
            double s = b[c];
            for (std::size_t k = 0; k < L; ++k) s += view[k] * a(k, c);
            out[c] = s;
        }
    };

    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(spec.items_per_class)));
    const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(spec.items_per_class)));
    std::size_t text_row = 0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        std::vector<std::size_t> slot(spec.items_per_class);
        std::iota(slot.begin(), slot.end(), std::size_t{0});
        std::shuffle(slot.begin(), slot.end(), rng);
        for (std::size_t i = 0; i < spec.items_per_class; ++i) {
            const std::size_t row = c * spec.items_per_class + i;
            for (std::size_t k = 0; k < L; ++k) latent[k] = centers(c, k) + spec.sigma_within * normal(rng);
            emit(a_img, b_img, d.images.row(row));
            ItemRecord rec;
            rec.id = "c" + std::to_string(c) + "_i" + std::to_string(i);
            rec.image_row = row;
            rec.label = static_cast<Label>(c);
            rec.split = slot[i] < n_train ? Split::Train : slot[i] < n_train + n_val ? Split::Val : Split::Test;
            for (std::size_t t = 0; t < spec.texts_per_image; ++t) {
                emit(a_txt, b_txt, d.texts.row(text_row));
                rec.text_rows.push_back(text_row++);
            }
            d.manifest.items.push_back(std::move(rec));
        }
    }
    return d;
}

}  // namespace xmodal
