#include "xmodal/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "xmodal/errors.hpp"

namespace xmodal {

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw ConfigError("bad value '" + std::string(value) + "' for " + std::string(key) + " (expected " +
                      std::string(expected) + ")");
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
    T out{};
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) bad_value(key, v, "a number");
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v, "true or false");
}

struct Entry {
    std::string key;
    std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename Proj>
Entry size_entry(std::string key, Proj proj) {
    return {std::move(key),
            [proj](RunConfig& c, std::string_view k, std::string_view v) { proj(c) = parse_number<std::size_t>(k, v); },
            [proj](const RunConfig& c) { return std::to_string(proj(const_cast<RunConfig&>(c))); }};
}

template <typename Proj>
Entry u64_entry(std::string key, Proj proj) {
    return {std::move(key),
            [proj](RunConfig& c, std::string_view k, std::string_view v) {
                proj(c) = parse_number<std::uint64_t>(k, v);
            },
            [proj](const RunConfig& c) { return std::to_string(proj(const_cast<RunConfig&>(c))); }};
}

template <typename Proj>
Entry real_entry(std::string key, Proj proj) {
    return {std::move(key),
            [proj](RunConfig& c, std::string_view k, std::string_view v) { proj(c) = parse_number<double>(k, v); },
            [proj](const RunConfig& c) { return format_double(proj(const_cast<RunConfig&>(c))); }};
}

template <typename Proj>
Entry bool_entry(std::string key, Proj proj) {
    return {std::move(key), [proj](RunConfig& c, std::string_view k, std::string_view v) { proj(c) = parse_bool(k, v); },
            [proj](const RunConfig& c) { return std::string(proj(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <typename Proj, typename Parse, typename Name>
Entry enum_entry(std::string key, Proj proj, Parse parse, Name name) {
    return {std::move(key),
            [proj, parse](RunConfig& c, std::string_view, std::string_view v) { proj(c) = parse(v); },
            [proj, name](const RunConfig& c) { return std::string(name(proj(const_cast<RunConfig&>(c)))); }};
}

#define XM_FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Entry>& table() {
    static const std::vector<Entry> entries = [] {
        std::vector<Entry> t;
        t.push_back(size_entry("data.num_classes", XM_FIELD(c.data.num_classes)));
        t.push_back(size_entry("data.items_per_class", XM_FIELD(c.data.items_per_class)));
        t.push_back(size_entry("data.texts_per_image", XM_FIELD(c.data.texts_per_image)));
        t.push_back(size_entry("data.image_dim", XM_FIELD(c.data.image_dim)));
        t.push_back(size_entry("data.text_dim", XM_FIELD(c.data.text_dim)));
        t.push_back(size_entry("data.latent_dim", XM_FIELD(c.data.latent_dim)));
        t.push_back(real_entry("data.sigma_between", XM_FIELD(c.data.sigma_between)));
        t.push_back(real_entry("data.sigma_within", XM_FIELD(c.data.sigma_within)));
        t.push_back(real_entry("data.view_noise", XM_FIELD(c.data.view_noise)));
        t.push_back(real_entry("data.modality_shift", XM_FIELD(c.data.modality_shift)));
        t.push_back(real_entry("data.train_fraction", XM_FIELD(c.data.train_fraction)));
        t.push_back(real_entry("data.val_fraction", XM_FIELD(c.data.val_fraction)));
        t.push_back(u64_entry("data.seed", XM_FIELD(c.data.seed)));

        t.push_back(size_entry("model.embed_dim", XM_FIELD(c.train.model.embed_dim)));
        t.push_back(size_entry("model.head_layers", XM_FIELD(c.train.model.head_layers)));
        t.push_back(size_entry("model.head_hidden", XM_FIELD(c.train.model.head_hidden)));
        t.push_back(size_entry("model.disc_layers", XM_FIELD(c.train.model.disc_layers)));
        t.push_back(size_entry("model.disc_hidden", XM_FIELD(c.train.model.disc_hidden)));
        t.push_back(bool_entry("model.identity_heads", XM_FIELD(c.train.model.identity_heads)));

        t.push_back(size_entry("train.batch_size", XM_FIELD(c.train.batch_size)));
        t.push_back(real_entry("train.margin", XM_FIELD(c.train.margin)));
        t.push_back(real_entry("train.tau", XM_FIELD(c.train.tau)));
        t.push_back(real_entry("train.eps", XM_FIELD(c.train.eps)));
        t.push_back(real_entry("train.triplet_inter", XM_FIELD(c.train.triplet.inter)));
        t.push_back(real_entry("train.triplet_intra", XM_FIELD(c.train.triplet.intra)));
        t.push_back(bool_entry("train.plain_di", XM_FIELD(c.train.plain_di)));
        t.push_back(size_entry("train.k_steps", XM_FIELD(c.train.k_steps)));
        t.push_back(real_entry("train.reversal_weight", XM_FIELD(c.train.reversal_weight)));
        t.push_back(real_entry("train.lr1", XM_FIELD(c.train.lr1)));
        t.push_back(real_entry("train.lr2", XM_FIELD(c.train.lr2)));
        t.push_back(real_entry("train.lr_disc", XM_FIELD(c.train.lr_disc)));
        t.push_back(real_entry("train.lr_decay", XM_FIELD(c.train.lr_decay)));
        t.push_back(size_entry("train.lr_decay_every", XM_FIELD(c.train.lr_decay_every)));
        t.push_back(bool_entry("train.image_head_uses_lr1", XM_FIELD(c.train.image_head_uses_lr1)));
        t.push_back(enum_entry("train.optimizer", XM_FIELD(c.train.optimizer), parse_optimizer, optimizer_name));
        t.push_back(real_entry("train.adam_beta1", XM_FIELD(c.train.adam_beta1)));
        t.push_back(real_entry("train.adam_beta2", XM_FIELD(c.train.adam_beta2)));
        t.push_back(real_entry("train.adam_eps", XM_FIELD(c.train.adam_eps)));
        t.push_back(size_entry("train.epochs", XM_FIELD(c.train.epochs)));
        t.push_back(enum_entry("train.paradigm", XM_FIELD(c.train.paradigm), parse_paradigm, paradigm_name));
        t.push_back(enum_entry("train.preset", XM_FIELD(c.train.preset), parse_preset, preset_name));
        t.push_back(u64_entry("train.seed", XM_FIELD(c.train.seed)));
        t.push_back(bool_entry("train.verify_routing", XM_FIELD(c.train.verify_routing)));

        t.push_back(real_entry("probe.train_fraction", XM_FIELD(c.probe.train_fraction)));
        t.push_back(size_entry("probe.iterations", XM_FIELD(c.probe.iterations)));
        t.push_back(real_entry("probe.learning_rate", XM_FIELD(c.probe.learning_rate)));
        t.push_back(real_entry("probe.l2", XM_FIELD(c.probe.l2)));
        t.push_back(u64_entry("probe.seed", XM_FIELD(c.probe.seed)));

        t.push_back(enum_entry("eval.split", XM_FIELD(c.eval_split), parse_split, split_name));

        t.push_back(size_entry("gradcheck.embed_dim", XM_FIELD(c.gradcheck.embed_dim)));
        t.push_back(size_entry("gradcheck.batch", XM_FIELD(c.gradcheck.batch)));
        t.push_back(size_entry("gradcheck.labels", XM_FIELD(c.gradcheck.labels)));
        t.push_back(size_entry("gradcheck.image_dim", XM_FIELD(c.gradcheck.image_dim)));
        t.push_back(size_entry("gradcheck.text_dim", XM_FIELD(c.gradcheck.text_dim)));
        t.push_back(real_entry("gradcheck.tau", XM_FIELD(c.gradcheck.tau)));
        t.push_back(real_entry("gradcheck.margin", XM_FIELD(c.gradcheck.margin)));
        t.push_back(real_entry("gradcheck.step", XM_FIELD(c.gradcheck.step)));
        t.push_back(real_entry("gradcheck.tolerance", XM_FIELD(c.gradcheck.tolerance)));
        t.push_back(u64_entry("gradcheck.seed", XM_FIELD(c.gradcheck.seed)));
        return t;
    }();
    return entries;
}

#undef XM_FIELD

const Entry& find(std::string_view key) {
    for (const Entry& e : table()) {
        if (e.key == key) return e;
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
    const Entry& e = find(key);
    try {
        e.set(cfg, key, trim(value));
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& err) {
        throw ConfigError(std::string(key) + ": " + err.what());
    }
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
    apply_setting(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string get_setting(const RunConfig& cfg, std::string_view key) { return find(key).get(cfg); }

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const Entry& e : table()) keys.push_back(e.key);
    return keys;
}

void parse_config_text(RunConfig& cfg, std::string_view text, std::string_view origin) {
    std::string section;
    std::size_t lineno = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string_view line = raw;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = std::string(origin) + ":" + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = std::string(trim(line.substr(1, line.size() - 2)));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
        std::string key(trim(line.substr(0, eq)));
        if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
        try {
            apply_setting(cfg, key, line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    parse_config_text(cfg, ss.str(), path.string());
}

std::string dump_config(const RunConfig& cfg) {
    std::string out;
    std::string section;
    for (const Entry& e : table()) {
        const std::string sec = e.key.substr(0, e.key.find('.'));
        if (sec != section) {
            out += (section.empty() ? "[" : "\n[") + sec + "]\n";
            section = sec;
        }
        out += e.key.substr(sec.size() + 1) + " = " + e.get(cfg) + "\n";
    }
    return out;
}

}  // namespace xmodal
