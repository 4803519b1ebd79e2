#include "xmodal/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "xmodal/errors.hpp"

namespace xmodal {

namespace {

constexpr char kMagic[4] = {'X', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

enum : std::uint32_t { kParams = 1, kOptimizer = 2, kMeta = 3 };

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_ += s;
    }
    void tensor(const Tensor2& t) {
        u64(t.rows());
        u64(t.cols());
        for (double v : t.data()) u64(std::bit_cast<std::uint64_t>(v));
    }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string buf) : buf_(std::move(buf)) {}

    std::uint64_t le(int bytes) {
        need(static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
    std::string str() {
        const std::size_t n = u32();
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    Tensor2 tensor() {
        const std::uint64_t rows = u64(), cols = u64();
        if (cols != 0 && rows > (buf_.size() - pos_) / 8 / cols) throw CheckpointError("checkpoint truncated");
        Tensor2 t(rows, cols);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(u64());
        return t;
    }
    bool done() const { return pos_ == buf_.size(); }
    void expect_magic() {
        need(4);
        if (buf_.compare(0, 4, kMagic, 4) != 0) throw CheckpointError("not a checkpoint file");
        pos_ = 4;
    }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
    }
    std::string buf_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    Writer w;
    w.raw(kMagic, 4);
    w.u32(kVersion);
    const auto groups = ckpt.params.groups();
    w.u32(static_cast<std::uint32_t>(groups.size() + ckpt.optimizer.size() + 1));
    for (Group g : groups) {
        w.u32(kParams);
        w.str(std::string(group_name(g)));
        const auto& leaves = ckpt.params.group(g);
        w.u32(static_cast<std::uint32_t>(leaves.size()));
        for (const auto& leaf : leaves) {
            w.str(leaf.name);
            w.tensor(leaf.value);
        }
    }
    for (const auto& [name, leaves] : ckpt.optimizer) {
        w.u32(kOptimizer);
        w.str(name);
        w.u32(static_cast<std::uint32_t>(leaves.size()));
        for (const auto& leaf : leaves) {
            w.str(leaf.name);
            w.tensor(leaf.value);
        }
    }
    w.u32(kMeta);
    w.str("meta");
    w.u32(static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        w.str(k);
        w.str(v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    Reader r(ss.str());
    r.expect_magic();
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    const std::uint32_t sections = r.u32();
    for (std::uint32_t s = 0; s < sections; ++s) {
        const std::uint32_t kind = r.u32();
        const std::string name = r.str();
        const std::uint32_t entries = r.u32();
        if (kind == kParams || kind == kOptimizer) {
            Group g{};
            if (kind == kParams) {
                try {
                    g = parse_group(name);
                } catch (const ContractError&) {
                    throw CheckpointError("unknown parameter group '" + name + "' in checkpoint");
                }
            }
            for (std::uint32_t e = 0; e < entries; ++e) {
                std::string leaf = r.str();
                Tensor2 t = r.tensor();
                if (kind == kParams) {
                    ckpt.params.add(g, std::move(leaf), std::move(t));
                } else {
                    ckpt.optimizer[name].push_back({std::move(leaf), std::move(t)});
                }
            }
        } else if (kind == kMeta) {
            for (std::uint32_t e = 0; e < entries; ++e) {
                std::string k = r.str();
                ckpt.meta[k] = r.str();
            }
        } else {
            throw CheckpointError("unknown checkpoint section kind " + std::to_string(kind));
        }
    }
    if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
    return ckpt;
}

void restore_params(const ParameterStore& saved, ParameterStore& target) {
    if (saved.groups() != target.groups()) throw CheckpointError("checkpoint parameter groups differ from the model");
    for (Group g : target.groups()) {
        const auto& src = saved.group(g);
        auto& dst = target.group(g);
        if (src.size() != dst.size()) {
            throw CheckpointError("group " + std::string(group_name(g)) + ": leaf count differs from the model");
        }
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (src[i].name != dst[i].name || !src[i].value.same_shape(dst[i].value)) {
                throw CheckpointError("group " + std::string(group_name(g)) + " leaf " + dst[i].name + ": checkpoint has " +
                                      src[i].name + " " + src[i].value.shape_string() + ", model expects " +
                                      dst[i].value.shape_string());
            }
        }
    }
    for (Group g : target.groups()) target.group(g) = saved.group(g);
}

}  // namespace xmodal
