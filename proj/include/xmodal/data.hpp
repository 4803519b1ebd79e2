#pragma once

// Paired two-modality datasets: on-disk formats, batching and a synthetic
// generator.
//
// Feature store (.xmf), little-endian:
//   offset  size  field
//   0       4     magic "XMFS"
//   4       4     u32 format version (1)
//   8       4     u32 modality (0 image, 1 text)
//   12      4     u32 reserved, zero
//   16      8     u64 row count
//   24      8     u64 dimension
//   32      ...   row-major IEEE-754 float64 values, count * dim of them
//
// Manifest (text, one record per line, '#' starts a comment):
//   xmodal-manifest 1
//   images <feature store file, relative to the manifest>
//   texts <feature store file, relative to the manifest>
//   item id=<id> label=<int> split=<train|val|test> image=<row> texts=<row>[,<row>...]

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xmodal/projection.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

enum class Split { Train, Val, Test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

enum class Modality : std::uint32_t { Image = 0, Text = 1 };

struct ItemRecord {
    std::string id;
    std::size_t image_row = 0;
    std::vector<std::size_t> text_rows;
    Label label = 0;
    Split split = Split::Train;

    friend bool operator==(const ItemRecord&, const ItemRecord&) = default;
};

struct DatasetManifest {
    std::string image_store = "images.xmf";
    std::string text_store = "texts.xmf";
    std::vector<ItemRecord> items;

    /// Mean number of texts per image.
    double texts_per_image() const;
    std::size_t text_count() const;

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// A manifest with its resolved feature matrices. Labels are dense 0..C-1.
struct Dataset {
    DatasetManifest manifest;
    Tensor2 images;  ///< one row per image-feature record
    Tensor2 texts;   ///< one row per text-feature record
    std::size_t num_labels = 0;

    std::size_t image_dim() const { return images.cols(); }
    std::size_t text_dim() const { return texts.cols(); }
};

void write_feature_store(const std::filesystem::path& path, Modality modality, const Tensor2& features);
Tensor2 read_feature_store(const std::filesystem::path& path, Modality expected);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Reads a manifest and both stores, validating every reference. Labels in
/// the file may be any nonnegative integers; they are re-indexed densely in
/// ascending order.
Dataset load_features(const std::filesystem::path& manifest_path, const std::filesystem::path& images_path,
                      const std::filesystem::path& texts_path);
/// Resolves the store paths named inside the manifest.
Dataset load_dataset(const std::filesystem::path& manifest_path);
/// Writes manifest.txt plus both stores into `dir`.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Checks references, duplicates and label density; throws LoadError.
void validate(const Dataset& data);

/// One image-text pair; an image appears once per caption.
struct PairRef {
    std::size_t item;
    std::size_t image_row;
    std::size_t text_row;
    Label label;
};

/// All pairs of one split, in manifest order.
std::vector<PairRef> split_pairs(const Dataset& data, Split split);

/// Raw features of a mini-batch; row j of both sides is a ground-truth pair.
struct FeatureBatch {
    Tensor2 image;
    Tensor2 text;
    std::vector<Label> labels;
    std::vector<std::size_t> items;

    std::size_t size() const { return labels.size(); }
};

FeatureBatch gather_batch(const Dataset& data, std::span<const PairRef> pairs, std::span<const std::size_t> order);

/// Seeded shuffle of the split's pairs for `epoch`, cut into batches of
/// `batch_size`; the short tail is dropped.
std::vector<FeatureBatch> make_batches(const Dataset& data, Split split, std::size_t batch_size,
                                       std::uint64_t seed, std::uint64_t epoch);
/// Pair index order behind make_batches.
std::vector<std::vector<std::size_t>> batch_plan(std::size_t pair_count, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch);

struct SyntheticSpec {
    std::size_t num_classes = 20;
    std::size_t items_per_class = 50;
    std::size_t texts_per_image = 5;
    std::size_t image_dim = 32;
    std::size_t text_dim = 32;
    std::size_t latent_dim = 16;
    double sigma_between = 5.0;   ///< spread of class centers
    double sigma_within = 1.0;    ///< item noise around its center
    double view_noise = 0.3;      ///< per-view noise, as a multiple of sigma_within
    double modality_shift = 3.0;  ///< scale of each modality's random offset
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    std::uint64_t seed = 17;
};

/// Draws class centers once; each item is center + noise in a latent space,
/// and each view (the image and each caption) adds its own noise before a
/// fixed random affine map per modality. Items are split per class.
Dataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace xmodal
