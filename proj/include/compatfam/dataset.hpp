#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "compatfam/rng.hpp"
#include "compatfam/tensor.hpp"

namespace compatfam {

/// Modular class-shift relation: (x, y) compatible iff
/// class(y) == (class(x) + i) mod C for some shift i.
struct RelationSpec {
    int num_classes = 10;
    std::vector<int> positive_shifts = {1, 2};

    void validate() const;
    bool positive(int cx, int cy) const;
    std::vector<int> positive_classes(int cx) const;
};

/// Fixed-shape grayscale items with class labels. Labels drive dataset
/// synthesis and evaluation oracles only; they are never fed to a model.
struct ItemSet {
    Tensor images;  // [n, H, W], values in [0,1]
    std::vector<int> labels;
    std::vector<std::int64_t> ids;

    std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
    std::int64_t height() const { return images.shape()[1]; }
    std::int64_t width() const { return images.shape()[2]; }
    void validate(int num_classes) const;
};

/// Flattened feature view used by models: one row per item. The GAN/compat
/// stacks operate on this so that non-image toys (e.g. 2-D point clouds)
/// share the same training path.
struct FeatureSet {
    Tensor x;  // [n, d]
    std::vector<int> labels;
    std::vector<std::int64_t> ids;
    std::int64_t img_h = 0;  // 0 when the features are not images
    std::int64_t img_w = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
    std::int64_t dim() const { return x.cols(); }
    std::int64_t index_of(std::int64_t id) const;
};

FeatureSet flatten(const ItemSet& items);

struct PairTriple {
    std::int64_t query_id;
    std::int64_t candidate_id;
    int label;  // +1 or -1
};

struct PairSet {
    std::vector<PairTriple> triples;
    std::vector<double> weights;  // optional; empty means all 1
    std::string split;            // train|val|test

    std::int64_t size() const { return static_cast<std::int64_t>(triples.size()); }
    double weight(std::int64_t i) const { return weights.empty() ? 1.0 : weights[i]; }
};

/// Deterministic per-class glyphs (bars, boxes, diagonals) plus seeded
/// Gaussian pixel noise, clipped to [0,1]. Classes are linearly separable
/// on raw pixels by construction.
ItemSet gen_procedural_items(int per_class, const RelationSpec& spec, int image_size,
                             std::uint64_t seed);

ItemSet load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const ItemSet& items, const std::string& images_path,
              const std::string& labels_path);

struct SplitRatios {
    double train = 0.6, val = 0.2, test = 0.2;
};

/// Stratified, disjoint item split. Ids survive the split untouched.
std::array<ItemSet, 3> split_items(const ItemSet& items, SplitRatios ratios, std::uint64_t seed);

/// Pair sampling over explicit class labels (build_pairs delegates here so
/// non-ItemSet toys can reuse it). For each query: fair coin, then a uniform
/// candidate from the positive classes or from their complement.
PairSet build_pairs_from_labels(const std::vector<int>& labels,
                                const std::vector<std::int64_t>& ids, const RelationSpec& spec,
                                int pairs_per_item, std::uint64_t seed,
                                double positive_fraction = 0.5);

PairSet build_pairs(const ItemSet& items, const RelationSpec& spec, int pairs_per_item,
                    std::uint64_t seed, double positive_fraction = 0.5);

void save_pairs_csv(const PairSet& pairs, const std::string& path);
PairSet load_pairs_csv(const std::string& path);

void save_ids_csv(const std::vector<std::int64_t>& ids, const std::string& path);
std::vector<std::int64_t> load_ids_csv(const std::string& path);

}  // namespace compatfam
